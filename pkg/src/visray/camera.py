"""Pinhole cameras, frustum grids, and the coordinate transforms between them.

Conventions (fixed once, everything downstream depends on them):
  - right-handed, camera looks down +z, pixel origin at the image top-left
  - world -> camera is stored as (R, t):  q = R @ p + t
  - a voxel column (u, v) of a frustum grid maps to the pixel center
    ((u + 0.5) * sx - 0.5, (v + 0.5) * sy - 0.5) at image scale
    sx = width / grid_w, sy = height / grid_h
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

EPS_DEPTH = 1e-9


class BehindCameraError(ValueError):
    """Point projects to non-positive depth."""


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Camera":
        missing = {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"} - set(d)
        if missing:
            raise ValueError(f"camera JSON missing keys: {sorted(missing)}")
        rot = np.asarray(d["rotation"], dtype=np.float64)
        if rot.size != 9:
            raise ValueError("rotation must have 9 entries (row-major 3x3)")
        tr = np.asarray(d["translation"], dtype=np.float64)
        if tr.size != 3:
            raise ValueError("translation must have 3 entries")
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=rot.reshape(3, 3),
            translation=tr,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s: str) -> "Camera":
        return cls.from_json_dict(json.loads(s))


@dataclass(frozen=True)
class DepthPlaneMap:
    """Uniform depth planes between the near and far bounds of a frustum."""

    t_near: float
    t_far: float
    plane_count: int

    def __post_init__(self):
        if not (0 < self.t_near < self.t_far):
            raise ValueError("need 0 < t_near < t_far")
        if self.plane_count < 1:
            raise ValueError("plane_count must be positive")

    @property
    def plane_spacing(self) -> float:
        return (self.t_far - self.t_near) / self.plane_count


def plane_depth(planes: DepthPlaneMap, d) -> np.ndarray:
    """Depth of (possibly fractional) plane index d, linear from t_near to t_far."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(d > planes.plane_count):
        raise ValueError(f"plane index out of range [0, {planes.plane_count}]")
    return planes.t_near + d * (planes.t_far - planes.t_near) / planes.plane_count


def plane_index(planes: DepthPlaneMap, z) -> np.ndarray:
    """Exact inverse of plane_depth; z must lie within [t_near, t_far]."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < planes.t_near) or np.any(z > planes.t_far):
        raise ValueError(f"depth out of range [{planes.t_near}, {planes.t_far}]")
    return (z - planes.t_near) / (planes.t_far - planes.t_near) * planes.plane_count


@dataclass(frozen=True)
class FrustumGrid:
    """A camera frustum discretized to grid_w x grid_h voxel columns and D depth planes."""

    camera: Camera
    planes: DepthPlaneMap
    grid_w: int
    grid_h: int

    def __post_init__(self):
        if self.grid_w < 2 or self.grid_h < 2:
            raise ValueError("grid must be at least 2x2")
        if self.planes.plane_count < 2:
            raise ValueError("need at least 2 depth planes")

    @property
    def scale_x(self) -> float:
        return self.camera.width / self.grid_w

    @property
    def scale_y(self) -> float:
        return self.camera.height / self.grid_h

    def voxel_to_pixel(self, u, v):
        """Voxel column/row coordinates to full-image pixel coordinates."""
        return (np.asarray(u) + 0.5) * self.scale_x - 0.5, (np.asarray(v) + 0.5) * self.scale_y - 0.5

    def pixel_to_voxel(self, u_px, v_px):
        return (np.asarray(u_px) + 0.5) / self.scale_x - 0.5, (np.asarray(v_px) + 0.5) / self.scale_y - 0.5


def project(camera: Camera, p: np.ndarray):
    """World point -> (pixel u, pixel v, camera depth z). Raises behind the camera."""
    q = camera.rotation @ np.asarray(p, dtype=np.float64) + camera.translation
    if q[2] <= EPS_DEPTH:
        raise BehindCameraError(f"point has camera depth {q[2]:g}")
    u = camera.fx * q[0] / q[2] + camera.cx
    v = camera.fy * q[1] / q[2] + camera.cy
    return u, v, q[2]


def project_many(camera: Camera, pts: np.ndarray):
    """Vectorized projection of (..., 3) world points.

    Returns (u, v, z, valid); u/v are unreliable where valid is False
    (point at or behind the camera plane).
    """
    pts = np.asarray(pts)
    q = pts @ camera.rotation.astype(pts.dtype).T + camera.translation.astype(pts.dtype)
    z = q[..., 2]
    valid = z > EPS_DEPTH
    zsafe = np.where(valid, z, 1.0)
    u = camera.fx * q[..., 0] / zsafe + camera.cx
    v = camera.fy * q[..., 1] / zsafe + camera.cy
    return u, v, z, valid


def project_backward(camera: Camera, pts: np.ndarray, du, dv, dz):
    """Adjoint of project_many: upstream (du, dv, dz) -> gradient w.r.t. pts.

    pts must be in front of the camera wherever the upstream is nonzero.
    """
    R = camera.rotation
    q = np.asarray(pts) @ R.T + camera.translation
    qz = q[..., 2]
    qz = np.where(qz > EPS_DEPTH, qz, 1.0)
    gqx = du * (camera.fx / qz)
    gqy = dv * (camera.fy / qz)
    gqz = dz - gqx * q[..., 0] / qz - gqy * q[..., 1] / qz
    return np.stack([gqx, gqy, gqz], axis=-1) @ R


def project_jacobian(camera: Camera, p: np.ndarray) -> np.ndarray:
    """Analytic 3x3 Jacobian d(u, v, z)/dp of project at world point p."""
    R = camera.rotation
    q = R @ np.asarray(p, dtype=np.float64) + camera.translation
    if q[2] <= EPS_DEPTH:
        raise BehindCameraError(f"point has camera depth {q[2]:g}")
    J = np.empty((3, 3))
    J[0] = camera.fx * (R[0] * q[2] - q[0] * R[2]) / q[2] ** 2
    J[1] = camera.fy * (R[1] * q[2] - q[1] * R[2]) / q[2] ** 2
    J[2] = R[2]
    return J


def unproject(camera: Camera, u, v, z):
    """Pixel + depth -> world point; exact inverse of project."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    qx = (u - camera.cx) / camera.fx * z
    qy = (v - camera.cy) / camera.fy * z
    q = np.stack(np.broadcast_arrays(qx, qy, z), axis=-1)
    return (q - camera.translation) @ camera.rotation


def ray_through_pixel(camera: Camera, u_px, v_px):
    """Ray origin (camera center) and depth-parameterized direction for a pixel.

    The returned direction is scaled so that origin + z * dir sits at camera
    depth exactly z, matching the plane-sweep depth parameterization.
    """
    origin = camera.center
    p1 = unproject(camera, u_px, v_px, np.ones_like(np.asarray(u_px, dtype=np.float64)))
    return origin, p1 - origin


def select_nearest_views(novel: Camera, pool: list, n: int) -> list:
    """Indices of the n pool cameras closest to novel by center distance.

    Sorted ascending by distance; ties broken by ascending pool index.
    """
    if not pool:
        raise ValueError("camera pool is empty")
    if not (1 <= n <= len(pool)):
        raise ValueError(f"n must be in [1, {len(pool)}]")
    c = novel.center
    dists = np.array([np.linalg.norm(cam.center - c) for cam in pool])
    order = np.lexsort((np.arange(len(pool)), dists))
    return [int(i) for i in order[:n]]
