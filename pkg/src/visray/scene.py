"""Synthetic multi-view scenes, dense ray-march oracles, metrics, dataset I/O.

Scenes are analytic density + RGB fields built from smooth primitives
(slabs, spheres, textured planes are thin slabs). The oracles march those
fields directly and serve as ground truth for the whole pipeline; they
never touch the voxel grids or samplers under test.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import Camera, FrustumGrid, unproject
from .volume import VolumeGrid, build_frustum_points


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _smooth01(t):
    """C1 smoothstep ramp clamped to [0, 1]; compact support."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class Primitive:
    kind: str  # "slab" | "sphere"
    density: float
    softness: float
    texture: dict
    lo: np.ndarray | None = None  # slab corners
    hi: np.ndarray | None = None
    center: np.ndarray | None = None  # sphere
    radius: float = 0.0
    profile: str = "sigmoid"  # "sigmoid" (smooth everywhere) | "smoothstep" (compact support)

    def membership(self, pts: np.ndarray) -> np.ndarray:
        """Smooth [0, 1] occupancy at world points (..., 3)."""
        s = max(self.softness, 1e-6)
        if self.profile == "smoothstep":
            if self.kind == "slab":
                m = np.ones(pts.shape[:-1])
                for ax in range(3):
                    m = m * _smooth01((pts[..., ax] - self.lo[ax]) / s)
                    m = m * _smooth01((self.hi[ax] - pts[..., ax]) / s)
                return m
            if self.kind == "sphere":
                r = np.linalg.norm(pts - self.center, axis=-1)
                return _smooth01((self.radius - r) / s)
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "slab":
            m = np.ones(pts.shape[:-1])
            for ax in range(3):
                m = m * _sigmoid((pts[..., ax] - self.lo[ax]) / s)
                m = m * _sigmoid((self.hi[ax] - pts[..., ax]) / s)
            return m
        if self.kind == "sphere":
            r = np.linalg.norm(pts - self.center, axis=-1)
            return _sigmoid((self.radius - r) / s)
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def color(self, pts: np.ndarray) -> np.ndarray:
        t = self.texture
        kind = t.get("kind", "solid")
        if kind == "solid":
            return np.broadcast_to(np.asarray(t["color"], dtype=np.float64), pts.shape).copy()
        if kind == "checker":
            scale = t.get("scale", 2.0)
            parity = np.zeros(pts.shape[:-1], dtype=np.int64)
            for ax in t.get("axes", (0, 1, 2)):
                parity += np.floor(pts[..., ax] * scale).astype(np.int64)
            pick = (parity % 2).astype(bool)
            c0 = np.asarray(t["colors"][0], dtype=np.float64)
            c1 = np.asarray(t["colors"][1], dtype=np.float64)
            return np.where(pick[..., None], c1, c0)
        if kind == "sinusoid":
            # smooth band-limited texture, kind to downsampling
            freq = np.asarray(t.get("freq", [2.0, 3.0, 0.0]), dtype=np.float64)
            phase = float(t.get("phase", 0.0))
            base = np.asarray(t.get("colors", [[0.9, 0.3, 0.2], [0.1, 0.5, 0.9]])[0], dtype=np.float64)
            other = np.asarray(t.get("colors", [[0.9, 0.3, 0.2], [0.1, 0.5, 0.9]])[1], dtype=np.float64)
            wave = 0.5 + 0.5 * np.sin(pts @ freq + phase)
            return base + wave[..., None] * (other - base)
        raise ValueError(f"unknown texture kind {kind!r}")


@dataclass
class SyntheticScene:
    primitives: list[Primitive] = field(default_factory=list)

    def density(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        out = np.zeros(pts.shape[:-1])
        for prim in self.primitives:
            out += prim.density * prim.membership(pts)
        return out

    def rgb(self, pts: np.ndarray) -> np.ndarray:
        """Density-weighted blend of primitive colors; black in empty space."""
        pts = np.asarray(pts, dtype=np.float64)
        num = np.zeros(pts.shape)
        den = np.zeros(pts.shape[:-1])
        for prim in self.primitives:
            w = prim.density * prim.membership(pts)
            num += w[..., None] * prim.color(pts)
            den += w
        return num / np.maximum(den, 1e-12)[..., None]


def generate_scene(spec: dict, seed: int = 0) -> SyntheticScene:
    """Build a scene from a spec dict; any randomized fields are seeded.

    spec keys: "primitives" (explicit list of primitive dicts) and/or
    "random_spheres"/"random_slabs" counts with "bounds" {center, extent},
    "density", "softness" defaults for the randomized ones.
    """
    if not isinstance(spec, dict):
        raise ValueError("scene spec must be a dict")
    rng = np.random.default_rng(seed)
    prims = []
    for p in spec.get("primitives", []):
        prims.append(_primitive_from_dict(p))
    bounds = spec.get("bounds", {"center": [0.0, 0.0, 0.0], "extent": 1.0})
    center = np.asarray(bounds["center"], dtype=np.float64)
    extent = float(bounds["extent"])
    base_density = float(spec.get("density", 6.0))
    softness = float(spec.get("softness", 0.08))
    profile = spec.get("profile", "sigmoid")
    for _ in range(int(spec.get("random_spheres", 0))):
        c = center + rng.uniform(-0.6, 0.6, size=3) * extent
        prims.append(
            Primitive(
                kind="sphere",
                density=base_density * rng.uniform(0.5, 1.5),
                softness=softness,
                texture={"kind": "solid", "color": rng.uniform(0.2, 0.9, size=3).tolist()},
                center=c,
                radius=extent * rng.uniform(0.15, 0.35),
                profile=profile,
            )
        )
    for _ in range(int(spec.get("random_slabs", 0))):
        c = center + rng.uniform(-0.5, 0.5, size=3) * extent
        half = extent * rng.uniform(0.1, 0.35, size=3)
        prims.append(
            Primitive(
                kind="slab",
                density=base_density * rng.uniform(0.5, 1.5),
                softness=softness,
                texture={"kind": "solid", "color": rng.uniform(0.2, 0.9, size=3).tolist()},
                lo=c - half,
                hi=c + half,
                profile=profile,
            )
        )
    return SyntheticScene(prims)


def _primitive_from_dict(p: dict) -> Primitive:
    kind = p.get("kind")
    if kind not in ("slab", "sphere"):
        raise ValueError(f"primitive kind must be slab or sphere, got {kind!r}")
    common = dict(
        kind=kind,
        density=float(p.get("density", 6.0)),
        softness=float(p.get("softness", 0.05)),
        texture=p.get("texture", {"kind": "solid", "color": [0.8, 0.8, 0.8]}),
        profile=p.get("profile", "sigmoid"),
    )
    if kind == "slab":
        return Primitive(lo=np.asarray(p["lo"], dtype=np.float64), hi=np.asarray(p["hi"], dtype=np.float64), **common)
    return Primitive(center=np.asarray(p["center"], dtype=np.float64), radius=float(p["radius"]), **common)


# ---------------------------------------------------------------------------
# Camera rigs


def look_at_camera(position, target, fov_deg, width, height, up=(0.0, 0.0, 1.0)) -> Camera:
    """Pinhole camera at `position` looking at `target`, z-up world."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    fx = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(
        fx=fx,
        fy=fx,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        rotation=R,
        translation=-R @ position,
    )


def ring_rig(count, radius, elevation_deg, target, fov_deg, width, height) -> list[Camera]:
    """Ring of cameras around `target`, evenly spaced in azimuth."""
    target = np.asarray(target, dtype=np.float64)
    elev = np.deg2rad(elevation_deg)
    cams = []
    for k in range(count):
        a = 2 * np.pi * k / count
        pos = target + radius * np.array([np.cos(elev) * np.cos(a), np.cos(elev) * np.sin(a), np.sin(elev)])
        cams.append(look_at_camera(pos, target, fov_deg, width, height))
    return cams


def voxelize_scene_density(scene: SyntheticScene, frustum: FrustumGrid, dtype=np.float64) -> VolumeGrid:
    """Evaluate the analytic density at every frustum voxel center."""
    pts = build_frustum_points(frustum)
    return VolumeGrid(scene.density(pts).astype(dtype)[..., None])


# ---------------------------------------------------------------------------
# Brute-force oracles


def oracle_render(scene: SyntheticScene, camera: Camera, t_near, t_far, step, chunk=8192):
    """Dense ray march of the analytic fields; returns (image, depth_map).

    Marches depth midpoints from t_near to t_far; each segment's optical
    depth is density * depth-step * (arc length per unit depth) so the
    integral is over true arc length.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dirs = unproject(camera, uu, vv, np.ones_like(uu)) - camera.center
    dirs = dirs.reshape(-1, 3)
    n_steps = max(1, int(np.ceil((t_far - t_near) / step)))
    h = (t_far - t_near) / n_steps
    z_mid = t_near + (np.arange(n_steps) + 0.5) * h
    img = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    for lo in range(0, H * W, chunk):
        hi = min(lo + chunk, H * W)
        d = dirs[lo:hi]
        arc = np.linalg.norm(d, axis=-1)
        pts = camera.center + d[:, None, :] * z_mid[None, :, None]
        sigma = scene.density(pts)
        rgb = scene.rgb(pts)
        tau = sigma * (h * arc[:, None])
        trans = np.exp(-np.cumsum(tau, axis=1))
        trans = np.roll(trans, 1, axis=1)
        trans[:, 0] = 1.0
        w = trans * (1.0 - np.exp(-tau))
        img[lo:hi] = np.sum(w[..., None] * rgb, axis=1)
        depth[lo:hi] = np.sum(w * z_mid, axis=1)
    return np.clip(img.reshape(H, W, 3), 0.0, 1.0), depth.reshape(H, W)


def oracle_point_visibility(scene, camera: Camera, p, step) -> float:
    """Transmittance exp(-integral of density) from the camera center to p."""
    return float(oracle_point_visibility_many(scene, camera, np.asarray(p)[None], step)[0])


def oracle_point_visibility_many(scene, camera: Camera, pts: np.ndarray, step) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    q = pts @ camera.rotation.T + camera.translation
    if np.any(q[..., 2] <= 0):
        raise ValueError("point behind camera")
    c = camera.center
    seg = pts - c
    length = np.linalg.norm(seg, axis=-1)
    n_steps = max(1, int(np.ceil(np.max(length) / step)))
    # common fractional midpoints, per-point arc scaling
    fracs = (np.arange(n_steps) + 0.5) / n_steps
    sample_pts = c + seg[:, None, :] * fracs[None, :, None]
    sigma = scene.density(sample_pts)
    tau = np.sum(sigma, axis=1) * (length / n_steps)
    return np.exp(-tau)


# ---------------------------------------------------------------------------
# Image metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical -> 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean SSIM with the standard Gaussian window, dynamic range 1."""
    from scipy.signal import convolve2d

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image sides must be >= {window}")
    kern = _gaussian_window(window, sigma)
    c1 = k1**2
    c2 = k2**2
    vals = []
    for c in range(a.shape[2]):
        x = a[..., c]
        y = b[..., c]
        mu_x = convolve2d(x, kern, mode="valid")
        mu_y = convolve2d(y, kern, mode="valid")
        xx = convolve2d(x * x, kern, mode="valid") - mu_x**2
        yy = convolve2d(y * y, kern, mode="valid") - mu_y**2
        xy = convolve2d(x * y, kern, mode="valid") - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (xx + yy + c2))
        vals.append(np.mean(s))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Multi-view datasets


@dataclass
class MultiViewDataset:
    cameras: list[Camera]
    images: list[np.ndarray]  # (H, W, 3) float in [0, 1]
    t_near: float
    t_far: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("camera/image count mismatch")
        if len(self.cameras) < 2:
            raise ValueError("dataset needs at least 2 views")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise ValueError(f"images disagree on shape: {shapes}")

    def __len__(self):
        return len(self.cameras)


def render_dataset(scene, cameras, t_near, t_far, step) -> MultiViewDataset:
    images = [oracle_render(scene, cam, t_near, t_far, step)[0] for cam in cameras]
    return MultiViewDataset(list(cameras), images, float(t_near), float(t_far))


def save_dataset(path, dataset: MultiViewDataset, float_sidecar: bool = False):
    os.makedirs(path, exist_ok=True)
    views = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        name = f"view_{i:03d}.png"
        arr8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr8).save(os.path.join(path, name))
        entry = {"camera": cam.to_json_dict(), "image": name}
        if float_sidecar:
            raw = f"view_{i:03d}.npy"
            np.save(os.path.join(path, raw), np.asarray(img, dtype=np.float32))
            entry["raw"] = raw
        views.append(entry)
    manifest = {
        "format": 1,
        "t_near": dataset.t_near,
        "t_far": dataset.t_far,
        "views": views,
        "meta": dataset.meta,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(path) -> MultiViewDataset:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise IOError(f"missing manifest: {mpath}")
    except json.JSONDecodeError as e:
        raise IOError(f"corrupt manifest {mpath}: {e}")
    if manifest.get("format") != 1:
        raise IOError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    cams = []
    images = []
    for view in manifest["views"]:
        cams.append(Camera.from_json_dict(view["camera"]))
        if "raw" in view and os.path.exists(os.path.join(path, view["raw"])):
            images.append(np.load(os.path.join(path, view["raw"])).astype(np.float64))
            continue
        ipath = os.path.join(path, view["image"])
        if not os.path.exists(ipath):
            raise IOError(f"missing image file: {ipath}")
        images.append(np.asarray(Image.open(ipath), dtype=np.float64) / 255.0)
    return MultiViewDataset(cams, images, float(manifest["t_near"]), float(manifest["t_far"]), manifest.get("meta", {}))
