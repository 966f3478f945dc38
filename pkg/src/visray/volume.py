"""Dense grid containers and the differentiable sampling/sweep kernels.

Memory layout contract: a VolumeGrid stores a C-contiguous (H, W, D, C)
array, so the flattened index of (h, w, d, c) is ((h*W + w)*D + d)*C + c.
FeatureMap stores (H, W, C). All samplers clamp out-of-range coordinates;
the only hard invalidity anywhere in the sweep is a point behind a camera.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .camera import Camera, FrustumGrid, plane_depth, project_many, unproject

VGRD_MAGIC = b"VGRD"


@dataclass
class VolumeGrid:
    data: np.ndarray  # (H, W, D, C)

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 3:
            a = a[..., None]
        if a.ndim != 4:
            raise ValueError(f"expected (H, W, D, C) data, got shape {a.shape}")
        self.data = np.ascontiguousarray(a)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def check_role(self, role: str):
        """Validate the value-range invariant for a density/alpha/visibility grid."""
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{role} volume contains non-finite values")
        if role == "density":
            if np.any(self.data < 0):
                raise ValueError("density volume has negative values")
        elif role in ("alpha", "visibility"):
            if np.any(self.data < -1e-7) or np.any(self.data > 1 + 1e-7):
                raise ValueError(f"{role} volume leaves [0, 1]")
        return self


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C)

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3:
            raise ValueError(f"expected (H, W, C) data, got shape {a.shape}")
        self.data = np.ascontiguousarray(a)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# Interpolation kernels.  The *_many forms are the vectorized workhorses; the
# scalar wrappers keep the one-point call sites readable.


def _corner_setup_1d(x, size):
    """Clamped floor index, fraction, and in-range mask for one axis."""
    xc = np.clip(x, 0.0, size - 1.0)
    if size == 1:
        i0 = np.zeros_like(xc, dtype=np.intp)
        f = np.zeros_like(xc)
        inside = np.zeros(np.shape(xc), dtype=bool)
    else:
        i0 = np.clip(np.floor(xc), 0, size - 2).astype(np.intp)
        f = xc - i0
        inside = (x > 0.0) & (x < size - 1.0)
    return i0, f, inside


def bilinear_many(data: np.ndarray, u, v):
    """Bilinear interpolation of (H, W, C) data at coordinate arrays u, v."""
    H, W, C = data.shape
    u0, fu, _ = _corner_setup_1d(np.asarray(u), W)
    v0, fv, _ = _corner_setup_1d(np.asarray(v), H)
    flat = data.reshape(-1, C)
    base = v0 * W + u0
    c00 = flat[base]
    c01 = flat[base + (1 if W > 1 else 0)]
    c10 = flat[base + (W if H > 1 else 0)]
    c11 = flat[base + (W if H > 1 else 0) + (1 if W > 1 else 0)]
    fu = fu[..., None]
    fv = fv[..., None]
    return (1 - fv) * ((1 - fu) * c00 + fu * c01) + fv * ((1 - fu) * c10 + fu * c11)


def bilinear_many_grad(data: np.ndarray, u, v, upstream, grad_data=None):
    """Backward of bilinear_many.

    Accumulates d(out)/d(data) @ upstream into grad_data (created if None)
    and returns (grad_data, du, dv). Coordinate gradients are zero where the
    forward pass clamped.
    """
    H, W, C = data.shape
    u = np.asarray(u)
    v = np.asarray(v)
    upstream = np.asarray(upstream)
    u0, fu, in_u = _corner_setup_1d(u, W)
    v0, fv, in_v = _corner_setup_1d(v, H)
    du_step = 1 if W > 1 else 0
    dv_step = W if H > 1 else 0
    base = (v0 * W + u0).reshape(-1)
    up = upstream.reshape(-1, C)
    fuf = fu.reshape(-1, 1)
    fvf = fv.reshape(-1, 1)

    if grad_data is None:
        grad_data = np.zeros_like(data)
    gflat = grad_data.reshape(-1, C)
    scatter_rows(gflat, base, (1 - fuf) * (1 - fvf) * up)
    scatter_rows(gflat, base + du_step, fuf * (1 - fvf) * up)
    scatter_rows(gflat, base + dv_step, (1 - fuf) * fvf * up)
    scatter_rows(gflat, base + dv_step + du_step, fuf * fvf * up)

    flat = data.reshape(-1, C)
    c00 = flat[base]
    c01 = flat[base + du_step]
    c10 = flat[base + dv_step]
    c11 = flat[base + dv_step + du_step]
    dout_dfu = (1 - fvf) * (c01 - c00) + fvf * (c11 - c10)
    dout_dfv = (1 - fuf) * (c10 - c00) + fuf * (c11 - c01)
    du = np.sum(dout_dfu * up, axis=-1) * in_u.reshape(-1)
    dv = np.sum(dout_dfv * up, axis=-1) * in_v.reshape(-1)
    return grad_data, du.reshape(u.shape), dv.reshape(v.shape)


def trilinear_many(data: np.ndarray, u, v, d):
    """Trilinear interpolation of (H, W, D, C) data at voxel coordinates.

    u indexes the W axis, v the H axis, d the depth axis, matching the
    (column, row, plane) voxel convention of FrustumGrid.
    """
    H, W, D, C = data.shape
    u0, fu, _ = _corner_setup_1d(np.asarray(u), W)
    v0, fv, _ = _corner_setup_1d(np.asarray(v), H)
    d0, fd, _ = _corner_setup_1d(np.asarray(d), D)
    su = D if W > 1 else 0
    sv = W * D if H > 1 else 0
    sd = 1 if D > 1 else 0
    flat = data.reshape(-1, C)
    base = (v0 * W + u0) * D + d0
    fu = fu[..., None]
    fv = fv[..., None]
    fd = fd[..., None]
    out = np.zeros(base.shape + (C,), dtype=data.dtype)
    for dv_, wv in ((0, 1 - fv), (sv, fv)):
        for du_, wu in ((0, 1 - fu), (su, fu)):
            w_uv = wv * wu
            out += w_uv * ((1 - fd) * flat[base + dv_ + du_] + fd * flat[base + dv_ + du_ + sd])
    return out


def trilinear_many_grad(data: np.ndarray, u, v, d, upstream, grad_data=None):
    """Backward of trilinear_many; returns (grad_data, du, dv, dd)."""
    H, W, D, C = data.shape
    u = np.asarray(u)
    v = np.asarray(v)
    d = np.asarray(d)
    u0, fu, in_u = _corner_setup_1d(u, W)
    v0, fv, in_v = _corner_setup_1d(v, H)
    d0, fd, in_d = _corner_setup_1d(d, D)
    su = D if W > 1 else 0
    sv = W * D if H > 1 else 0
    sd = 1 if D > 1 else 0
    base = ((v0 * W + u0) * D + d0).reshape(-1)
    up = np.asarray(upstream).reshape(-1, C)
    fuf = fu.reshape(-1, 1)
    fvf = fv.reshape(-1, 1)
    fdf = fd.reshape(-1, 1)

    if grad_data is None:
        grad_data = np.zeros_like(data)
    gflat = grad_data.reshape(-1, C)
    flat = data.reshape(-1, C)
    du = np.zeros(base.shape, dtype=up.dtype)
    dv = np.zeros(base.shape, dtype=up.dtype)
    dd = np.zeros(base.shape, dtype=up.dtype)
    for dv_, wv, sv_sign in ((0, 1 - fvf, -1.0), (sv, fvf, 1.0)):
        for du_, wu, su_sign in ((0, 1 - fuf, -1.0), (su, fuf, 1.0)):
            c_lo = flat[base + dv_ + du_]
            c_hi = flat[base + dv_ + du_ + sd]
            w_uv = wv * wu
            scatter_rows(gflat, base + dv_ + du_, w_uv * (1 - fdf) * up)
            scatter_rows(gflat, base + dv_ + du_ + sd, w_uv * fdf * up)
            interp_d = (1 - fdf) * c_lo + fdf * c_hi
            contrib = np.sum(interp_d * up, axis=-1)
            du += su_sign * (wv[:, 0] * contrib)
            dv += sv_sign * (wu[:, 0] * contrib)
            dd += np.sum(w_uv * (c_hi - c_lo) * up, axis=-1)
    du *= in_u.reshape(-1)
    dv *= in_v.reshape(-1)
    dd *= in_d.reshape(-1)
    return grad_data, du.reshape(u.shape), dv.reshape(v.shape), dd.reshape(d.shape)


def scatter_rows(acc2d: np.ndarray, idx: np.ndarray, vals2d: np.ndarray):
    """acc2d[idx] += vals2d with repeated indices, via per-channel bincount."""
    n = acc2d.shape[0]
    for c in range(acc2d.shape[1]):
        acc2d[:, c] += np.bincount(idx, weights=vals2d[:, c], minlength=n).astype(acc2d.dtype, copy=False)


def bilinear_sample(fmap: FeatureMap, u: float, v: float) -> np.ndarray:
    """Single-point bilinear sample, clamped to the map rectangle."""
    return bilinear_many(fmap.data, np.float64(u), np.float64(v))


def bilinear_sample_grad(fmap: FeatureMap, u: float, v: float, upstream, grad_data=None):
    return bilinear_many_grad(fmap.data, np.float64(u), np.float64(v), np.asarray(upstream), grad_data)


def trilinear_sample(vol: VolumeGrid, u: float, v: float, d: float) -> np.ndarray:
    return trilinear_many(vol.data, np.float64(u), np.float64(v), np.float64(d))


def trilinear_sample_grad(vol: VolumeGrid, u: float, v: float, d: float, upstream, grad_data=None):
    return trilinear_many_grad(vol.data, np.float64(u), np.float64(v), np.float64(d), np.asarray(upstream), grad_data)


# ---------------------------------------------------------------------------
# Frustum sweep


def build_frustum_points(grid: FrustumGrid, dtype=np.float64) -> np.ndarray:
    """World positions of every frustum voxel center, shape (H, W, D, 3)."""
    cam = grid.camera
    D = grid.planes.plane_count
    u_px, _ = grid.voxel_to_pixel(np.arange(grid.grid_w), 0.0)
    _, v_px = grid.voxel_to_pixel(0.0, np.arange(grid.grid_h))
    depths = plane_depth(grid.planes, np.arange(D))
    # unproject(u, v, 1) splits into a per-pixel direction times depth plus origin
    uu = np.broadcast_to(u_px[None, :], (grid.grid_h, grid.grid_w))
    vv = np.broadcast_to(v_px[:, None], (grid.grid_h, grid.grid_w))
    dirs = unproject(cam, uu, vv, np.ones_like(uu)) - cam.center
    pts = cam.center + dirs[:, :, None, :] * depths[None, None, :, None]
    return pts.astype(dtype, copy=False)


def image_to_map_coords(u_px, v_px, cam: Camera, map_h: int, map_w: int):
    """Full-image pixel coordinates to feature-map coordinates (pixel centers align)."""
    su = map_w / cam.width
    sv = map_h / cam.height
    return (np.asarray(u_px) + 0.5) * su - 0.5, (np.asarray(v_px) + 0.5) * sv - 0.5


def sweep_features(points: np.ndarray, views: list):
    """Project frustum points into each view and sample its feature map.

    points: (H, W, D, 3) world positions; views: list of (Camera, FeatureMap).
    Returns (feats (N, H, W, D, C), valid (N, H, W, D)). Points behind a
    camera get the zero vector and valid=False.
    """
    if len(views) < 1:
        raise ValueError("need at least one view")
    feats = []
    valids = []
    for cam, fmap in views:
        u, v, _, valid = project_many(cam, points)
        mh, mw, _ = fmap.data.shape
        mu, mv = image_to_map_coords(u, v, cam, mh, mw)
        f = bilinear_many(fmap.data, mu, mv)
        f[~valid] = 0
        feats.append(f)
        valids.append(valid)
    return np.stack(feats), np.stack(valids)


def variance_fuse(per_view: np.ndarray, valid: np.ndarray, include_mean: bool = False):
    """Per-voxel population variance of multi-view features over the valid views.

    per_view: (N, H, W, D, C); valid: (N, H, W, D). Voxels seen by fewer than
    2 views get variance 0 and fused_valid=False. With include_mean the
    per-view mean is appended as extra channels.
    """
    per_view = np.asarray(per_view)
    if per_view.ndim != 5 or per_view.shape[0] < 2:
        raise ValueError("need >= 2 per-view volumes of identical shape")
    if valid.shape != per_view.shape[:4]:
        raise ValueError("validity mask shape mismatch")
    m = valid[..., None].astype(per_view.dtype)
    count = np.sum(m, axis=0)
    fused_valid = count[..., 0] >= 2
    safe = np.maximum(count, 1.0)
    mean = np.sum(per_view * m, axis=0) / safe
    var = np.sum(m * (per_view - mean[None]) ** 2, axis=0) / safe
    var[~fused_valid] = 0
    if include_mean:
        mean = mean.copy()
        mean[~fused_valid] = 0
        return VolumeGrid(np.concatenate([var, mean], axis=-1)), fused_valid
    return VolumeGrid(var), fused_valid


def variance_fuse_grad(per_view, valid, upstream, include_mean=False):
    """Backward of variance_fuse: upstream (H, W, D, C_out) -> (N, H, W, D, C)."""
    per_view = np.asarray(per_view)
    C = per_view.shape[-1]
    m = valid[..., None].astype(per_view.dtype)
    count = np.sum(m, axis=0)
    fused_valid = count[..., 0] >= 2
    safe = np.maximum(count, 1.0)
    mean = np.sum(per_view * m, axis=0) / safe
    up_var = np.asarray(upstream)[..., :C].copy()
    up_var[~fused_valid] = 0
    # d var / d f_i = (2/M) m_i (f_i - mean); the mean term cancels exactly
    grad = (2.0 / safe[None]) * m * (per_view - mean[None]) * up_var[None]
    if include_mean:
        up_mean = np.asarray(upstream)[..., C:].copy()
        up_mean[~fused_valid] = 0
        grad += m * up_mean[None] / safe[None]
    return grad


# ---------------------------------------------------------------------------
# VGRD volume file format: 16-byte header (magic, u32 H W D C little-endian)
# followed by raw little-endian float32 in (H, W, D, C) C-order.


def save_volume(path, vol: VolumeGrid):
    H, W, D, C = vol.data.shape
    with open(path, "wb") as f:
        f.write(VGRD_MAGIC)
        f.write(struct.pack("<IIII", H, W, D, C))
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def load_volume(path) -> VolumeGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != VGRD_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {VGRD_MAGIC!r}")
        H, W, D, C = struct.unpack("<IIII", f.read(16))
        payload = f.read()
    expect = H * W * D * C * 4
    if len(payload) != expect:
        raise ValueError(f"{path}: expected {expect} payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(H, W, D, C)
    return VolumeGrid(data.astype(np.float32))
