"""Explicit per-view visibility volumes derived from one novel-view density volume.

The novel view's density volume is warped into each input view's frustum,
converted to per-plane alpha, and accumulated front to back into a
transmittance (visibility) volume. Because every view's volume is resampled
from the same density field, the visibility estimates are globally
consistent across views by construction. Point queries trilinearly sample
these volumes; everything is differentiable back to the novel density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, DepthPlaneMap, FrustumGrid, project_backward, project_many
from .volume import VolumeGrid, build_frustum_points, trilinear_many, trilinear_many_grad

ALPHA_CLAMP = 1.0 - 1e-6


@dataclass
class ViewVisibility:
    view_index: int
    frustum: FrustumGrid
    density: VolumeGrid  # novel density resampled into this view's frustum
    alpha: VolumeGrid
    visibility: VolumeGrid
    resample_cache: dict


def resample_density(novel_density: VolumeGrid, novel_frustum: FrustumGrid, input_frustum: FrustumGrid):
    """Warp the novel view's density volume into an input view's frustum.

    Every input voxel center is lifted to world space, projected into the
    novel camera, mapped to novel voxel coordinates, and trilinearly
    sampled. Voxels landing outside the novel frustum get density 0.
    Returns (VolumeGrid, cache) with the warp coordinates retained for the
    backward pass.
    """
    pts = build_frustum_points(input_frustum, dtype=novel_density.data.dtype)
    u_px, v_px, z, valid = project_many(novel_frustum.camera, pts)
    planes = novel_frustum.planes
    cam = novel_frustum.camera
    inside = (
        valid
        & (z >= planes.t_near)
        & (z <= planes.t_far)
        & (u_px >= 0)
        & (u_px <= cam.width - 1)
        & (v_px >= 0)
        & (v_px <= cam.height - 1)
    )
    u_vox, v_vox = novel_frustum.pixel_to_voxel(u_px, v_px)
    d_vox = (z - planes.t_near) / (planes.t_far - planes.t_near) * planes.plane_count
    sampled = trilinear_many(novel_density.data, u_vox, v_vox, d_vox)[..., 0]
    sampled = np.where(inside, sampled, 0.0)
    cache = {"u_vox": u_vox, "v_vox": v_vox, "d_vox": d_vox, "inside": inside}
    return VolumeGrid(sampled[..., None]), cache


def resample_density_grad(cache: dict, novel_shape, upstream: np.ndarray, grad=None):
    """Scatter d loss / d resampled density back onto the novel density grid."""
    up = np.where(cache["inside"], np.asarray(upstream), 0.0)
    if grad is None:
        grad = np.zeros(novel_shape, dtype=np.float64)
    grad, _, _, _ = trilinear_many_grad(
        grad, cache["u_vox"], cache["v_vox"], cache["d_vox"], up[..., None], grad_data=grad
    )
    return grad


def alpha_volume(density: VolumeGrid, planes: DepthPlaneMap) -> VolumeGrid:
    """Density to per-plane opacity: alpha = 1 - exp(-sigma * delta_plane)."""
    if np.any(density.data < 0):
        raise ValueError("density must be non-negative")
    a = 1.0 - np.exp(-density.data * planes.plane_spacing)
    return VolumeGrid(a)


def alpha_volume_grad(density_data: np.ndarray, planes: DepthPlaneMap, upstream: np.ndarray) -> np.ndarray:
    delta = planes.plane_spacing
    return upstream * delta * np.exp(-density_data * delta)


def visibility_volume(alpha: VolumeGrid) -> VolumeGrid:
    """Front-to-back transmittance per column: vis(d) = prod_{j<d} (1 - alpha_j).

    vis(0) = 1; alphas are clamped to 1 - 1e-6 so log-space gradients stay
    finite. Non-increasing along d by construction.
    """
    a = np.minimum(alpha.data[..., 0], ALPHA_CLAMP)
    vis = np.cumprod(1.0 - a, axis=-1)
    vis = np.roll(vis, 1, axis=-1)
    vis[..., 0] = 1.0
    return VolumeGrid(vis[..., None])


def visibility_volume_grad(alpha_data: np.ndarray, vis_data: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Backward of visibility_volume: upstream (H, W, D) -> d alpha (H, W, D).

    d vis(d) / d alpha(j) = -vis(d) / (1 - alpha(j)) for j < d, evaluated
    with the clamped alphas.
    """
    a = np.minimum(alpha_data[..., 0] if alpha_data.ndim == 4 else alpha_data, ALPHA_CLAMP)
    vis = vis_data[..., 0] if vis_data.ndim == 4 else vis_data
    prod = upstream * vis
    # suffix[j] = sum_{d > j} upstream_d * vis_d
    suffix = np.flip(np.cumsum(np.flip(prod, axis=-1), axis=-1), axis=-1)
    suffix = np.roll(suffix, -1, axis=-1)
    suffix[..., -1] = 0.0
    d_alpha = -suffix / (1.0 - a)
    clamped = (alpha_data[..., 0] if alpha_data.ndim == 4 else alpha_data) > ALPHA_CLAMP
    d_alpha[clamped] = 0.0
    return d_alpha


def build_view_visibility(
    novel_density: VolumeGrid,
    novel_frustum: FrustumGrid,
    input_camera: Camera,
    view_index: int,
    planes: DepthPlaneMap | None = None,
) -> ViewVisibility:
    """Full per-view chain: resample -> alpha -> visibility, caches retained."""
    if planes is None:
        planes = novel_frustum.planes
    frustum = FrustumGrid(input_camera, planes, novel_frustum.grid_w, novel_frustum.grid_h)
    dens, cache = resample_density(novel_density, novel_frustum, frustum)
    alpha = alpha_volume(dens, planes)
    vis = visibility_volume(alpha)
    return ViewVisibility(view_index, frustum, dens, alpha, vis, cache)


def view_visibility_backward(view: ViewVisibility, d_vis: np.ndarray, novel_shape, grad=None):
    """Chain d loss / d visibility-volume back to the novel density volume."""
    d_alpha = visibility_volume_grad(view.alpha.data, view.visibility.data, d_vis)
    d_dens = alpha_volume_grad(view.density.data[..., 0], view.frustum.planes, d_alpha)
    return resample_density_grad(view.resample_cache, novel_shape, d_dens, grad=grad)


def _view_query_coords(view: ViewVisibility, pts: np.ndarray):
    """Project world points into a view's voxel coordinates plus in-frustum mask."""
    cam = view.frustum.camera
    planes = view.frustum.planes
    u_px, v_px, z, valid = project_many(cam, pts)
    inside = (
        valid
        & (z >= planes.t_near)
        & (z <= planes.t_far)
        & (u_px >= 0)
        & (u_px <= cam.width - 1)
        & (v_px >= 0)
        & (v_px <= cam.height - 1)
    )
    u_vox, v_vox = view.frustum.pixel_to_voxel(u_px, v_px)
    d_vox = (z - planes.t_near) / (planes.t_far - planes.t_near) * planes.plane_count
    return u_px, v_px, u_vox, v_vox, d_vox, inside


def point_visibility(pts: np.ndarray, views: list[ViewVisibility]):
    """Visibility weight of each view for each world point.

    pts: (..., 3). Returns (weights, caches): weights has shape
    (n_views,) + pts.shape[:-1], in [0, 1], zero outside a view's frustum.
    """
    pts = np.asarray(pts)
    weights = []
    caches = []
    for view in views:
        u_px, v_px, u_vox, v_vox, d_vox, inside = _view_query_coords(view, pts)
        w = trilinear_many(view.visibility.data, u_vox, v_vox, d_vox)[..., 0]
        w = np.clip(np.where(inside, w, 0.0), 0.0, 1.0)
        weights.append(w)
        caches.append({"u_vox": u_vox, "v_vox": v_vox, "d_vox": d_vox, "inside": inside})
    return np.stack(weights), caches


def point_visibility_grad(pts, views, caches, upstream, d_vis_out=None):
    """Backward of point_visibility.

    upstream: (n_views,) + pts.shape[:-1]. Accumulates per-view visibility
    volume gradients into d_vis_out (list, created if None) and returns
    (d_vis_out, d_pts) where d_pts is the gradient w.r.t. the query points.
    """
    pts = np.asarray(pts)
    if d_vis_out is None:
        d_vis_out = [np.zeros_like(v.visibility.data, dtype=np.float64) for v in views]
    d_pts = np.zeros(pts.shape, dtype=np.float64)
    for i, view in enumerate(views):
        cache = caches[i]
        up = np.where(cache["inside"], upstream[i], 0.0)
        _, du_vox, dv_vox, dd_vox = trilinear_many_grad(
            view.visibility.data,
            cache["u_vox"],
            cache["v_vox"],
            cache["d_vox"],
            up[..., None],
            grad_data=d_vis_out[i],
        )
        frustum = view.frustum
        planes = frustum.planes
        du_px = du_vox / frustum.scale_x
        dv_px = dv_vox / frustum.scale_y
        dz = dd_vox * planes.plane_count / (planes.t_far - planes.t_near)
        d_pts += project_backward(frustum.camera, pts, du_px, dv_px, dz)
    return d_vis_out, d_pts


def visibility_grad(pts, views, upstream, novel_shape):
    """End-to-end adjoint: d loss / d per-view weights -> d novel density volume."""
    _, caches = point_visibility(pts, views)
    d_vis, _ = point_visibility_grad(pts, views, caches, upstream)
    grad = np.zeros(novel_shape, dtype=np.float64)
    for view, dv in zip(views, d_vis):
        view_visibility_backward(view, dv[..., 0], novel_shape, grad=grad)
    return grad
