"""Shared helpers for scene-level tests: rigs and fabricated parameters."""

import numpy as np

from visray.optim import DensityOffsetGrid, SceneParams, default_offset_bounds
from visray.scene import look_at_camera


def arc_rig(count, radius, span_deg, target, fov_deg, width, height, elevation_deg=8.0):
    """Cameras on a short arc facing the target (frontal capture setup)."""
    target = np.asarray(target, dtype=np.float64)
    elev = np.deg2rad(elevation_deg)
    cams = []
    for k in range(count):
        a = np.deg2rad(-span_deg / 2 + span_deg * k / max(count - 1, 1))
        pos = target + radius * np.array([np.cos(elev) * np.cos(a), np.cos(elev) * np.sin(a), np.sin(elev)])
        cams.append(look_at_camera(pos, target, fov_deg, width, height))
    return cams


def fabricate_surface_params(config, novel_cam, dataset, scene, density_cap=30.0, resolution=64):
    """Parameters whose density offset reproduces the scene's analytic field.

    The world offset grid is set to the softplus inverse of the analytic
    density (capped), with the linear head silenced, so renders exercise the
    visibility/aggregation path against known geometry.
    """
    lo, hi = default_offset_bounds(dataset)
    params = SceneParams.init(config, seed=0, offset_shape=(resolution,) * 3, offset_bounds=(lo, hi))
    params.density.weights[:] = 0.0
    params.density.bias = 0.0
    grid = params.density_offset
    H, W, D = grid.data.shape
    ys = np.linspace(lo[1], hi[1], H)
    xs = np.linspace(lo[0], hi[0], W)
    zs = np.linspace(lo[2], hi[2], D)
    pts = np.stack(np.meshgrid(ys, xs, zs, indexing="ij"), axis=-1)[..., [1, 0, 2]]
    sigma = np.minimum(scene.density(pts), density_cap)
    grid.data[:] = np.where(sigma > 1e-6, np.log(np.expm1(np.maximum(sigma, 1e-6))), -40.0)
    return params
