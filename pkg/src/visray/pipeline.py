"""Per-pixel sampling, occlusion-aware aggregation, ray integration, render head.

render_frame composes the whole forward pass: select input views, extract
features, build the fused geometry volume and density, build per-view
visibility volumes, then march every target pixel: uniform samples,
hierarchical resampling, per-view gather, visibility-weighted aggregation,
and transmittance-weighted integration in feature and color space. The
backward pass (render_backward) hand-chains every one of those steps,
including the dependence of the hierarchical sample positions on the
coarse densities, so end-to-end finite-difference checks hold.

Rays are independent; the pixel loop runs over fixed row chunks whose
boundaries never depend on the worker count, so multi-worker renders are
bit-identical to single-worker ones.
"""

from __future__ import annotations

import os
import pickle
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    Camera,
    DepthPlaneMap,
    FrustumGrid,
    project_backward,
    project_many,
    select_nearest_views,
    unproject,
)
from .model import (
    DensityHeadParams,
    FeatureExtractorParams,
    RenderHeadParams,
    density_head,
    density_head_grad,
    mix_raw,
    mix_raw_grad,
    raw_feature_maps,
)
from .visibility import (
    ViewVisibility,
    build_view_visibility,
    point_visibility,
    point_visibility_grad,
    view_visibility_backward,
)
from .volume import (
    VolumeGrid,
    bilinear_many,
    bilinear_many_grad,
    build_frustum_points,
    image_to_map_coords,
    sweep_features,
    trilinear_many,
    trilinear_many_grad,
    variance_fuse,
    variance_fuse_grad,
)

EPS_W = 1e-8


@dataclass
class RenderConfig:
    n_uniform: int = 128
    n_hier: int = 8
    n_views: int = 3
    upsample: int = 4  # high-res image is upsample * texture resolution
    geo_scale: int = 16  # geometry grid is image size / geo_scale
    planes: int = 96
    c_geo: int = 32
    c_tex: int = 16
    include_mean: bool = False
    aggregation: str = "visibility"  # "visibility" | "average"
    deterministic: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_uniform < 2:
            raise ValueError("n_uniform must be >= 2")
        if self.n_hier < 1:
            raise ValueError("n_hier must be >= 1")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.aggregation not in ("visibility", "average"):
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")

    @property
    def fused_channels(self) -> int:
        return self.c_geo * (2 if self.include_mean else 1)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class RaySamples:
    depths: np.ndarray  # (P, S) ascending sample depths
    densities: np.ndarray  # (P, S)
    tex_feats: np.ndarray  # (N, P, S, C_T) per-view gathered features
    colors: np.ndarray  # (N, P, S, 3)
    vis_weights: np.ndarray  # (N, P, S)
    validity: np.ndarray  # (N, P, S) bool


@dataclass
class RenderOutput:
    f_lr: np.ndarray  # (H_T, W_T, C_T)
    i_inter: np.ndarray  # (H_T, W_T, 3)
    i_hr: np.ndarray  # (H_hr, W_hr, 3)
    t_final: np.ndarray  # (H_T, W_T)
    selected_views: list
    stage_ms: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Sampling


def uniform_samples(t_near, t_far, n, mode="deterministic", rng=None):
    """n depths in [t_near, t_far]: bin midpoints, or one draw per bin."""
    if t_near >= t_far:
        raise ValueError("need t_near < t_far")
    if n < 1:
        raise ValueError("need n >= 1")
    width = (t_far - t_near) / n
    if mode == "deterministic":
        return t_near + (np.arange(n) + 0.5) * width
    if rng is None:
        raise ValueError("stratified mode needs an rng")
    return t_near + (np.arange(n) + rng.uniform(size=n)) * width


def _bin_edges(coarse, bounds):
    coarse = np.asarray(coarse, dtype=np.float64)
    lo, hi = bounds if bounds is not None else (coarse[0], coarse[-1])
    mids = 0.5 * (coarse[1:] + coarse[:-1])
    return np.concatenate([[lo], mids, [hi]])


def hierarchical_samples(coarse, weights, n, mode="deterministic", rng=None, bounds=None):
    """Inverse-CDF samples from the piecewise-constant PDF the weights induce.

    coarse: (K,) depths (bin representatives); weights: (..., K) >= 0, rows
    that sum to zero fall back to uniform. Deterministic mode uses the
    midpoint quantiles (q + 0.5) / n. Returns (samples (..., n), cache).
    """
    weights = np.asarray(weights, dtype=np.float64)
    squeeze = weights.ndim == 1
    w = np.atleast_2d(weights)
    B, K = w.shape
    edges = _bin_edges(coarse, bounds)
    widths = np.diff(edges)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum(axis=1)
    fallback = total <= 0
    w_eff = np.where(fallback[:, None], 1.0, w)
    total_eff = w_eff.sum(axis=1)
    p = w_eff / total_eff[:, None]
    cdf = np.concatenate([np.zeros((B, 1)), np.cumsum(p, axis=1)], axis=1)
    if mode == "deterministic":
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (B, n)).copy()
    else:
        if rng is None:
            raise ValueError("stratified mode needs an rng")
        u = (np.arange(n) + rng.uniform(size=(B, n))) / n
    # batched searchsorted: shift each row into its own disjoint interval
    row_off = 2.0 * np.arange(B)[:, None]
    flat = np.searchsorted((cdf + row_off).ravel(), (u + row_off).ravel(), side="right")
    idx = flat.reshape(B, n) - np.arange(B)[:, None] * (K + 1) - 1
    idx = np.clip(idx, 0, K - 1)
    rows = np.broadcast_to(np.arange(B)[:, None], idx.shape)
    p_at = p[rows, idx]
    degen = p_at <= 1e-12
    p_safe = np.where(degen, 1.0, p_at)
    frac = (u - cdf[rows, idx]) / p_safe
    t = edges[idx] + np.where(degen, 0.0, frac) * widths[idx]
    t = np.clip(t, edges[0], edges[-1])
    cache = {
        "idx": idx,
        "u": u,
        "p": p,
        "cdf": cdf,
        "edges": edges,
        "widths": widths,
        "degen": degen,
        "fallback": fallback,
        "total": total_eff,
        "t": t,
    }
    if squeeze:
        return t[0], cache
    return t, cache


def hierarchical_samples_grad(cache, dt):
    """d samples / d weights, for the deterministic (or fixed-draw) quantiles."""
    dt = np.atleast_2d(np.asarray(dt, dtype=np.float64))
    idx = cache["idx"]
    B, K = cache["p"].shape
    rows = np.broadcast_to(np.arange(B)[:, None], idx.shape)
    p_at = cache["p"][rows, idx]
    p_safe = np.where(cache["degen"], 1.0, p_at)
    live = ~cache["degen"]
    # suffix term: every bin below the landing bin shifts the whole cdf
    A = np.where(live, dt * cache["widths"][idx] / p_safe, 0.0)
    flat_idx = (rows * K + idx).ravel()
    per_bin = np.bincount(flat_idx, weights=A.ravel(), minlength=B * K).reshape(B, K)
    suffix = np.cumsum(per_bin[:, ::-1], axis=1)[:, ::-1]
    suffix = np.roll(suffix, -1, axis=1)
    suffix[:, -1] = 0.0
    dp = -suffix
    # diagonal term inside the landing bin
    tq = cache["t"] if cache["t"].ndim == 2 else cache["t"][None]
    diag = np.where(live, -dt * (tq - cache["edges"][idx]) / p_safe, 0.0)
    np.add.at(dp, (rows.ravel(), idx.ravel()), diag.ravel())
    # p = w / sum(w)
    dw = (dp - np.sum(dp * cache["p"], axis=1, keepdims=True)) / cache["total"][:, None]
    dw[cache["fallback"]] = 0.0
    return dw


# ---------------------------------------------------------------------------
# Ray integration


def integration_weights(sigma, delta):
    """NeRF quadrature weights w_s = T_s (1 - exp(-sigma_s delta_s)).

    Returns (w, T, a, T_final); sum(w) + T_final == 1 exactly by telescoping.
    """
    tau = sigma * delta
    csum = np.cumsum(tau, axis=-1)
    T = np.exp(-(csum - tau))
    a = -np.expm1(-tau)
    return T * a, T, a, np.exp(-csum[..., -1])


def integration_weights_backward(dw, dT_final, sigma, delta, T, a, w, T_final):
    """Backward of integration_weights; returns (d_sigma, d_delta)."""
    prod = dw * w
    suffix = np.cumsum(prod[..., ::-1], axis=-1)[..., ::-1]
    suffix = np.roll(suffix, -1, axis=-1)
    suffix[..., -1] = 0.0
    tail = suffix + (T_final * dT_final)[..., None]
    direct = dw * T * (1.0 - a)
    d_sigma = direct * delta - delta * tail
    d_delta = direct * sigma - sigma * tail
    return d_sigma, d_delta


def deltas_from_depths(t, t_far):
    """Sample spacings: consecutive differences, last interval capped at t_far."""
    d = np.empty_like(t)
    d[..., :-1] = t[..., 1:] - t[..., :-1]
    d[..., -1] = t_far - t[..., -1]
    return d


def integrate_ray(depths, densities, tex_feats, colors, t_far):
    """Transmittance-weighted integration of aggregated per-sample streams.

    depths/densities: (..., S); tex_feats: (..., S, C_T); colors: (..., S, 3).
    Returns (f_tex (..., C_T), f_rgb (..., 3), T_final (...,)); the weights
    satisfy sum(w) + T_final == 1.
    """
    t = np.asarray(depths, dtype=np.float64)
    if np.any(np.diff(t, axis=-1) < 0):
        raise ValueError("sample depths must be ascending")
    delta = deltas_from_depths(t, t_far)
    w, _, _, T_final = integration_weights(np.asarray(densities, dtype=np.float64), delta)
    f_tex = np.einsum("...s,...sc->...c", w, np.asarray(tex_feats, dtype=np.float64))
    f_rgb = np.einsum("...s,...sc->...c", w, np.asarray(colors, dtype=np.float64))
    return f_tex, f_rgb, T_final


def gather_point(pts, views):
    """Project points into each view and sample its texture map and image.

    pts: (..., 3); views: list of (Camera, texture FeatureMap, image array).
    Returns (tex (N, ..., C_T), rgb (N, ..., 3), valid (N, ...)); behind the
    camera or outside the image rectangle yields zeros and valid=False.
    """
    if len(views) < 1:
        raise ValueError("need at least one view")
    tex, rgb, val = [], [], []
    for cam, fmap, image in views:
        u_px, v_px, _, valid = project_many(cam, pts)
        inb = (u_px >= 0) & (u_px <= cam.width - 1) & (v_px >= 0) & (v_px <= cam.height - 1)
        ok = valid & inb
        mh, mw, _ = fmap.data.shape
        mu, mv = image_to_map_coords(u_px, v_px, cam, mh, mw)
        ft = bilinear_many(fmap.data, mu, mv)
        fc = bilinear_many(np.asarray(image), u_px, v_px)
        ft[~ok] = 0
        fc[~ok] = 0
        tex.append(ft)
        rgb.append(fc)
        val.append(ok)
    return np.stack(tex), np.stack(rgb), np.stack(val)


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(values, vis, valid):
    """Visibility-weighted mean over views with the documented fallbacks.

    values: (N, P, S, C); vis: (N, P, S) weights already zeroed outside each
    view; valid: (N, P, S) bool. Where the weight mass is below EPS_W the
    unweighted mean over valid views is used; with no valid views at all the
    result is zero. Returns (out (P, S, C), cache).
    """
    vis = np.where(valid, vis, 0.0)
    Wsum = vis.sum(axis=0)
    m = valid.sum(axis=0)
    use_w = Wsum >= EPS_W
    weighted = np.einsum("nps,npsc->psc", vis, values)
    mean = np.einsum("nps,npsc->psc", valid.astype(values.dtype), values)
    W_safe = np.where(use_w, Wsum, 1.0)
    m_safe = np.maximum(m, 1)
    out = np.where(use_w[..., None], weighted / W_safe[..., None], mean / m_safe[..., None])
    cache = {"vis": vis, "valid": valid, "Wsum": Wsum, "use_w": use_w, "m": m, "out": out}
    return out, cache


def aggregate_backward(cache, values, dout):
    """Backward of aggregate; returns (d_values (N,P,S,C), d_vis (N,P,S))."""
    vis = cache["vis"]
    valid = cache["valid"]
    use_w = cache["use_w"]
    W_safe = np.where(use_w, cache["Wsum"], 1.0)
    m_safe = np.maximum(cache["m"], 1)
    d_values = np.where(
        use_w[None, ..., None],
        (vis / W_safe)[..., None] * dout[None],
        (valid / m_safe)[..., None] * dout[None],
    )
    diff = values - cache["out"][None]
    d_vis = np.where(use_w[None], np.einsum("npsc,psc->nps", diff, dout / W_safe[..., None]), 0.0)
    d_vis = np.where(valid, d_vis, 0.0)
    return d_values, d_vis


# ---------------------------------------------------------------------------
# Render head


def bilinear_upsample(img, factor):
    H, W, C = img.shape
    x = (np.arange(W * factor) + 0.5) / factor - 0.5
    y = (np.arange(H * factor) + 0.5) / factor - 0.5
    uu, vv = np.meshgrid(x, y)
    return bilinear_many(img, uu, vv)


def render_head(f_lr, params: RenderHeadParams, upsample):
    """Linear C_T -> RGB per pixel, bilinear upsample, clamp to [0, 1]."""
    f_lr = np.asarray(f_lr)
    if f_lr.shape[-1] != params.weight.shape[0]:
        raise ValueError(
            f"feature map has {f_lr.shape[-1]} channels, head expects {params.weight.shape[0]}"
        )
    rgb_lr = f_lr @ params.weight + params.bias
    hr = bilinear_upsample(rgb_lr, upsample) if upsample > 1 else rgb_lr
    cache = {"rgb_lr": rgb_lr, "hr_raw": hr}
    return np.clip(hr, 0.0, 1.0), cache


def render_head_backward(f_lr, params: RenderHeadParams, cache, d_ihr, upsample):
    """Returns (d_f_lr, d_weight, d_bias)."""
    raw = cache["hr_raw"]
    d_raw = np.where((raw > 0.0) & (raw < 1.0), d_ihr, 0.0)
    H, W, _ = cache["rgb_lr"].shape
    if upsample > 1:
        x = (np.arange(W * upsample) + 0.5) / upsample - 0.5
        y = (np.arange(H * upsample) + 0.5) / upsample - 0.5
        uu, vv = np.meshgrid(x, y)
        d_rgb_lr = np.zeros((H, W, 3), dtype=np.float64)
        bilinear_many_grad(cache["rgb_lr"], uu, vv, d_raw, grad_data=d_rgb_lr)
    else:
        d_rgb_lr = d_raw.astype(np.float64)
    f2 = np.asarray(f_lr, dtype=np.float64).reshape(-1, f_lr.shape[-1])
    g2 = d_rgb_lr.reshape(-1, 3)
    d_weight = f2.T @ g2
    d_bias = g2.sum(axis=0)
    d_f_lr = (g2 @ params.weight.T).reshape(f_lr.shape)
    return d_f_lr, d_weight, d_bias


# ---------------------------------------------------------------------------
# Frame rendering


@dataclass
class FrameContext:
    novel_cam: Camera
    config: RenderConfig
    selected: list
    cams: list
    images: list  # (H, W, 3) in render dtype
    tex_maps: list  # FeatureMap per view
    geo_maps: list
    raw_geo: list
    raw_tex: list
    frustum: FrustumGrid
    sweep_feats: np.ndarray
    sweep_valid: np.ndarray
    sweep_coords: list
    fused: VolumeGrid
    fused_valid: np.ndarray
    density: VolumeGrid
    density_cache: dict
    offset_coords: tuple | None
    views: list  # ViewVisibility, empty in average mode
    h_t: int
    w_t: int
    dirs: np.ndarray  # (P, 3) depth-parameterized ray directions
    u_vox: np.ndarray  # (P,) geometry-grid column coordinate per pixel
    v_vox: np.ndarray
    t_coarse: np.ndarray  # (N_u,)
    coarse_jitter: np.ndarray | None
    hier_jitter: np.ndarray | None


def _chunk_rows(h_t, max_chunks=16):
    """Fixed row chunking, independent of the worker count."""
    n = min(h_t, max_chunks)
    bounds = np.linspace(0, h_t, n + 1).astype(int)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(n) if bounds[i + 1] > bounds[i]]


def prepare_frame(novel_cam, dataset, params, config: RenderConfig, exclude_view=None, raw_cache=None, timings=None):
    t0 = time.perf_counter()
    cam = novel_cam
    cfg = config
    if cam.height % cfg.upsample or cam.width % cfg.upsample:
        raise ValueError("image size must be divisible by the upsample factor")
    if cam.height % cfg.geo_scale or cam.width % cfg.geo_scale:
        raise ValueError("image size must be divisible by the geometry scale")
    dt = cfg.np_dtype

    pool = list(range(len(dataset.cameras)))
    if exclude_view is not None:
        pool = [i for i in pool if i != exclude_view]
    order = select_nearest_views(cam, [dataset.cameras[i] for i in pool], min(cfg.n_views, len(pool)))
    selected = [pool[i] for i in order]

    cams = [dataset.cameras[i] for i in selected]
    images = [np.asarray(dataset.images[i], dtype=dt) for i in selected]
    raw_geo, raw_tex, geo_maps, tex_maps = [], [], [], []
    for i, img in zip(selected, images):
        if raw_cache is not None and i in raw_cache:
            rg, rt = raw_cache[i]
        else:
            rg = raw_feature_maps(img, cfg.geo_scale)
            rt = raw_feature_maps(img, cfg.upsample)
            if raw_cache is not None:
                raw_cache[i] = (rg, rt)
        raw_geo.append(rg)
        raw_tex.append(rt)
        geo_maps.append(mix_raw(rg, params.extractor.geo_mix, params.extractor.geo_bias, dtype=dt))
        tex_maps.append(mix_raw(rt, params.extractor.tex_mix, params.extractor.tex_bias, dtype=dt))
    t1 = time.perf_counter()

    planes = DepthPlaneMap(dataset.t_near, dataset.t_far, cfg.planes)
    frustum = FrustumGrid(cam, planes, cam.width // cfg.geo_scale, cam.height // cfg.geo_scale)
    pts = build_frustum_points(frustum, dtype=dt)
    sweep_feats, sweep_valid = sweep_features(pts, list(zip(cams, geo_maps)))
    sweep_coords = []
    for c in cams:
        u, v, _, valid = project_many(c, pts)
        mh, mw, _ = geo_maps[0].data.shape
        mu, mv = image_to_map_coords(u, v, c, mh, mw)
        sweep_coords.append({"mu": mu, "mv": mv, "valid": valid})
    if len(cams) >= 2:
        fused, fused_valid = variance_fuse(sweep_feats, sweep_valid, include_mean=cfg.include_mean)
    else:
        # variance is undefined for a single view; the M < 2 rule zeroes it
        fused = VolumeGrid(np.zeros(pts.shape[:3] + (cfg.fused_channels,), dtype=dt))
        fused_valid = np.zeros(pts.shape[:3], dtype=bool)
    offset = getattr(params, "density_offset", None)
    offset_vals = None
    offset_coords = None
    if offset is not None:
        ou, ov, od = offset.grid_coords(pts)
        offset_vals = trilinear_many(offset.data[..., None], ou, ov, od)[..., 0]
        offset_coords = (ou, ov, od)
    density, density_cache = density_head(fused, params.density, offset=offset_vals)
    t2 = time.perf_counter()

    views = []
    if cfg.aggregation == "visibility":
        for k, c in enumerate(cams):
            views.append(build_view_visibility(density, frustum, c, view_index=selected[k]))
    t3 = time.perf_counter()

    h_t = cam.height // cfg.upsample
    w_t = cam.width // cfg.upsample
    xs = (np.arange(w_t) + 0.5) * cfg.upsample - 0.5
    ys = (np.arange(h_t) + 0.5) * cfg.upsample - 0.5
    uu, vv = np.meshgrid(xs, ys)
    dirs = (unproject(cam, uu, vv, np.ones_like(uu)) - cam.center).reshape(-1, 3).astype(dt)
    u_vox, v_vox = frustum.pixel_to_voxel(uu, vv)
    u_vox = u_vox.reshape(-1).astype(dt)
    v_vox = v_vox.reshape(-1).astype(dt)

    rng = np.random.default_rng(cfg.seed)
    if cfg.deterministic:
        t_coarse = uniform_samples(dataset.t_near, dataset.t_far, cfg.n_uniform)
        coarse_jitter = None
        hier_jitter = None
    else:
        t_coarse = uniform_samples(dataset.t_near, dataset.t_far, cfg.n_uniform)
        coarse_jitter = rng.uniform(size=(h_t * w_t, cfg.n_uniform))
        hier_jitter = rng.uniform(size=(h_t * w_t, cfg.n_hier))

    if timings is not None:
        timings["encoder"] = (t1 - t0) * 1e3
        timings["geometry"] = (t2 - t1) * 1e3
        timings["visibility"] = (t3 - t2) * 1e3

    return FrameContext(
        novel_cam=cam,
        config=cfg,
        selected=selected,
        cams=cams,
        images=images,
        tex_maps=tex_maps,
        geo_maps=geo_maps,
        raw_geo=raw_geo,
        raw_tex=raw_tex,
        frustum=frustum,
        sweep_feats=sweep_feats,
        sweep_valid=sweep_valid,
        sweep_coords=sweep_coords,
        fused=fused,
        fused_valid=fused_valid,
        density=density,
        density_cache=density_cache,
        offset_coords=offset_coords,
        views=views,
        h_t=h_t,
        w_t=w_t,
        dirs=dirs,
        u_vox=u_vox,
        v_vox=v_vox,
        t_coarse=t_coarse,
        coarse_jitter=coarse_jitter,
        hier_jitter=hier_jitter,
    )


def _density_along_rays(ctx: FrameContext, sl, d_coords):
    """Trilinear density lookups restricted to per-pixel voxel columns.

    d_coords: (P, S) or (S,) fractional plane indices. Equivalent to
    trilinear_many at (u_vox, v_vox, d) but gathers each pixel's bilinear
    column profile once.
    """
    vol = ctx.density.data[..., 0]
    Hg, Wg, D = vol.shape
    u = ctx.u_vox[sl]
    v = ctx.v_vox[sl]
    from .volume import _corner_setup_1d

    u0, fu, _ = _corner_setup_1d(u, Wg)
    v0, fv, _ = _corner_setup_1d(v, Hg)
    flat = vol.reshape(-1, D)
    b = v0 * Wg + u0
    su = 1 if Wg > 1 else 0
    sv = Wg if Hg > 1 else 0
    prof = (
        (1 - fv)[:, None] * ((1 - fu)[:, None] * flat[b] + fu[:, None] * flat[b + su])
        + fv[:, None] * ((1 - fu)[:, None] * flat[b + sv] + fu[:, None] * flat[b + sv + su])
    )
    d0, fd, _ = _corner_setup_1d(np.asarray(d_coords), D)
    if d0.ndim == 1:  # shared depth coordinates across the chunk
        lo = prof[:, d0]
        hi = prof[:, np.minimum(d0 + 1, D - 1)]
        return lo * (1 - fd) + hi * fd
    lo = np.take_along_axis(prof, d0, axis=1)
    hi = np.take_along_axis(prof, np.minimum(d0 + 1, D - 1), axis=1)
    return lo * (1 - fd) + hi * fd


def render_rows(ctx: FrameContext, r0, r1, with_tape=False):
    """Render texture-resolution rows [r0, r1); returns outputs (+ tape)."""
    cfg = ctx.config
    planes = ctx.frustum.planes
    t_n, t_f = planes.t_near, planes.t_far
    D = planes.plane_count
    sl = slice(r0 * ctx.w_t, r1 * ctx.w_t)
    P = sl.stop - sl.start
    dirs = ctx.dirs[sl]

    # coarse pass
    if cfg.deterministic:
        t_c = np.broadcast_to(ctx.t_coarse, (P, cfg.n_uniform))
        d_c = (ctx.t_coarse - t_n) / (t_f - t_n) * D
    else:
        width = (t_f - t_n) / cfg.n_uniform
        t_c = t_n + (np.arange(cfg.n_uniform) + ctx.coarse_jitter[sl]) * width
        d_c = (t_c - t_n) / (t_f - t_n) * D
    sigma_c = _density_along_rays(ctx, sl, d_c)
    if cfg.deterministic:
        delta_c = deltas_from_depths(ctx.t_coarse[None, :], t_f)
    else:
        delta_c = deltas_from_depths(t_c.astype(np.float64), t_f)
    w_c, T_c, a_c, Tf_c = integration_weights(sigma_c.astype(np.float64), delta_c)

    # hierarchical pass
    if cfg.deterministic:
        t_s, hcache = hierarchical_samples(ctx.t_coarse, w_c, cfg.n_hier, bounds=(t_n, t_f))
    else:
        t_s = np.empty((P, cfg.n_hier))
        # fixed pre-drawn jitter keeps stratified runs reproducible
        u = (np.arange(cfg.n_hier) + ctx.hier_jitter[sl]) / cfg.n_hier
        t_s, hcache = _hier_from_quantiles(ctx.t_coarse, w_c, u, bounds=(t_n, t_f))
    d_s = (t_s - t_n) / (t_f - t_n) * D
    sigma_s = _density_along_rays(ctx, sl, d_s)

    pts = ctx.novel_cam.center + t_s[..., None] * dirs[:, None, :]
    pts = pts.astype(ctx.dirs.dtype)

    N = len(ctx.cams)
    ctex = cfg.c_tex
    feats = np.zeros((N, P, cfg.n_hier, ctex + 3), dtype=np.float64)
    gvalid = np.zeros((N, P, cfg.n_hier), dtype=bool)
    gather_cache = []
    for i, cam in enumerate(ctx.cams):
        u_px, v_px, z, valid = project_many(cam, pts)
        inb = (u_px >= 0) & (u_px <= cam.width - 1) & (v_px >= 0) & (v_px <= cam.height - 1)
        ok = valid & inb
        mh, mw, _ = ctx.tex_maps[i].data.shape
        mu, mv = image_to_map_coords(u_px, v_px, cam, mh, mw)
        ft = bilinear_many(ctx.tex_maps[i].data, mu, mv)
        fc = bilinear_many(ctx.images[i], u_px, v_px)
        ft[~ok] = 0
        fc[~ok] = 0
        feats[i, ..., :ctex] = ft
        feats[i, ..., ctex:] = fc
        gvalid[i] = ok
        gather_cache.append({"u_px": u_px, "v_px": v_px, "z": z, "ok": ok, "mu": mu, "mv": mv})

    if cfg.aggregation == "visibility":
        vis, vis_caches = point_visibility(pts, ctx.views)
    else:
        vis = gvalid.astype(np.float64)
        vis_caches = None

    agg, agg_cache = aggregate(feats, vis, gvalid)
    delta_s = deltas_from_depths(t_s, t_f)
    w_s, T_s, a_s, Tf_s = integration_weights(sigma_s.astype(np.float64), delta_s)
    f_lr = np.einsum("ps,psc->pc", w_s, agg[..., :ctex])
    i_inter = np.einsum("ps,psc->pc", w_s, agg[..., ctex:])

    out = (f_lr, i_inter, Tf_s)
    if not with_tape:
        return out
    tape = {
        "r0": r0,
        "r1": r1,
        "sigma_c": sigma_c,
        "t_c": t_c,
        "delta_c": delta_c,
        "w_c": w_c,
        "T_c": T_c,
        "a_c": a_c,
        "Tf_c": Tf_c,
        "hcache": hcache,
        "t_s": t_s,
        "d_s": d_s,
        "sigma_s": sigma_s,
        "pts": pts,
        "feats": feats,
        "gvalid": gvalid,
        "gather": gather_cache,
        "vis": vis,
        "vis_caches": vis_caches,
        "agg": agg,
        "agg_cache": agg_cache,
        "delta_s": delta_s,
        "w_s": w_s,
        "T_s": T_s,
        "a_s": a_s,
        "Tf_s": Tf_s,
    }
    return out, tape


def _hier_from_quantiles(coarse, weights, u, bounds):
    """Stratified variant of hierarchical_samples with externally drawn quantiles."""
    w = np.asarray(weights, dtype=np.float64)
    B, K = w.shape
    edges = _bin_edges(coarse, bounds)
    widths = np.diff(edges)
    total = w.sum(axis=1)
    fallback = total <= 0
    w_eff = np.where(fallback[:, None], 1.0, w)
    total_eff = w_eff.sum(axis=1)
    p = w_eff / total_eff[:, None]
    cdf = np.concatenate([np.zeros((B, 1)), np.cumsum(p, axis=1)], axis=1)
    row_off = 2.0 * np.arange(B)[:, None]
    flat = np.searchsorted((cdf + row_off).ravel(), (u + row_off).ravel(), side="right")
    idx = flat.reshape(B, u.shape[1]) - np.arange(B)[:, None] * (K + 1) - 1
    idx = np.clip(idx, 0, K - 1)
    rows = np.broadcast_to(np.arange(B)[:, None], idx.shape)
    p_at = p[rows, idx]
    degen = p_at <= 1e-12
    p_safe = np.where(degen, 1.0, p_at)
    frac = (u - cdf[rows, idx]) / p_safe
    t = edges[idx] + np.where(degen, 0.0, frac) * widths[idx]
    t = np.clip(t, edges[0], edges[-1])
    cache = {
        "idx": idx,
        "u": u,
        "p": p,
        "cdf": cdf,
        "edges": edges,
        "widths": widths,
        "degen": degen,
        "fallback": fallback,
        "total": total_eff,
        "t": t,
    }
    return t, cache


def _fork_map_chunks(ctx, chunks, workers):
    """Render chunks in forked children; results reassembled by chunk index.

    Children inherit the frame context through fork (no pickling of inputs)
    and stream their results back over pipes. Chunk boundaries and per-chunk
    arithmetic are identical to the serial path, so output bits match any
    worker count. Falls back to serial where fork is unavailable.
    """
    if not hasattr(os, "fork"):
        return [render_rows(ctx, r0, r1) for r0, r1 in chunks]
    assignments = [list(range(len(chunks)))[w::workers] for w in range(workers)]
    readers = []
    pids = []
    for assigned in assignments:
        if not assigned:
            continue
        rfd, wfd = os.pipe()
        pid = os.fork()
        if pid == 0:
            os.close(rfd)
            status = 0
            try:
                out = [(i, render_rows(ctx, *chunks[i])) for i in assigned]
                payload = pickle.dumps(("ok", out), protocol=pickle.HIGHEST_PROTOCOL)
            except BaseException as e:  # surface the failure in the parent
                payload = pickle.dumps(("err", repr(e)), protocol=pickle.HIGHEST_PROTOCOL)
                status = 1
            try:
                with os.fdopen(wfd, "wb") as f:
                    f.write(payload)
            finally:
                os._exit(status)
        os.close(wfd)
        readers.append(os.fdopen(rfd, "rb"))
        pids.append(pid)
    results = {}
    failure = None
    for f in readers:
        try:
            kind, out = pickle.load(f)
        except EOFError:
            failure = failure or "render worker died without reporting"
            continue
        finally:
            f.close()
        if kind == "err":
            failure = failure or out
        else:
            for i, res in out:
                results[i] = res
    for pid in pids:
        os.waitpid(pid, 0)
    if failure is not None:
        raise RuntimeError(f"parallel render failed: {failure}")
    return [results[i] for i in range(len(chunks))]


def render_frame(
    novel_cam,
    dataset,
    params,
    config: RenderConfig,
    workers: int = 1,
    with_tape: bool = False,
    exclude_view=None,
    raw_cache=None,
):
    """Full forward pass; returns (RenderOutput, tape-or-None).

    Deterministic mode is bit-reproducible across runs and worker counts:
    the chunk grid is fixed and each chunk's arithmetic is independent of
    the scheduling.
    """
    timings = {}
    ctx = prepare_frame(novel_cam, dataset, params, config, exclude_view=exclude_view, raw_cache=raw_cache, timings=timings)
    chunks = _chunk_rows(ctx.h_t)

    t0 = time.perf_counter()
    tapes = []
    if with_tape or workers <= 1 or len(chunks) == 1:
        results = []
        for r0, r1 in chunks:
            res = render_rows(ctx, r0, r1, with_tape=with_tape)
            if with_tape:
                res, tape = res
                tapes.append(tape)
            results.append(res)
    else:
        results = _fork_map_chunks(ctx, chunks, workers)
    timings["ray_integration"] = (time.perf_counter() - t0) * 1e3

    ctex = config.c_tex
    f_lr = np.concatenate([r[0] for r in results]).reshape(ctx.h_t, ctx.w_t, ctex)
    i_inter = np.concatenate([r[1] for r in results]).reshape(ctx.h_t, ctx.w_t, 3)
    t_final = np.concatenate([r[2] for r in results]).reshape(ctx.h_t, ctx.w_t)

    t0 = time.perf_counter()
    i_hr, head_cache = render_head(f_lr, params.render_head, config.upsample)
    timings["render_head"] = (time.perf_counter() - t0) * 1e3

    out = RenderOutput(
        f_lr=f_lr,
        i_inter=i_inter,
        i_hr=i_hr,
        t_final=t_final,
        selected_views=ctx.selected,
        stage_ms=timings,
    )
    tape = None
    if with_tape:
        tape = {"ctx": ctx, "chunks": tapes, "head_cache": head_cache, "f_lr": f_lr, "params": params}
    return out, tape


def render_backward(tape, d_ihr=None, d_iinter=None, d_flr=None):
    """Reverse-mode pass through the retained forward; returns gradient dict.

    Keys: geo_mix, geo_bias, tex_mix, tex_bias, density_w, density_b,
    density_kernel, density_offset, head_w, head_b.
    """
    ctx: FrameContext = tape["ctx"]
    cfg = ctx.config
    planes = ctx.frustum.planes
    t_n, t_f = planes.t_near, planes.t_far
    D = planes.plane_count
    ctex = cfg.c_tex
    N = len(ctx.cams)

    params = tape["params"]
    d_f_lr = np.zeros((ctx.h_t, ctx.w_t, ctex), dtype=np.float64)
    if d_flr is not None:
        d_f_lr += d_flr
    if d_ihr is not None:
        dfl, d_head_w, d_head_b = render_head_backward(
            tape["f_lr"], params.render_head, tape["head_cache"], d_ihr, cfg.upsample
        )
        d_f_lr += dfl
    else:
        d_head_w = np.zeros((ctex, 3))
        d_head_b = np.zeros(3)
    d_f_lr_flat = d_f_lr.reshape(-1, ctex)
    d_iint_flat = (
        np.asarray(d_iinter, dtype=np.float64).reshape(-1, 3)
        if d_iinter is not None
        else np.zeros((ctx.h_t * ctx.w_t, 3))
    )

    novel_shape = (ctx.density.data.shape[0], ctx.density.data.shape[1], ctx.density.data.shape[2], 1)
    dV_density = np.zeros(novel_shape, dtype=np.float64)
    d_vis_vols = [np.zeros_like(v.visibility.data, dtype=np.float64) for v in ctx.views]
    d_tex_maps = [np.zeros(m.data.shape, dtype=np.float64) for m in ctx.tex_maps]

    for ch in tape["chunks"]:
        sl = slice(ch["r0"] * ctx.w_t, ch["r1"] * ctx.w_t)
        P = sl.stop - sl.start
        dirs = ctx.dirs[sl].astype(np.float64)
        dfT = d_f_lr_flat[sl]
        drgb = d_iint_flat[sl]

        # integration
        agg = ch["agg"]
        w_s = ch["w_s"]
        d_agg = np.empty_like(agg)
        d_agg[..., :ctex] = w_s[..., None] * dfT[:, None, :]
        d_agg[..., ctex:] = w_s[..., None] * drgb[:, None, :]
        dw_s = np.einsum("pc,psc->ps", dfT, agg[..., :ctex]) + np.einsum(
            "pc,psc->ps", drgb, agg[..., ctex:]
        )
        d_sigma_s, d_delta_s = integration_weights_backward(
            dw_s, np.zeros(P), ch["sigma_s"].astype(np.float64), ch["delta_s"], ch["T_s"], ch["a_s"], w_s, ch["Tf_s"]
        )
        dt_s = np.zeros_like(ch["t_s"])
        dt_s[..., :-1] -= d_delta_s[..., :-1]
        dt_s[..., 1:] += d_delta_s[..., :-1]
        dt_s[..., -1] -= d_delta_s[..., -1]

        # aggregation
        d_feats, d_vis = aggregate_backward(ch["agg_cache"], ch["feats"], d_agg)

        # per-view gathers and visibility queries
        pts = ch["pts"].astype(np.float64)
        d_pts = np.zeros_like(pts)
        for i, cam in enumerate(ctx.cams):
            g = ch["gather"][i]
            ok = g["ok"]
            dft = np.where(ok[..., None], d_feats[i, ..., :ctex], 0.0)
            dfc = np.where(ok[..., None], d_feats[i, ..., ctex:], 0.0)
            mh, mw, _ = ctx.tex_maps[i].data.shape
            _, dmu, dmv = bilinear_many_grad(
                ctx.tex_maps[i].data, g["mu"], g["mv"], dft, grad_data=d_tex_maps[i]
            )
            _, du2, dv2 = bilinear_many_grad(ctx.images[i], g["u_px"], g["v_px"], dfc)
            du_px = dmu * (mw / cam.width) + du2
            dv_px = dmv * (mh / cam.height) + dv2
            d_pts += project_backward(cam, pts, du_px, dv_px, np.zeros_like(du_px))
        if cfg.aggregation == "visibility":
            _, d_pts_vis = point_visibility_grad(pts, ctx.views, ch["vis_caches"], d_vis, d_vis_out=d_vis_vols)
            d_pts += d_pts_vis

        dt_s += np.einsum("psk,pk->ps", d_pts, dirs)

        # fine density samples: data grads plus the depth-coordinate chain
        ub = np.broadcast_to(ctx.u_vox[sl].astype(np.float64)[:, None], ch["d_s"].shape)
        vb = np.broadcast_to(ctx.v_vox[sl].astype(np.float64)[:, None], ch["d_s"].shape)
        _, _, _, dd = trilinear_many_grad(
            ctx.density.data, ub, vb, ch["d_s"], d_sigma_s[..., None], grad_data=dV_density
        )
        dt_s += dd * (D / (t_f - t_n))

        # hierarchical positions -> coarse weights -> coarse densities
        dw_c = hierarchical_samples_grad(ch["hcache"], dt_s)
        d_sigma_c, _ = integration_weights_backward(
            dw_c,
            np.zeros(P),
            ch["sigma_c"].astype(np.float64),
            ch["delta_c"],
            ch["T_c"],
            ch["a_c"],
            ch["w_c"],
            ch["Tf_c"],
        )
        if cfg.deterministic:
            d_c = np.broadcast_to(
                ((ctx.t_coarse - t_n) / (t_f - t_n) * D)[None, :], d_sigma_c.shape
            )
        else:
            d_c = (ch["t_c"] - t_n) / (t_f - t_n) * D
        ub = np.broadcast_to(ctx.u_vox[sl].astype(np.float64)[:, None], d_c.shape)
        vb = np.broadcast_to(ctx.v_vox[sl].astype(np.float64)[:, None], d_c.shape)
        trilinear_many_grad(ctx.density.data, ub, vb, d_c, d_sigma_c[..., None], grad_data=dV_density)

    # visibility volumes back to the novel density
    for view, dv in zip(ctx.views, d_vis_vols):
        view_visibility_backward(view, dv[..., 0], novel_shape, grad=dV_density)

    # density head
    hg = density_head_grad(ctx.fused, params.density, ctx.density_cache, dV_density[..., 0])
    d_offset_grid = None
    if ctx.offset_coords is not None:
        offset = params.density_offset
        d_offset_grid = np.zeros(offset.data.shape + (1,), dtype=np.float64)
        ou, ov, od = ctx.offset_coords
        trilinear_many_grad(
            offset.data[..., None], ou, ov, od, hg["d_offset"][..., None], grad_data=d_offset_grid
        )
        d_offset_grid = d_offset_grid[..., 0]

    # fused volume -> per-view sweep features -> geometry maps -> mixing params
    d_perview = None
    if N >= 2:
        d_perview = variance_fuse_grad(ctx.sweep_feats, ctx.sweep_valid, hg["d_fused"], include_mean=cfg.include_mean)
    d_geo_mix = np.zeros((ctx.raw_geo[0].shape[-1], cfg.c_geo))
    d_geo_bias = np.zeros(cfg.c_geo)
    d_tex_mix = np.zeros((ctx.raw_tex[0].shape[-1], ctex))
    d_tex_bias = np.zeros(ctex)
    for i in range(N):
        if d_perview is not None:
            sc = ctx.sweep_coords[i]
            up = np.where(sc["valid"][..., None], d_perview[i], 0.0)
            d_map = np.zeros(ctx.geo_maps[i].data.shape, dtype=np.float64)
            bilinear_many_grad(ctx.geo_maps[i].data, sc["mu"], sc["mv"], up, grad_data=d_map)
            gm, gb = mix_raw_grad(ctx.raw_geo[i], d_map)
            d_geo_mix += gm
            d_geo_bias += gb
        tm, tb = mix_raw_grad(ctx.raw_tex[i], d_tex_maps[i])
        d_tex_mix += tm
        d_tex_bias += tb

    return {
        "geo_mix": d_geo_mix,
        "geo_bias": d_geo_bias,
        "tex_mix": d_tex_mix,
        "tex_bias": d_tex_bias,
        "density_w": hg["d_weights"],
        "density_b": hg["d_bias"],
        "density_kernel": hg["d_kernel"],
        "density_offset": d_offset_grid,
        "head_w": d_head_w,
        "head_b": d_head_b,
    }
