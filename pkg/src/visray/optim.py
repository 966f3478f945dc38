"""Losses, the Adam fitting loop over scene parameters, and gradient checking."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .model import DensityHeadParams, FeatureExtractorParams, RenderHeadParams, default_extractor_params
from .pipeline import RenderConfig, render_backward, render_frame

PARAM_KEYS = (
    "geo_mix",
    "geo_bias",
    "tex_mix",
    "tex_bias",
    "density_w",
    "density_b",
    "density_kernel",
    "density_offset",
    "head_w",
    "head_b",
)


@dataclass
class DensityOffsetGrid:
    """World-anchored free density offset, added to the head pre-activation.

    Lives on an axis-aligned grid over [lo, hi] so every fitting target pulls
    on the same world-space parameters; frustum voxels sample it trilinearly.
    """

    data: np.ndarray  # (H, W, D)
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.data.ndim != 3:
            raise ValueError("offset grid must be (H, W, D)")
        if np.any(self.hi <= self.lo):
            raise ValueError("need lo < hi per axis")

    def grid_coords(self, pts: np.ndarray):
        """World points -> fractional grid coordinates (u along x, v along y, d along z)."""
        H, W, D = self.data.shape
        rel = (np.asarray(pts) - self.lo) / (self.hi - self.lo)
        # y indexes rows (H), x columns (W), z depth (D)
        u = rel[..., 0] * (W - 1)
        v = rel[..., 1] * (H - 1)
        d = rel[..., 2] * (D - 1)
        return u, v, d


@dataclass
class SceneParams:
    """Every trainable quantity in the pipeline, plus its gradient buffers."""

    extractor: FeatureExtractorParams
    density: DensityHeadParams
    render_head: RenderHeadParams
    density_offset: DensityOffsetGrid | None = None
    step_count: int = 0

    @classmethod
    def init(cls, config: RenderConfig, seed: int = 0, offset_shape=None, offset_bounds=None,
             with_kernel: bool = False):
        rng = np.random.default_rng(seed)
        extractor = default_extractor_params(config.c_geo, config.c_tex, seed=seed)
        kernel = None
        if with_kernel:
            kernel = np.zeros((3, 3, 3))
            kernel[1, 1, 1] = 1.0
        density = DensityHeadParams(
            weights=0.01 * rng.standard_normal(config.fused_channels), bias=0.0, kernel=kernel
        )
        head_w = 0.01 * rng.standard_normal((config.c_tex, 3))
        head_w[:3, :3] += np.eye(3)
        render_head = RenderHeadParams(weight=head_w, bias=np.full(3, 0.0))
        offset = None
        if offset_shape is not None:
            if offset_bounds is None:
                raise ValueError("offset_shape needs offset_bounds (lo, hi)")
            offset = DensityOffsetGrid(np.zeros(offset_shape), *offset_bounds)
        return cls(extractor=extractor, density=density, render_head=render_head, density_offset=offset)

    def tensors(self) -> dict:
        """Flat name -> array view of every trainable tensor (scalars as 0-d)."""
        out = {
            "geo_mix": self.extractor.geo_mix,
            "geo_bias": self.extractor.geo_bias,
            "tex_mix": self.extractor.tex_mix,
            "tex_bias": self.extractor.tex_bias,
            "density_w": self.density.weights,
            "density_b": np.float64(self.density.bias),
            "head_w": self.render_head.weight,
            "head_b": self.render_head.bias,
        }
        if self.density.kernel is not None:
            out["density_kernel"] = self.density.kernel
        if self.density_offset is not None:
            out["density_offset"] = self.density_offset.data
        return out

    def apply_update(self, name: str, delta: np.ndarray):
        if name == "density_b":
            self.density.bias = float(self.density.bias + delta)
        elif name == "geo_mix":
            self.extractor.geo_mix += delta
        elif name == "geo_bias":
            self.extractor.geo_bias += delta
        elif name == "tex_mix":
            self.extractor.tex_mix += delta
        elif name == "tex_bias":
            self.extractor.tex_bias += delta
        elif name == "density_w":
            self.density.weights += delta
        elif name == "density_kernel":
            self.density.kernel += delta
        elif name == "density_offset":
            self.density_offset.data += delta
        elif name == "head_w":
            self.render_head.weight += delta
        elif name == "head_b":
            self.render_head.bias += delta
        else:
            raise KeyError(name)

    def assert_finite(self):
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise FloatingPointError(f"parameter {name} became non-finite")


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: SceneParams, grads: dict, state: AdamState):
    """One bias-corrected Adam update over every tensor present in grads."""
    for name, g in grads.items():
        if g is None:
            continue
        if not np.all(np.isfinite(np.asarray(g))):
            raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
    state.t += 1
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / b1t
        v_hat = state.v[name] / b2t
        params.apply_update(name, -state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    params.step_count += 1
    params.assert_finite()
    return params, state


# ---------------------------------------------------------------------------
# Losses


def loss_render(i_hr: np.ndarray, i_gt_hr: np.ndarray) -> float:
    a = np.asarray(i_hr, dtype=np.float64)
    b = np.asarray(i_gt_hr, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_render_grad(i_hr, i_gt_hr) -> np.ndarray:
    a = np.asarray(i_hr, dtype=np.float64)
    b = np.asarray(i_gt_hr, dtype=np.float64)
    return 2.0 * (a - b) / a.size


def loss_inter(i_inter: np.ndarray, i_gt_lr: np.ndarray) -> float:
    return loss_render(i_inter, i_gt_lr)


def loss_inter_grad(i_inter, i_gt_lr) -> np.ndarray:
    return loss_render_grad(i_inter, i_gt_lr)


def loss_total(render: float, inter: float, percep: float = 0.0, lam: float = 0.1) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return render + inter + lam * percep


def downsample_gt(image: np.ndarray, factor: int) -> np.ndarray:
    """Area downsample of the ground truth to the interpolated-image resolution."""
    from .model import area_downsample

    return area_downsample(image, factor)


# ---------------------------------------------------------------------------
# Fitting


def default_offset_bounds(dataset, scale=0.6):
    """Axis-aligned world box covering the capture volume.

    Centered on the mean of the cameras' optical-axis points at mid depth,
    with half-extent scale * (t_far - t_near).
    """
    mid = 0.5 * (dataset.t_near + dataset.t_far)
    pts = np.stack([cam.center + cam.rotation[2] * mid for cam in dataset.cameras])
    center = pts.mean(axis=0)
    half = scale * (dataset.t_far - dataset.t_near)
    return center - half, center + half


@dataclass
class FitResult:
    params: SceneParams
    trace: list  # per-iteration dicts: iter, target, loss_render, loss_inter, loss_total, ms


def fit_scene(dataset, config: RenderConfig, iterations: int, seed: int = 0, params: SceneParams | None = None,
              lr: float = 5e-4, use_offset: bool = True, offset_resolution: int = 32,
              init_bias: float = -3.0, callback=None) -> FitResult:
    """Per-scene gradient descent: round-robin target views, full-frame loss.

    Deterministic under the seed. Returns the fitted parameters and a loss
    trace; a non-finite loss aborts with a diagnostic.
    """
    if len(dataset.cameras) < config.n_views + 1:
        raise ValueError("dataset must have at least n_views + 1 views")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.cameras))
    if params is None:
        offset_shape = None
        offset_bounds = None
        if use_offset:
            offset_shape = (offset_resolution,) * 3
            offset_bounds = default_offset_bounds(dataset)
        params = SceneParams.init(config, seed=seed, offset_shape=offset_shape, offset_bounds=offset_bounds)
        params.density.bias = init_bias  # start nearly transparent
    state = AdamState(lr=lr)
    raw_cache: dict = {}
    gt_lr = {i: downsample_gt(img, config.upsample) for i, img in enumerate(dataset.images)}
    trace = []
    for it in range(iterations):
        t0 = time.perf_counter()
        target = int(order[it % len(order)])
        out, tape = render_frame(
            dataset.cameras[target],
            dataset,
            params,
            config,
            with_tape=True,
            exclude_view=target,
            raw_cache=raw_cache,
        )
        lr_loss = loss_render(out.i_hr, dataset.images[target])
        li_loss = loss_inter(out.i_inter, gt_lr[target])
        total = loss_total(lr_loss, li_loss)
        if not np.isfinite(total):
            raise FloatingPointError(f"loss diverged at iteration {it}: {total}")
        grads = render_backward(
            tape,
            d_ihr=loss_render_grad(out.i_hr, dataset.images[target]),
            d_iinter=loss_inter_grad(out.i_inter, gt_lr[target]),
        )
        adam_step(params, grads, state)
        ms = (time.perf_counter() - t0) * 1e3
        rec = {
            "iter": it,
            "target": target,
            "loss_render": lr_loss,
            "loss_inter": li_loss,
            "loss_total": total,
            "ms": ms,
        }
        trace.append(rec)
        if callback is not None:
            callback(rec)
    return FitResult(params=params, trace=trace)


def save_trace_csv(path, trace):
    with open(path, "w") as f:
        f.write("iter,loss_render,loss_inter,loss_total,wall_ms\n")
        for r in trace:
            f.write(f"{r['iter']},{r['loss_render']:.9g},{r['loss_inter']:.9g},{r['loss_total']:.9g},{r['ms']:.3f}\n")


# ---------------------------------------------------------------------------
# Finite-difference verification harness


def finite_difference_check(f, params: SceneParams, grads: dict, probes, h: float = 1e-5):
    """Compare analytic grads against central differences at selected scalars.

    f: zero-argument callable evaluating the scalar loss with the current
    params. probes: list of (tensor_name, flat_index). Returns a report dict
    with per-probe entries and the max relative error.
    """
    report = []
    for name, idx in probes:
        tensors = params.tensors()
        base = np.asarray(tensors[name], dtype=np.float64)
        flat = base.reshape(-1).copy()
        delta = np.zeros_like(flat)
        delta[idx] = h
        params.apply_update(name, delta.reshape(base.shape))
        f_plus = f()
        params.apply_update(name, (-2 * delta).reshape(base.shape))
        f_minus = f()
        params.apply_update(name, delta.reshape(base.shape))
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(np.asarray(grads[name]).reshape(-1)[idx])
        rel = abs(numeric - analytic) / (max(abs(numeric), abs(analytic)) + 1e-12)
        report.append({"name": name, "index": int(idx), "numeric": numeric, "analytic": analytic, "rel_err": rel})
    return {"probes": report, "max_rel_err": max(r["rel_err"] for r in report) if report else 0.0}


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest plus one raw little-endian float64 blob per tensor.


def save_checkpoint(path, params: SceneParams, config: RenderConfig, meta=None):
    os.makedirs(path, exist_ok=True)
    tensors = {}
    for name, t in params.tensors().items():
        a = np.asarray(t, dtype=np.float64)
        fname = f"{name}.bin"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        tensors[name] = {"shape": list(a.shape), "dtype": "float64", "file": fname}
    offset_bounds = None
    if params.density_offset is not None:
        offset_bounds = [params.density_offset.lo.tolist(), params.density_offset.hi.tolist()]
    manifest = {
        "format": 1,
        "offset_bounds": offset_bounds,
        "config": {
            "n_uniform": config.n_uniform,
            "n_hier": config.n_hier,
            "n_views": config.n_views,
            "upsample": config.upsample,
            "geo_scale": config.geo_scale,
            "planes": config.planes,
            "c_geo": config.c_geo,
            "c_tex": config.c_tex,
            "include_mean": config.include_mean,
            "aggregation": config.aggregation,
            "deterministic": config.deterministic,
            "seed": config.seed,
            "dtype": config.dtype,
        },
        "step_count": params.step_count,
        "tensors": tensors,
        "meta": meta or {},
    }
    with open(os.path.join(path, "params.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(path):
    mpath = os.path.join(path, "params.json")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise IOError(f"missing checkpoint manifest: {mpath}")
    cfg = RenderConfig(**manifest["config"])
    loaded = {}
    for name, info in manifest["tensors"].items():
        with open(os.path.join(path, info["file"]), "rb") as f:
            a = np.frombuffer(f.read(), dtype="<f8").reshape(info["shape"])
        loaded[name] = a.copy()
    extractor = FeatureExtractorParams(
        geo_mix=loaded["geo_mix"],
        geo_bias=loaded["geo_bias"],
        tex_mix=loaded["tex_mix"],
        tex_bias=loaded["tex_bias"],
    )
    density = DensityHeadParams(
        weights=loaded["density_w"],
        bias=float(loaded["density_b"]),
        kernel=loaded.get("density_kernel"),
    )
    head = RenderHeadParams(weight=loaded["head_w"], bias=loaded["head_b"])
    offset = None
    if "density_offset" in loaded:
        lo, hi = manifest["offset_bounds"]
        offset = DensityOffsetGrid(loaded["density_offset"], lo, hi)
    params = SceneParams(
        extractor=extractor,
        density=density,
        render_head=head,
        density_offset=offset,
        step_count=int(manifest.get("step_count", 0)),
    )
    return params, cfg, manifest.get("meta", {})
