"""Parametric stands-ins for the learned image encoder and density regressor.

The image encoder is a fixed filter bank (RGB, Sobel pair, box mean of
luminance) followed by trainable linear mixing into geometry and texture
feature streams. The density head is a per-voxel linear map plus softplus,
with an optional shared 3x3x3 smoothing kernel. Both have analytic
gradients; nothing here is a neural network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import FeatureMap, VolumeGrid

RAW_CHANNELS = 6

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass
class FeatureExtractorParams:
    geo_mix: np.ndarray  # (RAW_CHANNELS, C_G)
    geo_bias: np.ndarray  # (C_G,)
    tex_mix: np.ndarray  # (RAW_CHANNELS, C_T)
    tex_bias: np.ndarray  # (C_T,)

    def __post_init__(self):
        for name in ("geo_mix", "geo_bias", "tex_mix", "tex_bias"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, a)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
        if self.geo_mix.shape[0] != RAW_CHANNELS or self.tex_mix.shape[0] != RAW_CHANNELS:
            raise ValueError(f"mixing matrices must have {RAW_CHANNELS} input rows")
        if self.geo_bias.shape != (self.geo_mix.shape[1],):
            raise ValueError("geo bias shape mismatch")
        if self.tex_bias.shape != (self.tex_mix.shape[1],):
            raise ValueError("tex bias shape mismatch")


@dataclass
class DensityHeadParams:
    weights: np.ndarray  # (C,) per-channel weights on the fused volume
    bias: float
    kernel: np.ndarray | None = None  # optional (3, 3, 3) smoothing kernel

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = float(self.bias)
        if self.kernel is not None:
            self.kernel = np.asarray(self.kernel, dtype=np.float64).reshape(3, 3, 3)
            if not np.all(np.isfinite(self.kernel)):
                raise ValueError("kernel has non-finite entries")
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ValueError("density head params must be finite")


@dataclass
class RenderHeadParams:
    weight: np.ndarray  # (C_T, 3)
    bias: np.ndarray  # (3,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(3)


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-average an (H, W, C) image by an integer factor that divides both sides."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if H % factor or W % factor:
        raise ValueError(f"image size {H}x{W} not divisible by factor {factor}")
    a = np.asarray(image, dtype=np.float64)
    return a.reshape(H // factor, factor, W // factor, factor, -1).mean(axis=(1, 3))


def raw_feature_maps(image: np.ndarray, factor: int) -> np.ndarray:
    """Fixed raw channels at the downsampled scale: R, G, B, Sobel-x, Sobel-y, box mean.

    Sobel and box filters act on luminance with replicated borders. Output
    is (H/factor, W/factor, 6) and does not depend on any parameters.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    small = area_downsample(img, factor)
    lum = 0.299 * small[..., 0] + 0.587 * small[..., 1] + 0.114 * small[..., 2]
    gx = ndimage.convolve(lum, SOBEL_X, mode="nearest")
    gy = ndimage.convolve(lum, SOBEL_Y, mode="nearest")
    box = ndimage.uniform_filter(lum, size=3, mode="nearest")
    return np.concatenate([small, gx[..., None], gy[..., None], box[..., None]], axis=-1)


def mix_raw(raw: np.ndarray, mix: np.ndarray, bias: np.ndarray, dtype=np.float64) -> FeatureMap:
    return FeatureMap((raw @ mix + bias).astype(dtype))


def mix_raw_grad(raw: np.ndarray, upstream: np.ndarray):
    """Gradient of mix_raw output w.r.t. (mix, bias) for fixed raw channels."""
    up = np.asarray(upstream, dtype=np.float64).reshape(-1, upstream.shape[-1])
    rflat = raw.reshape(-1, raw.shape[-1])
    return rflat.T @ up, up.sum(axis=0)


def extract_features(image, params: FeatureExtractorParams, geo_factor=16, tex_factor=4):
    """Image -> (geometry FeatureMap, texture FeatureMap) per the two-stream split."""
    raw_g = raw_feature_maps(image, geo_factor)
    raw_t = raw_feature_maps(image, tex_factor)
    return (
        mix_raw(raw_g, params.geo_mix, params.geo_bias),
        mix_raw(raw_t, params.tex_mix, params.tex_bias),
    )


def softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _conv3_zero(pre: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.convolve(pre, kernel, mode="constant", cval=0.0)


def density_head(fused: VolumeGrid, params: DensityHeadParams, offset: np.ndarray | None = None):
    """Fused feature volume -> non-negative density volume.

    Per voxel: a = w . f + b (+ offset), optionally one pass of the shared
    3x3x3 kernel (zero padded), then softplus. Returns (VolumeGrid, cache)
    where cache carries the pre-activations for the backward pass.
    """
    if fused.channels != params.weights.shape[0]:
        raise ValueError(
            f"fused volume has {fused.channels} channels, head expects {params.weights.shape[0]}"
        )
    pre0 = fused.data.astype(np.float64) @ params.weights + params.bias
    if offset is not None:
        pre0 = pre0 + offset
    pre1 = _conv3_zero(pre0, params.kernel) if params.kernel is not None else pre0
    dens = softplus(pre1)
    cache = {"pre0": pre0, "pre1": pre1}
    return VolumeGrid(dens.astype(fused.data.dtype)[..., None]), cache


def density_head_grad(fused: VolumeGrid, params: DensityHeadParams, cache, upstream: np.ndarray):
    """Backward of density_head.

    upstream: (H, W, D) d loss / d density. Returns dict with d_weights,
    d_bias, d_fused (H, W, D, C), d_offset (H, W, D), d_kernel (or None).
    """
    up = np.asarray(upstream, dtype=np.float64)
    d_pre1 = up * sigmoid(cache["pre1"])
    d_kernel = None
    if params.kernel is not None:
        # conv with the flipped kernel is the adjoint of zero-padded conv
        d_pre0 = ndimage.convolve(d_pre1, params.kernel[::-1, ::-1, ::-1], mode="constant", cval=0.0)
        d_kernel = np.zeros((3, 3, 3))
        pre0 = cache["pre0"]
        padded = np.pad(pre0, 1, mode="constant")
        H, W, D = pre0.shape
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    # slice start i corresponds to kernel tap 2 - i (convolution flips)
                    d_kernel[2 - i, 2 - j, 2 - k] = np.sum(
                        padded[i : i + H, j : j + W, k : k + D] * d_pre1
                    )
    else:
        d_pre0 = d_pre1
    f64 = fused.data.astype(np.float64)
    d_weights = np.einsum("hwdc,hwd->c", f64, d_pre0)
    d_bias = float(np.sum(d_pre0))
    d_fused = d_pre0[..., None] * params.weights
    return {
        "d_weights": d_weights,
        "d_bias": d_bias,
        "d_fused": d_fused,
        "d_offset": d_pre0,
        "d_kernel": d_kernel,
    }


def default_extractor_params(c_geo: int, c_tex: int, seed: int = 0) -> FeatureExtractorParams:
    """Identity-on-RGB initialization with small seeded noise on the rest."""
    rng = np.random.default_rng(seed)
    geo = 0.01 * rng.standard_normal((RAW_CHANNELS, c_geo))
    tex = 0.01 * rng.standard_normal((RAW_CHANNELS, c_tex))
    for m in (geo, tex):
        k = min(RAW_CHANNELS, m.shape[1])
        m[:k, :k] += np.eye(k)[: m.shape[0]]
    return FeatureExtractorParams(
        geo_mix=geo,
        geo_bias=np.zeros(c_geo),
        tex_mix=tex,
        tex_bias=np.zeros(c_tex),
    )
