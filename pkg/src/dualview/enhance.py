"""Cross-channel and cross-view feature enhancement.

Per attachment level: instance-normalize the map, re-inject a
channel-attended slice of the removed residual, then exchange column-wise
geometric attention between the two views. Attention maps of both views
come from one shared 3x3 kernel; each view's map is modulated by the
other view's per-column maximum before the multiplicative residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Conv

IN_EPS = 1e-6


@dataclass
class CveParams:
    """Bottleneck channel attention (theta1/theta2) + shared spatial kernel."""

    theta1: Conv           # 1x1, C -> C/r
    theta2: Conv           # 1x1, C/r -> C
    theta3: Conv           # 3x3, C -> 1, shared by both views
    reduction_ratio: int

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, dtype,
               reduction_ratio: int = 16):
        if channels < 1:
            raise ValueError("channels must be positive")
        hidden = max(channels // reduction_ratio, 1)
        return cls(
            theta1=Conv.create(rng, hidden, channels, 1, 1, dtype),
            theta2=Conv.create(rng, channels, hidden, 1, 1, dtype),
            theta3=Conv.create(rng, 1, channels, 3, 3, dtype),
            reduction_ratio=reduction_ratio,
        )

    def named(self, prefix):
        yield from self.theta1.named(f"{prefix}.theta1")
        yield from self.theta2.named(f"{prefix}.theta2")
        yield from self.theta3.named(f"{prefix}.theta3")


@dataclass
class CveIntermediates:
    """Per-view tensors retained for tests and heatmap export."""

    f: Tensor = None
    f_tilde: Tensor = None
    residual: Tensor = None
    t: Tensor = None
    residual_plus: Tensor = None
    f_tilde_plus: Tensor = None
    w: Tensor = None
    v: Tensor = None
    w_hat: Tensor = None
    f_hat: Tensor = None


def cross_channel_enhance(f: Tensor, params: CveParams, inter: CveIntermediates | None = None):
    """IN residual distillation: returns F~+ = IN(F) + t (.) (F - IN(F))."""
    if f.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) feature map, got {f.shape}")
    f_tilde = ad.instance_norm(f, eps=IN_EPS)
    residual = ad.sub(f, f_tilde)
    pooled = ad.reshape(ad.gap2d(residual), (f.shape[0], f.shape[1], 1, 1))
    t = ad.sigmoid(params.theta2.apply(ad.relu(params.theta1.apply(pooled))))
    residual_plus = ad.mul(residual, t)
    f_tilde_plus = ad.add(f_tilde, residual_plus)
    if inter is not None:
        inter.f = f
        inter.f_tilde = f_tilde
        inter.residual = residual
        inter.t = t
        inter.residual_plus = residual_plus
        inter.f_tilde_plus = f_tilde_plus
    return f_tilde_plus


def geometric_vector(w: Tensor) -> Tensor:
    """Column-wise maximum of a (B, 1, H, W) attention map -> (B, W)."""
    if w.ndim != 4 or w.shape[1] != 1:
        raise ShapeError(f"attention map must be (B, 1, H, W), got {w.shape}")
    b, _, h, wd = w.shape
    flat = ad.reshape(w, (b, h, wd))
    v, _ = ad.max_along(flat, axis=1)
    return v


def cross_view_enhance(fp_cc: Tensor, fp_mlo: Tensor, params: CveParams,
                       inter_cc: CveIntermediates | None = None,
                       inter_mlo: CveIntermediates | None = None):
    """Swap per-column attention maxima between views (multiplicative residual)."""
    if fp_cc.shape != fp_mlo.shape:
        raise ShapeError(f"view maps differ: {fp_cc.shape} vs {fp_mlo.shape}")
    b, _, h, wd = fp_cc.shape
    w_cc = ad.sigmoid(params.theta3.apply(fp_cc, padding=1))
    w_mlo = ad.sigmoid(params.theta3.apply(fp_mlo, padding=1))
    v_cc = geometric_vector(w_cc)
    v_mlo = geometric_vector(w_mlo)
    w_hat_cc = ad.mul(w_cc, ad.reshape(v_mlo, (b, 1, 1, wd)))
    w_hat_mlo = ad.mul(w_mlo, ad.reshape(v_cc, (b, 1, 1, wd)))
    f_hat_cc = ad.add(fp_cc, ad.mul(w_hat_cc, fp_cc))
    f_hat_mlo = ad.add(fp_mlo, ad.mul(w_hat_mlo, fp_mlo))
    for inter, w, v, w_hat, f_hat in ((inter_cc, w_cc, v_cc, w_hat_cc, f_hat_cc),
                                      (inter_mlo, w_mlo, v_mlo, w_hat_mlo, f_hat_mlo)):
        if inter is not None:
            inter.w = w
            inter.v = v
            inter.w_hat = w_hat
            inter.f_hat = f_hat
    return f_hat_cc, f_hat_mlo


def enhance_pair(f_cc: Tensor, f_mlo: Tensor, params: CveParams, keep_intermediates=False):
    """Full enhancement of one view pair at one level."""
    inter_cc = CveIntermediates() if keep_intermediates else None
    inter_mlo = CveIntermediates() if keep_intermediates else None
    fp_cc = cross_channel_enhance(f_cc, params, inter_cc)
    fp_mlo = cross_channel_enhance(f_mlo, params, inter_mlo)
    f_hat_cc, f_hat_mlo = cross_view_enhance(fp_cc, fp_mlo, params, inter_cc, inter_mlo)
    return f_hat_cc, f_hat_mlo, (inter_cc, inter_mlo)


# ---------------------------------------------------------------------------
# heatmap export


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM (P5), linearly rescaled from [min, max] to [0, 255]."""
    if values.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-d map, got shape {values.shape}")
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        scaled = (values - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(values, dtype=np.float64)
    data = np.rint(scaled).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    """Inverse of write_pgm (test helper)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
