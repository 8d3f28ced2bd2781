"""Transformer fusion over stacked two-view tokens plus the shared decoder.

Both stage-4 maps are average-pooled to a fixed resolution, flattened to
tokens, and stacked into one sequence. A learnable positional embedding
enters the attention projections only; the residual stream keeps the raw
tokens, so with zero-initialized output projections the whole encoder is
a bit-exact identity on the feature maps. The transformer's contribution
(final stream minus input stream) is upsampled and added back to each
view; the shared decoder scores the summed global average vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .layers import Dense, normal


@dataclass
class EncoderBlock:
    wq: Dense
    wk: Dense
    wv: Dense
    wo: Dense        # zero-initialized output projection
    ff1: Dense
    ff2: Dense       # zero-initialized

    @classmethod
    def create(cls, rng, channels, dtype):
        return cls(
            wq=Dense.create(rng, channels, channels, dtype),
            wk=Dense.create(rng, channels, channels, dtype),
            wv=Dense.create(rng, channels, channels, dtype),
            wo=Dense.create(rng, channels, channels, dtype, zero_init=True),
            ff1=Dense.create(rng, 2 * channels, channels, dtype),
            ff2=Dense.create(rng, channels, 2 * channels, dtype, zero_init=True),
        )

    def named(self, prefix):
        for nm, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                          ("wo", self.wo), ("ff1", self.ff1), ("ff2", self.ff2)):
            yield from layer.named(f"{prefix}.{nm}")


@dataclass
class GlobalEncoderParams:
    positional: Tensor          # (2*P*P, C)
    blocks: list
    heads: int
    pooled_resolution: int
    channels: int

    @classmethod
    def create(cls, rng, channels, map_size, dtype, heads=4, layers=1,
               pooled_resolution=None):
        p = min(map_size, 16) if pooled_resolution is None else pooled_resolution
        if map_size % p:
            raise ValueError(f"map size {map_size} not divisible by pooled resolution {p}")
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        positional = normal(rng, (2 * p * p, channels), 0.02, dtype)
        blocks = [EncoderBlock.create(rng, channels, dtype) for _ in range(layers)]
        return cls(positional=positional, blocks=blocks, heads=heads,
                   pooled_resolution=p, channels=channels)

    def named(self, prefix):
        yield f"{prefix}.positional", self.positional
        for li, block in enumerate(self.blocks):
            yield from block.named(f"{prefix}.block{li}")


@dataclass
class SharedDecoderParams:
    fc1: Dense     # C -> C // 2
    fc2: Dense     # C // 2 -> 1

    @classmethod
    def create(cls, rng, channels, dtype):
        hidden = max(channels // 2, 1)
        # small final layer keeps the opening breast-level score near 0.5
        return cls(fc1=Dense.create(rng, hidden, channels, dtype),
                   fc2=Dense.create(rng, 1, hidden, dtype, scale=0.1))

    def named(self, prefix):
        yield from self.fc1.named(f"{prefix}.fc1")
        yield from self.fc2.named(f"{prefix}.fc2")


def attention(zp: Tensor, block: EncoderBlock, heads: int, return_weights=False):
    """Multi-head self-attention with 1/sqrt(d_head)-scaled scores."""
    b, t, c = zp.shape
    dh = c // heads

    def split(x):
        return ad.transpose(ad.reshape(x, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(block.wq.apply(zp))
    k = split(block.wk.apply(zp))
    v = split(block.wv.apply(zp))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)                                   # (B, h, T, dh)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, c))
    out = block.wo.apply(merged)
    if return_weights:
        return out, attn
    return out


def _tokens_from_map(fmap: Tensor, p: int) -> Tensor:
    b, c, h, w = fmap.shape
    pooled = ad.avg_pool2d(fmap, kernel=h // p)
    return ad.transpose(ad.reshape(pooled, (b, c, p * p)), (0, 2, 1))


def _map_from_tokens(tokens: Tensor, p: int) -> Tensor:
    b, t, c = tokens.shape
    return ad.reshape(ad.transpose(tokens, (0, 2, 1)), (b, c, p, p))


def global_encode(f_cc: Tensor, f_mlo: Tensor, params: GlobalEncoderParams):
    """Fuse the two stage-4 maps; returns (updated_cc, updated_mlo, g)."""
    if f_cc.shape != f_mlo.shape:
        raise ShapeError(f"view maps differ: {f_cc.shape} vs {f_mlo.shape}")
    b, c, h, w = f_cc.shape
    if h != w:
        raise ShapeError(f"fusion expects square maps, got {h}x{w}")
    if c != params.channels:
        raise ShapeError(f"token width {c} != configured channels {params.channels}")
    p = params.pooled_resolution
    pp = p * p

    z0 = ad.concat((_tokens_from_map(f_cc, p), _tokens_from_map(f_mlo, p)), axis=1)
    z = z0
    for block in params.blocks:
        zp = ad.add(z, params.positional)          # position enters Q/K/V only
        z = ad.add(z, attention(zp, block, params.heads))
        z = ad.add(z, block.ff2.apply(ad.relu(block.ff1.apply(z))))
    delta = ad.sub(z, z0)

    delta_cc = _map_from_tokens(ad.narrow(delta, 1, 0, pp), p)
    delta_mlo = _map_from_tokens(ad.narrow(delta, 1, pp, pp), p)
    out_cc = ad.add(f_cc, ad.upsample_bilinear(delta_cc, h, w))
    out_mlo = ad.add(f_mlo, ad.upsample_bilinear(delta_mlo, h, w))
    g = ad.add(ad.gap2d(out_cc), ad.gap2d(out_mlo))
    return out_cc, out_mlo, g


def pooled_global_vector(f_cc: Tensor, f_mlo: Tensor) -> Tensor:
    """Fusion-free fallback: g = GAP(cc) + GAP(mlo)."""
    return ad.add(ad.gap2d(f_cc), ad.gap2d(f_mlo))


def shared_decode(g: Tensor, params: SharedDecoderParams) -> Tensor:
    """Breast-level score sigma(FC2(ReLU(FC1(g)))) per sample."""
    hidden = ad.relu(params.fc1.apply(g))
    logit = ad.reshape(params.fc2.apply(hidden), (g.shape[0],))
    return ad.sigmoid(logit)


def total_loss(l_sh: Tensor, l_cc: Tensor, l_mlo: Tensor) -> Tensor:
    """Unweighted sum of the three objectives."""
    for name, term in (("shared", l_sh), ("cc", l_cc), ("mlo", l_mlo)):
        if not np.all(np.isfinite(term.data)):
            raise NonFiniteError(f"loss term '{name}' is non-finite")
    return ad.add(ad.add(l_sh, l_cc), l_mlo)


def breast_prediction(s_cc, s_mlo, s_shared, weights=(1.0, 1.0, 1.0)):
    """Weighted mean of the three scores, normalized by the weight sum."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0):
        raise ValueError("weights must be three non-negative numbers")
    total = w.sum()
    if total == 0:
        raise ValueError("ensemble weights must not all be zero")
    parts = []
    for wi, s in zip(w, (s_cc, s_mlo, s_shared)):
        si = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
        parts.append(ad.mul(si, float(wi / total)))
    return ad.add(ad.add(parts[0], parts[1]), parts[2])
