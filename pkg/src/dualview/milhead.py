"""Per-view multi-instance head with a contrastive objective.

A stage-4 feature map is tiled into an n x n grid of GAP-pooled instance
embeddings. A dual-stream aggregator scores the bag: the max instance
score on one stream, an attention-weighted bag embedding on the other.
For the contrastive branch, the batch feature map gets a feature-level
style perturbation (statistics interpolation against a shuffled partner,
plus slight Gaussian noise); malignant critical instances anchor against
their perturbed twins, with benign critical instances as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Dense


@dataclass
class DsmilParams:
    """Instance scorer, query/information projections, bag scorer."""

    f_m: Dense     # C -> 1
    w_q: Dense     # C -> d_q
    w_v: Dense     # C -> d_v
    f_b: Dense     # d_v -> 1

    @classmethod
    def create(cls, rng, channels, dtype, d_q=None, d_v=None):
        d_q = channels if d_q is None else d_q
        d_v = channels if d_v is None else d_v
        # scorer outputs start near 0 so both sigmoid streams open at ~0.5
        return cls(
            f_m=Dense.create(rng, 1, channels, dtype, scale=0.1),
            w_q=Dense.create(rng, d_q, channels, dtype),
            w_v=Dense.create(rng, d_v, channels, dtype),
            f_b=Dense.create(rng, 1, d_v, dtype, scale=0.1),
        )

    def named(self, prefix):
        yield from self.f_m.named(f"{prefix}.f_m")
        yield from self.w_q.named(f"{prefix}.w_q")
        yield from self.w_v.named(f"{prefix}.w_v")
        yield from self.f_b.named(f"{prefix}.f_b")


@dataclass
class MixstyleConfig:
    apply_probability: float = 1.0
    noise_sigma: float = 0.01
    epsilon: float = 1e-6


@dataclass
class InstanceBag:
    """One view's tiled instances plus its critical-instance selection."""

    instances: Tensor        # (N, C)
    instance_scores: Tensor  # (N,) raw scores from f_m
    critical_index: int
    source: tuple = ()       # (view, sample_id, domain_id)


def tile_instances(fmap: Tensor, n: int) -> Tensor:
    """(B, C, H, W) -> (B, n^2, C): GAP over each tile of an n x n grid."""
    if fmap.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {fmap.shape}")
    b, c, h, w = fmap.shape
    if h != w:
        raise ShapeError(f"tiling expects square maps, got {h}x{w}")
    if h % n:
        raise ShapeError(f"spatial dims {h}x{w} not divisible into {n}x{n} tiles")
    pooled = ad.avg_pool2d(fmap, kernel=h // n)
    flat = ad.reshape(pooled, (b, c, n * n))
    return ad.transpose(flat, (0, 2, 1))


def instance_scores(instances: Tensor, params: DsmilParams) -> Tensor:
    """Raw per-instance scores f_m(p_i): (B, N, C) -> (B, N)."""
    s = params.f_m.apply(instances)
    return ad.reshape(s, instances.shape[:2])


def tile_to_bag(f_hat: Tensor, n: int, params: DsmilParams, source=()) -> InstanceBag:
    """Bag a single view map ((C, H, W) or (1, C, H, W))."""
    if f_hat.ndim == 3:
        f_hat = ad.reshape(f_hat, (1,) + tuple(f_hat.shape))
    if f_hat.shape[0] != 1:
        raise ShapeError("tile_to_bag takes one sample; use tile_instances for batches")
    inst = tile_instances(f_hat, n)
    scores = instance_scores(inst, params)
    crit = int(np.argmax(scores.data[0]))            # ties -> lowest index
    return InstanceBag(
        instances=ad.reshape(inst, inst.shape[1:]),
        instance_scores=ad.reshape(scores, (scores.shape[1],)),
        critical_index=crit,
        source=tuple(source),
    )


@dataclass
class MilScores:
    """Dual-stream outputs; every score lives in (0, 1)."""

    s_max: Tensor       # (B,) sigmoid of max instance score
    s_bag: Tensor       # (B,) sigmoid of bag-classifier output
    s: Tensor           # (B,) average of the two streams
    weights: Tensor     # (B, N) softmax attention over instances
    critical_index: np.ndarray  # (B,)
    raw_scores: Tensor  # (B, N)


def dsmil_score_batch(instances: Tensor, params: DsmilParams) -> MilScores:
    """Score a batch of bags (B, N, C)."""
    b, n, c = instances.shape
    raw = instance_scores(instances, params)                  # (B, N)
    max_raw, crit = ad.max_along(raw, axis=1)                 # (B,), (B,)
    q = params.w_q.apply(instances)                           # (B, N, dq)
    q_m = ad.take_per_row(q, crit)                            # (B, dq)
    dots = ad.tsum(ad.mul(q, ad.reshape(q_m, (b, 1, q.shape[2]))), axis=2)
    d = ad.softmax(dots, axis=1)                              # (B, N)
    v = params.w_v.apply(instances)                           # (B, N, dv)
    bag_emb = ad.tsum(ad.mul(v, ad.reshape(d, (b, n, 1))), axis=1)
    bag_logit = ad.reshape(params.f_b.apply(bag_emb), (b,))
    s_max = ad.sigmoid(max_raw)
    s_bag = ad.sigmoid(bag_logit)
    s = ad.mul(ad.add(s_max, s_bag), 0.5)
    return MilScores(s_max=s_max, s_bag=s_bag, s=s, weights=d,
                     critical_index=crit, raw_scores=raw)


def dsmil_score(bag: InstanceBag, params: DsmilParams) -> MilScores:
    """Score one bag; returns MilScores with batch dimension 1."""
    inst = ad.reshape(bag.instances, (1,) + tuple(bag.instances.shape))
    return dsmil_score_batch(inst, params)


# ---------------------------------------------------------------------------
# feature-level out-of-distribution augmentation


def mixstyle(fmap: Tensor, shuffle_permutation, m: float, config: MixstyleConfig) -> Tensor:
    """Interpolate per-channel spatial mean/std against a shuffled partner.

    The normalized spatial pattern is untouched; only first/second-order
    statistics move toward the partner's by factor (1 - m).
    """
    if fmap.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W), got {fmap.shape}")
    if fmap.shape[0] < 2:
        raise ValueError("mixstyle needs batch >= 2 (no shuffle partner)")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"mixing coefficient m={m} outside [0, 1]")
    perm = np.asarray(shuffle_permutation)
    b = fmap.shape[0]
    gamma = ad.tmean(fmap, axis=(2, 3), keepdims=True)               # (B, C, 1, 1)
    centered = ad.sub(fmap, gamma)
    var = ad.tmean(ad.mul(centered, centered), axis=(2, 3), keepdims=True)
    beta = ad.sqrt(ad.add(var, float(config.epsilon)))
    gamma_p = ad.permute_rows(gamma, perm)
    beta_p = ad.permute_rows(beta, perm)
    gamma_mix = ad.add(ad.mul(gamma, float(m)), ad.mul(gamma_p, float(1.0 - m)))
    beta_mix = ad.add(ad.mul(beta, float(m)), ad.mul(beta_p, float(1.0 - m)))
    return ad.add(ad.mul(ad.div(centered, beta), beta_mix), gamma_mix)


def augment_ood(f_hat: Tensor, config: MixstyleConfig, rng: np.random.Generator,
                training: bool = True) -> Tensor:
    """Mixstyle with fresh uniform m + Gaussian feature noise (training only)."""
    if not training:
        raise RuntimeError("feature augmentation is a training-only path")
    apply_mix = rng.uniform() < config.apply_probability
    out = f_hat
    if apply_mix:
        perm = rng.permutation(f_hat.shape[0])
        m = float(rng.uniform(0.0, 1.0))
        out = mixstyle(f_hat, perm, m, config)
    if config.noise_sigma > 0:
        noise = rng.normal(0.0, config.noise_sigma, size=f_hat.shape)
        out = ad.add(out, Tensor(noise.astype(f_hat.dtype)))
    return out


# ---------------------------------------------------------------------------
# contrastive objective


@dataclass
class ContrastiveBatchSets:
    """Anchor/positive pairs from malignant bags, negatives from benign bags."""

    anchors: Tensor      # (P, C) unit-norm critical-instance embeddings
    positives: Tensor    # (P, C) their augmented twins
    negatives: Tensor    # (Q, C)
    tau: float = 0.5


def _check_unit_norm(name, x: Tensor):
    if x.shape[0] == 0:
        return
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError(f"{name} not L2-normalized (max deviation "
                         f"{np.abs(norms - 1.0).max():.2e})")


def contrastive_loss(sets: ContrastiveBatchSets) -> Tensor:
    """InfoNCE-style loss over critical instances; 0 when no anchors."""
    if sets.tau <= 0:
        raise ValueError("temperature must be positive")
    p = sets.anchors.shape[0]
    if p == 0:
        return Tensor(np.zeros((), dtype=sets.anchors.dtype))
    _check_unit_norm("anchors", sets.anchors)
    _check_unit_norm("positives", sets.positives)
    _check_unit_norm("negatives", sets.negatives)
    inv_tau = 1.0 / float(sets.tau)
    pos = ad.tsum(ad.mul(sets.anchors, sets.positives), axis=1, keepdims=True)
    pos = ad.mul(pos, inv_tau)                                    # (P, 1)
    if sets.negatives.shape[0] > 0:
        neg = ad.matmul(sets.anchors, ad.transpose(sets.negatives, (1, 0)))
        neg = ad.mul(neg, inv_tau)                                # (P, Q)
        logits = ad.concat((pos, neg), axis=1)
    else:
        logits = pos
    lse = ad.logsumexp(logits, axis=1)                            # (P,)
    per_anchor = ad.sub(lse, ad.reshape(pos, (p,)))
    return ad.tmean(per_anchor)


def select_critical(instances: Tensor, critical_index) -> Tensor:
    """Unit-norm embeddings of the per-bag critical instances: (B, C)."""
    picked = ad.take_per_row(instances, critical_index)
    return ad.l2_normalize(picked, axis=1)


def build_contrastive_sets(instances: Tensor, aug_instances: Tensor,
                           critical_index, labels, tau: float) -> ContrastiveBatchSets:
    """Partition a batch's critical instances by breast-level label.

    The positive twin reuses the anchor's tile index on the augmented map
    (the perturbation must not move which patch is critical). The benign
    side contributes its own argmax-scored instance — the hard negative.
    Rows whose embedding (or its twin) is numerically zero are dropped:
    a dead instance has no direction to contrast.
    """
    labels = np.asarray(labels)
    picked = ad.take_per_row(instances, critical_index)
    picked_aug = ad.take_per_row(aug_instances, critical_index)
    alive = ((np.linalg.norm(picked.data, axis=1) > 1e-7)
             & (np.linalg.norm(picked_aug.data, axis=1) > 1e-7))
    emb = ad.l2_normalize(picked, axis=1)
    emb_aug = ad.l2_normalize(picked_aug, axis=1)
    pos_rows = np.nonzero((labels == 1) & alive)[0]
    neg_rows = np.nonzero((labels == 0) & alive)[0]
    return ContrastiveBatchSets(
        anchors=ad.gather_rows(emb, pos_rows),
        positives=ad.gather_rows(emb_aug, pos_rows),
        negatives=ad.gather_rows(emb, neg_rows),
        tau=tau,
    )


def bce_loss(scores: Tensor, labels, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy; scores clamped to [clamp, 1-clamp]."""
    y = np.asarray(labels, dtype=scores.dtype)
    if y.shape != tuple(scores.shape):
        raise ShapeError(f"labels {y.shape} vs scores {scores.shape}")
    p = ad.clip(scores, clamp, 1.0 - clamp)
    yt = Tensor(y)
    one_minus = Tensor(1.0 - y)
    ll = ad.add(ad.mul(yt, ad.log(p)), ad.mul(one_minus, ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.tmean(ll))


def micl_view_loss(bag_scores: Tensor, labels, l_cl: Tensor, lam: float) -> Tensor:
    """View objective: BCE on bag scores + lambda * contrastive term."""
    loss = bce_loss(bag_scores, labels)
    return ad.add(loss, ad.mul(l_cl, float(lam)))
