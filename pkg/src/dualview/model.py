"""Full two-view classifier: backbone streams, enhancement, heads, fusion.

Ablation switches control which mechanisms run: cross-view enhancement at
the first three levels, stage-level style mixing during training, the
transformer fusion encoder, and the contrastive branch of the view heads.
The dual-stream instance heads and the shared decoder are always present,
so every configuration emits per-view and breast-level scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneConfig, BackboneParams, make_two_stream, stage_forward
from .enhance import CveParams, enhance_pair
from .fusion import (GlobalEncoderParams, SharedDecoderParams, breast_prediction,
                     global_encode, pooled_global_vector, shared_decode, total_loss)
from .layers import collect_named
from .milhead import (DsmilParams, MixstyleConfig, augment_ood, bce_loss,
                      build_contrastive_sets, contrastive_loss, dsmil_score_batch,
                      micl_view_loss, mixstyle, tile_instances)


@dataclass(frozen=True)
class AblationFlags:
    use_cve: bool = True
    use_mixstyle_stages: bool = True
    use_global_encoder: bool = True
    use_micl: bool = True

    @classmethod
    def from_arm(cls, arm: str) -> "AblationFlags":
        """Parse an arm spec like 'baseline', 'cve', 'cve+ms', 'full'."""
        arm = arm.strip().lower()
        if arm == "baseline":
            return cls(False, False, False, False)
        if arm == "full":
            return cls(True, True, True, True)
        flags = {"cve": False, "ms": False, "ge": False, "micl": False}
        for part in arm.split("+"):
            part = part.strip()
            if part not in flags:
                raise ValueError(f"unknown ablation arm component {part!r}")
            flags[part] = True
        return cls(use_cve=flags["cve"], use_mixstyle_stages=flags["ms"],
                   use_global_encoder=flags["ge"], use_micl=flags["micl"])

    def arm_name(self) -> str:
        if not any((self.use_cve, self.use_mixstyle_stages,
                    self.use_global_encoder, self.use_micl)):
            return "baseline"
        if all((self.use_cve, self.use_mixstyle_stages,
                self.use_global_encoder, self.use_micl)):
            return "full"
        parts = []
        if self.use_cve:
            parts.append("cve")
        if self.use_mixstyle_stages:
            parts.append("ms")
        if self.use_global_encoder:
            parts.append("ge")
        if self.use_micl:
            parts.append("micl")
        return "+".join(parts)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    reduction_ratio: int = 16
    tile_n: int = 4
    heads: int = 4
    encoder_layers: int = 1
    pooled_resolution: int | None = None       # None -> min(stage-4 size, 16)
    tau: float = 0.5
    lam: float = 0.5
    noise_sigma: float = 0.01
    stage_mixstyle_prob: float = 0.5
    ensemble_weights: tuple = (1.0, 1.0, 1.0)

    def stage4_size(self) -> int:
        return self.backbone.stage_sizes[3]

    def validate(self):
        if self.stage4_size() % self.tile_n:
            raise ValueError(
                f"stage-4 maps are {self.stage4_size()}x{self.stage4_size()}; "
                f"cannot tile into {self.tile_n}x{self.tile_n}")


@dataclass
class ForwardOutput:
    s_cc: Tensor
    s_mlo: Tensor
    s_shared: Tensor
    prediction: Tensor
    f4_cc: Tensor
    f4_mlo: Tensor
    mil_cc: object
    mil_mlo: object
    instances_cc: Tensor
    instances_mlo: Tensor
    cve_intermediates: list


@dataclass
class LossOutput:
    total: Tensor
    l_shared: Tensor
    l_cc: Tensor
    l_mlo: Tensor
    l_cl_cc: Tensor
    l_cl_mlo: Tensor
    forward: ForwardOutput


class Model:
    """Parameter owner + forward/loss functions for one configuration."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD0A1)))
        bb = config.backbone
        self.streams = make_two_stream(
            BackboneParams.create(bb, rng, self.dtype),
            BackboneParams.create(bb, rng, self.dtype))
        self.cve = []
        if config.flags.use_cve:
            for level in range(3):
                self.cve.append(CveParams.create(rng, bb.stage_channels[level],
                                                 self.dtype, config.reduction_ratio))
        c4 = bb.stage_channels[3]
        self.mil_cc = DsmilParams.create(rng, c4, self.dtype)
        self.mil_mlo = DsmilParams.create(rng, c4, self.dtype)
        self.encoder = None
        if config.flags.use_global_encoder:
            self.encoder = GlobalEncoderParams.create(
                rng, c4, config.stage4_size(), self.dtype, heads=config.heads,
                layers=config.encoder_layers,
                pooled_resolution=config.pooled_resolution)
        self.decoder = SharedDecoderParams.create(rng, c4, self.dtype)
        self.mix_config = MixstyleConfig(noise_sigma=config.noise_sigma)
        self.params = self._collect()

    def _collect(self):
        groups = [self.streams.named()]
        for li, cve in enumerate(self.cve):
            groups.append(cve.named(f"cve{li}"))
        groups.append(self.mil_cc.named("cc.mil"))
        groups.append(self.mil_mlo.named("mlo.mil"))
        if self.encoder is not None:
            groups.append(self.encoder.named("fusion"))
        groups.append(self.decoder.named("shared"))
        return collect_named(*groups)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    # images arrive in [0, 1]; a constant shift symmetrizes first-layer
    # activations without touching cross-domain intensity differences
    INPUT_CENTER = 0.5

    def _wrap(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def forward(self, cc, mlo, training=False, rng: np.random.Generator | None = None,
                keep_intermediates=False) -> ForwardOutput:
        cfg = self.config
        x_cc = cc if isinstance(cc, Tensor) else self._wrap(cc)
        x_mlo = mlo if isinstance(mlo, Tensor) else self._wrap(mlo)
        expected = cfg.backbone.input_size
        if x_cc.shape[-1] != expected or x_cc.shape[-2] != expected:
            raise ad.ShapeError(
                f"model built for {expected}x{expected} inputs, got {tuple(x_cc.shape[-2:])}")
        x_cc = ad.sub(x_cc, float(self.INPUT_CENTER))
        x_mlo = ad.sub(x_mlo, float(self.INPUT_CENTER))
        if training and rng is None:
            raise ValueError("training forward needs an rng for augmentation draws")
        inters = []
        for stage in range(4):
            x_cc = stage_forward(x_cc, self.streams.cc, stage)
            x_mlo = stage_forward(x_mlo, self.streams.mlo, stage)
            if stage < 3:
                if cfg.flags.use_cve:
                    x_cc, x_mlo, inter = enhance_pair(
                        x_cc, x_mlo, self.cve[stage],
                        keep_intermediates=keep_intermediates)
                    inters.append(inter)
                if cfg.flags.use_mixstyle_stages and training and x_cc.shape[0] >= 2:
                    for which in ("cc", "mlo"):
                        if rng.uniform() < cfg.stage_mixstyle_prob:
                            perm = rng.permutation(x_cc.shape[0])
                            m = float(rng.uniform(0.0, 1.0))
                            if which == "cc":
                                x_cc = mixstyle(x_cc, perm, m, self.mix_config)
                            else:
                                x_mlo = mixstyle(x_mlo, perm, m, self.mix_config)

        inst_cc = tile_instances(x_cc, cfg.tile_n)
        inst_mlo = tile_instances(x_mlo, cfg.tile_n)
        mil_cc = dsmil_score_batch(inst_cc, self.mil_cc)
        mil_mlo = dsmil_score_batch(inst_mlo, self.mil_mlo)

        if self.encoder is not None:
            _, _, g = global_encode(x_cc, x_mlo, self.encoder)
        else:
            g = pooled_global_vector(x_cc, x_mlo)
        s_shared = shared_decode(g, self.decoder)
        prediction = breast_prediction(mil_cc.s, mil_mlo.s, s_shared,
                                       cfg.ensemble_weights)
        return ForwardOutput(
            s_cc=mil_cc.s, s_mlo=mil_mlo.s, s_shared=s_shared,
            prediction=prediction, f4_cc=x_cc, f4_mlo=x_mlo,
            mil_cc=mil_cc, mil_mlo=mil_mlo,
            instances_cc=inst_cc, instances_mlo=inst_mlo,
            cve_intermediates=inters)

    def _view_contrastive(self, f4: Tensor, instances: Tensor, mil, labels,
                          rng: np.random.Generator) -> Tensor:
        aug = augment_ood(f4, self.mix_config, rng, training=True)
        aug_inst = tile_instances(aug, self.config.tile_n)
        sets = build_contrastive_sets(instances, aug_inst, mil.critical_index,
                                      labels, self.config.tau)
        return contrastive_loss(sets)

    def loss(self, cc, mlo, labels, training=True,
             rng: np.random.Generator | None = None) -> LossOutput:
        cfg = self.config
        out = self.forward(cc, mlo, training=training, rng=rng)
        labels = np.asarray(labels)
        l_sh = bce_loss(out.s_shared, labels)
        zero = Tensor(np.zeros((), dtype=self.dtype))
        l_cl_cc = l_cl_mlo = zero
        if cfg.flags.use_micl and training and out.f4_cc.shape[0] >= 2:
            l_cl_cc = self._view_contrastive(out.f4_cc, out.instances_cc,
                                             out.mil_cc, labels, rng)
            l_cl_mlo = self._view_contrastive(out.f4_mlo, out.instances_mlo,
                                              out.mil_mlo, labels, rng)
        lam = cfg.lam if cfg.flags.use_micl else 0.0
        l_cc = micl_view_loss(out.s_cc, labels, l_cl_cc, lam)
        l_mlo = micl_view_loss(out.s_mlo, labels, l_cl_mlo, lam)
        total = total_loss(l_sh, l_cc, l_mlo)
        return LossOutput(total=total, l_shared=l_sh, l_cc=l_cc, l_mlo=l_mlo,
                          l_cl_cc=l_cl_cc, l_cl_mlo=l_cl_mlo, forward=out)

    def predict(self, cc, mlo) -> np.ndarray:
        """Breast-level scores for an eval batch (no tape, no augmentation)."""
        with ad.no_tape():
            out = self.forward(cc, mlo, training=False)
        return out.prediction.data.copy()

    def stage3_attention(self, cc, mlo):
        """Per-view stage-3 attention maps upsampled to image resolution."""
        if not self.config.flags.use_cve:
            raise ValueError("attention export needs a model built with enhancement on")
        size = self.config.backbone.input_size
        with ad.no_tape():
            out = self.forward(cc, mlo, training=False, keep_intermediates=True)
            inter_cc, inter_mlo = out.cve_intermediates[2]
            up_cc = ad.upsample_bilinear(inter_cc.w_hat, size, size)
            up_mlo = ad.upsample_bilinear(inter_mlo.w_hat, size, size)
        return (up_cc.data.copy(), up_mlo.data.copy(),
                inter_cc.v.data.copy(), inter_mlo.v.data.copy())
