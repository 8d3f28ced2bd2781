"""Gradient-integrity suite: every differentiable path vs central differences.

All checks run in 64-bit on small configurations; composite paths use
step 1e-5 (balancing truncation against |f|*eps/step roundoff) and probe
a seeded subsample of elements per tensor so the whole suite stays well
under the runtime budget.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneConfig, BackboneParams, backbone_forward
from .enhance import CveParams, enhance_pair
from .fusion import GlobalEncoderParams, SharedDecoderParams, global_encode, shared_decode
from .gradcheck import finite_difference_check, finite_difference_check_param
from .milhead import (DsmilParams, build_contrastive_sets, contrastive_loss,
                      dsmil_score_batch, micl_view_loss)
from .model import Model, ModelConfig

TOLERANCE = 1e-4


def _primitive_checks(rng):
    w_conv = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    mult_in = Tensor(rng.normal(size=(2, 3, 4, 4)))
    mult_sm = Tensor(rng.normal(size=(2, 6)))
    checks = [
        ("conv2d", rng.normal(size=(2, 2, 6, 6)),
         lambda z: ad.tsum(ad.conv2d(z, w_conv, stride=2, padding=1))),
        ("conv2d_s1", rng.normal(size=(2, 2, 6, 6)),
         lambda z: ad.tsum(ad.conv2d(z, w_conv, stride=1, padding=1))),
        ("instance_norm", rng.normal(size=(2, 3, 4, 4)),
         lambda z: ad.tsum(ad.mul(ad.instance_norm(z), mult_in))),
        ("softmax", rng.normal(size=(2, 6)),
         lambda z: ad.tsum(ad.mul(ad.softmax(z, axis=1), mult_sm))),
        ("sigmoid", rng.normal(size=(3, 5)),
         lambda z: ad.tsum(ad.sigmoid(z))),
        ("gap+pool+resize", rng.normal(size=(1, 2, 4, 4)),
         lambda z: ad.tsum(ad.upsample_bilinear(ad.avg_pool2d(z, 2), 4, 4))),
    ]
    return checks


def run_gradient_suite(seed: int = 0, max_elements: int = 80, log=None):
    """Returns [(path_name, max_rel_err, passed)] for every checked path."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, rep):
        results.append((name, rep.max_rel_err, rep.passed))
        if log:
            log(f"{name:24s} max_rel_err={rep.max_rel_err:.3e} "
                f"{'PASS' if rep.passed else 'FAIL'}")

    worst = None
    for name, x0, f in _primitive_checks(rng):
        rep = finite_difference_check(f, Tensor(x0), step=1e-6, tolerance=TOLERANCE)
        if worst is None or rep.max_rel_err > worst[1].max_rel_err:
            worst = (name, rep)
        if not rep.passed:
            record(f"primitive:{name}", rep)
    record(f"primitives (worst: {worst[0]})", worst[1])

    # backbone, scalar-sum head
    bb_cfg = BackboneConfig(stage_channels=(4, 6, 8, 10), input_size=32)
    bb = BackboneParams.create(bb_cfg, rng, np.float64)

    def f_backbone(z):
        return ad.tsum(backbone_forward(z, bb)[3])

    record("backbone", finite_difference_check(
        f_backbone, Tensor(rng.normal(size=(1, 1, 32, 32))), step=1e-5,
        tolerance=TOLERANCE, max_elements=max_elements, rng=rng))

    # enhancement pair, both views summed
    cve = CveParams.create(rng, 8, np.float64)
    cve_mlo = Tensor(rng.normal(size=(1, 8, 6, 6)))

    def f_cve(z):
        a, b, _ = enhance_pair(z, cve_mlo, cve)
        return ad.add(ad.tsum(a), ad.tsum(b))

    record("enhancement", finite_difference_check(
        f_cve, Tensor(rng.normal(size=(1, 8, 6, 6))), step=1e-5,
        tolerance=TOLERANCE))

    # instance head + contrastive objective
    mil = DsmilParams.create(rng, 5, np.float64)
    aug_const = Tensor(rng.normal(size=(4, 6, 5)))
    labels = np.array([1, 0, 1, 0])

    def f_mil(z):
        out = dsmil_score_batch(z, mil)
        sets = build_contrastive_sets(z, aug_const, out.critical_index, labels, 0.5)
        return micl_view_loss(out.s, labels, contrastive_loss(sets), 0.5)

    record("instance+contrastive", finite_difference_check(
        f_mil, Tensor(rng.normal(size=(4, 6, 5))), step=1e-5, tolerance=TOLERANCE))

    # fusion encoder + shared decoder (non-trivial output projections)
    enc = GlobalEncoderParams.create(rng, 16, 4, np.float64, heads=4,
                                     pooled_resolution=4)
    enc.blocks[0].wo.w.data[...] = rng.normal(size=(16, 16)) * 0.3
    enc.blocks[0].ff2.w.data[...] = rng.normal(size=(16, 32)) * 0.3
    dec = SharedDecoderParams.create(rng, 16, np.float64)
    fus_mlo = Tensor(rng.normal(size=(1, 16, 4, 4)))

    def f_fusion(z):
        _, _, g = global_encode(z, fus_mlo, enc)
        return ad.tsum(shared_decode(g, dec))

    record("fusion+decoder", finite_difference_check(
        f_fusion, Tensor(rng.normal(size=(1, 16, 4, 4))), step=1e-5,
        tolerance=TOLERANCE))

    # full model: loss w.r.t. inputs and a spread of parameters
    model = Model(ModelConfig(
        backbone=BackboneConfig(stage_channels=(4, 6, 8, 12), input_size=32),
        tile_n=2, heads=2), seed=seed + 1, dtype=np.float64)
    cc_in = Tensor(rng.normal(size=(2, 1, 32, 32)))
    mlo_in = Tensor(rng.normal(size=(2, 1, 32, 32)))
    labels2 = np.array([1, 0])

    def f_model(z):
        out = model.loss(z, mlo_in, labels2, training=True,
                         rng=np.random.default_rng(99))
        return out.total

    record("full-model (input)", finite_difference_check(
        f_model, cc_in, step=1e-5, tolerance=TOLERANCE,
        max_elements=max_elements, rng=rng))

    def loss_fn():
        return model.loss(cc_in, mlo_in, labels2, training=True,
                          rng=np.random.default_rng(99)).total

    probe_params = ["cc.stage0.block0.conv.w", "mlo.stage3.block0.conv.w",
                    "cve0.theta3.w", "cve2.theta1.w", "cc.mil.f_m.w",
                    "mlo.mil.w_v.w", "fusion.block0.wo.w", "fusion.block0.ff2.w",
                    "shared.fc1.w", "shared.fc2.w"]
    worst_param = None
    for pname in probe_params:
        rep = finite_difference_check_param(
            loss_fn, model.params[pname], step=1e-5, tolerance=TOLERANCE,
            max_elements=24, rng=rng)
        if worst_param is None or rep.max_rel_err > worst_param[1].max_rel_err:
            worst_param = (pname, rep)
        if not rep.passed:
            record(f"full-model ({pname})", rep)
    record(f"full-model (params, worst: {worst_param[0]})", worst_param[1])

    return results
