"""Central-finite-difference validation of analytical gradients.

The checker is the independent oracle for every differentiable path: it
re-evaluates the function at ``x +- h`` per element and compares against
the tape gradient. Functions must be deterministic; kink points (ReLU at
0, tied maxima) can be excluded via a mask instead of failing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AutodiffError, Tape, Tensor, backward


@dataclass
class GradReport:
    """Per-element comparison of analytical vs numerical gradients."""

    max_rel_err: float
    passed: bool
    tolerance: float
    checked: int
    excluded: int
    worst_index: tuple = ()
    rel_errs: np.ndarray = field(default=None, repr=False)


def _eval_scalar(f, x: Tensor) -> float:
    out = f(x)
    if out.data.size != 1:
        raise AutodiffError(f"finite_difference_check needs scalar f, got {out.shape}")
    return float(out.data.reshape(()))


def finite_difference_check(f, x: Tensor, step: float = 1e-5, tolerance: float = 1e-4,
                            exclude_mask=None, max_elements: int | None = None,
                            rng: np.random.Generator | None = None) -> GradReport:
    """Compare d f(x) / dx against central differences, element by element.

    ``exclude_mask`` marks kink points that are reported, not failed.
    ``max_elements`` caps the number of probed elements (seeded subsample)
    to keep composite-path checks fast; the analytical side is always the
    full tape gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    base = _eval_scalar(f, x)
    if _eval_scalar(f, x) != base:
        raise AutodiffError("f is non-deterministic: two identical calls disagree")

    probe = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    backward(tape, out)
    analytic = probe.grad.copy()
    return _compare_against_central_differences(
        lambda arr: _eval_scalar(f, Tensor(arr)), probe.data, analytic, step,
        tolerance, exclude_mask, max_elements, rng)


def finite_difference_check_param(loss_fn, param: Tensor, step: float = 1e-6,
                                  tolerance: float = 1e-4, exclude_mask=None,
                                  max_elements: int | None = None,
                                  rng: np.random.Generator | None = None) -> GradReport:
    """FD check w.r.t. an in-place parameter tensor.

    ``loss_fn`` takes no arguments and must read ``param`` (a leaf with
    requires_grad) from wherever it lives; the analytic side is the tape
    gradient accumulated on ``param`` itself.
    """
    if not param.requires_grad:
        raise AutodiffError("param must require gradients")
    base = float(loss_fn().data.reshape(()))
    if float(loss_fn().data.reshape(())) != base:
        raise AutodiffError("loss_fn is non-deterministic: two identical calls disagree")

    param.zero_grad()
    with Tape() as tape:
        out = loss_fn()
    backward(tape, out)
    analytic = param.grad.astype(np.float64).copy()
    original = param.data.copy()

    def eval_at(arr):
        param.data[...] = arr
        try:
            return float(loss_fn().data.reshape(()))
        finally:
            param.data[...] = original

    return _compare_against_central_differences(
        eval_at, original.astype(np.float64), analytic, step, tolerance,
        exclude_mask, max_elements, rng)


def _compare_against_central_differences(eval_at, x_data, analytic, step,
                                         tolerance, exclude_mask, max_elements, rng):
    flat_x = x_data.reshape(-1)
    n = flat_x.size
    if exclude_mask is not None:
        excluded_flat = np.asarray(exclude_mask, dtype=bool).reshape(-1)
    else:
        excluded_flat = np.zeros(n, dtype=bool)

    indices = np.nonzero(~excluded_flat)[0]
    if max_elements is not None and indices.size > max_elements:
        rng = rng or np.random.default_rng(0)
        indices = np.sort(rng.choice(indices, size=max_elements, replace=False))

    # near-zero entries are compared at a floor tied to the gradient scale,
    # since central differences bottom out at |f|*eps/step roundoff noise
    floor = 1e-6 * max(1.0, float(np.abs(analytic).max()))
    rel_errs = np.zeros(n)
    work = flat_x.copy()
    shape = x_data.shape
    for i in indices:
        orig = work[i]
        work[i] = orig + step
        fp = eval_at(work.reshape(shape))
        work[i] = orig - step
        fm = eval_at(work.reshape(shape))
        work[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        scale = max(abs(a), abs(numeric), floor)
        rel_errs[i] = abs(a - numeric) / scale

    checked = int(indices.size)
    max_err = float(rel_errs[indices].max()) if checked else 0.0
    worst = ()
    if checked:
        worst_flat = int(indices[np.argmax(rel_errs[indices])])
        worst = np.unravel_index(worst_flat, shape)
    return GradReport(
        max_rel_err=max_err,
        passed=max_err <= tolerance,
        tolerance=tolerance,
        checked=checked,
        excluded=int(excluded_flat.sum()),
        worst_index=worst,
        rel_errs=rel_errs.reshape(shape),
    )
