"""Domain-generalized two-view image classification toolkit.

Everything numerical runs on a small reverse-mode autodiff engine
(:mod:`dualview.autodiff`); the model stack is a staged conv backbone with
cross-view feature enhancement, per-view multi-instance heads with a
contrastive objective, and a transformer fusion encoder. Training,
evaluation, synthetic benchmark generation, and attention export are
reachable through :mod:`dualview.cli`.
"""

__version__ = "0.1.0"
