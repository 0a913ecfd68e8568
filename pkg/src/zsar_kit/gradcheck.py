"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import PARAM_NAMES, AlignmentParams, ClassText, LossSettings, overall_loss

# Relative errors use max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# entries whose true gradient is ~0 are judged on absolute error instead.
# Central-difference roundoff is ~eps*|loss|/h ~ 1e-10 for these instances.
REL_FLOOR = 1e-3


@dataclass
class GradInstance:
    params: AlignmentParams
    video: np.ndarray
    labels: np.ndarray
    seen: ClassText
    unseen: ClassText
    settings: LossSettings

    def loss(self, params=None) -> float:
        p = self.params if params is None else params
        return overall_loss(
            p, self.video, self.labels, self.seen, self.unseen, self.settings, with_grad=False
        ).loss


def random_instance(seed: int, n: int = 8, n_seen: int = 5, n_unseen: int = 4, d: int = 16,
                    d_in: int = 16, settings: LossSettings | None = None) -> GradInstance:
    rng = np.random.default_rng(seed)
    params = AlignmentParams.init(d_in, d_in, d, rng)
    # Non-zero biases so their gradients are exercised too.
    params.b_v = rng.normal(scale=0.1, size=d)
    params.b_s = rng.normal(scale=0.1, size=d)
    # Raw features with unit expected row norm, like normalized backbone outputs.
    scale = 1.0 / np.sqrt(d_in)
    video = rng.normal(scale=scale, size=(n, d_in))
    labels = rng.integers(0, n_seen, size=n)
    seen = ClassText(
        np.arange(n_seen),
        rng.normal(scale=scale, size=(n_seen, d_in)),
        rng.normal(scale=scale, size=(n_seen, d_in)),
    )
    unseen = ClassText(
        np.arange(n_seen, n_seen + n_unseen),
        rng.normal(scale=scale, size=(n_unseen, d_in)),
        rng.normal(scale=scale, size=(n_unseen, d_in)),
    )
    return GradInstance(params, video, labels, seen, unseen, settings or LossSettings())


def finite_difference(f, params: AlignmentParams, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of scalar ``f(params)`` w.r.t. every parameter entry."""
    probe = params.copy()
    out = {}
    for name in PARAM_NAMES:
        arr = getattr(probe, name)
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = f(probe)
            arr[idx] = orig - h
            f_minus = f(probe)
            arr[idx] = orig
            grad[idx] = (f_plus - f_minus) / (2 * h)
        out[name] = grad
    return out


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic)
    b = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_instance(inst: GradInstance, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter block."""
    analytic = overall_loss(
        inst.params, inst.video, inst.labels, inst.seen, inst.unseen, inst.settings
    ).grads
    numeric = finite_difference(inst.loss, inst.params, h)
    return {name: relative_error(analytic[name], numeric[name]) for name in PARAM_NAMES}


def run_suite(seed: int = 0, instances: int = 20, h: float = 1e-5, settings=None):
    """Per-block worst relative error over ``instances`` seeded random problems."""
    worst = {name: 0.0 for name in PARAM_NAMES}
    for i in range(instances):
        errs = check_instance(random_instance(seed * 1000 + i, settings=settings), h)
        for name, e in errs.items():
            worst[name] = max(worst[name], e)
    return worst
