"""Adam, the warmup + cosine learning-rate schedule, the training loop and
checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import align
from .align import AlignmentParams, LossSettings, NonFiniteError, PARAM_NAMES
from .datamodel import FormatError, RunConfig, atomic_write_bytes
from .problem import ZsarProblem

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: AlignmentParams, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        shapes = params.as_dict()
        return cls(
            {k: np.zeros_like(a) for k, a in shapes.items()},
            {k: np.zeros_like(a) for k, a in shapes.items()},
            0,
            beta1,
            beta2,
            eps,
        )


def adam_step(params: AlignmentParams, grads, state: AdamState, lr: float,
              weight_decay: float = 0.0, decoupled: bool = False):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched.

    Weight decay is added to the gradient as an L2 term unless ``decoupled``,
    in which case it shrinks the parameters directly (AdamW).
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.as_dict().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and decoupled:
            step = step + weight_decay * p
        updated = p - lr * step
        if not np.all(np.isfinite(updated)):
            raise NonFiniteError(f"non-finite update for {name} at Adam step {t}")
        new_p[name], new_m[name], new_v[name] = updated, m, v
    return AlignmentParams.from_dict(new_p), AdamState(new_m, new_v, t, b1, b2, state.eps)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return math.ceil(warmup_fraction * total_steps)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to 0 at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    W = warmup_steps(total_steps, warmup_fraction)
    if step < W:
        return base_lr * (step + 1) / W
    span = max(total_steps - W - 1, 1)
    progress = (step - W) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    val_top1: float | None
    wallclock: float

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_loss": self.mean_loss,
            "lr": self.lr,
            "val_top1": self.val_top1,
            "wallclock": self.wallclock,
        }


@dataclass
class TrainResult:
    params: AlignmentParams
    adam: AdamState
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    rng_state: dict | None = None


def bank_features(params: AlignmentParams, text, settings: LossSettings):
    """(z_l, z_c) for a class table; entries unused by ``settings.alpha`` are None."""
    bank = align.class_bank(params, text, settings)
    return bank.z_l, bank.z_c


def zero_shot_scores(params: AlignmentParams, features, text, settings: LossSettings):
    V = align.encode_visual(features, params)
    z_l, z_c = bank_features(params, text, settings)
    if settings.l2_normalize:
        V, _ = align.l2_normalize_rows(V)
    return align.predict(V, z_l, z_c, settings.alpha)


def val_top1(params, problem: ZsarProblem, settings) -> float | None:
    if len(problem.val) == 0:
        return None
    pred, _ = zero_shot_scores(params, problem.val.features, problem.val_text, settings)
    return float(np.mean(pred == problem.val.labels))


def _frozen_content(params, problem, bank, settings):
    text = problem.seen if bank is None else align.ClassText(
        np.concatenate([problem.seen.class_ids, bank.class_ids]),
        None,
        np.vstack([problem.seen.descriptions, bank.descriptions]),
    )
    z, _ = align.project_text(text.descriptions, params, settings.l2_normalize, "content features")
    return z


def train(config: RunConfig, problem: ZsarProblem, params: AlignmentParams | None = None,
          settings: LossSettings | None = None) -> TrainResult:
    """Mini-batch Adam on the overall loss; returns the best-validation parameters
    (or the last epoch's when the split has no validation items)."""
    settings = settings or LossSettings.from_config(config)
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = AlignmentParams.init(problem.d_in_v, problem.d_in_s, config.d, rng)
    adam = AdamState.zeros_like(params, config.beta1, config.beta2, config.eps)
    n = len(problem.train)
    steps_per_epoch = math.ceil(n / config.batch_size) if n else 0
    total = steps_per_epoch * config.epochs
    bank = problem.cim_bank(config.cim_classes) if settings.uses_cycle else None
    if config.epochs and n == 0:
        raise FormatError("split has no training items")

    result = TrainResult(params, adam)
    best = (-1.0, None, None)  # (val top-1, epoch, params)
    stale = 0
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        frozen = None
        if config.content_refresh == "epoch" and settings.uses_descriptions:
            frozen = _frozen_content(params, problem, bank, settings)
        order = rng.permutation(n)
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            res = align.overall_loss(
                params,
                problem.train.features[idx],
                problem.train.labels[idx],
                problem.seen,
                bank,
                settings,
                frozen_content=frozen,
            )
            if not math.isfinite(res.loss):
                raise NonFiniteError(
                    f"non-finite loss at step {step}; parameter norms "
                    + ", ".join(f"{k}={np.linalg.norm(a):.3g}" for k, a in params.as_dict().items())
                )
            lr = lr_at(step, total, config.lr, config.warmup_fraction)
            params, adam = adam_step(
                params, res.grads, adam, lr, config.weight_decay, config.decoupled_weight_decay
            )
            losses.append(res.loss)
            result.step_losses.append(res.loss)
            step += 1
        top1 = val_top1(params, problem, settings)
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, top1, time.perf_counter() - start)
        result.history.append(rec)
        log.info("epoch %d loss %.6f lr %.3g val_top1 %s", epoch, rec.mean_loss, lr, top1)
        if top1 is not None:
            if top1 > best[0]:
                best = (top1, epoch, params.copy())
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop after epoch %d (best epoch %d)", epoch, best[1])
                    break

    result.adam = adam
    result.rng_state = rng.bit_generator.state
    if best[2] is not None:
        result.params, result.best_epoch = best[2], best[1]
    else:
        result.params = params
        result.best_epoch = result.history[-1].epoch if result.history else None
    return result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"ZCKP"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def checkpoint_bytes(params: AlignmentParams, adam: AdamState, rng_state: dict | None,
                     meta: dict | None = None) -> bytes:
    arrays = [(name, params.as_dict()[name]) for name in PARAM_NAMES]
    arrays += [(f"adam.m.{name}", adam.m[name]) for name in PARAM_NAMES]
    arrays += [(f"adam.v.{name}", adam.v[name]) for name in PARAM_NAMES]
    header = {
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "adam": {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "rng": rng_state,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + body


def save_checkpoint(path, params, adam, rng_state=None, meta=None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, adam, rng_state, meta))


def parse_checkpoint(data: bytes):
    """Returns (params, adam_state, rng_state, meta)."""
    if len(data) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint header")
    magic, version, head_len = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEAD.size
    try:
        header = json.loads(data[off:off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint header") from None
    off += head_len
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(data):
            raise FormatError(f"checkpoint truncated inside array {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        arrays[name] = arr.astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after checkpoint arrays")
    params = AlignmentParams.from_dict(arrays)
    a = header["adam"]
    adam = AdamState(
        {n: arrays[f"adam.m.{n}"] for n in PARAM_NAMES},
        {n: arrays[f"adam.v.{n}"] for n in PARAM_NAMES},
        int(a["t"]),
        float(a["beta1"]),
        float(a["beta2"]),
        float(a["eps"]),
    )
    return params, adam, header.get("rng"), header.get("meta", {})


def load_checkpoint(path):
    from pathlib import Path

    try:
        return parse_checkpoint(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
