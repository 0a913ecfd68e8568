"""Zero-shot evaluation: top-k accuracy, multi-split aggregation and the
class-description / CIM ablation runner."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .align import LossSettings
from .datamodel import RunConfig
from .optim import TrainResult, train, zero_shot_scores
from .problem import ZsarProblem, without_definitions, without_descriptions


def true_label_rank(scores, labels) -> np.ndarray:
    """0-based rank of each true label; ties go to the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = scores.shape
    if n and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ValueError(f"label {bad} outside the {C} ranked classes")
    true = scores[np.arange(n), labels][:, None]
    above = (scores > true).sum(axis=1)
    tied_before = ((scores == true) & (np.arange(C)[None, :] < labels[:, None])).sum(axis=1)
    return above + tied_before


def topk_accuracy(scores, labels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = true_label_rank(scores, labels)
    return float(np.mean(ranks < k)) if len(ranks) else 0.0


def aggregate_splits(values: Sequence[float], ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation (population by default) over splits."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one split result")
    mean = float(arr.mean())
    std = float(arr.std(ddof=ddof)) if arr.size > ddof else 0.0
    return mean, std


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.1f} ± {std:.1f}"


def evaluate_problem(params, problem: ZsarProblem, settings: LossSettings,
                     ks: Iterable[int] = (1, 5)) -> dict[str, float]:
    _, scores = zero_shot_scores(params, problem.test.features, problem.unseen, settings)
    return {f"top{k}": topk_accuracy(scores, problem.test.labels, k) for k in ks}


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

BASE_VARIANTS = ("AD-only", "VC-only", "AD+VC")


@dataclass(frozen=True)
class Variant:
    name: str
    alpha: float
    gamma: float
    use_definitions: bool = True
    use_descriptions: bool = True
    k: int | None = None


def parse_variant(name: str, config: RunConfig) -> Variant:
    base, cim = name, False
    if name.endswith("+CIM"):
        base, cim = name[: -len("+CIM")], True
    gamma = (config.gamma or 0.1) if cim else 0.0
    if base == "AD-only":
        return Variant(name, 1.0, gamma, use_descriptions=False)
    if base == "VC-only":
        return Variant(name, 0.0, gamma, use_definitions=False)
    if base == "AD+VC":
        return Variant(name, config.alpha, gamma)
    raise ValueError(
        f"unknown variant {name!r}; expected one of {', '.join(BASE_VARIANTS)}, optionally with +CIM"
    )


def sweep_variants(config: RunConfig, alphas=(), ks=(), base: str = "AD+VC") -> list[Variant]:
    b = parse_variant(base, config)
    out = [Variant(f"{base} alpha={a:g}", float(a), b.gamma) for a in alphas]
    out += [Variant(f"{base} k={k}", b.alpha, b.gamma, k=int(k)) for k in ks]
    return out


@dataclass
class AblationRow:
    variant: str
    split_id: str
    metrics: dict[str, float]
    trace: list[float] = field(default_factory=list)


def run_variant(config: RunConfig, variant: Variant, problem: ZsarProblem) -> tuple[TrainResult, dict]:
    cfg = config.replace(alpha=variant.alpha, gamma=variant.gamma)
    if not variant.use_descriptions:
        problem = without_descriptions(problem)
    if not variant.use_definitions:
        problem = without_definitions(problem)
    settings = LossSettings.from_config(cfg)
    result = train(cfg, problem, settings=settings)
    return result, evaluate_problem(result.params, problem, settings)


def run_ablation(config: RunConfig, variants: Sequence[Variant],
                 make_problems: Callable[[int], Sequence[ZsarProblem]]) -> list[AblationRow]:
    """Train and test every variant on every split. ``make_problems(k)`` builds
    the per-split problems with k descriptions per class."""
    cache: dict[int, Sequence[ZsarProblem]] = {}
    rows = []
    for v in variants:
        k = v.k or config.k
        if k not in cache:
            cache[k] = make_problems(k)
        for problem in sorted(cache[k], key=lambda p: p.split.split_id):
            result, metrics = run_variant(config, v, problem)
            rows.append(AblationRow(v.name, problem.split.split_id, metrics, result.step_losses))
    return rows


def summarize(rows: Sequence[AblationRow], ddof: int = 0) -> list[dict]:
    """Per-variant mean and std of each metric across splits, in first-seen order."""
    order: list[str] = []
    grouped: dict[str, list[AblationRow]] = {}
    for r in rows:
        if r.variant not in grouped:
            order.append(r.variant)
            grouped[r.variant] = []
        grouped[r.variant].append(r)
    out = []
    for name in order:
        group = grouped[name]
        entry = {"variant": name, "splits": len(group)}
        for metric in group[0].metrics:
            mean, std = aggregate_splits([100.0 * g.metrics[metric] for g in group], ddof)
            entry[metric] = {"mean": mean, "std": std, "text": format_mean_std(mean, std)}
        out.append(entry)
    return out


def metrics_table(rows: Sequence[AblationRow], ddof: int = 0, sep: str = "\t") -> str:
    """Delimited table: one line per (variant, split), then one aggregate line per variant."""
    if not rows:
        return ""
    metrics = list(rows[0].metrics)
    head = ["variant", "split"] + [f"{m} (%)" for m in metrics] + [f"{m}_raw" for m in metrics]
    lines = [sep.join(head)]
    for r in rows:
        shown = [f"{100 * r.metrics[m]:.1f}" for m in metrics]
        raw = [repr(r.metrics[m]) for m in metrics]
        lines.append(sep.join([r.variant, r.split_id] + shown + raw))
    for s in summarize(rows, ddof):
        shown = [s[m]["text"] for m in metrics]
        raw = [repr(s[m]["mean"] / 100.0) for m in metrics]
        lines.append(sep.join([s["variant"], "aggregate"] + shown + raw))
    return "\n".join(lines) + "\n"


def metrics_json(rows: Sequence[AblationRow], ddof: int = 0) -> str:
    doc = {
        "rows": [
            {"variant": r.variant, "split": r.split_id, "metrics": r.metrics} for r in rows
        ],
        "aggregate": summarize(rows, ddof),
        "std": "population" if ddof == 0 else "sample",
    }
    return json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
