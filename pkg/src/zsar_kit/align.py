"""Visual/semantic projections, contrastive alignment losses, cycle
reconstruction through the unseen-class bank, and their analytic gradients.

Everything is float64 numpy. Shapes:
    n   videos in a batch       d_in_v  raw video feature size
    N   seen classes            d_in_s  raw text feature size
    M   unseen (bank) classes   d       joint embedding size
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward or backward quantity stopped being finite."""


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0]
        raise NonFiniteError(f"non-finite value in {name} at index {tuple(int(i) for i in bad)}")


PARAM_NAMES = ("W_v", "b_v", "W_s", "b_s")


@dataclass
class AlignmentParams:
    W_v: np.ndarray
    b_v: np.ndarray
    W_s: np.ndarray
    b_s: np.ndarray

    @classmethod
    def init(cls, d_in_v: int, d_in_s: int, d: int, rng: np.random.Generator) -> "AlignmentParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        lim_v = 1.0 / np.sqrt(d_in_v)
        lim_s = 1.0 / np.sqrt(d_in_s)
        return cls(
            rng.uniform(-lim_v, lim_v, size=(d_in_v, d)),
            np.zeros(d),
            rng.uniform(-lim_s, lim_s, size=(d_in_s, d)),
            np.zeros(d),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, arrays) -> "AlignmentParams":
        return cls(*(np.array(arrays[name], dtype=np.float64) for name in PARAM_NAMES))

    def copy(self) -> "AlignmentParams":
        return AlignmentParams(*(a.copy() for a in self.as_dict().values()))

    @property
    def d(self) -> int:
        return self.W_v.shape[1]

    def check_finite(self) -> None:
        for name, arr in self.as_dict().items():
            _check_finite(name, arr)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def _affine(raw, W, b, what: str):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != W.shape[0]:
        raise ValueError(f"{what}: input has shape {raw.shape}, expected (*, {W.shape[0]})")
    return raw @ W + b


def encode_visual(raw, params: AlignmentParams) -> np.ndarray:
    return _affine(raw, params.W_v, params.b_v, "encode_visual")


def encode_semantic(raw, params: AlignmentParams) -> np.ndarray:
    """Shared projection for both definition and description features."""
    return _affine(raw, params.W_s, params.b_s, "encode_semantic")


def build_content_features(per_class) -> np.ndarray:
    """Row j is the mean of class j's projected description features."""
    rows = []
    for j, feats in enumerate(per_class):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError(
                f"class index {j} has no selected descriptions; "
                "use definition-only mode (alpha=1) for classes without descriptions"
            )
        rows.append(feats.mean(axis=0))
    return np.stack(rows)


def fuse_class_features(z_l, z_c, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return np.array(z_l, dtype=np.float64)
    if alpha == 0.0:
        return np.array(z_c, dtype=np.float64)
    z_l = np.asarray(z_l, dtype=np.float64)
    z_c = np.asarray(z_c, dtype=np.float64)
    if z_l.shape != z_c.shape:
        raise ValueError(f"shape mismatch: z_l {z_l.shape} vs z_c {z_c.shape}")
    return alpha * z_l + (1.0 - alpha) * z_c


def l2_normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NonFiniteError("cannot L2-normalize a zero row")
    return x / norms, norms


def l2_normalize_backward(y, norms, dy):
    return (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# Softmax and losses
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_backward(probs, dprobs) -> np.ndarray:
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def contrastive_loss(video_feats, class_feats, labels, tau: float, reduction: str = "mean"):
    """Cross-entropy of softmax(v_i . z_j / tau) over all classes against the labels.

    Returns ``(loss, d_video, d_class)``.
    """
    V = np.asarray(video_feats, dtype=np.float64)
    Z = np.asarray(class_feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = V.shape[0], Z.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    if not tau > 0:
        raise ValueError("tau must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        logits = (V @ Z.T) / tau
    _check_finite("contrastive logits", logits)
    rows = np.arange(n)
    loss = -log_softmax(logits)[rows, labels].sum()
    g = softmax(logits)
    g[rows, labels] -= 1.0
    if reduction == "mean":
        scale = 1.0 / n if n else 0.0
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    g *= scale / tau
    return float(loss * scale) + 0.0, g @ Z, g.T @ V  # + 0.0 turns -0.0 into 0.0


# ---------------------------------------------------------------------------
# Cycle reconstruction
# ---------------------------------------------------------------------------


@dataclass
class CycleFeatures:
    x_f: np.ndarray  # N x d, forward features from the unseen bank
    x_b: np.ndarray  # N x d, cycle features back in the seen bank
    attn_fwd: np.ndarray  # N x M
    attn_bwd: np.ndarray  # N x N


def cycle_reconstruct(z_seen, z_unseen, tau: float) -> CycleFeatures:
    z_seen = np.asarray(z_seen, dtype=np.float64)
    z_unseen = np.asarray(z_unseen, dtype=np.float64)
    if z_seen.shape[0] < 1 or z_unseen.shape[0] < 1:
        raise ValueError("cycle reconstruction needs at least one seen and one unseen class")
    if not tau > 0:
        raise ValueError("tau must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        fwd_logits = (z_seen @ z_unseen.T) / tau
    _check_finite("forward attention logits", fwd_logits)
    attn_fwd = softmax(fwd_logits)
    x_f = attn_fwd @ z_unseen
    with np.errstate(over="ignore", invalid="ignore"):
        bwd_logits = (x_f @ z_seen.T) / tau
    _check_finite("backward attention logits", bwd_logits)
    attn_bwd = softmax(bwd_logits)
    return CycleFeatures(x_f, attn_bwd @ z_seen, attn_fwd, attn_bwd)


def cycle_backward(cyc: CycleFeatures, z_seen, z_unseen, d_xb, tau: float):
    """Backpropagate d(loss)/d(x_b) to (d z_seen, d z_unseen)."""
    d_seen = cyc.attn_bwd.T @ d_xb
    d_bwd_logits = softmax_backward(cyc.attn_bwd, d_xb @ z_seen.T) / tau
    d_xf = d_bwd_logits @ z_seen
    d_seen += d_bwd_logits.T @ cyc.x_f
    d_unseen = cyc.attn_fwd.T @ d_xf
    d_fwd_logits = softmax_backward(cyc.attn_fwd, d_xf @ z_unseen.T) / tau
    d_seen += d_fwd_logits @ z_unseen
    d_unseen += d_fwd_logits.T @ z_seen
    return d_seen, d_unseen


# ---------------------------------------------------------------------------
# Overall objective
# ---------------------------------------------------------------------------


@dataclass
class ClassText:
    """Raw (pre-projection) text features for a set of classes.

    ``descriptions`` holds the mean raw feature of each class's selected
    descriptions. Because the semantic encoder is affine, projecting that mean
    equals averaging the projected descriptions.
    """

    class_ids: np.ndarray
    definitions: np.ndarray | None = None
    descriptions: np.ndarray | None = None

    def __len__(self):
        return len(self.class_ids)


@dataclass(frozen=True)
class LossSettings:
    tau: float = 0.1
    alpha: float = 0.5
    gamma: float = 0.1
    reduction: str = "mean"
    l2_normalize: bool = False

    @classmethod
    def from_config(cls, cfg, **overrides) -> "LossSettings":
        base = dict(
            tau=cfg.tau,
            alpha=cfg.alpha,
            gamma=cfg.gamma,
            reduction=cfg.reduction,
            l2_normalize=cfg.l2_normalize,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def uses_definitions(self) -> bool:
        return self.alpha > 0.0

    @property
    def uses_descriptions(self) -> bool:
        return self.alpha < 1.0

    @property
    def uses_cycle(self) -> bool:
        return self.gamma > 0.0


@dataclass
class ClassBank:
    class_ids: np.ndarray
    z_l: np.ndarray | None
    z_c: np.ndarray | None
    z: np.ndarray


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    parts: dict[str, float] = field(default_factory=dict)
    bank: ClassBank | None = None
    cycle: CycleFeatures | None = None


def _stack(a, b):
    if b is None or len(b) == 0:
        return a
    return np.vstack([a, b])


def project_text(raw, params: AlignmentParams, normalize: bool, what: str):
    z = encode_semantic(raw, params)
    _check_finite(what, z)
    if normalize:
        zn, norms = l2_normalize_rows(z)
        return zn, (z, norms)
    return z, None


def class_bank(params: AlignmentParams, text: ClassText, settings: LossSettings,
               frozen_content=None) -> ClassBank:
    """Definition, content and fused features for ``text`` under ``params``."""
    z_l = z_c = None
    if settings.uses_definitions:
        z_l, _ = project_text(text.definitions, params, settings.l2_normalize, "definition features")
    if settings.uses_descriptions:
        if frozen_content is not None:
            z_c = frozen_content
        else:
            z_c, _ = project_text(text.descriptions, params, settings.l2_normalize, "content features")
    return ClassBank(np.asarray(text.class_ids), z_l, z_c, fuse_class_features(z_l, z_c, settings.alpha))


def overall_loss(params: AlignmentParams, video_raw, labels, seen: ClassText,
                 unseen: ClassText | None, settings: LossSettings, frozen_content=None,
                 with_grad: bool = True) -> LossResult:
    """Definition + content contrastive losses plus gamma x the cycle-consistency loss.

    ``labels`` index rows of ``seen``. ``unseen`` is only needed when gamma > 0.
    ``frozen_content`` (stacked seen+unseen content features) is treated as a
    constant: no gradient flows through it.
    The definition term is dropped when alpha == 0 and the content term when
    alpha == 1, so those limits never touch the unused text modality.
    """
    s = settings
    N = len(seen)
    use_cycle = s.uses_cycle
    if use_cycle and (unseen is None or len(unseen) == 0):
        raise ValueError("gamma > 0 needs a non-empty unseen class bank")
    bank_text = unseen if use_cycle else None

    X = np.asarray(video_raw, dtype=np.float64)
    V = encode_visual(X, params)
    _check_finite("video features", V)
    v_cache = None
    if s.l2_normalize:
        V, v_norms = l2_normalize_rows(V)
        v_cache = v_norms

    D_l = D_c = None
    z_l = z_c = None
    zl_cache = zc_cache = None
    if s.uses_definitions:
        D_l = _stack(seen.definitions, bank_text.definitions if bank_text else None)
        z_l, zl_cache = project_text(D_l, params, s.l2_normalize, "definition features")
    if s.uses_descriptions:
        if frozen_content is not None:
            z_c = np.asarray(frozen_content, dtype=np.float64)
        else:
            D_c = _stack(seen.descriptions, bank_text.descriptions if bank_text else None)
            z_c, zc_cache = project_text(D_c, params, s.l2_normalize, "content features")
    z = fuse_class_features(z_l, z_c, s.alpha)

    dV = np.zeros_like(V)
    dz_l = np.zeros_like(z_l) if z_l is not None else None
    dz_c = np.zeros_like(z_c) if z_c is not None else None
    parts = {}
    total = 0.0

    if s.uses_definitions:
        l_def, gV, gZ = contrastive_loss(V, z_l[:N], labels, s.tau, s.reduction)
        dV += gV
        dz_l[:N] += gZ
        parts["definition"] = l_def
        total += l_def
    if s.uses_descriptions:
        l_con, gV, gZ = contrastive_loss(V, z_c[:N], labels, s.tau, s.reduction)
        dV += gV
        dz_c[:N] += gZ
        parts["content"] = l_con
        total += l_con

    cyc = None
    if use_cycle:
        z_seen, z_unseen = z[:N], z[N:]
        cyc = cycle_reconstruct(z_seen, z_unseen, s.tau)
        l_cyc, gV, g_xb = contrastive_loss(V, cyc.x_b, labels, s.tau, s.reduction)
        parts["cycle"] = l_cyc
        total += s.gamma * l_cyc
        dV += s.gamma * gV
        d_seen, d_unseen = cycle_backward(cyc, z_seen, z_unseen, s.gamma * g_xb, s.tau)
        dz = np.vstack([d_seen, d_unseen])
        if dz_l is not None:
            dz_l += s.alpha * dz
        if dz_c is not None:
            dz_c += (1.0 - s.alpha) * dz

    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss (parts: {parts})")
    class_ids = np.concatenate([seen.class_ids, bank_text.class_ids]) if bank_text else seen.class_ids
    bank = ClassBank(class_ids, z_l, z_c, z)
    if not with_grad:
        return LossResult(total, {}, parts, bank, cyc)

    if v_cache is not None:
        dV = l2_normalize_backward(V, v_cache, dV)
    grads = {"W_v": X.T @ dV, "b_v": dV.sum(axis=0)}
    dW_s = np.zeros_like(params.W_s)
    db_s = np.zeros_like(params.b_s)
    for D, dzz, cache, zz in ((D_l, dz_l, zl_cache, z_l), (D_c, dz_c, zc_cache, z_c)):
        if D is None:
            continue
        if cache is not None:
            dzz = l2_normalize_backward(zz, cache[1], dzz)
        dW_s += D.T @ dzz
        db_s += dzz.sum(axis=0)
    grads["W_s"] = dW_s
    grads["b_s"] = db_s
    for name, g in grads.items():
        _check_finite(f"gradient of {name}", g)
    return LossResult(total, grads, parts, bank, cyc)


def loss_value(params, video_raw, labels, seen, unseen, settings) -> float:
    return overall_loss(params, video_raw, labels, seen, unseen, settings, with_grad=False).loss


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def class_scores(video_feats, class_feats) -> np.ndarray:
    return np.asarray(video_feats, dtype=np.float64) @ np.asarray(class_feats, dtype=np.float64).T


def rank_classes(scores) -> np.ndarray:
    """Per row, class indices by descending score; ties keep ascending index."""
    return np.argsort(-scores, axis=1, kind="stable")


def predict(video_feats, z_l_unseen, z_c_unseen, alpha: float):
    """Returns (predicted indices, full score matrix) over the unseen classes."""
    p = fuse_class_features(z_l_unseen, z_c_unseen, alpha)
    if p.shape[0] == 0:
        raise ValueError("no unseen classes to predict over")
    scores = class_scores(video_feats, p)
    return np.argmax(scores, axis=1), scores
