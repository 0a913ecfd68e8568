"""On-disk data model: feature stores, class metadata, embeddings, splits, run config.

Every loader validates its input and raises :class:`FormatError` with a message
naming the offending row, token, class or key.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

ZSF_MAGIC = b"ZSF1"
_ZSF_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """Raised when an input file violates its format or invariants."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Feature stores (ZSF1)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStore:
    item_ids: tuple[str, ...]
    labels: np.ndarray  # int64, shape (n,)
    matrix: np.ndarray  # float64, shape (n, d_in)

    def __post_init__(self):
        matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if matrix.ndim != 2:
            raise FormatError(f"feature matrix must be 2-D, got shape {matrix.shape}")
        if matrix.shape[1] < 1:
            raise FormatError("feature dimension must be positive")
        if not (matrix.shape[0] == len(self.item_ids) == labels.shape[0]):
            raise FormatError(
                f"row count mismatch: matrix has {matrix.shape[0]} rows, "
                f"{len(self.item_ids)} ids, {labels.shape[0]} labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
            raise FormatError("labels must fit in an unsigned 32-bit integer")
        bad = ~np.isfinite(matrix)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise FormatError(f"non-finite value in row {row}")
        matrix.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "item_ids", tuple(str(i) for i in self.item_ids))
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d_in(self) -> int:
        return self.matrix.shape[1]

    def rows_for(self, ids: Iterable[str]) -> "FeatureStore":
        index = {item: i for i, item in enumerate(self.item_ids)}
        try:
            rows = [index[i] for i in ids]
        except KeyError as exc:
            raise FormatError(f"unknown item id {exc.args[0]!r}") from None
        return FeatureStore(
            tuple(self.item_ids[r] for r in rows), self.labels[rows], self.matrix[rows]
        )

    def label_map(self) -> dict[str, int]:
        return dict(zip(self.item_ids, (int(x) for x in self.labels)))


def feature_store_bytes(store: FeatureStore) -> bytes:
    header = _ZSF_HEADER.pack(ZSF_MAGIC, store.n, store.d_in)
    body = store.matrix.astype("<f8", copy=False).tobytes(order="C")
    labels = store.labels.astype("<u4").tobytes()
    return header + body + labels


def save_feature_store(store: FeatureStore, path) -> None:
    path = Path(path)
    ids_text = "".join(f"{i}\n" for i in store.item_ids)
    for item in store.item_ids:
        if "\n" in item or "\r" in item:
            raise FormatError(f"item id {item!r} contains a newline")
    atomic_write_bytes(path, feature_store_bytes(store))
    atomic_write_text(ids_path(path), ids_text)


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def parse_feature_store(data: bytes, ids: Sequence[str] | None = None) -> FeatureStore:
    if len(data) < _ZSF_HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes, need {_ZSF_HEADER.size}")
    magic, n, d = _ZSF_HEADER.unpack_from(data, 0)
    if magic != ZSF_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {ZSF_MAGIC!r}")
    if d == 0:
        raise FormatError("feature dimension d=0 in header (byte offset 8)")
    expected = _ZSF_HEADER.size + 8 * n * d + 4 * n
    if len(data) != expected:
        raise FormatError(
            f"size mismatch: header says n={n}, d={d} ({expected} bytes) "
            f"but file has {len(data)} bytes"
        )
    off = _ZSF_HEADER.size
    matrix = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    bad = ~np.isfinite(matrix)
    if bad.any():
        row, col = (int(x) for x in np.argwhere(bad)[0])
        byte = off + 8 * (row * d + col)
        raise FormatError(f"non-finite value at row {row}, column {col} (byte offset {byte})")
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=off + 8 * n * d)
    if ids is None:
        ids = [f"item{i}" for i in range(n)]
    if len(ids) != n:
        raise FormatError(f"id sidecar has {len(ids)} lines but header says n={n}")
    return FeatureStore(tuple(ids), labels.astype(np.int64), matrix.astype(np.float64))


def load_feature_store(path) -> FeatureStore:
    path = Path(path)
    data = path.read_bytes()
    side = ids_path(path)
    if not side.exists():
        raise FormatError(f"missing id sidecar {side}")
    ids = side.read_text(encoding="utf-8").splitlines()
    try:
        return parse_feature_store(data, ids)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Embedding tables (word2vec text format)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    entries: Mapping[str, np.ndarray]

    def get(self, token: str):
        return self.entries.get(token)

    def __len__(self):
        return len(self.entries)


def parse_embedding_table(text: str) -> EmbeddingTable:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty embedding file")
    head = lines[0].split()
    if len(head) != 2:
        raise FormatError(f"line 1: expected 'count dim', got {lines[0]!r}")
    try:
        count, dim = int(head[0]), int(head[1])
    except ValueError:
        raise FormatError(f"line 1: unparsable header {lines[0]!r}") from None
    if dim < 1 or count < 0:
        raise FormatError(f"line 1: invalid count/dim {count} {dim}")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise FormatError(f"entry count mismatch: header says {count}, found {len(body)}")
    entries: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        token = parts[0].lower()
        if len(parts) - 1 != dim:
            raise FormatError(
                f"line {lineno}: token {token!r} vector length {len(parts) - 1} ≠ {dim}"
            )
        if token in entries:
            raise FormatError(f"line {lineno}: duplicate token {token!r}")
        try:
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        except ValueError:
            raise FormatError(f"line {lineno}: unparsable number for token {token!r}") from None
        if not np.isfinite(vec).all():
            raise FormatError(f"line {lineno}: non-finite value for token {token!r}")
        vec.setflags(write=False)
        entries[token] = vec
    return EmbeddingTable(dim, entries)


def load_embedding_table(path) -> EmbeddingTable:
    try:
        return parse_embedding_table(Path(path).read_text(encoding="utf-8"))
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_embedding_table(table: EmbeddingTable, path) -> None:
    out = [f"{len(table.entries)} {table.dim}"]
    for token, vec in table.entries.items():
        out.append(token + " " + " ".join(repr(float(x)) for x in vec))
    atomic_write_text(path, "\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Class metadata (line-delimited JSON records + per-class description files)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionClass:
    class_id: int
    name: str
    canonical_name: str = ""
    definition: str = ""
    descriptions: tuple[str, ...] = ()

    @classmethod
    def create(cls, class_id: int, name: str, definition: str = "", descriptions=()):
        from .textproc import normalize_action_name

        return cls(class_id, name, normalize_action_name(name), definition, tuple(descriptions))


_CLASS_FIELDS = {"class_id", "name", "definition", "descriptions_path", "canonical_name"}


def load_classes(path) -> list[ActionClass]:
    """Read class metadata; descriptions files are resolved relative to ``path``."""
    from .textproc import normalize_action_name

    path = Path(path)
    classes: list[ActionClass] = []
    seen: set[int] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid record: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise FormatError(f"{path}:{lineno}: record must be an object")
        for key in sorted(set(rec) - _CLASS_FIELDS):
            log.warning("%s:%d: ignoring unknown field %r", path, lineno, key)
        cid = rec.get("class_id")
        if not isinstance(cid, int) or isinstance(cid, bool) or cid < 0:
            raise FormatError(f"{path}:{lineno}: class_id must be a non-negative integer")
        if cid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate class_id {cid}")
        seen.add(cid)
        name = rec.get("name")
        if not isinstance(name, str):
            raise FormatError(f"{path}:{lineno}: class {cid} has no name")
        descriptions: tuple[str, ...] = ()
        if rec.get("descriptions_path"):
            dpath = path.parent / rec["descriptions_path"]
            if not dpath.exists():
                raise FormatError(f"{path}:{lineno}: class {cid} descriptions file {dpath} missing")
            descriptions = tuple(dpath.read_text(encoding="utf-8").splitlines())
        classes.append(
            ActionClass(
                cid,
                name,
                normalize_action_name(name),
                str(rec.get("definition", "")),
                descriptions,
            )
        )
    return classes


def save_classes(classes: Sequence[ActionClass], path, descriptions_dir: str = "descriptions"):
    path = Path(path)
    lines = []
    for c in classes:
        rec = {"class_id": c.class_id, "name": c.name, "definition": c.definition}
        if c.descriptions:
            rel = f"{descriptions_dir}/{c.class_id}.txt"
            flat = [" ".join(d.splitlines()) for d in c.descriptions]
            atomic_write_text(path.parent / rel, "".join(f"{d}\n" for d in flat))
            rec["descriptions_path"] = rel
        lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
    atomic_write_text(path, "".join(f"{ln}\n" for ln in lines))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZsarSplit:
    split_id: str
    seen_classes: frozenset[int]
    unseen_classes: frozenset[int]
    train_items: frozenset[str] = frozenset()
    val_items: frozenset[str] = frozenset()
    test_items: frozenset[str] = frozenset()
    # Optional held-out validation classes, disjoint from both partitions.
    val_classes: frozenset[int] = frozenset()

    def __post_init__(self):
        for name in ("seen_classes", "unseen_classes", "val_classes"):
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        for name in ("train_items", "val_items", "test_items"):
            object.__setattr__(self, name, frozenset(str(i) for i in getattr(self, name)))
        both = self.seen_classes & self.unseen_classes
        if both:
            raise FormatError(f"class {min(both)} in both partitions")
        for other, label in ((self.seen_classes, "seen"), (self.unseen_classes, "unseen")):
            clash = self.val_classes & other
            if clash:
                raise FormatError(f"class {min(clash)} in both val_classes and {label}_classes")

    @property
    def val_label_space(self) -> frozenset[int]:
        return self.val_classes or self.unseen_classes

    def validate_items(self, labels: Mapping[str, int]) -> None:
        """Check every item's label against the partition it belongs to."""
        checks = (
            (self.train_items, self.seen_classes, "train", "seen"),
            (self.val_items, self.val_label_space, "val", "val"),
            (self.test_items, self.unseen_classes, "test", "unseen"),
        )
        for items, allowed, kind, part in checks:
            for item in sorted(items):
                if item not in labels:
                    raise FormatError(f"{kind} item {item!r} not found in feature store")
                lab = labels[item]
                if lab not in allowed:
                    raise FormatError(
                        f"{kind} item {item!r} has label {lab}, which is not a {part} class"
                    )


_SPLIT_KEYS = (
    "split_id",
    "seen_classes",
    "unseen_classes",
    "train_items",
    "val_items",
    "test_items",
)


def split_to_text(split: ZsarSplit) -> str:
    rec = {
        "split_id": split.split_id,
        "seen_classes": sorted(split.seen_classes),
        "unseen_classes": sorted(split.unseen_classes),
        "train_items": sorted(split.train_items),
        "val_items": sorted(split.val_items),
        "test_items": sorted(split.test_items),
    }
    if split.val_classes:
        rec["val_classes"] = sorted(split.val_classes)
    return json.dumps(rec, indent=1, ensure_ascii=False) + "\n"


def parse_split(text: str, labels: Mapping[str, int] | None = None) -> ZsarSplit:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid split file: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(rec, dict):
        raise FormatError("split file must hold one object")
    missing = [k for k in _SPLIT_KEYS[:3] if k not in rec]
    if missing:
        raise FormatError(f"split file missing key(s): {', '.join(missing)}")
    for key in sorted(set(rec) - set(_SPLIT_KEYS) - {"val_classes"}):
        log.warning("split file: ignoring unknown key %r", key)
    for key in ("seen_classes", "unseen_classes", "val_classes"):
        vals = rec.get(key, [])
        if not isinstance(vals, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in vals
        ):
            raise FormatError(f"{key} must be a list of non-negative integers")
        if len(set(vals)) != len(vals):
            raise FormatError(f"{key} lists a class twice")
    split = ZsarSplit(
        str(rec["split_id"]),
        frozenset(rec["seen_classes"]),
        frozenset(rec["unseen_classes"]),
        frozenset(rec.get("train_items", [])),
        frozenset(rec.get("val_items", [])),
        frozenset(rec.get("test_items", [])),
        frozenset(rec.get("val_classes", [])),
    )
    if labels is not None:
        split.validate_items(labels)
    return split


def load_split(path, features: FeatureStore | Mapping[str, int] | None = None) -> ZsarSplit:
    """Load a split file; with ``features`` given, item labels are validated too."""
    labels = features.label_map() if isinstance(features, FeatureStore) else features
    try:
        return parse_split(Path(path).read_text(encoding="utf-8"), labels)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_split(split: ZsarSplit, path) -> None:
    atomic_write_text(path, split_to_text(split))


# ---------------------------------------------------------------------------
# Run configuration (flat key=value)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    d: int = 512
    k: int = 100
    tau: float = 0.1
    alpha: float = 0.5
    gamma: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 512
    epochs: int = 50
    warmup_fraction: float = 0.1
    seed: int = 0
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled_weight_decay: bool = False
    # "mean" divides each contrastive term by the batch size; "sum" matches the raw formula.
    reduction: str = "mean"
    l2_normalize: bool = False
    # "step" rebuilds content features every step; "epoch" freezes them for an epoch.
    content_refresh: str = "step"
    # Which classes form the unseen bank for cycle reconstruction during training.
    cim_classes: str = "unseen"

    def __post_init__(self):
        if not self.tau > 0:
            raise FormatError(f"tau must be > 0, got {self.tau}")
        if not 0 <= self.alpha <= 1:
            raise FormatError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.gamma >= 0:
            raise FormatError(f"gamma must be >= 0, got {self.gamma}")
        if self.k < 1:
            raise FormatError(f"k must be >= 1, got {self.k}")
        if self.d < 1:
            raise FormatError(f"d must be >= 1, got {self.d}")
        if self.batch_size < 1:
            raise FormatError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise FormatError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.warmup_fraction <= 1:
            raise FormatError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.lr < 0 or self.weight_decay < 0:
            raise FormatError("lr and weight_decay must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise FormatError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.content_refresh not in ("step", "epoch"):
            raise FormatError(f"content_refresh must be 'step' or 'epoch'")
        if self.cim_classes not in ("unseen", "val", "both"):
            raise FormatError(f"cim_classes must be 'unseen', 'val' or 'both'")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str, typ):
    if typ is bool:
        try:
            return _BOOL_WORDS[raw.strip().lower()]
        except KeyError:
            raise FormatError(f"{name}: expected a boolean, got {raw!r}") from None
    try:
        value = typ(raw.strip())
    except ValueError:
        raise FormatError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None
    if typ is float and not math.isfinite(value):
        raise FormatError(f"{name}: value must be finite")
    return value


def parse_kv(text: str, allowed: Mapping[str, type], source: str = "config") -> dict:
    """Parse flat ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, raw, allowed[key])
    return out


def config_types(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: types[f.type] if isinstance(f.type, str) else f.type for f in dataclasses.fields(cls)}


def parse_run_config(text: str, source: str = "config") -> RunConfig:
    return RunConfig(**parse_kv(text, config_types(RunConfig), source))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_run_config(path.read_text(encoding="utf-8"), str(path))


def kv_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def save_run_config(cfg: RunConfig, path) -> None:
    atomic_write_text(path, kv_text(cfg))
