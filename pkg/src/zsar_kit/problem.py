"""Assemble feature stores + a split into the arrays the trainer consumes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .align import ClassText
from .datamodel import FeatureStore, FormatError, ZsarSplit


@dataclass
class VideoSet:
    item_ids: tuple[str, ...]
    features: np.ndarray
    class_ids: np.ndarray  # raw class ids
    labels: np.ndarray  # row indices into the matching class table

    def __len__(self):
        return len(self.item_ids)


@dataclass
class ZsarProblem:
    split: ZsarSplit
    seen: ClassText
    unseen: ClassText
    val_classes: ClassText | None
    train: VideoSet
    val: VideoSet
    test: VideoSet

    @property
    def d_in_v(self) -> int:
        return self.train.features.shape[1]

    @property
    def d_in_s(self) -> int:
        feats = self.seen.definitions if self.seen.definitions is not None else self.seen.descriptions
        if feats is None:
            raise FormatError("no text features available")
        return feats.shape[1]

    def cim_bank(self, which: str = "unseen") -> ClassText:
        """Class bank used by cycle reconstruction during training."""
        if which == "unseen":
            return self.unseen
        if which == "val":
            if self.val_classes is None:
                raise FormatError("cim_classes=val but the split declares no val_classes")
            return self.val_classes
        if self.val_classes is None:
            return self.unseen
        return concat_text(self.unseen, self.val_classes)

    @property
    def val_text(self) -> ClassText:
        return self.val_classes if self.val_classes is not None else self.unseen


def concat_text(a: ClassText, b: ClassText) -> ClassText:
    def cat(x, y):
        return None if x is None or y is None else np.vstack([x, y])

    return ClassText(
        np.concatenate([a.class_ids, b.class_ids]),
        cat(a.definitions, b.definitions),
        cat(a.descriptions, b.descriptions),
    )


def group_rows(store: FeatureStore) -> dict[int, list[int]]:
    """Row positions of each class, in store order."""
    rows: dict[int, list[int]] = {}
    for r, lab in enumerate(store.labels):
        rows.setdefault(int(lab), []).append(r)
    return rows


def default_selection(descriptions: FeatureStore, k: int) -> dict[int, list[int]]:
    return {cid: list(range(min(k, len(rows)))) for cid, rows in group_rows(descriptions).items()}


def class_text(class_ids: Sequence[int], definitions: FeatureStore | None,
               descriptions: FeatureStore | None, selection: Mapping[int, Sequence[int]] | None,
               k: int) -> ClassText:
    """Definition rows and mean selected-description rows for ``class_ids``.

    ``selection`` maps class id to description indices (position among that
    class's rows in the description store), best first; at most ``k`` are used.
    """
    ids = np.array(sorted(class_ids), dtype=np.int64)
    defs = None
    if definitions is not None:
        by_class = group_rows(definitions)
        rows = []
        for cid in ids:
            if cid not in by_class:
                raise FormatError(f"class {cid} has no definition feature")
            if len(by_class[cid]) != 1:
                raise FormatError(f"class {cid} has {len(by_class[cid])} definition rows, expected 1")
            rows.append(by_class[cid][0])
        defs = definitions.matrix[rows]
    descs = None
    if descriptions is not None:
        by_class = group_rows(descriptions)
        means = []
        for cid in ids:
            rows = by_class.get(int(cid), [])
            picked = list(selection.get(int(cid), [])) if selection is not None else list(range(len(rows)))
            picked = picked[:k]
            if not picked:
                raise FormatError(
                    f"class {cid} has no selected descriptions; "
                    "train it in definition-only mode (alpha=1)"
                )
            bad = [i for i in picked if not 0 <= i < len(rows)]
            if bad:
                raise FormatError(f"class {cid}: description index {bad[0]} out of range")
            means.append(descriptions.matrix[[rows[i] for i in picked]].mean(axis=0))
        descs = np.stack(means)
    return ClassText(ids, defs, descs)


def video_set(videos: FeatureStore, items, class_ids: np.ndarray) -> VideoSet:
    pos = {int(c): i for i, c in enumerate(class_ids)}
    rows = [r for r, item in enumerate(videos.item_ids) if item in items]
    labels = videos.labels[rows]
    return VideoSet(
        tuple(videos.item_ids[r] for r in rows),
        videos.matrix[rows],
        labels.copy(),
        np.array([pos[int(c)] for c in labels], dtype=np.int64),
    )


def build_problem(videos: FeatureStore, split: ZsarSplit, definitions: FeatureStore | None,
                  descriptions: FeatureStore | None, k: int = 100,
                  selection: Mapping[int, Sequence[int]] | None = None) -> ZsarProblem:
    split.validate_items(videos.label_map())
    if definitions is None and descriptions is None:
        raise FormatError("need definition and/or description features")
    seen = class_text(split.seen_classes, definitions, descriptions, selection, k)
    unseen = class_text(split.unseen_classes, definitions, descriptions, selection, k)
    val_cls = (
        class_text(split.val_classes, definitions, descriptions, selection, k)
        if split.val_classes
        else None
    )
    val_ids = val_cls.class_ids if val_cls is not None else unseen.class_ids
    return ZsarProblem(
        split,
        seen,
        unseen,
        val_cls,
        video_set(videos, split.train_items, seen.class_ids),
        video_set(videos, split.val_items, val_ids),
        video_set(videos, split.test_items, unseen.class_ids),
    )


def without_descriptions(problem: ZsarProblem) -> ZsarProblem:
    def strip(t):
        return None if t is None else ClassText(t.class_ids, t.definitions, None)

    return ZsarProblem(problem.split, strip(problem.seen), strip(problem.unseen),
                       strip(problem.val_classes), problem.train, problem.val, problem.test)


def without_definitions(problem: ZsarProblem) -> ZsarProblem:
    def strip(t):
        return None if t is None else ClassText(t.class_ids, None, t.descriptions)

    return ZsarProblem(problem.split, strip(problem.seen), strip(problem.unseen),
                       strip(problem.val_classes), problem.train, problem.val, problem.test)
