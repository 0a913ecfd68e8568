"""Synthetic zero-shot problems with planted shared concepts.

Every class is a sparse non-negative mixture of orthonormal latent concepts
drawn from one pool shared by seen and unseen classes. Videos see the full
mixture through a noisy random linear "backbone"; definitions only see a
prefix of the class's concepts; descriptions see all of them.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    ActionClass,
    FeatureStore,
    FormatError,
    ZsarSplit,
    atomic_write_text,
    config_types,
    kv_text,
    parse_kv,
    save_classes,
    save_feature_store,
    save_split,
)


@dataclass(frozen=True)
class SynthSpec:
    n_concepts: int = 12
    n_seen: int = 10
    n_unseen: int = 5
    n_val: int = 0
    concepts_per_class: int = 4
    videos_per_class: int = 40
    descriptions_per_class: int = 20
    visual_noise_sigma: float = 0.3
    text_noise_sigma: float = 0.1
    definition_fidelity: float = 0.4
    d_latent: int = 16
    d_in_v: int = 32
    d_in_s: int = 32
    seed: int = 0

    def __post_init__(self):
        counts = ("n_concepts", "n_seen", "n_unseen", "concepts_per_class", "videos_per_class",
                  "descriptions_per_class", "d_latent", "d_in_v", "d_in_s")
        for name in counts:
            if getattr(self, name) < 1:
                raise FormatError(f"{name} must be >= 1")
        if self.n_val < 0:
            raise FormatError("n_val must be >= 0")
        if self.visual_noise_sigma < 0 or self.text_noise_sigma < 0:
            raise FormatError("noise sigmas must be >= 0")
        if not 0 <= self.definition_fidelity <= 1:
            raise FormatError("definition_fidelity must lie in [0, 1]")
        if self.concepts_per_class > self.n_concepts:
            raise FormatError("concepts_per_class exceeds n_concepts")
        if self.d_latent < self.n_concepts:
            raise FormatError(
                f"d_latent ({self.d_latent}) < n_concepts ({self.n_concepts}): "
                "concepts cannot be orthonormal"
            )

    @property
    def n_classes(self) -> int:
        return self.n_seen + self.n_unseen + self.n_val

    @property
    def definition_concepts(self) -> int:
        return math.ceil(self.definition_fidelity * self.concepts_per_class - 1e-12)

    def replace(self, **changes) -> "SynthSpec":
        return dataclasses.replace(self, **changes)


def parse_synth_spec(text: str, source: str = "spec") -> SynthSpec:
    return SynthSpec(**parse_kv(text, config_types(SynthSpec), source))


def synth_spec_text(spec: SynthSpec) -> str:
    return kv_text(spec)


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals from uniforms via the Box-Muller transform."""
    size = int(np.prod(shape)) if shape else 1
    half = (size + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:size].reshape(shape)


@dataclass
class SynthData:
    spec: SynthSpec
    videos: FeatureStore
    definitions: FeatureStore
    descriptions: FeatureStore
    classes: list[ActionClass]
    split: ZsarSplit
    concepts: np.ndarray  # n_concepts x d_latent, orthonormal rows
    class_concepts: list[tuple[int, ...]]  # concept ids per class, definition prefix first
    class_weights: np.ndarray  # n_classes x n_concepts, non-negative
    video_backbone: np.ndarray  # d_latent x d_in_v
    text_backbone: np.ndarray  # d_latent x d_in_s

    def class_vector(self, cid: int, n_concepts: int | None = None) -> np.ndarray:
        w = self.class_weights[cid].copy()
        if n_concepts is not None:
            keep = set(self.class_concepts[cid][:n_concepts])
            w[[c for c in range(len(w)) if c not in keep]] = 0.0
        return w @ self.concepts


def _class_rng(seed: int, stream: int, cid: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, cid]))


def generate(spec: SynthSpec) -> SynthData:
    g = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    q, _ = np.linalg.qr(box_muller(g, (spec.d_latent, spec.d_latent)))
    concepts = q[:, : spec.n_concepts].T.copy()
    video_backbone = box_muller(g, (spec.d_latent, spec.d_in_v)) / math.sqrt(spec.d_latent)
    text_backbone = box_muller(g, (spec.d_latent, spec.d_in_s)) / math.sqrt(spec.d_latent)

    C = spec.n_classes
    weights = np.zeros((C, spec.n_concepts))
    chosen = []
    vids, vid_ids, vid_labels = [], [], []
    defs, desc_rows, desc_ids, desc_labels = [], [], [], []
    m_def = spec.definition_concepts
    for cid in range(C):
        rng = _class_rng(spec.seed, 1, cid)
        picks = tuple(int(c) for c in rng.permutation(spec.n_concepts)[: spec.concepts_per_class])
        weights[cid, list(picks)] = rng.uniform(0.5, 1.5, size=len(picks))
        chosen.append(picks)
        full = weights[cid] @ concepts
        prefix = np.zeros(spec.n_concepts)
        prefix[list(picks[:m_def])] = weights[cid, list(picks[:m_def])]
        partial = prefix @ concepts

        # Noise is drawn before masking so fidelity never changes the draws.
        v_noise = box_muller(rng, (spec.videos_per_class, spec.d_latent))
        d_noise = box_muller(rng, (spec.d_latent,))
        s_noise = box_muller(rng, (spec.descriptions_per_class, spec.d_latent))

        vids.append((full + spec.visual_noise_sigma * v_noise) @ video_backbone)
        vid_ids += [f"v{cid:04d}_{i:04d}" for i in range(spec.videos_per_class)]
        vid_labels += [cid] * spec.videos_per_class
        defs.append((partial + spec.text_noise_sigma * d_noise) @ text_backbone)
        desc_rows.append((full + spec.text_noise_sigma * s_noise) @ text_backbone)
        desc_ids += [f"d{cid:04d}_{j:04d}" for j in range(spec.descriptions_per_class)]
        desc_labels += [cid] * spec.descriptions_per_class

    videos = FeatureStore(tuple(vid_ids), np.array(vid_labels), np.vstack(vids))
    definitions = FeatureStore(
        tuple(f"def{cid:04d}" for cid in range(C)), np.arange(C), np.vstack(defs)
    )
    descriptions = FeatureStore(tuple(desc_ids), np.array(desc_labels), np.vstack(desc_rows))

    seen = range(spec.n_seen)
    unseen = range(spec.n_seen, spec.n_seen + spec.n_unseen)
    val = range(spec.n_seen + spec.n_unseen, C)

    def items(cids):
        cids = set(cids)
        return frozenset(i for i, lab in zip(vid_ids, vid_labels) if lab in cids)

    split = ZsarSplit(
        f"synth-{spec.seed}",
        frozenset(seen),
        frozenset(unseen),
        items(seen),
        items(val),
        items(unseen),
        frozenset(val),
    )
    classes = [
        ActionClass.create(
            cid,
            f"synthetic action {cid}",
            "composed of " + ", ".join(f"concept {c}" for c in chosen[cid][:m_def]),
        )
        for cid in range(C)
    ]
    return SynthData(spec, videos, definitions, descriptions, classes, split, concepts,
                     chosen, weights, video_backbone, text_backbone)


def write_dataset(data: SynthData, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_feature_store(data.videos, out / "videos.zsf")
    save_feature_store(data.definitions, out / "definitions.zsf")
    save_feature_store(data.descriptions, out / "descriptions.zsf")
    save_classes(data.classes, out / "classes.jsonl")
    save_split(data.split, out / "split.json")
    atomic_write_text(out / "synth.cfg", synth_spec_text(data.spec))


def oracle_scores(videos, class_features) -> list[list[float]]:
    """Every v_i . p_j by explicit scalar loops. Test oracle only."""
    table = []
    for v in np.asarray(videos, dtype=np.float64).tolist():
        row = []
        for p in np.asarray(class_features, dtype=np.float64).tolist():
            s = 0.0
            for a, b in zip(v, p):
                s += a * b
            row.append(s)
        table.append(row)
    return table


def oracle_argmax(table) -> list[int]:
    out = []
    for row in table:
        best = 0
        for j, s in enumerate(row):
            if s > row[best]:
                best = j
        out.append(best)
    return out
