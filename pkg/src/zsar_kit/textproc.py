"""Corpus text pipeline: action-name normalization and dedup, description
relevance ranking with averaged word vectors, top-k selection, corpus stats."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import ActionClass, EmbeddingTable, FormatError, atomic_write_text
from .stopwords import DEFAULT_STOPWORDS

# Marks a description (or name) with no usable embedding.
EXCLUDED = None

_TOKEN_RE = re.compile(r"[^\W_]+")
_ASCII_LOWER = str.maketrans("ABCDEFGHIJKLMNOPQRSTUVWXYZ", "abcdefghijklmnopqrstuvwxyz")
_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")
_SIBILANT = ("s", "x", "z", "ch", "sh")


def tokenize(text: str) -> list[str]:
    """Split on non-alphanumerics; ASCII letters lowercased, other letters kept as-is."""
    return _TOKEN_RE.findall(text.translate(_ASCII_LOWER))


def _lemma_once(tok: str) -> str:
    n = len(tok)
    if tok.endswith("ies") and n > 4:
        return tok[:-3] + "y"
    if tok.endswith("es") and n > 3:
        stem = tok[:-2]
        return stem if stem.endswith(_SIBILANT) else tok[:-1]
    if tok.endswith("s") and not tok.endswith("ss") and n > 3:
        return tok[:-1]
    if tok.endswith("ing") and n - 3 >= 3:
        return tok[:-3]
    if tok.endswith("ed") and n - 2 >= 3:
        return tok[:-2]
    return tok


def lemmatize(tok: str) -> str:
    # Rules only ever shorten the token, so the loop terminates.
    while True:
        nxt = _lemma_once(tok)
        if nxt == tok:
            return tok
        tok = nxt


def normalize_action_name(name: str, stopwords=DEFAULT_STOPWORDS) -> str:
    toks = [t for t in tokenize(name) if t not in stopwords]
    toks = [lemmatize(t) for t in toks]
    return " ".join(t for t in toks if t and t not in stopwords)


def dedup_actions(classes: Sequence[ActionClass]) -> list[ActionClass]:
    """Keep one class per canonical name: the lowest class_id wins, placed at
    the group's first position in the input."""
    best: dict[str, ActionClass] = {}
    order: list[str] = []
    for c in classes:
        key = c.canonical_name
        if key not in best:
            order.append(key)
            best[key] = c
        elif c.class_id < best[key].class_id:
            best[key] = c
    return [best[key] for key in order]


def embed_text(text: str, table: EmbeddingTable, stopwords=None):
    """Mean word vector of all in-vocabulary tokens, or EXCLUDED if none."""
    toks = tokenize(text)
    if stopwords:
        toks = [t for t in toks if t not in stopwords]
    found = [table.entries[t] for t in toks if t in table.entries]
    if not found:
        return EXCLUDED
    return np.mean(np.stack(found), axis=0)


def cosine(a, b):
    if a is EXCLUDED or b is EXCLUDED:
        return EXCLUDED
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return EXCLUDED
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class RelevanceRanking:
    class_id: int
    scored: tuple  # of (description_index, score or EXCLUDED)

    @property
    def n_scored(self) -> int:
        return sum(1 for _, s in self.scored if s is not EXCLUDED)


def order_scores(scores: Sequence) -> list[tuple[int, float | None]]:
    idx = list(range(len(scores)))
    good = sorted((i for i in idx if scores[i] is not EXCLUDED), key=lambda i: (-scores[i], i))
    bad = [i for i in idx if scores[i] is EXCLUDED]
    return [(i, scores[i]) for i in good] + [(i, EXCLUDED) for i in bad]


def rank_descriptions(cls: ActionClass, table: EmbeddingTable, stopwords=None) -> RelevanceRanking:
    name_vec = embed_text(cls.name, table, stopwords)
    scores = [cosine(embed_text(d, table, stopwords), name_vec) for d in cls.descriptions]
    return RelevanceRanking(cls.class_id, tuple(order_scores(scores)))


def select_top_k(ranking: RelevanceRanking, k: int) -> list[int]:
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    picked = [i for i, s in ranking.scored if s is not EXCLUDED]
    return picked[:k]


def ranking_text(ranking: RelevanceRanking) -> str:
    rows = []
    for idx, score in ranking.scored:
        shown = "excluded" if score is EXCLUDED else repr(score)
        rows.append(f"{ranking.class_id}, {idx}, {shown}\n")
    return "".join(rows)


def save_ranking(ranking: RelevanceRanking, path) -> None:
    atomic_write_text(path, ranking_text(ranking))


def load_ranking(path) -> RelevanceRanking:
    path = Path(path)
    cid = None
    scored = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'class_id, description_index, score'")
        try:
            c, idx = int(parts[0]), int(parts[1])
            score = EXCLUDED if parts[2] == "excluded" else float(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: unparsable ranking row {line!r}") from None
        if cid is None:
            cid = c
        elif c != cid:
            raise FormatError(f"{path}:{lineno}: class {c} in ranking file for class {cid}")
        scored.append((idx, score))
    if cid is None:
        cid = int(path.stem) if path.stem.isdigit() else -1
    return RelevanceRanking(cid, tuple(scored))


def load_rankings(directory) -> dict[int, RelevanceRanking]:
    out = {}
    for p in sorted(Path(directory).glob("*.rank")):
        r = load_ranking(p)
        out[r.class_id] = r
    return out


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

DESCRIPTION_BUCKETS = (0, 1, 100, 500, 1000, 2000, 3000, 5000, 10000)
SENTENCE_BUCKETS = (0, 1, 300, 1500, 3000, 6000, 9000, 15000, 30000)


def count_sentences(text: str) -> int:
    return sum(1 for frag in _SENTENCE_END.split(text) if frag.strip())


def histogram(values: Iterable[int], edges: Sequence[int]) -> list[tuple[str, int]]:
    """Counts per half-open bucket [edges[i], edges[i+1]); last bucket is open-ended."""
    values = list(values)
    out = []
    for i, lo in enumerate(edges):
        hi = edges[i + 1] if i + 1 < len(edges) else None
        label = f"{lo}+" if hi is None else (f"{lo}" if hi == lo + 1 else f"{lo}-{hi - 1}")
        out.append((label, sum(1 for v in values if v >= lo and (hi is None or v < hi))))
    return out


@dataclass
class CorpusStats:
    per_class: dict[int, tuple[int, int]]
    total_descriptions: int
    total_sentences: int
    sentences_per_description: float
    description_histogram: list = field(default_factory=list)
    sentence_histogram: list = field(default_factory=list)
    most: list = field(default_factory=list)
    least: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "per_class": {str(k): list(v) for k, v in self.per_class.items()},
            "total_descriptions": self.total_descriptions,
            "total_sentences": self.total_sentences,
            "sentences_per_description": self.sentences_per_description,
            "description_histogram": [list(b) for b in self.description_histogram],
            "sentence_histogram": [list(b) for b in self.sentence_histogram],
            "most_descriptions": [list(x) for x in self.most],
            "least_descriptions": [list(x) for x in self.least],
        }


def class_stats(cls: ActionClass) -> tuple[int, int]:
    return len(cls.descriptions), sum(count_sentences(d) for d in cls.descriptions)


def corpus_stats(classes: Sequence[ActionClass], top_n: int = 40, bottom_n: int = 20) -> CorpusStats:
    per = {c.class_id: class_stats(c) for c in sorted(classes, key=lambda c: c.class_id)}
    n_desc = sum(v[0] for v in per.values())
    n_sent = sum(v[1] for v in per.values())
    names = {c.class_id: c.name for c in classes}
    by_count = sorted(per, key=lambda cid: (-per[cid][0], cid))
    most = [(cid, names[cid], per[cid][0]) for cid in by_count[:top_n]]
    fewest = sorted(per, key=lambda cid: (per[cid][0], cid))[:bottom_n]
    least = [(cid, names[cid], per[cid][0]) for cid in fewest]
    return CorpusStats(
        per,
        n_desc,
        n_sent,
        n_sent / n_desc if n_desc else 0.0,
        histogram((v[0] for v in per.values()), DESCRIPTION_BUCKETS),
        histogram((v[1] for v in per.values()), SENTENCE_BUCKETS),
        most,
        least,
    )
