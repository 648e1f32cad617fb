"""Okapi BM25 inverted index: the lexical baseline and candidate initializer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .corpus import DatasetRegistry, Example
from .errors import ConfigError, DataError, StateError
from .tokenization import tokenize

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc_ordinal, tf)], ordinal-sorted
    doc_lengths: list[int]
    doc_ids: list[str]
    avg_doc_len: float
    k1: float
    b: float


def build_index(
    docs: list[tuple[str, str]], k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> InvertedIndex:
    """Index (id, text) pairs over lowercased whitespace tokens."""
    if not docs:
        raise ConfigError("cannot build an index over an empty corpus")
    if k1 <= 0:
        raise ConfigError("k1 must be > 0")
    if not 0 <= b <= 1:
        raise ConfigError("b must be in [0, 1]")
    seen = set()
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    doc_ids: list[str] = []
    for ordinal, (doc_id, text) in enumerate(docs):
        if doc_id in seen:
            raise DataError(f"duplicate doc id {doc_id!r}")
        seen.add(doc_id)
        tokens = tokenize(text)
        counts: dict[str, int] = {}
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((ordinal, tf))
        doc_lengths.append(len(tokens))
        doc_ids.append(doc_id)
    avg_doc_len = sum(doc_lengths) / len(doc_lengths)
    return InvertedIndex(postings, doc_lengths, doc_ids, avg_doc_len, k1, b)


def idf(index: InvertedIndex, term: str) -> float:
    """Non-negative Okapi IDF: ln(1 + (N - df + 0.5) / (df + 0.5))."""
    plist = index.postings.get(term)
    if not plist:
        return 0.0
    n, df = len(index.doc_ids), len(plist)
    return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def bm25_top_k(index: InvertedIndex, query: str, k: int) -> list[tuple[str, float]]:
    """Top-k documents sharing at least one query term, score-descending.

    Query terms contribute once per occurrence; ties break by ascending doc
    ordinal. Documents with no overlap are never returned, so fewer than k
    results are possible.
    """
    scores: dict[int, float] = {}
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        term_idf = idf(index, term)
        for ordinal, tf in plist:
            dl = index.doc_lengths[ordinal]
            norm = tf + index.k1 * (1 - index.b + index.b * dl / index.avg_doc_len)
            scores[ordinal] = scores.get(ordinal, 0.0) + term_idf * tf * (index.k1 + 1) / norm
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return [(index.doc_ids[ordinal], score) for ordinal, score in ranked[:k]]


def mode_for_kind(kind: str) -> str:
    return "by_target" if kind == "generation" else "by_input"


class CandidateInitializer:
    """Per-task lexical indexes serving initial candidate pools.

    Indexes are built lazily per (task, mode): by_input indexes and queries on
    inputs, by_target on targets. Pools are padded with unmatched non-self
    examples (ascending split order) so a pool of min(k, split-1) ids is
    always returned.
    """

    def __init__(self, registry: DatasetRegistry, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self._registry = registry
        self._k1 = k1
        self._b = b
        self._indexes: dict[tuple[str, str], InvertedIndex] = {}

    def _index_for(self, task_id: str, mode: str) -> InvertedIndex:
        key = (task_id, mode)
        if key not in self._indexes:
            split = self._registry.split(task_id, "train")
            if not split:
                raise StateError(f"task {task_id!r} has no indexed train split")
            field = (lambda e: e.input) if mode == "by_input" else (lambda e: e.target)
            docs = [(e.example_id, field(e)) for e in split]
            self._indexes[key] = build_index(docs, self._k1, self._b)
        return self._indexes[key]

    def init_candidates(self, query: Example, k: int, mode: str | None = None) -> list[str]:
        if k < 1:
            raise ConfigError("k must be >= 1")
        spec = self._registry.task(query.task_id)
        mode = mode or mode_for_kind(spec.kind)
        if mode not in ("by_input", "by_target"):
            raise ConfigError(f"unknown init mode {mode!r}")
        index = self._index_for(query.task_id, mode)
        text = query.input if mode == "by_input" else query.target
        hits = [doc_id for doc_id, _ in bm25_top_k(index, text, k + 1) if doc_id != query.example_id]
        chosen = hits[:k]
        if len(chosen) < k:
            have = set(chosen)
            for doc_id in index.doc_ids:
                if len(chosen) >= k:
                    break
                if doc_id != query.example_id and doc_id not in have:
                    chosen.append(doc_id)
        return chosen


def init_candidates(
    query: Example,
    registry: DatasetRegistry,
    k: int,
    mode: str | None = None,
) -> list[str]:
    """One-shot candidate initialization; see CandidateInitializer."""
    return CandidateInitializer(registry).init_candidates(query, k, mode)


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """JSON persistence, mainly for test fixtures."""
    payload = {
        "postings": {term: [[o, tf] for o, tf in plist] for term, plist in index.postings.items()},
        "doc_lengths": index.doc_lengths,
        "doc_ids": index.doc_ids,
        "avg_doc_len": index.avg_doc_len,
        "k1": index.k1,
        "b": index.b,
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_index(path: str | Path) -> InvertedIndex:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return InvertedIndex(
        postings={t: [(o, tf) for o, tf in pl] for t, pl in payload["postings"].items()},
        doc_lengths=list(payload["doc_lengths"]),
        doc_ids=list(payload["doc_ids"]),
        avg_doc_len=payload["avg_doc_len"],
        k1=payload["k1"],
        b=payload["b"],
    )
