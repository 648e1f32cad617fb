"""Exact top-K inner-product search over encoded demonstration pools."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .corpus import DatasetRegistry
from .errors import ConfigError, ContractError, FormatError

INDEX_MAGIC = b"UDX1"
INDEX_VERSION = 1


@dataclass
class DenseIndex:
    ids: list[str]
    vectors: np.ndarray  # (N, d) float32
    task_id: str
    checkpoint_fingerprint: str


def build(params: enc.BiEncoderParams, registry: DatasetRegistry, task_id: str) -> DenseIndex:
    """Encode the task's train split with the demo tower, one row per example."""
    split = registry.split(task_id, "train")
    if not split:
        raise ConfigError(f"task {task_id!r} has an empty train split")
    spec = registry.task(task_id)
    vectors = enc.encode_corpus(params, split, spec).astype(np.float32)
    return DenseIndex(
        ids=[e.example_id for e in split],
        vectors=vectors,
        task_id=task_id,
        checkpoint_fingerprint=enc.params_fingerprint(params),
    )


def search(index: DenseIndex, query_vector: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by inner product, score-descending, ties by ascending
    ordinal. Scores accumulate in float64."""
    if k < 1:
        raise ContractError("k must be >= 1")
    query = np.asarray(query_vector, dtype=np.float64)
    if query.shape != (index.vectors.shape[1],):
        raise ContractError(
            f"query dim {query.shape} does not match index dim ({index.vectors.shape[1]},)"
        )
    rows = index.vectors.astype(np.float64)
    # row-wise dots so every score is bit-identical to a single-row recompute
    scores = np.array([np.dot(row, query) for row in rows])
    order = np.argsort(-scores, kind="stable")[: min(k, len(index.ids))]
    return [(index.ids[int(i)], float(scores[int(i)])) for i in order]


def save(index: DenseIndex, path: str | Path) -> None:
    parts = [INDEX_MAGIC, struct.pack("<I", INDEX_VERSION)]
    for text in (index.task_id, index.checkpoint_fingerprint):
        raw = text.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    n, d = index.vectors.shape
    parts.append(struct.pack("<II", n, d))
    for doc_id in index.ids:
        raw = doc_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load(path: str | Path) -> DenseIndex:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated index file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    def text() -> str:
        return take(u32()).decode("utf-8")

    if take(4) != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {INDEX_MAGIC.decode()}")
    version = u32()
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    task_id = text()
    fingerprint = text()
    n, d = u32(), u32()
    ids = [text() for _ in range(n)]
    vectors = np.frombuffer(take(n * d * 4), dtype="<f4").reshape(n, d).copy()
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after index payload")
    return DenseIndex(ids=ids, vectors=vectors, task_id=task_id, checkpoint_fingerprint=fingerprint)
