"""Instruction-conditioned dual-tower encoder with exact manual gradients.

Each tower is a trainable token-embedding table followed by a linear
projection over the mean-pooled embedding of instruction + text tokens. This
deliberately replaces deep transformer towers at desk scale: it keeps the
bi-encoder/dot-product structure the training objective exercises while
making every gradient computable in closed form.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import DatasetRegistry, Example, TaskSpec, render_demo
from .errors import ConfigError, FormatError
from .tokenization import tokenize

UNK_TOKEN = "<unk>"
CHECKPOINT_MAGIC = b"UDR1"
CHECKPOINT_VERSION = 1


class Vocabulary:
    """Dense term -> index map with the unknown token reserved at index 0."""

    def __init__(self, terms: Iterable[str] = ()):
        self.terms: list[str] = [UNK_TOKEN]
        self._index: dict[str, int] = {UNK_TOKEN: 0}
        for term in terms:
            self.add(term)

    def add(self, term: str) -> int:
        idx = self._index.get(term)
        if idx is None:
            idx = len(self.terms)
            self._index[term] = idx
            self.terms.append(term)
        return idx

    def lookup(self, tokens: list[str]) -> list[int]:
        return [self._index.get(tok, 0) for tok in tokens]

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, term: str) -> bool:
        return term in self._index


def build_vocab(registry: DatasetRegistry) -> Vocabulary:
    """Union of instruction, train-input, and rendered-demo tokens, in
    first-seen order over sorted task ids."""
    vocab = Vocabulary()
    for task_id in registry.task_ids():
        spec = registry.task(task_id)
        for tok in tokenize(spec.instruction):
            vocab.add(tok)
        for example in registry.split(task_id, "train"):
            for tok in tokenize(example.input):
                vocab.add(tok)
            for tok in tokenize(render_demo(example, spec)):
                vocab.add(tok)
    return vocab


@dataclass
class TowerParams:
    embeddings: np.ndarray  # (V, d) float64
    projection: np.ndarray  # (d, d) float64


@dataclass
class BiEncoderParams:
    query_tower: TowerParams
    demo_tower: TowerParams
    dim: int
    vocab: Vocabulary


@dataclass
class EncodingTape:
    """Forward intermediates needed for exact backprop and bit-exact replay."""

    token_indices: list[int]
    pooled: np.ndarray  # mean-pooled embedding, pre-projection (d,)
    output: np.ndarray  # projected vector (d,)

    def replay(self, tower: TowerParams) -> np.ndarray:
        pooled = tower.embeddings[self.token_indices].mean(axis=0)
        return tower.projection @ pooled


def encode(
    tower: TowerParams,
    vocab: Vocabulary,
    text: str,
    instruction: str,
    with_tape: bool = False,
) -> np.ndarray | tuple[np.ndarray, EncodingTape]:
    """projection @ mean(embeddings[tokens of instruction + " " + text])."""
    tokens = tokenize(instruction + " " + text)
    indices = vocab.lookup(tokens) or [0]
    pooled = tower.embeddings[indices].mean(axis=0)
    output = tower.projection @ pooled
    if with_tape:
        return output, EncodingTape(indices, pooled, output)
    return output


def demo_text(example: Example, spec: TaskSpec) -> str:
    return render_demo(example, spec)


def encode_query(params: BiEncoderParams, text: str, spec: TaskSpec, with_tape: bool = False):
    return encode(params.query_tower, params.vocab, text, spec.instruction, with_tape)


def encode_demo(params: BiEncoderParams, example: Example, spec: TaskSpec, with_tape: bool = False):
    return encode(params.demo_tower, params.vocab, demo_text(example, spec), spec.instruction, with_tape)


def similarity(params: BiEncoderParams, query: Example, demo: Example, spec: TaskSpec) -> float:
    """Inner product of the two tower encodings (no normalization)."""
    u = encode_query(params, query.input, spec)
    v = encode_demo(params, demo, spec)
    return float(u @ v)


def encode_corpus(params: BiEncoderParams, examples: list[Example], spec: TaskSpec) -> np.ndarray:
    """Demo-tower encodings, one row per example in input order."""
    if not examples:
        return np.zeros((0, params.dim))
    return np.stack([encode_demo(params, e, spec) for e in examples])


def accumulate_tower_grads(
    tower: TowerParams,
    tape: EncodingTape,
    grad_output: np.ndarray,
    grad_embeddings: np.ndarray,
    grad_projection: np.ndarray,
) -> None:
    """Backprop one encoding's output gradient into shared gradient buffers."""
    grad_projection += np.outer(grad_output, tape.pooled)
    grad_pooled = tower.projection.T @ grad_output
    share = grad_pooled / len(tape.token_indices)
    np.add.at(grad_embeddings, tape.token_indices, share)


def init_params(vocab: Vocabulary, dim: int, seed: int) -> BiEncoderParams:
    """Seeded initialization: uniform(-0.05, 0.05) embeddings and a
    near-identity projection, drawn once and copied into both towers.

    Starting the towers identical mirrors warm-starting both encoders from
    one pretrained model: self-similar text then scores positive from step
    zero, and the towers diverge only through training.
    """
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    proj = np.eye(dim) + rng.uniform(-0.01, 0.01, size=(dim, dim))
    return BiEncoderParams(
        query_tower=TowerParams(emb.copy(), proj.copy()),
        demo_tower=TowerParams(emb.copy(), proj.copy()),
        dim=dim,
        vocab=vocab,
    )


def _write_matrix(parts: list[bytes], matrix: np.ndarray) -> None:
    parts.append(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def checkpoint_bytes(params: BiEncoderParams) -> bytes:
    """Serialized form: magic, version, V, d, four float32 matrices
    (query embeddings, query projection, demo embeddings, demo projection),
    then length-prefixed UTF-8 vocabulary terms."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(params.vocab), params.dim)]
    for tower in (params.query_tower, params.demo_tower):
        _write_matrix(parts, tower.embeddings)
        _write_matrix(parts, tower.projection)
    for term in params.vocab.terms:
        raw = term.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def save_checkpoint(params: BiEncoderParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> BiEncoderParams:
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC.decode()}")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    size, dim = reader.u32(), reader.u32()
    towers = []
    for _ in range(2):
        emb = np.frombuffer(reader.take(size * dim * 4), dtype="<f4").reshape(size, dim)
        proj = np.frombuffer(reader.take(dim * dim * 4), dtype="<f4").reshape(dim, dim)
        towers.append(TowerParams(emb.astype(np.float64), proj.astype(np.float64)))
    terms = []
    for _ in range(size):
        terms.append(reader.take(reader.u32()).decode("utf-8"))
    if reader.pos != len(reader.data):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    if terms[0] != UNK_TOKEN:
        raise FormatError(f"{path}: vocabulary does not reserve the unknown token")
    vocab = Vocabulary(terms[1:])
    return BiEncoderParams(query_tower=towers[0], demo_tower=towers[1], dim=dim, vocab=vocab)


def params_fingerprint(params: BiEncoderParams) -> str:
    """Hash tying indexes to the exact encoder that produced them."""
    return hashlib.sha256(checkpoint_bytes(params)).hexdigest()[:16]
