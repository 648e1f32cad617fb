"""Byte-level causal transformer scoring conditional log-likelihoods.

The model is constructed from a seed, not downloaded: a small decoder-only
transformer over raw UTF-8 bytes, run in float64 with a single compute thread
so repeated requests return bit-identical values. It is a genuine
autoregressive LM, so log-likelihoods obey the chain rule exactly.
"""

from __future__ import annotations

import hashlib
import math

import torch
from torch import nn

BOS = 256
VOCAB = 257
DEFAULT_SEED = 0
DEFAULT_MAX_BYTES = 512
MODEL_MAX_LEN = 513  # BOS + the longest scorable context+continuation


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        attended, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        x = x + attended
        return x + self.ff(self.ln2(x))


class ByteLM(nn.Module):
    """Decoder-only transformer over bytes with a BOS token."""

    def __init__(self, seed: int = DEFAULT_SEED, d_model: int = 48, n_heads: int = 4,
                 n_layers: int = 2, d_ff: int = 96):
        super().__init__()
        torch.manual_seed(seed)
        self.seed = seed
        self.max_len = MODEL_MAX_LEN
        self.embed = nn.Embedding(VOCAB, d_model)
        self.pos = nn.Embedding(MODEL_MAX_LEN, d_model)
        self.blocks = nn.ModuleList([_Block(d_model, n_heads, d_ff) for _ in range(n_layers)])
        self.ln_out = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, VOCAB)
        self.double()
        self.eval()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        n = ids.shape[1]
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        x = self.embed(ids) + self.pos(torch.arange(n)).unsqueeze(0)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_out(x))


class Scorer:
    """Wraps a ByteLM with the request-level scoring semantics."""

    def __init__(self, seed: int = DEFAULT_SEED, max_bytes: int = DEFAULT_MAX_BYTES):
        if not 1 <= max_bytes <= DEFAULT_MAX_BYTES:
            raise ValueError(f"max_bytes must be in [1, {DEFAULT_MAX_BYTES}]")
        torch.set_num_threads(1)
        self.max_bytes = max_bytes  # request limit, not a model property
        self.model = ByteLM(seed=seed)
        self._fingerprint = self._compute_fingerprint(seed)

    def _compute_fingerprint(self, seed: int) -> str:
        digest = hashlib.sha256()
        digest.update(f"byte-lm:{seed}".encode())
        for name, tensor in sorted(self.model.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()[:16]

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    def pair_length(self, context: str, continuation: str) -> int:
        return len(context.encode("utf-8")) + len(continuation.encode("utf-8"))

    @torch.no_grad()
    def log_likelihood(self, context: str, continuation: str) -> float:
        """Sum of per-byte log-probabilities of the continuation given the
        context; 0.0 for the empty continuation."""
        cont = continuation.encode("utf-8")
        if not cont:
            return 0.0
        ctx = context.encode("utf-8")
        ids = torch.tensor([[BOS, *ctx, *cont]], dtype=torch.long)
        logits = self.model(ids)
        logits[..., BOS] = -math.inf  # BOS is never a continuation byte
        logprobs = torch.log_softmax(logits, dim=-1)
        total = 0.0
        offset = len(ctx)  # position predicting the first continuation byte
        for i, byte in enumerate(cont):
            total += float(logprobs[0, offset + i, byte])
        return total

    def score_pairs(self, pairs: list[tuple[str, str]]) -> list[float]:
        return [self.log_likelihood(c, y) for c, y in pairs]


def parse_model_spec(spec: str) -> int:
    """SCORER_MODEL follows 'byte:<seed>'; bare 'byte' means seed 0."""
    if spec in ("", "byte"):
        return DEFAULT_SEED
    prefix, _, seed = spec.partition(":")
    if prefix != "byte" or not seed.lstrip("-").isdigit():
        raise ValueError(f"unsupported model spec {spec!r}; expected 'byte:<seed>'")
    return int(seed)
