"""Candidate scoring from language-model feedback and list-wise ranks.

A scorer exposes conditional likelihoods p(continuation | context). Candidate
usefulness is the likelihood of the query's gold target conditioned on one
rendered demonstration plus the rendered query prefix; classification and
multi-choice scores are normalized over the label space. Ranks are assigned
over whatever score list is presented, ties broken by insertion order.
"""

from __future__ import annotations

import abc
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

from .corpus import DatasetRegistry, Example, TaskSpec, render_demo, render_query
from .errors import ContractError, DataError, ScoringError
from .tokenization import tokenize


class Scorer(abc.ABC):
    """Deterministic conditional-likelihood oracle over (context, continuation)."""

    kind = "abstract"

    @abc.abstractmethod
    def cond_log_likelihood(self, context: str, continuation: str) -> float:
        """log p(continuation | context), finite and <= 0."""

    def cond_log_likelihoods(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        return [self.cond_log_likelihood(ctx, cont) for ctx, cont in pairs]

    def cond_likelihood(self, context: str, continuation: str) -> float:
        return math.exp(self.cond_log_likelihood(context, continuation))

    def _config(self) -> dict:
        return {}

    def fingerprint(self) -> str:
        payload = json.dumps({"kind": self.kind, **self._config()}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class OracleScorer(Scorer):
    """Test scorer whose likelihoods are a declared function of latent keys.

    Inputs are assumed to carry exactly one key token matching ``key_pattern``
    (e.g. "pak3b" -> key 3) and generation targets to echo the query's key.
    The rendered context therefore exposes the candidate keys followed by the
    query key. A continuation containing a key token is scored as a generation
    target: ``p_match`` when some demonstration shares the query key, else
    ``p_miss`` (``p_wrong`` if the continuation's key is not the query's).
    Otherwise the continuation is read as a verbalizer and scored by weighted
    voting: every demonstration votes for the label its key implies
    (verbalizers[key % n]), with weight ``match_weight`` when it shares the
    query key and 1 otherwise; likelihoods are softmax(votes).
    """

    kind = "oracle"

    def __init__(
        self,
        verbalizers: Sequence[str],
        key_pattern: str = r"k(\d+)",
        match_weight: float = 3.0,
        p_match: float = 0.85,
        p_miss: float = 0.08,
        p_wrong: float = 0.01,
    ):
        if not verbalizers:
            raise ContractError("OracleScorer requires a verbalizer list")
        self.verbalizers = [v.lower() for v in verbalizers]
        self.key_pattern = key_pattern
        self._rx = re.compile(key_pattern)
        self.match_weight = match_weight
        self.p_match = p_match
        self.p_miss = p_miss
        self.p_wrong = p_wrong

    def _config(self) -> dict:
        return {
            "verbalizers": self.verbalizers,
            "key_pattern": self.key_pattern,
            "match_weight": self.match_weight,
            "p_match": self.p_match,
            "p_miss": self.p_miss,
            "p_wrong": self.p_wrong,
        }

    def _keys(self, text: str) -> list[int]:
        return [int(m) for m in self._rx.findall(text)]

    def implied_label(self, key: int) -> str:
        return self.verbalizers[key % len(self.verbalizers)]

    def cond_log_likelihood(self, context: str, continuation: str) -> float:
        ctx_keys = self._keys(context)
        if not ctx_keys:
            return math.log(1.0 / len(self.verbalizers))
        query_key, demo_keys = ctx_keys[-1], ctx_keys[:-1]
        cont_keys = self._keys(continuation)
        if cont_keys:
            if cont_keys[-1] != query_key:
                return math.log(self.p_wrong)
            return math.log(self.p_match if query_key in demo_keys else self.p_miss)
        label = continuation.strip().rstrip(".").strip().lower()
        if label not in self.verbalizers:
            return math.log(self.p_wrong)
        votes = {v: 0.0 for v in self.verbalizers}
        for key in demo_keys:
            weight = self.match_weight if key == query_key else 1.0
            votes[self.implied_label(key)] += weight
        logits = np.array([votes[v] for v in self.verbalizers])
        logprobs = logits - _logsumexp(logits)
        return float(logprobs[self.verbalizers.index(label)])


class NGramScorer(Scorer):
    """Additive-smoothed word-level n-gram LM fit on training text."""

    kind = "ngram"
    BOS = "<s>"
    UNK = "<unk>"

    def __init__(self, n: int = 2, smoothing: float = 0.1):
        if n < 1:
            raise ContractError("n must be >= 1")
        if smoothing <= 0:
            raise ContractError("smoothing must be > 0")
        self.n = n
        self.smoothing = smoothing
        self._ngram_counts: dict[tuple[str, ...], int] = {}
        self._context_counts: dict[tuple[str, ...], int] = {}
        self._vocab: set[str] = {self.UNK}

    def fit(self, texts: Iterable[str]) -> "NGramScorer":
        for text in texts:
            tokens = [self.BOS] * (self.n - 1) + tokenize(text)
            self._vocab.update(tokens)
            for i in range(self.n - 1, len(tokens)):
                history = tuple(tokens[i - self.n + 1 : i])
                self._ngram_counts[history + (tokens[i],)] = (
                    self._ngram_counts.get(history + (tokens[i],), 0) + 1
                )
                self._context_counts[history] = self._context_counts.get(history, 0) + 1
        return self

    @classmethod
    def fit_registry(
        cls, registry: DatasetRegistry, n: int = 2, smoothing: float = 0.1
    ) -> "NGramScorer":
        """Fit on every task's rendered train demonstrations."""
        scorer = cls(n=n, smoothing=smoothing)
        texts = []
        for task_id in registry.task_ids():
            spec = registry.task(task_id)
            for example in registry.split(task_id, "train"):
                texts.append(spec.instruction + " " + render_demo(example, spec))
        return scorer.fit(texts)

    def vocab_size(self) -> int:
        return len(self._vocab)

    def _canon(self, token: str) -> str:
        return token if token in self._vocab else self.UNK

    def _token_logprob(self, history: tuple[str, ...], token: str) -> float:
        num = self._ngram_counts.get(history + (token,), 0) + self.smoothing
        den = self._context_counts.get(history, 0) + self.smoothing * self.vocab_size()
        return math.log(num / den)

    def cond_log_likelihood(self, context: str, continuation: str) -> float:
        history = [self.BOS] * (self.n - 1) + [self._canon(t) for t in tokenize(context)]
        total = 0.0
        for token in tokenize(continuation):
            token = self._canon(token)
            total += self._token_logprob(tuple(history[len(history) - self.n + 1 :]), token)
            history.append(token)
        return total

    def _config(self) -> dict:
        digest = hashlib.sha256(
            json.dumps(sorted((" ".join(k), v) for k, v in self._ngram_counts.items())).encode()
        ).hexdigest()[:16]
        return {"n": self.n, "smoothing": self.smoothing, "counts": digest}


class RemoteScorer(Scorer):
    """Client for the HTTP scoring service's JSON protocol.

    POSTs {"pairs": [{"context", "continuation"}]} to <base_url>/v1/score and
    expects {"log_likelihoods": [...], "model_fingerprint": "..."} of equal
    length.
    """

    kind = "remote"

    def __init__(self, base_url: str, client: httpx.Client | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)
        self._model_fingerprint: str | None = None

    def cond_log_likelihoods(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        body = {"pairs": [{"context": c, "continuation": y} for c, y in pairs]}
        try:
            resp = self._client.post(self.base_url + "/v1/score", json=body)
        except httpx.HTTPError as exc:
            raise ScoringError(f"scoring service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ScoringError(f"scoring service returned HTTP {resp.status_code}: {resp.text}")
        payload = resp.json()
        values = payload.get("log_likelihoods")
        if not isinstance(values, list) or len(values) != len(pairs):
            raise ContractError("scoring service response length mismatch")
        self._model_fingerprint = payload.get("model_fingerprint")
        return [float(v) for v in values]

    def cond_log_likelihood(self, context: str, continuation: str) -> float:
        return self.cond_log_likelihoods([(context, continuation)])[0]

    def model_fingerprint(self) -> str:
        if self._model_fingerprint is None:
            try:
                resp = self._client.get(self.base_url + "/v1/health")
            except httpx.HTTPError as exc:
                raise ScoringError(f"scoring service unreachable: {exc}") from exc
            if resp.status_code != 200:
                raise ScoringError(f"scoring service not ready: HTTP {resp.status_code}")
            self._model_fingerprint = resp.json()["model_fingerprint"]
        return self._model_fingerprint

    def _config(self) -> dict:
        return {"model_fingerprint": self.model_fingerprint()}


def _logsumexp(values: np.ndarray) -> float:
    peak = float(np.max(values))
    if peak == -math.inf:
        return -math.inf
    return peak + math.log(float(np.sum(np.exp(values - peak))))


def scoring_context(query: Example, candidate: Example, spec: TaskSpec) -> str:
    """The one-demonstration scoring prompt: rendered demo, joiner, query prefix."""
    return render_demo(candidate, spec) + spec.template.joiner + render_query(query.input, spec)


def score_gen(scorer: Scorer, query: Example, candidate: Example, spec: TaskSpec) -> float:
    """p(gold target | one candidate demonstration, query input)."""
    if spec.kind != "generation":
        raise ContractError(f"score_gen requires a generation task, got {spec.kind!r}")
    if candidate.example_id == query.example_id and candidate.task_id == query.task_id:
        raise ContractError("candidate must differ from the query")
    context = scoring_context(query, candidate, spec)
    try:
        return math.exp(scorer.cond_log_likelihood(context, query.target))
    except ScoringError:
        raise
    except Exception as exc:
        raise ScoringError(f"scorer failed on candidate {candidate.example_id!r}: {exc}") from exc


def score_cls(scorer: Scorer, query: Example, candidate: Example, spec: TaskSpec) -> float:
    """Gold-label likelihood normalized over the label space."""
    if spec.kind not in ("classification", "multi_choice"):
        raise ContractError(f"score_cls requires a labeled task, got {spec.kind!r}")
    if candidate.example_id == query.example_id and candidate.task_id == query.task_id:
        raise ContractError("candidate must differ from the query")
    labels = list(query.choices) if spec.kind == "multi_choice" else list(spec.verbalizers)
    if not labels:
        raise ContractError("label space is empty")
    if query.target not in labels:
        raise DataError(f"gold target {query.target!r} not in label space")
    context = scoring_context(query, candidate, spec)
    try:
        lls = np.array(scorer.cond_log_likelihoods([(context, label) for label in labels]))
    except ScoringError:
        raise
    except Exception as exc:
        raise ScoringError(f"scorer failed on candidate {candidate.example_id!r}: {exc}") from exc
    denom = _logsumexp(lls)
    if denom == -math.inf:
        raise ScoringError("all label likelihoods are zero (zero denominator)")
    return math.exp(float(lls[labels.index(query.target)]) - denom)


def rank_candidates(scores: Sequence[float]) -> list[int]:
    """Rank 1 = highest score; equal scores ranked by ascending position."""
    if not len(scores):
        raise ContractError("cannot rank an empty score list")
    arr = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ScoringError("scores must be finite")
    order = sorted(range(len(arr)), key=lambda i: (-arr[i], i))
    ranks = [0] * len(arr)
    for position, idx in enumerate(order):
        ranks[idx] = position + 1
    return ranks


@dataclass(frozen=True)
class ScoredCandidate:
    candidate_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class CandidateSet:
    """One query's scored candidate pool, versioned by mining iteration."""

    query_id: str
    iteration: int
    entries: tuple[ScoredCandidate, ...]

    def ids(self) -> list[str]:
        return [e.candidate_id for e in self.entries]

    def rank1_id(self) -> str:
        return min(self.entries, key=lambda e: e.rank).candidate_id


class ScoreCache:
    """(query_id, candidate_id, scorer fingerprint) -> score.

    Reads are safe to share; writes follow a single-writer contract.
    """

    def __init__(self) -> None:
        self._store: dict[tuple[str, str, str], float] = {}

    def get(self, query_id: str, candidate_id: str, fingerprint: str) -> float | None:
        return self._store.get((query_id, candidate_id, fingerprint))

    def put(self, query_id: str, candidate_id: str, fingerprint: str, score: float) -> None:
        self._store[(query_id, candidate_id, fingerprint)] = score

    def __len__(self) -> int:
        return len(self._store)


def score_candidate_set(
    scorer: Scorer,
    query: Example,
    ids: Sequence[str],
    registry: DatasetRegistry,
    cache: ScoreCache | None = None,
    iteration: int = 0,
) -> CandidateSet:
    """Score and rank one query's candidates, consulting the cache first.

    All-or-nothing: any unresolvable id or scoring failure aborts without
    emitting a set or polluting the cache.
    """
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate candidate ids for query {query.example_id!r}")
    if query.example_id in ids:
        raise ContractError(f"query {query.example_id!r} present in its own candidates")
    spec = registry.task(query.task_id)
    candidates = [registry.example(query.task_id, cid) for cid in ids]
    fingerprint = scorer.fingerprint()
    scores: list[float] = []
    staged: dict[str, float] = {}
    for candidate in candidates:
        cached = cache.get(query.example_id, candidate.example_id, fingerprint) if cache else None
        if cached is not None:
            scores.append(cached)
            continue
        if spec.kind == "generation":
            score = score_gen(scorer, query, candidate, spec)
        else:
            score = score_cls(scorer, query, candidate, spec)
        staged[candidate.example_id] = score
        scores.append(score)
    ranks = rank_candidates(scores)
    if cache is not None:
        for cid, score in staged.items():
            cache.put(query.example_id, cid, fingerprint, score)
    entries = tuple(
        ScoredCandidate(cid, score, rank) for cid, score, rank in zip(ids, scores, ranks)
    )
    return CandidateSet(query_id=query.example_id, iteration=iteration, entries=entries)


def write_candidate_sets(sets: Iterable[CandidateSet], path: str | Path) -> None:
    """Candidate-store JSONL: one {"query_id", "iteration", "candidates"} per line."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for cs in sets:
            rec = {
                "query_id": cs.query_id,
                "iteration": cs.iteration,
                "candidates": [
                    {"id": e.candidate_id, "score": e.score, "rank": e.rank} for e in cs.entries
                ],
            }
            handle.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_candidate_sets(path: str | Path) -> list[CandidateSet]:
    sets = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            rec = json.loads(line)
            entries = tuple(
                ScoredCandidate(c["id"], c["score"], c["rank"]) for c in rec["candidates"]
            )
            sets.append(CandidateSet(rec["query_id"], rec["iteration"], entries))
    return sets
