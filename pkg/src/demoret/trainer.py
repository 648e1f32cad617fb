"""Listwise ranking objective, AdamW updates, and the mining training loop.

The objective mixes a rank-weighted pairwise loss (weight max(0, 1/r_i - 1/r_j)
per ordered pair) with an in-batch softmax contrastive loss over every sampled
candidate in the batch. Training alternates: fit on the current candidate
pools, then re-mine each query's pool as the encoder's own top-K over the full
task split, score the new pairs, and repeat.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as enc
from .bm25 import CandidateInitializer
from .corpus import DatasetRegistry, Example, draw_examples, task_probabilities
from .errors import ConfigError, ContractError, StateError
from .feedback import (
    CandidateSet,
    ScoreCache,
    Scorer,
    rank_candidates,
    score_candidate_set,
    write_candidate_sets,
)

@dataclass
class TrainConfig:
    """Training hyper-parameters; defaults follow the published recipe,
    desk-scale runs override batch size, epochs, and learning rate."""

    loss_weight: float = 0.8  # mixing weight on the ranking term
    alpha: float = 0.5
    learning_rate: float = 1e-4
    warmup_steps: int = 500
    batch_size: int = 16
    l_sampled: int = 8
    k_candidates: int = 50
    iterations: int = 3
    epochs_initial: int = 30
    epochs_per_iteration: int = 10
    seed: int = 0
    dim: int = 32
    weight_decay: float = 0.0
    max_train_per_task: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigError("loss_weight must be in [0, 1]")
        if self.l_sampled > self.k_candidates:
            raise ConfigError("l_sampled must be <= k_candidates")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1 or self.l_sampled < 1 or self.dim < 1:
            raise ConfigError("batch_size, l_sampled, and dim must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def loss_rank(sims: Sequence[float], ranks: Sequence[int]) -> tuple[float, np.ndarray]:
    """Rank-weighted pairwise loss and its exact gradient w.r.t. sims."""
    sims = np.asarray(sims, dtype=float)
    ranks = np.asarray(ranks, dtype=int)
    n = sims.shape[0]
    if n == 0 or ranks.shape[0] != n:
        raise ContractError("sims and ranks must be equal-length and non-empty")
    if sorted(ranks.tolist()) != list(range(1, n + 1)):
        raise ContractError("ranks must be a permutation of 1..n")
    inv = 1.0 / ranks
    weights = np.maximum(0.0, inv[:, None] - inv[None, :])  # w[i, j]
    diffs = sims[None, :] - sims[:, None]  # sim_j - sim_i
    value = float(np.sum(weights * np.logaddexp(0.0, diffs)))
    sig = weights / (1.0 + np.exp(-diffs))
    grad = sig.sum(axis=0) - sig.sum(axis=1)
    return value, grad


def loss_inbatch(
    batch_sims: np.ndarray, positive_index: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy against each query's rank-1 candidate column."""
    sims = np.asarray(batch_sims, dtype=float)
    if sims.ndim != 2:
        raise ContractError("batch_sims must be 2-dimensional")
    n_queries, n_cols = sims.shape
    pos = np.asarray(positive_index, dtype=int)
    if pos.shape[0] != n_queries:
        raise ContractError("one positive index required per query")
    if np.any(pos < 0) or np.any(pos >= n_cols):
        raise ContractError("positive index out of range")
    peak = sims.max(axis=1, keepdims=True)
    expd = np.exp(sims - peak)
    denom = expd.sum(axis=1, keepdims=True)
    log_softmax = sims - peak - np.log(denom)
    value = float(-log_softmax[np.arange(n_queries), pos].mean())
    grad = expd / denom
    grad[np.arange(n_queries), pos] -= 1.0
    return value, grad / n_queries


def loss_total(rank_value: float, ib_value: float, loss_weight: float) -> float:
    if not 0.0 <= loss_weight <= 1.0:
        raise ContractError("loss_weight must be in [0, 1]")
    return loss_weight * rank_value + (1.0 - loss_weight) * ib_value


@dataclass
class OptimizerState:
    """AdamW moments, one slot per named parameter matrix."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _param_map(params: enc.BiEncoderParams) -> dict[str, np.ndarray]:
    return {
        "query_embeddings": params.query_tower.embeddings,
        "query_projection": params.query_tower.projection,
        "demo_embeddings": params.demo_tower.embeddings,
        "demo_projection": params.demo_tower.projection,
    }


def init_optimizer(params: enc.BiEncoderParams) -> OptimizerState:
    arrays = _param_map(params)
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(a) for k, a in arrays.items()},
        v={k: np.zeros_like(a) for k, a in arrays.items()},
    )


def zero_grads(params: enc.BiEncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(a) for k, a in _param_map(params).items()}


def apply_update(
    params: enc.BiEncoderParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """One AdamW step with linear warmup then a constant rate; decoupled
    weight decay; parameters mutated in place."""
    state.step += 1
    lr = config.learning_rate * min(1.0, state.step / max(1, config.warmup_steps))
    arrays = _param_map(params)
    for name, grad in grads.items():
        theta = arrays[name]
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * grad * grad
        m_hat = state.m[name] / (1 - state.beta1**state.step)
        v_hat = state.v[name] / (1 - state.beta2**state.step)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + config.weight_decay * theta)


@dataclass
class StepStats:
    step: int
    loss_total: float
    loss_rank: float
    loss_ib: float


@dataclass
class MiningStats:
    """Per-iteration pool turnover: how many previous rank-1 candidates the
    freshly mined pools retained, and the mean old/new overlap fraction."""

    iteration: int
    rank1_retention: float
    mean_overlap: float


@dataclass
class TrainReport:
    steps: list[StepStats] = field(default_factory=list)
    mining: list[MiningStats] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "steps": [asdict(s) for s in self.steps],
                "mining": [asdict(m) for m in self.mining],
                "wall_clock_s": self.wall_clock_s,
            },
            indent=2,
        )


def batch_objective(
    params: enc.BiEncoderParams,
    registry: DatasetRegistry,
    batch: Sequence[Example],
    sampled: dict[str, list[tuple[Example, int]]],
    config: TrainConfig,
) -> tuple[float, float, float, dict[str, np.ndarray]]:
    """Forward + backward over one batch.

    ``sampled`` maps each query id to its drawn (candidate, rank) pairs, ranks
    recomputed over the drawn subset. Returns (total, rank, in-batch) loss
    values and gradients for every parameter matrix.
    """
    spec = registry.task(batch[0].task_id)
    query_vecs, query_tapes = [], []
    demo_vecs, demo_tapes = [], []
    col_slices: list[slice] = []
    ranks_per_query: list[list[int]] = []
    positives: list[int] = []
    for example in batch:
        u, tape = enc.encode_query(params, example.input, spec, with_tape=True)
        query_vecs.append(u)
        query_tapes.append(tape)
        start = len(demo_vecs)
        pairs = sampled[example.example_id]
        for candidate, _rank in pairs:
            v, dtape = enc.encode_demo(params, candidate, spec, with_tape=True)
            demo_vecs.append(v)
            demo_tapes.append(dtape)
        col_slices.append(slice(start, len(demo_vecs)))
        ranks = [rank for _, rank in pairs]
        ranks_per_query.append(ranks)
        positives.append(start + ranks.index(1))

    queries = np.stack(query_vecs)
    demos = np.stack(demo_vecs)
    sims = queries @ demos.T

    ib_value, ib_grad = loss_inbatch(sims, positives)
    grad_sims = (1.0 - config.loss_weight) * ib_grad
    rank_values = []
    for qi, sl in enumerate(col_slices):
        value, grad = loss_rank(sims[qi, sl], ranks_per_query[qi])
        rank_values.append(value)
        grad_sims[qi, sl] += config.loss_weight * grad / len(batch)
    rank_value = float(np.mean(rank_values))
    total = loss_total(rank_value, ib_value, config.loss_weight)

    grad_queries = grad_sims @ demos
    grad_demos = grad_sims.T @ queries
    grads = zero_grads(params)
    for qi, tape in enumerate(query_tapes):
        enc.accumulate_tower_grads(
            params.query_tower, tape, grad_queries[qi], grads["query_embeddings"], grads["query_projection"]
        )
    for di, tape in enumerate(demo_tapes):
        enc.accumulate_tower_grads(
            params.demo_tower, tape, grad_demos[di], grads["demo_embeddings"], grads["demo_projection"]
        )
    return total, rank_value, ib_value, grads


def sample_step_candidates(
    batch: Sequence[Example],
    candidate_sets: dict[tuple[str, str], CandidateSet],
    registry: DatasetRegistry,
    l_sampled: int,
    rng: np.random.Generator,
) -> dict[str, list[tuple[Example, int]]]:
    """Draw l candidates per query (all if fewer) and re-rank the draw by its
    cached scores. Candidate sets are keyed by (task_id, example_id) because
    example ids are only unique within a task."""
    sampled: dict[str, list[tuple[Example, int]]] = {}
    for example in batch:
        cs = candidate_sets.get((example.task_id, example.example_id))
        if cs is None or not cs.entries:
            raise StateError(f"no scored candidate set for query {example.example_id!r}")
        take = min(l_sampled, len(cs.entries))
        # keep the draw order: the rank tie-break then varies per step instead
        # of consistently replaying the stored pool order
        idx = rng.choice(len(cs.entries), size=take, replace=False).tolist()
        entries = [cs.entries[i] for i in idx]
        ranks = rank_candidates([e.score for e in entries])
        sampled[example.example_id] = [
            (registry.example(example.task_id, e.candidate_id), rank)
            for e, rank in zip(entries, ranks)
        ]
    return sampled


def train_step(
    params: enc.BiEncoderParams,
    batch: Sequence[Example],
    candidate_sets: dict[tuple[str, str], CandidateSet],
    registry: DatasetRegistry,
    config: TrainConfig,
    opt_state: OptimizerState,
    rng: np.random.Generator,
) -> StepStats:
    """One optimizer update on a single-task batch."""
    sampled = sample_step_candidates(batch, candidate_sets, registry, config.l_sampled, rng)
    total, rank_value, ib_value, grads = batch_objective(params, registry, batch, sampled, config)
    apply_update(params, grads, opt_state, config)
    return StepStats(step=opt_state.step, loss_total=total, loss_rank=rank_value, loss_ib=ib_value)


def mine_candidates(
    params: enc.BiEncoderParams,
    registry: DatasetRegistry,
    task_id: str,
    k: int,
    pool: list[Example] | None = None,
) -> dict[str, list[str]]:
    """Each train example's top-K most similar non-self examples under the
    current encoder, over the whole task pool."""
    examples = pool if pool is not None else registry.split(task_id, "train")
    if not examples:
        raise StateError(f"task {task_id!r} has an empty train split")
    spec = registry.task(task_id)
    demo_matrix = enc.encode_corpus(params, examples, spec)
    query_matrix = np.stack([enc.encode_query(params, e.input, spec) for e in examples])
    sims = query_matrix @ demo_matrix.T
    np.fill_diagonal(sims, -np.inf)
    mined: dict[str, list[str]] = {}
    take = min(k, len(examples) - 1)
    for qi, example in enumerate(examples):
        order = np.argsort(-sims[qi], kind="stable")[:take]
        mined[example.example_id] = [examples[int(i)].example_id for i in order]
    return mined


def _steps_per_epoch(pools: dict[str, list[Example]], batch_size: int) -> int:
    total = sum(len(p) for p in pools.values())
    return max(1, math.ceil(total / batch_size))


def _score_pools(
    scorer: Scorer,
    registry: DatasetRegistry,
    pools: dict[str, list[Example]],
    id_pools: dict[str, dict[str, list[str]]],
    cache: ScoreCache,
    iteration: int,
) -> dict[tuple[str, str], CandidateSet]:
    sets: dict[tuple[str, str], CandidateSet] = {}
    for task_id in sorted(id_pools):
        for example in pools[task_id]:
            ids = id_pools[task_id][example.example_id]
            sets[(task_id, example.example_id)] = score_candidate_set(
                scorer, example, ids, registry, cache, iteration=iteration
            )
    return sets


def train(
    registry: DatasetRegistry,
    scorer: Scorer,
    config: TrainConfig,
    run_dir: str | Path | None = None,
) -> tuple[enc.BiEncoderParams, TrainReport]:
    """Full training: lexical candidate initialization, scoring, an initial
    fitting phase, then ``iterations`` rounds of mine / score / fit.

    When ``run_dir`` is given, writes config.json, candidates.iterN.jsonl,
    checkpoint.iterN.udr, and report.json there.
    """
    started = time.monotonic()
    seeds = np.random.SeedSequence(config.seed).generate_state(4)
    rng_subsample = np.random.default_rng(int(seeds[1]))
    rng_loop = np.random.default_rng(int(seeds[2]))

    task_ids = [t for t in registry.task_ids() if registry.split(t, "train")]
    if not task_ids:
        raise ConfigError("no task with a non-empty train split")
    pools: dict[str, list[Example]] = {}
    for task_id in task_ids:
        split = list(registry.split(task_id, "train"))
        cap = config.max_train_per_task
        if cap is not None and len(split) > cap:
            # fixed subset for the whole run, chosen once up front
            idx = sorted(rng_subsample.choice(len(split), size=cap, replace=False).tolist())
            split = [split[i] for i in idx]
        pools[task_id] = split
    probs = task_probabilities({t: len(p) for t, p in pools.items()}, config.alpha)

    vocab = enc.build_vocab(registry)
    params = enc.init_params(vocab, config.dim, int(seeds[0]))
    opt_state = init_optimizer(params)
    cache = ScoreCache()
    report = TrainReport()

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "config.json").write_text(
            json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8"
        )

    initializer = CandidateInitializer(registry)
    id_pools: dict[str, dict[str, list[str]]] = {}
    for task_id in task_ids:
        id_pools[task_id] = {
            e.example_id: initializer.init_candidates(e, config.k_candidates)
            for e in pools[task_id]
        }
    candidate_sets = _score_pools(scorer, registry, pools, id_pools, cache, iteration=0)
    _write_artifacts(run_path, candidate_sets, iteration=0)

    sorted_tasks = sorted(pools)
    prob_vec = np.array([probs[t] for t in sorted_tasks])

    def run_phase(epochs: int) -> None:
        steps = _steps_per_epoch(pools, config.batch_size) * epochs
        for _ in range(steps):
            task_id = sorted_tasks[int(rng_loop.choice(len(sorted_tasks), p=prob_vec))]
            batch = draw_examples(pools[task_id], config.batch_size, rng_loop)
            report.steps.append(
                train_step(params, batch, candidate_sets, registry, config, opt_state, rng_loop)
            )

    run_phase(config.epochs_initial)
    _write_checkpoint(run_path, params, iteration=0)

    for iteration in range(1, config.iterations + 1):
        retained, overlaps = [], []
        for task_id in task_ids:
            mined = mine_candidates(params, registry, task_id, config.k_candidates, pools[task_id])
            for example in pools[task_id]:
                old = candidate_sets[(task_id, example.example_id)]
                new_ids = mined[example.example_id]
                retained.append(1.0 if old.rank1_id() in new_ids else 0.0)
                overlaps.append(len(set(old.ids()) & set(new_ids)) / max(1, len(new_ids)))
            id_pools[task_id] = mined
        candidate_sets = _score_pools(scorer, registry, pools, id_pools, cache, iteration=iteration)
        report.mining.append(
            MiningStats(
                iteration=iteration,
                rank1_retention=float(np.mean(retained)),
                mean_overlap=float(np.mean(overlaps)),
            )
        )
        _write_artifacts(run_path, candidate_sets, iteration=iteration)
        run_phase(config.epochs_per_iteration)
        _write_checkpoint(run_path, params, iteration=iteration)

    report.wall_clock_s = time.monotonic() - started
    if run_path is not None:
        (run_path / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return params, report


def _write_artifacts(
    run_path: Path | None, sets: dict[tuple[str, str], CandidateSet], iteration: int
) -> None:
    if run_path is None:
        return
    # query ids are task-qualified in the store because example ids are only
    # unique within a task
    ordered = [
        CandidateSet(f"{task_id}/{sets[(task_id, qid)].query_id}", iteration, sets[(task_id, qid)].entries)
        for task_id, qid in sorted(sets)
    ]
    write_candidate_sets(ordered, run_path / f"candidates.iter{iteration}.jsonl")


def _write_checkpoint(run_path: Path | None, params: enc.BiEncoderParams, iteration: int) -> None:
    if run_path is not None:
        enc.save_checkpoint(params, run_path / f"checkpoint.iter{iteration}.udr")
