"""Inference: retrieval, budgeted selection, ordering, prompt assembly, and
evaluation of predictions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import dense_index as dix
from . import encoder as enc
from .corpus import DatasetRegistry, Example, TaskSpec, render_demo, render_query
from .errors import BudgetError, ContractError, StateError
from .feedback import Scorer
from .tokenization import count_tokens

CLASSIFICATION_DEMOS = 8


class BudgetWarning(UserWarning):
    """No demonstration fit under the context budget."""


@dataclass
class PromptPlan:
    task_id: str
    demonstrations: list[str]  # ordered example ids
    order_strategy: str
    rendered_prompt: str
    token_cost: int
    budget: int


@dataclass
class EvalResult:
    metric: str
    value: float
    n: int


def retrieve(
    params: enc.BiEncoderParams,
    index: dix.DenseIndex,
    x_test: str,
    spec: TaskSpec,
    k: int,
) -> list[tuple[str, float]]:
    """Query-tower encode the test input and search the task's dense index."""
    fingerprint = enc.params_fingerprint(params)
    if fingerprint != index.checkpoint_fingerprint:
        raise StateError(
            f"index fingerprint {index.checkpoint_fingerprint} does not match "
            f"checkpoint {fingerprint}; rebuild the index"
        )
    query_vec = enc.encode_query(params, x_test, spec)
    return dix.search(index, query_vec, k)


def reserve_tokens(spec: TaskSpec) -> int:
    """Tokens held back for the answer: the target cap for generation, the
    longest verbalizer otherwise."""
    if spec.kind == "generation":
        return spec.max_target_len or 1
    if spec.verbalizers:
        return max(1, max(count_tokens(v) for v in spec.verbalizers))
    return 1


def _prompt_text(demos: Sequence[Example], x_test: str, spec: TaskSpec) -> str:
    parts = [render_demo(d, spec) for d in demos]
    parts.append(render_query(x_test, spec))
    return spec.template.joiner.join(parts)


def _prompt_cost(demos: Sequence[Example], x_test: str, spec: TaskSpec) -> int:
    return count_tokens(_prompt_text(demos, x_test, spec)) + reserve_tokens(spec)


def select_demonstrations(
    ranked: Sequence[Example], spec: TaskSpec, x_test: str
) -> list[str]:
    """Pick how many of the ranked demonstrations to use.

    Classification and multi-choice take the first min(8, available); if even
    those overflow the budget, the greedy rule below applies as a fallback.
    Generation greedily extends the prefix while the assembled prompt plus the
    reserved answer tokens still fit the context budget; the prefix is maximal
    (the next demonstration would overflow).
    """
    if _prompt_cost([], x_test, spec) > spec.context_budget:
        raise BudgetError(
            f"test input alone exceeds the context budget of task {spec.task_id!r}"
        )
    if spec.kind in ("classification", "multi_choice"):
        chosen = list(ranked[: min(CLASSIFICATION_DEMOS, len(ranked))])
        if _prompt_cost(chosen, x_test, spec) <= spec.context_budget:
            return [e.example_id for e in chosen]
    chosen = []
    for demo in ranked:
        if _prompt_cost(chosen + [demo], x_test, spec) > spec.context_budget:
            break
        chosen.append(demo)
    if not chosen and len(ranked):
        warnings.warn(
            f"no demonstration fits the budget for task {spec.task_id!r}", BudgetWarning
        )
    return [e.example_id for e in chosen]


def order_demonstrations(
    demos: Sequence[str],
    strategy: str,
    scores: Sequence[float],
    seed: int = 0,
) -> list[str]:
    """ascending puts the least similar first (most similar next to the test
    input); descending is its exact reversal; random is a seeded shuffle."""
    if len(demos) != len(scores):
        raise ContractError("demos and scores must be aligned")
    if strategy == "ascending":
        order = sorted(range(len(demos)), key=lambda i: (scores[i], -i))
        return [demos[i] for i in order]
    if strategy == "descending":
        return list(reversed(order_demonstrations(demos, "ascending", scores)))
    if strategy == "random":
        shuffled = list(demos)
        np.random.default_rng(seed).shuffle(shuffled)
        return shuffled
    raise ContractError(f"unknown ordering strategy {strategy!r}")


def assemble_prompt(
    demos: Sequence[Example],
    x_test: str,
    spec: TaskSpec,
    order_strategy: str = "ascending",
) -> PromptPlan:
    """Render the ordered demonstrations plus the query prefix into a plan."""
    rendered = _prompt_text(demos, x_test, spec)
    token_cost = count_tokens(rendered) + reserve_tokens(spec)
    if token_cost > spec.context_budget:
        raise ContractError(
            f"assembled prompt costs {token_cost} tokens, over budget {spec.context_budget}"
        )
    return PromptPlan(
        task_id=spec.task_id,
        demonstrations=[d.example_id for d in demos],
        order_strategy=order_strategy,
        rendered_prompt=rendered,
        token_cost=token_cost,
        budget=spec.context_budget,
    )


def plan_prompt(
    ranked: Sequence[tuple[str, float]],
    registry: DatasetRegistry,
    task_id: str,
    x_test: str,
    order_strategy: str = "ascending",
    seed: int = 0,
) -> PromptPlan:
    """Select, order, and assemble from a (id, score)-ranked retrieval list."""
    spec = registry.task(task_id)
    examples = [registry.example(task_id, cid) for cid, _ in ranked]
    selected = select_demonstrations(examples, spec, x_test)
    score_by_id = {cid: score for cid, score in ranked}
    ordered = order_demonstrations(
        selected, order_strategy, [score_by_id[cid] for cid in selected], seed=seed
    )
    demos = [registry.example(task_id, cid) for cid in ordered]
    strategy_label = f"random:{seed}" if order_strategy == "random" else order_strategy
    return assemble_prompt(demos, x_test, spec, order_strategy=strategy_label)


def predict_label(scorer: Scorer, plan: PromptPlan, labels: Sequence[str]) -> str:
    """Argmax over label likelihoods given the assembled prompt; ties go to
    the earliest label."""
    if not labels:
        raise ContractError("label space is empty")
    lls = scorer.cond_log_likelihoods([(plan.rendered_prompt, label) for label in labels])
    best = max(range(len(labels)), key=lambda i: (lls[i], -i))
    return labels[best]


def evaluate(predictions: Sequence[str], golds: Sequence[Example], metric: str) -> EvalResult:
    """accuracy: exact match of predicted vs gold verbalizer;
    exact_match: whitespace-normalized string equality."""
    if len(predictions) != len(golds):
        raise ContractError("predictions and golds must be equal length")
    if not golds:
        raise ContractError("cannot evaluate an empty set")
    if metric == "accuracy":
        correct = sum(1 for p, g in zip(predictions, golds) if p == g.target)
    elif metric == "exact_match":
        correct = sum(
            1
            for p, g in zip(predictions, golds)
            if " ".join(p.split()) == " ".join(g.target.split())
        )
    else:
        raise ContractError(f"unknown metric {metric!r}")
    return EvalResult(metric=metric, value=correct / len(golds), n=len(golds))


Retriever = Callable[[Example, int], list[tuple[str, float]]]


def run_label_eval(
    retriever: Retriever,
    registry: DatasetRegistry,
    task_id: str,
    scorer: Scorer,
    split: str = "test",
    k: int = 50,
    order_strategy: str = "ascending",
    seed: int = 0,
) -> EvalResult:
    """Retrieve, plan, and score-readout every example of a labeled split."""
    spec = registry.task(task_id)
    if spec.kind not in ("classification", "multi_choice"):
        raise ContractError("run_label_eval requires a labeled task")
    examples = registry.split(task_id, split)
    predictions = []
    for example in examples:
        ranked = retriever(example, k)
        plan = plan_prompt(ranked, registry, task_id, example.input, order_strategy, seed)
        labels = list(example.choices) if spec.kind == "multi_choice" else list(spec.verbalizers)
        predictions.append(predict_label(scorer, plan, labels))
    return evaluate(predictions, examples, "accuracy")
