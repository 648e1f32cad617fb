"""Synthetic latent-key task family for end-to-end diagnostics.

Every example carries a latent integer key, surfaced as one alias token (e.g.
"pak3b" for key 3, alias b). A task's key group shares the key across several
aliases, so lexical overlap only ever sees one alias while the oracle scorer
and the analytic ground truth see the key itself. Labels are key-determined
(verbalizers[key % n]); generation targets echo the example's alias token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import DatasetRegistry, Example, TaskSpec, TemplateSpec
from .feedback import OracleScorer

VERBALIZERS = ("alpha", "beta", "gamma", "delta")
ALIAS_LETTERS = "abcdefgh"


@dataclass
class SyntheticFixture:
    registry: DatasetRegistry
    keys: dict[tuple[str, str], int] = field(default_factory=dict)
    verbalizers: tuple[str, ...] = VERBALIZERS

    def key_of(self, example: Example) -> int:
        return self.keys[(example.task_id, example.example_id)]

    def matching_train_ids(self, task_id: str, query: Example) -> set[str]:
        """Train examples sharing the query's key, the oracle's argmax set."""
        key = self.key_of(query)
        return {
            e.example_id
            for e in self.registry.split(task_id, "train")
            if self.keys[(task_id, e.example_id)] == key and e.example_id != query.example_id
        }

    def oracle_scorer(self) -> OracleScorer:
        return OracleScorer(verbalizers=list(self.verbalizers))


def _alias_token(prefix: str, key: int, alias: int) -> str:
    return f"{prefix}k{key}{ALIAS_LETTERS[alias]}"


def _make_task(
    registry: DatasetRegistry,
    fixture: SyntheticFixture,
    rng: np.random.Generator,
    task_id: str,
    prefix: str,
    kind: str,
    n_keys: int,
    group_train: int,
    group_test: int,
    n_aliases: int,
    filler_vocab: int,
    fillers_per_input: int,
) -> None:
    if kind == "generation":
        spec = TaskSpec(
            task_id=task_id,
            kind="generation",
            instruction=f"echo the key token of sample family {prefix}:",
            template=TemplateSpec("{input}\nout: {target}", "{input}\nout:", "\n"),
            max_target_len=4,
            context_budget=170,
        )
    else:
        spec = TaskSpec(
            task_id=task_id,
            kind="classification",
            instruction=f"label the sample from family {prefix}:",
            template=TemplateSpec("{input}\nlabel: {target}", "{input}\nlabel:", "\n"),
            verbalizers=VERBALIZERS,
            context_budget=300,
        )
    registry.add_task(spec)

    def make_example(key: int, ordinal: int, split: str) -> None:
        alias = int(rng.integers(n_aliases))
        token = _alias_token(prefix, key, alias)
        fillers = rng.choice(filler_vocab, size=fillers_per_input, replace=False)
        text = token + " " + " ".join(f"w{int(f)}" for f in fillers)
        if kind == "generation":
            target = f"echo {token}"
        else:
            target = VERBALIZERS[key % len(VERBALIZERS)]
        example_id = f"{split}-{ordinal:03d}"
        registry.add_example(
            Example(task_id=task_id, example_id=example_id, input=text, target=target), split
        )
        fixture.keys[(task_id, example_id)] = key

    train_ord = test_ord = 0
    for key in range(n_keys):
        for _ in range(group_train):
            make_example(key, train_ord, "train")
            train_ord += 1
        for _ in range(group_test):
            make_example(key, test_ord, "test")
            test_ord += 1


def make_fixture(
    seed: int = 0,
    n_keys: int = 8,
    group_train: int = 12,
    group_test: int = 2,
    n_aliases: int = 4,
    filler_vocab: int = 40,
    fillers_per_input: int = 6,
    cls_tasks: int = 2,
    gen_tasks: int = 1,
) -> SyntheticFixture:
    rng = np.random.default_rng(seed)
    registry = DatasetRegistry()
    fixture = SyntheticFixture(registry=registry)
    prefixes = iter("pqrstuv")
    for i in range(cls_tasks):
        prefix = next(prefixes)
        _make_task(
            registry, fixture, rng, f"syn-cls-{i}", prefix, "classification",
            n_keys, group_train, group_test, n_aliases, filler_vocab, fillers_per_input,
        )
    for i in range(gen_tasks):
        prefix = next(prefixes)
        _make_task(
            registry, fixture, rng, f"syn-gen-{i}", prefix, "generation",
            n_keys, group_train, group_test, n_aliases, filler_vocab, fillers_per_input,
        )
    return fixture
