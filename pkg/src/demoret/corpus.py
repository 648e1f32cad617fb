"""Tasks, examples, templates, dataset I/O, and the multi-task batch sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, ParseError, TemplateError

KINDS = ("classification", "multi_choice", "generation")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class TemplateSpec:
    """Patterns used to render demonstrations and the query prefix.

    ``demo_pattern`` must contain ``{input}`` and ``{target}`` exactly once;
    ``query_pattern`` must contain ``{input}`` exactly once. ``joiner`` is
    placed between rendered demonstrations in a prompt.
    """

    demo_pattern: str
    query_pattern: str
    joiner: str = "\n"

    def __post_init__(self) -> None:
        if self.demo_pattern.count("{input}") != 1:
            raise TemplateError("demo_pattern must contain {input} exactly once")
        if self.demo_pattern.count("{target}") != 1:
            raise TemplateError("demo_pattern must contain {target} exactly once")
        if self.query_pattern.count("{input}") != 1:
            raise TemplateError("query_pattern must contain {input} exactly once")


@dataclass(frozen=True)
class TaskSpec:
    """One task: its kind, instruction, label space, template, and budget.

    ``max_target_len`` caps the generated target (generation tasks only) and
    ``context_budget`` caps the whole prompt, both in toolkit tokens.
    """

    task_id: str
    kind: str
    instruction: str
    template: TemplateSpec
    verbalizers: tuple[str, ...] = ()
    max_target_len: int | None = None
    context_budget: int = 1024
    name: str = ""

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ConfigError("task_id must be non-empty")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification":
            if not self.verbalizers:
                raise ConfigError(f"task {self.task_id}: classification requires verbalizers")
            if len(set(self.verbalizers)) != len(self.verbalizers):
                raise ConfigError(f"task {self.task_id}: verbalizers must be distinct")
        if self.kind == "generation":
            if self.max_target_len is None or self.max_target_len < 1:
                raise ConfigError(f"task {self.task_id}: generation requires max_target_len >= 1")
        if self.context_budget < (self.max_target_len or 0) + 1:
            raise ConfigError(f"task {self.task_id}: context_budget too small for max_target_len")
        if not self.name:
            object.__setattr__(self, "name", self.task_id)


@dataclass(frozen=True)
class Example:
    """One input/target instance, identified by (task_id, example_id)."""

    task_id: str
    example_id: str
    input: str
    target: str
    choices: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.input:
            raise DataError(f"example {self.task_id}/{self.example_id}: input must be non-empty")


class DatasetRegistry:
    """Tasks plus their train/dev/test splits. Immutable once loaded."""

    def __init__(self) -> None:
        self.tasks: dict[str, TaskSpec] = {}
        self._splits: dict[tuple[str, str], list[Example]] = {}
        self._by_id: dict[tuple[str, str], Example] = {}

    def add_task(self, spec: TaskSpec) -> None:
        if spec.task_id in self.tasks:
            raise ConfigError(f"duplicate task_id {spec.task_id!r}")
        self.tasks[spec.task_id] = spec

    def task(self, task_id: str) -> TaskSpec:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise ConfigError(f"unknown task_id {task_id!r}") from None

    def add_example(self, example: Example, split: str) -> None:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        spec = self.task(example.task_id)
        key = (example.task_id, example.example_id)
        if key in self._by_id:
            raise DataError(f"duplicate example id {example.example_id!r} in task {example.task_id!r}")
        if spec.kind == "multi_choice":
            if not example.choices:
                raise DataError(f"example {example.example_id!r}: multi_choice requires choices")
            if example.target not in example.choices:
                raise DataError(f"example {example.example_id!r}: target not among choices")
        self._by_id[key] = example
        self._splits.setdefault((example.task_id, split), []).append(example)

    def split(self, task_id: str, split: str) -> list[Example]:
        self.task(task_id)
        return self._splits.get((task_id, split), [])

    def example(self, task_id: str, example_id: str) -> Example:
        try:
            return self._by_id[(task_id, example_id)]
        except KeyError:
            raise DataError(f"unknown example {example_id!r} in task {task_id!r}") from None

    def task_ids(self) -> list[str]:
        return sorted(self.tasks)


def load_registry(path: str | Path) -> DatasetRegistry:
    """Load task definitions from a registry JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "tasks" not in raw:
        raise ParseError(f"{path}: registry JSON must contain a 'tasks' list")
    registry = DatasetRegistry()
    for entry in raw["tasks"]:
        try:
            template = TemplateSpec(
                demo_pattern=entry["template"]["demo_pattern"],
                query_pattern=entry["template"]["query_pattern"],
                joiner=entry["template"].get("joiner", "\n"),
            )
            spec = TaskSpec(
                task_id=entry["task_id"],
                kind=entry["kind"],
                instruction=entry["instruction"],
                template=template,
                verbalizers=tuple(entry.get("verbalizers", ())),
                max_target_len=entry.get("max_target_len"),
                context_budget=entry.get("context_budget", 1024),
                name=entry.get("name", ""),
            )
        except KeyError as exc:
            raise ParseError(f"{path}: task entry missing field {exc}") from exc
        registry.add_task(spec)
    return registry


def registry_to_json(registry: DatasetRegistry) -> str:
    """Serialize the registry back to its canonical JSON form."""
    tasks = []
    for task_id in registry.task_ids():
        spec = registry.tasks[task_id]
        tasks.append(
            {
                "task_id": spec.task_id,
                "name": spec.name,
                "kind": spec.kind,
                "instruction": spec.instruction,
                "verbalizers": list(spec.verbalizers),
                "template": {
                    "demo_pattern": spec.template.demo_pattern,
                    "query_pattern": spec.template.query_pattern,
                    "joiner": spec.template.joiner,
                },
                "max_target_len": spec.max_target_len,
                "context_budget": spec.context_budget,
            }
        )
    return json.dumps({"tasks": tasks}, ensure_ascii=False, indent=2) + "\n"


def load_jsonl(path: str | Path, registry: DatasetRegistry, split: str = "train") -> int:
    """Append example records from a JSONL file to the declared split.

    Returns the number of examples loaded. Any malformed line, unknown task,
    or duplicate id aborts the load with an error naming the culprit.
    """
    path = Path(path)
    count = 0
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            try:
                example = Example(
                    task_id=rec["task"],
                    example_id=rec["id"],
                    input=rec["input"],
                    target=rec["target"],
                    choices=tuple(rec["choices"]) if "choices" in rec else None,
                )
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: record missing field {exc}") from exc
            registry.add_example(example, split)
            count += 1
    return count


def example_to_record(example: Example) -> dict:
    rec = {
        "task": example.task_id,
        "id": example.example_id,
        "input": example.input,
        "target": example.target,
    }
    if example.choices is not None:
        rec["choices"] = list(example.choices)
    return rec


def dump_jsonl(examples: Iterable[Example], path: str | Path) -> None:
    """Write examples in the canonical one-record-per-line form."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for example in examples:
            handle.write(json.dumps(example_to_record(example), ensure_ascii=False) + "\n")


def _substitute(pattern: str, values: dict[str, str]) -> str:
    # Single left-to-right pass so substituted text is never re-scanned for
    # placeholders it may happen to contain.
    out: list[str] = []
    i = 0
    while i < len(pattern):
        for key, val in values.items():
            marker = "{" + key + "}"
            if pattern.startswith(marker, i):
                out.append(val)
                i += len(marker)
                break
        else:
            out.append(pattern[i])
            i += 1
    return "".join(out)


def render_demo(example: Example, spec: TaskSpec) -> str:
    """Render one demonstration through the task's demo pattern."""
    return _substitute(spec.template.demo_pattern, {"input": example.input, "target": example.target})


def render_query(input_text: str, spec: TaskSpec) -> str:
    """Render the query prefix for a test input."""
    return _substitute(spec.template.query_pattern, {"input": input_text})


def task_probabilities(sizes: dict[str, int], alpha: float) -> dict[str, float]:
    """Smoothed multinomial task weights from per-task dataset sizes.

    With dataset shares q_i = n_i / sum(n), each task gets q_i**alpha
    renormalized: alpha=1 keeps raw proportions, alpha=0 is uniform, values
    in between damp the skew toward high-resource tasks.
    """
    if not sizes:
        raise ConfigError("no tasks with training data")
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    if any(n <= 0 for n in sizes.values()):
        raise ConfigError("task sizes must be positive")
    total = sum(sizes.values())
    weights = {tid: (n / total) ** alpha for tid, n in sizes.items()}
    norm = sum(weights.values())
    return {tid: w / norm for tid, w in weights.items()}


@dataclass
class TaskSampler:
    """Multinomial task distribution used to pick one task per batch."""

    probabilities: dict[str, float]
    alpha: float

    def __post_init__(self) -> None:
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"sampler probabilities sum to {total}, expected 1")

    def draw_task(self, rng: np.random.Generator) -> str:
        return self.draw_tasks(rng, 1)[0]

    def draw_tasks(self, rng: np.random.Generator, n: int) -> list[str]:
        ids = sorted(self.probabilities)
        probs = np.array([self.probabilities[t] for t in ids])
        picks = rng.choice(len(ids), size=n, p=probs)
        return [ids[int(i)] for i in picks]


def build_sampler(registry: DatasetRegistry, alpha: float) -> TaskSampler:
    sizes = {
        tid: len(registry.split(tid, "train"))
        for tid in registry.task_ids()
        if registry.split(tid, "train")
    }
    return TaskSampler(task_probabilities(sizes, alpha), alpha)


def draw_examples(pool: list[Example], batch_size: int, rng: np.random.Generator) -> list[Example]:
    """Uniform draw of batch_size examples; with replacement only if the
    pool is smaller than the batch."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    replace = len(pool) < batch_size
    idx = rng.choice(len(pool), size=batch_size, replace=replace)
    return [pool[int(i)] for i in idx]


def sample_batch(
    sampler: TaskSampler,
    registry: DatasetRegistry,
    batch_size: int,
    rng: np.random.Generator,
) -> list[Example]:
    """Draw one task from the sampler, then a batch from its train split."""
    task_id = sampler.draw_task(rng)
    return draw_examples(registry.split(task_id, "train"), batch_size, rng)
