"""Command-line entry point wiring the modules into reproducible runs.

Subcommands: prepare, train, index, retrieve, evaluate, baseline, synth.
Exit codes: 0 success, 2 input error, 3 missing artifact, 4 internal error.
Set UDR_LOG to control log verbosity.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import dense_index as dix
from . import encoder as enc
from . import pipeline, synthetic, trainer
from .bm25 import build_index, bm25_top_k
from .corpus import (
    DatasetRegistry,
    dump_jsonl,
    load_jsonl,
    load_registry,
    registry_to_json,
)
from .errors import ArtifactError, DemoretError, InputError
from .feedback import NGramScorer, OracleScorer, RemoteScorer, Scorer

log = logging.getLogger("demoret")


@dataclass
class RunManifest:
    """Replay record written before any long computation starts."""

    command: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int
    version: str = __version__
    started_at: str = field(
        default_factory=lambda: datetime.datetime.now(datetime.timezone.utc).isoformat()
    )

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"manifest.{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing {what}: {path}")
    return path


def _load_run_registry(run_dir: Path) -> DatasetRegistry:
    registry = load_registry(_require(run_dir / "registry.json", "prepared registry"))
    for data_file in sorted(run_dir.glob("data.*.jsonl")):
        split = data_file.name.split(".")[1]
        load_jsonl(data_file, registry, split)
    return registry


def _make_scorer(args: argparse.Namespace, registry: DatasetRegistry) -> Scorer:
    if args.scorer == "oracle":
        verbalizers: list[str] = []
        for task_id in registry.task_ids():
            for verb in registry.task(task_id).verbalizers:
                if verb not in verbalizers:
                    verbalizers.append(verb)
        if not verbalizers:
            raise InputError("oracle scorer requires at least one task with verbalizers")
        return OracleScorer(verbalizers=verbalizers)
    if args.scorer == "ngram":
        return NGramScorer.fit_registry(registry)
    if args.scorer == "remote":
        if not args.remote_url:
            raise InputError("--scorer remote requires --remote-url")
        return RemoteScorer(args.remote_url)
    raise InputError(f"unknown scorer {args.scorer!r}")


def cmd_prepare(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    registry = load_registry(Path(args.registry))
    counts: dict[tuple[str, str], int] = {}
    split_files: dict[str, list[Path]] = {}
    for spec in args.data:
        path_str, _, split = spec.partition(":")
        split = split or "train"
        path = _require(Path(path_str), "data file")
        n = load_jsonl(path, registry, split)
        split_files.setdefault(split, []).append(path)
        for task_id in registry.task_ids():
            n_split = len(registry.split(task_id, split))
            if n_split:
                counts[(task_id, split)] = n_split
        log.info("loaded %d examples from %s into split %s", n, path, split)
    manifest = RunManifest(
        command="prepare",
        config={"registry": str(args.registry), "data": list(args.data)},
        inputs=[str(args.registry)] + [str(p) for ps in split_files.values() for p in ps],
        outputs=[str(out_dir)],
        seed=args.seed,
    )
    manifest.write(out_dir)
    (out_dir / "registry.json").write_text(registry_to_json(registry), encoding="utf-8")
    for split in sorted(split_files):
        examples = [
            e for tid in registry.task_ids() for e in registry.split(tid, split)
        ]
        dump_jsonl(examples, out_dir / f"data.{split}.jsonl")
    report = {
        "tasks": len(registry.tasks),
        "examples": {f"{tid}/{split}": n for (tid, split), n in sorted(counts.items())},
    }
    (out_dir / "validation.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report, indent=2))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    registry = _load_run_registry(run_dir)
    raw = {}
    if args.config:
        raw = json.loads(_require(Path(args.config), "train config").read_text(encoding="utf-8"))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.iterations is not None:
        raw["iterations"] = args.iterations
    config = trainer.TrainConfig.from_dict(raw)
    scorer = _make_scorer(args, registry)
    out_dir = Path(args.out) if args.out else run_dir
    manifest = RunManifest(
        command="train",
        config=config.to_dict(),
        inputs=[str(run_dir)],
        outputs=[str(out_dir)],
        seed=config.seed,
    )
    manifest.write(out_dir)
    _, report = trainer.train(registry, scorer, config, run_dir=out_dir)
    log.info(
        "training finished: %d steps in %.1fs", len(report.steps), report.wall_clock_s
    )
    print(f"trained {len(report.steps)} steps; artifacts in {out_dir}")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    registry = _load_run_registry(run_dir)
    params = enc.load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    out_dir = Path(args.out) if args.out else run_dir
    task_ids = [args.task] if args.task else [
        t for t in registry.task_ids() if registry.split(t, "train")
    ]
    manifest = RunManifest(
        command="index",
        config={"checkpoint": str(args.checkpoint), "tasks": task_ids},
        inputs=[str(run_dir), str(args.checkpoint)],
        outputs=[str(out_dir)],
        seed=args.seed,
    )
    manifest.write(out_dir)
    for task_id in task_ids:
        index = dix.build(params, registry, task_id)
        path = out_dir / f"index.{task_id}.udx"
        dix.save(index, path)
        log.info("indexed %d examples for task %s -> %s", len(index.ids), task_id, path)
    return 0


def _dense_retriever(params, index, registry, task_id):
    spec = registry.task(task_id)

    def func(example, k):
        return pipeline.retrieve(params, index, example.input, spec, k)

    return func


def _bm25_retriever(registry, task_id):
    split = registry.split(task_id, "train")
    index = build_index([(e.example_id, e.input) for e in split])

    def func(example, k):
        hits = [(cid, s) for cid, s in bm25_top_k(index, example.input, k + 1)
                if cid != example.example_id]
        return hits[:k]

    return func


def _random_retriever(registry, task_id, seed):
    split = registry.split(task_id, "train")
    rng = np.random.default_rng(seed)

    def func(example, k):
        pool = [e.example_id for e in split if e.example_id != example.example_id]
        take = min(k, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        return [(pool[int(i)], 0.0) for i in idx]

    return func


def _retriever_for(args, registry, task_id):
    if args.retriever == "dense":
        params = enc.load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
        index = dix.load(_require(Path(args.index), "dense index"))
        return _dense_retriever(params, index, registry, task_id)
    if args.retriever == "bm25":
        return _bm25_retriever(registry, task_id)
    if args.retriever == "random":
        return _random_retriever(registry, task_id, args.seed)
    raise InputError(f"unknown retriever {args.retriever!r}")


def _emit_plans(args, registry, task_id, retriever, out_path: Path | None) -> int:
    spec = registry.task(task_id)
    queries = registry.split(task_id, args.split)
    if not queries:
        raise InputError(f"task {task_id!r} has no {args.split!r} split")
    lines = []
    for example in queries:
        ranked = retriever(example, args.k)
        plan = pipeline.plan_prompt(
            ranked, registry, task_id, example.input, args.order, args.seed
        )
        lines.append(
            json.dumps(
                {
                    "query": example.example_id,
                    "demos": plan.demonstrations,
                    "order": plan.order_strategy,
                    "prompt": plan.rendered_prompt,
                    "token_cost": plan.token_cost,
                },
                ensure_ascii=False,
            )
        )
    text = "\n".join(lines) + "\n"
    if out_path:
        out_path.write_text(text, encoding="utf-8")
        log.info("wrote %d prompt plans to %s", len(lines), out_path)
    else:
        sys.stdout.write(text)
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    registry = _load_run_registry(run_dir)
    args.retriever = "dense"
    retriever = _retriever_for(args, registry, args.task)
    out_path = Path(args.out) if args.out else None
    if out_path:
        RunManifest(
            command="retrieve",
            config={"task": args.task, "k": args.k, "order": args.order},
            inputs=[str(run_dir), str(args.checkpoint), str(args.index)],
            outputs=[str(out_path)],
            seed=args.seed,
        ).write(out_path.parent)
    return _emit_plans(args, registry, args.task, retriever, out_path)


def cmd_baseline(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    registry = _load_run_registry(run_dir)
    retriever = _retriever_for(args, registry, args.task)
    out_path = Path(args.out) if args.out else None
    if out_path:
        RunManifest(
            command="baseline",
            config={"task": args.task, "k": args.k, "retriever": args.retriever},
            inputs=[str(run_dir)],
            outputs=[str(out_path)],
            seed=args.seed,
        ).write(out_path.parent)
    return _emit_plans(args, registry, args.task, retriever, out_path)


def cmd_evaluate(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    registry = _load_run_registry(run_dir)
    spec = registry.task(args.task)
    golds = registry.split(args.task, args.split)
    if not golds:
        raise InputError(f"task {args.task!r} has no {args.split!r} split")
    if spec.kind == "generation":
        if not args.predictions:
            raise InputError(
                "generation tasks need --predictions (one prediction per line); "
                "the toolkit ships no generative LM"
            )
        preds = Path(args.predictions).read_text(encoding="utf-8").splitlines()
        result = pipeline.evaluate(preds, golds, "exact_match")
    else:
        retriever = _retriever_for(args, registry, args.task)
        scorer = _make_scorer(args, registry)
        result = pipeline.run_label_eval(
            retriever, registry, args.task, scorer,
            split=args.split, k=args.k, order_strategy=args.order, seed=args.seed,
        )
    print(json.dumps({"task": args.task, "metric": result.metric,
                      "value": result.value, "n": result.n}))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    fixture = synthetic.make_fixture(seed=args.seed)
    RunManifest(
        command="synth", config={"seed": args.seed}, inputs=[], outputs=[str(out_dir)],
        seed=args.seed,
    ).write(out_dir)
    registry = fixture.registry
    (out_dir / "registry.json").write_text(registry_to_json(registry), encoding="utf-8")
    for split in ("train", "test"):
        examples = [e for tid in registry.task_ids() for e in registry.split(tid, split)]
        dump_jsonl(examples, out_dir / f"data.{split}.jsonl")
    print(f"synthetic fixture written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demoret", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--scorer", choices=("oracle", "ngram", "remote"), default="oracle")
        p.add_argument("--remote-url", default=None)
        p.add_argument("--k", type=int, default=50)
        p.add_argument("--order", choices=("ascending", "descending", "random"),
                       default="ascending")
        p.add_argument("--split", default="test")

    p = sub.add_parser("prepare", help="validate inputs into a run directory")
    p.add_argument("--registry", required=True)
    p.add_argument("--data", nargs="+", required=True, metavar="PATH[:split]")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--run", required=True, help="prepared run directory")
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--out", default=None, help="artifact directory (default: run dir)")
    p.add_argument("--iterations", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build dense indexes from a checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="emit prompt plans with the dense retriever")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("baseline", help="emit prompt plans with a baseline retriever")
    p.add_argument("--run", required=True)
    p.add_argument("--retriever", choices=("random", "bm25", "dense"), required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--task", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="score a retriever's predictions on a split")
    p.add_argument("--run", required=True)
    p.add_argument("--retriever", choices=("random", "bm25", "dense"), default="dense")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--task", required=True)
    p.add_argument("--predictions", default=None)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write the synthetic diagnostic fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("UDR_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DemoretError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
