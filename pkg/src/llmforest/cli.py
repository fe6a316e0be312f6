"""Command-line entry point: ``llmforest {mask,impute,baseline,evaluate,bench}``.

Settings come from an optional JSON ``--config`` file and are overridden by
flags. Every command writes into ``<outdir>/<run-id>/`` together with
``config.json``, the resolved settings needed to repeat the run. On failure
an ``error.json`` record is written and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import IMPUTERS, KnnConfig
from .dataset import SchemaError, Table, attach_shadow, load_csv, load_schema, mask_and_split, read_shadow, \
    write_csv, write_shadow
from .evalbench import bench_neighbor_search, downstream_scores, evaluate
from .forest import ForestAborted, ForestConfig, VoteLedger, impute_all
from .llm import BackendConfig, BackendError, make_backend

logger = logging.getLogger("llmforest")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
VOTING = {"confidence": "confidence_weighted", "majority": "majority"}


class ConfigError(ValueError):
    """Settings are missing, inconsistent or point at absent files."""


@dataclass
class RunConfig:
    command: str
    seed: int
    outdir: str
    run_id: str
    workers: int = 1
    paths: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    missingness: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    resume: bool = False

    @property
    def run_dir(self) -> Path:
        return Path(self.outdir) / self.run_id

    def snapshot(self) -> dict:
        out = {"command": self.command, "seed": self.seed, "outdir": self.outdir, "run_id": self.run_id,
               "workers": self.workers}
        for name in ("paths", "forest", "backend", "missingness", "baseline", "bench"):
            if getattr(self, name):
                out[name] = getattr(self, name)
        return out


_PATH_FLAGS = ("input", "schema", "shadow", "imputed", "ledger", "truth", "split", "templates")
_FOREST_FLAGS = {"trees": "trees", "neighbors": "neighbors", "merge_levels": "merge_levels",
                 "sigma": "sigma", "steps": "steps", "temperature": "temperature"}
_BACKEND_FLAGS = {"backend": "kind", "endpoint": "endpoint", "model": "model", "audit_log": "audit_log"}
_MISSING_FLAGS = {"mechanism": "mechanism", "rate": "rate", "percentile": "percentile",
                  "split_ratio": "split_ratio", "split_order": "order"}
_REQUIRED_PATHS = {
    "mask": ("input", "schema"),
    "impute": ("input", "schema"),
    "baseline": ("input", "schema"),
    "evaluate": ("imputed", "input", "schema", "shadow"),
    "bench": (),
}


def _overlay(base: dict, args: argparse.Namespace, mapping: dict) -> dict:
    out = dict(base)
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    payload: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        payload = json.loads(path.read_text(encoding="utf-8"))
    seed = args.seed if args.seed is not None else payload.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (--seed or 'seed' in the config file)")
    paths = _overlay(payload.get("paths", {}), args, {p: p for p in _PATH_FLAGS})
    for name in _REQUIRED_PATHS[args.command]:
        if not paths.get(name):
            raise ConfigError(f"{args.command} needs --{name}")
    for name, value in paths.items():
        if name != "audit_log" and value and not Path(value).exists():
            raise ConfigError(f"{name} file {value} does not exist")
    if (paths.get("truth") is None) != (paths.get("split") is None):
        raise ConfigError("--truth and --split go together")

    forest = _overlay(payload.get("forest", {}), args, _FOREST_FLAGS)
    if getattr(args, "voting", None):
        forest["voting"] = VOTING[args.voting]
    backend = _overlay(payload.get("backend", {}), args, _BACKEND_FLAGS)
    config = RunConfig(
        command=args.command,
        seed=int(seed),
        outdir=args.outdir or payload.get("outdir", "runs"),
        run_id=args.run_id or payload.get("run_id", args.command),
        workers=args.workers if args.workers is not None else payload.get("workers", 1),
        paths=paths,
        resume=bool(getattr(args, "resume", False)),
    )
    if config.workers < 1:
        raise ConfigError("--workers must be at least 1")
    if args.command == "mask":
        config.missingness = {"mechanism": "mcar", "rate": 0.4, "percentile": 0.3,
                              **_overlay(payload.get("missingness", {}), args, _MISSING_FLAGS)}
    elif args.command == "impute":
        forest["seed"] = config.seed
        config.forest = ForestConfig.from_dict(forest).to_dict()
        config.backend = BackendConfig.from_dict(backend).to_dict()
    elif args.command == "baseline":
        config.baseline = _overlay(payload.get("baseline", {}), args, {"method": "method", "k": "k"})
        if config.baseline.get("method") not in IMPUTERS:
            raise ConfigError(f"baseline method must be one of {sorted(IMPUTERS)}")
        if config.baseline["method"] == "knn":
            config.baseline["k"] = KnnConfig(config.baseline.get("k", 5)).k
    elif args.command == "evaluate":
        config.forest = {"trees": forest.get("trees", 3)}
    elif args.command == "bench":
        bench = _overlay(payload.get("bench", {}), args, {"sizes": "sizes", "d": "d", "q": "q",
                                                          "repetitions": "repetitions"})
        bench.setdefault("sizes", [1000, 2000, 3000, 4000, 5000])
        bench.setdefault("d", 22)
        bench.setdefault("q", 5)
        bench.setdefault("repetitions", 3)
        config.bench = bench
    return config


# ---------------------------------------------------------------- commands


def _load(config: RunConfig, key: str = "input") -> Table:
    schema = load_schema(config.paths["schema"])
    table = load_csv(config.paths[key], schema)
    if config.paths.get("shadow") and key == "input":
        table = attach_shadow(table, read_shadow(config.paths["shadow"], table))
    return table


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_report(run_dir: Path, table: Table, imputed: Table, ledger: VoteLedger | None = None,
                  trees: int | None = None) -> None:
    if not table.shadow:
        return
    report = evaluate(imputed, table.shadow, ledger, trees)
    (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (run_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")


def cmd_mask(config: RunConfig) -> None:
    m = config.missingness
    schema = load_schema(config.paths["schema"])
    table = load_csv(config.paths["input"], schema)
    if m["mechanism"] == "mar" and table.label is None:
        raise ConfigError("MAR masking needs a label column in the schema")
    masked, is_train = mask_and_split(table, m["mechanism"], config.seed, m.get("split_ratio") or 0.8,
                                      m.get("order", "mask_then_split"), m["rate"], m["percentile"])
    out = config.run_dir
    write_csv(masked, out / "masked.csv")
    write_shadow(masked, out / "shadow.csv")
    if m.get("split_ratio"):
        (out / "split.csv").write_text(
            "row,is_train\n" + "".join(f"{i},{int(t)}\n" for i, t in enumerate(is_train)), encoding="utf-8")


def cmd_impute(config: RunConfig) -> None:
    from .prompt import PromptTemplate

    table = _load(config)
    forest = ForestConfig.from_dict(config.forest)
    backend = make_backend(BackendConfig.from_dict(config.backend))
    template = PromptTemplate.load(config.paths.get("templates"))
    out = config.run_dir
    imputed, ledger = impute_all(table, forest, backend, config.workers, out / "checkpoint.jsonl",
                                 config.resume, template)
    write_csv(imputed, out / "imputed.csv")
    ledger.write(out / "ledger.jsonl")
    _write_report(out, table, imputed, ledger, forest.trees)


def cmd_baseline(config: RunConfig) -> None:
    table = _load(config)
    method = config.baseline["method"]
    if method == "knn":
        if config.baseline["k"] > table.n - 1:
            raise ConfigError(f"k={config.baseline['k']} exceeds n-1={table.n - 1}")
        imputed = IMPUTERS[method](table, KnnConfig(config.baseline["k"]))
    else:
        imputed = IMPUTERS[method](table)
    write_csv(imputed, config.run_dir / "imputed.csv")
    _write_report(config.run_dir, table, imputed)


def _read_split(path: str) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return np.array([line.split(",")[1] == "1" for line in lines if line.strip()])


def cmd_evaluate(config: RunConfig) -> None:
    table = _load(config)
    schema = load_schema(config.paths["schema"])
    imputed = load_csv(config.paths["imputed"], schema)
    if imputed.n != table.n:
        raise ConfigError("imputed and masked tables differ in row count")
    imputed = Table.build(imputed.columns, imputed.values.tolist(), imputed.label, table.shadow)
    ledger = VoteLedger.read(config.paths["ledger"]) if config.paths.get("ledger") else None
    report = evaluate(imputed, table.shadow, ledger, config.forest.get("trees"))
    if config.paths.get("truth"):
        truth = load_csv(config.paths["truth"], schema)
        is_train = _read_split(config.paths["split"])
        if truth.label is None:
            raise ConfigError("downstream evaluation needs a label column")
        report.downstream = downstream_scores(imputed.take(np.flatnonzero(is_train)),
                                              truth.take(np.flatnonzero(~is_train)), seed=config.seed)
    out = config.run_dir
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")


def cmd_bench(config: RunConfig) -> None:
    b = config.bench
    report = bench_neighbor_search(b["sizes"], b["d"], b["q"], b["repetitions"], config.seed, config.workers)
    report.write(config.run_dir)
    print(report.to_text(), end="")


COMMANDS = {"mask": cmd_mask, "impute": cmd_impute, "baseline": cmd_baseline,
            "evaluate": cmd_evaluate, "bench": cmd_bench}


# ---------------------------------------------------------------- parser


def _sizes(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llmforest", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--outdir")
    common.add_argument("--run-id", dest="run_id")
    common.add_argument("--workers", type=int)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", help="CSV table")
    data.add_argument("--schema", help="JSON schema")
    data.add_argument("--shadow", help="ground truth of the masked cells")

    mask = sub.add_parser("mask", parents=[common, data], help="inject missingness")
    mask.add_argument("--mechanism", choices=("mcar", "mar", "mnar"))
    mask.add_argument("--rate", type=float)
    mask.add_argument("--percentile", type=float)
    mask.add_argument("--split-ratio", dest="split_ratio", type=float)
    mask.add_argument("--split-order", dest="split_order", choices=("mask_then_split", "split_then_mask"))

    impute = sub.add_parser("impute", parents=[common, data], help="run the forest")
    impute.add_argument("--backend", choices=("mock", "http"))
    impute.add_argument("--endpoint")
    impute.add_argument("--model")
    impute.add_argument("--audit-log", dest="audit_log")
    impute.add_argument("--voting", choices=tuple(VOTING))
    impute.add_argument("--trees", type=int)
    impute.add_argument("--neighbors", type=int)
    impute.add_argument("--merge-levels", dest="merge_levels", type=int)
    impute.add_argument("--sigma", help="'jaccard:<x>' or 'shared_count:<k>'")
    impute.add_argument("--steps", type=int)
    impute.add_argument("--temperature", type=float)
    impute.add_argument("--templates", help="directory of prompt template overrides")
    impute.add_argument("--resume", action="store_true")

    base = sub.add_parser("baseline", parents=[common, data], help="mean, mode or KNN imputation")
    base.add_argument("--method", choices=tuple(IMPUTERS))
    base.add_argument("--k", type=int)

    ev = sub.add_parser("evaluate", parents=[common, data], help="score an imputed table")
    ev.add_argument("--imputed")
    ev.add_argument("--ledger")
    ev.add_argument("--trees", type=int)
    ev.add_argument("--truth", help="complete table for the downstream classifier")
    ev.add_argument("--split", help="split.csv written by mask")

    bench = sub.add_parser("bench", parents=[common], help="neighbour-search timing")
    bench.add_argument("--sizes", type=_sizes)
    bench.add_argument("--d", type=int)
    bench.add_argument("--q", type=int)
    bench.add_argument("--repetitions", type=int)
    return parser


def _fail(run_dir: Path | None, command: str, exc: BaseException, code: int) -> int:
    record = {"command": command, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ForestAborted) and exc.checkpoint:
        record["checkpoint"] = str(exc.checkpoint)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "error.json", record)
    print(f"llmforest {command}: {record['error']}: {record['message']}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    fallback_dir = Path(args.outdir or "runs") / (args.run_id or args.command)
    try:
        config = resolve(args)
    except (ConfigError, SchemaError, ValueError, TypeError) as exc:
        return _fail(fallback_dir, args.command, exc, EXIT_CONFIG)
    run_dir = config.run_dir
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "error.json").unlink(missing_ok=True)
        _write_json(run_dir / "config.json", config.snapshot())
        COMMANDS[config.command](config)
    except (ConfigError, SchemaError) as exc:
        return _fail(run_dir, config.command, exc, EXIT_CONFIG)
    except (ForestAborted, BackendError, OSError, ValueError, KeyError) as exc:
        return _fail(run_dir, config.command, exc, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
