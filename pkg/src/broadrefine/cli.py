"""Batch experiment runner.

Every subcommand reads a JSON config (``--config``), applies flag overrides,
writes its outputs into ``--out`` (default: current directory) together with
``resolved_config.json``, and exits 0 on success, 1 on usage or config
errors and 2 on missing or malformed input data.

Paths inside a config are resolved relative to the config file. A ``null``
catalog or benchmark means the seeded reference one.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .catalog import (REFERENCE_BENCHMARK_SEED, REFERENCE_CATALOG_SEED, Catalog, CatalogSpec,
                      ConfigurationError, DataError, QueryRecord, Schema, build_query_benchmark,
                      generate_catalog, read_benchmark, reference_benchmark, reference_catalog,
                      reference_schema, write_benchmark)
from .engine import DEFAULT_LIMIT, SearchEngine, SearchRequest
from .expander import PolicyParams, expand_enumerative, expand_identity, policy_sample
from .posterior import build_sft_dataset, write_sft_dataset
from .querylang import ParseError, ParsedQuery, parse, serialize
from .rewards import REWARD_MODES, low_result_rate
from .rlopt import ALGORITHMS, OptimizerConfig, RewardEnv, evaluate_policy, identity_baseline, train
from .serving import PipelineConfig, SessionError, run_session
from .verifier import UserContext, VerifierConfig

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
RESOLVED_CONFIG = "resolved_config.json"
VARIANTS = ("identity", "enumerative", "policy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

_COMMON = {"catalog": None, "seed": None}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-corpus": {"num_items": 10_000, "seed": REFERENCE_CATALOG_SEED, "tag_rate": 0.3, "text_rate": 0.35},
    "gen-benchmark": {**_COMMON, "seed": REFERENCE_BENCHMARK_SEED, "count": 200,
                      "over_constraint_level": 3, "min_zero_fraction": 0.2},
    "search": {**_COMMON, "query": None, "limit": DEFAULT_LIMIT, "offset": 0},
    "build-sft": {**_COMMON, "benchmark": None, "k": 4, "limit": DEFAULT_LIMIT,
                  "verifier": {}, "user": {}},
    "train": {**_COMMON, "benchmark": None, "optimizer": {}, "verifier": {}, "user": {},
              "eval_samples": 8},
    "evaluate": {**_COMMON, "benchmark": None, "pipeline": {}, "verifier": {}, "user": {},
                 "variants": ["identity", "enumerative"], "policy": None},
    "session": {**_COMMON, "query": None, "pipeline": {}, "verifier": {}, "user": {},
                "variant": "enumerative", "policy": None},
}

_OPTIMIZER_KEYS = {f.name for f in dataclasses.fields(OptimizerConfig)}
_PIPELINE_KEYS = {f.name for f in dataclasses.fields(PipelineConfig)} - {"verifier"}
_VERIFIER_KEYS = {f.name for f in dataclasses.fields(VerifierConfig)}
_USER_KEYS = {"region", "blocked_values"}


def _check_keys(doc: Any, allowed: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise UsageError(f"config field {where!r} must be an object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise UsageError(f"unknown config key {where + '.' if where else ''}{unknown[0]}")


def resolve_config(command: str, raw: dict, args: argparse.Namespace) -> dict:
    """Merge defaults, the config document and flag overrides; reject unknown keys."""
    defaults = DEFAULTS[command]
    _check_keys(raw, set(defaults), "")
    cfg = json.loads(json.dumps(defaults))
    cfg.update(json.loads(json.dumps(raw)))
    for key, allowed in (("optimizer", _OPTIMIZER_KEYS), ("pipeline", _PIPELINE_KEYS),
                         ("verifier", _VERIFIER_KEYS), ("user", _USER_KEYS)):
        if key in cfg:
            _check_keys(cfg[key], allowed, key)
    if args.seed is not None:
        if command == "train":
            cfg["optimizer"]["seed"] = args.seed
        cfg["seed"] = args.seed
    if args.reward is not None:
        if command == "train":
            cfg["optimizer"]["reward_mode"] = args.reward
        elif "pipeline" in cfg:
            cfg["pipeline"]["reward_mode"] = args.reward
        else:
            raise UsageError(f"--reward does not apply to {command}")
    if args.optimizer is not None:
        if command != "train":
            raise UsageError(f"--optimizer does not apply to {command}")
        cfg["optimizer"]["algorithm"] = args.optimizer
    return cfg


def _path(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_catalog(cfg: dict, base: Path) -> Catalog:
    path = _path(base, cfg.get("catalog"))
    if path is None:
        return reference_catalog()
    if not path.exists():
        raise DataError(f"catalog not found: {path}")
    schema_path = path.with_name("schema.json")
    schema = (Schema.from_dict(json.loads(schema_path.read_text(encoding="utf-8")))
              if schema_path.exists() else reference_schema())
    return Catalog.read(path, schema)


def _load_records(cfg: dict, base: Path) -> list[QueryRecord]:
    path = _path(base, cfg.get("benchmark"))
    if path is None:
        return reference_benchmark()
    if not path.exists():
        raise DataError(f"benchmark not found: {path}")
    return read_benchmark(path)


def _load_queries(cfg: dict, base: Path) -> list[ParsedQuery]:
    records = _load_records(cfg, base)
    out = []
    for i, r in enumerate(records):
        try:
            out.append(parse(r.query_text))
        except ParseError as exc:
            raise DataError(f"benchmark query {i}: {exc}") from exc
    return out


def _verifier(cfg: dict) -> VerifierConfig:
    try:
        return VerifierConfig(**cfg.get("verifier", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"verifier: {exc}") from exc


def _user(cfg: dict) -> UserContext:
    try:
        return UserContext.from_dict(cfg.get("user", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"user: {exc}") from exc


def _pipeline(cfg: dict) -> PipelineConfig:
    try:
        return PipelineConfig(verifier=_verifier(cfg), **cfg.get("pipeline", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"pipeline: {exc}") from exc


def _policy(cfg: dict, base: Path) -> PolicyParams | None:
    path = _path(base, cfg.get("policy"))
    if path is None:
        return None
    if not path.exists():
        raise DataError(f"policy params not found: {path}")
    try:
        return PolicyParams.load(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _query(cfg: dict) -> ParsedQuery:
    if not cfg.get("query"):
        raise UsageError("config field 'query' is required")
    try:
        return parse(cfg["query"])
    except ParseError as exc:
        raise UsageError(f"query: {exc}") from exc


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------- commands

def cmd_gen_corpus(cfg: dict, base: Path, out: Path) -> None:
    if cfg.get("seed") is None:
        raise UsageError("gen-corpus needs a seed")
    try:
        spec = CatalogSpec(num_items=cfg["num_items"], seed=int(cfg["seed"]),
                           tag_rate=cfg["tag_rate"], text_rate=cfg["text_rate"])
        catalog = generate_catalog(spec)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    catalog.write(out / "catalog.jsonl")
    (out / "schema.json").write_text(_dump(catalog.schema.to_dict()), encoding="utf-8")


def cmd_gen_benchmark(cfg: dict, base: Path, out: Path) -> None:
    catalog = _load_catalog(cfg, base)
    try:
        records = build_query_benchmark(catalog, cfg["count"], cfg["over_constraint_level"],
                                        int(cfg["seed"]), min_zero_fraction=cfg["min_zero_fraction"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    write_benchmark(records, out / "benchmark.jsonl")


def cmd_search(cfg: dict, base: Path, out: Path) -> None:
    q = _query(cfg)
    catalog = _load_catalog(cfg, base)
    try:
        req = SearchRequest(q, cfg["limit"], cfg["offset"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = SearchEngine(catalog).search(req)
    (out / "search.json").write_text(_dump({"query": serialize(q), "item_ids": list(res.item_ids),
                                            "total_matches": res.total_matches}), encoding="utf-8")


def cmd_build_sft(cfg: dict, base: Path, out: Path) -> None:
    catalog = _load_catalog(cfg, base)
    records = _load_records(cfg, base)
    if not records:
        (out / "sft.jsonl").write_text("", encoding="utf-8")
        return
    data = build_sft_dataset(records, SearchEngine(catalog), catalog, _verifier(cfg),
                             cfg["k"], _user(cfg), cfg["limit"])
    write_sft_dataset(data, out / "sft.jsonl")


def cmd_train(cfg: dict, base: Path, out: Path) -> None:
    catalog = _load_catalog(cfg, base)
    queries = _load_queries(cfg, base)
    if not queries:
        raise DataError("training benchmark is empty")
    try:
        ocfg = OptimizerConfig(**{k: (tuple(v) if k == "difficulty" else v)
                                  for k, v in cfg["optimizer"].items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"optimizer: {exc}") from exc
    env = RewardEnv(catalog, SearchEngine(catalog), _user(cfg), _verifier(cfg), ocfg.limit)
    ckpt = out / "checkpoints" if ocfg.save_every else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    result = train(queries, env, ocfg, checkpoint_dir=ckpt)
    (out / "curve.csv").write_text(result.curve_csv(), encoding="utf-8")
    result.params.save(out / "params.json")
    samples = int(cfg["eval_samples"])
    summary = {
        "algorithm": ocfg.algorithm,
        "reward_mode": ocfg.reward_mode,
        "steps": ocfg.steps,
        "final_policy_reward": evaluate_policy(result.params, queries, env, ocfg.reward_mode,
                                               samples, ocfg.seed),
        "initial_policy_reward": evaluate_policy(result.params.reference(), queries, env,
                                                 ocfg.reward_mode, samples, ocfg.seed),
        "identity_reward": identity_baseline(queries, env, ocfg.reward_mode),
    }
    (out / "summary.json").write_text(_dump(summary), encoding="utf-8")


def _expander_for(variant: str, cfg: PipelineConfig, params: PolicyParams | None, seed: int):
    if variant == "identity":
        return expand_identity
    if variant == "enumerative":
        return lambda q: expand_enumerative(q, cfg.n)
    if variant == "policy":
        if params is None:
            raise UsageError("variant 'policy' needs a 'policy' params path")
        return lambda q: policy_sample(params, q, seed)[0]
    raise UsageError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


AGGREGATE_HEADER = ["variant", "queries", "mean_hr", "mean_gr", "mean_er", "lrr", "zero_result"]


def aggregate_row(variant: str, reports: Sequence[dict], tau: int) -> list:
    n = len(reports)

    def mean(key: str) -> float:
        return float(np.mean([r["reward"][key] for r in reports])) if n else 0.0

    return [variant, n, f"{mean('hybrid'):.10f}", f"{mean('global'):.10f}", f"{mean('effective'):.10f}",
            f"{low_result_rate([r['counts']['refined'] for r in reports], tau):.10f}",
            sum(1 for r in reports if r["zero_result"])]


def evaluate_variants(queries: Sequence[ParsedQuery], catalog: Catalog, pcfg: PipelineConfig,
                      user: UserContext, variants: Sequence[str], params: PolicyParams | None = None,
                      seed: int = 0) -> dict[str, list[dict]]:
    engine = SearchEngine(catalog)
    out = {}
    for v in variants:
        expander = _expander_for(v, pcfg, params, seed)
        out[v] = [run_session(q, user, pcfg, engine, catalog, expander) for q in queries]
    return out


def cmd_evaluate(cfg: dict, base: Path, out: Path) -> None:
    variants = cfg["variants"]
    if not isinstance(variants, list) or not variants:
        raise UsageError("config field 'variants' must be a non-empty list")
    catalog = _load_catalog(cfg, base)
    queries = _load_queries(cfg, base)
    pcfg = _pipeline(cfg)
    reports = evaluate_variants(queries, catalog, pcfg, _user(cfg), variants, _policy(cfg, base),
                                int(cfg["seed"] or 0))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for v in variants:
        (out / f"sessions_{v}.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in reports[v]), encoding="utf-8")
        if reports[v]:
            w.writerow(aggregate_row(v, reports[v], pcfg.tau))
    (out / "aggregate.csv").write_text(buf.getvalue(), encoding="utf-8")


def cmd_session(cfg: dict, base: Path, out: Path) -> None:
    q = _query(cfg)
    catalog = _load_catalog(cfg, base)
    pcfg = _pipeline(cfg)
    expander = _expander_for(cfg["variant"], pcfg, _policy(cfg, base), int(cfg["seed"] or 0))
    report = run_session(q, _user(cfg), pcfg, SearchEngine(catalog), catalog, expander)
    (out / "session.json").write_text(_dump(report), encoding="utf-8")


COMMANDS: dict[str, Callable[[dict, Path, Path], None]] = {
    "gen-corpus": cmd_gen_corpus,
    "gen-benchmark": cmd_gen_benchmark,
    "search": cmd_search,
    "build-sft": cmd_build_sft,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "session": cmd_session,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="broadrefine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--reward", choices=REWARD_MODES)
        p.add_argument("--optimizer", choices=ALGORITHMS)
        p.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("broadrefine: error: --seed must be a non-negative integer", file=sys.stderr)
        return EXIT_USAGE
    config_path = Path(args.config)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        print(f"broadrefine: error: config file not found: {config_path}", file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as exc:
        print(f"broadrefine: error: --config {config_path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(args.command, raw, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / RESOLVED_CONFIG).write_text(_dump({"command": args.command, "config": cfg}),
                                           encoding="utf-8")
        COMMANDS[args.command](cfg, config_path.parent, out)
    except UsageError as exc:
        print(f"broadrefine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SessionError, OSError) as exc:
        print(f"broadrefine: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
