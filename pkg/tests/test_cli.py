import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from broadrefine.catalog import read_benchmark
from broadrefine.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from broadrefine.rewards import low_result_rate


def write_cfg(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    """A 400-item catalog and a 12-query benchmark built through the CLI."""
    d = tmp_path_factory.mktemp("world")
    cfg = write_cfg(d / "corpus.json", {"num_items": 400, "seed": 11})
    assert main(["gen-corpus", "--config", cfg, "--out", str(d)]) == EXIT_OK
    cfg = write_cfg(d / "bench.json", {"catalog": "catalog.jsonl", "count": 12, "seed": 3})
    assert main(["gen-benchmark", "--config", cfg, "--out", str(d)]) == EXIT_OK
    return d


def test_gen_corpus_outputs(small_world):
    lines = (small_world / "catalog.jsonl").read_text().splitlines()
    assert len(lines) == 400
    assert json.loads((small_world / "schema.json").read_text())
    resolved = json.loads((small_world / "resolved_config.json").read_text())
    assert resolved["command"] == "gen-benchmark"


def test_gen_benchmark_outputs(small_world):
    recs = read_benchmark(small_world / "benchmark.jsonl")
    assert len(recs) == 12


def test_gen_corpus_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"num_items": 50, "seed": 4})
    for sub in ("a", "b"):
        assert main(["gen-corpus", "--config", cfg, "--out", str(tmp_path / sub)]) == EXIT_OK
    assert (tmp_path / "a/catalog.jsonl").read_bytes() == (tmp_path / "b/catalog.jsonl").read_bytes()


def test_search(small_world, tmp_path):
    cfg = write_cfg(small_world / "s.json", {"catalog": "catalog.jsonl", "query": "cat:blazer", "limit": 5})
    assert main(["search", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "search.json").read_text())
    assert len(doc["item_ids"]) <= 5 and doc["total_matches"] >= len(doc["item_ids"])


def test_build_sft(small_world, tmp_path):
    cfg = write_cfg(small_world / "sft.json", {"catalog": "catalog.jsonl", "benchmark": "benchmark.jsonl"})
    assert main(["build-sft", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = [json.loads(x) for x in (tmp_path / "sft.jsonl").read_text().splitlines()]
    assert len(rows) == 12
    assert all(1 <= len(r["rewrites"]) <= 4 and r["target"] == " || ".join(r["rewrites"]) for r in rows)


def test_session(small_world, tmp_path):
    cfg = write_cfg(small_world / "sess.json", {"catalog": "catalog.jsonl",
                                                 "query": "cat:blazer | attr:material=linen"})
    assert main(["session", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "session.json").read_text())
    assert {"reward", "counts", "zero_result"} <= set(doc)


def test_train_smoke(small_world, tmp_path):
    cfg = write_cfg(small_world / "t.json", {"catalog": "catalog.jsonl", "benchmark": "benchmark.jsonl",
                                              "optimizer": {"steps": 3, "batch_size": 4, "save_every": 2},
                                              "eval_samples": 1})
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "--optimizer", "grpo", "--seed", "5"]) == EXIT_OK
    curve = list(csv.reader((tmp_path / "curve.csv").open()))
    assert curve[0] == ["step", "mean_reward", "kept_groups"] and len(curve) == 4
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["algorithm"] == "grpo"
    assert {"final_policy_reward", "initial_policy_reward", "identity_reward"} <= set(summary)
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())["config"]
    assert resolved["optimizer"]["seed"] == 5 and resolved["seed"] == 5
    assert (tmp_path / "checkpoints").is_dir()
    assert (tmp_path / "params.json").exists()


def run_eval(world, out, **extra):
    cfg = write_cfg(world / "e.json", {"catalog": "catalog.jsonl", "benchmark": "benchmark.jsonl", **extra})
    return main(["evaluate", "--config", cfg, "--out", str(out)])


def test_evaluate_byte_identical(small_world, tmp_path):
    assert run_eval(small_world, tmp_path / "a") == EXIT_OK
    assert run_eval(small_world, tmp_path / "b") == EXIT_OK
    for name in ("aggregate.csv", "sessions_identity.jsonl", "sessions_enumerative.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_aggregate_recomputable(small_world, tmp_path):
    assert run_eval(small_world, tmp_path) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "aggregate.csv").open()))
    assert [r["variant"] for r in rows] == ["identity", "enumerative"]
    for row in rows:
        reps = [json.loads(x) for x in (tmp_path / f"sessions_{row['variant']}.jsonl").read_text().splitlines()]
        assert int(row["queries"]) == len(reps) == 12
        for col, key in (("mean_hr", "hybrid"), ("mean_gr", "global"), ("mean_er", "effective")):
            assert float(row[col]) == pytest.approx(np.mean([r["reward"][key] for r in reps]), abs=1e-9)
        assert float(row["lrr"]) == pytest.approx(low_result_rate([r["counts"]["refined"] for r in reps], 10))
        assert int(row["zero_result"]) == sum(r["zero_result"] for r in reps)


def test_evaluate_empty_benchmark(small_world, tmp_path):
    (small_world / "empty.jsonl").write_text("")
    cfg = write_cfg(small_world / "ee.json", {"catalog": "catalog.jsonl", "benchmark": "empty.jsonl"})
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "aggregate.csv").read_text().strip() == "variant,queries,mean_hr,mean_gr,mean_er,lrr,zero_result"


def test_reward_flag(small_world, tmp_path):
    assert main(["evaluate", "--config", write_cfg(small_world / "r.json", {"catalog": "catalog.jsonl",
                 "benchmark": "benchmark.jsonl", "variants": ["identity"]}),
                 "--out", str(tmp_path), "--reward", "hybrid"]) == EXIT_OK
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())["config"]
    assert resolved["pipeline"]["reward_mode"] == "hybrid"


# ------------------------------------------------------------- exit codes

def test_missing_config_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["search"])
    assert exc.value.code == EXIT_USAGE


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x.json"])
    assert exc.value.code == EXIT_USAGE


def test_config_file_not_found(tmp_path):
    assert main(["search", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_DATA


def test_bad_json(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["search", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.parametrize("doc", [{"query": "cat:blazer", "bogus": 1},
                                 {"benchmark": None, "optimizer": {"lr": 1}},
                                 {"benchmark": None, "verifier": {"nope": 0}},
                                 {"benchmark": None, "user": {"city": "x"}}])
def test_unknown_keys(tmp_path, doc):
    command = "search" if "query" in doc else "train"
    cfg = write_cfg(tmp_path / "c.json", doc)
    assert main([command, "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_pipeline_key(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"query": "cat:blazer", "pipeline": {"budget": 3}})
    assert main(["session", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE


def test_flag_mismatch(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"query": "cat:blazer"})
    assert main(["search", "--config", cfg, "--out", str(tmp_path), "--optimizer", "gspo"]) == EXIT_USAGE
    assert main(["search", "--config", cfg, "--out", str(tmp_path), "--reward", "global"]) == EXIT_USAGE
    assert main(["search", "--config", cfg, "--out", str(tmp_path), "--seed", "-1"]) == EXIT_USAGE


def test_bad_query_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"query": "attr:material=linen"})
    assert main(["search", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_benchmark_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"benchmark": "missing.jsonl"})
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_DATA


def test_missing_catalog_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"catalog": "missing.jsonl", "query": "cat:blazer"})
    assert main(["search", "--config", cfg, "--out", str(tmp_path)]) == EXIT_DATA


def test_policy_variant_needs_params(small_world, tmp_path):
    cfg = write_cfg(small_world / "p.json", {"catalog": "catalog.jsonl", "query": "cat:blazer",
                                              "variant": "policy"})
    assert main(["session", "--config", cfg, "--out", str(tmp_path)]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"query": "cat:blazer", "limit": 3})
    proc = subprocess.run([sys.executable, "-m", "broadrefine", "search", "--config", cfg, "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(json.loads((tmp_path / "search.json").read_text())["item_ids"]) == 3
