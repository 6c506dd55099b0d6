"""End-to-end tests for the command-line interface."""

import csv
import json

import pytest

from mixerforge import cli, hybrid


def run(argv):
    return cli.main(argv)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


TINY_TRAIN = {
    "kinds": ["hgrn2"],
    "ratios": [1, "pure"],
    "model": {"d_model": 8, "H": 1, "N": 1, "L": 16, "vocab": 16},
    "task": {"kind": "kv_recall", "seq_len": 16, "n_pairs": 3, "n_queries": 2, "n_examples": 8},
    "opt": {"total_steps": 4, "base_lr": 3e-3, "min_lr": 3e-4},
    "batch_size": 2,
}


# ---------------------------------------------------------------------------
# equiv


def test_equiv_all_kinds_passes(tmp_path, capsys):
    out = tmp_path / "out"
    assert run(["equiv", "--out", str(out), "--trials", "3", "--L", "12", "--d", "4"]) == 0
    rows = read_csv(out / "equiv.csv")
    assert all(r["status"] == "ok" for r in rows)
    checks = {r["check"] for r in rows}
    assert {"hgrn", "gated_deltanet", "gla_vs_retnet", "hgrn2_vs_gla"} <= checks
    assert "ok" in capsys.readouterr().out


def test_equiv_injected_fault_fails(tmp_path):
    out = tmp_path / "out"
    assert run(["equiv", "--out", str(out), "--kinds", "retnet", "--trials", "2", "--inject-fault"]) == 1
    rows = read_csv(out / "equiv.csv")
    assert any(r["status"] == "FAIL" for r in rows)


def test_equiv_usage_errors(tmp_path):
    assert run(["equiv", "--out", str(tmp_path / "a"), "--kinds", ""]) == 2
    assert run(["equiv", "--out", str(tmp_path / "b"), "--kinds", "not_a_mixer"]) == 2


# ---------------------------------------------------------------------------
# flops


def test_flops_sweep(tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "kinds": ["hgrn2", "gla", "softmax"],
                "ratios": ["pure"],
                "L_grid": [256, 512],
                "model": {"d_model": 16, "H": 2, "L": 512},
            }
        )
    )
    assert run(["flops", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "flops.csv")
    by = {(r["kind"], int(r["L"])): r for r in rows}
    for L in (256, 512):
        assert by[("hgrn2", L)]["per_token_flops"] == by[("gla", L)]["per_token_flops"]
        # linear stacks: per-sequence flops scale linearly in L
    assert 2 * int(by[("hgrn2", 256)]["per_sequence_flops"]) == int(by[("hgrn2", 512)]["per_sequence_flops"])
    # attention-only model: quadratic per-sequence scaling
    assert 4 * int(by[("softmax", 256)]["per_sequence_flops"]) == int(by[("softmax", 512)]["per_sequence_flops"])


def test_flops_rejects_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"typo_key": 1}))
    assert run(["flops", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 2


# ---------------------------------------------------------------------------
# train


def test_train_grid(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "grid.csv")
    assert {r["label"] for r in rows} == {"hgrn2-1:1", "hgrn2-pure"}
    for label in ("hgrn2-1:1", "hgrn2-pure"):
        report = json.loads((out / "cells" / label / "report.json").read_text())
        assert len(report["losses"]) == 4
        assert (out / "cells" / label / "checkpoint.bin").exists()
    echoed = json.loads((out / "effective_config.json").read_text())
    assert echoed["opt"]["total_steps"] == 4
    assert "hgrn2-pure" in capsys.readouterr().out


def test_train_set_overrides_win(tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert (
        run(
            ["train", "--config", str(cfg), "--out", str(out), "--set", "opt.total_steps=2",
             "--set", "ratios=[1]"]
        )
        == 0
    )
    report = json.loads((out / "cells" / "hgrn2-1:1" / "report.json").read_text())
    assert len(report["losses"]) == 2
    assert json.loads((out / "effective_config.json").read_text())["opt"]["total_steps"] == 2


def test_train_parallel_matches_serial(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    monkeypatch.setenv("MIXERFORGE_THREADS", "1")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("MIXERFORGE_THREADS", "2")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "parallel")]) == 0
    a = sorted(read_csv(tmp_path / "serial" / "grid.csv"), key=lambda r: r["label"])
    b = sorted(read_csv(tmp_path / "parallel" / "grid.csv"), key=lambda r: r["label"])
    assert a == b


# ---------------------------------------------------------------------------
# pareto


def test_pareto_frontier_subset_of_grid(tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert run(["pareto", "--config", str(cfg), "--out", str(out)]) == 0
    grid = read_csv(out / "grid.csv")
    front = read_csv(out / "frontier.csv")
    assert front and len(front) <= len(grid)
    grid_keys = {(r["per_sequence_flops"], r["score"]) for r in grid}
    assert all((r["per_sequence_flops"], r["score"]) in grid_keys for r in front)


def test_independent_dominance_scan_matches_pareto_examples():
    points = [(1, 0.5), (2, 0.6), (3, 0.55)]
    assert cli.independent_dominance_scan(points) == [(1, 0.5), (2, 0.6)]
    assert cli.independent_dominance_scan([]) == []


# ---------------------------------------------------------------------------
# report


def test_report_payload(tmp_path, capsys):
    out = tmp_path / "out"
    args = ["report", "--out", str(out), "--set", "kind=gla", "--set", "ratio=3",
            "--set", "model.d_model=16", "--set", "model.H=2", "--set", "model.N=1", "--set", "L=64"]
    assert run(args) == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["schedule"] == ["linear", "linear", "linear", "full"]
    assert payload["per_token_flops"] > 0
    assert payload["per_model_flops"] == payload["per_sequence_flops"]
    assert payload["total_cache_bytes"] == payload["kv_cache_bytes"] + payload["linear_state_bytes"]
    assert json.loads(capsys.readouterr().out) == payload


# ---------------------------------------------------------------------------
# config plumbing


def test_parse_ratio_names_and_numbers():
    assert cli.parse_ratio(3) == 3
    assert cli.parse_ratio("7") == 7
    assert cli.parse_ratio("pure") == hybrid.PURE_LINEAR
    assert cli.parse_ratio("full_transformer") == hybrid.FULL_TRANSFORMER
    with pytest.raises(cli.CliConfigError):
        cli.parse_ratio("3:1")


def test_load_config_nested_set_override(tmp_path):
    cfg = cli.load_config(None, ["model.d_model=32", "opt.base_lr=0.01", "kinds=[\"gla\"]"])
    assert cfg == {"model": {"d_model": 32}, "opt": {"base_lr": 0.01}, "kinds": ["gla"]}
    with pytest.raises(cli.CliConfigError):
        cli.load_config(None, ["no_equals_sign"])
    with pytest.raises(cli.CliConfigError):
        cli.load_config(str(tmp_path / "missing.json"), [])
