"""Command-line interface.

Commands: `equiv` (scan-vs-oracle and reduction checks), `flops` (cost-model
CSV sweeps), `train` (grid of toy training cells), `pareto` (train grid +
frontier CSV), `report` (cost/cache summary for one configuration).

Config files are JSON; `--set key=value` overrides win over file values and
the effective config is echoed into the output directory. Exit codes:
0 success, 1 check/training failure, 2 usage or config error.
`MIXERFORGE_THREADS` caps how many grid cells run in parallel.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import traceback
from pathlib import Path

from . import costmodel, hybrid, mixers, tasks, trainer, verify
from .mixers import Dimensions, MixerKind


class CliConfigError(Exception):
    pass


ALL_KINDS = [k.value for k in MixerKind]

_RATIO_NAMES = {
    "pure": hybrid.PURE_LINEAR,
    "pure_linear": hybrid.PURE_LINEAR,
    "full": hybrid.FULL_TRANSFORMER,
    "full_transformer": hybrid.FULL_TRANSFORMER,
}


def parse_ratio(r):
    if isinstance(r, int):
        return r
    if isinstance(r, str):
        if r in _RATIO_NAMES:
            return _RATIO_NAMES[r]
        if r.isdigit():
            return int(r)
    raise CliConfigError(f"bad ratio {r!r}")


def ratio_label(r):
    if isinstance(r, int):
        return f"{r}:1"
    return "pure" if r == hybrid.PURE_LINEAR else "full"


def _check_keys(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise CliConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_config(path, overrides):
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliConfigError(f"cannot read config {path}: {e}")
    for item in overrides or []:
        if "=" not in item:
            raise CliConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = value
    return cfg


MODEL_KEYS = {"d_model", "H", "N", "L", "vocab", "mlp_mult", "r_ref"}
TASK_KEYS = {"kind", "seq_len", "n_pairs", "n_queries", "prefix_len", "corpus", "n_examples"}
OPT_KEYS = {
    "total_steps",
    "base_lr",
    "min_lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "warmup_steps",
    "clip_norm",
}


def model_config(cfg, kind, ratio):
    _check_keys(cfg, MODEL_KEYS, "model")
    d_model = int(cfg.get("d_model", 16))
    H = int(cfg.get("H", 1))
    if kind in mixers.VECTOR_KINDS:
        H = 1
    if d_model % H:
        raise CliConfigError(f"d_model={d_model} not divisible by H={H}")
    dims = Dimensions(int(cfg.get("L", 64)), H, d_model // H, d_model)
    return hybrid.HybridConfig(
        kind=kind,
        dims=dims,
        vocab=int(cfg.get("vocab", 64)),
        ratio=ratio,
        N=int(cfg.get("N", 1)),
        mlp_mult=int(cfg.get("mlp_mult", 4)),
        r_ref=int(cfg.get("r_ref", 3)),
    )


def task_config(cfg, seed):
    _check_keys(cfg, TASK_KEYS, "task")
    return tasks.TaskConfig(
        kind=tasks.TaskKind(cfg.get("kind", "kv_recall")),
        vocab=0,  # filled from the model config by the caller
        seq_len=int(cfg.get("seq_len", 64)),
        n_pairs=int(cfg.get("n_pairs", 0)),
        n_queries=int(cfg.get("n_queries", 0)),
        prefix_len=int(cfg.get("prefix_len", 0)),
        corpus=cfg.get("corpus"),
        n_examples=int(cfg.get("n_examples", 32)),
        seed=seed,
    )


def opt_config(cfg):
    _check_keys(cfg, OPT_KEYS, "opt")
    return trainer.OptimizerHyperparams(
        total_steps=int(cfg.get("total_steps", 200)),
        base_lr=float(cfg.get("base_lr", 3e-3)),
        min_lr=float(cfg.get("min_lr", 3e-4)),
        beta1=float(cfg.get("beta1", 0.9)),
        beta2=float(cfg.get("beta2", 0.999)),
        eps=float(cfg.get("eps", 1e-8)),
        weight_decay=float(cfg.get("weight_decay", 0.01)),
        warmup_steps=cfg.get("warmup_steps"),
        clip_norm=float(cfg.get("clip_norm", 1.0)),
    )


def _prepare_out(out, cfg):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# equiv


def cmd_equiv(args):
    kind_names = [k for k in (args.kinds or "").split(",") if k]
    if args.kinds == "all":
        kind_names = ALL_KINDS
    if not kind_names:
        print("error: empty kind list", file=sys.stderr)
        return 2
    try:
        kinds = [MixerKind(name) for name in kind_names]
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = _prepare_out(args.out, {"kinds": kind_names, "L": args.L, "d": args.d, "trials": args.trials, "seed": args.seed})
    tol = 1e-10
    rows = []
    failed = False
    for kind in kinds:
        err = verify.scan_vs_oracle(
            kind, args.trials, args.seed, L_max=args.L, d_max=args.d, fault=args.inject_fault
        )
        ok = err <= tol
        failed |= not ok
        rows.append([kind.value, f"{err:.3e}", args.trials, "ok" if ok else "FAIL"])
        print(f"equiv {kind.value:>14s}: max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    red = verify.reduction_checks(args.trials // 2 or 1, args.seed)
    for name, err in red.items():
        ok = err <= 1e-12
        failed |= not ok
        rows.append([name, f"{err:.3e}", args.trials // 2 or 1, "ok" if ok else "FAIL"])
        print(f"equiv {name:>14s}: max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    _write_csv(out / "equiv.csv", ["check", "max_rel_err", "trials", "status"], rows)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# flops


def cmd_flops(args):
    cfg = load_config(args.config, args.set)
    _check_keys(cfg, {"kinds", "ratios", "L_grid", "model"}, "flops config")
    kind_names = cfg.get("kinds", ALL_KINDS)
    ratios = [parse_ratio(r) for r in cfg.get("ratios", ["pure"])]
    L_grid = [int(x) for x in cfg.get("L_grid", [256, 1024, 4096])]
    model_cfg = cfg.get("model", {})
    out = _prepare_out(args.out, cfg)
    rows = []
    for name in kind_names:
        if name == "softmax":
            cells = [(MixerKind.HGRN2, hybrid.FULL_TRANSFORMER)]  # kind is unused in FULL layers
        else:
            cells = [(MixerKind(name), r) for r in ratios]
        for kind, ratio in cells:
            config = model_config(model_cfg, kind, ratio)
            for L in L_grid:
                rep = costmodel.model_flops(config, L)
                rows.append(
                    {
                        "label": f"{name}-{ratio_label(ratio)}",
                        "ratio": ratio_label(ratio),
                        "kind": name,
                        "L": L,
                        "d_model": config.dims.d_model,
                        "H": config.dims.H,
                        "per_token_flops": rep.per_token_flops,
                        "per_sequence_flops": rep.per_sequence_flops,
                        "kv_cache_bytes": rep.kv_cache_bytes,
                        "score": "",
                    }
                )
    (out / "flops.csv").write_text(costmodel.rows_to_csv(rows))
    print(f"wrote {out / 'flops.csv'} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# train / pareto


def _train_cell(cell):
    name, config, task, hp, seed, batch_size = cell
    model, moments, report = trainer.train(config, task, hp, seed=seed, batch_size=batch_size)
    return name, model, moments, report


def _run_grid(cfg, out, seed):
    _check_keys(cfg, {"kinds", "ratios", "model", "task", "opt", "batch_size", "score_metric"}, "config")
    kind_names = cfg.get("kinds", ["hgrn2"])
    ratios = [parse_ratio(r) for r in cfg.get("ratios", [3, "pure"])]
    batch_size = int(cfg.get("batch_size", 4))
    hp = opt_config(cfg.get("opt", {}))
    cells = []
    for name in kind_names:
        kind = MixerKind(name)
        for ratio in ratios:
            config = model_config(cfg.get("model", {}), kind, ratio)
            task = task_config(cfg.get("task", {}), seed)
            task = type(task)(**{**task.__dict__, "vocab": config.vocab})
            if task.seq_len > config.dims.L:
                raise CliConfigError("task seq_len exceeds model position table L")
            label = f"{name}-{ratio_label(ratio)}"
            cells.append((label, config, task, hp, seed, batch_size))
    workers = max(1, int(os.environ.get("MIXERFORGE_THREADS", "1")))
    results, failures = {}, {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futs = {pool.submit(_train_cell, c): c[0] for c in cells}
        for fut in concurrent.futures.as_completed(futs):
            label = futs[fut]
            try:
                results[label] = fut.result()
            except Exception:
                failures[label] = traceback.format_exc()
    for label, (name, model, moments, report) in results.items():
        cell_dir = out / "cells" / label
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        trainer.save_training_state(cell_dir / "checkpoint.bin", model, moments)
    for label, tb in failures.items():
        cell_dir = out / "cells" / label
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "error.txt").write_text(tb)
        print(f"cell {label} FAILED (see {cell_dir / 'error.txt'})", file=sys.stderr)
    return cells, results, failures


def _grid_rows(cfg, cells, results):
    metric = cfg.get("score_metric", "accuracy")
    rows = []
    for label, config, task, hp, seed, _ in cells:
        if label not in results:
            continue
        report = results[label][3]
        rep = costmodel.model_flops(config, task.seq_len)
        score = report.final_metrics[metric]
        if metric == "token_loss":
            score = -score  # higher is better on the frontier
        rows.append(
            {
                "label": label,
                "ratio": label.split("-")[-1],
                "kind": config.kind.value,
                "L": task.seq_len,
                "d_model": config.dims.d_model,
                "H": config.dims.H,
                "per_token_flops": rep.per_token_flops,
                "per_sequence_flops": rep.per_sequence_flops,
                "kv_cache_bytes": rep.kv_cache_bytes,
                "score": score,
            }
        )
    return rows


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    out = _prepare_out(args.out, cfg)
    cells, results, failures = _run_grid(cfg, out, args.seed)
    rows = _grid_rows(cfg, cells, results)
    (out / "grid.csv").write_text(costmodel.rows_to_csv(rows))
    for label, (_, _, _, report) in sorted(results.items()):
        m = report.final_metrics
        print(f"{label}: acc={m['accuracy']:.3f} loss={m['token_loss']:.3f}")
    return 1 if failures else 0


def independent_dominance_scan(points):
    """O(n^2) non-dominated filter written separately from costmodel.pareto."""
    keep = []
    for i, (f, s) in enumerate(points):
        dominated = any(
            (f2 <= f and s2 >= s and (f2, s2) != (f, s)) for j, (f2, s2) in enumerate(points) if j != i
        )
        if not dominated:
            keep.append((f, s))
    return sorted(keep)


def cmd_pareto(args):
    cfg = load_config(args.config, args.set)
    out = _prepare_out(args.out, cfg)
    cells, results, failures = _run_grid(cfg, out, args.seed)
    rows = _grid_rows(cfg, cells, results)
    (out / "grid.csv").write_text(costmodel.rows_to_csv(rows))
    points = [(r["per_sequence_flops"], r["score"]) for r in rows]
    front = costmodel.pareto(points)
    front_rows = [r for r in rows if (r["per_sequence_flops"], r["score"]) in set(front)]
    (out / "frontier.csv").write_text(costmodel.rows_to_csv(front_rows))
    check = independent_dominance_scan(points)
    if sorted(set(front)) != sorted(set(check)):
        print("error: frontier failed independent dominance re-check", file=sys.stderr)
        return 1
    print(f"frontier: {len(front)} of {len(points)} points")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    cfg = load_config(args.config, args.set)
    _check_keys(cfg, {"kind", "ratio", "model", "L"}, "report config")
    kind = MixerKind(cfg.get("kind", "hgrn2"))
    ratio = parse_ratio(cfg.get("ratio", 3))
    config = model_config(cfg.get("model", {}), kind, ratio)
    L = int(cfg.get("L", config.dims.L))
    out = _prepare_out(args.out, cfg)
    rep = costmodel.model_flops(config, L)
    cache = hybrid.cache_report(config, L)
    payload = {
        "schedule": hybrid.build_schedule(config),
        "per_token_flops": rep.per_token_flops,
        "per_sequence_flops": rep.per_sequence_flops,
        "per_model_flops": rep.per_model_flops,
        "breakdown": rep.breakdown,
        "kv_cache_bytes": cache.kv_cache_bytes,
        "linear_state_bytes": cache.linear_state_bytes,
        "total_cache_bytes": cache.total_bytes,
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mixerforge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    sp = sub.add_parser("equiv", help="scan-vs-oracle and reduction-lattice checks")
    common(sp)
    sp.add_argument("--kinds", default="all", help="comma-separated mixer kinds or 'all'")
    sp.add_argument("--L", type=int, default=64)
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_equiv)

    for name, fn, help_text in [
        ("flops", cmd_flops, "emit cost-model CSV sweeps"),
        ("train", cmd_train, "train a grid of (kind, ratio) cells"),
        ("pareto", cmd_pareto, "train a grid and emit the Pareto frontier"),
        ("report", cmd_report, "cost/cache summary for one configuration"),
    ]:
        sp = sub.add_parser(name, help=help_text)
        common(sp)
        sp.set_defaults(fn=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliConfigError, mixers.MixerError, hybrid.ConfigError, tasks.TaskError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
