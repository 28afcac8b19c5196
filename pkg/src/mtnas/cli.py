"""Command line pipeline: train -> search -> report.

Every command writes into $MTNAS_OUTPUT_ROOT/<output_dir> (default root:
./runs) and leaves a manifest with the config hash and artifact digests.
Exit codes: 0 ok, 2 bad config / missing inputs / undefined metrics, 3 incomplete run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mtnas.config import RunConfig, load_config, validate
from mtnas.errors import ConfigError, ConstraintError, MetricError, PersistenceError
from mtnas.evolution import compare_on_common_pool, delta_T, evolve, random_search
from mtnas.search_space import count_params, full_graph, get_preset, union_skeletons
from mtnas.skeleton_search import discretize
from mtnas.supernet import init_supernet, load_checkpoint, save_checkpoint
from mtnas.tasks import default_tasks, generate_dataset, metric_specs, select_tasks, split_dataset
from mtnas.training import evaluate_subnet, train_single_task_baseline, train_supernet

log = logging.getLogger("mtnas")

OUTPUT_ROOT_ENV = "MTNAS_OUTPUT_ROOT"
CHECKPOINT = "supernet.ckpt"
EXIT_OK, EXIT_CONFIG, EXIT_INCOMPLETE = 0, 2, 3


class Incomplete(Exception):
    pass


def run_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / cfg.output_dir


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, name: str, cfg: RunConfig, artifacts, **extra) -> None:
    _write_json(out / name, {
        "config_hash": cfg.hash,
        "config": cfg.to_dict(),
        "artifacts": {a: _sha256(out / a) for a in sorted(artifacts)},
        **extra,
    })


def _data(cfg: RunConfig):
    return split_dataset(generate_dataset(cfg.data.n_scenes, cfg.data.seed))


def _tasks(cfg: RunConfig):
    return select_tasks(default_tasks(), cfg.tasks)


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, single_task: bool = False) -> int:
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    train, _, test = _data(cfg)
    tasks = _tasks(cfg)
    space = get_preset(cfg.preset)
    settings = cfg.train_settings()

    if single_task:
        metrics, skeletons, files = {}, {}, []
        for t in tasks:
            log.info("single-task baseline: %s", t.id)
            m, skel, hist = train_single_task_baseline(t, train, test, settings, space, cfg.mode)
            metrics[t.id], skeletons[t.id] = m, skel.to_dict()
            name = f"baseline_history_{t.id}.csv"
            hist.write_csv(out / name)
            files.append(name)
        _write_json(out / "baseline.json", {"config_hash": cfg.hash, "split": "test",
                                            "metrics": metrics, "skeletons": skeletons})
        _write_manifest(out, "baseline_manifest.json", cfg, files + ["baseline.json"])
        return EXIT_OK

    sn = init_supernet(space, full_graph(cfg.mode, [t.head for t in tasks]), cfg.seed,
                       settings.tau0, settings.tau_min)
    hist = train_supernet(sn, tasks, train, settings)
    save_checkpoint(sn, out / CHECKPOINT, extra={"config_hash": cfg.hash})
    hist.write_csv(out / "history.csv")
    losses = hist.epoch_means("total_loss")
    _write_manifest(out, "train_manifest.json", cfg, [CHECKPOINT, "history.csv"],
                    epoch_total_loss=losses,
                    final_entropy={t.id: float(e) for t, e in zip(tasks, sn.dist.entropy())})
    log.info("epoch-mean total loss %s", " ".join(f"{v:.4f}" for v in losses))
    return EXIT_OK


def _candidate_rows(source, result, gammas):
    return [[source, c.key, c.generation, c.params, repr(float(g))] for c, g in zip(result.pool, gammas)]


def cmd_search(cfg: RunConfig) -> int:
    out = run_dir(cfg)
    ckpt = out / CHECKPOINT
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run `mtnas train` first")
    sn = load_checkpoint(ckpt)
    _, val, test = _data(cfg)
    tasks = _tasks(cfg)
    specs = metric_specs(tasks)

    # stage 1: task-favoured skeletons and their union
    _, assignment = discretize(sn.dist)
    graph = union_skeletons(assignment, [t.head for t in tasks])
    _write_json(out / "graph.json", {
        "config_hash": cfg.hash,
        "assignment": {t.id: assignment[t.head.task].to_dict() for t in tasks},
        "components": list(graph.component_ids),
        "graph": graph.to_dict(),
    })
    log.info("union graph: %s", ", ".join(graph.component_ids))

    # stage 2: cell search per budget on the frozen supernet
    cache: dict = {}

    def evaluate(c):
        return evaluate_subnet(sn, c, graph, tasks, val)

    def params(c):
        return count_params(graph, c, sn.space)

    files = ["graph.json"]
    comparison = {}
    for budget in cfg.budgets:
        settings = cfg.evo_settings(budget)
        res = evolve(sn.space, graph.layers, evaluate, specs, params, settings, cache)
        res.write_report(out / f"evolve_{budget}.csv")
        rows = _candidate_rows("evolve", res, [c.gamma for c in res.pool])
        files += [f"evolve_{budget}.csv"]
        if cfg.random_baseline:
            rnd = random_search(sn.space, graph.layers, evaluate, specs, params, len(res.pool), budget,
                                np.random.default_rng([cfg.seed, budget]), cache)
            rnd.write_report(out / f"random_{budget}.csv")
            rows += _candidate_rows("random", rnd, [c.gamma for c in rnd.pool])
            files.append(f"random_{budget}.csv")
            ev_g, rnd_g = compare_on_common_pool(res, rnd, specs)
            comparison[str(budget)] = {"evolve_gamma": ev_g, "random_gamma": rnd_g,
                                       "evaluations": len(res.pool)}
        with open(out / f"candidates_{budget}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "key", "generation", "params", "gamma"])
            w.writerows(rows)
        best = res.best
        _write_json(out / f"subnet_{budget}.json", {
            "config_hash": cfg.hash,
            "budget": budget,
            "params": best.params,
            "gamma": best.gamma,
            "val_metrics": best.metrics,
            "test_metrics": evaluate_subnet(sn, best.cfg, graph, tasks, test),
            "cell_config": best.cfg.to_dict(),
        })
        files += [f"candidates_{budget}.csv", f"subnet_{budget}.json"]
        log.info("budget %d: best params %d gamma %.4f", budget, best.params, best.gamma)
    _write_manifest(out, "search_manifest.json", cfg, files, budgets=list(cfg.budgets),
                    comparison=comparison)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    out = run_dir(cfg)
    manifest = out / "search_manifest.json"
    if not manifest.exists():
        raise Incomplete(f"{out} has no completed search")
    budgets = json.loads(manifest.read_text())["budgets"]
    needed = [f"subnet_{b}.json" for b in budgets] + [f"candidates_{b}.csv" for b in budgets]
    missing = [n for n in needed if not (out / n).exists()]
    if missing:
        raise Incomplete(f"{out} is missing {missing}")
    specs = metric_specs(_tasks(cfg))

    scatter = [["budget", "source", "key", "params", "gamma"]]
    for b in budgets:
        with open(out / f"candidates_{b}.csv", newline="") as fh:
            scatter += [[b, r["source"], r["key"], r["params"], r["gamma"]] for r in csv.DictReader(fh)]
    with open(out / "scatter.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(scatter)

    subnets = {b: json.loads((out / f"subnet_{b}.json").read_text()) for b in budgets}
    lines = [f"config {cfg.hash}", "best subnet per budget:"]
    for b, s in subnets.items():
        lines.append(f"  budget {b}: params {s['params']} gamma {s['gamma']:+.4f}")
    files = ["scatter.csv", "summary.txt"]

    baseline_path = out / "baseline.json"
    if baseline_path.exists():
        base = json.loads(baseline_path.read_text())["metrics"]
        table = [["model", "params", "delta_t_percent"], ["single-task baseline", "", repr(delta_T(base, base, specs))]]
        lines.append("delta_T vs single-task baseline (test split):")
        for b, s in subnets.items():
            d = delta_T(s["test_metrics"], base, specs)
            table.append([f"budget_{b}", s["params"], repr(d)])
            lines.append(f"  budget {b}: {d:+.2f}%")
        with open(out / "delta_t.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(table)
        files.append("delta_t.csv")
    else:
        lines.append("delta_T: no baseline.json (run `mtnas train --single-task`)")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "report_manifest.json", cfg, files)
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtnas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "search", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults to the built-in desk config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name == "train":
            p.add_argument("--single-task", action="store_true", help="train per-task baselines for delta_T")
        if name in ("search", "report"):
            p.add_argument("--budget", type=int, action="append", help="parameter budget (repeatable)")
        if name == "search":
            p.add_argument("--random-baseline", action=argparse.BooleanOptionalAction, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        validate(cfg)
        cfg = cfg.with_overrides(seed=args.seed, budgets=getattr(args, "budget", None))
        if getattr(args, "random_baseline", None) is not None:
            cfg = dataclasses.replace(cfg, random_baseline=args.random_baseline)
        if args.command == "train":
            return cmd_train(cfg, args.single_task)
        if args.command == "search":
            return cmd_search(cfg)
        return cmd_report(cfg)
    except (ConfigError, ConstraintError, MetricError, PersistenceError) as exc:
        print(f"mtnas {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Incomplete as exc:
        print(f"mtnas report: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE


if __name__ == "__main__":
    sys.exit(main())
