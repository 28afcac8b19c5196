"""Evolutionary search vs random search at equal evaluation budgets.

With --checkpoint the candidates are scored on the validation split with
weights inherited from a trained supernet; without it an analytic surrogate
(distance of the parameter count to --target) is used.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from mtnas.config import RunConfig, load_config
from mtnas.evolution import EvoSettings, compare_on_common_pool, evolve, random_search
from mtnas.search_space import HeadSpec, count_params, full_graph, get_preset, union_skeletons
from mtnas.skeleton_search import discretize
from mtnas.supernet import load_checkpoint
from mtnas.tasks import MetricSpec, default_tasks, generate_dataset, metric_specs, select_tasks, split_dataset
from mtnas.training import evaluate_subnet


def desk_problem(cfg: RunConfig, checkpoint: Path):
    sn = load_checkpoint(checkpoint)
    tasks = select_tasks(default_tasks(), cfg.tasks)
    _, val, _ = split_dataset(generate_dataset(cfg.data.n_scenes, cfg.data.seed))
    _, assign = discretize(sn.dist)
    graph = union_skeletons(assign, [t.head for t in tasks])
    return (sn.space, graph.layers, lambda c: evaluate_subnet(sn, c, graph, tasks, val),
            lambda c: count_params(graph, c, sn.space), metric_specs(tasks))


def surrogate_problem(cfg: RunConfig, target: int):
    space = get_preset(cfg.preset)
    graph = full_graph(cfg.mode, [HeadSpec(1, "dense", 1)])

    def params(c):
        return count_params(graph, c, space)

    return (space, graph.layers, lambda c: {"surrogate": {"gap": abs(params(c) - target) + 1.0}}, params,
            [MetricSpec("surrogate", "gap", True)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--checkpoint", type=Path)
    ap.add_argument("--target", type=int, default=120_000)
    ap.add_argument("--budget", type=int, help="parameter constraint (default: largest config budget)")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--population", type=int, default=50)
    ap.add_argument("--generations", type=int, default=20)
    ap.add_argument("--parents", type=int, default=10)
    ap.add_argument("--out", type=Path, default=Path("runs/evolve_vs_random.csv"))
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.checkpoint:
        space, layers, evaluate, params, specs = desk_problem(cfg, args.checkpoint)
        constraint = args.budget or max(cfg.budgets)
    else:
        space, layers, evaluate, params, specs = surrogate_problem(cfg, args.target)
        constraint = args.budget

    cache, rows = {}, []
    for seed in range(args.seeds):
        settings = EvoSettings(args.population, args.generations, args.parents, constraint=constraint, seed=seed)
        res = evolve(space, layers, evaluate, specs, params, settings, cache)
        rnd = random_search(space, layers, evaluate, specs, params, len(res.pool), constraint,
                            np.random.default_rng([seed, 7]), cache)
        g_evo, g_rnd = compare_on_common_pool(res, rnd, specs)
        rows.append({"seed": seed, "evaluations": len(res.pool), "evolve_gamma": g_evo, "random_gamma": g_rnd,
                     "evolve_params": res.best.params, "random_params": rnd.best.params})
        print(f"seed {seed}: evolve {g_evo:+.4f} random {g_rnd:+.4f} ({len(res.pool)} evaluations)", flush=True)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    wins = sum(r["evolve_gamma"] >= r["random_gamma"] for r in rows)
    print(f"evolve >= random in {wins}/{len(rows)} seeds")


if __name__ == "__main__":
    main()
