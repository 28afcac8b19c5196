"""End-to-end acceptance checks, one test per criterion.

Each test prints a single `criterion N: PASS|FAIL ...` line to the terminal
(even under output capture) before asserting. The training-heavy criteria
share one pair of default-config pipeline runs built by a module fixture.
"""

import dataclasses
import json
import os
import time

import numpy as np
import pytest

from mtnas import numerics as nx
from mtnas.cli import main
from mtnas.config import RunConfig
from mtnas.evolution import EvoSettings, compare_on_common_pool, delta_T, evolve, population_gammas, random_search
from mtnas.search_space import (
    CellConfig, LayerId, MultiTaskGraph, Skeleton, count_params, enumerate_skeletons, full_graph,
    sample_cell_config, space_cardinality, union_skeletons,
)
from mtnas.skeleton_search import SkeletonDistribution, aggregate_loss, discretize, gumbel_soft_select, loss_matrix
from mtnas.supernet import init_supernet, load_checkpoint, slice_subnet
from mtnas.tasks import MetricSpec, default_tasks, generate_dataset, metric_specs, split_dataset
from mtnas.training import evaluate_subnet, train_supernet
from mtnas.transformer import BlockWeights, forward_features, run_head, wsa_block

from oracles import GRAPH, KERNELS, SURROGATE, brute_force_params, kernel_cases, surrogate


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return emit


# ---------------------------------------------------------------- 1-5: exact checks


def test_criterion_1_search_space_exactness(report):
    t0 = time.perf_counter()
    n_single, n_multi = len(enumerate_skeletons("single")), len(enumerate_skeletons("multi"))
    c_single, c_multi = space_cardinality("single", 16), space_cardinality("multi", 16)
    elapsed = time.perf_counter() - t0
    ok = (n_single, n_multi) == (10, 24) and c_single == 10**16 and c_multi == 24**16 and elapsed < 1.0
    assert report(1, ok, f"{n_single}/{n_multi} skeletons, cardinalities exact, {elapsed * 1e3:.1f} ms")


def test_criterion_2_union_example(report):
    g = union_skeletons({1: Skeleton((LayerId(1, 1),)), 2: Skeleton((LayerId(2, 2),))})
    expected = {"patch_embed", "b1", "pool1", "b2", "head1", "head2"}
    assert report(2, g.component_ids == expected, ", ".join(sorted(g.component_ids)))


def _wsa_case(rng):
    e, hid = 4, 8
    blk = BlockWeights(*(nx.parameter(rng.normal(scale=0.3, size=s)) for s in
                         ((3 * e, e), (3 * e,), (e, e), (e,), (hid, e), (hid,), (e, hid), (e,))),
                       nx.parameter(1 + rng.normal(scale=0.1, size=e)), nx.parameter(rng.normal(scale=0.1, size=e)),
                       nx.parameter(1 + rng.normal(scale=0.1, size=e)), nx.parameter(rng.normal(scale=0.1, size=e)))
    x = nx.parameter(rng.normal(size=(1, 4, 4, e)))
    probe = rng.normal(size=(1, 4, 4, e))
    params = [x] + [getattr(blk, f) for f in BlockWeights.FIELDS]

    def f(ps):
        return nx.sum(nx.mul(wsa_block(ps[0], blk, 2, 2), probe))
    return f, params


def _eqn5_case(rng):
    logits, w = nx.parameter(rng.normal(size=(2, 2))), nx.parameter(rng.normal(size=(2, 2)))
    x, noise = rng.normal(size=(2, 1)), rng.gumbel(size=(2, 2))
    skel = tuple(enumerate_skeletons("single")[:2])

    def f(ps):
        u = gumbel_soft_select(SkeletonDistribution(skel, ps[0], tau=0.8), noise=noise)
        h = nx.matmul(ps[1], nx.Tensor(x))
        rows = [[nx.reshape(nx.scale(nx.mul(nx.slice(h, [(s, s + 1), (0, 1)]), nx.slice(h, [(s, s + 1), (0, 1)])),
                                     k + 1.0), ()) for k in range(2)] for s in range(2)]
        return aggregate_loss(loss_matrix(rows), u, [1.0, 2.0])
    return f, [logits, w]


def test_criterion_3_gradient_suite(report):
    t0 = time.perf_counter()
    errors = {}
    for seed in range(3):
        rng = np.random.default_rng(seed)
        cases = kernel_cases(rng)
        for name in KERNELS:
            fn, arrays = cases[name]
            params = [nx.parameter(a) for a in arrays]
            probe = rng.normal(size=fn(*params).shape)
            err = nx.finite_diff_check(lambda ps: nx.sum(nx.mul(fn(*ps), probe)), params)
            errors[name] = max(errors.get(name, 0.0), err)
        errors["wsa_block"] = max(errors.get("wsa_block", 0.0), nx.finite_diff_check(*_wsa_case(rng)))
        errors["eqn5_2x2"] = max(errors.get("eqn5_2x2", 0.0), nx.finite_diff_check(*_eqn5_case(rng)))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(v < 1e-4 for v in errors.values()) and elapsed < 120
    assert report(3, ok, f"{len(errors)} checks, worst {worst} rel-err {errors[worst]:.1e}, {elapsed:.1f} s")


def test_criterion_4_weight_sharing(report, space):
    tasks = default_tasks()
    sn = init_supernet(space, full_graph("single", [t.head for t in tasks]), seed=0)
    rng = np.random.default_rng(4)
    for p in sn.params.values():
        p.data += rng.normal(scale=0.05, size=p.shape)
    image = np.stack([s.image for s in generate_dataset(2, seed=3)])

    def outputs(weights, cfg):
        feats = forward_features(weights, cfg, image, sn.graph.layers, space.patch_size)
        return [run_head(feats, weights, sn.graph.head(t), sn.graph.attach(t), (64, 64), space.patch_size)
                for t in sn.graph.tasks]

    worst_diff, leaked = 0.0, 0
    for _ in range(20):
        cfg = sample_cell_config(space, rng)
        view = slice_subnet(sn, cfg)
        with nx.no_grad():
            shared, alone = outputs(view.tensors(sn), cfg), outputs(view.copy_out(sn), cfg)
        worst_diff = max(worst_diff, max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(shared, alone)))
    for _ in range(3):
        cfg = sample_cell_config(space, rng)
        view = slice_subnet(sn, cfg)
        nx.zero_grad(sn.parameters())  # .grad accumulates across backward calls
        outs = outputs(view.tensors(sn), cfg)
        loss = outs[0] if len(outs) == 1 else nx.add(nx.mean(outs[0]), nx.mean(outs[-1]))
        names = sorted(sn.params)
        for name, g in zip(names, nx.backward(nx.mean(loss), [sn.params[n] for n in names])):
            mask = np.zeros(g.shape, dtype=bool)
            for piece in view.slices.get(name, ()):
                mask[tuple(np.s_[a:b] for a, b in piece)] = True
            leaked += int(np.count_nonzero(g[~mask]))
    ok = worst_diff <= 1e-12 and leaked == 0
    assert report(4, ok, f"max |view - copy| {worst_diff:.1e}, {leaked} non-zero out-of-slice gradients")


def test_criterion_5_gumbel_and_gamma_identities(report):
    rng = np.random.default_rng(5)
    skel = tuple(enumerate_skeletons("single"))
    col_err = 0.0
    for _ in range(200):
        d = SkeletonDistribution(skel, nx.Tensor(rng.normal(scale=5, size=(10, 4))), tau=float(rng.uniform(0.05, 5)))
        col_err = max(col_err, float(np.max(np.abs(gumbel_soft_select(d, rng).data.sum(axis=0) - 1))))

    specs = [MetricSpec("a", "acc", False), MetricSpec("a", "err", True), MetricSpec("b", "l1", True)]
    sum_err, rank_ok = 0.0, True
    for _ in range(200):
        vals = rng.uniform(0.05, 50, size=(int(rng.integers(1, 30)), 3))
        tables = [{"a": {"acc": v[0], "err": v[1]}, "b": {"l1": v[2]}} for v in vals]
        g = population_gammas(tables, specs)
        sum_err = max(sum_err, abs(float(g.sum())))
        j, c = int(rng.integers(3)), float(rng.uniform(1e-3, 1e3))
        scaled = vals.copy()
        scaled[:, j] *= c
        g2 = population_gammas([{"a": {"acc": v[0], "err": v[1]}, "b": {"l1": v[2]}} for v in scaled], specs)
        rank_ok &= bool(np.all(np.diff(g2[np.argsort(-g, kind="stable")]) <= 1e-12))

    acc = [MetricSpec("t", "acc", False)]
    mixed = [MetricSpec("a", "acc", False), MetricSpec("b", "err", True)]
    dts = [delta_T({"t": {"acc": 100.0}}, {"t": {"acc": 100.0}}, acc),
           delta_T({"t": {"acc": 110.0}}, {"t": {"acc": 100.0}}, acc),
           delta_T({"a": {"acc": 105.0}, "b": {"err": 0.09}}, {"a": {"acc": 100.0}, "b": {"err": 0.10}}, mixed)]
    dt_ok = all(abs(a - b) <= 1e-12 for a, b in zip(dts, [0.0, 10.0, 7.5]))
    ok = col_err <= 1e-12 and sum_err <= 1e-12 and rank_ok and dt_ok
    assert report(5, ok, f"U' column err {col_err:.1e}, sum gamma {sum_err:.1e}, rescale-invariant {rank_ok}, "
                         f"delta_T {[round(d, 12) for d in dts]}")


# ---------------------------------------------------------------- 6-8: desk-scale runs


def _run_pipeline(root):
    os.environ["MTNAS_OUTPUT_ROOT"] = str(root)
    codes = [main([cmd]) for cmd in ("train", "search", "report")]
    return codes, root / RunConfig().output_dir


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Two independent default-config runs of train -> search -> report."""
    prev = os.environ.get("MTNAS_OUTPUT_ROOT")
    try:
        t0 = time.process_time()
        codes_a, dir_a = _run_pipeline(tmp_path_factory.mktemp("run_a"))
        cpu_a = time.process_time() - t0
        codes_b, dir_b = _run_pipeline(tmp_path_factory.mktemp("run_b"))
    finally:
        if prev is None:
            os.environ.pop("MTNAS_OUTPUT_ROOT", None)
        else:
            os.environ["MTNAS_OUTPUT_ROOT"] = prev
    return {"codes": codes_a + codes_b, "a": dir_a, "b": dir_b, "cpu_a": cpu_a}


def _last_epoch_mean(hist, key):
    return hist.epoch_means(key)[-1]


def test_criterion_6_training_behaviour(report, pipeline):
    cfg = RunConfig()
    train, _, _ = split_dataset(generate_dataset(cfg.data.n_scenes, cfg.data.seed))
    tasks = default_tasks()
    t0 = time.process_time()

    manifest = json.loads((pipeline["a"] / "train_manifest.json").read_text())
    losses = manifest["epoch_total_loss"]
    reduction = 1 - losses[-1] / losses[0]
    entropy = float(np.mean(list(manifest["final_entropy"].values())))
    with open(pipeline["a"] / "history.csv") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh]
    col = header.index("loss_edge")
    last_epoch = [r for r in rows if r[1] == rows[-1][1]]
    gumbel_edge = [float(np.mean([float(r[col]) for r in last_epoch]))]

    uniform_edge = []
    for seed in range(5):
        if seed > 0:
            sn = init_supernet(load_checkpoint(pipeline["a"] / "supernet.ckpt").space,
                               full_graph(cfg.mode, [t.head for t in tasks]), seed)
            hist = train_supernet(sn, tasks, train, cfg.train_settings(seed))
            gumbel_edge.append(_last_epoch_mean(hist, "loss_edge"))
        sn = init_supernet(load_checkpoint(pipeline["a"] / "supernet.ckpt").space,
                           full_graph(cfg.mode, [t.head for t in tasks]), seed)
        settings = dataclasses.replace(cfg.train_settings(seed), sampling="uniform")
        uniform_edge.append(_last_epoch_mean(train_supernet(sn, tasks, train, settings), "loss_edge"))
    cpu_min = (pipeline["cpu_a"] + time.process_time() - t0) / 60

    wins = sum(u > g for u, g in zip(uniform_edge, gumbel_edge))
    ok = reduction >= 0.30 and entropy < 0.5 * np.log(10) and wins >= 4 and cpu_min <= 15
    pairs = " ".join(f"{g:.4f}/{u:.4f}" for g, u in zip(gumbel_edge, uniform_edge))
    assert report(6, ok, f"loss -{reduction:.1%}, mean entropy {entropy:.3f} < {0.5 * np.log(10):.3f}, "
                         f"edge gumbel/uniform {pairs}, uniform higher in {wins}/5, {cpu_min:.1f} CPU-min")


def test_criterion_7_search_behaviour(report, pipeline, space):
    # analytic surrogate: parameter count close to a target
    surrogate_wins, monotone = 0, True
    for seed in range(5):
        ev, params = surrogate(space, 120_000)
        res = evolve(space, GRAPH.layers, ev, SURROGATE, params, EvoSettings(seed=seed))
        rnd = random_search(space, GRAPH.layers, ev, SURROGATE, params, len(res.pool), None,
                            np.random.default_rng([seed, 1]))
        g_evo, g_rnd = compare_on_common_pool(res, rnd, SURROGATE)
        surrogate_wins += g_evo >= g_rnd
        best = [r["best_gamma"] for r in res.history]
        monotone &= len(best) == 21 and all(a <= b for a, b in zip(best, best[1:]))

    # trained desk supernet from the pipeline run, validation split
    sn = load_checkpoint(pipeline["a"] / "supernet.ckpt")
    cfg = RunConfig()
    tasks, specs = default_tasks(), metric_specs(default_tasks())
    _, val, _ = split_dataset(generate_dataset(cfg.data.n_scenes, cfg.data.seed))
    _, assign = discretize(sn.dist)
    graph = union_skeletons(assign, [t.head for t in tasks])
    budget = max(cfg.budgets)
    cache, desk_wins, margins = {}, 0, []
    for seed in range(5):
        def ev(c):
            return evaluate_subnet(sn, c, graph, tasks, val)

        def params(c):
            return count_params(graph, c, sn.space)

        res = evolve(sn.space, graph.layers, ev, specs, params, EvoSettings(constraint=budget, seed=seed), cache)
        rnd = random_search(sn.space, graph.layers, ev, specs, params, len(res.pool), budget,
                            np.random.default_rng([seed, 7]), cache)
        g_evo, g_rnd = compare_on_common_pool(res, rnd, specs)
        desk_wins += g_evo >= g_rnd
        margins.append(g_evo - g_rnd)
        best = [r["best_gamma"] for r in res.history]
        monotone &= len(best) == 21 and all(a <= b for a, b in zip(best, best[1:]))

    ok = monotone and surrogate_wins >= 4 and desk_wins >= 4
    assert report(7, ok, f"best-so-far monotone {monotone}, evolve >= random: surrogate {surrogate_wins}/5, "
                         f"desk {desk_wins}/5 (margins {' '.join(f'{m:+.4f}' for m in margins)})")


def test_criterion_8_pipeline_smoke(report, pipeline):
    a, b = pipeline["a"], pipeline["b"]
    files_a = sorted(p.name for p in a.iterdir())
    files_b = sorted(p.name for p in b.iterdir())
    identical = files_a == files_b and all((a / n).read_bytes() == (b / n).read_bytes() for n in files_a)

    graph = MultiTaskGraph.from_dict(json.loads((a / "graph.json").read_text())["graph"])
    space = load_checkpoint(a / "supernet.ckpt").space
    within = []
    for budget in RunConfig().budgets:
        sub = json.loads((a / f"subnet_{budget}.json").read_text())
        n = brute_force_params(graph, CellConfig.from_dict(sub["cell_config"]), space)
        within.append(n == sub["params"] and n <= budget)
    ok = pipeline["codes"] == [0] * 6 and identical and all(within)
    assert report(8, ok, f"exit codes {pipeline['codes']}, {len(files_a)} artifacts byte-identical {identical}, "
                         f"budgets satisfied {within}")

