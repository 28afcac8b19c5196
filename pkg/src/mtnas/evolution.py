"""Cell search over a frozen supernet: relative performance, mutation, crossover, evolution."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from mtnas.errors import ArgumentError, ConfigError, ConstraintError, MetricError
from mtnas.search_space import (
    CellConfig, CellSpace, LayerConfig, LayerId, _sample_block, sample_cell_config, sample_layer,
)
from mtnas.tasks import MetricSpec

MetricTable = Mapping[str, Mapping[str, float]]
EvalFn = Callable[[CellConfig], MetricTable]
ParamFn = Callable[[CellConfig], int]

MAX_TRIES = 100


# ---------------------------------------------------------------- relative performance


def _metric_matrix(tables: Sequence[MetricTable], specs: Sequence[MetricSpec]) -> np.ndarray:
    m = np.array([[float(t[s.task][s.name]) for s in specs] for t in tables], dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise MetricError("metric values must be finite")
    return m


def _relative(values: np.ndarray, ref: np.ndarray, specs: Sequence[MetricSpec]) -> np.ndarray:
    if np.any(ref == 0):
        bad = [f"{s.task}/{s.name}" for s, r in zip(specs, ref) if r == 0]
        raise MetricError(f"reference value is zero for {bad}")
    sign = np.array([-1.0 if s.lower_is_better else 1.0 for s in specs])
    return sign * (values - ref) / ref


def _task_average(rel: np.ndarray, specs: Sequence[MetricSpec]) -> np.ndarray:
    """Average metric columns within each task, then across tasks."""
    tasks = list(dict.fromkeys(s.task for s in specs))
    per_task = [rel[..., [i for i, s in enumerate(specs) if s.task == t]].mean(axis=-1) for t in tasks]
    return np.mean(per_task, axis=0)


def gamma_task(metrics: Mapping[str, float], pool: Sequence[Mapping[str, float]],
               specs: Sequence[MetricSpec]) -> float:
    """Relative performance on one task against the pool mean of each of its metrics."""
    if not pool:
        raise MetricError("empty population")
    if len({s.task for s in specs}) != 1:
        raise ArgumentError("gamma_task takes the metric specs of a single task")
    task = specs[0].task
    ref = _metric_matrix([{task: p} for p in pool], specs).mean(axis=0)
    x = _metric_matrix([{task: metrics}], specs)[0]
    return float(_relative(x, ref, specs).mean())


def population_gammas(tables: Sequence[MetricTable], specs: Sequence[MetricSpec],
                      pool: Sequence[MetricTable] | None = None) -> np.ndarray:
    """gamma(alpha) for every table, normalised by the mean over `pool` (default: the tables)."""
    if not tables:
        return np.zeros(0)
    pool = tables if pool is None else pool
    if not pool:
        raise MetricError("empty population")
    ref = _metric_matrix(pool, specs).mean(axis=0)
    return _task_average(_relative(_metric_matrix(tables, specs), ref, specs), specs)


def gamma_overall(metrics: MetricTable, pool: Sequence[MetricTable], specs: Sequence[MetricSpec]) -> float:
    return float(population_gammas([metrics], specs, pool)[0])


def delta_T(model: MetricTable, baseline: MetricTable, specs: Sequence[MetricSpec]) -> float:
    """Relative performance against a single-task baseline, in percent."""
    ref = _metric_matrix([baseline], specs)[0]
    rel = _relative(_metric_matrix([model], specs)[0], ref, specs)
    return 100.0 * float(_task_average(rel, specs))


# ---------------------------------------------------------------- variation


def config_hash(cfg: CellConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _resample_different(current, draw: Callable[[], object], n_options: int):
    """Draw until the value differs from `current` (or keep it when there is no alternative)."""
    if n_options <= 1:
        return current
    while True:
        v = draw()
        if v != current:
            return v


def mutate(parent: CellConfig, space: CellSpace, rng: np.random.Generator,
           p_layer: float = 0.4, p_block: float = 0.2) -> CellConfig:
    """Layer-level (embed, depth) mutation, then block-level (heads, mlp, window) mutation.

    A triggered mutation always moves to a different value. Blocks added by
    depth growth are sampled uniformly; shrinking keeps the leading blocks.
    """
    if not (0.0 <= p_layer <= 1.0 and 0.0 <= p_block <= 1.0):
        raise ArgumentError("mutation probabilities must lie in [0, 1]")
    out = {}
    for lid, lc in parent.layers:
        embed, depth, blocks = lc.embed_dim, lc.depth, list(lc.blocks)
        if rng.random() < p_layer:
            n = len(space.embeds(lid.level)) * len(space.depth_choices)
            embed, depth = _resample_different(
                (embed, depth),
                lambda: (int(rng.choice(space.embeds(lid.level))), int(rng.choice(space.depth_choices))), n)
            blocks = blocks[:depth] + [_sample_block(space, lid.level, rng, "uniform")
                                       for _ in range(depth - len(blocks))]
        n_block = len(space.heads(lid.level)) * len(space.mlp_ratio_choices) * len(space.window_choices)
        for i, b in enumerate(blocks):
            if rng.random() < p_block:
                blocks[i] = _resample_different(b, lambda: _sample_block(space, lid.level, rng, "uniform"), n_block)
        out[lid] = LayerConfig(embed, depth, tuple(blocks))
    return CellConfig.from_mapping(out)


def crossover(a: CellConfig, b: CellConfig, rng: np.random.Generator) -> CellConfig:
    """Each layer (with all of its blocks) comes from a or b with equal probability."""
    if a.layer_ids != b.layer_ids:
        raise ConfigError("crossover parents cover different layers")
    pick = rng.random(len(a.layers)) < 0.5
    return CellConfig.from_mapping({lid: (a[lid] if p else b[lid]) for lid, p in zip(a.layer_ids, pick)})


# ---------------------------------------------------------------- search


@dataclass
class Candidate:
    cfg: CellConfig
    metrics: MetricTable
    params: int
    gamma: float | None = None
    generation: int = 0

    @cached_property
    def key(self) -> str:
        return config_hash(self.cfg)


@dataclass(frozen=True)
class EvoSettings:
    population: int = 50
    generations: int = 20
    parents: int = 10
    p_mut_layer: float = 0.4
    p_mut_block: float = 0.2
    constraint: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.parents <= self.population:
            raise ArgumentError("need 1 <= parents <= population")
        if self.generations < 0:
            raise ArgumentError("generations must be >= 0")
        if not (0 <= self.p_mut_layer <= 1 and 0 <= self.p_mut_block <= 1):
            raise ArgumentError("mutation probabilities must lie in [0, 1]")

    @property
    def budget(self) -> int:
        """Upper bound on unique evaluations."""
        return self.population + self.generations * (self.population - self.parents)


@dataclass
class SearchResult:
    candidates: list[Candidate]          # ranked, best first
    pool: list[Candidate]                # every unique evaluation, in order
    history: list[dict] = field(default_factory=list)

    @property
    def best(self) -> Candidate:
        return self.candidates[0]

    def write_report(self, path) -> None:
        cols = ["generation", "best_gamma", "mean_gamma", "best_params"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.history:
                w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


class Evaluator:
    """Caches metric tables by config hash; `unique` counts distinct configs seen."""

    def __init__(self, fn: EvalFn, params: ParamFn, cache: dict | None = None):
        self.fn = fn
        self.params = params
        self.cache = {} if cache is None else cache
        self.seen: dict[str, Candidate] = {}

    def __call__(self, cfg: CellConfig, generation: int = 0) -> Candidate:
        key = config_hash(cfg)
        if key in self.seen:
            return self.seen[key]
        if key not in self.cache:
            self.cache[key] = (self.fn(cfg), self.params(cfg))
        metrics, params = self.cache[key]
        cand = Candidate(cfg, metrics, params, generation=generation)
        self.seen[key] = cand
        return cand

    @property
    def unique(self) -> int:
        return len(self.seen)


def _feasible(cfg: CellConfig, params: ParamFn, constraint: int | None) -> bool:
    return constraint is None or params(cfg) <= constraint


def _check_feasible(space: CellSpace, layers: Sequence[LayerId], params: ParamFn, constraint: int | None) -> None:
    smallest = sample_cell_config(space, None, "min", layers)
    if not _feasible(smallest, params, constraint):
        raise ConstraintError(f"smallest subnet has {params(smallest)} parameters, above the budget {constraint}")


def random_feasible(space: CellSpace, layers: Sequence[LayerId], rng: np.random.Generator,
                    params: ParamFn, constraint: int | None) -> CellConfig:
    """Uniform draw by rejection; after MAX_TRIES, shrink a draw to min embed/depth/mlp."""
    for _ in range(MAX_TRIES):
        cfg = sample_cell_config(space, rng, "uniform", layers)
        if _feasible(cfg, params, constraint):
            return cfg
    out = {}
    for lid in layers:
        lc = sample_layer(space, lid.level, rng, "uniform")
        blocks = tuple(type(b)(b.num_heads, space.mlp_ratio_choices[0], b.window)
                       for b in lc.blocks[:space.depth_choices[0]])
        out[lid] = LayerConfig(space.embeds(lid.level)[0], space.depth_choices[0], blocks)
    return CellConfig.from_mapping(out)


def _rank(cands: Sequence[Candidate], specs, pool: Sequence[Candidate]) -> list[Candidate]:
    g = population_gammas([c.metrics for c in cands], specs, [c.metrics for c in pool])
    for c, v in zip(cands, g):
        c.gamma = float(v)
    order = sorted(range(len(cands)), key=lambda i: (-g[i], cands[i].params, cands[i].key))
    return [cands[i] for i in order]


def _history(pool: Sequence[Candidate], populations: Sequence[Sequence[Candidate]], specs) -> list[dict]:
    """Per-generation best-so-far and population-mean gamma, normalised by the final pool."""
    final = population_gammas([c.metrics for c in pool], specs)
    by_key = {c.key: g for c, g in zip(pool, final)}
    rows = []
    best, best_params = -np.inf, 0
    for gen, popn in enumerate(populations):
        for c in pool:
            if c.generation == gen and by_key[c.key] > best:
                best, best_params = by_key[c.key], c.params
        rows.append({"generation": gen, "best_gamma": float(best),
                     "mean_gamma": float(np.mean([by_key[c.key] for c in popn])), "best_params": int(best_params)})
    return rows


def evolve(space: CellSpace, layers: Sequence[LayerId], evaluate: EvalFn, specs: Sequence[MetricSpec],
           params: ParamFn, settings: EvoSettings, cache: dict | None = None) -> SearchResult:
    """Elitist evolution: keep the top parents, refill with mutation and crossover children.

    Ranking uses gamma against the mean of every candidate evaluated so far.
    """
    _check_feasible(space, layers, params, settings.constraint)
    rng = np.random.default_rng(settings.seed)
    ev = Evaluator(evaluate, params, cache)
    limit = settings.constraint

    population = [ev(random_feasible(space, layers, rng, params, limit), 0) for _ in range(settings.population)]
    populations = [population]
    n_mut = (settings.population - settings.parents) // 2
    n_cross = settings.population - settings.parents - n_mut
    for gen in range(1, settings.generations + 1):
        pool = list(ev.seen.values())
        parents = _rank(list({c.key: c for c in population}.values()), specs, pool)[:settings.parents]
        children = []
        for j in range(n_mut + n_cross):
            for _ in range(MAX_TRIES):
                if j < n_mut:
                    p = parents[rng.integers(len(parents))]
                    child = mutate(p.cfg, space, rng, settings.p_mut_layer, settings.p_mut_block)
                else:
                    i, k = rng.choice(len(parents), size=2, replace=len(parents) < 2)
                    child = crossover(parents[i].cfg, parents[k].cfg, rng)
                if _feasible(child, params, limit):
                    break
            else:
                child = random_feasible(space, layers, rng, params, limit)
            children.append(ev(child, gen))
        population = parents + children
        populations.append(population)

    pool = list(ev.seen.values())
    ranked = _rank(pool, specs, pool)
    return SearchResult(ranked, pool, _history(pool, populations, specs))


def random_search(space: CellSpace, layers: Sequence[LayerId], evaluate: EvalFn, specs: Sequence[MetricSpec],
                  params: ParamFn, budget: int, constraint: int | None, rng: np.random.Generator,
                  cache: dict | None = None) -> SearchResult:
    """Uniform constraint-filtered sampling until `budget` unique configs are evaluated."""
    if budget < 1:
        raise ArgumentError("budget must be >= 1")
    _check_feasible(space, layers, params, constraint)
    ev = Evaluator(evaluate, params, cache)
    stall = 0
    while ev.unique < budget and stall < MAX_TRIES * budget:
        before = ev.unique
        ev(random_feasible(space, layers, rng, params, constraint), ev.unique)
        stall = stall + 1 if ev.unique == before else 0
    pool = list(ev.seen.values())
    ranked = _rank(pool, specs, pool)
    hist, best, running = [], -np.inf, 0.0
    for i, c in enumerate(pool):
        if c.gamma > best:
            best, best_params = c.gamma, c.params
        running += c.gamma
        hist.append({"generation": i, "best_gamma": float(best), "mean_gamma": running / (i + 1),
                     "best_params": int(best_params)})
    return SearchResult(ranked, pool, hist)


def compare_on_common_pool(a: SearchResult, b: SearchResult, specs: Sequence[MetricSpec]) -> tuple[float, float]:
    """Best gamma of each search, both normalised by the union of their evaluated pools."""
    merged = {c.key: c for c in a.pool + b.pool}
    ref = [c.metrics for c in merged.values()]
    ga = population_gammas([c.metrics for c in a.pool], specs, ref).max()
    gb = population_gammas([c.metrics for c in b.pool], specs, ref).max()
    return float(ga), float(gb)
