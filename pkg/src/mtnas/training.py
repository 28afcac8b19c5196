"""Joint supernet training with skeleton search, and subnet evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mtnas import numerics as nx
from mtnas.errors import ArgumentError, NumericsError
from mtnas.numerics import Tensor
from mtnas.search_space import CellConfig, MultiTaskGraph, full_graph, sample_cell_config, union_skeletons
from mtnas.skeleton_search import (
    aggregate_loss, anneal_tau, discretize, gumbel_soft_select, loss_matrix, uniform_select,
)
from mtnas.supernet import AdamW, Supernet, init_supernet, lr_at, sandwich_sample, slice_subnet
from mtnas.tasks import Scene, TaskSpec, collate, evaluate, select_tasks
from mtnas.transformer import forward_features, run_head

log = logging.getLogger(__name__)

IMAGE_HW = (64, 64)


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 2e-3
    lr_min: float = 2e-5
    weight_decay: float = 0.05
    warmup_epochs: float = 1.0
    arch_lr: float = 0.2
    tau0: float = 5.0
    tau_min: float = 0.1
    sampling: str = "gumbel"  # gumbel | uniform
    seed: int = 0

    def __post_init__(self):
        if self.sampling not in ("gumbel", "uniform"):
            raise ArgumentError(f"unknown skeleton sampling {self.sampling!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be >= 1")


@dataclass
class History:
    task_ids: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def epoch_means(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.rows:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    @property
    def columns(self) -> list[str]:
        return (["step", "epoch", "tau", "lr", "total_loss"]
                + [f"loss_{t}" for t in self.task_ids] + [f"entropy_{t}" for t in self.task_ids])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in self.columns])


def _skeleton_losses(weights, cfg: CellConfig, batch, tasks: Sequence[TaskSpec], skeletons,
                     space, u: np.ndarray | None) -> list[list[Tensor]]:
    used = [s for i, s in enumerate(skeletons) if u is None or u[i].any()]
    layers = sorted({lid for s in used for lid in s.layers()})
    feats = forward_features(weights, cfg, batch.image, layers, space.patch_size)
    zero = Tensor(0.0)
    rows = []
    for si, s in enumerate(skeletons):
        row = []
        for ti, t in enumerate(tasks):
            if u is not None and u[si, ti] == 0.0:
                row.append(zero)
                continue
            try:
                out = run_head(feats, weights, t.head, s.outputs, IMAGE_HW, space.patch_size)
                row.append(t.compute_loss(out, batch))
            except NumericsError as exc:
                raise NumericsError(f"skeleton {s.name}, task {t.id}: {exc}") from exc
        rows.append(row)
    return rows


def train_supernet(sn: Supernet, tasks: Sequence[TaskSpec], scenes: Sequence[Scene],
                   settings: TrainSettings, fixed_cfg: CellConfig | None = None) -> History:
    """Sandwich-rule supernet training with per-task skeleton selection.

    Each iteration draws one selection matrix (Gumbel-softmax, or one-hot
    uniform in ablation mode) shared by the four sandwich subnets, sums their
    weighted loss matrices, and takes one optimizer step on the weights and
    the skeleton logits. With `fixed_cfg` only that config is trained.
    """
    if not scenes:
        raise ArgumentError("empty training set")
    rng = np.random.default_rng(settings.seed)
    dist = sn.dist
    skeletons = dist.skeletons
    weights_lambda = [t.weight for t in tasks]
    n = len(scenes)
    per_epoch = -(-n // settings.batch_size)
    total = settings.epochs * per_epoch
    warmup = int(round(settings.warmup_epochs * per_epoch))
    opt = AdamW(sn.parameters(), weight_decay=settings.weight_decay)
    arch_opt = AdamW([dist.logits], weight_decay=0.0)
    hist = History(tuple(t.id for t in tasks))
    layers = sn.graph.layers

    it = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, settings.batch_size):
            batch = collate([scenes[i] for i in order[b0:b0 + settings.batch_size]])
            dist.tau = anneal_tau(it, total - 1, dist)
            if settings.sampling == "gumbel":
                u = gumbel_soft_select(dist, rng)
                mask = None
            else:
                u = uniform_select(len(skeletons), len(tasks), rng)
                mask = u.data
            configs = [fixed_cfg] if fixed_cfg is not None else sandwich_sample(sn.space, rng, layers)
            objective = None
            task_loss = np.zeros(len(tasks))
            for j, cfg in enumerate(configs):
                try:
                    weights = slice_subnet(sn, cfg).tensors(sn)
                    rows = _skeleton_losses(weights, cfg, batch, tasks, skeletons, sn.space, mask)
                    lm = loss_matrix(rows)
                    l = aggregate_loss(lm, u, weights_lambda)
                except NumericsError as exc:
                    raise NumericsError(f"iteration {it}, subnet {j}: {exc}") from exc
                task_loss += (u.data * lm.data).sum(axis=0)
                objective = l if objective is None else nx.add(objective, l)
            nx.backward(objective)
            if not np.isfinite(objective.item()):
                raise NumericsError(f"iteration {it}: non-finite objective")
            lr = lr_at(it, total, settings.lr, settings.lr_min, warmup)
            opt.step(lr)
            if settings.sampling == "gumbel":
                arch_opt.step(settings.arch_lr)
            opt.zero_grad()
            arch_opt.zero_grad()
            sn.step += 1

            row = {"step": it, "epoch": epoch, "tau": float(dist.tau), "lr": float(lr),
                   "total_loss": objective.item() / len(configs)}
            ent = dist.entropy()
            for k, t in enumerate(tasks):
                row[f"loss_{t.id}"] = float(task_loss[k] / len(configs))
                row[f"entropy_{t.id}"] = float(ent[k])
            hist.rows.append(row)
            it += 1
        log.info("epoch %d: loss %.4f tau %.3f", epoch, hist.epoch_means("total_loss")[-1], dist.tau)
    return hist


def predict(sn: Supernet, cfg: CellConfig, graph: MultiTaskGraph, tasks: Sequence[TaskSpec],
            scenes: Sequence[Scene], batch_size: int = 32) -> dict[str, np.ndarray]:
    """Raw head outputs of subnet `cfg` on `graph`, one array per task."""
    view = slice_subnet(sn, cfg, graph)
    outs: dict[str, list[np.ndarray]] = {t.id: [] for t in tasks}
    with nx.no_grad():
        weights = view.tensors(sn)
        for b0 in range(0, len(scenes), batch_size):
            batch = collate(scenes[b0:b0 + batch_size])
            feats = forward_features(weights, cfg, batch.image, graph.layers, sn.space.patch_size)
            for t in tasks:
                y = run_head(feats, weights, t.head, graph.attach(t.head.task), IMAGE_HW, sn.space.patch_size)
                outs[t.id].append(y.data)
    return {k: np.concatenate(v) for k, v in outs.items()}


def evaluate_subnet(sn: Supernet, cfg: CellConfig, graph: MultiTaskGraph, tasks: Sequence[TaskSpec],
                    scenes: Sequence[Scene]) -> dict[str, dict[str, float]]:
    return evaluate(predict(sn, cfg, graph, tasks, scenes), scenes, tasks)


def validation_loss_matrix(sn: Supernet, tasks: Sequence[TaskSpec], scenes: Sequence[Scene],
                           cfg: CellConfig | None = None) -> np.ndarray:
    """Loss of every (skeleton, task) pair on `scenes`, largest subnet by default."""
    cfg = cfg if cfg is not None else sample_cell_config(sn.space, None, "max", sn.graph.layers)
    with nx.no_grad():
        weights = slice_subnet(sn, cfg).tensors(sn)
        rows = _skeleton_losses(weights, cfg, collate(scenes), tasks, sn.dist.skeletons, sn.space, None)
    return np.array([[l.item() for l in row] for row in rows])


def select_by_validation(sn: Supernet, tasks: Sequence[TaskSpec], scenes: Sequence[Scene]) -> np.ndarray:
    """Uniform-sampling ablation: favour the skeleton with the lowest validation loss.

    Writes the negated loss matrix into the logits so `discretize` applies.
    """
    losses = validation_loss_matrix(sn, tasks, scenes)
    sn.dist.logits.data[...] = -losses
    return losses


def train_single_task_baseline(task: TaskSpec, train_scenes: Sequence[Scene], eval_scenes: Sequence[Scene],
                               settings: TrainSettings, space, mode: str):
    """Train the branched network on one task alone at the smallest config.

    The task still searches its own skeleton; the returned metrics come from
    that skeleton on `eval_scenes`.
    """
    (solo,) = select_tasks([task], [task.id])
    sn = init_supernet(space, full_graph(mode, [solo.head]), settings.seed, settings.tau0, settings.tau_min)
    cfg = sample_cell_config(space, None, "min", sn.graph.layers)
    hist = train_supernet(sn, [solo], train_scenes, settings, fixed_cfg=cfg)
    _, assignment = discretize(sn.dist)
    graph = union_skeletons(assignment, [solo.head])
    metrics = evaluate_subnet(sn, cfg.restrict(graph.layers), graph, [solo], eval_scenes)
    return metrics[task.id], assignment[1], hist
