"""Shared weight store and prefix slicing of subnets.

Every weight is allocated at the cell-space maxima. A subnet reads the
leading rows/columns of each weight (per Q/K/V block for the attention
projection, per 2x2 neighbour group for patch merging), so smaller configs
always read a subset of what larger configs read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from mtnas import numerics as nx
from mtnas.errors import ConfigError, PersistenceError
from mtnas.numerics import Tensor
from mtnas.persistence import read_container, write_container
from mtnas.search_space import (
    CellConfig, CellSpace, LayerId, MultiTaskGraph, Skeleton, enumerate_skeletons, ffn_width,
    sample_cell_config, validate_config,
)
from mtnas.skeleton_search import SkeletonDistribution

CHECKPOINT_MAGIC = b"MTNASCK1"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02

Range = tuple[int, int]
Piece = tuple[Range, ...]


def _block_shapes(e: int, hid: int) -> dict[str, tuple[int, ...]]:
    return {
        "qkv_w": (3 * e, e), "qkv_b": (3 * e,), "proj_w": (e, e), "proj_b": (e,),
        "ffn1_w": (hid, e), "ffn1_b": (hid,), "ffn2_w": (e, hid), "ffn2_b": (e,),
        "ln1_g": (e,), "ln1_b": (e,), "ln2_g": (e,), "ln2_b": (e,),
    }


def weight_shapes(space: CellSpace, graph: MultiTaskGraph) -> dict[str, tuple[int, ...]]:
    """Full-size shape of every weight the graph's components own."""
    emax = {lid: space.max_embed(lid.level) for lid in graph.layers}
    p = space.patch_size
    shapes = {
        "patch_embed.weight": (emax[LayerId(1, 1)], p * p * space.in_channels),
        "patch_embed.bias": (emax[LayerId(1, 1)],),
    }
    for lid in graph.layers:
        e = emax[lid]
        hid = ffn_width(e, space.max_mlp_ratio)
        for i in range(space.max_depth):
            for f, s in _block_shapes(e, hid).items():
                shapes[f"{lid.name}.{i}.{f}"] = s
        src = lid.input_layer()
        if src is None:
            continue
        pre = f"pool{src.level}" if lid.is_encoder else f"up{lid.level}_{lid.encode_depth}"
        fan_in = 4 * emax[src] if lid.is_encoder else emax[src]
        shapes[f"{pre}.weight"] = (e, fan_in)
        shapes[f"{pre}.bias"] = (e,)
    for task, outs in graph.task_attach:
        h = graph.head(task)
        width = h.out_dim if h.kind == "dense" else h.hidden
        for lid in outs:
            shapes[f"head{task}.{lid.name}.weight"] = (width, emax[lid])
        shapes[f"head{task}.bias"] = (width,)
        if h.kind == "point":
            shapes[f"head{task}.fc2.weight"] = (h.out_dim, h.hidden)
            shapes[f"head{task}.fc2.bias"] = (h.out_dim,)
    return shapes


@dataclass
class Supernet:
    space: CellSpace
    graph: MultiTaskGraph
    params: dict[str, Tensor]
    dist: SkeletonDistribution
    step: int = 0

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def init_supernet(space: CellSpace, graph: MultiTaskGraph, seed: int, tau0: float = 5.0,
                  tau_min: float = 0.1) -> Supernet:
    """Truncated-normal (std 0.02, +-2 std) matrices, zero biases, unit LN gains."""
    if space.counting_only:
        raise ConfigError(f"preset {space.preset!r} is for parameter counting only")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(weight_shapes(space, graph).items()):
        if name.endswith(("ln1_g", "ln2_g")):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
        params[name] = nx.parameter(data)
    dist = SkeletonDistribution.uniform(enumerate_skeletons(graph.mode), len(graph.tasks), tau0, tau_min)
    return Supernet(space, graph, params, dist)


@dataclass(frozen=True)
class SubnetView:
    """Index ranges a subnet reads from each supernet weight.

    A weight may be assembled from several pieces concatenated along `axes[name]`.
    """

    cfg: CellConfig
    slices: dict[str, tuple[Piece, ...]]
    axes: dict[str, int]

    def contains(self, other: "SubnetView") -> bool:
        """True when every range `other` reads lies inside the matching range of self."""
        for name, pieces in other.slices.items():
            mine = self.slices.get(name)
            if mine is None or len(mine) != len(pieces):
                return False
            for a, b in zip(mine, pieces):
                if any(not (ra[0] <= rb[0] and rb[1] <= ra[1]) for ra, rb in zip(a, b)):
                    return False
        return True

    def tensors(self, sn: Supernet) -> dict[str, Tensor]:
        """Graph-tracked views into the supernet weights (gradients flow back)."""
        out = {}
        for name, pieces in self.slices.items():
            src = sn.params[name]
            parts = [nx.slice(src, p) for p in pieces]
            out[name] = parts[0] if len(parts) == 1 else nx.concat(parts, axis=self.axes[name])
        return out

    def copy_out(self, sn: Supernet) -> dict[str, Tensor]:
        """Standalone copies of the sliced weights, detached from the supernet."""
        out = {}
        for name, pieces in self.slices.items():
            src = sn.params[name].data
            parts = [src[tuple(np.s_[a:b] for a, b in p)] for p in pieces]
            arr = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=self.axes[name])
            out[name] = nx.parameter(arr.copy())
        return out


def slice_subnet(sn: Supernet, cfg: CellConfig, graph: MultiTaskGraph | None = None) -> SubnetView:
    graph = sn.graph if graph is None else graph
    validate_config(cfg, sn.space, graph.layers)
    space = sn.space
    slices: dict[str, tuple[Piece, ...]] = {}
    axes: dict[str, int] = {}
    emb = {lid: cfg[lid].embed_dim for lid in graph.layers}
    p = space.patch_size
    e1 = emb[LayerId(1, 1)]
    slices["patch_embed.weight"] = (((0, e1), (0, p * p * space.in_channels)),)
    slices["patch_embed.bias"] = (((0, e1),),)
    for lid in graph.layers:
        lc = cfg[lid]
        e, emax = lc.embed_dim, space.max_embed(lid.level)
        for i, blk in enumerate(lc.blocks):
            pre = f"{lid.name}.{i}"
            hid = ffn_width(e, blk.mlp_ratio)
            slices[f"{pre}.qkv_w"] = tuple(((j * emax, j * emax + e), (0, e)) for j in range(3))
            slices[f"{pre}.qkv_b"] = tuple(((j * emax, j * emax + e),) for j in range(3))
            axes[f"{pre}.qkv_w"] = axes[f"{pre}.qkv_b"] = 0
            slices[f"{pre}.proj_w"] = (((0, e), (0, e)),)
            slices[f"{pre}.ffn1_w"] = (((0, hid), (0, e)),)
            slices[f"{pre}.ffn1_b"] = (((0, hid),),)
            slices[f"{pre}.ffn2_w"] = (((0, e), (0, hid)),)
            for f in ("proj_b", "ffn2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                slices[f"{pre}.{f}"] = (((0, e),),)
        src = lid.input_layer()
        if src is None:
            continue
        if lid.is_encoder:
            pre = f"pool{src.level}"
            ein, einmax = emb[src], space.max_embed(src.level)
            slices[f"{pre}.weight"] = tuple(((0, e), (j * einmax, j * einmax + ein)) for j in range(4))
            axes[f"{pre}.weight"] = 1
        else:
            pre = f"up{lid.level}_{lid.encode_depth}"
            slices[f"{pre}.weight"] = (((0, e), (0, emb[src])),)
        slices[f"{pre}.bias"] = (((0, e),),)
    for task, outs in graph.task_attach:
        h = graph.head(task)
        width = h.out_dim if h.kind == "dense" else h.hidden
        for lid in outs:
            slices[f"head{task}.{lid.name}.weight"] = (((0, width), (0, emb[lid])),)
        slices[f"head{task}.bias"] = (((0, width),),)
        if h.kind == "point":
            slices[f"head{task}.fc2.weight"] = (((0, h.out_dim), (0, h.hidden)),)
            slices[f"head{task}.fc2.bias"] = (((0, h.out_dim),),)
    missing = [n for n in slices if n not in sn.params]
    if missing:
        raise ConfigError(f"supernet has no weights for {missing[:3]}")
    return SubnetView(cfg, slices, axes)


def sandwich_sample(space: CellSpace, rng: np.random.Generator,
                    layers: Sequence[LayerId] | None = None) -> list[CellConfig]:
    """[largest, smallest, uniform, uniform]."""
    kw = {} if layers is None else {"layers": layers}
    return [
        sample_cell_config(space, rng, "max", **kw),
        sample_cell_config(space, rng, "min", **kw),
        sample_cell_config(space, rng, "uniform", **kw),
        sample_cell_config(space, rng, "uniform", **kw),
    ]


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        nx.zero_grad(self.params)


def lr_at(step: int, total: int, base: float, final: float, warmup: int) -> float:
    """Linear warm-up then cosine decay from `base` to `final`."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min(max((step - warmup) / span, 0.0), 1.0)
    return final + 0.5 * (base - final) * (1 + math.cos(math.pi * frac))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(sn: Supernet, path, extra: Mapping | None = None) -> None:
    arrays = {f"w/{k}": v.data for k, v in sn.params.items()}
    arrays["skeleton/logits"] = sn.dist.logits.data
    manifest = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": sn.step,
        "space": sn.space.to_dict(),
        "graph": sn.graph.to_dict(),
        "skeletons": [s.to_dict() for s in sn.dist.skeletons],
        "tau0": sn.dist.tau0,
        "tau_min": sn.dist.tau_min,
        "tau": sn.dist.tau,
        "extra": dict(extra or {}),
    }
    write_container(path, CHECKPOINT_MAGIC, manifest, arrays)


def load_checkpoint(path) -> Supernet:
    manifest, arrays = read_container(path, CHECKPOINT_MAGIC)
    if manifest.get("kind") != "checkpoint" or manifest.get("version") != CHECKPOINT_VERSION:
        raise PersistenceError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    try:
        space = CellSpace.from_dict(manifest["space"])
        graph = MultiTaskGraph.from_dict(manifest["graph"])
        skeletons = tuple(Skeleton.from_dict(s) for s in manifest["skeletons"])
        params = {k[2:]: nx.parameter(v) for k, v in arrays.items() if k.startswith("w/")}
        logits = nx.parameter(arrays["skeleton/logits"])
    except (KeyError, ValueError) as exc:
        raise PersistenceError(f"{path}: malformed checkpoint ({exc})") from exc
    expected = weight_shapes(space, graph)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise PersistenceError(f"{path}: weight shapes do not match the recorded space/graph")
    dist = SkeletonDistribution(skeletons, logits, manifest["tau0"], manifest["tau_min"], manifest["tau"])
    return Supernet(space, graph, params, dist, int(manifest["step"]))


def checkpoint_extra(path) -> dict:
    manifest, _ = read_container(path, CHECKPOINT_MAGIC)
    return manifest.get("extra", {})
