"""Skeleton (macro) and cell (micro) search spaces.

The layer grid has one encoder layer per stride level (``b1``..``b4``) and
a decoder branch hanging off every encoder depth ``d > 1`` that climbs back
up to level 1 (``dec{level}_{d}``). Ten layers in total: a level-``l``
feature can be read from any layer with encode depth ``d >= l``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from mtnas.errors import ArgumentError, ConfigError

N_LEVELS = 4
SKELETON_SCHEMA = "mtnas.skeleton/1"
CELLCONFIG_SCHEMA = "mtnas.cellconfig/1"
GRAPH_SCHEMA = "mtnas.graph/1"
MODES = ("single", "multi")


@dataclass(frozen=True, order=True)
class LayerId:
    # field order gives the canonical (d asc, level asc) sort
    encode_depth: int
    level: int

    def __post_init__(self):
        if not (1 <= self.level <= self.encode_depth <= N_LEVELS):
            raise ArgumentError(f"invalid layer (level={self.level}, encode_depth={self.encode_depth})")

    @property
    def is_encoder(self) -> bool:
        return self.level == self.encode_depth

    @property
    def name(self) -> str:
        if self.is_encoder:
            return f"b{self.level}"
        return f"dec{self.level}_{self.encode_depth}"

    @classmethod
    def from_name(cls, name: str) -> "LayerId":
        try:
            if name.startswith("dec"):
                level, depth = name[3:].split("_")
                return cls(int(depth), int(level))
            if name.startswith("b"):
                level = int(name[1:])
                return cls(level, level)
        except ValueError:
            pass
        raise ArgumentError(f"not a layer name: {name!r}")

    def input_layer(self) -> "LayerId | None":
        """The layer feeding this one (None for b1, which reads patch_embed)."""
        if self.is_encoder:
            return None if self.level == 1 else LayerId(self.level - 1, self.level - 1)
        return LayerId(self.encode_depth, self.level + 1)


ALL_LAYERS: tuple[LayerId, ...] = tuple(
    LayerId(d, lvl) for d in range(1, N_LEVELS + 1) for lvl in range(1, d + 1))


@dataclass(frozen=True)
class Component:
    kind: str  # patch_embed | enc_layer | pool | up | dec_layer | head
    id: str
    layer: LayerId | None = None
    task: int | None = None


def _layer_component(layer: LayerId) -> Component:
    return Component("enc_layer" if layer.is_encoder else "dec_layer", layer.name, layer=layer)


def _transition_component(layer: LayerId) -> Component:
    """The pool/up component sitting right before `layer` (layer must not be b1)."""
    if layer.is_encoder:
        return Component("pool", f"pool{layer.level - 1}", layer=layer)
    return Component("up", f"up{layer.level}_{layer.encode_depth}", layer=layer)


PATCH_EMBED = Component("patch_embed", "patch_embed")


def head_component(task: int) -> Component:
    return Component("head", f"head{task}", task=task)


@dataclass(frozen=True)
class Skeleton:
    """One acyclic path through the layer grid.

    Single-scale skeletons carry one output layer; multi-scale ones carry one
    output per level 1..4, with the level-4 output pinned to ``b4``.
    """

    outputs: tuple[LayerId, ...]
    mode: str = "single"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArgumentError(f"unknown skeleton mode {self.mode!r}")
        if self.mode == "single" and len(self.outputs) != 1:
            raise ArgumentError("single-scale skeleton needs exactly one output")
        if self.mode == "multi":
            if tuple(o.level for o in self.outputs) != tuple(range(1, N_LEVELS + 1)):
                raise ArgumentError("multi-scale skeleton needs one output per level 1..4")
            if self.outputs[-1] != LayerId(N_LEVELS, N_LEVELS):
                raise ArgumentError("multi-scale level-4 output must be b4")

    @property
    def encode_depth(self) -> int:
        return max(o.encode_depth for o in self.outputs)

    @property
    def name(self) -> str:
        if self.mode == "single":
            return self.outputs[0].name
        return "ms:" + ",".join(o.name for o in self.outputs)

    def layers(self) -> tuple[LayerId, ...]:
        """Every layer on the path, in execution order."""
        seen: list[LayerId] = [LayerId(d, d) for d in range(1, self.encode_depth + 1)]
        for out in self.outputs:
            for lvl in range(out.encode_depth - 1, out.level - 1, -1):
                lid = LayerId(out.encode_depth, lvl)
                if lid not in seen:
                    seen.append(lid)
        return tuple(seen)

    def to_dict(self) -> dict:
        return {"schema": SKELETON_SCHEMA, "mode": self.mode, "outputs": [o.name for o in self.outputs]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Skeleton":
        if d.get("schema") != SKELETON_SCHEMA:
            raise ArgumentError(f"unsupported skeleton schema {d.get('schema')!r}")
        return cls(tuple(LayerId.from_name(n) for n in d["outputs"]), d["mode"])


def enumerate_skeletons(mode: str) -> list[Skeleton]:
    """Canonical, duplicate-free list: 10 single-scale or 24 multi-scale skeletons."""
    if mode == "single":
        return [Skeleton((lid,), "single") for lid in ALL_LAYERS]
    if mode == "multi":
        ranges = [range(lvl, N_LEVELS + 1) for lvl in range(1, N_LEVELS)]
        return [
            Skeleton(tuple(LayerId(d, lvl) for lvl, d in enumerate(depths, start=1))
                     + (LayerId(N_LEVELS, N_LEVELS),), "multi")
            for depths in itertools.product(*ranges)
        ]
    raise ArgumentError(f"unknown mode {mode!r}")


def space_cardinality(mode: str, n_tasks: int) -> int:
    if n_tasks < 1:
        raise ArgumentError("n_tasks must be >= 1")
    return len(enumerate_skeletons(mode)) ** n_tasks


def skeleton_components(s: Skeleton, task: int) -> tuple[Component, ...]:
    """Components of the path for `task` (1-based), from patch_embed to the head."""
    comps = [PATCH_EMBED]
    for lid in s.layers():
        if lid != LayerId(1, 1):
            comps.append(_transition_component(lid))
        comps.append(_layer_component(lid))
    comps.append(head_component(task))
    return tuple(comps)


@dataclass(frozen=True)
class HeadSpec:
    task: int
    kind: str = "dense"  # dense | point
    out_dim: int = 1
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("dense", "point"):
            raise ArgumentError(f"unknown head kind {self.kind!r}")


@dataclass(frozen=True)
class MultiTaskGraph:
    mode: str
    components: tuple[Component, ...]
    edges: tuple[tuple[str, str], ...]
    task_attach: tuple[tuple[int, tuple[LayerId, ...]], ...]
    heads: tuple[HeadSpec, ...]

    @property
    def component_ids(self) -> frozenset[str]:
        return frozenset(c.id for c in self.components)

    @property
    def layers(self) -> tuple[LayerId, ...]:
        return tuple(sorted(c.layer for c in self.components if c.kind in ("enc_layer", "dec_layer")))

    @property
    def tasks(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.task_attach)

    def attach(self, task: int) -> tuple[LayerId, ...]:
        return dict(self.task_attach)[task]

    def head(self, task: int) -> HeadSpec:
        for h in self.heads:
            if h.task == task:
                return h
        raise ArgumentError(f"no head for task {task}")

    def to_dict(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "mode": self.mode,
            "components": sorted(self.component_ids),
            "edges": [list(e) for e in self.edges],
            "task_attach": {str(t): [lid.name for lid in ls] for t, ls in self.task_attach},
            "heads": {str(h.task): {"kind": h.kind, "out_dim": h.out_dim, "hidden": h.hidden}
                      for h in self.heads},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MultiTaskGraph":
        if d.get("schema") != GRAPH_SCHEMA:
            raise ArgumentError(f"unsupported graph schema {d.get('schema')!r}")
        heads = {int(t): HeadSpec(int(t), **h) for t, h in d["heads"].items()}
        attach = {int(t): tuple(LayerId.from_name(n) for n in ls) for t, ls in d["task_attach"].items()}
        return _build_graph(d["mode"], attach, heads)


def _build_graph(mode: str, attach: Mapping[int, Sequence[LayerId]],
                 heads: Mapping[int, HeadSpec]) -> MultiTaskGraph:
    layers: set[LayerId] = set()
    for outs in attach.values():
        for out in outs:
            layers.add(out)
            for d in range(1, out.encode_depth + 1):
                layers.add(LayerId(d, d))
            for lvl in range(out.level, out.encode_depth):
                layers.add(LayerId(out.encode_depth, lvl))
    comps = [PATCH_EMBED]
    edges = []
    for lid in sorted(layers):
        lc = _layer_component(lid)
        src = lid.input_layer()
        if src is None:
            edges.append((PATCH_EMBED.id, lc.id))
        else:
            tc = _transition_component(lid)
            comps.append(tc)
            edges += [(src.name, tc.id), (tc.id, lc.id)]
        comps.append(lc)
    for task in sorted(attach):
        hc = head_component(task)
        comps.append(hc)
        edges += [(lid.name, hc.id) for lid in sorted(set(attach[task]))]
    return MultiTaskGraph(
        mode=mode,
        components=tuple(comps),
        edges=tuple(edges),
        task_attach=tuple((t, tuple(sorted(set(attach[t])))) for t in sorted(attach)),
        heads=tuple(heads.get(t, HeadSpec(t)) for t in sorted(attach)),
    )


def union_skeletons(assignments: Mapping[int, Skeleton],
                    heads: Mapping[int, HeadSpec] | Iterable[HeadSpec] | None = None) -> MultiTaskGraph:
    """Least common multi-task graph containing every task's skeleton.

    `assignments` maps 1-based task index to its skeleton. Heads default to a
    one-channel dense head when no spec is supplied.
    """
    if not assignments:
        raise ArgumentError("union of an empty assignment")
    modes = {s.mode for s in assignments.values()}
    if len(modes) != 1:
        raise ArgumentError(f"skeletons mix modes {sorted(modes)}")
    if heads is None:
        heads = {}
    elif not isinstance(heads, Mapping):
        heads = {h.task: h for h in heads}
    attach = {t: s.outputs for t, s in assignments.items()}
    return _build_graph(modes.pop(), attach, heads)


def full_graph(mode: str, heads: Sequence[HeadSpec]) -> MultiTaskGraph:
    """Graph over all ten layers with every task attachable at every layer."""
    attach = {h.task: tuple(ALL_LAYERS) for h in heads}
    return _build_graph(mode, attach, {h.task: h for h in heads})


# ---------------------------------------------------------------- cell space


def _check_choices(name: str, values: Sequence) -> tuple:
    values = tuple(values)
    if not values:
        raise ConfigError(f"{name}: empty choice list")
    if list(values) != sorted(values) or len(set(values)) != len(values):
        raise ConfigError(f"{name}: choices must be strictly ascending, got {values}")
    return values


@dataclass(frozen=True)
class CellSpace:
    embed_choices: tuple[tuple[int, ...], ...]
    head_choices: tuple[tuple[int, ...], ...]
    depth_choices: tuple[int, ...]
    mlp_ratio_choices: tuple[float, ...]
    window_choices: tuple[int, ...]
    preset: str = "custom"
    patch_size: int = 4
    in_channels: int = 1
    counting_only: bool = False

    def __post_init__(self):
        if len(self.embed_choices) != N_LEVELS or len(self.head_choices) != N_LEVELS:
            raise ConfigError("embed/head choices are needed for each of the 4 levels")
        for lvl in range(N_LEVELS):
            _check_choices(f"embed[{lvl + 1}]", self.embed_choices[lvl])
            _check_choices(f"heads[{lvl + 1}]", self.head_choices[lvl])
            if not self.counting_only:
                for e in self.embed_choices[lvl]:
                    for h in self.head_choices[lvl]:
                        if e % h:
                            raise ConfigError(
                                f"level {lvl + 1}: head count {h} does not divide embed dim {e}")
        _check_choices("depth", self.depth_choices)
        _check_choices("mlp_ratio", self.mlp_ratio_choices)
        _check_choices("window", self.window_choices)
        if min(self.depth_choices) < 1:
            raise ConfigError("depth choices must be >= 1")

    def embeds(self, level: int) -> tuple[int, ...]:
        return self.embed_choices[level - 1]

    def heads(self, level: int) -> tuple[int, ...]:
        return self.head_choices[level - 1]

    def max_embed(self, level: int) -> int:
        return self.embed_choices[level - 1][-1]

    @property
    def max_depth(self) -> int:
        return self.depth_choices[-1]

    @property
    def max_mlp_ratio(self) -> float:
        return self.mlp_ratio_choices[-1]

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "embed_choices": [list(c) for c in self.embed_choices],
            "head_choices": [list(c) for c in self.head_choices],
            "depth_choices": list(self.depth_choices),
            "mlp_ratio_choices": list(self.mlp_ratio_choices),
            "window_choices": list(self.window_choices),
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "counting_only": self.counting_only,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellSpace":
        return cls(
            embed_choices=tuple(tuple(c) for c in d["embed_choices"]),
            head_choices=tuple(tuple(c) for c in d["head_choices"]),
            depth_choices=tuple(d["depth_choices"]),
            mlp_ratio_choices=tuple(float(r) for r in d["mlp_ratio_choices"]),
            window_choices=tuple(d["window_choices"]),
            preset=d.get("preset", "custom"),
            patch_size=d.get("patch_size", 4),
            in_channels=d.get("in_channels", 1),
            counting_only=d.get("counting_only", False),
        )


def desk_space() -> CellSpace:
    return CellSpace(
        embed_choices=((8, 12, 16), (16, 24, 32), (32, 48, 64), (64, 96, 128)),
        head_choices=((1, 2, 4),) * N_LEVELS,
        depth_choices=(1, 2),
        mlp_ratio_choices=(2.0, 4.0),
        window_choices=(2, 4, 8),
        preset="desk",
    )


def paper_space(size: str = "small") -> CellSpace:
    """Appendix cell table, for parameter counting only (heads do not divide embeds)."""
    tables = {
        "small": (((64, 96, 128), (160, 192, 224), (352, 384, 416), (732, 768, 800)),
                  ((2, 3, 4), (5, 6, 7), (11, 12, 13), (23, 24, 25))),
        "base": (((96, 128, 160), (192, 256, 320), (448, 512, 576), (960, 1024, 1088)),
                 ((3, 4, 5), (6, 8, 10), (14, 16, 18), (30, 32, 34))),
    }
    if size not in tables:
        raise ConfigError(f"unknown paper size class {size!r}")
    embeds, heads = tables[size]
    return CellSpace(embeds, heads, (2, 4), (3.5, 4.0), (5, 7, 9),
                     preset=f"paper-{size}", patch_size=4, in_channels=3, counting_only=True)


PRESETS = {"desk": desk_space, "paper-small": lambda: paper_space("small"),
           "paper-base": lambda: paper_space("base")}


def get_preset(name: str) -> CellSpace:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown cell-space preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class BlockConfig:
    num_heads: int
    mlp_ratio: float
    window: int


@dataclass(frozen=True)
class LayerConfig:
    embed_dim: int
    depth: int
    blocks: tuple[BlockConfig, ...]

    def __post_init__(self):
        if len(self.blocks) != self.depth:
            raise ConfigError(f"layer depth {self.depth} but {len(self.blocks)} block configs")


@dataclass(frozen=True)
class CellConfig:
    """Subnet encoding: one LayerConfig per instantiated layer, canonical order."""

    layers: tuple[tuple[LayerId, LayerConfig], ...]
    _index: dict = field(default=None, compare=False, hash=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(sorted(self.layers, key=lambda kv: kv[0])))
        object.__setattr__(self, "_index", dict(self.layers))

    @classmethod
    def from_mapping(cls, m: Mapping[LayerId, LayerConfig]) -> "CellConfig":
        return cls(tuple(m.items()))

    def __getitem__(self, layer: LayerId) -> LayerConfig:
        try:
            return self._index[layer]
        except KeyError:
            raise ConfigError(f"config has no entry for layer {layer.name}") from None

    def __contains__(self, layer: LayerId) -> bool:
        return layer in self._index

    @property
    def layer_ids(self) -> tuple[LayerId, ...]:
        return tuple(k for k, _ in self.layers)

    def replace(self, layer: LayerId, lc: LayerConfig) -> "CellConfig":
        m = dict(self.layers)
        m[layer] = lc
        return CellConfig.from_mapping(m)

    def restrict(self, layers: Iterable[LayerId]) -> "CellConfig":
        return CellConfig.from_mapping({lid: self[lid] for lid in layers})

    def to_dict(self) -> dict:
        return {
            "schema": CELLCONFIG_SCHEMA,
            "layers": {
                lid.name: {
                    "embed_dim": lc.embed_dim,
                    "depth": lc.depth,
                    "blocks": [{"num_heads": b.num_heads, "mlp_ratio": b.mlp_ratio, "window": b.window}
                               for b in lc.blocks],
                }
                for lid, lc in self.layers
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellConfig":
        if d.get("schema") != CELLCONFIG_SCHEMA:
            raise ConfigError(f"unsupported cell-config schema {d.get('schema')!r}")
        out = {}
        for name, lc in d["layers"].items():
            blocks = tuple(BlockConfig(int(b["num_heads"]), float(b["mlp_ratio"]), int(b["window"]))
                           for b in lc["blocks"])
            out[LayerId.from_name(name)] = LayerConfig(int(lc["embed_dim"]), int(lc["depth"]), blocks)
        return cls.from_mapping(out)


def _sample_block(space: CellSpace, level: int, rng: np.random.Generator, mode: str) -> BlockConfig:
    if mode == "max":
        return BlockConfig(space.heads(level)[-1], space.mlp_ratio_choices[-1], space.window_choices[-1])
    if mode == "min":
        return BlockConfig(space.heads(level)[0], space.mlp_ratio_choices[0], space.window_choices[0])
    return BlockConfig(
        int(rng.choice(space.heads(level))),
        float(rng.choice(space.mlp_ratio_choices)),
        int(rng.choice(space.window_choices)),
    )


def sample_layer(space: CellSpace, level: int, rng: np.random.Generator | None, mode: str = "uniform") -> LayerConfig:
    if mode == "max":
        embed, depth = space.max_embed(level), space.max_depth
    elif mode == "min":
        embed, depth = space.embeds(level)[0], space.depth_choices[0]
    elif mode == "uniform":
        embed = int(rng.choice(space.embeds(level)))
        depth = int(rng.choice(space.depth_choices))
    else:
        raise ArgumentError(f"unknown sampling mode {mode!r}")
    return LayerConfig(embed, depth, tuple(_sample_block(space, level, rng, mode) for _ in range(depth)))


def sample_cell_config(space: CellSpace, rng: np.random.Generator | None = None, mode: str = "uniform",
                       layers: Iterable[LayerId] = ALL_LAYERS) -> CellConfig:
    if mode == "uniform" and rng is None:
        raise ArgumentError("uniform sampling needs an rng")
    return CellConfig.from_mapping({lid: sample_layer(space, lid.level, rng, mode) for lid in layers})


def validate_config(cfg: CellConfig, space: CellSpace, layers: Iterable[LayerId] | None = None) -> None:
    if layers is not None:
        missing = [lid.name for lid in layers if lid not in cfg]
        if missing:
            raise ConfigError(f"config lacks layers {missing}")
    for lid, lc in cfg.layers:
        if lc.embed_dim not in space.embeds(lid.level):
            raise ConfigError(f"{lid.name}: embed_dim {lc.embed_dim} not in {space.embeds(lid.level)}")
        if lc.depth not in space.depth_choices:
            raise ConfigError(f"{lid.name}: depth {lc.depth} not in {space.depth_choices}")
        for i, b in enumerate(lc.blocks):
            if b.num_heads not in space.heads(lid.level):
                raise ConfigError(f"{lid.name}.{i}: heads {b.num_heads} not in {space.heads(lid.level)}")
            if b.mlp_ratio not in space.mlp_ratio_choices:
                raise ConfigError(f"{lid.name}.{i}: mlp_ratio {b.mlp_ratio} not allowed")
            if b.window not in space.window_choices:
                raise ConfigError(f"{lid.name}.{i}: window {b.window} not allowed")


def ffn_width(embed_dim: int, mlp_ratio: float) -> int:
    return int(round(embed_dim * mlp_ratio))


def _block_params(e: int, r: float) -> int:
    hid = ffn_width(e, r)
    return (3 * e * e + 3 * e) + (e * e + e) + (hid * e + hid) + (e * hid + e) + 4 * e


def count_params(graph: MultiTaskGraph, cfg: CellConfig, space: CellSpace) -> int:
    """Exact parameter count of the subnet `cfg` restricted to `graph`."""
    validate_config(cfg, space, graph.layers)
    emb = {lid: cfg[lid].embed_dim for lid in graph.layers}
    p = space.patch_size
    total = p * p * space.in_channels * emb[LayerId(1, 1)] + emb[LayerId(1, 1)]
    for lid in graph.layers:
        lc = cfg[lid]
        total += sum(_block_params(lc.embed_dim, b.mlp_ratio) for b in lc.blocks)
        src = lid.input_layer()
        if src is None:
            continue
        fan_in = 4 * emb[src] if lid.is_encoder else emb[src]
        total += fan_in * lc.embed_dim + lc.embed_dim
    for task, outs in graph.task_attach:
        h = graph.head(task)
        width = h.out_dim if h.kind == "dense" else h.hidden
        total += sum(width * emb[lid] for lid in outs) + width
        if h.kind == "point":
            total += h.out_dim * h.hidden + h.out_dim
    return total
