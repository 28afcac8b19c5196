"""Encoder-decoder window transformer built from `numerics` ops.

All functions take weights already cut to the subnet's dimensions; the
supernet module is responsible for slicing. Feature maps are (B, H, W, E).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mtnas import numerics as nx
from mtnas.errors import ConfigError, ShapeError
from mtnas.numerics import Tensor
from mtnas.search_space import CellConfig, HeadSpec, LayerConfig, LayerId

MASK_VALUE = -1e9


@dataclass
class BlockWeights:
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ffn1_w: Tensor
    ffn1_b: Tensor
    ffn2_w: Tensor
    ffn2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    FIELDS = ("qkv_w", "qkv_b", "proj_w", "proj_b", "ffn1_w", "ffn1_b",
              "ffn2_w", "ffn2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b")

    @classmethod
    def from_mapping(cls, weights: Mapping[str, Tensor], prefix: str) -> "BlockWeights":
        return cls(**{f: weights[f"{prefix}.{f}"] for f in cls.FIELDS})


def patch_embed(image: np.ndarray, weight: Tensor, bias: Tensor, patch: int = 4) -> Tensor:
    """(B, H, W, C) image -> (B, H/patch, W/patch, E) by a linear map per patch."""
    b, h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    patches = (np.asarray(image, dtype=np.float64)
               .reshape(b, h // patch, patch, w // patch, patch, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(b, h // patch, w // patch, patch * patch * c))
    return nx.linear(Tensor(patches), weight, bias)


def _window_mask(h: int, w: int, hp: int, wp: int, win: int) -> np.ndarray | None:
    """Additive key mask per window, (nW, 1, 1, win*win); None when nothing is padded."""
    if hp == h and wp == w:
        return None
    valid = np.zeros((hp, wp))
    valid[:h, :w] = 1.0
    nh, nw = hp // win, wp // win
    vw = valid.reshape(nh, win, nw, win).transpose(0, 2, 1, 3).reshape(nh * nw, win * win)
    return np.where(vw > 0, 0.0, MASK_VALUE)[:, None, None, :]


def window_attention(x: Tensor, w: BlockWeights, heads: int, win: int | None) -> Tensor:
    """Multi-head self-attention restricted to non-overlapping win x win windows.

    `win=None` attends over the whole map. Windows that do not divide the map
    are handled by zero padding with the padded keys masked out.
    """
    b, h, wd, e = x.shape
    if e % heads:
        raise ConfigError(f"{heads} heads do not divide embed dim {e}")
    hd = e // heads
    if win is None:
        xw = nx.reshape(x, (b, h * wd, e))
        mask = None
    else:
        win = min(win, max(h, wd))
        hp, wp = -(-h // win) * win, -(-wd // win) * win
        xw = nx.window_partition(nx.pad2d(x, hp - h, wp - wd), win)
        mask = _window_mask(h, wd, hp, wp, win)
    nwin, n, _ = xw.shape
    qkv = nx.linear(xw, w.qkv_w, w.qkv_b)                       # (nB, N, 3E)
    qkv = nx.transpose(nx.reshape(qkv, (nwin, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q = nx.reshape(nx.slice(qkv, [(0, 1)]), (nwin, heads, n, hd))
    k = nx.reshape(nx.slice(qkv, [(1, 2)]), (nwin, heads, n, hd))
    v = nx.reshape(nx.slice(qkv, [(2, 3)]), (nwin, heads, n, hd))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
    if mask is not None:
        scores = nx.add(scores, np.tile(mask, (b, 1, 1, 1)))
    attn = nx.softmax(scores, axis=-1)
    out = nx.matmul(attn, v)                                     # (nB, heads, N, hd)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (nwin, n, e))
    out = nx.linear(out, w.proj_w, w.proj_b)
    if win is None:
        return nx.reshape(out, (b, h, wd, e))
    out = nx.window_reverse(out, win, hp, wp)
    if hp != h or wp != wd:
        out = nx.slice(out, [(0, b), (0, h), (0, wd)])
    return out


def ffn(x: Tensor, w: BlockWeights) -> Tensor:
    return nx.linear(nx.gelu(nx.linear(x, w.ffn1_w, w.ffn1_b)), w.ffn2_w, w.ffn2_b)


def wsa_block(x: Tensor, w: BlockWeights, heads: int, win: int | None) -> Tensor:
    """x + WSA(LN(x)), then + FFN(LN(.)). Shape preserving; MLP ratio is carried by w."""
    if w.qkv_w.shape != (3 * x.shape[-1], x.shape[-1]):
        raise ConfigError(f"block weights {w.qkv_w.shape} do not match embed dim {x.shape[-1]}")
    x = nx.add(x, window_attention(nx.layer_norm(x, w.ln1_g, w.ln1_b), w, heads, win))
    return nx.add(x, ffn(nx.layer_norm(x, w.ln2_g, w.ln2_b), w))


def run_layer(x: Tensor, weights: Mapping[str, Tensor], layer: LayerId, lc: LayerConfig) -> Tensor:
    for i, blk in enumerate(lc.blocks):
        x = wsa_block(x, BlockWeights.from_mapping(weights, f"{layer.name}.{i}"), blk.num_heads, blk.window)
    return x


def patch_merge(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2x2 neighbourhood concat (order: (0,0), (0,1), (1,0), (1,1)) then linear."""
    b, h, w, e = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge needs even sides, got {h}x{w}")
    merged = nx.reshape(
        nx.transpose(nx.reshape(x, (b, h // 2, 2, w // 2, 2, e)), (0, 1, 3, 2, 4, 5)),
        (b, h // 2, w // 2, 4 * e))
    return nx.linear(merged, weight, bias)


def upsample(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Nearest 2x upsample then linear to the destination width."""
    return nx.linear(nx.nearest_upsample_2x(x), weight, bias)


def run_head(features: Mapping[LayerId, Tensor], weights: Mapping[str, Tensor], spec: HeadSpec,
             attach: Sequence[LayerId], image_hw: tuple[int, int], patch: int = 4) -> Tensor:
    """Dense: per-pixel logits at input resolution. Point: (B, out_dim) logits."""
    pre = f"head{spec.task}"
    terms = []
    for lid in attach:
        f = features[lid]
        stride = patch * 2 ** (lid.level - 1)
        if f.shape[1] * stride != image_hw[0] or f.shape[2] * stride != image_hw[1]:
            raise ConfigError(f"feature of {lid.name} has side {f.shape[1:3]}, expected level {lid.level}")
        wt = weights[f"{pre}.{lid.name}.weight"]
        if spec.kind == "dense":
            terms.append(nx.nearest_upsample(nx.linear(f, wt), stride))
        else:
            terms.append(nx.linear(nx.global_avg_pool(f), wt))
    acc = terms[0]
    for t in terms[1:]:
        acc = nx.add(acc, t)
    acc = nx.add(acc, weights[f"{pre}.bias"])
    if spec.kind == "dense":
        return acc
    return nx.linear(nx.gelu(acc), weights[f"{pre}.fc2.weight"], weights[f"{pre}.fc2.bias"])


def layer_order(layers) -> list[LayerId]:
    """Topological execution order: encoder depth first, each decoder branch top-down."""
    return sorted(layers, key=lambda lid: (lid.encode_depth, -lid.level))


def forward_features(weights: Mapping[str, Tensor], cfg: CellConfig, image: np.ndarray,
                     layers, patch: int = 4) -> dict[LayerId, Tensor]:
    """Run every requested layer once; returns the output feature of each."""
    feats: dict[LayerId, Tensor] = {}
    for lid in layer_order(layers):
        src = lid.input_layer()
        if src is None:
            x = patch_embed(image, weights["patch_embed.weight"], weights["patch_embed.bias"], patch)
        elif lid.is_encoder:
            x = patch_merge(feats[src], weights[f"pool{src.level}.weight"], weights[f"pool{src.level}.bias"])
        else:
            pre = f"up{lid.level}_{lid.encode_depth}"
            x = upsample(feats[src], weights[f"{pre}.weight"], weights[f"{pre}.bias"])
        feats[lid] = run_layer(x, weights, lid, cfg[lid])
    return feats
