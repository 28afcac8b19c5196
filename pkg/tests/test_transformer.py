import numpy as np
import pytest

from mtnas import numerics as nx
from mtnas.errors import ConfigError, ShapeError
from mtnas.search_space import HeadSpec, LayerId, enumerate_skeletons, full_graph, sample_cell_config
from mtnas.supernet import init_supernet, slice_subnet
from mtnas.transformer import (
    BlockWeights, forward_features, patch_embed, patch_merge, run_head, upsample, window_attention,
    wsa_block,
)


def _block(rng, e, hid, scale=0.3):
    def m(*s):
        return nx.parameter(rng.normal(scale=scale, size=s))
    return BlockWeights(m(3 * e, e), m(3 * e), m(e, e), m(e), m(hid, e), m(hid), m(e, hid), m(e),
                        nx.parameter(1 + rng.normal(scale=0.1, size=e)), m(e),
                        nx.parameter(1 + rng.normal(scale=0.1, size=e)), m(e))


def attention_oracle(x, w: BlockWeights, heads, win):
    """Loop-based window attention over the valid tokens of each window."""
    b, h, wd, e = x.shape
    hd = e // heads
    W = {f: getattr(w, f).data for f in BlockWeights.FIELDS}
    out = np.zeros_like(x)
    win = min(win, max(h, wd))
    for bi in range(b):
        for r0 in range(0, h, win):
            for c0 in range(0, wd, win):
                tok = x[bi, r0:r0 + win, c0:c0 + win]
                th, tw = tok.shape[:2]
                t = tok.reshape(-1, e)
                qkv = t @ W["qkv_w"].T + W["qkv_b"]
                q, k, v = qkv[:, :e], qkv[:, e:2 * e], qkv[:, 2 * e:]
                res = np.zeros_like(t)
                for hh in range(heads):
                    sl = np.s_[hh * hd:(hh + 1) * hd]
                    s = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
                    a = np.exp(s - s.max(axis=1, keepdims=True))
                    a /= a.sum(axis=1, keepdims=True)
                    res[:, sl] = a @ v[:, sl]
                res = res @ W["proj_w"].T + W["proj_b"]
                out[bi, r0:r0 + th, c0:c0 + tw] = res.reshape(th, tw, e)
    return out


def test_patch_embed_shape_and_linearity():
    rng = np.random.default_rng(0)
    wt, bias = nx.parameter(rng.normal(size=(8, 16))), nx.parameter(np.zeros(8))
    assert patch_embed(rng.random((2, 64, 64, 1)), wt, bias).shape == (2, 16, 16, 8)
    np.testing.assert_array_equal(patch_embed(np.zeros((1, 64, 64, 1)), wt, bias).data, 0.0)
    with pytest.raises(ShapeError):
        patch_embed(np.zeros((1, 30, 32, 1)), wt, bias)


def test_patch_embed_gradient():
    rng = np.random.default_rng(1)
    img = rng.random((1, 8, 8, 1))
    bias = nx.parameter(np.zeros(3))
    err = nx.finite_diff_check(lambda w: nx.mean(nx.gelu(patch_embed(img, w, bias))),
                               nx.parameter(rng.normal(size=(3, 16))))
    assert err < 1e-6


@pytest.mark.parametrize("h,w,win,heads", [(4, 4, 2, 2), (4, 4, 8, 1), (6, 6, 4, 2), (2, 2, 2, 4), (8, 8, 4, 4)])
def test_window_attention_matches_loop_oracle(h, w, win, heads):
    rng = np.random.default_rng(h * 100 + win)
    e = 8
    blk = _block(rng, e, 16)
    x = rng.normal(size=(2, h, w, e))
    got = window_attention(nx.Tensor(x), blk, heads, win).data
    np.testing.assert_allclose(got, attention_oracle(x, blk, heads, win), rtol=1e-10, atol=1e-12)


def test_large_window_equals_global_attention():
    rng = np.random.default_rng(2)
    blk = _block(rng, 8, 16)
    x = nx.Tensor(rng.normal(size=(1, 4, 4, 8)))
    np.testing.assert_allclose(wsa_block(x, blk, 2, 8).data, wsa_block(x, blk, 2, None).data, atol=1e-13)


def test_zero_weights_give_identity():
    rng = np.random.default_rng(3)
    e = 8
    z = lambda *s: nx.Tensor(np.zeros(s))  # noqa: E731
    blk = BlockWeights(z(3 * e, e), z(3 * e), z(e, e), z(e), z(16, e), z(16), z(e, 16), z(e),
                       nx.Tensor(np.ones(e)), z(e), nx.Tensor(np.ones(e)), z(e))
    x = nx.Tensor(rng.normal(size=(1, 4, 4, e)))
    np.testing.assert_array_equal(wsa_block(x, blk, 2, 2).data, x.data)


def test_attention_rows_sum_to_one_including_padding():
    # V = 1 everywhere and identity projection: each output equals its attention row sum
    e = 4
    z = np.zeros
    blk = BlockWeights(nx.Tensor(z((3 * e, e))), nx.Tensor(np.r_[np.random.default_rng(0).normal(size=2 * e), np.ones(e)]),
                       nx.Tensor(np.eye(e)), nx.Tensor(z(e)), *(nx.Tensor(z(s)) for s in ((8, e), (8,), (e, 8), (e,))),
                       nx.Tensor(np.ones(e)), nx.Tensor(z(e)), nx.Tensor(np.ones(e)), nx.Tensor(z(e)))
    x = nx.Tensor(np.random.default_rng(1).normal(size=(1, 6, 6, e)))
    np.testing.assert_allclose(window_attention(x, blk, 2, 4).data, 1.0, rtol=0, atol=1e-12)


def test_window_order_does_not_matter():
    rng = np.random.default_rng(4)
    blk = _block(rng, 8, 16)
    x = rng.normal(size=(1, 4, 4, 8))
    swapped = x.copy()
    swapped[:, :2, :2], swapped[:, 2:, 2:] = x[:, 2:, 2:], x[:, :2, :2]
    a = window_attention(nx.Tensor(x), blk, 2, 2).data
    b = window_attention(nx.Tensor(swapped), blk, 2, 2).data
    np.testing.assert_array_equal(a[:, :2, :2], b[:, 2:, 2:])
    np.testing.assert_array_equal(a[:, 2:, 2:], b[:, :2, :2])
    np.testing.assert_array_equal(a[:, :2, 2:], b[:, :2, 2:])


def test_heads_must_divide_embed():
    rng = np.random.default_rng(5)
    with pytest.raises(ConfigError):
        wsa_block(nx.Tensor(rng.normal(size=(1, 4, 4, 8))), _block(rng, 8, 16), 3, 2)
    with pytest.raises(ConfigError):
        wsa_block(nx.Tensor(rng.normal(size=(1, 4, 4, 8))), _block(rng, 12, 16), 2, 2)


def test_wsa_block_gradient():
    rng = np.random.default_rng(6)
    blk = _block(rng, 4, 8)
    x = nx.parameter(rng.normal(size=(1, 4, 4, 4)))
    params = [x] + [getattr(blk, f) for f in BlockWeights.FIELDS]
    err = nx.finite_diff_check(lambda ps: nx.mean(nx.mul(wsa_block(ps[0], blk, 2, 2), wsa_block(ps[0], blk, 2, 2))), params)
    assert err < 1e-4


def test_merge_and_upsample_shapes():
    rng = np.random.default_rng(7)
    x = nx.Tensor(rng.normal(size=(1, 16, 16, 8)))
    m = patch_merge(x, nx.Tensor(rng.normal(size=(16, 32))), nx.Tensor(np.zeros(16)))
    assert m.shape == (1, 8, 8, 16)
    u = upsample(m, nx.Tensor(rng.normal(size=(8, 16))), nx.Tensor(np.zeros(8)))
    assert u.shape == (1, 16, 16, 8)
    with pytest.raises(ShapeError):
        patch_merge(nx.Tensor(np.ones((1, 3, 4, 2))), nx.Tensor(np.ones((2, 8))), nx.Tensor(np.zeros(2)))


def test_patch_merge_neighbour_order():
    x = np.arange(2 * 2 * 1, dtype=float).reshape(1, 2, 2, 1)
    m = patch_merge(nx.Tensor(x), nx.Tensor(np.eye(4)), nx.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(m.data.reshape(-1), [0, 1, 2, 3])


def _head_weights(rng, spec, e, attach):
    pre = f"head{spec.task}"
    width = spec.out_dim if spec.kind == "dense" else spec.hidden
    w = {f"{pre}.{lid.name}.weight": nx.parameter(rng.normal(size=(width, e))) for lid in attach}
    w[f"{pre}.bias"] = nx.parameter(rng.normal(size=width))
    if spec.kind == "point":
        w[f"{pre}.fc2.weight"] = nx.parameter(rng.normal(size=(spec.out_dim, spec.hidden)))
        w[f"{pre}.fc2.bias"] = nx.parameter(rng.normal(size=spec.out_dim))
    return w


def test_point_head_on_constant_map():
    rng = np.random.default_rng(8)
    spec = HeadSpec(1, "point", 4, hidden=5)
    lid = LayerId(2, 2)
    w = _head_weights(rng, spec, 6, [lid])
    c = rng.normal(size=6)
    feats = {lid: nx.Tensor(np.broadcast_to(c, (1, 8, 8, 6)).copy())}
    out = run_head(feats, w, spec, [lid], (64, 64)).data
    hdn = w["head1.b2.weight"].data @ c + w["head1.bias"].data
    hdn = nx.gelu(nx.Tensor(hdn)).data
    ref = w["head1.fc2.weight"].data @ hdn + w["head1.fc2.bias"].data
    np.testing.assert_allclose(out[0], ref, rtol=1e-13)


def test_dense_head_output_resolution_and_level_check():
    rng = np.random.default_rng(9)
    spec = HeadSpec(1, "dense", 3)
    for lid, side in ((LayerId(1, 1), 16), (LayerId(3, 2), 8), (LayerId(4, 4), 2)):
        w = _head_weights(rng, spec, 4, [lid])
        out = run_head({lid: nx.Tensor(rng.normal(size=(2, side, side, 4)))}, w, spec, [lid], (64, 64))
        assert out.shape == (2, 64, 64, 3)
    with pytest.raises(ConfigError):
        run_head({LayerId(2, 2): nx.Tensor(np.ones((1, 16, 16, 4)))},
                 _head_weights(rng, spec, 4, [LayerId(2, 2)]), spec, [LayerId(2, 2)], (64, 64))


@pytest.mark.parametrize("kind", ["dense", "point"])
def test_head_gradients(kind):
    rng = np.random.default_rng(10)
    spec = HeadSpec(1, kind, 2, hidden=3)
    attach = [LayerId(1, 1), LayerId(2, 2)]
    w = _head_weights(rng, spec, 3, attach)
    feats = {LayerId(1, 1): nx.Tensor(rng.normal(size=(1, 4, 4, 3))), LayerId(2, 2): nx.Tensor(rng.normal(size=(1, 2, 2, 3)))}
    names = sorted(w)
    err = nx.finite_diff_check(
        lambda ps: nx.mean(nx.gelu(run_head(feats, dict(zip(names, ps)), spec, attach, (16, 16)))),
        [w[n] for n in names])
    assert err < 1e-5


@pytest.mark.parametrize("mode", ["single", "multi"])
def test_every_skeleton_type_checks(space, mode):
    heads = [HeadSpec(1, "dense", 2), HeadSpec(2, "point", 3)]
    sn = init_supernet(space, full_graph(mode, heads), seed=0)
    rng = np.random.default_rng(11)
    img = rng.random((1, 64, 64, 1))
    for _ in range(20):
        cfg = sample_cell_config(space, rng)
        with nx.no_grad():
            w = slice_subnet(sn, cfg).tensors(sn)
            feats = forward_features(w, cfg, img, sn.graph.layers)
            for lid, f in feats.items():
                side = 16 >> (lid.level - 1)
                assert f.shape == (1, side, side, cfg[lid].embed_dim)
            for s in enumerate_skeletons(mode):
                assert run_head(feats, w, heads[0], s.outputs, (64, 64)).shape == (1, 64, 64, 2)
                assert run_head(feats, w, heads[1], s.outputs, (64, 64)).shape == (1, 3)


def test_forward_is_bit_reproducible(space):
    heads = [HeadSpec(1)]
    outs = []
    for _ in range(2):
        sn = init_supernet(space, full_graph("single", heads), seed=3)
        cfg = sample_cell_config(space, np.random.default_rng(3))
        with nx.no_grad():
            w = slice_subnet(sn, cfg).tensors(sn)
            f = forward_features(w, cfg, np.random.default_rng(0).random((1, 64, 64, 1)), sn.graph.layers)
        outs.append(np.concatenate([v.data.ravel() for _, v in sorted(f.items())]))
    assert outs[0].tobytes() == outs[1].tobytes()
