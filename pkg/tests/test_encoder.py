import numpy as np
import pytest

from atmseg import tensor as T
from atmseg.encoder import (
    EncoderConfig, EncoderLayer, TokenGrid, ViTEncoder, add_positional,
    multi_head_attention, patchify, run_encoder_tapped,
)
from atmseg.tensor import ContractViolation, Rng, Tensor, finite_diff_check


def toy_cfg(**kw):
    base = dict(patch=8, width=16, depth=2, heads=2, image_hw=(16, 16),
                tap_layers=(1, 2))
    base.update(kw)
    return EncoderConfig(**base)


class TestConfig:
    def test_token_count_formula(self):
        cfg = EncoderConfig(patch=16, width=32, depth=2, heads=2,
                            image_hw=(512, 512), tap_layers=(2,))
        assert cfg.tokens == 1024
        assert cfg.grid == (32, 32)

    def test_token_count_small(self):
        cfg = toy_cfg(image_hw=(64, 64))
        assert cfg.tokens == 64
        assert cfg.grid == (8, 8)

    def test_indivisible_rejected(self):
        with pytest.raises(ContractViolation):
            toy_cfg(image_hw=(17, 16))

    def test_tap_bounds(self):
        with pytest.raises(ContractViolation):
            toy_cfg(tap_layers=(1, 3))
        with pytest.raises(ContractViolation):
            toy_cfg(tap_layers=())
        with pytest.raises(ContractViolation):
            toy_cfg(tap_layers=(2, 1))  # must end at depth and be sorted


class TestPatchify:
    def test_zero_image_zero_bias(self):
        cfg = toy_cfg()
        enc = ViTEncoder(cfg, Rng(0))
        img = Tensor(np.zeros((16, 16, 3)))
        tg = patchify(img, cfg, enc.patch_proj)
        assert np.array_equal(tg.tokens.data, np.zeros((4, 16)))

    def test_patch_content_routing(self):
        # identity-ish projection exposes which pixels land in which token
        cfg = toy_cfg()
        enc = ViTEncoder(cfg, Rng(0))
        enc.patch_proj.w.data = np.zeros((8 * 8 * 3, 16))
        enc.patch_proj.w.data[0, 0] = 1.0  # first flattened input -> chan 0
        img = np.zeros((16, 16, 3))
        img[8, 8, 0] = 5.0  # top-left pixel of patch (1, 1)
        tg = patchify(Tensor(img), cfg, enc.patch_proj)
        assert tg.tokens.data[3, 0] == 5.0
        assert np.count_nonzero(tg.tokens.data) == 1

    def test_wrong_size(self):
        cfg = toy_cfg()
        enc = ViTEncoder(cfg, Rng(0))
        with pytest.raises(ContractViolation):
            patchify(Tensor(np.zeros((24, 16, 3))), cfg, enc.patch_proj)


class TestAddPositional:
    def test_zero_pos_identity(self):
        tg = TokenGrid(Tensor(Rng(1).normal((4, 16))), (2, 2))
        out = add_positional(tg, Tensor(np.zeros((4, 16))))
        assert np.array_equal(out.tokens.data, tg.tokens.data)

    def test_zero_tokens_gives_pos(self):
        pos = Tensor(Rng(2).normal((4, 16)))
        out = add_positional(TokenGrid(Tensor(np.zeros((4, 16))), (2, 2)), pos)
        assert np.array_equal(out.tokens.data, pos.data)

    def test_random_elementwise_oracle(self):
        rng = Rng(3)
        a, b = rng.normal((4, 16)), rng.normal((4, 16))
        out = add_positional(TokenGrid(Tensor(a), (2, 2)), Tensor(b))
        assert np.array_equal(out.tokens.data, a + b)

    def test_shape_mismatch(self):
        tg = TokenGrid(Tensor(np.zeros((4, 16))), (2, 2))
        with pytest.raises(ContractViolation):
            add_positional(tg, Tensor(np.zeros((5, 16))))


def dense_attention_oracle(x, layer: EncoderLayer):
    """Hand-written single-pass attention + MLP block on numpy arrays."""
    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-6) * g + b

    xn = ln(x, layer.norm1.g.data, layer.norm1.b.data)
    q = xn @ layer.q.w.data + layer.q.b.data
    k = xn @ layer.k.w.data + layer.k.b.data
    v = xn @ layer.v.w.data + layer.v.b.data
    L, C = x.shape
    h = layer.heads
    d = C // h
    ctx = np.zeros((L, C))
    for hi in range(h):
        qs = q[:, hi * d:(hi + 1) * d]
        ks = k[:, hi * d:(hi + 1) * d]
        vs = v[:, hi * d:(hi + 1) * d]
        scores = qs @ ks.T / np.sqrt(d)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        attn = e / e.sum(-1, keepdims=True)
        ctx[:, hi * d:(hi + 1) * d] = attn @ vs
    y = x + ctx @ layer.proj.w.data + layer.proj.b.data
    yn = ln(y, layer.norm2.g.data, layer.norm2.b.data)
    hdn = yn @ layer.mlp.fc1.w.data + layer.mlp.fc1.b.data
    from scipy.special import erf
    act = hdn * 0.5 * (1 + erf(hdn / np.sqrt(2)))
    return y + act @ layer.mlp.fc2.w.data + layer.mlp.fc2.b.data


class TestEncoderLayer:
    def test_single_token_attention_is_one(self):
        layer = EncoderLayer(Rng(4), 16, 2)
        x = Tensor(Rng(5).normal((1, 16)))
        _, attn = layer(x, return_attn=True)
        assert np.allclose(attn.data, 1.0)

    def test_identical_tokens_permutation_symmetry(self):
        layer = EncoderLayer(Rng(6), 16, 2)
        row = Rng(7).normal((16,))
        x = Tensor(np.stack([row, row]))
        out = layer(x).data
        assert np.allclose(out[0], out[1], atol=1e-14)

    def test_dense_attention_oracle(self):
        layer = EncoderLayer(Rng(8), 8, 2)
        x = Rng(9).normal((4, 8))
        got = layer(Tensor(x)).data
        expect = dense_attention_oracle(x, layer)
        assert np.abs(got - expect).max() < 1e-10

    def test_shape_preserved(self):
        layer = EncoderLayer(Rng(10), 16, 4)
        x = Tensor(Rng(11).normal((9, 16)))
        assert layer(x).shape == (9, 16)

    def test_attention_rows_sum_to_one(self):
        layer = EncoderLayer(Rng(12), 16, 2)
        x = Tensor(Rng(13).normal((6, 16)) * 5)
        _, attn = layer(x, return_attn=True)
        assert np.abs(attn.data.sum(-1) - 1.0).max() < 1e-9


class TestTappedRun:
    def test_final_tap_only(self):
        cfg = toy_cfg(tap_layers=(2,))
        enc = ViTEncoder(cfg, Rng(14))
        taps = run_encoder_tapped(Tensor(Rng(15).uniform(0, 1, (16, 16, 3))),
                                  cfg, enc)
        assert len(taps) == 1
        assert taps[0].grid == (2, 2)

    def test_three_taps_of_twelve_style(self):
        cfg = EncoderConfig(patch=8, width=16, depth=4, heads=2,
                            image_hw=(16, 16), tap_layers=(2, 3, 4))
        enc = ViTEncoder(cfg, Rng(16))
        taps = enc.forward_tapped(Tensor(Rng(17).uniform(0, 1, (16, 16, 3))))
        assert len(taps) == 3
        assert all(t.grid == (2, 2) for t in taps)

    def test_tap_chain_definition(self):
        # tap k+1 equals the next layer applied to tap k
        cfg = toy_cfg(tap_layers=(1, 2))
        enc = ViTEncoder(cfg, Rng(18))
        img = Tensor(Rng(19).uniform(0, 1, (16, 16, 3)))
        taps = enc.forward_tapped(img)
        relayed = enc.layers[1](taps[0].tokens)
        assert np.array_equal(relayed.data, taps[1].tokens.data)

    def test_layer_outputs_keep_shape(self):
        cfg = toy_cfg()
        enc = ViTEncoder(cfg, Rng(20))
        tg = enc.embed(Tensor(Rng(21).uniform(0, 1, (16, 16, 3))))
        x = tg.tokens
        for layer in enc.layers:
            x = layer(x)
            assert x.shape == tg.tokens.shape


def test_full_encoder_gradient():
    cfg = toy_cfg()
    enc = ViTEncoder(cfg, Rng(22))
    img = Tensor(Rng(23).uniform(0, 1, (16, 16, 3)))
    target = Rng(24).normal((4, 16))

    def f(p):
        taps = enc.forward_tapped(img)
        diff = taps[-1].tokens - Tensor(target)
        return T.tensor_mean(T.mul(diff, diff))

    for tensor in (enc.pos, enc.layers[0].q.w, enc.layers[1].mlp.fc2.b,
                   enc.patch_proj.w):
        err = finite_diff_check(f, tensor, max_coords=6)
        assert err <= 1e-3
