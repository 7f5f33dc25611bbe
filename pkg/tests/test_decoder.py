import numpy as np
import pytest

from atmseg import tensor as T
from atmseg.decoder import (
    AtmDecoder, AtmStage, ClassTokens, assemble_segmentation,
    atm_cross_attention, attention_to_mask, cascade_decode, classify_tokens,
    new_class_tokens, predict_labels, project_qkv, similarity_map,
)
from atmseg.encoder import Linear, TokenGrid
from atmseg.tensor import ContractViolation, Rng, Tensor, finite_diff_check


def feats(rng, L=6, C=8, grid=(2, 3)):
    return TokenGrid(Tensor(rng.normal((L, C))), grid)


class TestProjectQkv:
    def test_zero_weights(self):
        rng = Rng(0)
        wq, wk, wv = (Linear(rng, 8, 8) for _ in range(3))
        for lin in (wq, wk, wv):
            lin.w.data[:] = 0.0
        q, k, v = project_qkv(Tensor(rng.normal((3, 8))), feats(rng),
                              wq, wk, wv)
        for t in (q, k, v):
            assert np.array_equal(t.data, np.zeros(t.shape))

    def test_identity_projection(self):
        rng = Rng(1)
        wq, wk, wv = (Linear(rng, 8, 8) for _ in range(3))
        wq.w.data = np.eye(8)
        wq.b.data[:] = 0.0
        g = Tensor(rng.normal((3, 8)))
        q, _, _ = project_qkv(g, feats(rng), wq, wk, wv)
        assert np.array_equal(q.data, g.data)

    def test_affine_oracle(self):
        rng = Rng(2)
        wq, wk, wv = (Linear(rng, 8, 8) for _ in range(3))
        g = rng.normal((3, 8))
        f = feats(rng)
        q, k, v = project_qkv(Tensor(g), f, wq, wk, wv)
        assert np.abs(q.data - (g @ wq.w.data + wq.b.data)).max() < 1e-12
        assert np.abs(k.data - (f.tokens.data @ wk.w.data + wk.b.data)).max() < 1e-12
        assert np.abs(v.data - (f.tokens.data @ wv.w.data + wv.b.data)).max() < 1e-12

    def test_width_mismatch(self):
        rng = Rng(3)
        wq, wk, wv = (Linear(rng, 8, 8) for _ in range(3))
        with pytest.raises(ContractViolation):
            project_qkv(Tensor(rng.normal((3, 4))), feats(rng), wq, wk, wv)


class TestSimilarityMap:
    def test_orthogonal(self):
        q = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
        k = Tensor(np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]))
        assert np.array_equal(similarity_map(q, k).data, np.zeros((1, 2)))

    def test_unit_vectors_give_half(self):
        v = np.array([[0.0, 1.0, 0.0, 0.0]])
        sim = similarity_map(Tensor(v), Tensor(v))
        assert sim.data[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_dot_product_oracle(self):
        rng = Rng(4)
        q, k = rng.normal((3, 8)), rng.normal((5, 8))
        expect = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                expect[i, j] = np.dot(q[i], k[j]) / np.sqrt(8)
        got = similarity_map(Tensor(q), Tensor(k)).data
        assert np.abs(got - expect).max() < 1e-12


class TestCrossAttention:
    def test_single_token_value_passthrough(self):
        v = Tensor(Rng(5).normal((1, 8)))
        sim = Tensor(Rng(6).normal((3, 1)))
        out = atm_cross_attention(sim, v)
        for row in out.data:
            assert np.abs(row - v.data[0]).max() < 1e-15

    def test_uniform_sim_gives_mean(self):
        rng = Rng(7)
        v = rng.normal((5, 8))
        sim = Tensor(np.zeros((2, 5)))
        out = atm_cross_attention(sim, Tensor(v))
        assert np.abs(out.data - v.mean(axis=0)).max() < 1e-12

    def test_dense_oracle(self):
        rng = Rng(8)
        sim, v = rng.normal((3, 5)), rng.normal((5, 8))
        e = np.exp(sim - sim.max(-1, keepdims=True))
        attn = e / e.sum(-1, keepdims=True)
        got = atm_cross_attention(Tensor(sim), Tensor(v)).data
        assert np.abs(got - attn @ v).max() < 1e-10


class TestAttentionToMask:
    def test_zero_sim_half(self):
        m = attention_to_mask(Tensor(np.zeros((2, 3))))
        assert np.array_equal(m.data, np.full((2, 3), 0.5))

    def test_saturation(self):
        m = attention_to_mask(Tensor(np.full((1, 4), 30.0)))
        assert np.abs(m.data - 1.0).max() < 1e-9

    def test_elementwise_sigmoid_oracle_bit_exact(self):
        x = Rng(9).normal((4, 6)) * 3
        got = attention_to_mask(Tensor(x)).data
        expect = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                          np.exp(x) / (1.0 + np.exp(x)))
        assert np.array_equal(got, expect)


def zero_update_paths(stage: AtmStage):
    """Make the stage's token update exactly identity (mask still live)."""
    stage.proj.w.data[:] = 0.0
    stage.proj.b.data[:] = 0.0
    stage.mlp.fc2.w.data[:] = 0.0
    stage.mlp.fc2.b.data[:] = 0.0


class TestAtmStage:
    def test_zero_output_proj_residual_identity(self):
        rng = Rng(10)
        stage = AtmStage(rng, 8, 2)
        stage.proj.w.data[:] = 0.0
        stage.proj.b.data[:] = 0.0
        g = Tensor(rng.normal((3, 8)))
        out = stage(g, feats(rng))
        # tokens' = G + MLP(LN(G)) when the attention update path is zeroed
        xn = T.layer_norm(g, 1e-6) * stage.norm.g + stage.norm.b
        expect = g + stage.mlp(xn)
        assert np.abs(out.tokens.data - expect.data).max() < 1e-14

    def test_single_token_unrolled_oracle(self):
        rng = Rng(11)
        stage = AtmStage(rng, 4, 1)
        g = rng.normal((1, 4))
        f = rng.normal((1, 4))
        out = stage(Tensor(g), TokenGrid(Tensor(f), (1, 1)))

        q = g @ stage.wq.w.data + stage.wq.b.data
        k = f @ stage.wk.w.data + stage.wk.b.data
        v = f @ stage.wv.w.data + stage.wv.b.data
        sim = q @ k.T / 2.0  # sqrt(4)
        assert np.abs(out.sim.data - sim).max() < 1e-12
        # singleton softmax: attention output is exactly v
        x = g + (v @ stage.proj.w.data + stage.proj.b.data)
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        xn = (x - mu) / np.sqrt(var + 1e-6) * stage.norm.g.data + stage.norm.b.data
        hid = xn @ stage.mlp.fc1.w.data + stage.mlp.fc1.b.data
        from scipy.special import erf
        act = hid * 0.5 * (1 + erf(hid / np.sqrt(2)))
        expect = x + act @ stage.mlp.fc2.w.data + stage.mlp.fc2.b.data
        assert np.abs(out.tokens.data - expect).max() < 1e-10

    def test_mask_is_sigmoid_of_sim(self):
        rng = Rng(12)
        stage = AtmStage(rng, 8, 2)
        out = stage(Tensor(rng.normal((3, 8))), feats(rng))
        assert np.array_equal(out.mask.data, T.sigmoid(out.sim).data)


class TestCascade:
    def test_single_stage_combined_equals_mask(self):
        rng = Rng(13)
        stage = AtmStage(rng, 8, 2)
        ct = new_class_tokens(rng, 3, 8)
        combined, tokens, per = cascade_decode(ct, [feats(rng)], [stage])
        assert np.array_equal(combined.data, per[0].mask.data)

    def test_identical_stages_and_taps_mean_of_equals(self):
        rng = Rng(14)
        stage = AtmStage(rng, 8, 2)
        zero_update_paths(stage)  # token chain is identity
        ct = new_class_tokens(rng, 3, 8)
        f = feats(rng)
        combined, _, per = cascade_decode(ct, [f, f], [stage, stage])
        assert np.abs(combined.data - per[0].mask.data).max() < 1e-15
        assert np.abs(per[0].mask.data - per[1].mask.data).max() < 1e-15

    def test_three_stage_scripted_oracle(self):
        rng = Rng(15)
        stages = [AtmStage(rng, 8, 2) for _ in range(3)]
        taps = [feats(rng.split(i)) for i in range(3)]
        ct = new_class_tokens(rng, 2, 8)
        combined, tokens, per = cascade_decode(ct, taps, stages)

        # scripted step-by-step: deepest tap first, tokens chained
        g = ct.tokens
        masks = []
        for stage, tap in zip(stages, reversed(taps)):
            out = stage(g, tap)
            masks.append(out.mask.data)
            g = out.tokens
        expect = np.mean(masks, axis=0)
        assert np.abs(combined.data - expect).max() < 1e-10
        assert np.array_equal(tokens.data, g.data)

    def test_empty_taps(self):
        rng = Rng(16)
        with pytest.raises(ContractViolation):
            cascade_decode(new_class_tokens(rng, 2, 8), [], [])


class TestClassify:
    def test_zero_weights_uniform(self):
        probs = classify_tokens(Tensor(Rng(17).normal((4, 8))),
                                Tensor(np.zeros((8, 2))))
        assert np.abs(probs.data - 0.5).max() < 1e-15

    def test_analytic_logits(self):
        tokens = Tensor(np.array([[1.0]]))
        w = Tensor(np.array([[0.0, np.log(3.0)]]))
        probs = classify_tokens(tokens, w)
        assert np.abs(probs.data - [0.25, 0.75]).max() < 1e-12

    def test_affine_softmax_oracle(self):
        rng = Rng(18)
        tok, w = rng.normal((5, 8)), rng.normal((8, 2))
        logits = tok @ w
        e = np.exp(logits - logits.max(-1, keepdims=True))
        expect = e / e.sum(-1, keepdims=True)
        got = classify_tokens(Tensor(tok), Tensor(w)).data
        assert np.abs(got - expect).max() < 1e-12


def upsample_oracle(planes, H, W):
    n, h, w = planes.shape
    out = np.zeros((n, H, W))
    for i in range(H):
        for j in range(W):
            sy = max((i + 0.5) * h / H - 0.5, 0.0)
            sx = max((j + 0.5) * w / W - 0.5, 0.0)
            y0 = min(int(sy), h - 1)
            x0 = min(int(sx), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            ty, tx = sy - y0, sx - x0
            out[:, i, j] = (planes[:, y0, x0] * (1 - ty) * (1 - tx)
                            + planes[:, y0, x1] * (1 - ty) * tx
                            + planes[:, y1, x0] * ty * (1 - tx)
                            + planes[:, y1, x1] * ty * tx)
    return out


class TestAssemble:
    def test_unit_presence_passthrough(self):
        rng = Rng(19)
        mask = Tensor(rng.uniform(0, 1, (3, 16)))
        probs = Tensor(np.tile([0.0, 1.0], (3, 1)))
        seg = assemble_segmentation(mask, (4, 4), probs, (8, 8))
        assert np.array_equal(seg.seg_scores.data, seg.masks.data)

    def test_zero_presence_zero_plane(self):
        rng = Rng(20)
        mask = Tensor(rng.uniform(0, 1, (2, 16)))
        probs = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
        seg = assemble_segmentation(mask, (4, 4), probs, (8, 8))
        assert np.array_equal(seg.seg_scores.data[1], np.zeros((8, 8)))

    def test_per_pixel_oracle(self):
        rng = Rng(21)
        mask = rng.uniform(0, 1, (3, 16))
        p = rng.uniform(0, 1, (3,))
        probs = np.stack([1 - p, p], axis=1)
        seg = assemble_segmentation(Tensor(mask), (4, 4), Tensor(probs), (8, 8))
        up = upsample_oracle(mask.reshape(3, 4, 4), 8, 8)
        expect = up * p[:, None, None]
        assert np.abs(seg.seg_scores.data - expect).max() < 1e-12

    def test_grid_mismatch(self):
        with pytest.raises(ContractViolation):
            assemble_segmentation(Tensor(np.zeros((2, 15))), (4, 4),
                                  Tensor(np.zeros((2, 2))), (8, 8))


class TestPredict:
    def test_single_class(self):
        seg = assemble_segmentation(
            Tensor(Rng(22).uniform(0, 1, (1, 16))), (4, 4),
            Tensor([[0.3, 0.7]]), (8, 8))
        assert np.array_equal(predict_labels(seg), np.zeros((8, 8), dtype=int))

    def test_two_constant_planes(self):
        seg = assemble_segmentation(
            Tensor(np.vstack([np.full(16, 0.2), np.full(16, 0.7)])), (4, 4),
            Tensor(np.tile([0.0, 1.0], (2, 1))), (8, 8))
        assert np.array_equal(predict_labels(seg), np.ones((8, 8), dtype=int))

    def test_exhaustive_argmax_oracle(self):
        rng = Rng(23)
        scores = rng.uniform(0, 1, (4, 8, 8))
        seg = type("S", (), {})()
        seg.seg_scores = Tensor(scores)
        got = predict_labels(seg)
        for i in range(8):
            for j in range(8):
                best, arg = -1.0, 0
                for c in range(4):
                    if scores[c, i, j] > best:
                        best, arg = scores[c, i, j], c
                assert got[i, j] == arg

    def test_tie_breaks_lowest_index(self):
        scores = np.zeros((3, 2, 2))
        seg = type("S", (), {})()
        seg.seg_scores = Tensor(scores)
        assert np.array_equal(predict_labels(seg), np.zeros((2, 2), dtype=int))


class TestDecoderProperties:
    def test_monotone_transform_invariance(self):
        rng = Rng(24)
        scores = rng.uniform(0.1, 0.9, (4, 6, 6))
        seg = type("S", (), {})()
        seg.seg_scores = Tensor(scores)
        base = predict_labels(seg)
        for f in (lambda s: 3 * s + 1, np.exp, np.sqrt):
            seg2 = type("S", (), {})()
            seg2.seg_scores = Tensor(f(scores))
            assert np.array_equal(predict_labels(seg2), base)

    def test_sim_shift_moves_mask_not_attention(self):
        rng = Rng(25)
        sim = Tensor(rng.normal((3, 5)))
        v = Tensor(rng.normal((5, 8)))
        shift = Tensor(np.full((3, 5), 2.5))
        attn0 = atm_cross_attention(sim, v).data
        attn1 = atm_cross_attention(sim + shift, v).data
        assert np.abs(attn0 - attn1).max() < 1e-12
        m0 = attention_to_mask(sim).data
        m1 = attention_to_mask(sim + shift).data
        assert (m1 > m0).all()

    def test_class_permutation_equivariance(self):
        rng = Rng(26)
        dec = AtmDecoder(rng, 4, 8, 2, n_stages=2)
        f = [feats(rng.split(i), L=4, C=8, grid=(2, 2)) for i in range(2)]
        seg, per, probs = dec.forward(f, (4, 4))
        labels = predict_labels(seg)

        perm = np.array([2, 0, 3, 1])
        dec.class_tokens.tokens.data = dec.class_tokens.tokens.data[perm]
        seg_p, _, _ = dec.forward(f, (4, 4))
        assert np.abs(seg_p.masks.data - seg.masks.data[perm]).max() < 1e-12
        assert np.abs(seg_p.class_probs.data - seg.class_probs.data[perm]).max() < 1e-12
        inv = np.argsort(perm)
        assert np.array_equal(perm[predict_labels(seg_p)], labels)

    def test_cascade_gradient(self):
        rng = Rng(27)
        dec = AtmDecoder(rng, 3, 8, 2, n_stages=2)
        f = [feats(rng.split(i), L=4, C=8, grid=(2, 2)) for i in range(2)]
        target = rng.normal((3, 4, 4))

        def loss(p):
            seg, per, probs = dec.forward(f, (4, 4))
            diff = seg.seg_scores - Tensor(target)
            return T.tensor_mean(T.mul(diff, diff)) \
                + T.tensor_mean(seg.class_probs)

        for tensor in (dec.class_tokens.tokens, dec.classifier,
                       dec.stages[0].wk.w, dec.stages[1].mlp.fc1.w):
            assert finite_diff_check(loss, tensor, max_coords=6) <= 1e-3
