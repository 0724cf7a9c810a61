import math

import numpy as np
import pytest

from mdnx import autodiff as ad
from mdnx import nn
from mdnx.autodiff import Tape, Tensor

from gradcheck import assert_grads_match


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestBatchNorm:
    def test_constant_input_maps_to_zero(self):
        bn = nn.BatchNorm2d(3)
        x = Tensor(np.full((2, 3, 4, 4), 7.0))
        y = bn(x)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-9)

    def test_eval_affine_identity(self):
        bn = nn.BatchNorm2d(2)
        bn.eval()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 2, 3, 3))
        mean = x.mean(axis=(0, 2, 3))
        bn._set_buffer("running_mean", mean)
        bn._set_buffer("running_var", np.ones(2))
        bn.beta.data = np.full(2, 5.0)
        y = bn(Tensor(x))
        expect = x - mean.reshape(1, 2, 1, 1) + 5.0
        np.testing.assert_allclose(y.data, expect, atol=1e-4)

    def test_batch_stats_match_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3, 5, 5))
        bn = nn.BatchNorm2d(3)
        y = bn(Tensor(x)).data

        # two explicit passes: accumulate mean, then squared deviations
        for c in range(3):
            vals = x[:, c, :, :].reshape(-1)
            m = sum(vals) / vals.size
            v = sum((vals - m) ** 2) / vals.size
            expect = (x[:, c] - m) / np.sqrt(v + 1e-5)
            np.testing.assert_allclose(y[:, c], expect, atol=1e-6)

    def test_running_stats_updated_with_momentum(self):
        bn = nn.BatchNorm2d(1, momentum=0.1)
        x = np.full((1, 1, 2, 2), 10.0)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, [1.0])  # 0.9*0 + 0.1*10
        np.testing.assert_allclose(bn.running_var, [0.9])  # 0.9*1 + 0.1*0

    def test_gradients(self, rng):
        bn = nn.BatchNorm2d(2)
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)

        def loss():
            y = bn(x)
            return ad.tsum(ad.mul(y, y))

        assert_grads_match(loss, [x, bn.gamma, bn.beta], rng=rng)


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        ln = nn.LayerNorm(4)
        y = ln(Tensor([[3.0, 3.0, 3.0, 3.0]]))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-9)

    def test_symmetric_pair_is_fixed_point(self):
        ln = nn.LayerNorm(2)
        y = ln(Tensor([[1.0, -1.0]]))
        np.testing.assert_allclose(y.data, [[1.0, -1.0]], atol=1e-5)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 6))
        y = nn.LayerNorm(6)(Tensor(x)).data
        for r in range(3):
            m = sum(x[r]) / 6
            v = sum((x[r] - m) ** 2) / 6
            np.testing.assert_allclose(y[r], (x[r] - m) / np.sqrt(v + 1e-5), atol=1e-6)

    def test_gradients(self, rng):
        ln = nn.LayerNorm(5)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)

        def loss():
            return ad.tsum(ad.power(ln(x), 2.0))

        assert_grads_match(loss, [x, ln.gamma, ln.beta], rng=rng)


class TestMultiHeadAttention:
    def test_indivisible_heads_rejected(self, rng):
        with pytest.raises(nn.ConfigError, match="divisible"):
            nn.MultiHeadAttention(10, 4, rng)

    def test_single_token_passes_value_through(self, rng):
        mha = nn.MultiHeadAttention(4, 2, rng)
        for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
            lin.weight.data = np.eye(4)
        v = rng.normal(size=(1, 1, 4))
        out = mha(Tensor(v), Tensor(v), Tensor(v))
        np.testing.assert_allclose(out.data, v, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        mha = nn.MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        _, w = mha(x, x, x, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_two_token_single_head_hand_case(self, rng):
        d = 2
        mha = nn.MultiHeadAttention(d, 1, rng)
        for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
            lin.weight.data = np.eye(d)
        x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        out = mha(Tensor(x), Tensor(x), Tensor(x)).data

        # softmax(q k^T / sqrt(d)) v by hand
        scores = x[0] @ x[0].T / math.sqrt(d)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out[0], attn @ x[0], atol=1e-9)

    def test_gradients(self, rng):
        mha = nn.MultiHeadAttention(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)

        def loss():
            return ad.tsum(ad.power(mha(x, x, x), 2.0))

        leaves = [x, mha.wq.weight, mha.wo.weight, mha.wv.bias]
        assert_grads_match(loss, leaves, rng=rng, sample=8)


class TestModuleRegistry:
    def test_names_encode_hierarchy(self, rng):
        class Inner(nn.Module):
            def __init__(self):
                super().__init__()
                self.lin = nn.Linear(2, 2, rng)

        class Outer(nn.Module):
            def __init__(self):
                super().__init__()
                self.block = Inner()
                self.blocks = nn.ModuleList([Inner()])

        m = Outer()
        names = [n for n, _ in m.named_parameters()]
        assert names == [
            "block.lin.weight",
            "block.lin.bias",
            "blocks.0.lin.weight",
            "blocks.0.lin.bias",
        ]
        assert len(set(names)) == len(names)

    def test_state_dict_round_trip(self, rng):
        m = nn.Sequential(nn.Linear(3, 4, rng), nn.LayerNorm(4))
        state = {k: v.copy() for k, v in m.state_dict().items()}
        m2 = nn.Sequential(nn.Linear(3, 4, np.random.default_rng(123)), nn.LayerNorm(4))
        m2.load_state_dict(state)
        for (k1, p1), (k2, p2) in zip(m.named_parameters(), m2.named_parameters()):
            assert k1 == k2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_load_rejects_unknown_keys(self, rng):
        m = nn.Linear(2, 2, rng)
        state = m.state_dict()
        state["bogus"] = np.zeros(1)
        with pytest.raises(KeyError, match="bogus"):
            m.load_state_dict(state)

    def test_train_eval_propagates(self, rng):
        m = nn.Sequential(nn.ConvBNAct(2, 2, 3, rng))
        assert m.items[0].bn.training
        m.eval()
        assert not m.items[0].bn.training


class TestSincos:
    def test_zero_input_gives_sin_zero_cos_one(self):
        out = nn.sincos_block(np.array([0.0]), 8)
        np.testing.assert_array_equal(out[0, 0::2], 0.0)
        np.testing.assert_array_equal(out[0, 1::2], 1.0)

    def test_matches_direct_formula(self):
        v = 0.5
        dim = 6
        out = nn.sincos_block(np.array([v]), dim)[0]
        for j in range(dim):
            freq = 10000.0 ** (2.0 * (j // 2) / dim)
            angle = v * 2.0 * math.pi / freq
            expect = math.sin(angle) if j % 2 == 0 else math.cos(angle)
            assert abs(out[j] - expect) < 1e-12

    def test_grid_table_shape(self):
        table = nn.grid_sincos_2d(3, 4, 8)
        assert table.shape == (12, 8)


def test_conv_bn_act_zero_input_stays_finite(rng):
    block = nn.ConvBNAct(3, 4, 3, rng, stride=2)
    y = block(Tensor(np.zeros((2, 3, 8, 8))))
    assert np.all(np.isfinite(y.data))


def test_linear_handles_leading_batch_dims(rng):
    lin = nn.Linear(3, 5, rng)
    x = Tensor(rng.normal(size=(2, 4, 3)))
    assert lin(x).shape == (2, 4, 5)


def test_embedding_gather_and_grad(rng):
    emb = nn.Embedding(6, 3, rng)
    idx = np.array([1, 1, 4])

    def loss():
        return ad.tsum(ad.power(emb(idx), 2.0))

    assert_grads_match(loss, [emb.weight], rng=rng)
