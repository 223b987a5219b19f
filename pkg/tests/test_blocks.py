import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pggcn import gradcheck
from pggcn.blocks import BatchNorm, GCNBlock, GraphConv, Linear, ReLU, STGCNBlock, TemporalConv
from pggcn.exceptions import ConfigurationError, DimensionError
from pggcn.graph import build_ntu_graph, chain_graph, normalize_adjacency


def graph_conv_oracle(x, adj, w, bias):
    b, t, n, cin = x.shape
    k, _, cout = w.shape
    out = np.zeros((b, t, n, cout))
    for bi in range(b):
        for ti in range(t):
            for i in range(n):
                for o in range(cout):
                    s = bias[o]
                    for kk in range(k):
                        for j in range(n):
                            for c in range(cin):
                                s += adj[kk, i, j] * x[bi, ti, j, c] * w[kk, c, o]
                    out[bi, ti, i, o] = s
    return out


def temporal_conv_oracle(x, kernel, stride):
    kt = kernel.shape[0]
    pad = (kt - 1) // 2
    b, t, n, c = x.shape
    t_out = (t + 2 * pad - kt) // stride + 1
    out = np.zeros((b, t_out, n, c))
    for s in range(t_out):
        for tau in range(kt):
            src = s * stride + tau - pad
            if 0 <= src < t:
                out[:, s] += x[:, src] @ kernel[tau]
    return out


class TestGraphConv:
    def test_identity_adjacency_and_weight(self):
        layer = GraphConv(3, 3, np.eye(4)[None])
        layer.weight.value[...] = np.eye(3)
        x = np.random.default_rng(0).standard_normal((2, 5, 4, 3))
        assert np.array_equal(layer(x), x)

    def test_two_joint_hand_case(self):
        layer = GraphConv(1, 1, np.full((1, 2, 2), 0.5))
        layer.weight.value[...] = 2.0
        x = np.array([1.0, 3.0]).reshape(1, 1, 2, 1)
        np.testing.assert_allclose(layer(x).ravel(), [4.0, 4.0], rtol=0, atol=1e-15)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        adj = normalize_adjacency(chain_graph(5, 2))
        layer = GraphConv(3, 4, adj, rng)
        layer.bias.value[:] = rng.standard_normal(4)
        x = rng.standard_normal((2, 3, 5, 3))
        np.testing.assert_allclose(layer(x), graph_conv_oracle(x, adj, layer.weight.value,
                                                               layer.bias.value),
                                   rtol=0, atol=1e-12)

    def test_linear_in_input(self):
        rng = np.random.default_rng(2)
        layer = GraphConv(3, 2, normalize_adjacency(chain_graph(4, 1)), rng)
        x, y = rng.standard_normal((2, 1, 3, 4, 3))
        np.testing.assert_allclose(layer(2.0 * x + y), 2.0 * layer(x) + layer(y), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.permutations(list(range(25))))
    def test_permutation_equivariance(self, perm):
        perm = np.array(perm)
        g = build_ntu_graph()
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 25, 3))
        layer = GraphConv(3, 4, normalize_adjacency(g), rng)
        permuted = GraphConv(3, 4, normalize_adjacency(g.permuted(perm)))
        permuted.weight.value[...] = layer.weight.value
        np.testing.assert_allclose(permuted(x[:, :, perm]), layer(x)[:, :, perm], rtol=0,
                                   atol=1e-12)

    def test_rejects_wrong_joint_count(self):
        layer = GraphConv(3, 3, np.eye(4)[None])
        with pytest.raises(DimensionError):
            layer(np.ones((1, 2, 5, 3)))

    def test_pre_bn_bias_is_frozen(self):
        block = GCNBlock(3, 4, np.eye(2)[None])
        assert not block.gcn.bias.trainable
        assert all(p is not block.gcn.bias for p in block.params() if p.trainable)


class TestTemporalConv:
    def test_delta_kernel_is_identity(self):
        layer = TemporalConv(2, 5)
        layer.kernel.value[...] = 0.0
        layer.kernel.value[2] = np.eye(2)
        x = np.random.default_rng(4).standard_normal((2, 7, 3, 2))
        assert np.array_equal(layer(x), x)

    def test_moving_average(self):
        layer = TemporalConv(1, 3)
        layer.kernel.value[...] = 1.0 / 3.0
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1)
        np.testing.assert_allclose(layer(x).ravel(), [1.0, 2.0, 5.0 / 3.0], atol=1e-15)

    @pytest.mark.parametrize("kt,stride", [(9, 1), (3, 2), (1, 1)])
    def test_against_window_oracle(self, kt, stride):
        rng = np.random.default_rng(5)
        layer = TemporalConv(3, kt, stride, rng)
        x = rng.standard_normal((2, 11, 4, 3))
        np.testing.assert_allclose(layer(x), temporal_conv_oracle(x, layer.kernel.value, stride),
                                   rtol=0, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            TemporalConv(2, 4)


class TestBatchNorm:
    def test_standardizes_in_train_mode(self):
        x = 3.0 * np.random.default_rng(6).standard_normal((4, 6, 5, 3)) + 7.0
        y = BatchNorm(3)(x)
        np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1.0, atol=1e-5)

    def test_constant_channel_maps_to_beta(self):
        bn = BatchNorm(1)
        bn.beta.value[:] = 0.25
        y = bn(np.full((2, 3, 4, 1), 2.0))
        assert np.array_equal(y, np.full((2, 3, 4, 1), 0.25))

    def test_eval_with_initial_stats_is_near_identity(self):
        bn = BatchNorm(2).eval()
        x = np.random.default_rng(7).standard_normal((1, 3, 4, 2))
        np.testing.assert_allclose(bn(x), x / np.sqrt(1.0 + 1e-5), rtol=0, atol=1e-15)

    def test_running_stats_unbiased(self):
        bn = BatchNorm(1)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        bn(x)
        assert bn.running_mean[0] == pytest.approx(0.2)
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)

    def test_batch_of_one_rejected_in_train_mode(self):
        with pytest.raises(ConfigurationError):
            BatchNorm(2)(np.ones((1, 3, 4, 2)))
        BatchNorm(2).eval()(np.ones((1, 3, 4, 2)))

    def test_bypass(self):
        bn = BatchNorm(2)
        bn.bypass = True
        x = np.random.default_rng(8).standard_normal((2, 3, 4, 2))
        assert bn(x) is x or np.array_equal(bn(x), x)


class TestBlocks:
    def _zero_block(self, c):
        block = STGCNBlock(c, c, normalize_adjacency(chain_graph(5, 2)), 9,
                           rng=np.random.default_rng(9))
        block.gcn.weight.value[...] = 0.0
        block.tcn.kernel.value[...] = 0.0
        block.bn1.bypass = block.bn2.bypass = True
        return block

    def test_residual_identity_for_non_negative_input(self):
        block = self._zero_block(4)
        x = np.abs(np.random.default_rng(10).standard_normal((2, 6, 5, 4)))
        assert np.array_equal(block(x), x)

    def test_residual_applies_relu_after_add(self):
        block = self._zero_block(4)
        x = np.random.default_rng(11).standard_normal((2, 6, 5, 4))
        assert np.array_equal(block(x), np.maximum(x, 0.0))

    def test_no_residual_when_channels_change(self):
        block = STGCNBlock(3, 4, np.eye(5)[None], 9)
        assert not block.residual

    def test_gcn_block_zero_input_gives_relu_beta(self):
        block = GCNBlock(3, 4, normalize_adjacency(chain_graph(5, 2)))
        block.bn.beta.value[:] = [-1.0, 0.5, 0.0, 2.0]
        y = block(np.zeros((2, 3, 5, 3)))
        assert np.array_equal(y, np.broadcast_to([0.0, 0.5, 0.0, 2.0], y.shape))

    @pytest.mark.parametrize("cin,cout", [(3, 8), (8, 8)])
    def test_shapes(self, cin, cout):
        block = STGCNBlock(cin, cout, normalize_adjacency(chain_graph(5, 2)), 9)
        assert block(np.ones((2, 10, 5, cin))).shape == (2, 10, 5, cout)

    def test_relu_and_linear(self):
        relu = ReLU()
        assert np.array_equal(relu(np.array([-2.0, 3.0])), [0.0, 3.0])
        np.testing.assert_array_equal(relu.backward(np.array([5.0, 5.0])), [0.0, 5.0])
        lin = Linear(2, 1)
        lin.weight.value[...] = [[1.0], [2.0]]
        lin.bias.value[:] = 0.5
        assert lin(np.array([[3.0, 4.0]]))[0, 0] == 11.5


@pytest.mark.parametrize("suite", gradcheck.LAYER_SUITES, ids=lambda s: s.__name__)
@pytest.mark.parametrize("seed", [0, 7])
def test_layer_gradients(suite, seed):
    result = suite(np.random.default_rng(seed))
    assert result.passed, f"{result.name}: {result.max_relative_error:.3e} at {result.worst}"
