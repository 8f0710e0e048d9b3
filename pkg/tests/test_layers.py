import numpy as np
import pytest

from magrec.autograd import Tensor, backward, no_grad
from magrec.autograd import functional as F
from magrec.autograd.gradcheck import check_gradients
from magrec.errors import ContractError, DimensionError
from magrec.layers import (
    BatchNorm,
    Dense,
    EmbeddingTable,
    GATLayer,
    GGCNLayer,
    MemPoolLayer,
    batchnorm_forward,
    gat_forward,
    ggcn_forward,
    mempool_forward,
)

# 6-node DAG: a path plus two skips
SRC = np.array([0, 1, 2, 3, 4, 0, 1])
TRG = np.array([1, 2, 3, 4, 5, 2, 3])


def features(rng, n=6, d=4):
    return Tensor(rng.normal(size=(n, d)), requires_grad=True, name="x")


def objective(out, rng):
    w = rng.normal(size=out.shape)
    return lambda t: F.sum(t * Tensor(w))


class TestGGCN:
    def test_no_edges_keeps_gru_of_zero_message(self):
        rng = np.random.default_rng(0)
        layer = GGCNLayer(3, rng)
        h = Tensor(rng.normal(size=(2, 3)))
        out = layer(h, [], [], Tensor(np.zeros(0)))
        expected = layer.gru(Tensor(np.zeros((2, 3))), h)
        np.testing.assert_allclose(out.data, expected.data)

    def test_message_hand_computed(self):
        rng = np.random.default_rng(1)
        layer = GGCNLayer(2, rng)
        layer.w_msg.data[...] = np.eye(2)
        h = Tensor([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]])
        m = layer.message(h, [0, 1], [2, 2], Tensor([0.5, 2.0]))
        np.testing.assert_allclose(m.data, [[0, 0], [0, 0], [6.5, 9.0]])

    def test_edge_weight_length_checked(self):
        layer = GGCNLayer(2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            layer(Tensor(np.ones((3, 2))), [0], [1], Tensor([1.0, 2.0]))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        layer = GGCNLayer(4, rng)
        x = features(rng)
        ew = Tensor(rng.normal(size=len(SRC)), requires_grad=True, name="edge_w")
        w = Tensor(rng.normal(size=(6, 4)))
        errs = check_gradients(lambda: F.sum(ggcn_forward(layer, x, (SRC, TRG), ew) * w), [x, ew, *layer.parameters()])
        assert max(errs.values()) < 1e-4, errs


class TestGAT:
    def test_output_shape(self):
        layer = GATLayer(4, 3, 2, np.random.default_rng(0))
        out = layer(Tensor(np.ones((3, 4))), [0, 1, 2, 0], [0, 1, 2, 1])
        assert out.shape == (3, 6)

    def test_single_in_edge_is_projection(self):
        rng = np.random.default_rng(2)
        layer = GATLayer(4, 2, 2, rng)
        x = rng.normal(size=(2, 4))
        out = layer(Tensor(x), [1, 0], [0, 1]).data
        # each node attends to exactly one neighbour with weight 1
        expected = np.concatenate([x[[1, 0]] @ p.data for p in layer.proj], axis=1)
        np.testing.assert_allclose(out, expected)

    def test_node_without_in_edge(self):
        layer = GATLayer(4, 2, 2, np.random.default_rng(0))
        with pytest.raises(ContractError):
            layer(Tensor(np.ones((3, 4))), [0, 1], [1, 2])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        layer = GATLayer(4, 3, 2, rng)
        for p in layer.parameters():
            p.data[...] = rng.normal(size=p.shape)
        x = features(rng)
        src = np.concatenate([SRC, np.arange(6)])
        trg = np.concatenate([TRG, np.arange(6)])
        w = Tensor(rng.normal(size=(6, 6)))
        errs = check_gradients(lambda: F.sum(gat_forward(layer, x, (src, trg)) * w), [x, *layer.parameters()])
        assert max(errs.values()) < 1e-4, errs


class TestMemPool:
    def test_assignment_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        layer = MemPoolLayer(4, 4, 3, rng)
        c = layer.assignment(Tensor(rng.normal(size=(5, 4)))).data
        np.testing.assert_allclose(c.sum(axis=1), 1.0)
        assert np.all(c > 0)

    def test_single_centroid_is_relu_of_column_sum(self):
        rng = np.random.default_rng(3)
        layer = MemPoolLayer(4, 2, 1, rng)
        x = rng.normal(size=(5, 4))
        out = mempool_forward(layer, Tensor(x)).data
        np.testing.assert_allclose(out, np.maximum(x.sum(axis=0, keepdims=True) @ layer.w_out.data, 0.0))

    def test_batched_matches_per_graph(self):
        rng = np.random.default_rng(4)
        layer = MemPoolLayer(4, 4, 2, rng)
        x = rng.normal(size=(7, 4))
        seg = np.array([0, 0, 0, 1, 1, 1, 1])
        out, nxt = layer(Tensor(x), F.SegmentLayout(seg, 2))
        np.testing.assert_allclose(out.data[:2], mempool_forward(layer, Tensor(x[:3])).data)
        np.testing.assert_allclose(out.data[2:], mempool_forward(layer, Tensor(x[3:])).data)
        np.testing.assert_array_equal(nxt.segments, [0, 0, 1, 1])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        layer = MemPoolLayer(4, 3, 2, rng)
        x = features(rng)
        seg = np.array([0, 0, 0, 0, 1, 1])
        w = Tensor(rng.normal(size=(4, 3)))
        fn = lambda: F.sum(layer(x, F.SegmentLayout(seg, 2))[0] * w)  # noqa: E731
        errs = check_gradients(fn, [x, *layer.parameters()])
        assert max(errs.values()) < 1e-4, errs


class TestBatchNorm:
    def test_training_normalizes(self):
        bn = BatchNorm(2)
        out = bn(Tensor([[1.0, 10.0], [3.0, 20.0]]), training=True).data
        np.testing.assert_allclose(out, [[-1, -1], [1, 1]], atol=1e-4)

    def test_running_statistics(self):
        bn = BatchNorm(1)
        bn(Tensor([[1.0], [3.0]]), training=True)
        np.testing.assert_allclose(bn.running_mean, [0.2])
        # biased batch variance is 1
        np.testing.assert_allclose(bn.running_var, [1.0])

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(1)
        out = bn(Tensor([[2.0]]), training=False).data
        np.testing.assert_allclose(out, [[2.0 / np.sqrt(1 + 1e-5)]])

    def test_training_needs_two_rows(self):
        with pytest.raises(ContractError):
            BatchNorm(2)(Tensor(np.ones((1, 2))), training=True)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        bn = BatchNorm(3)
        bn.scale.data[...] = rng.normal(size=3)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)))
        errs = check_gradients(lambda: F.sum(batchnorm_forward(bn, x, True) * w), [x, bn.scale, bn.shift])
        assert max(errs.values()) < 1e-4, errs


class TestDenseAndEmbedding:
    def test_dense_affine(self):
        layer = Dense(2, 1, np.random.default_rng(0))
        layer.weight.data[...] = [[1.0], [2.0]]
        layer.bias.data[...] = 0.5
        np.testing.assert_allclose(layer(Tensor([[1.0, 1.0]])).data, [[3.5]])

    def test_embedding_gradient_scatters(self):
        table = EmbeddingTable(4, 2, np.random.default_rng(0))
        backward(F.sum(table([1, 1, 3])))
        np.testing.assert_array_equal(table.weight.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            EmbeddingTable(4, 2, np.random.default_rng(0))([4])

    def test_dense_gradients(self):
        rng = np.random.default_rng(0)
        layer = Dense(3, 2, rng)
        x = features(rng, 4, 3)
        errs = check_gradients(lambda: F.sum(F.sigmoid(layer(x))), [x, *layer.parameters()])
        assert max(errs.values()) < 1e-6


def test_named_parameters_are_dotted():
    layer = GGCNLayer(2, np.random.default_rng(0))
    names = set(layer.named_parameters())
    assert {"w_msg", "w_in.0", "w_hid.2", "b_in.1"} <= names


def test_no_grad_forward_builds_no_graph():
    layer = GGCNLayer(2, np.random.default_rng(0))
    with no_grad():
        out = layer(Tensor(np.ones((2, 2))), [0], [1], Tensor([1.0]))
    assert not out.requires_grad
