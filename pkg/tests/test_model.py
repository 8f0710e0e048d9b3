import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import HISTORY6, rerandomize, six_node_batch, small_config
from magrec.autograd import Tensor, backward, no_grad
from magrec.autograd import functional as F
from magrec.autograd.gradcheck import check_gradients
from magrec.dataset import WindowedSample
from magrec.errors import ConfigError, ContractError, DimensionError, FormatError
from magrec.graphbuild import build_flattened, build_interacting
from magrec.harness.config import parse_kv_text
from magrec.layers import GATLayer, GGCNLayer, MemPoolLayer
from magrec.model import (
    MagrecConfig,
    MagrecModel,
    MeanPoolBaseline,
    adjacency_to_edges,
    build_model,
    collate,
    domain_contextualize,
    edge_weights,
    graph_structure_learn,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    to_index,
)

# narrow widths keep the finite-difference sweep fast; every block is still present
TINY = dict(item_dim=2, user_dim=2, domain_dim=2, edge_proj_dim=2, mempool_centroids=(2, 1), tower_dims=(3, 2))


def full_model_loss(model, batch):
    return lambda: F.bce_loss(model.forward(batch, training=True), batch.labels)


@pytest.mark.parametrize("seed", range(20))
def test_full_forward_gradients(seed):
    config = small_config(**TINY)
    model = MagrecModel(config, seed=seed)
    rerandomize(model.parameters(), np.random.default_rng(seed))
    _, batch = six_node_batch(config, ((5, 0, 1), (10, 1, 0), (2, 0, 0)))
    errs = check_gradients(full_model_loss(model, batch), model.named_parameters())
    assert max(errs.values()) < 1e-4, errs


def test_gsl_projection_gets_no_gradient(model, config):
    _, batch = six_node_batch(config)
    backward(F.bce_loss(model.forward(batch, training=True), batch.labels))
    assert all(w.grad is None for w in model.w_gsl)
    assert model.item_emb.weight.grad is not None


# -- invariants --------------------------------------------------------------

def random_dag(rng, n):
    """Path plus random forward skips."""
    src = list(range(n - 1))
    trg = list(range(1, n))
    for _ in range(int(rng.integers(0, n))):
        a, b = sorted(rng.choice(n, size=2, replace=False))
        if b - a > 1:
            src.append(int(a))
            trg.append(int(b))
    return np.array(src, dtype=np.int64), np.array(trg, dtype=np.int64)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_readout_weights_sum_to_one(seed, n):
    config = small_config()
    model = MagrecModel(config, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    doms = rng.integers(0, 2, size=n)
    history = tuple((int(i), int(d)) for i, d in zip(rng.integers(0, 10, size=n), doms))
    samples = [WindowedSample(u, history, 1, 0, 1) for u in range(2)]
    graph = build_interacting(samples[0])
    batch = collate(samples, [graph, build_flattened(samples[1])], config)
    with no_grad():
        feats = model.contextualize(batch.node_items, batch.node_domains)
        alpha = model.readout_weights(feats, batch).data.ravel()
    sums = np.bincount(batch.node_graph, weights=alpha)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    assert np.all(alpha >= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 9), min_size=1, max_size=4), st.integers(1, 3))
def test_gsl_adjacency_symmetric_unit_diagonal(seed, sizes, heads):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(sum(sizes), 5))
    weights = [rng.normal(size=(5, 4)) for _ in range(heads)]
    layout = F.SegmentLayout(np.repeat(np.arange(len(sizes)), sizes), len(sizes))
    adj = graph_structure_learn(feats, weights, 0.5, layout)
    assert set(np.unique(adj)) <= {0, 1}
    for b, n in enumerate(sizes):
        block = adj[b, :n, :n]
        np.testing.assert_array_equal(block, block.T)
        np.testing.assert_array_equal(np.diag(block), 1)
        assert adj[b, n:].sum() == 0 and adj[b, :, n:].sum() == 0
        # single-graph call agrees with the batched one
        start = sum(sizes[:b])
        np.testing.assert_array_equal(graph_structure_learn(feats[start:start + n], weights, 0.5), block)


def test_gsl_matches_cosine_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    ws = [rng.normal(size=(4, 4)) for _ in range(2)]
    cos = np.zeros((6, 6))
    for w in ws:
        p = x @ w
        for i in range(6):
            for j in range(6):
                cos[i, j] += p[i] @ p[j] / (np.linalg.norm(p[i]) * np.linalg.norm(p[j])) / 2
    expected = (cos >= 0.5).astype(int)
    np.fill_diagonal(expected, 1)
    np.testing.assert_array_equal(graph_structure_learn(x, ws, 0.5), expected)


def test_adjacency_to_edges_offsets():
    layout = F.SegmentLayout(np.array([0, 0, 1]), 2)
    adj = np.zeros((2, 2, 2), dtype=np.int8)
    adj[0, 1, 0] = 1  # graph 0: node 0 -> node 1
    adj[1, 0, 0] = 1  # graph 1: self-loop on its single node
    src, trg = adjacency_to_edges(adj, layout)
    assert sorted(zip(src.tolist(), trg.tolist())) == [(0, 1), (2, 2)]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(1, 4))
def test_mempool_assignment_row_stochastic(seed, n, c):
    rng = np.random.default_rng(seed)
    layer = MemPoolLayer(4, 4, c, rng)
    assign = layer.assignment(Tensor(rng.normal(scale=3.0, size=(n, 4)))).data
    assert assign.shape == (n, c)
    assert np.all(assign >= 0)
    np.testing.assert_allclose(assign.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
def test_ggcn_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    layer = GGCNLayer(4, rng)
    src, trg = random_dag(rng, n)
    x = rng.normal(size=(n, 4))
    w = rng.normal(size=len(src))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    with no_grad():
        out = layer(Tensor(x), src, trg, Tensor(w)).data
        out_p = layer(Tensor(x[perm]), inv[src], inv[trg], Tensor(w)).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_gat_permutation_equivariance(seed, n):
    rng = np.random.default_rng(seed)
    layer = GATLayer(4, 3, 2, rng)
    src, trg = random_dag(rng, n) if n > 1 else (np.zeros(0, np.int64), np.zeros(0, np.int64))
    src = np.concatenate([src, np.arange(n)])
    trg = np.concatenate([trg, np.arange(n)])
    x = rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    with no_grad():
        out = layer(Tensor(x), src, trg).data
        out_p = layer(Tensor(x[perm]), inv[src], inv[trg]).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


# -- pieces --------------------------------------------------------------------

def test_domain_contextualize_shape_check():
    with pytest.raises(DimensionError):
        domain_contextualize(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones((5, 3))))


def test_edge_weight_is_projected_dot():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ws, wt = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    got = edge_weights(Tensor(a), Tensor(b), Tensor(ws), Tensor(wt)).data
    np.testing.assert_allclose(got, [(a[k] @ ws) @ (b[k] @ wt) for k in range(3)])


def test_to_index_maps_unknown_to_zero():
    np.testing.assert_array_equal(to_index([0, 3, 9, -1], 5), [1, 4, 0, 0])


def test_collate_deduplicates_shared_graphs(config):
    samples, batch = six_node_batch(config, ((5, 0, 1), (10, 1, 0), (2, 0, 0)))
    assert batch.n_graphs == 1 and batch.n_samples == 3 and batch.n_nodes == 6
    np.testing.assert_array_equal(batch.sample_graph, [0, 0, 0])
    assert batch.last_node.tolist() == [5]


# -- forward behaviour ------------------------------------------------------------

def test_predictions_are_probabilities(model, config):
    _, batch = six_node_batch(config)
    p = model.predict(batch)
    assert p.shape == (2,) and np.all((p > 0) & (p < 1))


def test_training_needs_two_samples(model, config):
    _, batch = six_node_batch(config, ((5, 0, 1),))
    with pytest.raises(ContractError):
        model.forward(batch, training=True)
    assert model.predict(batch).shape == (1,)


def test_eval_is_batch_composition_invariant(model, config):
    cands = ((5, 0, 1), (10, 1, 0), (2, 0, 0))
    _, full = six_node_batch(config, cands)
    together = model.predict(full)
    alone = np.concatenate([model.predict(six_node_batch(config, (c,))[1]) for c in cands])
    np.testing.assert_allclose(together, alone, rtol=0, atol=1e-14)


@pytest.mark.parametrize("flags", [(False, True, True), (True, False, True), (True, True, False)])
def test_ablation_flags_remove_parameters_from_graph(flags, config):
    cfg = dataclasses.replace(config, use_rie=flags[0], use_gie=flags[1], use_dc=flags[2])
    model = MagrecModel(cfg, seed=0)
    _, batch = six_node_batch(cfg)
    backward(F.bce_loss(model.forward(batch, training=True), batch.labels))
    assert (model.ggcn[0].w_msg.grad is not None) == flags[0]
    assert (model.gat[0].proj[0].grad is not None) == flags[1]
    assert (model.w_d.grad is not None) == flags[2]


def test_disabled_branches_do_not_affect_output(config):
    cfg = dataclasses.replace(config, use_rie=False)
    model = MagrecModel(cfg, seed=0)
    _, batch = six_node_batch(cfg)
    before = model.predict(batch)
    for p in model.ggcn[0].parameters():
        p.data += 1.0
    np.testing.assert_array_equal(model.predict(batch), before)


def test_config_validation():
    with pytest.raises(ConfigError):
        MagrecConfig(mempool_centroids=(4, 2))
    with pytest.raises(ConfigError):
        MagrecConfig(item_dim=63, gat_heads=2)
    cfg = small_config()
    assert MagrecConfig.from_mapping(parse_kv_text(cfg.to_text())) == cfg


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, model, config):
    _, batch = six_node_batch(config)
    model.forward(batch, training=True)  # move batch-norm buffers off their defaults
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.predict(batch), model.predict(batch))
    assert set(read_tensors(path)) == set(model.named_parameters()) | {"bn.running_mean", "bn.running_var"}


def test_checkpoint_bytes_are_deterministic(tmp_path, config):
    for name in ("a", "b"):
        save_checkpoint(MagrecModel(config, seed=3), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        read_tensors(p)


def test_history_fixture_is_two_domain():
    assert len(HISTORY6) == 6 and {d for _, d in HISTORY6} == {0, 1}


# -- mean-pooling baseline -------------------------------------------------------

def test_baseline_gradients():
    config = small_config(architecture="meanpool")
    for seed in range(5):
        model = build_model(config, seed=seed)
        assert isinstance(model, MeanPoolBaseline)
        rerandomize(model.parameters(), np.random.default_rng(seed))
        _, batch = six_node_batch(config, ((5, 0, 1), (10, 1, 0), (2, 0, 0)))
        errs = check_gradients(full_model_loss(model, batch), model.named_parameters())
        assert max(errs.values()) < 1e-4, errs


def test_baseline_ignores_history_order():
    config = small_config(architecture="meanpool")
    model = build_model(config, seed=1)
    rerandomize(model.parameters(), np.random.default_rng(1))
    _, batch = six_node_batch(config)
    shuffled = [WindowedSample(1, HISTORY6[::-1], i, d, y) for i, d, y in ((5, 0, 1), (10, 1, 0))]
    other = collate(shuffled, [build_interacting(shuffled[0])] * 2, config)
    np.testing.assert_allclose(model.predict(batch), model.predict(other), rtol=0, atol=1e-14)


def test_baseline_checkpoint_roundtrip(tmp_path):
    config = small_config(architecture="meanpool")
    model = build_model(config, seed=2)
    _, batch = six_node_batch(config)
    save_checkpoint(model, tmp_path / "b.ckpt")
    back = load_checkpoint(tmp_path / "b.ckpt")
    assert isinstance(back, MeanPoolBaseline)
    np.testing.assert_array_equal(back.predict(batch), model.predict(batch))


def test_unknown_architecture_rejected():
    with pytest.raises(ConfigError):
        small_config(architecture="transformer").validate()
