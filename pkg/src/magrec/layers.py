"""Neural building blocks: embeddings, dense layers, gated graph convolution,
graph attention, memory pooling and batch normalization.

Graph layers work on a stack of node rows with edges given as parallel
``src``/``trg`` index arrays; messages travel from ``src`` to ``trg``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from magrec.autograd import functional as F
from magrec.autograd.tensor import Tensor
from magrec.errors import ContractError, DimensionError


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Layer:
    """Owns named parameter tensors; nested layers are flattened with dotted names."""

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Layer):
                out.update({f"{key}.{k}": v for k, v in value.named_parameters().items()})
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        out.update({f"{key}.{i}.{k}": v for k, v in item.named_parameters().items()})
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class EmbeddingTable(Layer):
    """Lookup table; index 0 is reserved for padding / unknown ids."""

    def __init__(self, vocabulary_size: int, dim: int, rng: np.random.Generator, std: float = 0.01):
        if vocabulary_size < 1 or dim < 1:
            raise ValueError("vocabulary_size and dim must be positive")
        self.vocabulary_size = vocabulary_size
        self.dim = dim
        self.weight = Tensor(rng.normal(0.0, std, size=(vocabulary_size, dim)), requires_grad=True, name="weight")

    def __call__(self, index) -> Tensor:
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= self.vocabulary_size):
            raise IndexError(f"embedding index out of range [0, {self.vocabulary_size})")
        return F.gather_rows(self.weight, index)

    def decay_mask(self) -> np.ndarray:
        """Weight-decay mask that leaves the reserved row alone."""
        mask = np.ones((self.vocabulary_size, 1))
        mask[0] = 0.0
        return mask


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, in_dim, (in_dim, out_dim), "weight")
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, name="bias") if bias else None

    def __call__(self, x) -> Tensor:
        out = F.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class GGCNLayer(Layer):
    """Edge-weighted neighbour sum feeding a GRU cell.

    message_j = sum over edges z->j of e_zj * (h_z @ W_msg), then
    h_j' = GRU(message_j, h_j). Node state width is preserved.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.w_msg = uniform_init(rng, dim, (dim, dim), "w_msg")
        # input (message) and recurrent (state) weights of the update, reset and candidate gates
        self.w_in = [uniform_init(rng, dim, (dim, dim), "w_in") for _ in range(3)]
        self.w_hid = [uniform_init(rng, dim, (dim, dim), "w_hid") for _ in range(3)]
        self.b_in = [Tensor(np.zeros(dim), requires_grad=True, name="b_in") for _ in range(3)]
        self.b_hid = [Tensor(np.zeros(dim), requires_grad=True, name="b_hid") for _ in range(3)]

    def message(self, states: Tensor, src, trg, edge_weights) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        trg = np.asarray(trg, dtype=np.int64)
        n = states.shape[0]
        if len(src) != len(trg):
            raise DimensionError("src and trg edge lists differ in length")
        projected = F.gather_rows(F.matmul(states, self.w_msg), src)
        weighted = F.scale_rows(projected, edge_weights)
        return F.segment_sum(weighted, trg, n)

    def gru(self, message: Tensor, states: Tensor) -> Tensor:
        gi = [F.matmul(message, w) + b for w, b in zip(self.w_in, self.b_in)]
        gh = [F.matmul(states, w) + b for w, b in zip(self.w_hid, self.b_hid)]
        z = F.sigmoid(gi[0] + gh[0])
        r = F.sigmoid(gi[1] + gh[1])
        cand = F.tanh(gi[2] + r * gh[2])
        return states + z * (cand - states)

    def __call__(self, states: Tensor, src, trg, edge_weights) -> Tensor:
        if states.ndim != 2 or states.shape[1] != self.dim:
            raise DimensionError(f"GGCN expects n x {self.dim} states, got {states.shape}")
        src = np.asarray(src, dtype=np.int64)
        trg = np.asarray(trg, dtype=np.int64)
        n = states.shape[0]
        if src.size and (max(src.max(), trg.max()) >= n or min(src.min(), trg.min()) < 0):
            raise IndexError(f"edge index out of range for {n} nodes")
        return self.gru(self.message(states, src, trg, edge_weights), states)


class GATLayer(Layer):
    """Multi-head graph attention with concatenated heads."""

    def __init__(self, in_dim: int, head_dim: int, heads: int, rng: np.random.Generator, negative_slope: float = 0.2):
        self.heads = heads
        self.head_dim = head_dim
        self.negative_slope = negative_slope
        self.proj = [uniform_init(rng, in_dim, (in_dim, head_dim), "proj") for _ in range(heads)]
        self.att_src = [uniform_init(rng, head_dim, (head_dim, 1), "att_src") for _ in range(heads)]
        self.att_trg = [uniform_init(rng, head_dim, (head_dim, 1), "att_trg") for _ in range(heads)]

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim

    def __call__(self, features: Tensor, src, trg) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        trg = np.asarray(trg, dtype=np.int64)
        n = features.shape[0]
        if n < 1:
            raise ContractError("GAT needs at least one node")
        if src.size and (max(src.max(), trg.max()) >= n or min(src.min(), trg.min()) < 0):
            raise IndexError(f"edge index out of range for {n} nodes")
        if np.any(np.bincount(trg, minlength=n) == 0):
            raise ContractError("every node needs an incoming edge (add self-loops) for attention")
        outputs = []
        for w, a_s, a_t in zip(self.proj, self.att_src, self.att_trg):
            wx = F.matmul(features, w)
            score = F.gather_rows(F.matmul(wx, a_s), src) + F.gather_rows(F.matmul(wx, a_t), trg)
            alpha = F.segment_softmax(F.leaky_relu(score, self.negative_slope), trg, n)
            outputs.append(F.segment_sum(F.scale_rows(F.gather_rows(wx, src), alpha), trg, n))
        return outputs[0] if len(outputs) == 1 else F.concat(outputs, axis=1)


class MemPoolLayer(Layer):
    """Soft clustering of node rows onto learnable keys (Student-t kernel).

    Works on a batch of graphs whose rows are grouped by ``layout``; each graph
    is pooled to exactly ``n_centroids`` rows.
    """

    def __init__(self, in_dim: int, out_dim: int, n_centroids: int, rng: np.random.Generator, key_heads: int = 2):
        self.n_centroids = n_centroids
        self.keys = [uniform_init(rng, in_dim, (n_centroids, in_dim), "keys") for _ in range(key_heads)]
        self.w_out = uniform_init(rng, in_dim, (in_dim, out_dim), "w_out")

    def assignment(self, features: Tensor) -> Tensor:
        """Row-stochastic n x c soft assignment of rows to centroids."""
        sq = F.sum(features * features, axis=1, keepdims=True)
        per_head = []
        for keys in self.keys:
            ksq = F.reshape(F.sum(keys * keys, axis=1), (1, -1))
            dist = sq + ksq - 2.0 * F.matmul(features, F.transpose(keys))
            kernel = 1.0 / (1.0 + dist)
            per_head.append(kernel / F.sum(kernel, axis=1, keepdims=True))
        mean = per_head[0]
        for c in per_head[1:]:
            mean = mean + c
        mean = mean * (1.0 / len(per_head))
        return mean / F.sum(mean, axis=1, keepdims=True)

    def __call__(self, features: Tensor, layout: F.SegmentLayout) -> tuple[Tensor, F.SegmentLayout]:
        assign = self.assignment(features)
        pooled = F.pool_by_segment(assign, features, layout)
        out = F.relu(F.matmul(pooled, self.w_out))
        c = self.n_centroids
        next_layout = F.SegmentLayout(np.repeat(np.arange(layout.n_segments), c), layout.n_segments)
        return out, next_layout


class BatchNorm(Layer):
    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(dim), requires_grad=True, name="scale")
        self.shift = Tensor(np.zeros(dim), requires_grad=True, name="shift")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise DimensionError(f"BatchNorm expects m x {self.dim}, got {x.shape}")
        if training:
            if x.shape[0] < 2:
                raise ContractError("batch normalization in training mode needs at least 2 rows")
            mu = F.mean(x, axis=0, keepdims=True)
            centered = x - mu
            var = F.mean(centered * centered, axis=0, keepdims=True)
            normed = centered / F.power(var + self.eps, 0.5)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu.data.reshape(-1)
            self.running_var = m * self.running_var + (1.0 - m) * var.data.reshape(-1)
        else:
            normed = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normed * self.scale + self.shift

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


# Functional spellings of the layer forwards.

def ggcn_forward(layer: GGCNLayer, states: Tensor, edges: tuple[Sequence[int], Sequence[int]], edge_weights) -> Tensor:
    return layer(states, edges[0], edges[1], edge_weights)


def gat_forward(layer: GATLayer, features: Tensor, edges: tuple[Sequence[int], Sequence[int]]) -> Tensor:
    return layer(features, edges[0], edges[1])


def mempool_forward(layer: MemPoolLayer, features: Tensor) -> Tensor:
    """Pool a single graph's rows to ``layer.n_centroids`` rows."""
    layout = F.SegmentLayout(np.zeros(features.shape[0], dtype=np.int64), 1)
    return layer(features, layout)[0]


def batchnorm_forward(bn: BatchNorm, x: Tensor, training: bool) -> Tensor:
    return bn(x, training)
