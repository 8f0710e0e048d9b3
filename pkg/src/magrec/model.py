"""The MAGRec network.

A batch of user-history graphs is processed as one disjoint union: node rows
of all graphs are stacked (grouped by graph) and edge indices are offset into
that stack. Per-graph reductions go through segment operations.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from magrec.autograd import functional as F
from magrec.autograd.tensor import Tensor, no_grad
from magrec.dataset import WindowedSample
from magrec.errors import ConfigError, ContractError, DimensionError, FormatError
from magrec.graphbuild import UserHistoryGraph
from magrec.layers import (
    BatchNorm,
    Dense,
    EmbeddingTable,
    GATLayer,
    GGCNLayer,
    Layer,
    MemPoolLayer,
    uniform_init,
)


@dataclass
class MagrecConfig:
    item_dim: int = 64
    user_dim: int = 64
    domain_dim: int = 128
    ggcn_layers: int = 2
    gat_layers: int = 1
    gat_heads: int = 2
    mempool_centroids: tuple[int, ...] = (32, 10, 1)
    mempool_key_heads: int = 2
    gsl_heads: int = 2
    gsl_threshold: float = 0.5
    edge_proj_dim: int = 64
    tower_dims: tuple[int, ...] = (128, 64)
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 512
    use_rie: bool = True
    use_gie: bool = True
    use_dc: bool = True
    architecture: str = "magrec"
    # vocabulary sizes, including the reserved index 0
    n_items: int = 2
    n_users: int = 2
    n_domains: int = 2

    def __post_init__(self):
        self.mempool_centroids = tuple(int(c) for c in self.mempool_centroids)
        self.tower_dims = tuple(int(c) for c in self.tower_dims)
        self.validate()

    def validate(self) -> None:
        dims = [self.item_dim, self.user_dim, self.domain_dim, self.gat_heads, self.gsl_heads,
                self.edge_proj_dim, self.mempool_key_heads, self.batch_size, self.n_items, self.n_users,
                self.n_domains, *self.mempool_centroids, *self.tower_dims]
        if any(d <= 0 for d in dims):
            raise ConfigError("all dimensions and sizes must be positive")
        if self.ggcn_layers < 0 or self.gat_layers < 1:
            raise ConfigError("ggcn_layers must be >= 0 and gat_layers >= 1")
        if not 0.0 < self.gsl_threshold < 1.0:
            raise ConfigError("gsl_threshold must lie in (0, 1)")
        if not self.mempool_centroids or self.mempool_centroids[-1] != 1:
            raise ConfigError("the MemPool stack must end with a single centroid")
        if self.item_dim % self.gat_heads:
            raise ConfigError("item_dim must be divisible by gat_heads")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.architecture not in ("magrec", "meanpool"):
            raise ConfigError("architecture must be 'magrec' or 'meanpool'")

    @property
    def gat_head_dim(self) -> int:
        return self.item_dim // self.gat_heads

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "MagrecConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            kwargs[f.name] = _coerce(f.name, mapping[f.name], getattr(cls(), f.name))
        return cls(**kwargs)


def _coerce(name: str, raw, default):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").strip("[]()").split(",") if v)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def to_index(ids, vocabulary_size: int) -> np.ndarray:
    """Map raw ids to embedding rows: id + 1, or 0 when outside the vocabulary."""
    idx = np.asarray(ids, dtype=np.int64) + 1
    idx[(idx <= 0) | (idx >= vocabulary_size)] = 0
    return idx


@dataclass
class GraphBatch:
    """Disjoint union of the distinct history graphs of a batch plus candidate features.

    Node-level arrays cover the ``n_graphs`` distinct (user, graph) pairs;
    ``sample_graph`` maps each of the ``n_samples`` candidates to its graph.
    """

    node_items: np.ndarray
    node_domains: np.ndarray
    node_graph: np.ndarray
    src: np.ndarray
    trg: np.ndarray
    last_node: np.ndarray
    graph_users: np.ndarray
    sample_graph: np.ndarray
    cand_items: np.ndarray
    cand_domains: np.ndarray
    labels: np.ndarray

    @property
    def n_graphs(self) -> int:
        return len(self.graph_users)

    @property
    def n_samples(self) -> int:
        return len(self.sample_graph)

    @property
    def n_nodes(self) -> int:
        return len(self.node_items)

    @property
    def layout(self) -> F.SegmentLayout:
        return F.SegmentLayout(self.node_graph, self.n_graphs)


def collate(samples: Sequence[WindowedSample], graphs: Sequence[UserHistoryGraph], config: MagrecConfig) -> GraphBatch:
    if len(samples) != len(graphs):
        raise DimensionError(f"{len(samples)} samples but {len(graphs)} graphs")
    if not samples:
        raise ContractError("cannot collate an empty batch")
    items, doms, owner, src, trg, last, users = [], [], [], [], [], [], []
    slot: dict[tuple[int, int], int] = {}
    sample_graph = []
    offset = 0
    for sample, g in zip(samples, graphs):
        key = (sample.user, id(g))
        b = slot.get(key)
        if b is None:
            if g.n_nodes == 0:
                raise ContractError("graph without nodes")
            b = slot[key] = len(users)
            users.append(sample.user)
            items.extend(n[0] for n in g.nodes)
            doms.extend(n[1] for n in g.nodes)
            owner.extend([b] * g.n_nodes)
            src.extend(offset + s for s in g.src)
            trg.extend(offset + t for t in g.trg)
            last.append(offset + g.last_node)
            offset += g.n_nodes
        sample_graph.append(b)
    return GraphBatch(
        node_items=to_index(items, config.n_items),
        node_domains=to_index(doms, config.n_domains),
        node_graph=np.asarray(owner, dtype=np.int64),
        src=np.asarray(src, dtype=np.int64),
        trg=np.asarray(trg, dtype=np.int64),
        last_node=np.asarray(last, dtype=np.int64),
        graph_users=to_index(users, config.n_users),
        sample_graph=np.asarray(sample_graph, dtype=np.int64),
        cand_items=to_index([s.candidate_item for s in samples], config.n_items),
        cand_domains=to_index([s.candidate_domain for s in samples], config.n_domains),
        labels=np.asarray([s.label for s in samples], dtype=np.float64),
    )


# -- stand-alone pieces --------------------------------------------------------

def domain_contextualize(item_embs: Tensor, domain_embs: Tensor, w_d: Tensor) -> Tensor:
    """Project the concatenation of item and domain embeddings into item space."""
    if item_embs.shape[0] != domain_embs.shape[0]:
        raise DimensionError(f"item rows {item_embs.shape} vs domain rows {domain_embs.shape}")
    return F.matmul(F.concat([item_embs, domain_embs], axis=1), w_d)


def edge_weights(src_domain_embs: Tensor, trg_domain_embs: Tensor, w_src: Tensor, w_trg: Tensor) -> Tensor:
    """Raw per-edge weight: dot product of the projected source and target domain embeddings."""
    projected = F.matmul(src_domain_embs, w_src) * F.matmul(trg_domain_embs, w_trg)
    return F.sum(projected, axis=1)


def graph_structure_learn(
    features: np.ndarray, gsl_weights: Sequence, threshold: float = 0.5, layout: F.SegmentLayout | None = None
) -> np.ndarray:
    """Binary adjacency from mean multi-head cosine similarity.

    ``features`` is n x d (rows grouped by ``layout`` when given). Returns a
    (n_graphs, w, w) array padded to the widest graph, or n x n for a single
    graph. Pairs with a zero-norm projection have similarity 0; the diagonal
    is always 1.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    single = layout is None
    if single:
        layout = F.SegmentLayout(np.zeros(len(feats), dtype=np.int64), 1)
    sim = np.zeros((layout.n_segments, layout.width, layout.width))
    for w in gsl_weights:
        w = w.data if isinstance(w, Tensor) else np.asarray(w)
        proj = feats @ w
        norms = np.linalg.norm(proj, axis=1, keepdims=True)
        unit = np.divide(proj, norms, out=np.zeros_like(proj), where=norms > 0)
        padded = layout.pad(unit)
        sim += np.matmul(padded, padded.transpose(0, 2, 1))
    sim /= len(gsl_weights)
    sim = 0.5 * (sim + sim.transpose(0, 2, 1))
    adj = (sim >= threshold).astype(np.int8)
    valid = np.zeros((layout.n_segments, layout.width), dtype=bool)
    valid[layout.segments, layout.offsets] = True
    adj &= (valid[:, :, None] & valid[:, None, :]).astype(np.int8)
    diag = np.arange(layout.width)
    adj[:, diag, diag] = valid.astype(np.int8)
    return adj[0] if single else adj


def adjacency_to_edges(adj: np.ndarray, layout: F.SegmentLayout) -> tuple[np.ndarray, np.ndarray]:
    """Global (src, trg) edge arrays from a padded batch adjacency ``adj[b, trg, src]``."""
    starts = np.concatenate([[0], np.cumsum(layout.counts)[:-1]])
    b, j, z = np.nonzero(adj)
    return starts[b] + z, starts[b] + j


# -- the network ---------------------------------------------------------------

class _TowerModel(Layer):
    """Embeddings, domain contextualization and the batch-normalized tower shared by all CTR models."""

    def __init__(self, config: MagrecConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config
        self.item_emb = EmbeddingTable(c.n_items, c.item_dim, rng)
        self.user_emb = EmbeddingTable(c.n_users, c.user_dim, rng)
        self.domain_emb = EmbeddingTable(c.n_domains, c.domain_dim, rng)
        self.w_d = uniform_init(rng, c.item_dim + c.domain_dim, (c.item_dim + c.domain_dim, c.item_dim), "w_d")

    def _build_tower(self, rng: np.random.Generator) -> None:
        c = self.config
        self.bn = BatchNorm(3 * c.item_dim)
        dims = (3 * c.item_dim, *c.tower_dims)
        self.tower = [Dense(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.head = Dense(dims[-1], 1, rng)

    # named buffers are saved with checkpoints alongside parameters
    def buffers(self) -> dict[str, np.ndarray]:
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def contextualize(self, items: np.ndarray, domains: np.ndarray) -> Tensor:
        item_vecs = self.item_emb(items)
        if not self.config.use_dc:
            return item_vecs
        return domain_contextualize(item_vecs, self.domain_emb(domains), self.w_d)

    def _classify(self, parts: list[Tensor], training: bool) -> Tensor:
        x = self.bn(F.concat(parts, axis=1), training)
        for layer in self.tower:
            x = F.relu(layer(x))
        return F.reshape(F.sigmoid(self.head(x)), (x.shape[0],))

    @staticmethod
    def _check_training_batch(batch: GraphBatch, training: bool) -> None:
        if training and batch.n_samples < 2:
            raise ContractError("training forward needs a batch of at least 2 samples (batch normalization)")

    def forward(self, batch: GraphBatch, training: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, batch: GraphBatch, training: bool = False) -> Tensor:
        return self.forward(batch, training)

    def predict(self, batch: GraphBatch) -> np.ndarray:
        with no_grad():
            return self.forward(batch, training=False).data.copy()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def decay_masks(self) -> list[np.ndarray | float]:
        """One weight-decay mask per entry of ``parameters()``."""
        tables = {id(t.weight): t.decay_mask() for t in (self.item_emb, self.user_emb, self.domain_emb)}
        return [tables.get(id(p), 1.0) for p in self.parameters()]


class MagrecModel(_TowerModel):
    def __init__(self, config: MagrecConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(config, rng)
        c = config
        self.w_src = uniform_init(rng, c.domain_dim, (c.domain_dim, c.edge_proj_dim), "w_src")
        self.w_trg = uniform_init(rng, c.domain_dim, (c.domain_dim, c.edge_proj_dim), "w_trg")
        self.ggcn = [GGCNLayer(c.item_dim, rng) for _ in range(c.ggcn_layers)]
        self.w_l1 = uniform_init(rng, 2 * c.item_dim, (2 * c.item_dim, c.item_dim), "w_l1")
        self.w_l2 = uniform_init(rng, c.item_dim, (c.item_dim, 1), "w_l2")
        self.w_gsl = [uniform_init(rng, c.item_dim, (c.item_dim, c.item_dim), "w_gsl") for _ in range(c.gsl_heads)]
        self.gat = [GATLayer(c.item_dim, c.gat_head_dim, c.gat_heads, rng) for _ in range(c.gat_layers)]
        self.mempool = [MemPoolLayer(c.item_dim, c.item_dim, k, rng, c.mempool_key_heads) for k in c.mempool_centroids]
        self.w_u = uniform_init(rng, c.item_dim + c.user_dim, (c.item_dim + c.user_dim, c.item_dim), "w_u")
        self._build_tower(rng)

    def edge_weights(self, batch: GraphBatch) -> Tensor:
        dom = self.domain_emb.weight
        src_dom = batch.node_domains[batch.src]
        trg_dom = batch.node_domains[batch.trg]
        return edge_weights(F.gather_rows(dom, src_dom), F.gather_rows(dom, trg_dom), self.w_src, self.w_trg)

    def readout_weights(self, states: Tensor, batch: GraphBatch) -> Tensor:
        """Attention coefficients of every node against its graph's last node (N x 1)."""
        anchor = F.gather_rows(states, batch.last_node[batch.node_graph])
        hidden = F.sigmoid(F.matmul(F.concat([states, anchor], axis=1), self.w_l1))
        return F.segment_softmax(F.matmul(hidden, self.w_l2), batch.node_graph, batch.n_graphs)

    def recent_interest(self, feats: Tensor, batch: GraphBatch) -> Tensor:
        if batch.n_nodes == 0:
            raise ContractError("recent interest needs a non-empty graph")
        weights = self.edge_weights(batch)
        states = feats
        for layer in self.ggcn:
            states = layer(states, batch.src, batch.trg, weights)
        alpha = self.readout_weights(states, batch)
        return F.segment_sum(F.scale_rows(states, alpha), batch.node_graph, batch.n_graphs)

    def learned_edges(self, feats: Tensor, layout: F.SegmentLayout) -> tuple[np.ndarray, np.ndarray]:
        adj = graph_structure_learn(feats.data, self.w_gsl, self.config.gsl_threshold, layout)
        return adjacency_to_edges(adj, layout)

    def global_interest(self, feats: Tensor, batch: GraphBatch) -> Tensor:
        layout = batch.layout
        src, trg = self.learned_edges(feats, layout)
        x = feats
        for i, layer in enumerate(self.gat):
            x = layer(x, src, trg)
            if i + 1 < len(self.gat):
                x = F.relu(x)
        for pool in self.mempool:
            x, layout = pool(x, layout)
        users = self.user_emb(batch.graph_users)
        return F.matmul(F.concat([x, users], axis=1), self.w_u)

    def forward(self, batch: GraphBatch, training: bool = False) -> Tensor:
        """Click probabilities, one per candidate in the batch."""
        self._check_training_batch(batch, training)
        c = self.config
        B = batch.n_samples
        candidate = self.contextualize(batch.cand_items, batch.cand_domains)
        if c.use_rie or c.use_gie:
            feats = self.contextualize(batch.node_items, batch.node_domains)
        zeros = Tensor(np.zeros((B, c.item_dim)))
        recent = F.gather_rows(self.recent_interest(feats, batch), batch.sample_graph) if c.use_rie else zeros
        global_ = F.gather_rows(self.global_interest(feats, batch), batch.sample_graph) if c.use_gie else zeros
        return self._classify([candidate, global_, recent], training)


class MeanPoolBaseline(_TowerModel):
    """Order-free reference: the mean history embedding stands in for both interest branches.

    The tower sees the candidate, the user-contextualized mean, and the plain
    mean, so its input width matches the full model's.
    """

    def __init__(self, config: MagrecConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(config, rng)
        c = config
        self.w_u = uniform_init(rng, c.item_dim + c.user_dim, (c.item_dim + c.user_dim, c.item_dim), "w_u")
        self._build_tower(rng)

    def forward(self, batch: GraphBatch, training: bool = False) -> Tensor:
        self._check_training_batch(batch, training)
        candidate = self.contextualize(batch.cand_items, batch.cand_domains)
        feats = self.contextualize(batch.node_items, batch.node_domains)
        counts = np.bincount(batch.node_graph, minlength=batch.n_graphs).astype(np.float64)
        mean = F.scale_rows(F.segment_sum(feats, batch.node_graph, batch.n_graphs), 1.0 / counts)
        with_user = F.matmul(F.concat([mean, self.user_emb(batch.graph_users)], axis=1), self.w_u)
        return self._classify([candidate, F.gather_rows(with_user, batch.sample_graph),
                               F.gather_rows(mean, batch.sample_graph)], training)


ARCHITECTURES = {"magrec": MagrecModel, "meanpool": MeanPoolBaseline}


def build_model(config: MagrecConfig, seed: int = 0) -> _TowerModel:
    return ARCHITECTURES[config.architecture](config, seed)


def forward(batch: GraphBatch, model: MagrecModel, training: bool) -> Tensor:
    return model.forward(batch, training)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"MAGRECKP"
VERSION = 1


def _state(model: MagrecModel) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters().items()}
    state.update(model.buffers())
    return state


def save_checkpoint(model: MagrecModel, path: str | Path) -> None:
    """Binary tensor dump plus a ``key = value`` config snapshot at ``path + '.cfg'``.

    Layout (little-endian): magic, u32 version, u32 count, then per tensor
    u16 name length, utf-8 name, u8 ndim, u32 dims, float64 payload.
    """
    path = Path(path)
    state = _state(model)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    config_path(path).write_text(model.config.to_text(), encoding="utf-8")


def config_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a magrec checkpoint")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return out


def load_checkpoint(path: str | Path) -> MagrecModel:
    from magrec.harness.config import parse_kv_text

    config = MagrecConfig.from_mapping(parse_kv_text(config_path(path).read_text(encoding="utf-8")))
    model = build_model(config)
    load_state(model, read_tensors(path))
    return model


def load_state(model: MagrecModel, state: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    for name, p in params.items():
        if name not in state:
            raise FormatError(f"checkpoint lacks tensor {name}")
        if state[name].shape != p.data.shape:
            raise FormatError(f"tensor {name}: shape {state[name].shape} != {p.data.shape}")
        p.data[...] = state[name]
    model.bn.running_mean = state["bn.running_mean"].copy()
    model.bn.running_var = state["bn.running_var"].copy()


def snapshot(model: MagrecModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in _state(model).items()}
