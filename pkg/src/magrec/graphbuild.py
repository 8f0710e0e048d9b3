"""Graph encodings of a multi-domain history: Disjoint, Flattened, Interacting."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from magrec.dataset import WindowedSample
from magrec.errors import ContractError, EmptyGraphError

REPRESENTATIONS = ("disjoint", "flattened", "interacting")


@dataclass(frozen=True)
class UserHistoryGraph:
    """Directed DAG over history positions.

    ``nodes[k]`` is the (item, domain) pair at history position
    ``positions[k]``; edges index into ``nodes`` and always point forward in
    time. ``last_node`` is the node holding the latest retained interaction.
    """

    nodes: tuple[tuple[int, int], ...]
    positions: tuple[int, ...]
    src: tuple[int, ...]
    trg: tuple[int, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def last_node(self) -> int:
        return len(self.nodes) - 1

    @property
    def edge_domains(self) -> list[tuple[int, int]]:
        return [(self.nodes[s][1], self.nodes[t][1]) for s, t in zip(self.src, self.trg)]

    def edge_set(self) -> set[tuple[int, int]]:
        """Edges as (src_position, trg_position) pairs."""
        return {(self.positions[s], self.positions[t]) for s, t in zip(self.src, self.trg)}


def _path_graph(history: Sequence[tuple[int, int]], positions: Sequence[int], extra=()) -> UserHistoryGraph:
    n = len(positions)
    edges = {(k, k + 1) for k in range(n - 1)}
    edges.update(extra)
    ordered = sorted(edges)
    return UserHistoryGraph(
        nodes=tuple(history[p] for p in positions),
        positions=tuple(positions),
        src=tuple(e[0] for e in ordered),
        trg=tuple(e[1] for e in ordered),
    )


def build_flattened(sample: WindowedSample) -> UserHistoryGraph:
    """Path over the whole multi-domain timeline."""
    if not sample.history:
        raise EmptyGraphError("cannot build a graph from an empty history")
    return _path_graph(sample.history, range(len(sample.history)))


def build_interacting(sample: WindowedSample) -> UserHistoryGraph:
    """Flattened path plus skip edges joining consecutive same-domain positions."""
    history = sample.history
    if not history:
        raise EmptyGraphError("cannot build a graph from an empty history")
    last_at: dict[int, int] = {}
    skips = set()
    for pos, (_, dom) in enumerate(history):
        prev = last_at.get(dom)
        if prev is not None and pos - prev > 1:
            skips.add((prev, pos))
        last_at[dom] = pos
    return _path_graph(history, range(len(history)), skips)


def build_disjoint(sample: WindowedSample) -> UserHistoryGraph:
    """Path over only the history positions in the candidate's domain."""
    keep = [p for p, (_, dom) in enumerate(sample.history) if dom == sample.candidate_domain]
    if not keep:
        raise EmptyGraphError(f"no history in candidate domain {sample.candidate_domain}")
    return _path_graph(sample.history, keep)


BUILDERS: dict[str, Callable[[WindowedSample], UserHistoryGraph]] = {
    "disjoint": build_disjoint,
    "flattened": build_flattened,
    "interacting": build_interacting,
}


def get_builder(representation: str) -> Callable[[WindowedSample], UserHistoryGraph]:
    try:
        return BUILDERS[representation]
    except KeyError:
        raise ContractError(f"unknown representation {representation!r}; choose from {', '.join(REPRESENTATIONS)}") from None


def build_all(samples: Sequence[WindowedSample], representation: str) -> tuple[list[WindowedSample], list[UserHistoryGraph], int]:
    """Build graphs for every sample, dropping those with no buildable graph.

    Samples whose graphs would coincide (a positive and its negatives share a
    history) receive the same graph object. Returns the kept samples, their
    graphs and the number dropped.
    """
    builder = get_builder(representation)
    by_candidate_domain = representation == "disjoint"
    cache: dict[tuple, UserHistoryGraph | None] = {}
    kept, graphs, dropped = [], [], 0
    for s in samples:
        key = (s.history, s.candidate_domain if by_candidate_domain else None)
        if key not in cache:
            try:
                cache[key] = builder(s)
            except EmptyGraphError:
                cache[key] = None
        g = cache[key]
        if g is None:
            dropped += 1
            continue
        kept.append(s)
        graphs.append(g)
    return kept, graphs, dropped


def dump_graph(graph: UserHistoryGraph, edge_path: str | Path, node_path: str | Path) -> None:
    """Write ``src_pos,trg_pos,src_dom,trg_dom`` edges and a ``pos,item,domain`` node table."""
    with open(edge_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("src_pos,trg_pos,src_dom,trg_dom\n")
        for s, t in zip(graph.src, graph.trg):
            fh.write(f"{graph.positions[s]},{graph.positions[t]},{graph.nodes[s][1]},{graph.nodes[t][1]}\n")
    with open(node_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("pos,item,domain\n")
        for pos, (item, dom) in zip(graph.positions, graph.nodes):
            fh.write(f"{pos},{item},{dom}\n")


def adjacency(graph: UserHistoryGraph) -> np.ndarray:
    a = np.zeros((graph.n_nodes, graph.n_nodes), dtype=np.int8)
    a[list(graph.src), list(graph.trg)] = 1
    return a
