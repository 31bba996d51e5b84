"""Relational graph convolution over entity subgraphs.

Layer update for node v (messages flow head -> tail)::

    h_v' = relu(W_self h_v + sum_r sum_{(u, r, v)} W_r h_u / c_{v,r})

with c_{v,r} the number of incoming r-edges at v.  Weights for all relations
of one layer live in a single ``(R, d, d)`` parameter; slice ``r`` is ``W_r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .kgdata import EntitySubgraph


class GraphConfigError(ValueError):
    pass


@dataclass
class RGCNParams:
    table: nx.Parameter
    rel_weights: list[nx.Parameter]
    self_weights: list[nx.Parameter]
    n_relations: int
    add_inverse_edges: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.rel_weights)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def parameters(self) -> list[nx.Parameter]:
        out = [self.table]
        for w, s in zip(self.rel_weights, self.self_weights):
            out.extend([w, s])
        return out


def init_rgcn(n_entities: int, n_relations: int, dim: int = 32, n_layers: int = 2,
              add_inverse_edges: bool = False, rng: np.random.Generator | None = None,
              prefix: str = "rgcn") -> RGCNParams:
    rng = rng or np.random.default_rng(0)
    n_types = 2 * n_relations if add_inverse_edges else n_relations
    scale = 1.0 / np.sqrt(dim)
    table = nx.Parameter(f"{prefix}.table", rng.normal(0.0, 1.0, (n_entities, dim)))
    rel, slf = [], []
    for layer in range(n_layers):
        rel.append(nx.Parameter(f"{prefix}.{layer}.w_rel", rng.normal(0.0, scale, (n_types, dim, dim))))
        slf.append(nx.Parameter(f"{prefix}.{layer}.w_self", rng.normal(0.0, scale, (dim, dim))))
    return RGCNParams(table, rel, slf, n_relations, add_inverse_edges)


@dataclass
class NodeEmbeddings:
    """Final-layer embedding per encoded node; ``row[entity_id]`` indexes ``values``."""

    nodes: list[int]
    values: nx.Tensor

    def __post_init__(self):
        self.row = {n: i for i, n in enumerate(self.nodes)}

    def __contains__(self, entity: int) -> bool:
        return entity in self.row

    def get(self, entity: int) -> np.ndarray:
        return self.values.data[self.row[entity]]


@dataclass
class LocalGraph:
    """Subgraph edges renumbered onto local node rows, with per-edge normalizers."""

    nodes: list[int]
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    inv_count: np.ndarray

    @classmethod
    def build(cls, subgraph: EntitySubgraph, n_relations: int, add_inverse_edges: bool,
              nodes: list[int] | None = None) -> "LocalGraph":
        nodes = subgraph.nodes() if nodes is None else nodes
        row = {n: i for i, n in enumerate(nodes)}
        src, dst, rel = [], [], []
        for h, r, t in subgraph.edges:
            if r >= n_relations:
                raise GraphConfigError(f"relation id {r} has no weight matrix")
            src.append(row[h]); dst.append(row[t]); rel.append(r)
            if add_inverse_edges:
                src.append(row[t]); dst.append(row[h]); rel.append(r + n_relations)
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        rel = np.asarray(rel, dtype=np.int64)
        n_types = 2 * n_relations if add_inverse_edges else n_relations
        counts = np.zeros((len(nodes), n_types))
        np.add.at(counts, (dst, rel), 1.0)
        inv = 1.0 / counts[dst, rel] if len(dst) else np.zeros(0)
        return cls(nodes, src, dst, rel, inv)


def init_node_features(params: RGCNParams, nodes: list[int]) -> nx.Tensor:
    n = params.table.shape[0]
    for v in nodes:
        if not 0 <= v < n:
            raise KeyError(f"node {v} has no row in the entity embedding table")
    return nx.gather_rows(params.table, nodes)


def rgcn_layer_forward(w_rel: nx.Tensor, w_self: nx.Tensor, local: LocalGraph, h: nx.Tensor) -> nx.Tensor:
    if len(local.rel) and local.rel.max() >= w_rel.shape[0]:
        raise GraphConfigError(f"relation id {int(local.rel.max())} has no weight matrix")
    pre = nx.matmul(h, nx.swap_last(w_self))
    if len(local.src):
        # (R, n, d): every node transformed by every relation; edges pick their slice
        per_rel = nx.matmul(h, nx.swap_last(w_rel))
        msgs = per_rel[(local.rel, local.src)]
        msgs = nx.mul(msgs, local.inv_count[:, None])
        pre = nx.add(pre, nx.scatter_add_rows(msgs, local.dst, len(local.nodes)))
    return nx.relu(pre)


def encode_graph(params: RGCNParams, subgraph: EntitySubgraph, nodes: list[int] | None = None) -> NodeEmbeddings:
    """Run all layers over ``subgraph``; ``nodes`` defaults to the edge-carried nodes."""
    if params.n_layers < 1:
        raise GraphConfigError("need at least one layer")
    local = LocalGraph.build(subgraph, params.n_relations, params.add_inverse_edges, nodes)
    h = init_node_features(params, local.nodes)
    for w_rel, w_self in zip(params.rel_weights, params.self_weights):
        h = rgcn_layer_forward(w_rel, w_self, local, h)
    return NodeEmbeddings(local.nodes, h)
