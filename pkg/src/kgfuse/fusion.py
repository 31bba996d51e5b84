"""Knowledge-aware attention over a token's linked entities, and the gate that
mixes the resulting knowledge vector into the token's contextual state.

For token i with linked entity set E_i::

    z_i   = sum_j softmax_j((h_i Q) . (e_j K) / sqrt(d_a)) (e_j V)
    lam_i = sigmoid([h_i ; z_i] W_g + b_g)
    out_i = lam_i * h_i + (1 - lam_i) * z_i

Tokens whose entity set is empty (or unresolved) pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graph_encoder import NodeEmbeddings


@dataclass
class AttentionParams:
    q: nx.Parameter
    k: nx.Parameter
    v: nx.Parameter

    @property
    def d_attn(self) -> int:
        return self.q.shape[1]

    def parameters(self) -> list[nx.Parameter]:
        return [self.q, self.k, self.v]


@dataclass
class GateParams:
    w: nx.Parameter
    b: nx.Parameter

    @property
    def scalar(self) -> bool:
        return self.w.shape[1] == 1

    def parameters(self) -> list[nx.Parameter]:
        return [self.w, self.b]


def init_fusion(d_lm: int, d_kg: int, d_attn: int | None = None, scalar_gate: bool = False,
                rng: np.random.Generator | None = None, prefix: str = "fusion") -> tuple[GateParams, AttentionParams]:
    rng = rng or np.random.default_rng(0)
    d_attn = d_attn or d_lm
    attn = AttentionParams(
        q=nx.Parameter(f"{prefix}.q", rng.normal(0.0, 1.0 / np.sqrt(d_lm), (d_lm, d_attn))),
        k=nx.Parameter(f"{prefix}.k", rng.normal(0.0, 1.0 / np.sqrt(d_kg), (d_kg, d_attn))),
        v=nx.Parameter(f"{prefix}.v", rng.normal(0.0, 1.0 / np.sqrt(d_kg), (d_kg, d_lm))),
    )
    width = 1 if scalar_gate else d_lm
    gate = GateParams(
        w=nx.Parameter(f"{prefix}.w_gate", rng.normal(0.0, 1.0 / np.sqrt(2 * d_lm), (2 * d_lm, width))),
        b=nx.Parameter(f"{prefix}.b_gate", np.zeros(width)),
    )
    return gate, attn


def _attend(attn: AttentionParams, h_rows: nx.Tensor, ents: nx.Tensor, ent_mask: np.ndarray):
    """h_rows (N, d_lm), ents (N, M, d_kg), ent_mask (N, M) -> z (N, d_lm), weights (N, M)."""
    n, m, _ = ents.shape
    if h_rows.shape[-1] != attn.q.shape[0] or ents.shape[-1] != attn.k.shape[0]:
        raise nx.DimensionError(
            f"knowledge attention expects token width {attn.q.shape[0]} and entity width "
            f"{attn.k.shape[0]}, got {h_rows.shape[-1]} and {ents.shape[-1]}")
    q = nx.reshape(nx.matmul(h_rows, attn.q), (n, 1, attn.d_attn))
    k = nx.matmul(ents, attn.k)
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / np.sqrt(attn.d_attn))
    weights = nx.softmax(scores, axis=-1, mask=ent_mask[:, None, :])
    z = nx.matmul(weights, nx.matmul(ents, attn.v))
    return nx.reshape(z, (n, attn.v.shape[1])), weights.data.reshape(n, m)


def knowledge_attention(attn: AttentionParams, h_i, entity_embeddings) -> nx.Tensor:
    """Knowledge vector for one token over its (nonempty) entity set."""
    h_i = nx.as_tensor(h_i)
    ents = nx.as_tensor(entity_embeddings)
    if ents.ndim != 2 or ents.shape[0] == 0:
        raise nx.ContractError("entity set must be a nonempty (M, d_kg) matrix")
    z, _ = _attend(attn, nx.reshape(h_i, (1, -1)), nx.reshape(ents, (1,) + ents.shape), np.ones((1, ents.shape[0]), bool))
    return nx.reshape(z, (-1,))


def gate_values(gate: GateParams, h_rows: nx.Tensor, z: nx.Tensor) -> nx.Tensor:
    return nx.sigmoid(nx.add(nx.matmul(nx.concat([h_rows, z], axis=-1), gate.w), gate.b))


@dataclass
class FusedRepresentation:
    fused: nx.Tensor                 # same shape as the input states
    lam: np.ndarray                  # (n_tokens, d) gate values; 1.0 sentinel where mask is False
    knowledge_mask: np.ndarray       # (n_tokens,) flattened over batch and time
    token_index: np.ndarray          # flat indices of knowledge-bearing tokens
    h_rows: nx.Tensor | None         # contextual rows at token_index
    knowledge_rows: nx.Tensor | None # z rows at token_index
    attention_weights: np.ndarray | None
    unresolved_mentions: int

    @property
    def knowledge_vectors(self) -> np.ndarray:
        n, d = self.lam.shape
        out = np.zeros((n, self.fused.shape[-1]))
        if self.knowledge_rows is not None:
            out[self.token_index] = self.knowledge_rows.data
        return out

    @property
    def mean_lambda(self) -> float:
        return float(self.lam[self.knowledge_mask].mean()) if self.knowledge_mask.any() else 1.0

    @property
    def knowledge_fraction(self) -> float:
        return float(self.knowledge_mask.mean()) if self.knowledge_mask.size else 0.0


MentionSpans = Sequence[Sequence[tuple[int, int, int]]]


def fuse_tokens(gate: GateParams, attn: AttentionParams, h_lm: nx.Tensor, mentions: MentionSpans,
                node_embeddings: NodeEmbeddings, n_valid: Sequence[int] | None = None) -> FusedRepresentation:
    """Fuse knowledge into ``h_lm`` (T, d) or (B, T, d).

    ``mentions[b]`` lists (start, end, entity id) spans of sentence ``b`` in
    input-token coordinates.  Spans whose entity was not encoded are counted in
    ``unresolved_mentions`` and contribute nothing.  ``n_valid[b]`` optionally
    clips spans to the first ``n_valid[b]`` positions.
    """
    single = h_lm.ndim == 2
    states = nx.reshape(h_lm, (1,) + h_lm.shape) if single else h_lm
    if single and (len(mentions) == 0 or isinstance(mentions[0][0], (int, np.integer))):
        mentions = [mentions]
    b, t, d = states.shape
    sets: dict[int, list[int]] = {}
    unresolved = 0
    for row, spans in enumerate(mentions):
        limit = t if n_valid is None else n_valid[row]
        for start, end, ent in spans:
            if start >= limit:
                continue
            if ent not in node_embeddings:
                unresolved += 1
                continue
            r = node_embeddings.row[ent]
            for pos in range(start, min(end, limit)):
                sets.setdefault(row * t + pos, []).append(r)
    mask = np.zeros(b * t, dtype=bool)
    lam = np.ones((b * t, d))
    if not sets:
        return FusedRepresentation(h_lm, lam, mask, np.zeros(0, np.int64), None, None, None, unresolved)

    index = np.array(sorted(sets), dtype=np.int64)
    width = max(len(sets[i]) for i in index)
    ent_rows = np.zeros((len(index), width), dtype=np.int64)
    ent_mask = np.zeros((len(index), width), dtype=bool)
    for n, i in enumerate(index):
        ent_rows[n, : len(sets[i])] = sets[i]
        ent_mask[n, : len(sets[i])] = True

    flat = nx.reshape(states, (b * t, d))
    h_rows = nx.gather_rows(flat, index)
    ents = nx.gather_rows(node_embeddings.values, ent_rows)
    z, weights = _attend(attn, h_rows, ents, ent_mask)
    lam_t = gate_values(gate, h_rows, z)
    rows = nx.add(nx.mul(lam_t, h_rows), nx.mul(nx.sub(1.0, lam_t), z))
    fused = nx.reshape(nx.replace_rows(flat, index, rows), h_lm.shape)
    mask[index] = True
    lam[index] = np.broadcast_to(lam_t.data, (len(index), d))
    return FusedRepresentation(fused, lam, mask, index, h_rows, z, weights, unresolved)

