"""A small pre-LayerNorm causal transformer with entity and vocabulary heads.

The stack is split in two: ``blocks`` produce the contextual representation
that the fusion module gates against knowledge vectors, and ``readout_blocks``
run over the fused sequence so that knowledge attached to mention tokens can
reach later positions (the masked target sits at the end of the sentence).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx

PAD, MASK, UNK, BOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<mask>", "<unk>", "<bos>")


class LengthError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = RESERVED):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate vocabulary token")

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocabulary":
        tokens = list(RESERVED)
        seen = set(tokens)
        for sent in sentences:
            for tok in sent:
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class Block:
    ln1_g: nx.Parameter
    ln1_b: nx.Parameter
    w_qkv: nx.Parameter
    w_o: nx.Parameter
    ln2_g: nx.Parameter
    ln2_b: nx.Parameter
    w_1: nx.Parameter
    b_1: nx.Parameter
    w_2: nx.Parameter
    b_2: nx.Parameter

    def parameters(self) -> list[nx.Parameter]:
        return [self.ln1_g, self.ln1_b, self.w_qkv, self.w_o, self.ln2_g, self.ln2_b,
                self.w_1, self.b_1, self.w_2, self.b_2]


def _init_block(name: str, d: int, d_ff: int, depth: int, rng: np.random.Generator) -> Block:
    s_in = 1.0 / np.sqrt(d)
    s_out = 1.0 / np.sqrt(d_ff) / np.sqrt(2.0 * depth)
    return Block(
        ln1_g=nx.Parameter(f"{name}.ln1_g", np.ones(d)),
        ln1_b=nx.Parameter(f"{name}.ln1_b", np.zeros(d)),
        w_qkv=nx.Parameter(f"{name}.w_qkv", rng.normal(0.0, s_in, (d, 3 * d))),
        w_o=nx.Parameter(f"{name}.w_o", rng.normal(0.0, s_in / np.sqrt(2.0 * depth), (d, d))),
        ln2_g=nx.Parameter(f"{name}.ln2_g", np.ones(d)),
        ln2_b=nx.Parameter(f"{name}.ln2_b", np.zeros(d)),
        w_1=nx.Parameter(f"{name}.w_1", rng.normal(0.0, s_in, (d, d_ff))),
        b_1=nx.Parameter(f"{name}.b_1", np.zeros(d_ff)),
        w_2=nx.Parameter(f"{name}.w_2", rng.normal(0.0, s_out, (d_ff, d))),
        b_2=nx.Parameter(f"{name}.b_2", np.zeros(d)),
    )


@dataclass
class TransformerParams:
    tok_emb: nx.Parameter
    pos_emb: nx.Parameter
    blocks: list[Block]
    readout_blocks: list[Block]
    lnf_g: nx.Parameter
    lnf_b: nx.Parameter
    entity_head: nx.Parameter
    vocab_head: nx.Parameter
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.tok_emb.shape[1]

    @property
    def max_len(self) -> int:
        return self.pos_emb.shape[0]

    def encoder_parameters(self) -> list[nx.Parameter]:
        out = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def parameters(self) -> list[nx.Parameter]:
        out = self.encoder_parameters()
        for b in self.readout_blocks:
            out.extend(b.parameters())
        out.extend([self.lnf_g, self.lnf_b, self.entity_head, self.vocab_head])
        return out


def init_transformer(vocab_size: int, n_entities: int, d_model: int = 32, n_heads: int = 2,
                     n_blocks: int = 1, n_readout_blocks: int = 1, max_len: int = 64,
                     d_ff: int | None = None, rng: np.random.Generator | None = None,
                     prefix: str = "lm") -> TransformerParams:
    if d_model % n_heads:
        raise ValueError("d_model must be divisible by n_heads")
    rng = rng or np.random.default_rng(0)
    d_ff = d_ff or 4 * d_model
    depth = n_blocks + n_readout_blocks
    emb_scale = 1.0 / np.sqrt(d_model)
    return TransformerParams(
        tok_emb=nx.Parameter(f"{prefix}.tok_emb", rng.normal(0.0, 1.0, (vocab_size, d_model))),
        pos_emb=nx.Parameter(f"{prefix}.pos_emb", rng.normal(0.0, 0.1, (max_len, d_model))),
        blocks=[_init_block(f"{prefix}.block{i}", d_model, d_ff, depth, rng) for i in range(n_blocks)],
        readout_blocks=[_init_block(f"{prefix}.readout{i}", d_model, d_ff, depth, rng) for i in range(n_readout_blocks)],
        lnf_g=nx.Parameter(f"{prefix}.lnf_g", np.ones(d_model)),
        lnf_b=nx.Parameter(f"{prefix}.lnf_b", np.zeros(d_model)),
        entity_head=nx.Parameter(f"{prefix}.entity_head", rng.normal(0.0, emb_scale, (d_model, n_entities))),
        vocab_head=nx.Parameter(f"{prefix}.vocab_head", rng.normal(0.0, emb_scale, (d_model, vocab_size))),
        n_heads=n_heads,
    )


def attention_mask(ids: np.ndarray) -> np.ndarray:
    """(B, 1, T, T) boolean: causal and non-PAD keys."""
    t = ids.shape[1]
    causal = np.tril(np.ones((t, t), dtype=bool))
    keys = (ids != PAD)[:, None, None, :]
    return causal[None, None] & keys


def block_forward(block: Block, x: nx.Tensor, mask: np.ndarray, n_heads: int,
                  attn_out: list | None = None) -> nx.Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    h = nx.layer_norm(x, block.ln1_g, block.ln1_b)
    qkv = nx.matmul(h, block.w_qkv)
    qkv = nx.transpose(nx.reshape(qkv, (b, t, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / np.sqrt(dh))
    weights = nx.softmax(scores, axis=-1, mask=mask)
    if attn_out is not None:
        attn_out.append(weights.data)
    ctx = nx.matmul(weights, v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    x = nx.add(x, nx.matmul(ctx, block.w_o))
    h = nx.layer_norm(x, block.ln2_g, block.ln2_b)
    h = nx.relu(nx.add(nx.matmul(h, block.w_1), block.b_1))
    return nx.add(x, nx.add(nx.matmul(h, block.w_2), block.b_2))


def _as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def encode_context(params: TransformerParams, ids, mask: np.ndarray | None = None,
                   attn_out: list | None = None) -> nx.Tensor:
    """Contextual representations (B, T, d) for token ids (B, T); PAD keys are masked."""
    ids = _as_batch(ids)
    if ids.shape[1] > params.max_len:
        raise LengthError(f"sequence length {ids.shape[1]} exceeds max_len {params.max_len}")
    if mask is None:
        mask = attention_mask(ids)
    x = nx.add(nx.gather_rows(params.tok_emb, ids), params.pos_emb[: ids.shape[1]])
    for block in params.blocks:
        x = block_forward(block, x, mask, params.n_heads, attn_out)
    return x


def readout(params: TransformerParams, fused: nx.Tensor, mask: np.ndarray,
            attn_out: list | None = None) -> nx.Tensor:
    x = fused
    for block in params.readout_blocks:
        x = block_forward(block, x, mask, params.n_heads, attn_out)
    return nx.layer_norm(x, params.lnf_g, params.lnf_b)


def entity_logits(head: nx.Tensor, x: nx.Tensor) -> nx.Tensor:
    if x.shape[-1] != head.shape[0]:
        raise nx.DimensionError(f"entity head expects width {head.shape[0]}, got {x.shape[-1]}")
    return nx.matmul(x if x.ndim >= 2 else nx.reshape(x, (1, -1)), head)


def vocab_logits(head: nx.Tensor, x: nx.Tensor) -> nx.Tensor:
    return entity_logits(head, x)


def argmax_first(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the smallest index."""
    return np.argmax(scores, axis=-1)


def forward_states(params: TransformerParams, ids, fuse: Callable | None = None) -> nx.Tensor:
    """Encoder, optional fusion callback on the contextual states, then readout."""
    ids = _as_batch(ids)
    mask = attention_mask(ids)
    h = encode_context(params, ids, mask)
    fused = fuse(h) if fuse is not None else h
    return readout(params, fused, mask)


def generate(params: TransformerParams, prompt: Sequence[int], max_new: int,
             fuse: Callable | None = None, end_id: int = PAD) -> list[int]:
    """Greedy continuation of one prompt; see ``generate_batch``."""
    return generate_batch(params, [list(prompt)], max_new, fuse, end_id)[0]


def generate_batch(params: TransformerParams, prompts: Sequence[Sequence[int]], max_new,
                   fuse: Callable | None = None, end_id: int = PAD) -> list[list[int]]:
    """Greedy decoding, smallest id on ties.  ``max_new`` is an int or one per prompt.

    ``fuse(h, lengths)`` may inject knowledge into the contextual states of the
    current (right-padded) batch; generated tokens carry no entity links.
    """
    seqs = [list(p) for p in prompts]
    budgets = [max_new] * len(seqs) if np.isscalar(max_new) else list(max_new)
    done = [b <= 0 for b in budgets]
    produced = [0] * len(seqs)
    while not all(done):
        active = [i for i, d in enumerate(done) if not d]
        width = max(len(seqs[i]) for i in active)
        if width > params.max_len:
            raise LengthError(f"sequence length {width} exceeds max_len {params.max_len}")
        ids = np.full((len(active), width), PAD, dtype=np.int64)
        for row, i in enumerate(active):
            ids[row, : len(seqs[i])] = seqs[i]
        cb = None if fuse is None else (lambda h, _a=active: fuse(h, _a))
        states = forward_states(params, ids, cb)
        last = np.array([len(seqs[i]) - 1 for i in active])
        logits = vocab_logits(params.vocab_head, states[(np.arange(len(active)), last)]).data
        nxt = argmax_first(logits)
        for row, i in enumerate(active):
            tok = int(nxt[row])
            produced[i] += 1
            if tok == end_id:
                done[i] = True
                continue
            seqs[i].append(tok)
            if produced[i] >= budgets[i]:
                done[i] = True
    return seqs
