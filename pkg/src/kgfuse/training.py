"""Joint task + alignment training, evaluation passes and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .context_encoder import (BOS, MASK, PAD, TransformerParams, Vocabulary, argmax_first, attention_mask,
                              encode_context, entity_logits, generate_batch, init_transformer, readout,
                              vocab_logits)
from .fusion import AttentionParams, GateParams, fuse_tokens, init_fusion
from .graph_encoder import NodeEmbeddings, RGCNParams, encode_graph, init_rgcn
from .kgdata import (PERTURBATION_MODES, ConfigError, KnowledgeGraph, LinkedSentence, extract_subgraph,
                     full_subgraph, perturb_structure, sample_coverage)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
HISTORY_COLUMNS = ("step", "l_task", "l_align", "l_total", "mean_lambda")


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    alpha: float = 0.1
    optimizer: str = "ADAM"
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    coverage: float = 1.0
    perturb_mode: str | None = None
    perturb_rate: float = 0.0
    perturb_train: bool = False
    hop_bound: int = 2
    d_kg: int = 32
    n_rgcn_layers: int = 1
    add_inverse_edges: bool = True
    d_lm: int = 32
    n_heads: int = 2
    n_blocks: int = 1
    n_readout_blocks: int = 1
    max_len: int = 64
    d_attn: int = 32
    scalar_gate: bool = False
    lm_weight: float = 0.5
    freeze_context_encoder: bool = False
    align_stop_grad_kg: bool = False
    use_knowledge: bool = True
    compute_align: bool = True
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def validate(self) -> None:
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 <= self.coverage <= 1.0:
            raise ConfigError("coverage must lie in [0, 1]")
        if not 0.0 <= self.perturb_rate <= 1.0:
            raise ConfigError("perturb_rate must lie in [0, 1]")
        if self.perturb_mode is not None and self.perturb_mode.upper() not in PERTURBATION_MODES:
            raise ConfigError(f"perturb_mode must be one of {PERTURBATION_MODES}")
        if self.optimizer.upper() not in ("SGD", "ADAM"):
            raise ConfigError("optimizer must be SGD or ADAM")
        for name in ("epochs", "hop_bound", "lm_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "d_kg", "n_rgcn_layers", "d_lm", "n_heads", "max_len", "d_attn", "divergence_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_lm % self.n_heads:
            raise ConfigError("d_lm must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            default = known[key].default
            if value is None or default is None:
                kwargs[key] = value
            elif isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} must be a boolean")
                kwargs[key] = value
            else:
                try:
                    kwargs[key] = type(default)(value)
                except (TypeError, ValueError):
                    raise ConfigError(f"{key}: cannot interpret {value!r}") from None
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------- model

class KGModel:
    """All trainable state: graph encoder, fusion, and the transformer."""

    def __init__(self, config: TrainConfig, vocab: Vocabulary, entities: Sequence[str], relations: Sequence[str]):
        self.config = config
        self.vocab = vocab
        self.entities = list(entities)
        self.relations = list(relations)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        seed = config.seed
        self.rgcn: RGCNParams = init_rgcn(len(self.entities), len(self.relations), config.d_kg, config.n_rgcn_layers,
                                          config.add_inverse_edges, np.random.default_rng([seed, 11]))
        self.gate, self.attn = init_fusion(config.d_lm, config.d_kg, config.d_attn, config.scalar_gate,
                                           np.random.default_rng([seed, 12]))
        self.lm: TransformerParams = init_transformer(len(vocab), len(self.entities), config.d_lm, config.n_heads,
                                                      config.n_blocks, config.n_readout_blocks, config.max_len,
                                                      rng=np.random.default_rng([seed, 13]))
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    def parameters(self) -> list[nx.Parameter]:
        return self.rgcn.parameters() + self.gate.parameters() + self.attn.parameters() + self.lm.parameters()

    def trainable(self) -> list[nx.Parameter]:
        if not self.config.freeze_context_encoder:
            return self.parameters()
        frozen = {id(p) for p in self.lm.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    ids: np.ndarray              # (B, T) model input, target mention collapsed to MASK
    lengths: np.ndarray          # (B,) non-PAD lengths
    target_pos: np.ndarray       # (B,)
    target_entity: np.ndarray    # (B,)
    mentions: list[list[tuple[int, int, int]]]
    lm_rows: np.ndarray          # flat (b * T + t) positions with a next-token label
    lm_labels: np.ndarray
    seeds: set[int]


def make_batch(sentences: Sequence[LinkedSentence], vocab: Vocabulary, entity_index: dict[str, int]) -> Batch:
    rows = []
    for s in sentences:
        tm = s.target_mention
        prefix = vocab.encode(s.tokens[: tm.start])
        ids = [BOS] + prefix + [MASK]
        full = [BOS] + vocab.encode(s.tokens)
        spans = [(m.start + 1, m.end + 1, entity_index[m.entity]) for m in s.context_mentions()
                 if m.end <= tm.start and m.entity in entity_index]
        rows.append((ids, full, len(ids) - 1, entity_index[s.target_entity], spans))
    width = max(len(r[0]) for r in rows)
    b = len(rows)
    ids = np.full((b, width), PAD, dtype=np.int64)
    lm_rows, lm_labels = [], []
    seeds: set[int] = set()
    for i, (seq, full, tpos, _, spans) in enumerate(rows):
        ids[i, : len(seq)] = seq
        for p in range(tpos):
            lm_rows.append(i * width + p)
            lm_labels.append(full[p + 1])
        seeds.update(e for _, _, e in spans)
    return Batch(
        ids=ids,
        lengths=np.array([len(r[0]) for r in rows]),
        target_pos=np.array([r[2] for r in rows]),
        target_entity=np.array([r[3] for r in rows]),
        mentions=[r[4] for r in rows],
        lm_rows=np.array(lm_rows, dtype=np.int64),
        lm_labels=np.array(lm_labels, dtype=np.int64),
        seeds=seeds,
    )


def effective_graph(graph: KnowledgeGraph, config: TrainConfig, perturb: bool) -> KnowledgeGraph:
    """Whole-graph coverage sampling (and optional perturbation) for one run."""
    sub = sample_coverage(full_subgraph(graph), config.coverage, config.seed)
    if perturb and config.perturb_mode and config.perturb_rate > 0:
        sub = perturb_structure(sub, config.perturb_mode, config.perturb_rate, config.seed)
    return sub.as_graph()


def batch_knowledge(model: KGModel, graph: KnowledgeGraph | None, seeds: set[int]) -> NodeEmbeddings | None:
    if graph is None or not seeds or model.config.hop_bound == 0:
        return None
    sub = extract_subgraph(graph, seeds, model.config.hop_bound)
    if not sub.edges:
        return None
    return encode_graph(model.rgcn, sub)


@dataclass
class StepOutput:
    l_task: nx.Tensor
    l_align: nx.Tensor | None
    entity_scores: nx.Tensor
    mean_lambda: float
    unresolved: int
    knowledge_tokens: int


def forward_batch(model: KGModel, batch: Batch, graph: KnowledgeGraph | None) -> StepOutput:
    cfg = model.config
    mask = attention_mask(batch.ids)
    h = encode_context(model.lm, batch.ids, mask)
    fused = h
    l_align = None
    mean_lambda, unresolved, n_know = 1.0, 0, 0
    if cfg.use_knowledge:
        nodes = batch_knowledge(model, graph, batch.seeds)
        if nodes is None:
            unresolved = sum(len(m) for m in batch.mentions)
        else:
            rep = fuse_tokens(model.gate, model.attn, h, batch.mentions, nodes)
            fused = rep.fused
            mean_lambda, unresolved = rep.mean_lambda, rep.unresolved_mentions
            n_know = len(rep.token_index)
            if cfg.compute_align and rep.h_rows is not None:
                kv = rep.knowledge_rows.detach() if cfg.align_stop_grad_kg else rep.knowledge_rows
                l_align = nx.mul(alignment_loss(rep.h_rows, kv, np.ones(n_know, bool)), 1.0 / len(batch.ids))
    states = readout(model.lm, fused, mask)
    b, t, d = states.shape
    flat = nx.reshape(states, (b * t, d))
    target_rows = np.arange(b) * t + batch.target_pos
    scores = entity_logits(model.lm.entity_head, nx.gather_rows(flat, target_rows))
    l_task = nx.cross_entropy(scores, batch.target_entity)
    if cfg.lm_weight > 0 and len(batch.lm_rows):
        lm_scores = vocab_logits(model.lm.vocab_head, nx.gather_rows(flat, batch.lm_rows))
        l_task = nx.add(l_task, nx.mul(nx.cross_entropy(lm_scores, batch.lm_labels), cfg.lm_weight))
    return StepOutput(l_task, l_align, scores, mean_lambda, unresolved, n_know)


def alignment_loss(h_lm, knowledge_vectors, knowledge_mask) -> nx.Tensor:
    """Sum over knowledge-bearing rows of ||h_lm_i - k_i||^2."""
    h_lm, kv = nx.as_tensor(h_lm), nx.as_tensor(knowledge_vectors)
    knowledge_mask = np.asarray(knowledge_mask, dtype=bool)
    if h_lm.shape != kv.shape or h_lm.shape[0] != knowledge_mask.shape[0]:
        raise nx.DimensionError(f"alignment shapes disagree: {h_lm.shape}, {kv.shape}, mask {knowledge_mask.shape}")
    rows = np.flatnonzero(knowledge_mask)
    if len(rows) == 0:
        return nx.Tensor(0.0)
    if len(rows) == h_lm.shape[0]:
        diff = nx.sub(h_lm, kv)
    else:
        diff = nx.sub(nx.gather_rows(h_lm, rows), nx.gather_rows(kv, rows))
    return nx.tsum(nx.square(diff))


def total_loss(l_task, l_align, alpha: float) -> nx.Tensor:
    l_task, l_align = nx.as_tensor(l_task), nx.as_tensor(l_align)
    if not (np.isfinite(l_task.data).all() and np.isfinite(l_align.data).all()):
        raise nx.NumericalError("non-finite loss term")
    return nx.add(l_task, nx.mul(l_align, alpha))


# ---------------------------------------------------------------- history

@dataclass
class TrainHistory:
    steps: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    diverged: bool = False
    diverged_reason: str = ""

    def record(self, step, l_task, l_align, l_total, mean_lambda) -> None:
        self.steps.append((step, l_task, l_align, l_total, mean_lambda))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in self.steps:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()

    def epoch_mean(self, epoch_steps: int, column: int = 3) -> list[float]:
        vals = [r[column] for r in self.steps]
        return [float(np.mean(vals[i:i + epoch_steps])) for i in range(0, len(vals), epoch_steps)] if epoch_steps else []

    @property
    def final(self) -> tuple[float, float]:
        if not self.steps:
            return (float("nan"), float("nan"))
        return self.steps[-1][1], self.steps[-1][2]


def build_vocab(corpus: Sequence[LinkedSentence]) -> Vocabulary:
    return Vocabulary.build(s.tokens for s in corpus)


def train(config: TrainConfig, graph: KnowledgeGraph, corpus: Sequence[LinkedSentence],
          vocab: Vocabulary | None = None) -> tuple[KGModel, TrainHistory]:
    """Train on ``corpus``.  Returns the final model and its full history.

    A run whose loss turns non-finite, or exceeds ``divergence_factor`` times its
    first value for ``divergence_patience`` consecutive steps, is halted and
    flagged as diverged.
    """
    config.validate()
    if not corpus and config.epochs > 0:
        raise ConfigError("training corpus is empty")
    vocab = vocab or build_vocab(corpus)
    model = KGModel(config, vocab, graph.entities, graph.relations)
    history = TrainHistory()
    if config.epochs == 0:
        return model, history
    kg = effective_graph(graph, config, perturb=config.perturb_train) if config.use_knowledge else None
    state = nx.OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate)
    params = model.trainable()
    all_params = model.parameters()
    order_rng = np.random.default_rng([config.seed, 7])
    n = len(corpus)
    initial = None
    over = 0
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = make_batch([corpus[i] for i in order[start:start + config.batch_size]], vocab, model.entity_index)
            nx.zero_grad(all_params)
            try:
                # overflow surfaces as NumericalError from the finiteness checks
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    out = forward_batch(model, batch, kg)
                    if config.compute_align:
                        l_align = out.l_align if out.l_align is not None else nx.Tensor(0.0)
                        loss = total_loss(out.l_task, l_align, config.alpha)
                    else:
                        l_align = nx.Tensor(0.0)
                        loss = out.l_task
                    nx.backward(loss)
                    nx.optimizer_step(state, params)
            except nx.NumericalError as exc:
                history.diverged = True
                history.diverged_reason = f"non-finite value at step {step}: {exc}"
                log.warning("run diverged: %s", history.diverged_reason)
                return model, history
            l_total = float(loss.data)
            history.record(step, float(out.l_task.data), float(l_align.data), l_total, out.mean_lambda)
            if initial is None:
                initial = l_total
            over = over + 1 if l_total > config.divergence_factor * initial else 0
            if over >= config.divergence_patience:
                history.diverged = True
                history.diverged_reason = f"loss above {config.divergence_factor}x initial for {over} steps"
                return model, history
            step += 1
    return model, history


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalOutput:
    predictions: list[int]
    golds: list[int]
    scores: np.ndarray
    unresolved_mentions: int
    knowledge_tokens: int
    generations: list[list[str]] = field(default_factory=list)
    references: list[list[str]] = field(default_factory=list)


def evaluate(model: KGModel, graph: KnowledgeGraph, sentences: Sequence[LinkedSentence],
             config: TrainConfig | None = None, generate: bool = True, chunk: int = 256) -> EvalOutput:
    """Entity predictions (and greedy completions) for ``sentences``.

    ``config`` supplies the evaluation-time coverage/perturbation settings and
    defaults to the model's own training config.
    """
    cfg = config or model.config
    run_cfg = replace(model.config, coverage=cfg.coverage, perturb_mode=cfg.perturb_mode,
                      perturb_rate=cfg.perturb_rate, hop_bound=cfg.hop_bound, seed=cfg.seed)
    kg = effective_graph(graph, run_cfg, perturb=True) if model.config.use_knowledge else None
    view = _EvalView(model, run_cfg)
    preds, golds, all_scores = [], [], []
    unresolved = n_know = 0
    gens, refs = [], []
    for start in range(0, len(sentences), chunk):
        part = list(sentences[start:start + chunk])
        batch = make_batch(part, model.vocab, model.entity_index)
        out = forward_batch(view, batch, kg)
        scores = out.entity_scores.data
        preds.extend(int(x) for x in argmax_first(scores))
        golds.extend(int(x) for x in batch.target_entity)
        all_scores.append(scores)
        unresolved += out.unresolved
        n_know += out.knowledge_tokens
        if generate:
            g, r = _complete(view, part, batch, kg)
            gens.extend(g)
            refs.extend(r)
    scores = np.concatenate(all_scores) if all_scores else np.zeros((0, len(model.entities)))
    return EvalOutput(preds, golds, scores, unresolved, n_know, gens, refs)


class _EvalView:
    """A model facade carrying evaluation-time graph settings."""

    def __init__(self, model: KGModel, config: TrainConfig):
        self.__dict__.update(model.__dict__)
        self.config = config


def _complete(model, sentences, batch: Batch, kg) -> tuple[list[list[str]], list[list[str]]]:
    prompts, budgets, spans, refs = [], [], [], []
    for i, s in enumerate(sentences):
        tm = s.target_mention
        prompts.append([BOS] + model.vocab.encode(s.tokens[: tm.start]))
        budgets.append(len(s.tokens) - tm.start)
        spans.append(batch.mentions[i])
        refs.append(list(s.tokens))
    nodes = batch_knowledge(model, kg, batch.seeds) if model.config.use_knowledge else None

    def fuse(h, active):
        if nodes is None:
            return h
        return fuse_tokens(model.gate, model.attn, h, [spans[i] for i in active], nodes).fused

    seqs = generate_batch(model.lm, prompts, budgets, fuse)
    return [model.vocab.decode(s[1:]) for s in seqs], refs


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: KGModel, path) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (float64 little-endian) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    specs, chunks, offset = [], [], 0
    for p in model.parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        specs.append({"name": p.name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocabulary": model.vocab.tokens,
        "entities": model.entities,
        "relations": model.relations,
        "parameters": specs,
        "n_values": offset,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    (path / "params.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> KGModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        payload = (path / "params.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint at {path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"checkpoint format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    if len(payload) != 8 * manifest["n_values"]:
        raise IntegrityError(f"payload holds {len(payload) // 8} values, manifest declares {manifest['n_values']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    config = TrainConfig.from_dict(manifest["config"])
    model = KGModel(config, Vocabulary(manifest["vocabulary"]), manifest["entities"], manifest["relations"])
    params = {p.name: p for p in model.parameters()}
    specs = manifest["parameters"]
    if sorted(s["name"] for s in specs) != sorted(params):
        raise IntegrityError("manifest parameter names differ from the model built from its config")
    for s in specs:
        p = params[s["name"]]
        size = int(np.prod(s["shape"])) if s["shape"] else 1
        if tuple(s["shape"]) != p.shape or s["offset"] + size > len(values):
            raise IntegrityError(f"parameter {s['name']} shape/offset disagrees with payload")
        p.data = values[s["offset"]: s["offset"] + size].reshape(s["shape"]).astype(np.float64)
    return model
