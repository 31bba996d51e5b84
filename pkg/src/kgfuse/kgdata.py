"""Knowledge-graph and corpus handling.

Triples files are UTF-8 TSV (``head<TAB>relation<TAB>tail``, ``#`` comments).
Sentence files are JSON lines with ``tokens``, ``mentions`` and ``target``.
"""

from __future__ import annotations

import io
import json
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

DELETE_EDGES = "DELETE_EDGES"
RELABEL_RELATIONS = "RELABEL_RELATIONS"
SWAP_ENDPOINTS = "SWAP_ENDPOINTS"
PERTURBATION_MODES = (DELETE_EDGES, RELABEL_RELATIONS, SWAP_ENDPOINTS)


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownEntityError(KeyError):
    def __str__(self):
        return f"unknown entity {self.args[0]!r}"


class UnsupportedPerturbationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            value = getattr(self, name)
            if not value or value != value.strip():
                raise ValueError(f"triple field {name} must be nonempty without surrounding whitespace: {value!r}")


class KnowledgeGraph:
    """Relation-indexed multigraph with deduplicated integer edges.

    Entity and relation ids are assigned in first-appearance order.
    """

    def __init__(self, entities: Sequence[str] = (), relations: Sequence[str] = (), edges: Iterable[tuple[int, int, int]] = ()):
        self.entities: list[str] = list(entities)
        self.relations: list[str] = list(relations)
        self.entity_index: dict[str, int] = {e: i for i, e in enumerate(self.entities)}
        self.relation_index: dict[str, int] = {r: i for i, r in enumerate(self.relations)}
        if len(self.entity_index) != len(self.entities) or len(self.relation_index) != len(self.relations):
            raise ValueError("duplicate entity or relation identifier")
        seen: set[tuple[int, int, int]] = set()
        unique = []
        for e in edges:
            e = (int(e[0]), int(e[1]), int(e[2]))
            if e in seen:
                continue
            if not (0 <= e[0] < len(self.entities) and 0 <= e[2] < len(self.entities) and 0 <= e[1] < len(self.relations)):
                raise ValueError(f"edge {e} references an unknown id")
            seen.add(e)
            unique.append(e)
        self.edges: list[tuple[int, int, int]] = unique
        self._edge_set = seen
        self.incoming: dict[tuple[int, int], list[int]] = {}
        self.outgoing: dict[tuple[int, int], list[int]] = {}
        for h, r, t in unique:
            self.outgoing.setdefault((h, r), []).append(t)
            self.incoming.setdefault((t, r), []).append(h)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def has_edge(self, edge: tuple[int, int, int]) -> bool:
        return tuple(edge) in self._edge_set

    def edge_array(self) -> np.ndarray:
        return np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)

    def with_edges(self, edges: Iterable[tuple[int, int, int]]) -> "KnowledgeGraph":
        """Same entity/relation indices, different edge list."""
        return KnowledgeGraph(self.entities, self.relations, edges)

    def triples(self) -> list[Triple]:
        return [Triple(self.entities[h], self.relations[r], self.entities[t]) for h, r, t in self.edges]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, KnowledgeGraph)
            and self.entities == other.entities
            and self.relations == other.relations
            and set(self.edges) == set(other.edges)
        )

    def __repr__(self) -> str:
        return f"KnowledgeGraph(entities={self.n_entities}, relations={self.n_relations}, edges={len(self.edges)})"


def parse_triples(stream) -> KnowledgeGraph:
    """Parse a TSV triples stream (bytes, str, or file object)."""
    if isinstance(stream, (bytes, bytearray)):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    edges = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, found {len(fields)}", lineno)
        if any(not f for f in fields):
            raise ParseError("empty field", lineno)
        h, r, t = fields
        for e in (h, t):
            if e not in entities:
                entities[e] = len(entities)
        if r not in relations:
            relations[r] = len(relations)
        edges.append((entities[h], relations[r], entities[t]))
    return KnowledgeGraph(list(entities), list(relations), edges)


def serialize_triples(graph: KnowledgeGraph) -> str:
    """Inverse of ``parse_triples`` for graphs whose every entity sits on an edge.

    Isolated entities and unused relations are recorded in ``#`` directives so the
    round trip preserves both indices exactly.
    """
    lines = []
    lines.append("#entities\t" + "\t".join(graph.entities))
    lines.append("#relations\t" + "\t".join(graph.relations))
    for h, r, t in graph.edges:
        lines.append(f"{graph.entities[h]}\t{graph.relations[r]}\t{graph.entities[t]}")
    return "\n".join(lines) + "\n"


def load_triples(text: str) -> KnowledgeGraph:
    """``parse_triples`` that honours the index directives written by ``serialize_triples``."""
    graph = parse_triples(text)
    ent_line = rel_line = None
    for line in text.splitlines():
        if line.startswith("#entities\t") or line == "#entities":
            ent_line = [x for x in line.split("\t")[1:] if x]
        elif line.startswith("#relations\t") or line == "#relations":
            rel_line = [x for x in line.split("\t")[1:] if x]
    if ent_line is None and rel_line is None:
        return graph
    entities = ent_line if ent_line is not None else graph.entities
    relations = rel_line if rel_line is not None else graph.relations
    e_idx = {e: i for i, e in enumerate(entities)}
    r_idx = {r: i for i, r in enumerate(relations)}
    try:
        edges = [(e_idx[graph.entities[h]], r_idx[graph.relations[r]], e_idx[graph.entities[t]]) for h, r, t in graph.edges]
    except KeyError as exc:
        raise ParseError(f"edge uses identifier {exc.args[0]!r} missing from index directive") from None
    return KnowledgeGraph(entities, relations, edges)


# ---------------------------------------------------------------- subgraphs

@dataclass(frozen=True)
class EntitySubgraph:
    parent: KnowledgeGraph
    seeds: frozenset[int]
    edges: tuple[tuple[int, int, int], ...]
    hop_bound: int

    def nodes(self) -> list[int]:
        """Nodes carried by at least one included edge, in ascending id order."""
        out = set()
        for h, _, t in self.edges:
            out.add(h)
            out.add(t)
        return sorted(out)

    def edge_set(self) -> set[tuple[int, int, int]]:
        return set(self.edges)

    def as_graph(self) -> KnowledgeGraph:
        return self.parent.with_edges(self.edges)


def _seed_ids(graph: KnowledgeGraph, seeds: Iterable) -> frozenset[int]:
    ids = set()
    for s in seeds:
        if isinstance(s, str):
            if s not in graph.entity_index:
                raise UnknownEntityError(s)
            ids.add(graph.entity_index[s])
        else:
            s = int(s)
            if not 0 <= s < graph.n_entities:
                raise UnknownEntityError(s)
            ids.add(s)
    return frozenset(ids)


def _undirected_adjacency(graph: KnowledgeGraph) -> dict[int, list[int]]:
    adj = getattr(graph, "_undirected", None)
    if adj is None:
        adj = {}
        for i, (h, _, t) in enumerate(graph.edges):
            adj.setdefault(h, []).append(i)
            if t != h:
                adj.setdefault(t, []).append(i)
        graph._undirected = adj
    return adj


def extract_subgraph(graph: KnowledgeGraph, seeds: Iterable, hops: int) -> EntitySubgraph:
    """Edges with at least one endpoint within ``hops - 1`` undirected hops of a seed."""
    seed_ids = _seed_ids(graph, seeds)
    if not seed_ids:
        raise ValueError("seed set must be nonempty")
    if hops < 0:
        raise ValueError("hops must be nonnegative")
    if hops == 0:
        return EntitySubgraph(graph, seed_ids, (), 0)
    adj = _undirected_adjacency(graph)
    dist = {s: 0 for s in seed_ids}
    queue = deque(sorted(seed_ids))
    chosen: set[int] = set()
    while queue:
        node = queue.popleft()
        d = dist[node]
        if d > hops - 1:
            continue
        for ei in adj.get(node, ()):
            chosen.add(ei)
            h, _, t = graph.edges[ei]
            other = t if h == node else h
            if other not in dist:
                dist[other] = d + 1
                queue.append(other)
    edges = tuple(graph.edges[i] for i in sorted(chosen))
    return EntitySubgraph(graph, seed_ids, edges, hops)


def full_subgraph(graph: KnowledgeGraph) -> EntitySubgraph:
    """The whole graph viewed as a subgraph seeded at every entity."""
    return EntitySubgraph(graph, frozenset(range(graph.n_entities)), tuple(graph.edges), 0)


# ---------------------------------------------------------------- seeded hashing

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return x ^ (x >> np.uint64(31))


def hash_uniform(keys: np.ndarray, seed: int, salt: int = 0) -> np.ndarray:
    """Map integer key rows to uniforms in [0, 1), pure in (keys, seed, salt)."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.int64)).astype(np.uint64)
    with np.errstate(over="ignore"):
        acc = _splitmix64(np.full(keys.shape[0], np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) ^ np.uint64(salt))
        for col in range(keys.shape[1]):
            acc = _splitmix64(acc ^ keys[:, col])
    return (acc >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def edge_uniforms(edges: Sequence[tuple[int, int, int]], seed: int, salt: int = 0) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros(0)
    return hash_uniform(np.asarray(edges, dtype=np.int64), seed, salt)


def sample_coverage(subgraph: EntitySubgraph, p: float, seed: int) -> EntitySubgraph:
    """Keep each edge iff its seeded hash uniform is below ``p``.

    Threshold sampling makes coverage levels nested for a fixed seed.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"coverage p must lie in [0, 1], got {p}")
    u = edge_uniforms(subgraph.edges, seed, salt=0xC0)
    kept = tuple(e for e, x in zip(subgraph.edges, u) if x < p)
    return EntitySubgraph(subgraph.parent, subgraph.seeds, kept, subgraph.hop_bound)


def perturb_structure(subgraph: EntitySubgraph, mode: str, rate: float, seed: int) -> EntitySubgraph:
    """Corrupt a ``rate`` fraction of edges.  The result may contain edges absent
    from the parent graph (relabelled or swapped); duplicates are merged."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"perturbation rate must lie in [0, 1], got {rate}")
    mode = mode.upper()
    if mode not in PERTURBATION_MODES:
        raise UnsupportedPerturbationError(f"unknown perturbation mode {mode!r}")
    n_rel = subgraph.parent.n_relations
    if mode == RELABEL_RELATIONS and n_rel < 2:
        raise UnsupportedPerturbationError("relation relabelling needs at least 2 relations")
    edges = list(subgraph.edges)
    u = edge_uniforms(edges, seed, salt=0x9E)
    selected = [i for i, x in enumerate(u) if x < rate]
    if mode == DELETE_EDGES:
        drop = set(selected)
        out = [e for i, e in enumerate(edges) if i not in drop]
    elif mode == RELABEL_RELATIONS:
        out = list(edges)
        shift = hash_uniform(np.asarray(edges, dtype=np.int64).reshape(-1, 3), seed, salt=0x5E) if edges else np.zeros(0)
        for i in selected:
            h, r, t = edges[i]
            offset = 1 + min(int(shift[i] * (n_rel - 1)), n_rel - 2)
            out[i] = (h, (r + offset) % n_rel, t)
    else:
        out = list(edges)
        if len(selected) >= 2:
            rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5A])
            order = [selected[j] for j in rng.permutation(len(selected))]
            # cyclic shift over a shuffled order: no edge keeps its own tail slot
            for k, i in enumerate(order):
                donor = order[(k + 1) % len(order)]
                h, r, _ = edges[i]
                out[i] = (h, r, edges[donor][2])
    deduped = list(dict.fromkeys(out))
    return EntitySubgraph(subgraph.parent, subgraph.seeds, tuple(deduped), subgraph.hop_bound)


# ---------------------------------------------------------------- sentences

@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    entity: str


@dataclass(frozen=True)
class LinkedSentence:
    tokens: tuple[str, ...]
    mentions: tuple[Mention, ...]
    target_position: int
    target_entity: str

    def validate(self, graph: KnowledgeGraph | None = None) -> None:
        n = len(self.tokens)
        spans = sorted(self.mentions, key=lambda m: m.start)
        prev_end = 0
        for m in spans:
            if not (0 <= m.start < m.end <= n):
                raise ValueError(f"mention span ({m.start}, {m.end}) out of bounds for {n} tokens")
            if m.start < prev_end:
                raise ValueError("overlapping mention spans")
            prev_end = m.end
        covering = [m for m in self.mentions if m.start <= self.target_position < m.end]
        if len(covering) != 1:
            raise ValueError("target position must lie inside exactly one mention")
        if covering[0].entity != self.target_entity:
            raise ValueError("target entity differs from the covering mention's entity")
        if graph is not None:
            for m in self.mentions:
                if m.entity not in graph.entity_index:
                    raise UnknownEntityError(m.entity)

    @property
    def target_mention(self) -> Mention:
        return next(m for m in self.mentions if m.start <= self.target_position < m.end)

    def context_mentions(self) -> tuple[Mention, ...]:
        """Mentions visible to the model; the masked target mention is hidden."""
        tm = self.target_mention
        return tuple(m for m in self.mentions if m is not tm)

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "mentions": [{"start": m.start, "end": m.end, "entity": m.entity} for m in self.mentions],
            "target": {"position": self.target_position, "entity": self.target_entity},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LinkedSentence":
        try:
            s = cls(
                tokens=tuple(str(t) for t in obj["tokens"]),
                mentions=tuple(Mention(int(m["start"]), int(m["end"]), str(m["entity"])) for m in obj["mentions"]),
                target_position=int(obj["target"]["position"]),
                target_entity=str(obj["target"]["entity"]),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed sentence record: {exc}") from None
        s.validate()
        return s


def read_sentences(text: str, graph: KnowledgeGraph | None = None) -> list[LinkedSentence]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            s = LinkedSentence.from_json(json.loads(line))
            s.validate(graph)
        except (json.JSONDecodeError, ValueError, KeyError) as exc:
            raise ParseError(str(exc), lineno) from None
        out.append(s)
    return out


def write_sentences(sentences: Iterable[LinkedSentence]) -> str:
    buf = io.StringIO()
    for s in sentences:
        buf.write(json.dumps(s.to_json(), ensure_ascii=False, separators=(",", ":")))
        buf.write("\n")
    return buf.getvalue()


# ---------------------------------------------------------------- linking

def surface_form(entity_id: str) -> tuple[str, ...]:
    return tuple(entity_id.replace("_", " ").split())


def link_entities(tokens: Sequence[str], graph: KnowledgeGraph) -> list[Mention]:
    """Longest-match-first, left-to-right exact lexicon matching."""
    lexicon = getattr(graph, "_lexicon", None)
    if lexicon is None:
        lexicon = {}
        for e in graph.entities:
            form = surface_form(e)
            if form:
                lexicon.setdefault(form, e)
        graph._lexicon = lexicon
        graph._max_form = max((len(f) for f in lexicon), default=0)
    max_len = graph._max_form
    tokens = list(tokens)
    out = []
    i = 0
    while i < len(tokens):
        for n in range(min(max_len, len(tokens) - i), 0, -1):
            e = lexicon.get(tuple(tokens[i:i + n]))
            if e is not None:
                out.append(Mention(i, i + n, e))
                i += n
                break
        else:
            i += 1
    return out


# ---------------------------------------------------------------- synthetic data

RELATION_NAMES = (
    "located_in", "part_of", "works_for", "born_in", "member_of", "capital_of",
    "author_of", "founded_by", "sibling_of", "instance_of", "owned_by", "spouse_of",
)

TEMPLATES = (
    ("{h}", "{r}", "{t}"),
    ("fact", ":", "{h}", "{r}", "{t}"),
    ("we", "know", "{h}", "{r}", "{t}"),
    ("it", "is", "said", "{h}", "{r}", "{t}"),
    ("indeed", "{h}", "{r}", "{t}"),
    ("records", "show", "{h}", "{r}", "{t}"),
    ("note", "{h}", "{r}", "{t}"),
    ("so", "{h}", "{r}", "{t}"),
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_entities: int = 200
    n_relations: int = 6
    n_sentences: int = 2000
    max_hops: int = 2
    n_templates: int = 4
    relations_per_head: int = 3
    alias_group_size: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.n_entities < 10:
            raise ConfigError("n_entities must be >= 10")
        if self.n_relations < 2:
            raise ConfigError("n_relations must be >= 2")
        if self.n_sentences < 0:
            raise ConfigError("n_sentences must be >= 0")
        if self.max_hops < 1:
            raise ConfigError("max_hops must be >= 1")
        if not 1 <= self.n_templates <= len(TEMPLATES):
            raise ConfigError(f"n_templates must lie in [1, {len(TEMPLATES)}]")
        if not 2 <= self.relations_per_head <= self.n_relations:
            raise ConfigError("relations_per_head must lie in [2, n_relations]")
        if not 1 <= self.alias_group_size <= self.n_entities:
            raise ConfigError("alias_group_size must lie in [1, n_entities]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        try:
            cfg = cls(**{k: int(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


def relation_name(i: int) -> str:
    return RELATION_NAMES[i] if i < len(RELATION_NAMES) else f"relation_{i}"


def gen_synthetic(config: SyntheticConfig) -> tuple[KnowledgeGraph, list[LinkedSentence]]:
    """Random multi-relational graph plus cloze sentences ``... head relation tail``.

    Each head carries ``relations_per_head`` relations with pairwise distinct
    tails, so the tail is determined only by the (head, relation) pair.  Heads
    are written with an alias shared by ``alias_group_size`` entities, so the
    text alone cannot tell which entity is meant; the gold mention link can.
    Tails are written with their canonical surface form.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    width = len(str(config.n_entities))
    entities = [f"Q{i:0{width}d}" for i in range(config.n_entities)]
    relations = [relation_name(i) for i in range(config.n_relations)]
    edges = []
    for h in range(config.n_entities):
        rels = np.sort(rng.choice(config.n_relations, size=config.relations_per_head, replace=False))
        others = np.delete(np.arange(config.n_entities), h)
        tails = rng.choice(others, size=config.relations_per_head, replace=False)
        for r, t in zip(rels, tails):
            edges.append((h, int(r), int(t)))
    graph = KnowledgeGraph(entities, relations, edges)
    n_alias = -(-config.n_entities // config.alias_group_size)
    alias_of = rng.permutation(config.n_entities) % n_alias
    aw = len(str(n_alias))
    aliases = [surface_form(entities[i]) if config.alias_group_size == 1 else (f"N{alias_of[i]:0{aw}d}",)
               for i in range(config.n_entities)]

    sentences = []
    picks = rng.integers(0, len(edges), size=config.n_sentences)
    tpl_picks = rng.integers(0, config.n_templates, size=config.n_sentences)
    for ei, ti in zip(picks, tpl_picks):
        h, r, t = edges[ei]
        tokens: list[str] = []
        mentions = []
        target = None
        for slot in TEMPLATES[ti]:
            if slot == "{h}":
                form = aliases[h]
                mentions.append(Mention(len(tokens), len(tokens) + len(form), entities[h]))
                tokens.extend(form)
            elif slot == "{r}":
                tokens.extend(surface_form(relations[r]))
            elif slot == "{t}":
                form = surface_form(entities[t])
                target = len(tokens)
                mentions.append(Mention(len(tokens), len(tokens) + len(form), entities[t]))
                tokens.extend(form)
            else:
                tokens.append(slot)
        sentences.append(LinkedSentence(tuple(tokens), tuple(mentions), target, entities[t]))
    return graph, sentences


def heldout_mask(n: int, seed: int = 0) -> np.ndarray:
    """Deterministic 80/20 split by hashed sentence index; True = held out."""
    if n == 0:
        return np.zeros(0, dtype=bool)
    u = hash_uniform(np.arange(n).reshape(-1, 1), seed, salt=0x5B)
    return u < 0.2
