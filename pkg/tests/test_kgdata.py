import io
from collections import deque

import numpy as np
import pytest

from kgfuse.kgdata import (DELETE_EDGES, PERTURBATION_MODES, RELABEL_RELATIONS, SWAP_ENDPOINTS, ConfigError,
                           KnowledgeGraph, LinkedSentence, Mention, ParseError, SyntheticConfig,
                           UnknownEntityError, UnsupportedPerturbationError, extract_subgraph, full_subgraph,
                           gen_synthetic, heldout_mask, link_entities, load_triples, parse_triples, perturb_structure,
                           read_sentences, sample_coverage, serialize_triples, write_sentences)


def random_graph(rng, n_nodes, n_edges, n_rel=3):
    entities = [f"e{i}" for i in range(n_nodes)]
    relations = [f"r{i}" for i in range(n_rel)]
    edges = [(int(rng.integers(n_nodes)), int(rng.integers(n_rel)), int(rng.integers(n_nodes))) for _ in range(n_edges)]
    return KnowledgeGraph(entities, relations, edges)


def bfs_edge_oracle(graph, seeds, hops):
    """Edges whose nearer endpoint is at undirected distance <= hops - 1."""
    adj = {}
    for h, _, t in graph.edges:
        adj.setdefault(h, set()).add(t)
        adj.setdefault(t, set()).add(h)
    dist = {s: 0 for s in seeds}
    q = deque(seeds)
    while q:
        u = q.popleft()
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    inf = float("inf")
    return {e for e in graph.edges if min(dist.get(e[0], inf), dist.get(e[2], inf)) <= hops - 1}


# ---- parsing

def test_parse_single_line():
    g = parse_triples("Paris\tcapital_of\tFrance\n")
    assert (g.n_entities, g.n_relations, len(g.edges)) == (2, 1, 1)


def test_parse_empty_input():
    g = parse_triples("")
    assert g.n_entities == 0 and not g.edges


def test_parse_accepts_bytes_and_files_and_skips_comments():
    text = "# header\n\nA\tr\tB\n"
    assert parse_triples(text.encode()) == parse_triples(io.StringIO(text)) == parse_triples(text)


def test_parse_errors_report_line_number():
    with pytest.raises(ParseError, match="line 2"):
        parse_triples("A\tr\tB\nA\tr\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_triples("A\t\tB\n")


def test_duplicate_lines_dedup_against_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lines = [f"e{rng.integers(8)}\tr{rng.integers(3)}\te{rng.integers(8)}" for _ in range(rng.integers(1, 40))]
        g = parse_triples("\n".join(lines) + "\n")
        assert len(g.edges) == len(set(lines))


def test_adjacency_reconstructs_edges():
    g = random_graph(np.random.default_rng(1), 30, 120)
    rebuilt = {(h, r, t) for (h, r), tails in g.outgoing.items() for t in tails}
    assert rebuilt == set(g.edges)
    rebuilt_in = {(h, r, t) for (t, r), heads in g.incoming.items() for h in heads}
    assert rebuilt_in == set(g.edges)


def test_serialize_round_trip():
    g = random_graph(np.random.default_rng(2), 40, 100)
    text = serialize_triples(g)
    again = load_triples(text)
    assert again == g and again.edges == g.edges
    plain = parse_triples(text)
    assert set(plain.triples()) == set(g.triples())


# ---- subgraphs

def test_hops_zero_has_only_seeds():
    g = random_graph(np.random.default_rng(3), 10, 20)
    sub = extract_subgraph(g, [0, 1], 0)
    assert not sub.edges and sub.seeds == {0, 1}


def test_star_graph_one_hop():
    g = KnowledgeGraph(["c"] + [f"s{i}" for i in range(6)], ["r"], [(0, 0, i) for i in range(1, 7)])
    assert extract_subgraph(g, ["c"], 1).edge_set() == set(g.edges)


def test_extract_matches_bfs_oracle():
    rng = np.random.default_rng(4)
    for hops in (1, 2, 3):
        for _ in range(5):
            g = random_graph(rng, 200, 260)
            seeds = [int(s) for s in rng.choice(200, size=3, replace=False)]
            assert extract_subgraph(g, seeds, hops).edge_set() == bfs_edge_oracle(g, seeds, hops)


def test_unknown_seed_named():
    g = random_graph(np.random.default_rng(5), 5, 5)
    with pytest.raises(UnknownEntityError, match="ghost"):
        extract_subgraph(g, ["ghost"], 1)


# ---- coverage sampling

def test_coverage_extremes():
    sub = full_subgraph(random_graph(np.random.default_rng(6), 50, 200))
    assert sample_coverage(sub, 1.0, 0).edges == sub.edges
    assert sample_coverage(sub, 0.0, 0).edges == ()


def test_coverage_half_is_binomial():
    g = KnowledgeGraph([f"e{i}" for i in range(1000)], ["r"], [(i, 0, (i + 1) % 1000) for i in range(1000)])
    sub = full_subgraph(g)
    counts = [len(sample_coverage(sub, 0.5, s).edges) for s in range(100)]
    assert 460 <= np.mean(counts) <= 540


def test_coverage_nested_and_deterministic():
    sub = full_subgraph(random_graph(np.random.default_rng(7), 60, 300))
    levels = [sample_coverage(sub, p, 3).edge_set() for p in (0.25, 0.5, 0.75)]
    assert levels[0] <= levels[1] <= levels[2]
    assert sample_coverage(sub, 0.5, 3).edges == sample_coverage(sub, 0.5, 3).edges
    assert sample_coverage(sub, 0.5, 3).seeds == sub.seeds


def test_coverage_domain_error():
    sub = full_subgraph(random_graph(np.random.default_rng(8), 5, 5))
    with pytest.raises(ValueError):
        sample_coverage(sub, 1.5, 0)


# ---- perturbation

def test_rate_zero_is_identity_for_all_modes():
    sub = full_subgraph(random_graph(np.random.default_rng(9), 30, 80))
    for mode in PERTURBATION_MODES:
        assert perturb_structure(sub, mode, 0.0, 1).edges == sub.edges


def test_delete_all():
    sub = full_subgraph(random_graph(np.random.default_rng(10), 30, 80))
    assert perturb_structure(sub, DELETE_EDGES, 1.0, 1).edges == ()


def test_relabel_all_changes_every_relation_full_scan():
    g = KnowledgeGraph([f"e{i}" for i in range(101)], ["a", "b", "c", "d"], [(i, i % 4, i + 1) for i in range(100)])
    sub = full_subgraph(g)
    out = perturb_structure(sub, RELABEL_RELATIONS, 1.0, 5)
    assert len(out.edges) == 100
    before = {(h, t): r for h, r, t in sub.edges}
    unchanged = 0
    for h, r, t in out.edges:
        if before[(h, t)] == r:
            unchanged += 1
    assert unchanged == 0


def test_relabel_needs_two_relations():
    g = KnowledgeGraph(["a", "b"], ["r"], [(0, 0, 1)])
    with pytest.raises(UnsupportedPerturbationError):
        perturb_structure(full_subgraph(g), RELABEL_RELATIONS, 0.5, 0)


def test_swap_moves_every_selected_tail():
    g = KnowledgeGraph([f"e{i}" for i in range(200)], ["r"], [(i, 0, 100 + i) for i in range(100)])
    out = perturb_structure(full_subgraph(g), SWAP_ENDPOINTS, 1.0, 2)
    assert all(t != 100 + h for h, _, t in out.edges)
    assert sorted(t for _, _, t in out.edges) == list(range(100, 200))
    assert out.edges == perturb_structure(full_subgraph(g), SWAP_ENDPOINTS, 1.0, 2).edges


# ---- linking

def test_link_single_entity():
    g = KnowledgeGraph(["Paris", "France"], ["r"], [(0, 0, 1)])
    assert link_entities(["Paris", "is", "nice"], g) == [Mention(0, 1, "Paris")]


def test_link_longest_match_wins():
    g = KnowledgeGraph(["New_York", "New_York_City"], ["r"], [(0, 0, 1)])
    spans = link_entities(["in", "New", "York", "City", "today"], g)
    assert spans == [Mention(1, 4, "New_York_City")]


def brute_force_linker(tokens, entities):
    forms = {tuple(e.replace("_", " ").split()): e for e in reversed(entities)}
    out, i = [], 0
    while i < len(tokens):
        best = None
        for j in range(len(tokens), i, -1):
            if tuple(tokens[i:j]) in forms:
                best = j
                break
        if best is None:
            i += 1
        else:
            out.append(Mention(i, best, forms[tuple(tokens[i:best])]))
            i = best
    return out


def test_linker_matches_brute_force():
    rng = np.random.default_rng(11)
    words = ["alpha", "beta", "gamma", "delta", "the", "of"]
    entities = sorted({"_".join(rng.choice(words, size=rng.integers(1, 4))) for _ in range(15)})
    g = KnowledgeGraph(entities, ["r"], [])
    for _ in range(100):
        tokens = list(rng.choice(words, size=rng.integers(1, 15)))
        planted = entities[rng.integers(len(entities))].split("_")
        pos = int(rng.integers(0, len(tokens) + 1))
        tokens[pos:pos] = planted
        assert link_entities(tokens, g) == brute_force_linker(tokens, entities)


# ---- sentences

def test_sentence_json_round_trip():
    _, corpus = gen_synthetic(SyntheticConfig(n_entities=20, n_sentences=30, seed=1))
    again = read_sentences(write_sentences(corpus))
    assert again == corpus


def test_sentence_validation():
    bad = LinkedSentence(("a", "b"), (Mention(0, 1, "X"),), 1, "X")
    with pytest.raises(ValueError):
        bad.validate()


# ---- synthetic generator

def test_synthetic_empty_corpus():
    g, corpus = gen_synthetic(SyntheticConfig(n_sentences=0))
    assert corpus == [] and g.edges


def test_synthetic_entity_count():
    g, _ = gen_synthetic(SyntheticConfig(n_entities=50, n_sentences=10))
    assert g.n_entities == 50


def test_synthetic_uniqueness_audit():
    cfg = SyntheticConfig()
    g, corpus = gen_synthetic(cfg)
    rel_of_form = {tuple(r.replace("_", " ").split()): i for i, r in enumerate(g.relations)}
    for s in corpus:
        head = next(m for m in s.context_mentions())
        h = g.entity_index[head.entity]
        r = None
        for form, i in rel_of_form.items():
            if tuple(s.tokens[head.end:head.end + len(form)]) == form:
                r = i
        matches = [e for e in g.edges if e[0] == h and e[1] == r]
        assert len(matches) == 1
        assert g.entities[matches[0][2]] == s.target_entity
        assert s.target_position == len(s.tokens) - 1


def test_synthetic_heads_have_distinct_tails():
    g, _ = gen_synthetic(SyntheticConfig())
    for h in range(g.n_entities):
        tails = [t for (hh, _), ts in g.outgoing.items() if hh == h for t in ts]
        assert len(tails) >= 2 and len(set(tails)) == len(tails)


def test_synthetic_is_deterministic():
    a = gen_synthetic(SyntheticConfig(seed=3, n_sentences=50))
    b = gen_synthetic(SyntheticConfig(seed=3, n_sentences=50))
    assert serialize_triples(a[0]) == serialize_triples(b[0])
    assert write_sentences(a[1]) == write_sentences(b[1])


def test_synthetic_config_errors():
    with pytest.raises(ConfigError):
        SyntheticConfig(n_relations=1).validate()
    with pytest.raises(ConfigError):
        SyntheticConfig.from_dict({"n_entitys": 5})


def test_heldout_split_is_about_a_fifth():
    m = heldout_mask(5000)
    assert 0.18 < m.mean() < 0.22
    assert np.array_equal(m, heldout_mask(5000))
