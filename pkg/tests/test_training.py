import numpy as np
import pytest

from kgfuse import numerics as nx
from kgfuse.harness import Dataset, build_report
from kgfuse.kgdata import ConfigError, SyntheticConfig, gen_synthetic
from kgfuse.training import (IntegrityError, KGModel, TrainConfig, alignment_loss, build_vocab, evaluate,
                             forward_batch, load_checkpoint, make_batch, save_checkpoint, total_loss, train)

from gradcheck import grad_error

TINY = dict(epochs=3, batch_size=8, d_kg=8, d_lm=8, d_attn=8, n_heads=2)


@pytest.fixture(scope="module")
def small_data():
    graph, corpus = gen_synthetic(SyntheticConfig(n_entities=30, n_sentences=60, seed=4))
    return graph, corpus


def double_loop_alignment(h, k, mask):
    total = 0.0
    for i in range(h.shape[0]):
        if mask[i]:
            for j in range(h.shape[1]):
                total += (h[i, j] - k[i, j]) ** 2
    return total


# ---- alignment and total loss

def test_alignment_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert alignment_loss(x, x, np.ones(4, bool)).data == 0.0


def test_alignment_unit_rows():
    assert alignment_loss([[1.0, 0.0]], [[0.0, 1.0]], [True]).data == 2.0


def test_alignment_matches_double_loop_and_gradient():
    rng = np.random.default_rng(1)
    for _ in range(20):
        h = nx.Parameter("h", rng.normal(size=(5, 6)))
        k = nx.Parameter("k", rng.normal(size=(5, 6)))
        mask = rng.random(5) < 0.6
        got = alignment_loss(h, k, mask).data
        assert abs(got - double_loop_alignment(h.data, k.data, mask)) < 1e-12
        if mask.any():
            assert grad_error(lambda: alignment_loss(h, k, mask), [h, k]) < 1e-6


def test_alignment_shape_mismatch():
    with pytest.raises(nx.ContractError):
        alignment_loss(np.zeros((3, 2)), np.zeros((3, 3)), np.ones(3, bool))


def test_total_loss_arithmetic():
    assert total_loss(1.0, 2.0, 0.5).data == 2.0
    assert total_loss(1.25, 7.0, 0.0).data == 1.25
    with pytest.raises(nx.NumericalError):
        total_loss(np.inf, 1.0, 0.1)


def test_total_gradient_decomposes(small_data):
    graph, corpus = small_data
    cfg = TrainConfig(**TINY, alpha=0.3)
    model = KGModel(cfg, build_vocab(corpus), graph.entities, graph.relations)
    batch = make_batch(corpus[:6], model.vocab, model.entity_index)
    params = model.parameters()

    def grads(which):
        nx.zero_grad(params)
        out = forward_batch(model, batch, graph)
        loss = {"task": out.l_task, "align": out.l_align,
                "total": total_loss(out.l_task, out.l_align, cfg.alpha)}[which]
        nx.backward(loss)
        return [p.grad.copy() for p in params]

    task, align, tot = grads("task"), grads("align"), grads("total")
    for a, b, c in zip(task, align, tot):
        assert np.max(np.abs(c - (a + cfg.alpha * b))) < 1e-12
    # and the total against finite differences on a few parameters
    subset = [model.gate.w, model.attn.v, model.rgcn.self_weights[0]]
    err = grad_error(lambda: total_loss(*(lambda o: (o.l_task, o.l_align))(forward_batch(model, batch, graph)),
                                        cfg.alpha), subset)
    assert err < 1e-5


# ---- config

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(coverage=1.5).validate()
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learnign_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"use_knowledge": "yes"})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_config_error_before_training(small_data):
    graph, corpus = small_data
    with pytest.raises(ConfigError):
        train(TrainConfig(learning_rate=-1.0), graph, corpus)


# ---- training runs

def test_zero_epochs_returns_initialized_model(small_data):
    graph, corpus = small_data
    cfg = TrainConfig(**{**TINY, "epochs": 0})
    model, history = train(cfg, graph, corpus)
    fresh = KGModel(cfg, build_vocab(corpus), graph.entities, graph.relations)
    assert not history.steps
    assert all(np.array_equal(model.state()[k], v) for k, v in fresh.state().items())


def test_histories_are_bit_identical_and_seed_dependent(small_data):
    graph, corpus = small_data
    a = train(TrainConfig(**TINY, seed=3), graph, corpus)[1].to_csv()
    b = train(TrainConfig(**TINY, seed=3), graph, corpus)[1].to_csv()
    c = train(TrainConfig(**TINY, seed=4), graph, corpus)[1].to_csv()
    assert a == b and a != c


def test_recorded_total_is_task_plus_weighted_align(small_data):
    graph, corpus = small_data
    cfg = TrainConfig(**TINY, alpha=0.7)
    _, history = train(cfg, graph, corpus)
    assert any(row[2] > 0 for row in history.steps)
    for _, task, align, tot, lam in history.steps:
        assert abs(tot - (task + cfg.alpha * align)) < 1e-10
        assert 0.0 < lam <= 1.0


def test_alpha_zero_equals_no_alignment_build(small_data):
    graph, corpus = small_data
    m1, h1 = train(TrainConfig(**TINY, alpha=0.0), graph, corpus)
    m2, h2 = train(TrainConfig(**TINY, alpha=0.0, compute_align=False), graph, corpus)
    assert [(r[0], r[1], r[3], r[4]) for r in h1.steps] == [(r[0], r[1], r[3], r[4]) for r in h2.steps]
    assert all(np.array_equal(m1.state()[k], v) for k, v in m2.state().items())


def test_zero_coverage_equals_knowledge_free(small_data):
    graph, corpus = small_data
    m1, h1 = train(TrainConfig(**TINY, coverage=0.0), graph, corpus)
    m2, h2 = train(TrainConfig(**TINY, use_knowledge=False), graph, corpus)
    assert h1.to_csv() == h2.to_csv()
    assert all(np.array_equal(m1.state()[k], v) for k, v in m2.state().items())
    e1, e2 = evaluate(m1, graph, corpus), evaluate(m2, graph, corpus)
    assert np.array_equal(e1.scores, e2.scores) and e1.generations == e2.generations


def test_loss_decreases_on_ten_sentences():
    graph, corpus = gen_synthetic(SyntheticConfig(n_sentences=10, seed=2))
    cfg = TrainConfig(epochs=20)
    _, history = train(cfg, graph, corpus)
    means = history.epoch_mean(1)  # ten sentences fit in one batch
    assert means[-1] < means[0]


def test_beats_random_baseline_on_200_sentences():
    accs = []
    for seed in range(3):
        graph, corpus = gen_synthetic(SyntheticConfig(n_sentences=200, seed=seed))
        data = Dataset.split(graph, corpus)
        model, _ = train(TrainConfig(seed=seed), graph, data.train)
        accs.append(build_report(model, graph, data.heldout).entity_accuracy)
    assert np.mean(accs) >= 10.0 / graph.n_entities


def test_frozen_encoder_is_untouched(small_data):
    graph, corpus = small_data
    cfg = TrainConfig(**TINY, freeze_context_encoder=True)
    model, _ = train(cfg, graph, corpus)
    fresh = KGModel(cfg, build_vocab(corpus), graph.entities, graph.relations)
    enc = {p.name for p in fresh.lm.encoder_parameters()}
    state, start = model.state(), fresh.state()
    assert all(np.array_equal(state[k], start[k]) for k in enc)
    assert not np.array_equal(state["fusion.w_gate"], start["fusion.w_gate"])


def test_divergence_is_flagged(small_data):
    graph, corpus = small_data
    _, history = train(TrainConfig(**TINY, learning_rate=1e6, optimizer="SGD"), graph, corpus)
    assert history.diverged and history.diverged_reason


# ---- checkpoints

def test_checkpoint_round_trip_is_bitwise(small_data, tmp_path):
    graph, corpus = small_data
    model, _ = train(TrainConfig(**TINY), graph, corpus)
    save_checkpoint(model, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    a, b = evaluate(model, graph, corpus), evaluate(loaded, graph, corpus)
    assert np.array_equal(a.scores, b.scores)
    assert a.predictions == b.predictions and a.generations == b.generations


def test_truncated_payload_is_rejected(small_data, tmp_path):
    graph, corpus = small_data
    model = KGModel(TrainConfig(**TINY), build_vocab(corpus), graph.entities, graph.relations)
    path = save_checkpoint(model, tmp_path / "ck")
    payload = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(payload[:-8])
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    (path / "params.bin").write_bytes(payload[:-8] + b"\x00" * 8)
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_manifest_counts_agree_on_random_models(small_data, tmp_path):
    import json

    graph, corpus = small_data
    vocab = build_vocab(corpus)
    rng = np.random.default_rng(5)
    for i in range(20):
        heads = int(rng.choice([1, 2, 4]))
        cfg = TrainConfig(d_lm=4 * heads * int(rng.integers(1, 3)), n_heads=heads, d_kg=int(rng.integers(2, 9)),
                          d_attn=int(rng.integers(2, 9)), n_rgcn_layers=int(rng.integers(1, 3)),
                          n_blocks=int(rng.integers(0, 3)), n_readout_blocks=int(rng.integers(0, 2)),
                          scalar_gate=bool(rng.integers(2)), add_inverse_edges=bool(rng.integers(2)), seed=i)
        model = KGModel(cfg, vocab, graph.entities, graph.relations)
        path = save_checkpoint(model, tmp_path / f"m{i}")
        manifest = json.loads((path / "manifest.json").read_text())
        declared = sum(int(np.prod(s["shape"])) for s in manifest["parameters"])
        assert declared == manifest["n_values"] == sum(p.data.size for p in model.parameters())
        assert (path / "params.bin").stat().st_size == 8 * declared
        loaded = load_checkpoint(path)
        assert all(np.array_equal(loaded.state()[k], v) for k, v in model.state().items())
