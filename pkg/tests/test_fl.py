import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efpkd.data import PartitionPlan, dirichlet_partition
from efpkd.fl import (
    AggregationError,
    ClientState,
    PrototypeSet,
    RoundConfig,
    aggregate_models,
    aggregate_prototypes,
    aggregation_weights,
    client_update,
    compute_prototypes,
    embed,
    global_objective_value,
    local_loss,
    predict,
    pretrain_teacher,
    regularization_term,
    run_training,
    sample_availability,
)
from efpkd.nn import OptimizerState, init_params, student_spec, teacher_spec

from .conftest import blob_dataset

SMALL = dict(student_conv=(3,), student_hidden=4, teacher_conv=(4,), teacher_hidden=6)


def _client(ds, cid=0, conv=(3,), hidden=4, seed=0, lr=1e-4):
    spec = student_spec(ds.features.shape[1], ds.n_classes, conv, hidden)
    return ClientState(cid, ds.features, ds.labels, init_params(spec, np.random.default_rng(seed)),
                       OptimizerState("sgd", lr))


def _ps(vectors, counts, cid=-1):
    return PrototypeSet({k: np.asarray(v, dtype=float) for k, v in vectors.items()}, dict(counts), cid)


# -- availability -------------------------------------------------------------------


def test_availability_basics():
    assert sample_availability(5, 1.0, np.random.default_rng(0)).tolist() == [1] * 5
    a = sample_availability(8, 0.5, np.random.default_rng(3))
    b = sample_availability(8, 0.5, np.random.default_rng(3))
    assert a.tolist() == b.tolist()
    with pytest.raises(ValueError):
        sample_availability(3, 0.0, np.random.default_rng(0))


def test_availability_never_all_zero_and_frequency():
    rng = np.random.default_rng(1)
    draws = np.array([sample_availability(10, 0.5, rng) for _ in range(10_000)])
    assert draws.sum(axis=1).min() >= 1
    assert np.abs(draws.mean(axis=0) - 0.5).max() <= 0.02
    tiny = [sample_availability(3, 0.01, rng).sum() for _ in range(200)]
    assert min(tiny) >= 1


# -- teachers ------------------------------------------------------------------------


def test_teacher_learns_separable_toy():
    ds = blob_dataset(400, 6, seed=2, gap=8.0)
    c = _client(ds)
    cfg = RoundConfig(batch_size=32, **SMALL)
    t = pretrain_teacher(c, teacher_spec(6, 2, (4,), 6), cfg, "binary")
    assert t.frozen
    assert np.mean(c.teacher_logits.argmax(1) == ds.labels) > 0.95


def test_teacher_zero_epochs_and_determinism():
    ds = blob_dataset(60, 5, seed=1)
    spec = teacher_spec(5, 2, (4,), 6)
    cfg = RoundConfig(teacher_epochs=0, **SMALL)
    t0 = pretrain_teacher(_client(ds), spec, cfg, "binary")
    from efpkd.fl import _TEACHER_INIT, stream

    fresh = init_params(spec, stream(cfg.seed, _TEACHER_INIT, 0))
    np.testing.assert_array_equal(t0.to_vector(), fresh.to_vector())
    cfg = RoundConfig(teacher_epochs=2, **SMALL)
    a = pretrain_teacher(_client(ds), spec, cfg, "binary")
    b = pretrain_teacher(_client(ds), spec, cfg, "binary")
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())


# -- prototypes and losses -------------------------------------------------------------


def test_prototype_examples(blobs):
    c = _client(blobs)
    _, emb = embed(c.student, blobs.features[:2])
    one = compute_prototypes(c.student, blobs.features[:1], np.array([1]))
    np.testing.assert_array_equal(one.vectors[1], emb[0])
    assert one.counts == {1: 1}
    two = compute_prototypes(c.student, blobs.features[:2], np.array([0, 0]))
    np.testing.assert_allclose(two.vectors[0], (emb[0] + emb[1]) / 2, atol=1e-12)
    assert not compute_prototypes(c.student, blobs.features, blobs.labels, alpha=0)


def test_prototype_counts_match_shard(blobs):
    c = _client(blobs)
    ps = compute_prototypes(c.student, blobs.features, blobs.labels)
    assert ps.counts == c.class_counts()
    assert all(np.isfinite(v).all() and v.shape == (4,) for v in ps.vectors.values())


def test_regularization_examples():
    assert regularization_term(_ps({0: [0, 0]}, {0: 1}), _ps({0: [3, 4]}, {0: 1}))[0] == pytest.approx(25.0)
    assert regularization_term(_ps({0: [1, 2]}, {0: 1}), PrototypeSet())[0] == 0.0
    same = _ps({0: [1, 2], 1: [3, 3]}, {0: 1, 1: 1})
    assert regularization_term(same, same)[0] == 0.0
    # classes held by only one side are skipped
    assert regularization_term(_ps({0: [0, 0], 2: [9, 9]}, {0: 1, 2: 1}), _ps({0: [0, 1]}, {0: 1}))[0] == 1.0


def test_local_loss_examples():
    assert local_loss(1.0, 0.5, 0.2, 0.1, 1.0) == pytest.approx(0.75)
    assert local_loss(0.7, 0.3, 0.9, 1.0, 0.0) == pytest.approx(0.7)
    assert local_loss(0.0, 0.0, 0.0, 0.1, 1.0) == 0.0


# -- client update ----------------------------------------------------------------------


def test_client_update_returns_model_only_on_final_round(blobs):
    cfg = RoundConfig(strategy="fedproto", local_epochs=1, **SMALL)
    c = _client(blobs)
    up = client_update(c, PrototypeSet(), cfg, 1, False, "binary")
    assert up.params is None and up.prototypes
    up = client_update(c, PrototypeSet(), cfg, 2, True, "binary")
    assert up.params is c.student


def test_client_update_zero_epochs_keeps_params(blobs):
    cfg = RoundConfig(strategy="fedproto", local_epochs=0, **SMALL)
    c = _client(blobs)
    before = c.student.to_vector().copy()
    up = client_update(c, PrototypeSet(), cfg, 1, False, "binary")
    np.testing.assert_array_equal(before, c.student.to_vector())
    ref = compute_prototypes(c.student, blobs.features, blobs.labels, 1, 0)
    for k in ref.vectors:
        np.testing.assert_array_equal(up.prototypes.vectors[k], ref.vectors[k])


def test_client_update_rejects_absent_client(blobs):
    c = _client(blobs)
    c.alpha = 0
    with pytest.raises(ValueError):
        client_update(c, PrototypeSet(), RoundConfig(**SMALL), 1, False, "binary")


def test_local_training_loss_mostly_decreases():
    ds = blob_dataset(300, 6, seed=5, gap=4.0)
    c = _client(ds, lr=1e-4)
    spec = teacher_spec(6, 2, (4,), 6)
    cfg = RoundConfig(strategy="efpkd", local_epochs=5, **SMALL)
    pretrain_teacher(c, spec, cfg, "binary")
    glob = compute_prototypes(c.student, ds.features, ds.labels)
    up = client_update(c, glob, cfg, 1, False, "binary")
    trace = up.epoch_losses
    drops = sum(b <= a for a, b in zip(trace, trace[1:]))
    assert len(trace) == 5 and drops >= 3  # at most one uptick across the 4 transitions
    assert trace[-1] < trace[0]


# -- aggregation -----------------------------------------------------------------------


def test_prototype_aggregation_examples():
    n1, n2 = np.array([1.0, 2.0]), np.array([3.0, 6.0])
    single = aggregate_prototypes([_ps({0: n1}, {0: 7}, 0)])
    np.testing.assert_array_equal(single.vectors[0], n1)
    both = aggregate_prototypes([_ps({0: n1}, {0: 5}, 0), _ps({0: n2}, {0: 5}, 1)])
    np.testing.assert_allclose(both.vectors[0], (n1 + n2) / 4, atol=1e-15)
    mean = aggregate_prototypes([_ps({0: n1}, {0: 5}, 0), _ps({0: n2}, {0: 5}, 1)], mean_normalized=True)
    np.testing.assert_allclose(mean.vectors[0], (n1 + n2) / 2, atol=1e-15)
    skip = aggregate_prototypes([_ps({0: n1}, {0: 5}, 0), _ps({0: n2, 1: n2}, {0: 5, 1: 2}, 1)], [1, 0])
    np.testing.assert_array_equal(skip.vectors[0], n1)
    assert 1 not in skip.vectors
    with pytest.raises(AggregationError):
        aggregate_prototypes([PrototypeSet()])


def test_model_aggregation_examples():
    spec = student_spec(3, 2, (1,), 2)
    a = init_params(spec, np.random.default_rng(0))
    b = init_params(spec, np.random.default_rng(1))
    a.load_vector(np.where(np.arange(a.total_count) % 2 == 0, 1.0, 3.0))
    b.load_vector(np.where(np.arange(b.total_count) % 2 == 0, 3.0, 1.0))
    np.testing.assert_array_equal(aggregate_models([a, b], [10, 10], [1, 1]).to_vector(), 2.0)
    np.testing.assert_array_equal(aggregate_models([a], [10], [1]).to_vector(), a.to_vector())
    np.testing.assert_allclose(aggregation_weights([100, 300], [1, 1]), [0.25, 0.75], atol=1e-15)
    w = aggregate_models([a, b], [100, 300], [1, 1]).to_vector()
    np.testing.assert_allclose(w, 0.25 * a.to_vector() + 0.75 * b.to_vector(), atol=1e-12)
    other = init_params(student_spec(3, 2, (2,), 2), np.random.default_rng(0))
    with pytest.raises(AggregationError):
        aggregate_models([a, other], [1, 1], [1, 1])
    with pytest.raises(AggregationError):
        aggregation_weights([5, 5], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10_000), st.integers(0, 1)), min_size=1, max_size=20).filter(
    lambda xs: any(a for _, a in xs)))
def test_aggregation_weights_sum_to_one(pairs):
    w = aggregation_weights([s for s, _ in pairs], [a for _, a in pairs])
    assert abs(w.sum() - 1.0) <= 1e-12
    assert all(wi == 0 for wi, (_, a) in zip(w, pairs) if a == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_aggregation_is_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    spec = student_spec(3, 2, (1,), 2)
    models = [init_params(spec, np.random.default_rng(seed + i)) for i in range(n)]
    sizes = rng.integers(1, 100, size=n).tolist()
    sets = [_ps({k: rng.normal(size=3) for k in rng.choice(3, size=2, replace=False)},
                {k: int(rng.integers(1, 50)) for k in range(3)}, cid) for cid in range(n)]
    for s in sets:
        s.counts = {k: s.counts[k] for k in s.vectors}
    perm = rng.permutation(n)
    m1 = aggregate_models(models, sizes, [1] * n, list(range(n)))
    m2 = aggregate_models([models[i] for i in perm], [sizes[i] for i in perm], [1] * n, [int(i) for i in perm])
    np.testing.assert_array_equal(m1.to_vector(), m2.to_vector())
    p1 = aggregate_prototypes(sets)
    p2 = aggregate_prototypes([sets[i] for i in perm])
    assert p1.vectors.keys() == p2.vectors.keys()
    for k in p1.vectors:
        np.testing.assert_array_equal(p1.vectors[k], p2.vectors[k])


# -- global objective ---------------------------------------------------------------------


def test_global_objective_two_client_hand_value(blobs):
    cfg = RoundConfig(gamma=0.5)
    c1, c2 = _client(blobs, 0), _client(blobs, 1)
    c1.X, c1.y = c1.X[:30], c1.y[:30]
    c2.X, c2.y = c2.X[:10], c2.y[:10]
    c1.sl_loss, c2.sl_loss = 0.8, 0.4
    c1.prototypes = _ps({0: [0, 0], 1: [1, 1]}, {0: 10, 1: 20})
    c2.prototypes = _ps({0: [2, 0]}, {0: 10})
    glob = _ps({0: [1, 0], 1: [1, 2]}, {0: 20, 1: 20})
    want = (30 / 40) * 0.8 + (10 / 40) * 0.4
    want += 0.5 * ((10 / 20) * 1.0 + (10 / 20) * 1.0)  # class 0
    want += 0.5 * (20 / 20) * 1.0  # class 1
    assert global_objective_value([c1, c2], glob, cfg) == pytest.approx(want, abs=1e-10)
    cfg0 = RoundConfig(gamma=0.0)
    c1.sl_loss = c2.sl_loss = 0.0
    assert global_objective_value([c1, c2], glob, cfg0) == 0.0


# -- orchestration ------------------------------------------------------------------------


def _plan(ds, n, seed=0):
    return dirichlet_partition(ds.labels, n, 5.0, seed)


def test_efpkd_model_only_in_final_round(blobs):
    cfg = RoundConfig(strategy="efpkd", rounds=3, local_epochs=1, teacher_epochs=1, **SMALL)
    res = run_training(blobs, _plan(blobs, 3), cfg)
    for rep in res.reports[:-1]:
        assert rep.ledger["model_bytes_up"] == rep.ledger["model_bytes_down"] == 0
        assert not rep.global_model_present
        assert rep.ledger["prototype_bytes_up"] > 0
    assert res.reports[-1].ledger["model_bytes_up"] > 0
    assert res.state.model is not None and res.state.round == 3


def test_single_round_efpkd_has_global_model(blobs):
    cfg = RoundConfig(strategy="efpkd", rounds=1, local_epochs=1, teacher_epochs=1, **SMALL)
    assert run_training(blobs, _plan(blobs, 2), cfg).state.model is not None


@pytest.mark.parametrize("strategy", ["fedproto", "independent-cnn", "independent-kd"])
def test_personal_strategies_never_ship_models(blobs, strategy):
    cfg = RoundConfig(strategy=strategy, rounds=2, local_epochs=1, teacher_epochs=1, **SMALL)
    res = run_training(blobs, _plan(blobs, 2), cfg)
    assert res.state.model is None
    assert all(r.ledger["model_bytes_up"] == 0 for r in res.reports)
    shares_protos = strategy == "fedproto"
    assert all((r.ledger["prototype_bytes_up"] > 0) == shares_protos for r in res.reports)


def test_strategy_degeneration_matches_fedavg_bit_for_bit(blobs):
    common = dict(rounds=3, local_epochs=2, availability_probability=1.0, seed=11, **SMALL)
    fedavg = run_training(blobs, _plan(blobs, 3), RoundConfig(strategy="fedavg", **common))
    degen = run_training(blobs, _plan(blobs, 3), RoundConfig(strategy="efpkd", gamma=0.0, psi=1.0,
                                                             force_model_aggregation=True, **common))
    np.testing.assert_array_equal(fedavg.state.model.to_vector(), degen.state.model.to_vector())


def test_fedavg_one_step_equals_centralised_full_batch():
    ds = blob_dataset(120, 5, seed=9)
    rows = np.arange(120)
    two = PartitionPlan((rows[:60], rows[60:]), 1.0, 0)
    one = PartitionPlan((rows,), 1.0, 0)
    common = dict(strategy="fedavg", rounds=1, local_epochs=1, batch_size=10_000, student_lr=0.05,
                  availability_probability=1.0, **SMALL)
    fed = run_training(ds, two, RoundConfig(**common))
    central = run_training(ds, one, RoundConfig(**common))
    np.testing.assert_allclose(fed.state.model.to_vector(), central.state.model.to_vector(), rtol=0, atol=1e-9)


def test_training_is_reproducible(blobs):
    cfg = RoundConfig(strategy="efpkd", rounds=2, local_epochs=1, teacher_epochs=1, seed=3, **SMALL)
    test = blob_dataset(80, 6, seed=99)
    shards = _plan(test, 3, 1).client_shards
    a = run_training(blobs, _plan(blobs, 3), cfg, test, shards)
    b = run_training(blobs, _plan(blobs, 3), cfg, test, shards)
    np.testing.assert_array_equal(a.state.model.to_vector(), b.state.model.to_vector())
    assert [r.pooled for r in a.reports] == [r.pooled for r in b.reports]
    assert [r.objective for r in a.reports] == [r.objective for r in b.reports]


def test_round_reports_cover_evaluation(blobs):
    test = blob_dataset(90, 6, seed=7)
    shards = _plan(test, 3, 1).client_shards
    cfg = RoundConfig(strategy="fedavg", rounds=2, local_epochs=1, **SMALL)
    res = run_training(blobs, _plan(blobs, 3), cfg, test, shards)
    last = res.reports[-1]
    assert last.pooled["n"] == 90
    assert last.pooled["odc"] == last.pooled["tp"] + last.pooled["tn"]
    pred = predict(res.state.model, test.features)
    assert last.pooled["accuracy"] == pytest.approx(np.mean(pred == test.labels))
    assert set(last.averaged) >= {"AA", "AP", "AR", "AFS"}
    assert last.lr == pytest.approx(cfg.student_lr * 0.97)


def test_config_validation():
    for bad in (dict(strategy="nope"), dict(psi=1.5), dict(gamma=-1), dict(zeta=0), dict(rounds=0),
                dict(availability_probability=0.0), dict(distance="cos")):
        with pytest.raises(ValueError):
            RoundConfig(**bad).validate()
