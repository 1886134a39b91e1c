import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmq.data import DataPool, Sample
from mmq.errors import CapacityError, ConfigError, ContractError
from mmq.maml import TrainConfig
from mmq.network import init_feature_net
from mmq.refinement import (RefineConfig, ScoreEntry, ScoreRecord, class_partitions, refine,
                            refinement_loop, score_pool, write_refinement_report)
from mmq.synthetic import GeneratorSpec, generate

IMG = np.zeros((1, 2, 2), np.float32)


def pool_of(meta: dict, unlabeled: list, num_classes=4):
    return DataPool(tuple(Sample(i, IMG, lab, lab) for i, lab in meta.items()),
                    tuple(Sample(i, IMG, 0) for i in unlabeled), num_classes)


def oracle(pool, records, tau_low, tau_high, rule="predicted"):
    """Straight transcription of the two rules and the set formulas."""
    entries = {r.sample_id: r.entries for r in records}
    u_prime = set()
    for s in pool.meta:
        for e in entries[s.id]:
            if rule == "predicted" and e.label == s.meta_label and e.confidence < tau_low:
                u_prime.add(s.id)
            if rule == "gt_score" and e.meta_score is not None and e.meta_score < tau_low:
                u_prime.add(s.id)
    m_prime = {}
    for s in pool.unlabeled:
        es = entries[s.id]
        if any(e.confidence > tau_high for e in es):
            best = es[0]
            for e in es[1:]:
                if e.confidence > best.confidence:
                    best = e
            m_prime[s.id] = best.label
    meta_ids = {s.id for s in pool.meta}
    unl_ids = {s.id for s in pool.unlabeled}
    m_f = (meta_ids - u_prime) | set(m_prime)
    u_f = (unl_ids - set(m_prime)) | u_prime
    labels = {s.id: s.meta_label for s in pool.meta if s.id not in u_prime}
    labels.update(m_prime)
    return m_f, u_f, labels


def test_worked_example():
    pool = pool_of({"a": 1, "b": 0}, ["c"])
    records = [ScoreRecord("a", [ScoreEntry(0, 0.3, 1)]),
               ScoreRecord("b", [ScoreEntry(0, 0.8, 0)]),
               ScoreRecord("c", [ScoreEntry(0, 0.95, 2), ScoreEntry(1, 0.6, 3)])]
    out = refine(pool, records, RefineConfig()).pool
    assert {s.id: s.meta_label for s in out.meta} == {"b": 0, "c": 2}
    assert [s.id for s in out.unlabeled] == ["a"] and out.unlabeled[0].meta_label is None


def test_nothing_crosses_a_threshold():
    pool = pool_of({"a": 1, "b": 0}, ["c"])
    records = [ScoreRecord("a", [ScoreEntry(0, 0.7, 1)]), ScoreRecord("b", [ScoreEntry(0, 0.2, 3)]),
               ScoreRecord("c", [ScoreEntry(0, 0.85, 2)])]
    result = refine(pool, records, RefineConfig())
    assert not result.demoted and not result.promoted
    assert [(s.id, s.meta_label) for s in result.pool.samples] == [(s.id, s.meta_label) for s in pool.samples]


def test_threshold_order_is_validated():
    pool = pool_of({"a": 1}, [])
    with pytest.raises(ConfigError):
        refine(pool, [ScoreRecord("a", [])], RefineConfig(tau_low=0.9, tau_high=0.5))
    with pytest.raises(ConfigError):
        RefineConfig(demote_rule="vote").validate()


def test_records_must_cover_the_pool():
    with pytest.raises(ContractError):
        refine(pool_of({"a": 1}, ["b"]), [ScoreRecord("a", [])], RefineConfig())


@st.composite
def instances(draw):
    classes = draw(st.integers(2, 5))
    n_meta = draw(st.integers(0, 12))
    n_unl = draw(st.integers(0, 12))
    n_tasks = draw(st.integers(1, 4))
    meta = {f"m{i}": draw(st.integers(0, classes - 1)) for i in range(n_meta)}
    unl = [f"u{i}" for i in range(n_unl)]
    # coarse confidence grid so ties and exact-threshold values occur
    conf = st.sampled_from([0.1, 0.25, 0.5, 0.6, 0.75, 0.9, 0.95, 1.0])
    records = []
    for sid in list(meta) + unl:
        entries = []
        for t in range(n_tasks):
            label = draw(st.integers(0, classes - 1))
            meta_score = draw(st.one_of(st.none(), conf)) if sid in meta else None
            entries.append(ScoreEntry(t, draw(conf), label, meta_score))
        records.append(ScoreRecord(sid, entries))
    lo = draw(st.sampled_from([0.25, 0.5, 0.6, 0.75]))
    hi = draw(st.sampled_from([h for h in (0.6, 0.75, 0.9, 0.95) if h >= lo]))
    rule = draw(st.sampled_from(["predicted", "gt_score"]))
    return pool_of(meta, unl, classes), records, lo, hi, rule


@settings(max_examples=150, deadline=None)
@given(instances())
def test_refine_matches_rule_oracle(inst):
    pool, records, lo, hi, rule = inst
    out = refine(pool, records, RefineConfig(tau_low=lo, tau_high=hi, demote_rule=rule)).pool
    m_f, u_f, labels = oracle(pool, records, lo, hi, rule)
    assert {s.id for s in out.meta} == m_f and {s.id for s in out.unlabeled} == u_f
    assert {s.id: s.meta_label for s in out.meta} == labels
    assert len(out) == len(pool)


@settings(max_examples=60, deadline=None)
@given(instances())
def test_refine_is_pure(inst):
    pool, records, lo, hi, rule = inst
    cfg = RefineConfig(tau_low=lo, tau_high=hi, demote_rule=rule)
    a, b = refine(pool, records, cfg).pool, refine(pool, records, cfg).pool
    assert [(s.id, s.meta_label) for s in a.samples] == [(s.id, s.meta_label) for s in b.samples]


@settings(max_examples=80, deadline=None)
@given(instances(), st.sampled_from([0.05, 0.1, 0.2]))
def test_monotone_thresholds(inst, delta):
    pool, records, lo, hi, rule = inst
    base = refine(pool, records, RefineConfig(lo, hi, demote_rule=rule))
    if hi + delta < 1:
        stricter = refine(pool, records, RefineConfig(lo, hi + delta, demote_rule=rule))
        assert set(stricter.promoted) <= set(base.promoted)
    if lo - delta > 0:
        lower = refine(pool, records, RefineConfig(lo - delta, hi, demote_rule=rule))
        assert set(lower.demoted) <= set(base.demoted)


def test_class_partitions_cover_every_class():
    rng = np.random.default_rng(0)
    for classes in ([0, 1, 2], list(range(9)), list(range(7))):
        groups = class_partitions(classes, 3, rng)
        assert set().union(*groups) == set(classes)
        assert all(len(set(g)) == 3 for g in groups)


@pytest.fixture(scope="module")
def tiny():
    pool, _ = generate(GeneratorSpec(image_size=31, samples_per_class=12, downstream_train_per_class=1,
                                     downstream_test_per_class=1, seed=3))
    return pool


def test_scores_cover_the_pool_and_are_probabilities(tiny):
    net = init_feature_net(np.random.default_rng(0), 8, 31)
    records = score_pool(net, tiny, 3, 3, 0, alpha=0.5, passes=2)
    assert {r.sample_id for r in records} == {s.id for s in tiny.samples}
    n_tasks = len(records[0].entries)
    assert n_tasks == 6  # 9 classes in groups of 3, twice
    for r in records:
        assert len(r.entries) == n_tasks
        assert all(1 / 3 - 1e-6 <= e.confidence <= 1.0 for e in r.entries)


def test_single_task_single_sample():
    pool, _ = generate(GeneratorSpec(num_classes=2, image_size=31, samples_per_class=2,
                                     downstream_train_per_class=1, downstream_test_per_class=1))
    only = DataPool(pool.meta, pool.unlabeled[:1], 2)
    records = score_pool(init_feature_net(np.random.default_rng(0), 4, 31), only, 2, 1, 0, alpha=0.1)
    by_id = {r.sample_id: r for r in records}
    assert len(by_id[only.unlabeled[0].id].entries) == 1


def test_uniform_classifier_gives_one_over_y(tiny):
    records = score_pool(init_feature_net(np.random.default_rng(0), 8, 31), tiny, 3, 3, 0, alpha=0.0)
    assert all(abs(e.confidence - 1 / 3) < 1e-6 for r in records for e in r.entries)


def test_loop_base_case_and_round_count(tiny, tmp_path):
    cfg = TrainConfig(iterations=2, feature_dim=8, inner_lr=0.5)
    one = refinement_loop(tiny, 1, cfg, RefineConfig(), seed=0)
    assert len(one.models) == 1 and not one.reports and one.pool is tiny
    three = refinement_loop(tiny, 3, cfg, RefineConfig(tau_low=0.05, tau_high=0.6), seed=0)
    assert [m.round for m in three.models] == [0, 1, 2] and len(three.reports) == 2
    for p in three.pools:
        assert len(p) == len(tiny)
        assert not {s.id for s in p.meta} & {s.id for s in p.unlabeled}
    # the first round of a longer loop is the one-round loop
    assert np.array_equal(one.models[0].net.params["conv1.w"].data, three.models[0].net.params["conv1.w"].data)
    write_refinement_report(tmp_path / "r.tsv", three.reports, "h")
    assert len((tmp_path / "r.tsv").read_text().splitlines()) == 4


def test_loop_capacity_error_names_the_round(tiny):
    with pytest.raises(CapacityError, match="round 0"):
        refinement_loop(tiny, 2, TrainConfig(iterations=1, shots=40, update_shots=20), RefineConfig(), 0)
