import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xrc.common import ClassLabel, DataError, Source
from xrc.data_ingest import build_manifest
from xrc.phase_sampler import PhaseLayout, build_phase_plan, phase_schedule, read_phase_plan, write_phase_plan
from xrc.synthetic import synthetic_records

C, P, N = ClassLabel.COVID19, ClassLabel.PNEUMONIA, ClassLabel.NORMAL


def _manifest(layout, extra=0, cohen_pneumonia=None, seed=0):
    need = layout.train_counts
    counts = {c: need[c] + extra for c in need}
    counts[P] += 1  # room for the spare Cohen image below
    cohen = layout.shared_pneumonia + 1 if cohen_pneumonia is None else cohen_pneumonia
    return build_manifest(synthetic_records(counts, cohen), layout.split_spec(), seed)


def test_small_plan_by_brute_force():
    layout = PhaseLayout(n_phases=2, covid_core=5, shared_pneumonia=2, unique_pneumonia=8, unique_normal=10)
    m = _manifest(layout, extra=3)
    plan = build_phase_plan(m, 1, 0, layout)
    assert [len(p) for p in plan.phases] == [25, 25]
    a, b = (p.image_ids for p in plan.phases)
    assert a & b == plan.core and len(plan.core) == 7
    lookup = m.by_id()
    for p in plan.phases:
        hist = {c: sum(lookup[i].class_label is c for i in p.image_ids) for c in (C, P, N)}
        assert hist == {C: 5, P: 10, N: 10} == {c: p.class_histogram[c] for c in (C, P, N)}
    assert all(lookup[i].source is Source.COHEN_XRAY for i in plan.shared_pneumonia)
    # every unique id lives in exactly one phase
    for i in (a | b) - plan.core:
        assert (i in a) != (i in b)


def test_single_phase_without_unique_pools():
    layout = PhaseLayout(n_phases=1, covid_core=3, shared_pneumonia=0, unique_pneumonia=0, unique_normal=0)
    m = build_manifest(synthetic_records({C: 4, P: 1, N: 1}, 0), layout.split_spec(), 0)
    plan = build_phase_plan(m, 1, 0, layout)
    assert len(plan.phases) == 1 and plan.phases[0].image_ids == plan.covid_core
    assert len(plan.covid_core) == 3


def test_shared_core_tops_up_from_rsna():
    layout = PhaseLayout(n_phases=2, covid_core=2, shared_pneumonia=3, unique_pneumonia=2, unique_normal=2)
    spec = layout.split_spec()
    # only one Cohen pneumonia image: drop the source quota so the split is still drawable
    from xrc.data_ingest import SplitSpec

    m = build_manifest(synthetic_records({C: 3, P: 8, N: 5}, 1), SplitSpec(spec.train_counts), 0)
    plan = build_phase_plan(m, 1, 0, layout)
    lookup = m.by_id()
    sources = sorted(lookup[i].source.value for i in plan.shared_pneumonia)
    assert len(sources) == 3 and sources.count(Source.COHEN_XRAY.value) == sum(
        1 for r in m.train if r.source is Source.COHEN_XRAY and r.class_label is P)


def test_shortfall_names_fold_phase_and_class():
    layout = PhaseLayout(n_phases=2, covid_core=2, shared_pneumonia=1, unique_pneumonia=2, unique_normal=2)
    m = _manifest(layout)
    big = PhaseLayout(n_phases=3, covid_core=2, shared_pneumonia=1, unique_pneumonia=2, unique_normal=2)
    with pytest.raises(DataError, match="fold 4, phase 2, class PNEUMONIA: need 2, only 0 left \\(shortfall 2\\)"):
        build_phase_plan(m, 4, 0, big)


def test_schedule():
    sched = phase_schedule(8, 100)
    assert [(p, r[0], r[-1]) for p, r in sched] == [(p, 100 * p + 1, 100 * p + 100) for p in range(8)]
    assert sched[-1][1][-1] == 800
    assert phase_schedule(8, 3)[-1] == (7, range(22, 25))
    with pytest.raises(ValueError):
        phase_schedule(8, 0)


def test_seed_and_fold_change_the_plan():
    layout = PhaseLayout(n_phases=3, covid_core=5, shared_pneumonia=2, unique_pneumonia=4, unique_normal=4)
    m = _manifest(layout, extra=10)
    base = build_phase_plan(m, 1, 0, layout)
    assert build_phase_plan(m, 1, 0, layout) == base
    assert build_phase_plan(m, 1, 1, layout) != base
    assert build_phase_plan(m, 2, 0, layout) != base


def test_plan_round_trip(tmp_path):
    layout = PhaseLayout(n_phases=3, covid_core=5, shared_pneumonia=2, unique_pneumonia=4, unique_normal=4)
    m = _manifest(layout, extra=2)
    plan = build_phase_plan(m, 2, 0, layout)
    path = write_phase_plan(plan, tmp_path / "phases.csv")
    assert read_phase_plan(path, m, 2) == plan
    one = PhaseLayout(n_phases=1, covid_core=2, shared_pneumonia=1, unique_pneumonia=2, unique_normal=2)
    p1 = build_phase_plan(_manifest(one), 1, 0, one)
    assert read_phase_plan(write_phase_plan(p1, tmp_path / "one.csv"), _manifest(one), 1) == p1


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 4), st.integers(0, 6), st.integers(0, 3), st.integers(0, 5), st.integers(0, 5),
    st.integers(0, 3), st.integers(0, 2**31),
)
def test_plan_invariants(n_phases, covid, shared, up, un, extra, seed):
    layout = PhaseLayout(n_phases, covid, shared, up, un)
    if layout.phase_size == 0:
        return
    m = _manifest(layout, extra=extra + 1)
    plan = build_phase_plan(m, 1, seed, layout)
    train = {r.image_id for r in m.train}
    assert all(len(p) == layout.phase_size for p in plan.phases)
    assert plan.union() <= train
    assert len(plan.union()) == covid + shared + n_phases * (up + un)
    for a, b in itertools.combinations(plan.phases, 2):
        assert a.image_ids & b.image_ids == plan.core
