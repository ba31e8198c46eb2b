from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msvcl.config import STRATEGIES
from msvcl.pairing import (BundlingError, ViewRecord, bundle, bundle_legacy, bundle_msvcl_plus,
                           bundle_mscl_plus, bundle_mvcl_plus, positive_pair_count, validate_batch)
from msvcl.styles import StylePool, pool_size


def make_records(n_patients=6, domains=("A", "B", "C")):
    out, ref = [], 0
    for p in range(n_patients):
        dom = domains[p % len(domains)]
        for lat in ("L", "R"):
            for view in ("CC", "MLO"):
                out.append(ViewRecord(f"P{p}", lat, view, ref, dom))
                ref += 1
    return out


RECORDS = make_records()
POOL = StylePool(("A", "B", "C"))


def index_of(batch, patient, lat, view):
    return [i for i, r in enumerate(batch.records)
            if (r.patient_id, r.laterality, r.view) == (patient, lat, view)]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_thousand_random_batches_have_no_violations(strategy):
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        for batch in bundle(strategy, RECORDS, n, rng, POOL):
            diag = validate_batch(batch)
            assert diag.ok, diag.violations[:3]
            pos = batch.positive_map
            assert (pos[pos] == np.arange(batch.n_items)).all()
            assert (pos != np.arange(batch.n_items)).all()
            assert batch.n_items == 2 * n


def test_mscl_plus_never_has_cross_view_negatives():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        diag = validate_batch(bundle_mscl_plus(RECORDS, 8, rng, POOL))
        assert diag.negative_counts.get("cross_view_cross_patient", 0) == 0
        assert diag.negative_counts.get("cross_view_same_patient", 0) == 0
        assert diag.negative_counts.get("same_view_same_patient", 0) == 0


@pytest.mark.parametrize("legacy,plus", [("mscl", "mscl_plus"), ("mvcl", "mvcl_plus")])
def test_legacy_masks_are_supersets_of_plus(legacy, plus):
    for seed in range(1000):
        a = bundle(legacy, RECORDS, 6, np.random.default_rng(seed), POOL)[0]
        b = bundle(plus, RECORDS, 6, np.random.default_rng(seed), POOL)[0]
        assert a.records == b.records
        assert (a.positive_map == b.positive_map).all()
        assert a.variants == b.variants
        assert not (b.negative_mask & ~a.negative_mask).any()


def test_mscl_plus_rules_on_named_pairs():
    recs = [r for r in RECORDS if r.patient_id in ("P0", "P1") and r.laterality == "L"]
    rng = np.random.default_rng(0)
    batch = bundle_mscl_plus(recs, 4, rng, POOL)
    mask = batch.negative_mask
    for i, j in combinations(range(batch.n_items), 2):
        a, b = batch.records[i], batch.records[j]
        expected = a.view == b.view and a.patient_id != b.patient_id
        assert mask[i, j] == expected
    for i in range(batch.n_items):
        j = batch.positive_map[i]
        assert batch.records[i] == batch.records[j]
        assert batch.variants[i] != batch.variants[j]
        assert not mask[i, j]


def test_mvcl_plus_rules_on_named_pairs():
    recs = [r for r in RECORDS if r.patient_id in ("P0", "P1")]
    batch = bundle_mvcl_plus(recs, 4, np.random.default_rng(0), POOL)
    lcc = index_of(batch, "P0", "L", "CC")[0]
    assert batch.records[batch.positive_map[lcc]] == next(r for r in recs if
                                                          (r.patient_id, r.laterality, r.view) == ("P0", "L", "MLO"))
    for k in index_of(batch, "P1", "L", "MLO"):
        assert batch.negative_mask[lcc, k]
    for k in index_of(batch, "P1", "L", "CC"):
        assert not batch.negative_mask[lcc, k]


def test_legacy_rules_on_named_pairs():
    recs = [r for r in RECORDS if r.patient_id in ("P0", "P1")]
    ms = bundle_legacy(recs, 4, np.random.default_rng(0), "MSCL", POOL)
    cc = [i for i, r in enumerate(ms.records) if r.patient_id == "P0" and r.view == "CC"]
    mlo = [i for i, r in enumerate(ms.records) if r.patient_id == "P1" and r.view == "MLO"]
    if cc and mlo:
        assert ms.negative_mask[cc[0], mlo[0]]
    mv = bundle_legacy(recs, 4, np.random.default_rng(0), "MVCL", POOL)
    lcc = index_of(mv, "P0", "L", "CC")[0]
    for k in index_of(mv, "P1", "L", "CC"):
        assert mv.negative_mask[lcc, k]


def test_msvcl_plus_components_share_the_draw():
    ms, mv = bundle_msvcl_plus(RECORDS, 5, np.random.default_rng(3), POOL)
    assert ms.n_items == mv.n_items == 10
    assert validate_batch(ms).ok and validate_batch(mv).ok
    assert {r.breast for r in ms.records} == {r.breast for r in mv.records}


def test_validate_batch_flags_corruption():
    batch = bundle_mscl_plus(RECORDS, 4, np.random.default_rng(0), POOL)
    assert validate_batch(batch).violations == []
    batch.negative_mask[2, 2] = True
    assert len(validate_batch(batch).violations) == 1


def test_bundling_errors():
    one_patient = [r for r in RECORDS if r.patient_id == "P0"]
    with pytest.raises(BundlingError):
        bundle_mscl_plus(one_patient, 2, np.random.default_rng(0))
    unmatched = [r for r in RECORDS if not (r.patient_id == "P1" and r.view == "MLO")]
    with pytest.raises(BundlingError):
        bundle_mvcl_plus(unmatched, 2, np.random.default_rng(0))
    with pytest.raises(BundlingError):
        bundle("mscl+", RECORDS, 2, np.random.default_rng(0))
    with pytest.raises(BundlingError):
        bundle_legacy(RECORDS, 2, np.random.default_rng(0), "SIMCLR")


def test_batches_cover_two_patients_first():
    rng = np.random.default_rng(7)
    for _ in range(200):
        batch = bundle_mscl_plus(RECORDS, 2, rng, POOL)
        assert len({r.patient_id for r in batch.records}) == 2


def test_pool_size_and_positive_count():
    assert pool_size(3) == 30
    assert POOL.L == 30
    with pytest.raises(ValueError):
        pool_size(1)
    for n in range(1, 4):
        for length in range(1, 6):
            pairs = {(img, a, b) for img in range(n) for a in range(length) for b in range(length) if a < b}
            assert len(pairs) == positive_pair_count(n, length)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 10), strategy=st.sampled_from(STRATEGIES))
def test_bundling_is_deterministic_and_valid(seed, n, strategy):
    a = bundle(strategy, RECORDS, n, np.random.default_rng(seed), POOL)
    b = bundle(strategy, RECORDS, n, np.random.default_rng(seed), POOL)
    for x, y in zip(a, b):
        assert x.records == y.records and x.variants == y.variants
        assert (x.negative_mask == y.negative_mask).all()
        assert validate_batch(x).ok
