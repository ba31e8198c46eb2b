"""Contrastive batch construction for the multi-style / multi-view strategies.

A batch holds ``2N`` items laid out SimCLR-style: item ``i`` and item
``i + N`` form a positive pair. Which other items count as negatives for an
anchor is encoded in a boolean ``negative_mask`` and depends on the strategy:

==============  =====================================  ==========================================
strategy        positive pair                          eligible negatives for anchor i
==============  =====================================  ==========================================
simclr          two augmentations of one image         every other item
mscl            two style variants of one image        every item from a different source image
mscl_plus       two style variants of one image        same view position, different patient
mvcl            CC and MLO of one breast               every item from a different patient
mvcl_plus       CC and MLO of one breast               different view position, different patient
==============  =====================================  ==========================================

``msvcl`` / ``msvcl_plus`` produce one multi-style and one multi-view batch
from the same draw of breasts.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence

import numpy as np

from .styles.pool import StylePool

MS_STRATEGIES = ("simclr", "mscl", "mscl_plus")
MV_STRATEGIES = ("mvcl", "mvcl_plus")
COMBINED = {"msvcl": ("mscl", "mvcl"), "msvcl_plus": ("mscl_plus", "mvcl_plus")}


class BundlingError(ValueError):
    pass


@dataclass(frozen=True)
class ViewRecord:
    patient_id: str
    laterality: str
    view: str
    ref: int
    domain: str

    @property
    def breast(self) -> tuple[str, str]:
        return self.patient_id, self.laterality


@dataclass
class PairBatch:
    strategy: str
    records: list[ViewRecord]
    variants: list[int | None]
    positive_map: np.ndarray
    negative_mask: np.ndarray
    items: np.ndarray | None = None
    tags: list[str] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return len(self.records)


@dataclass
class Diagnostics:
    violations: list[str]
    negative_counts: dict[str, int]
    composition: dict[str, object]

    @property
    def ok(self) -> bool:
        return not self.violations


def _codes(records: Sequence[ViewRecord]):
    _, patients = np.unique([r.patient_id for r in records], return_inverse=True)
    views = np.array([r.view == "CC" for r in records])
    sources = np.array([r.ref for r in records])
    return patients, views, sources


def negative_mask_for(strategy: str, records: Sequence[ViewRecord],
                      positive_map: np.ndarray) -> np.ndarray:
    n = len(records)
    patients, views, sources = _codes(records)
    diff_patient = patients[:, None] != patients[None, :]
    same_view = views[:, None] == views[None, :]
    if strategy == "simclr":
        mask = np.ones((n, n), dtype=bool)
    elif strategy == "mscl":
        mask = sources[:, None] != sources[None, :]
    elif strategy == "mscl_plus":
        mask = same_view & diff_patient
    elif strategy == "mvcl":
        mask = diff_patient.copy()
    elif strategy == "mvcl_plus":
        mask = ~same_view & diff_patient
    else:
        raise BundlingError(f"unknown strategy {strategy!r}")
    mask = mask.copy()
    idx = np.arange(n)
    mask[idx, idx] = False
    mask[idx, positive_map] = False
    return mask


def _pair_map(n_pairs: int) -> np.ndarray:
    return np.concatenate([np.arange(n_pairs, 2 * n_pairs), np.arange(n_pairs)])


def _patients_first(groups: dict[str, list], n: int, rng: np.random.Generator) -> list:
    """Pick ``n`` members, visiting patients without replacement before repeating any."""
    patients = sorted(groups)
    order = [patients[i] for i in rng.permutation(len(patients))]
    pools = {p: [groups[p][i] for i in rng.permutation(len(groups[p]))] for p in order}
    picked = []
    while len(picked) < n:
        progressed = False
        for p in order:
            if pools[p]:
                picked.append(pools[p].pop())
                progressed = True
                if len(picked) == n:
                    break
        if not progressed:
            raise BundlingError(f"only {len(picked)} candidates available for a batch of {n}")
    return picked


def _check_records(records: Sequence[ViewRecord], n: int) -> None:
    if n < 1:
        raise BundlingError("N must be >= 1")
    if len({r.patient_id for r in records}) < 2:
        raise BundlingError("records must span at least 2 patients")


def draw_sources(records: Sequence[ViewRecord], n: int, rng: np.random.Generator) -> list[ViewRecord]:
    _check_records(records, n)
    groups: dict[str, list[ViewRecord]] = defaultdict(list)
    for r in records:
        groups[r.patient_id].append(r)
    return _patients_first(groups, n, rng)


def matched_breasts(records: Sequence[ViewRecord]) -> dict[tuple[str, str], dict[str, ViewRecord]]:
    by_breast: dict[tuple[str, str], dict[str, ViewRecord]] = defaultdict(dict)
    for r in records:
        by_breast[r.breast][r.view] = r
    unmatched = [k for k, v in by_breast.items() if set(v) != {"CC", "MLO"}]
    if unmatched:
        raise BundlingError(f"{len(unmatched)} breasts lack a CC/MLO pair, e.g. {unmatched[0]}")
    return by_breast


def draw_breasts(records: Sequence[ViewRecord], n: int,
                 rng: np.random.Generator) -> list[dict[str, ViewRecord]]:
    _check_records(records, n)
    by_breast = matched_breasts(records)
    groups: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for key in sorted(by_breast):
        groups[key[0]].append(key)
    return [by_breast[k] for k in _patients_first(groups, n, rng)]


def _variant_pair(pool: StylePool | None, rng, distinct: bool) -> tuple[int | None, int | None]:
    if pool is None:
        return None, None
    if distinct:
        return pool.draw_distinct(rng)
    return pool.draw(rng), pool.draw(rng)


def _ms_batch(strategy: str, sources: list[ViewRecord], pool: StylePool | None,
              rng: np.random.Generator) -> PairBatch:
    n = len(sources)
    first, second = [], []
    for _ in sources:
        a, b = _variant_pair(pool if strategy != "simclr" else None, rng, distinct=True)
        first.append(a)
        second.append(b)
    records = list(sources) + list(sources)
    pos = _pair_map(n)
    return PairBatch(strategy, records, first + second, pos,
                     negative_mask_for(strategy, records, pos))


def _mv_batch(strategy: str, breasts: list[dict[str, ViewRecord]], pool: StylePool | None,
              rng: np.random.Generator) -> PairBatch:
    n = len(breasts)
    cc = [b["CC"] for b in breasts]
    mlo = [b["MLO"] for b in breasts]
    first, second = [], []
    for _ in breasts:
        a, b = _variant_pair(pool, rng, distinct=False)
        first.append(a)
        second.append(b)
    records = cc + mlo
    pos = _pair_map(n)
    return PairBatch(strategy, records, first + second, pos,
                     negative_mask_for(strategy, records, pos))


def bundle_simclr(records: Sequence[ViewRecord], n: int, rng: np.random.Generator) -> PairBatch:
    return _ms_batch("simclr", draw_sources(records, n, rng), None, rng)


def bundle_mscl_plus(records: Sequence[ViewRecord], n: int, rng: np.random.Generator,
                     pool: StylePool | None = None) -> PairBatch:
    return _ms_batch("mscl_plus", draw_sources(records, n, rng), pool, rng)


def bundle_mvcl_plus(records: Sequence[ViewRecord], n: int, rng: np.random.Generator,
                     pool: StylePool | None = None) -> PairBatch:
    return _mv_batch("mvcl_plus", draw_breasts(records, n, rng), pool, rng)


def bundle_legacy(records: Sequence[ViewRecord], n: int, rng: np.random.Generator,
                  strategy: str, pool: StylePool | None = None) -> PairBatch:
    """Earlier MSCL / MVCL rules: same positives as the "+" variants, looser negatives."""
    if strategy == "MSCL" or strategy == "mscl":
        return _ms_batch("mscl", draw_sources(records, n, rng), pool, rng)
    if strategy == "MVCL" or strategy == "mvcl":
        return _mv_batch("mvcl", draw_breasts(records, n, rng), pool, rng)
    raise BundlingError(f"legacy strategy must be MSCL or MVCL, got {strategy!r}")


def _msvcl(ms_strategy: str, mv_strategy: str, records, n, rng, pool, same_draw: bool):
    breasts = draw_breasts(records, n, rng)
    views = rng.integers(0, 2, size=len(breasts))
    sources = [b["CC" if v == 0 else "MLO"] for b, v in zip(breasts, views)]
    ms = _ms_batch(ms_strategy, sources, pool, rng)
    if not same_draw:
        breasts = draw_breasts(records, n, rng)
    mv = _mv_batch(mv_strategy, breasts, pool, rng)
    return ms, mv


def bundle_msvcl_plus(records: Sequence[ViewRecord], n: int, rng: np.random.Generator,
                      pool: StylePool | None = None, same_draw: bool = True) -> tuple[PairBatch, PairBatch]:
    return _msvcl("mscl_plus", "mvcl_plus", records, n, rng, pool, same_draw)


def bundle_msvcl(records: Sequence[ViewRecord], n: int, rng: np.random.Generator,
                 pool: StylePool | None = None, same_draw: bool = True) -> tuple[PairBatch, PairBatch]:
    return _msvcl("mscl", "mvcl", records, n, rng, pool, same_draw)


def bundle(strategy: str, records: Sequence[ViewRecord], n: int, rng: np.random.Generator,
           pool: StylePool | None = None, same_draw: bool = True) -> list[PairBatch]:
    """Dispatch on the ``pairing.strategy`` config value; always returns a list of batches."""
    if strategy == "simclr":
        return [bundle_simclr(records, n, rng)]
    if strategy == "mscl_plus":
        return [bundle_mscl_plus(records, n, rng, pool)]
    if strategy == "mvcl_plus":
        return [bundle_mvcl_plus(records, n, rng, pool)]
    if strategy in ("mscl", "mvcl"):
        return [bundle_legacy(records, n, rng, strategy, pool)]
    if strategy == "msvcl_plus":
        return list(bundle_msvcl_plus(records, n, rng, pool, same_draw))
    if strategy == "msvcl":
        return list(bundle_msvcl(records, n, rng, pool, same_draw))
    raise BundlingError(f"unknown strategy {strategy!r}")


def validate_batch(batch: PairBatch) -> Diagnostics:
    """Check a batch against its strategy's invariants; never raises."""
    violations: list[str] = []
    n = batch.n_items
    pos = np.asarray(batch.positive_map)
    mask = np.asarray(batch.negative_mask, dtype=bool)
    recs = batch.records
    if pos.shape != (n,) or mask.shape != (n, n):
        violations.append(f"shape mismatch: positive_map {pos.shape}, negative_mask {mask.shape}, items {n}")
        return Diagnostics(violations, {}, {})
    idx = np.arange(n)
    for i in idx[pos == idx]:
        violations.append(f"item {i} is its own positive")
    for i in idx[pos[pos] != idx]:
        violations.append(f"positive map is not an involution at item {i}")
    for i in idx[mask[idx, idx]]:
        violations.append(f"item {i} is marked as its own negative")
    for i in idx[mask[idx, pos]]:
        violations.append(f"item {i}: positive partner {pos[i]} marked as negative")

    ms_like = batch.strategy in MS_STRATEGIES
    for i in range(n):
        j = int(pos[i])
        a, b = recs[i], recs[j]
        if ms_like and a != b:
            violations.append(f"item {i}: multi-style positive {j} comes from a different source")
        if ms_like and batch.strategy != "simclr" and batch.variants[i] is not None \
                and batch.variants[i] == batch.variants[j]:
            violations.append(f"item {i}: positive pair shares style variant {batch.variants[i]}")
        if not ms_like and (a.breast != b.breast or a.view == b.view):
            violations.append(f"item {i}: multi-view positive {j} is not the other view of the same breast")

    counts: Counter[str] = Counter()
    for i, k in zip(*np.nonzero(mask)):
        if i == k or k == pos[i]:
            continue  # already reported above
        a, b = recs[i], recs[k]
        same_patient = a.patient_id == b.patient_id
        same_view = a.view == b.view
        kind = ("same" if same_view else "cross") + "_view_" + ("same" if same_patient else "cross") + "_patient"
        counts[kind] += 1
        bad = False
        if batch.strategy == "mscl_plus":
            bad = not (same_view and not same_patient)
        elif batch.strategy == "mvcl_plus":
            bad = not (not same_view and not same_patient)
        elif batch.strategy == "mvcl":
            bad = same_patient
        elif batch.strategy == "mscl":
            bad = a.ref == b.ref
        if bad:
            violations.append(f"negative ({i}, {k}) violates {batch.strategy} rule ({kind})")

    composition = {
        "n_items": n,
        "patients": len({r.patient_id for r in recs}),
        "views": dict(Counter(r.view for r in recs)),
        "domains": dict(Counter(r.domain for r in recs)),
        "empty_negative_rows": int((~mask.any(axis=1)).sum()),
    }
    return Diagnostics(violations, dict(counts), composition)


def positive_pair_count(n_images: int, pool_size: int) -> int:
    """Distinct multi-style positive pairs available over ``n_images`` sources."""
    return n_images * comb(pool_size, 2)


def materialize(batch: PairBatch, load_image: Callable[[ViewRecord], np.ndarray],
                pool: StylePool | None, augment: Callable[[np.ndarray, np.random.Generator], np.ndarray],
                rng: np.random.Generator) -> np.ndarray:
    """Render every item: style variant first, then the augmentation recipe."""
    cache: dict[int, np.ndarray] = {}
    out = []
    tags = []
    for rec, var in zip(batch.records, batch.variants):
        if rec.ref not in cache:
            cache[rec.ref] = load_image(rec)
        img = cache[rec.ref]
        if var is not None and pool is not None:
            img = pool.render(img, rec.domain, var, rng)
            tags.append(pool.variants[var].tag)
        else:
            tags.append(rec.domain)
        out.append(augment(img, rng))
    batch.items = np.stack(out).astype(np.float32)
    batch.tags = tags
    return batch.items
