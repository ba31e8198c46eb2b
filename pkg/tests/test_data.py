import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msvcl.config import BIRADS_TABLE, FRACTIONS, preset
from msvcl.data import (BIRADS_LABELS, ManifestError, PlacementError, birads_label, expected_counts,
                        generate_phantom, load_external_image, nipple_distance_mm, plan_dataset,
                        render_view, resample, split_fraction, write_png16)
from msvcl.data.io import estimate_geometry
from msvcl.data.phantom import suspicion_score


def nipple_distances(sample):
    nx, ny = sample.nipple_px
    return {b.lesion_id: float(np.hypot(b.center[0] - nx, b.center[1] - ny)) * sample.pixel_spacing
            for b in sample.annotations}


def test_phantom_is_deterministic():
    a = generate_phantom(7, "dense", 1)
    b = generate_phantom(7, "dense", 1)
    assert a == b
    assert len(a.lesions) == 1
    assert generate_phantom(7, "dense", 0).lesions == ()


def test_phantom_density_matches_fraction():
    for seed in range(50):
        for dens in ("dense", "non-dense"):
            ph = generate_phantom(seed, dens, 0)
            assert (ph.fibroglandular_fraction >= 0.5) == (dens == "dense")


def test_birads_labels_follow_the_table():
    ph = generate_phantom(3, "non-dense", 2)
    assert len(ph.lesions) == 2
    for les in ph.lesions:
        s = suspicion_score(les.margin_irregularity, les.contrast)
        row = next(r for r in BIRADS_TABLE if r["lo"] <= s < r["hi"])
        assert les.birads_label == row["label"]


@settings(max_examples=200, deadline=None)
@given(irr=st.floats(0, 1), delta=st.floats(0, 1), contrast=st.floats(0.1, 0.4))
def test_birads_label_is_monotone_in_irregularity(irr, delta, contrast):
    hi = min(1.0, irr + delta)
    assert BIRADS_LABELS.index(birads_label(hi, contrast)) >= BIRADS_LABELS.index(birads_label(irr, contrast))


def test_phantom_rejects_bad_inputs():
    with pytest.raises(ValueError):
        generate_phantom(0, "dense", -1)
    with pytest.raises(ValueError):
        generate_phantom(0, "fatty", 1)
    with pytest.raises(PlacementError):
        generate_phantom(0, "dense", 60, retry_budget=200)


def test_render_views_share_lesions_and_geometry():
    ph = generate_phantom(11, "dense", 2)
    cc, mlo = render_view(ph, "CC"), render_view(ph, "MLO")
    assert {b.lesion_id for b in cc.annotations} == {b.lesion_id for b in mlo.annotations} == {0, 1}
    for s in (cc, mlo):
        h, w = s.image.shape
        assert all(b.within(h, w) for b in s.annotations)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert (render_view(ph, "CC").image == cc.image).all()
    assert render_view(generate_phantom(11, "dense", 0), "CC").annotations == []


def test_mlo_has_pectoral_wedge_cc_does_not():
    from msvcl.data.render import render_raw
    ph = generate_phantom(5, "non-dense", 0)
    cc, _, _ = render_raw(ph, "CC", 256, 0.5)
    mlo, _, _ = render_raw(ph, "MLO", 256, 0.5)
    # the pectoral muscle is the brightest tissue near the chest wall corner
    cc_corner = cc[:40, :40].mean() + cc[:40, -40:].mean()
    mlo_corner = mlo[:40, :40].mean() + mlo[:40, -40:].mean()
    assert mlo_corner > cc_corner


def test_lesion_forty_mm_from_nipple():
    base = generate_phantom(7, "dense", 1)
    lesion = dataclasses.replace(base.lesions[0], center_3d=(base.depth - 40.0, 0.0, 0.0))
    ph = dataclasses.replace(base, lesions=(lesion,))
    for view in ("CC", "MLO"):
        assert nipple_distance_mm(lesion.center_3d, ph.nipple_pos_3d, view) == pytest.approx(40.0)
        d = nipple_distances(render_view(ph, view))[lesion.lesion_id]
        assert 36.0 <= d <= 44.0


def test_cross_view_nipple_distance_on_100_phantoms():
    worst = 0.0
    for seed in range(100):
        ph = generate_phantom(seed, "dense" if seed % 2 else "non-dense", 1 + seed % 2)
        cc, mlo = nipple_distances(render_view(ph, "CC")), nipple_distances(render_view(ph, "MLO"))
        for lid in cc:
            worst = max(worst, abs(cc[lid] - mlo[lid]) / max(cc[lid], mlo[lid]))
    assert worst <= 0.10


def test_manifest_counts():
    desk = preset("desk")["data"]
    assert len(plan_dataset(desk, 0)) == 3 * (100 + 800 + 60 + 10 + 10) + 3 * 10
    full = preset("full")["data"]
    manifest = plan_dataset(full, 0)
    assert len(manifest) == 29_700


def test_manifest_split_hygiene():
    manifest = plan_dataset(preset("desk")["data"], 0)
    owner = {}
    for e in manifest.entries:
        if e.domain in manifest.unseen_domains:
            assert e.split == "test"
        if e.split in ("train", "val", "test"):
            assert owner.setdefault((e.domain, e.patient_id), e.split) == e.split
    manifest.validate(expected_counts(preset("desk")["data"]))


def test_unseen_domain_outside_test_is_rejected():
    data = dict(preset("desk")["data"], unseen_counts={"train": 2, "test": 10})
    with pytest.raises(ManifestError):
        plan_dataset(data, 0)
    manifest = plan_dataset(preset("desk")["data"], 0)
    bad = dataclasses.replace(manifest.entries[-1], split="train")
    with pytest.raises(ManifestError):
        dataclasses.replace(manifest, entries=manifest.entries[:-1] + [bad]).validate()


def test_split_fraction_counts_and_nesting():
    manifest = plan_dataset(preset("full")["data"], 0)
    half = split_fraction(manifest, 0.5, 0)
    for dom in manifest.seen_domains:
        assert len(half.select(split="train", domain=dom)) == 300
        assert len(half.select(split="val", domain=dom)) == 100
    assert split_fraction(manifest, 1.0, 0) is manifest
    desk = plan_dataset(preset("desk")["data"], 0)
    subsets = [{e.image for e in split_fraction(desk, f, 1).select(split="train")} for f in FRACTIONS]
    for small, big in zip(subsets, subsets[1:]):
        assert small <= big
    with pytest.raises(ValueError):
        split_fraction(desk, 0.3, 0)


def test_resample_arithmetic():
    img = np.random.default_rng(0).random((1000, 800)).astype(np.float32)
    assert resample(img, 0.2, 0.1).shape == (2000, 1600)
    assert resample(img, 0.1, 0.1).shape == (1000, 800)


def test_load_external_image(tmp_path):
    ph = generate_phantom(2, "dense", 1)
    s = render_view(ph, "CC")
    path = tmp_path / "ext.png"
    write_png16(s.image, path)
    out = load_external_image(path, 0.2)
    assert out.image.shape == (512, 512)
    assert out.pixel_spacing == 0.1
    assert out.breast_found
    assert 0.0 <= out.image.min() and out.image.max() <= 1.0
    # heuristic nipple lands near the true one, in resampled pixels
    assert np.hypot(out.nipple_px[0] - 2 * s.nipple_px[0], out.nipple_px[1] - 2 * s.nipple_px[1]) < 20

    blank = tmp_path / "blank.png"
    write_png16(np.zeros((64, 64)), blank)
    assert not load_external_image(blank, 0.1).breast_found
    with pytest.raises(ValueError):
        load_external_image(path, 0.0)
    with pytest.raises(OSError):
        load_external_image(tmp_path / "missing.png", 0.1)


def test_estimate_geometry_blank():
    assert estimate_geometry(np.zeros((10, 10))) == (None, None, False)


def test_dataset_build_is_deterministic(tiny_cfg, tiny_manifest, tmp_path):
    from msvcl.data import build_dataset
    from msvcl.styles import style_table
    again = build_dataset(tiny_cfg["data"], style_table(tiny_cfg["styles"]["table"]), tiny_cfg["seed"],
                          tmp_path / "again")
    assert again.entries == tiny_manifest.entries
    for e in tiny_manifest.entries[::25]:
        assert (again.load(e).image == tiny_manifest.load(e).image).all()
