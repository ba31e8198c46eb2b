import json

import pytest

from msvcl.config import FRACTIONS
from msvcl.evaluation.runner import (Experiment, GridError, check_nested_fractions, plot_curves, run_ablation,
                                     run_data_hungry, write_grid_report)


@pytest.fixture(scope="module")
def exp(tiny_cfg, tiny_manifest, tmp_path_factory):
    return Experiment(tiny_cfg, tmp_path_factory.mktemp("run"), manifest=tiny_manifest)


def test_cell_is_cached_and_recomputed_on_hash_mismatch(exp):
    first = exp.cell("density", "random", 0)
    key = exp.cell_hash("density", "random", 0, 1.0)
    path = exp.run_dir / "cells" / f"{key}.json"
    assert first["config_hash"] == key and path.exists()
    stamp = path.stat().st_mtime_ns
    assert exp.cell("density", "random", 0) == first
    assert path.stat().st_mtime_ns == stamp

    stale = dict(first, config_hash="stale", unseen_avg=-1.0)
    path.write_text(json.dumps(stale))
    again = exp.cell("density", "random", 0)
    assert again["config_hash"] == key and again["unseen_avg"] != -1.0
    assert json.loads(path.read_text())["config_hash"] == key


def test_cell_fields(exp):
    c = exp.cell("density", "random", 0)
    assert set(c["per_style"]) == set(exp.seen) | set(exp.unseen)
    assert 0.0 <= c["seen_avg"] <= 100.0
    assert c["unseen"] == list(exp.unseen)


def test_unknown_axes_are_rejected(exp):
    with pytest.raises(GridError):
        run_ablation(exp, sources=["mscl+"], seeds=[0], tasks=["density"])
    with pytest.raises(GridError):
        run_ablation(exp, sources=["random"], seeds=[0], tasks=["segmentation"])
    with pytest.raises(GridError):
        run_ablation(exp, sources=["random"], seeds=[0], tasks=["density"], fractions=[0.3])
    with pytest.raises(GridError):
        exp.evaluate_cell("shape", "random", 0)
    with pytest.raises(GridError):
        exp.pretrained("msvcl+", 0)


def test_hungry_full_fraction_equals_ablation_cell(exp, tmp_path):
    grid = run_ablation(exp, sources=["random"], seeds=[0], tasks=["detection"])
    curves = run_data_hungry(exp, fractions=[0.5, 1.0], methods=["random"], seeds=[0])
    full = curves["curves"]["random"][-1]
    assert full["fraction"] == 1.0
    (cell,) = grid.cells
    assert full["cell_hashes"] == [cell["config_hash"]]
    assert full["unseen_avg"] == cell["unseen_avg"] and full["seen_avg"] == cell["seen_avg"]
    half = curves["curves"]["random"][0]
    assert half["n_train_seed0"] < full["n_train_seed0"]

    png = plot_curves(curves, tmp_path / "curve.png")
    assert png.stat().st_size > 0
    js, md = write_grid_report(grid, tmp_path, "abl")
    assert json.loads(js.read_text())["reports"]["detection"]["random"]
    assert "Seen avg." in md.read_text()


def test_nested_fractions(tiny_manifest):
    for seed in range(3):
        check_nested_fractions(tiny_manifest, FRACTIONS, seed)
