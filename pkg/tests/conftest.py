import numpy as np
import pytest

from msvcl.config import apply_overrides, preset
from msvcl.data import build_dataset
from msvcl.styles import style_table

TINY = [
    "data.seen_counts={style-transfer: 4, self-supervision: 40, train: 8, val: 4, test: 4}",
    "data.unseen_counts={test: 4}",
    "learning.epochs=2",
    "learning.warm_start=false",
    "pairing.batch_size=8",
    "tasks.detection.epochs=2",
    "tasks.classify.epochs=2",
    "tasks.matching.epochs=2",
    "eval.seeds=[0]",
]


@pytest.fixture(scope="session")
def tiny_cfg():
    return apply_overrides(preset("desk"), TINY)


@pytest.fixture(scope="session")
def tiny_manifest(tiny_cfg, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    return build_dataset(tiny_cfg["data"], style_table(tiny_cfg["styles"]["table"]), tiny_cfg["seed"], root)


@pytest.fixture(scope="session")
def lesion_samples(tiny_manifest):
    """Self-supervision samples of domain A that carry at least one lesion."""
    out = [tiny_manifest.load(e) for e in tiny_manifest.select(split="self-supervision", domain="A")]
    return [s for s in out if s.annotations]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_overrides():
    return list(TINY)
