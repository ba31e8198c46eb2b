"""Per-image style pools: pure seen styles plus interior blends of every style pair."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations
from math import comb
from typing import Callable, Mapping, Sequence

import numpy as np

from .parametric import SEEN, StyleParams, blend, transfer

# Interior blend factors; 0 and 1 coincide with the pure styles.
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(11))
INTERIOR_ALPHAS = ALPHA_GRID[1:-1]

TransferFn = Callable[[np.ndarray, str, str, np.random.Generator], np.ndarray]


def pool_size(m: int) -> int:
    """Number of style variants reachable from one image with ``m`` seen styles."""
    if m < 2:
        raise ValueError(f"a style pool needs at least 2 seen styles, got {m}")
    return comb(m, 2) * len(INTERIOR_ALPHAS) + m


@dataclass(frozen=True)
class BlendSpec:
    source_style: str
    target_style: str
    alpha: float

    def __post_init__(self):
        if self.alpha not in ALPHA_GRID:
            raise ValueError(f"alpha {self.alpha} is not on the 0.1-step grid")

    @property
    def pure(self) -> bool:
        return self.source_style == self.target_style

    @property
    def tag(self) -> str:
        if self.pure:
            return self.source_style
        return f"{self.source_style}|{self.target_style}@{self.alpha:.1f}"


def _variants(domains: Sequence[str]) -> list[BlendSpec]:
    out = [BlendSpec(d, d, 0.0) for d in domains]
    for a, b in combinations(domains, 2):
        out.extend(BlendSpec(a, b, alpha) for alpha in INTERIOR_ALPHAS)
    return out


@dataclass
class StylePool:
    """All style variants reachable from one source image.

    ``transfer_fn(image, src_domain, dst_domain, rng)`` maps an image between
    styles; the default uses the parametric engine and ``table``.
    ``pixel_scale`` rescales blur widths when images were downsampled
    (0.5 for half-resolution copies).
    """

    domains: tuple[str, ...]
    table: Mapping[str, StyleParams] = field(default_factory=dict)
    transfer_fn: TransferFn | None = None
    pixel_scale: float = 1.0
    variants: list[BlendSpec] = field(init=False)

    def __post_init__(self):
        self.domains = tuple(self.domains)
        if len(self.domains) < 1 or len(set(self.domains)) != len(self.domains):
            raise ValueError(f"invalid pool domains {self.domains}")
        self.variants = _variants(self.domains)

    @property
    def M(self) -> int:
        return len(self.domains)

    @property
    def L(self) -> int:
        return len(self.variants)

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.L))

    def draw_distinct(self, rng: np.random.Generator) -> tuple[int, int]:
        if self.L < 2:
            return 0, 0
        i, j = rng.choice(self.L, size=2, replace=False)
        return int(i), int(j)

    def _to(self, image, src: str, dst: str, rng) -> np.ndarray:
        if src == dst:
            return np.asarray(image, dtype=np.float32)
        if self.transfer_fn is not None:
            return self.transfer_fn(image, src, dst, rng)
        return transfer(image, self._params(src), self._params(dst), rng)

    def _params(self, domain: str) -> StyleParams:
        p = self.table[domain]
        if self.pixel_scale == 1.0:
            return p
        return replace(p, blur_sigma_px=p.blur_sigma_px * self.pixel_scale)

    def render(self, image: np.ndarray, source_domain: str, index: int,
               rng: np.random.Generator) -> np.ndarray:
        spec = self.variants[index]
        first = self._to(image, source_domain, spec.source_style, rng)
        if spec.pure:
            return first
        second = self._to(image, source_domain, spec.target_style, rng)
        return np.clip(blend(first, second, spec.alpha), 0.0, 1.0).astype(np.float32)


def sample_variant(image: np.ndarray, source_domain: str, pool: StylePool,
                   rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Draw one variant uniformly from ``pool`` and render ``image`` in it."""
    if source_domain not in SEEN or source_domain not in pool.domains:
        raise ValueError(f"source domain {source_domain!r} is not a seen domain of this pool")
    index = pool.draw(rng)
    return pool.render(image, source_domain, index, rng), pool.variants[index].tag
