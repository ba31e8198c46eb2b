"""Seen/unseen aggregation and table rendering."""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

TASK_TITLES = {
    "detection": "Mass detection (mAP %)",
    "matching": "Mass matching (acc %)",
    "birads": "BI-RADS rating (acc %)",
    "density": "Breast density (acc %)",
}


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def fmt(mean: float, std: float | None = None) -> str:
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    return f"{mean:.1f}" if std is None else f"{mean:.1f}±{std:.1f}"


@dataclass(frozen=True)
class DomainReport:
    """Per-style values (percent) with seen/unseen means and sample std (n-1)."""

    per_style: dict[str, float]
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    seen_avg: float
    seen_std: float
    unseen_avg: float
    unseen_std: float

    @property
    def seen_text(self) -> str:
        return fmt(self.seen_avg, self.seen_std)

    @property
    def unseen_text(self) -> str:
        return fmt(self.unseen_avg, self.unseen_std)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["seen"], d["unseen"] = list(self.seen), list(self.unseen)
        d["seen_text"], d["unseen_text"] = self.seen_text, self.unseen_text
        return d


def aggregate(per_style: Mapping[str, float], seen: Sequence[str], unseen: Sequence[str]) -> DomainReport:
    """Group means and sample standard deviations over styles.

    Every listed style must be present; styles absent from both groups are
    ignored.
    """
    missing = [s for s in list(seen) + list(unseen) if s not in per_style]
    if missing:
        raise KeyError(f"no metric value for style(s) {missing}")
    s_mean, s_std = _mean_std([float(per_style[s]) for s in seen])
    u_mean, u_std = _mean_std([float(per_style[s]) for s in unseen])
    values = {s: float(per_style[s]) for s in list(seen) + list(unseen)}
    return DomainReport(values, tuple(seen), tuple(unseen), s_mean, s_std, u_mean, u_std)


def markdown_table(title: str, rows: Mapping[str, DomainReport]) -> str:
    """One row per pretraining source, columns per style plus the two averages."""
    if not rows:
        return f"### {title}\n\n(no results)\n"
    first = next(iter(rows.values()))
    seen, unseen = first.seen, first.unseen
    head = (["Pretraining"] + [f"Style {s}" for s in seen] + ["Seen avg."]
            + [f"Style {s}" for s in unseen] + ["Unseen avg."])
    lines = [f"### {title}", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, rep in rows.items():
        cells = ([name] + [fmt(rep.per_style[s]) for s in seen] + [rep.seen_text]
                 + [fmt(rep.per_style[s]) for s in unseen] + [rep.unseen_text])
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
