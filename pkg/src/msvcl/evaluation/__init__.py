"""Metrics and seen/unseen aggregation.

The ablation grid and data-hungry sweep live in :mod:`msvcl.evaluation.runner`,
which sits above :mod:`msvcl.tasks` and is not imported here.
"""

from .metrics import accuracy, average_precision, greedy_claims, pr_curve
from .report import DomainReport, aggregate, markdown_table

__all__ = [
    "DomainReport", "accuracy", "aggregate", "average_precision", "greedy_claims", "markdown_table",
    "pr_curve",
]
