# layeranat/budget.py
import logging
from typing import Sequence

from .schemas import BudgetAllocation, Category, ImportanceRecord, RecoveryCurve

logger = logging.getLogger(__name__)

# A 30-layer map with 2 boundary, 2 anti, 5 instant, 11 minor, 4 fast and
# 6 slow layers totals 2,760 steps at a 200-step maximum.
BUDGET_RATIOS = {
    "anti": 0.0,
    "instant-redundant": 0.01,
    "boundary": 0.15,
    "minor": 0.35,
    "fast-critical": 0.90,
    "slow-critical": 1.00,
}

# Steps at or below this count as immediate recovery
FAST_RECOVERY_STEPS = 10


def _fast(steps: int | None) -> bool:
    return steps is not None and steps <= FAST_RECOVERY_STEPS


def budget_group(record: ImportanceRecord, curve: RecoveryCurve) -> str:
    """
    Assigns a layer to a budget group. First match wins:

    anti (negative degradation or recovery below baseline), boundary (first
    or last layer), instant-redundant (redundant, back under 1.1x within 10
    steps), minor (minor, or redundant but slower), fast-critical
    (important/critical, back under 1.5x within 10 steps), slow-critical.
    """
    if record.category == Category.anti or curve.improved_below_baseline:
        return "anti"
    if record.boundary or curve.boundary:
        return "boundary"
    if record.category == Category.redundant and _fast(curve.steps_to_1_1x):
        return "instant-redundant"
    if record.category in (Category.redundant, Category.minor):
        return "minor"
    if _fast(curve.steps_to_1_5x):
        return "fast-critical"
    return "slow-critical"


def allocate_budget(
    importance: Sequence[ImportanceRecord], recovery: Sequence[RecoveryCurve], b_max: int
) -> BudgetAllocation:
    """
    Per-layer training budget from importance and recovery data.

    Args:
        importance (Sequence[ImportanceRecord]): One ablation record per layer.
        recovery (Sequence[RecoveryCurve]): One recovery curve per layer.
        b_max (int): Steps given to a slow-critical layer.

    Returns:
        BudgetAllocation: Ratios, groups and steps in layer order, with the
            total against a uniform allocation of b_max per layer.

    Raises:
        ValueError: If the two inputs do not cover the same layers or b_max < 1.
    """
    if b_max < 1:
        raise ValueError(f"b_max must be positive, got {b_max}")
    by_layer = {record.layer: record for record in importance}
    curves = {curve.layer: curve for curve in recovery}
    if not by_layer:
        raise ValueError("allocate_budget: no importance records")
    if set(by_layer) != set(curves):
        missing = sorted(set(by_layer) ^ set(curves))
        raise ValueError(f"allocate_budget: layers {missing} lack either an importance record or a recovery curve")

    layers = sorted(by_layer)
    groups = tuple(budget_group(by_layer[layer], curves[layer]) for layer in layers)
    ratios = tuple(BUDGET_RATIOS[group] for group in groups)
    steps = tuple(int(round(ratio * b_max)) for ratio in ratios)
    total = sum(steps)
    uniform_total = len(layers) * b_max
    allocation = BudgetAllocation(
        ratios=ratios,
        groups=groups,
        steps=steps,
        b_max=b_max,
        total_steps=total,
        uniform_total=uniform_total,
        reduction_pct=(1.0 - total / uniform_total) * 100.0,
    )
    logger.info(f"Budget: {total} steps vs {uniform_total} uniform ({allocation.reduction_pct:.1f}% reduction)")
    return allocation
