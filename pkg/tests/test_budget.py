# tests/test_budget.py
import unittest
from typing import Optional

from hypothesis import given, settings
from hypothesis import strategies as st

from layeranat.budget import BUDGET_RATIOS, allocate_budget, budget_group
from layeranat.schemas import CATEGORY_RANK, Category, ImportanceRecord, RecoveryCurve

DEGRADATION = {
    Category.anti: -1.0,
    Category.redundant: 5.0,
    Category.minor: 20.0,
    Category.important: 50.0,
    Category.critical: 500.0,
}


def record(layer: int, category: Category, boundary: bool = False) -> ImportanceRecord:
    d = DEGRADATION[category]
    return ImportanceRecord(
        layer=layer,
        ppl_baseline=10.0,
        ppl_after=10.0 * (1 + d / 100),
        degradation_pct=d,
        category=category,
        boundary=boundary,
    )


def curve(
    layer: int,
    steps_to_2x: Optional[int] = 0,
    steps_to_1_5x: Optional[int] = 10,
    steps_to_1_1x: Optional[int] = 50,
    improved: bool = False,
) -> RecoveryCurve:
    return RecoveryCurve(
        layer=layer,
        noise_scale=0.5,
        ppl_baseline=10.0,
        ppl_after_noise=40.0,
        samples=((0, 40.0),),
        steps_to_2x=steps_to_2x,
        steps_to_1_5x=steps_to_1_5x,
        steps_to_1_1x=steps_to_1_1x,
        final_ppl=9.0 if improved else 10.5,
        improved_below_baseline=improved,
    )


def reference_map() -> tuple[list[ImportanceRecord], list[RecoveryCurve]]:
    """A 30-layer map: 2 boundary, 2 anti, 5 instant-redundant, 11 minor, 4 fast-critical, 6 slow-critical."""
    groups = (
        ["boundary"]
        + ["anti"] * 2
        + ["instant-redundant"] * 5
        + ["minor"] * 11
        + ["fast-critical"] * 4
        + ["slow-critical"] * 6
        + ["boundary"]
    )
    records, curves = [], []
    for layer, group in enumerate(groups):
        if group == "boundary":
            records.append(record(layer, Category.redundant, boundary=True))
            curves.append(curve(layer, 0, 0, 5))
        elif group == "anti":
            records.append(record(layer, Category.anti))
            curves.append(curve(layer, 0, 0, 0, improved=True))
        elif group == "instant-redundant":
            records.append(record(layer, Category.redundant))
            curves.append(curve(layer, 0, 0, 10))
        elif group == "minor":
            records.append(record(layer, Category.minor))
            curves.append(curve(layer, 0, 20, 60))
        elif group == "fast-critical":
            records.append(record(layer, Category.critical))
            curves.append(curve(layer, 0, 10, 40))
        else:
            records.append(record(layer, Category.critical))
            curves.append(curve(layer, 30, 120, None))
    return records, curves


class TestBudgetGroups(unittest.TestCase):
    def test_anti_wins_regardless_of_recovery(self):
        self.assertEqual(budget_group(record(3, Category.anti), curve(3, 50, 150, None)), "anti")
        self.assertEqual(budget_group(record(3, Category.critical), curve(3, improved=True)), "anti")

    def test_boundary_precedes_category(self):
        self.assertEqual(budget_group(record(0, Category.critical, boundary=True), curve(0, 50, 100, None)), "boundary")

    def test_slow_redundant_counts_as_minor(self):
        self.assertEqual(budget_group(record(4, Category.redundant), curve(4, 0, 5, 11)), "minor")
        self.assertEqual(budget_group(record(4, Category.redundant), curve(4, 0, 5, None)), "minor")

    def test_critical_split_by_recovery_speed(self):
        self.assertEqual(budget_group(record(5, Category.important), curve(5, 0, 10, None)), "fast-critical")
        self.assertEqual(budget_group(record(5, Category.critical), curve(5, 0, 11, None)), "slow-critical")


class TestAllocateBudget(unittest.TestCase):
    def test_reference_map_totals_2760(self):
        records, curves = reference_map()
        allocation = allocate_budget(records, curves, 200)
        self.assertEqual(allocation.total_steps, 2760)
        self.assertEqual(allocation.uniform_total, 6000)
        self.assertAlmostEqual(allocation.reduction_pct, 54.0)
        self.assertEqual(allocation.steps[0], 30)
        self.assertEqual(allocation.steps[1], 0)
        self.assertEqual(allocation.groups[-1], "boundary")

    def test_all_slow_critical_is_uniform(self):
        records = [record(i, Category.critical) for i in range(30)]
        curves = [curve(i, 50, 100, None) for i in range(30)]
        allocation = allocate_budget(records, curves, 200)
        self.assertEqual(allocation.total_steps, 30 * 200)
        self.assertEqual(allocation.reduction_pct, 0.0)

    def test_layer_sets_must_match(self):
        records, curves = reference_map()
        with self.assertRaisesRegex(ValueError, r"layers \[29\]"):
            allocate_budget(records, curves[:-1], 200)
        with self.assertRaises(ValueError):
            allocate_budget(records, curves, 0)

    def test_ratios_are_ordered(self):
        order = ["anti", "instant-redundant", "boundary", "minor", "fast-critical", "slow-critical"]
        self.assertEqual(sorted(BUDGET_RATIOS, key=BUDGET_RATIOS.get), order)

    @settings(max_examples=200, deadline=None)
    @given(
        categories=st.lists(st.sampled_from(list(Category)), min_size=3, max_size=12),
        speeds=st.data(),
        upgrade=st.data(),
    )
    def test_upgrading_a_category_never_lowers_the_total(self, categories, speeds, upgrade):
        n = len(categories)
        last = n - 1
        curves = []
        for layer in range(n):
            s15 = speeds.draw(st.one_of(st.none(), st.integers(0, 40)))
            s11 = None if s15 is None else speeds.draw(st.one_of(st.none(), st.integers(s15, 60)))
            curves.append(curve(layer, 0, s15, s11))
        records = [record(i, c, boundary=i in (0, last)) for i, c in enumerate(categories)]
        before = allocate_budget(records, curves, 200).total_steps

        layer = upgrade.draw(st.integers(0, last))
        ranks = list(Category)
        rank = CATEGORY_RANK[categories[layer]]
        if rank == len(ranks) - 1:
            return
        higher = upgrade.draw(st.sampled_from(ranks[rank + 1 :]))
        records[layer] = record(layer, higher, boundary=layer in (0, last))
        after = allocate_budget(records, curves, 200).total_steps
        self.assertGreaterEqual(after, before)


if __name__ == "__main__":
    unittest.main()
