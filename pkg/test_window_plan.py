#!/usr/bin/env python3
"""
Tests for window plan construction, budgets and relative cost.
"""

import random
import unittest
from collections import Counter
from fractions import Fraction

from window_plan import (
    ComparabilityError,
    PlanError,
    Strategy,
    WindowPlan,
    budget_ratio,
    build_plan,
    format_fraction,
    layer_bases,
    relative_cost,
    required_modulus,
    round_half_up,
    total_budget,
)


class TestBuildPlan(unittest.TestCase):
    """Window matrices per strategy."""

    def test_mswa_matrix(self):
        """Both ladders compose into the shallow-to-deep doubling pattern."""
        plan = build_plan(Strategy.MSWA, 4, 4, 16)
        self.assertEqual([plan.row(i) for i in range(4)],
                         [[1, 2, 4, 8], [2, 4, 8, 16], [4, 8, 16, 32], [8, 16, 32, 64]])

    def test_mswa_closed_form(self):
        """Entry (i, j) is w * 2^(a+b-4) for layer group a and head group b."""
        plan = build_plan(Strategy.MSWA, 8, 8, 64)
        for i in range(8):
            for j in range(8):
                a, b = i * 4 // 8, j * 4 // 8
                self.assertEqual(plan.sizes[i][j] * 16, 64 * 2 ** (a + b))

    def test_uniform(self):
        """Uniform fills every entry with the base window."""
        plan = build_plan(Strategy.UNIFORM, 12, 8, 128)
        self.assertTrue(all(w == 128 for row in plan.sizes for w in row))
        self.assertEqual(total_budget(plan).total_windows, 12288)
        self.assertEqual(plan.describe(), 'w=128')

    def test_head_only(self):
        """mswa_h varies windows across heads, identically in every layer."""
        plan = build_plan(Strategy.MSWA_H, 4, 4, 16)
        for i in range(4):
            self.assertEqual(plan.row(i), [4, 8, 16, 32])

    def test_layer_only(self):
        """mswa_l varies windows across layers, identically for every head."""
        plan = build_plan(Strategy.MSWA_L, 4, 4, 16)
        self.assertEqual([plan.row(i) for i in range(4)], [[4] * 4, [8] * 4, [16] * 4, [32] * 4])

    def test_reversed_layers(self):
        """Reversed layer ladder puts the largest windows in shallow layers."""
        plan = build_plan(Strategy.MSWA_REVERSED_LAYERS, 4, 4, 16)
        self.assertEqual(plan.row(0), [8, 16, 32, 64])
        self.assertEqual(plan.row(3), [1, 2, 4, 8])

    def test_arithmetic(self):
        """Arithmetic ladder applies at both levels."""
        plan = build_plan(Strategy.MSWA_ARITHMETIC, 4, 4, 128)
        self.assertEqual(plan.row(0), [32, 48, 64, 80])
        self.assertEqual(plan.row(2), [64, 96, 128, 160])

    def test_groups_span_several_layers(self):
        """With l=8 each layer group covers two consecutive layers."""
        plan = build_plan(Strategy.MSWA_L, 8, 4, 16)
        self.assertEqual(plan.row(0), plan.row(1))
        self.assertEqual(plan.row(6), [32] * 4)

    def test_heads_not_divisible(self):
        """Head count must split into four groups."""
        with self.assertRaises(PlanError) as ctx:
            build_plan(Strategy.MSWA, 4, 6, 16)
        self.assertIn('heads=6', str(ctx.exception))
        self.assertIn('4', str(ctx.exception))

    def test_layers_not_divisible(self):
        """Layer count must split into four groups for layer ladders."""
        with self.assertRaises(PlanError):
            build_plan(Strategy.MSWA_L, 6, 4, 16)
        build_plan(Strategy.MSWA_H, 6, 4, 16)

    def test_base_window_modulus(self):
        """The base window must be a multiple of the required modulus."""
        with self.assertRaises(PlanError) as ctx:
            build_plan(Strategy.MSWA, 4, 4, 24)
        self.assertIn('16', str(ctx.exception))
        build_plan(Strategy.MSWA_H, 4, 4, 24)

    def test_required_modulus(self):
        """Composed ladder denominators determine the modulus."""
        self.assertEqual(required_modulus(Strategy.UNIFORM), 1)
        self.assertEqual(required_modulus(Strategy.MSWA_H), 4)
        self.assertEqual(required_modulus(Strategy.MSWA_L), 4)
        self.assertEqual(required_modulus(Strategy.MSWA), 16)
        self.assertEqual(required_modulus(Strategy.MSWA_ARITHMETIC), 16)

    def test_layer_bases(self):
        """Per-layer bases follow the layer ladder only."""
        plan = build_plan(Strategy.MSWA, 4, 4, 16)
        self.assertEqual(layer_bases(plan), [4, 8, 16, 32])


class TestBudget(unittest.TestCase):
    """Total budgets and ratios."""

    def test_mswa_budget(self):
        """The 4x4 MSWA plan uses 225/256 of the uniform budget."""
        budget = total_budget(build_plan(Strategy.MSWA, 4, 4, 16))
        self.assertEqual(budget.total_windows, 225)
        self.assertEqual(budget.ratio_to_uniform, Fraction(225, 256))
        self.assertEqual(format_fraction(budget.ratio_to_uniform), '225/256')

    def test_head_only_budget(self):
        """Head variation alone uses 15/16 of the uniform budget."""
        budget = total_budget(build_plan(Strategy.MSWA_H, 4, 4, 16))
        self.assertEqual(budget.total_windows, 240)
        self.assertEqual(budget.ratio_to_uniform, Fraction(15, 16))

    def test_uniform_ratio(self):
        """Uniform plans have ratio one."""
        self.assertEqual(total_budget(build_plan(Strategy.UNIFORM, 3, 5, 7)).ratio_to_uniform, Fraction(1))

    def test_ratio_scale_invariant(self):
        """Ratio does not depend on l, h or w when the strategy is fixed."""
        small = total_budget(build_plan(Strategy.MSWA, 4, 4, 16)).ratio_to_uniform
        large = total_budget(build_plan(Strategy.MSWA, 12, 8, 128)).ratio_to_uniform
        self.assertEqual(small, large)

    def test_relative_cost_rows(self):
        """SWA and MSWA at several bases against MSWA at 128."""
        reference = build_plan(Strategy.MSWA, 12, 8, 128)
        expected = {
            (Strategy.UNIFORM, 512): 4.55, (Strategy.MSWA, 512): 4.00,
            (Strategy.UNIFORM, 256): 2.28, (Strategy.MSWA, 256): 2.00,
            (Strategy.UNIFORM, 128): 1.14, (Strategy.MSWA, 128): 1.00,
            (Strategy.UNIFORM, 64): 0.57, (Strategy.MSWA, 64): 0.50,
        }
        for (strategy, base), value in expected.items():
            with self.subTest(strategy=strategy.value, base=base):
                self.assertEqual(relative_cost(build_plan(strategy, 12, 8, base), reference), value)

    def test_mismatched_shapes(self):
        """Plans of different shape cannot be compared."""
        with self.assertRaises(ComparabilityError):
            budget_ratio(build_plan(Strategy.MSWA, 4, 4, 16), build_plan(Strategy.MSWA, 8, 4, 16))

    def test_round_half_up(self):
        """Ties round away from zero."""
        self.assertEqual(round_half_up(Fraction(1, 8)), 0.13)
        self.assertEqual(round_half_up(Fraction(5, 8), places=1), 0.6)


class TestBudgetProperties(unittest.TestCase):
    """Budget identities and plan orderings over many shapes."""

    def setUp(self):
        rng = random.Random(20)
        self.shapes = [(4 * rng.randint(1, 6), 4 * rng.randint(1, 4), 16 * rng.randint(1, 32)) for _ in range(20)]

    def test_exact_ratios(self):
        """Ratios are exactly 15/16 for one ladder and 225/256 for both."""
        expected = {Strategy.MSWA_H: Fraction(15, 16), Strategy.MSWA_L: Fraction(15, 16),
                    Strategy.MSWA: Fraction(225, 256), Strategy.MSWA_REVERSED_LAYERS: Fraction(225, 256)}
        for layers, heads, base in self.shapes:
            for strategy, ratio in expected.items():
                with self.subTest(l=layers, h=heads, w=base, strategy=strategy.value):
                    budget = total_budget(build_plan(strategy, layers, heads, base))
                    self.assertEqual(budget.ratio_to_uniform, ratio)
                    self.assertEqual(budget.total_windows, ratio * layers * heads * base)

    def test_reversed_matches_mswa_budget(self):
        """Reversing the layer ladder moves windows between layers without changing the total."""
        for layers, heads, base in self.shapes:
            with self.subTest(l=layers, h=heads, w=base):
                mswa = build_plan(Strategy.MSWA, layers, heads, base)
                reversed_plan = build_plan(Strategy.MSWA_REVERSED_LAYERS, layers, heads, base)
                self.assertEqual(total_budget(reversed_plan).total_windows, total_budget(mswa).total_windows)
                for i in range(layers):
                    self.assertEqual(reversed_plan.row(i), mswa.row(layers - 1 - i))

    def test_mswa_is_monotone(self):
        """Windows never shrink going deeper or toward later heads."""
        for layers, heads, base in self.shapes:
            with self.subTest(l=layers, h=heads, w=base):
                sizes = build_plan(Strategy.MSWA, layers, heads, base).sizes
                for i in range(layers):
                    for j in range(heads):
                        if i + 1 < layers:
                            self.assertLessEqual(sizes[i][j], sizes[i + 1][j])
                        if j + 1 < heads:
                            self.assertLessEqual(sizes[i][j], sizes[i][j + 1])

    def test_layer_groups_hold_the_same_multiset(self):
        """Each layer group of MSWA holds the head ladder scaled by its own rung."""
        for layers, heads, base in self.shapes:
            with self.subTest(l=layers, h=heads, w=base):
                plan = build_plan(Strategy.MSWA, layers, heads, base)
                per_group = layers // 4
                first = sorted(plan.row(0))
                for group in range(4):
                    for i in range(group * per_group, (group + 1) * per_group):
                        self.assertEqual(sorted(plan.row(i)), [w * 2 ** group for w in first])
                        self.assertEqual(sorted(Counter(plan.row(i)).values()), [heads // 4] * 4)


class TestPlanText(unittest.TestCase):
    """Tabular plan format."""

    def test_roundtrip(self):
        """Text output parses back into an equal plan."""
        plan = build_plan(Strategy.MSWA_REVERSED_LAYERS, 4, 8, 32)
        self.assertEqual(WindowPlan.from_text(plan.to_text()), plan)

    def test_header(self):
        """The first line carries l, h, w and the strategy."""
        text = build_plan(Strategy.MSWA, 4, 4, 16).to_text()
        self.assertEqual(text.splitlines()[0], '4 4 16 mswa')
        self.assertEqual(text.splitlines()[1], '1 2 4 8')

    def test_malformed_text(self):
        """Bad headers, ragged rows and zero windows are rejected."""
        for text in ('', '4 4 16', '2 2 4 uniform\n4 4\n4', '1 2 4 uniform\n0 4', '1 1 4 nope\n4'):
            with self.subTest(text=text):
                with self.assertRaises(PlanError):
                    WindowPlan.from_text(text)

    def test_plan_is_frozen(self):
        """Plans cannot be modified after construction."""
        plan = build_plan(Strategy.UNIFORM, 1, 1, 4)
        with self.assertRaises(Exception):
            plan.base_window = 8


if __name__ == "__main__":
    unittest.main(verbosity=2)
