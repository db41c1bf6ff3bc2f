# tests/test_weightstats.py
import unittest

import numpy as np

from layeranat.growth import train_uniform
from layeranat.model import fingerprint, perplexity, set_weights
from layeranat.schemas import OptimizerSettings
from layeranat.weightstats import (
    cosine,
    cosine_matrix,
    delta_correlation,
    delta_correlations,
    explained_variance,
    layer_features,
    layer_stack,
    predict_and_replace,
    predict_row,
    predictability,
    predictability_table,
    r_squared,
    ridge_fit,
    structure_summary,
)
from tests.helpers import tiny_data, tiny_model


def synthetic_stack(num_layers: int, width: int, seed: int = 0) -> np.ndarray:
    """W_l[i] = a_i + b_i·l + c_i·sin(lπ/N) + d_i·cos(lπ/N)."""
    rng = np.random.default_rng(seed)
    a, b, c, d = rng.normal(size=(4, width))
    l = np.arange(num_layers, dtype=np.float64)[:, None]
    angle = l * np.pi / num_layers
    return a + b * l + c * np.sin(angle) + d * np.cos(angle)


class TestRidge(unittest.TestCase):
    def test_design_rows(self):
        X = layer_features([0, 2], 4)
        np.testing.assert_allclose(X[0], [0, 0, 0, 1, 1], atol=1e-12)
        np.testing.assert_allclose(X[1], [2, 4, 1, 0, 1], atol=1e-12)

    def test_feature_generated_stack_is_recovered(self):
        stack = synthetic_stack(12, 500)
        for t in range(5, 12):
            predicted = predict_row(stack, t, 12, 1e-6)
            self.assertGreaterEqual(r_squared(predicted, stack[t]), 0.999, msg=f"t={t}")
            self.assertGreaterEqual(cosine(predicted, stack[t]), 0.999, msg=f"t={t}")

    def test_intercept_is_not_penalized(self):
        X = layer_features(range(6), 6)
        Y = np.full((6, 3), 5.0)
        coef = ridge_fit(X, Y, 1e3)
        np.testing.assert_allclose(X @ coef, Y, atol=1e-8)

    def test_negative_lambda_is_rejected(self):
        with self.assertRaises(ValueError):
            ridge_fit(np.ones((2, 5)), np.ones((2, 1)), -1.0)

    def test_anti_correlated_target_gives_negative_r_squared(self):
        v = np.random.default_rng(1).normal(size=200)
        v -= v.mean()
        stack = np.vstack([v] * 4 + [-v])
        predicted = predict_row(stack, 4, 5, 1.0)
        self.assertLess(r_squared(predicted, stack[4]), 0.0)
        self.assertLess(cosine(predicted, stack[4]), 0.0)

    def test_constant_target_has_undefined_r_squared(self):
        self.assertIsNone(r_squared(np.zeros(4), np.ones(4)))


class TestPredictability(unittest.TestCase):
    def setUp(self):
        self.model, _, self.eval_set = tiny_model(num_layers=12)

    def test_model_with_feature_generated_weights(self):
        stack = synthetic_stack(12, 64, seed=3)
        for layer in range(12):
            set_weights(self.model, (layer, "q_proj"), stack[layer].reshape(8, 8).astype(np.float32))
        record = predictability(self.model, "q_proj", 8, k=64, ridge_lambda=1e-6, seed=0)
        self.assertGreaterEqual(record.r_squared, 0.999)
        self.assertEqual(record.sample_size, 64)

    def test_sampling_is_seeded(self):
        a = predictability(self.model, "k_proj", 4, k=20, seed=5)
        b = predictability(self.model, "k_proj", 4, k=20, seed=5)
        self.assertEqual(a, b)

    def test_invalid_targets(self):
        with self.assertRaisesRegex(ValueError, ">= 2"):
            predictability(self.model, "q_proj", 1)
        with self.assertRaisesRegex(ValueError, "out of range"):
            predictability(self.model, "q_proj", 12)
        with self.assertRaisesRegex(ValueError, "unknown component"):
            predictability(self.model, "gate_proj", 4)

    def test_table_covers_components_and_targets(self):
        records = predictability_table(self.model, components=["q_proj", "up_proj"], k=30)
        self.assertEqual(len(records), 2 * 10)
        self.assertEqual({r.target_layer for r in records}, set(range(2, 12)))

    def test_predict_and_replace_restores_model(self):
        before = fingerprint(self.model)
        ppl = predict_and_replace(self.model, [5, 9], self.eval_set)
        self.assertTrue(np.isfinite(ppl))
        self.assertEqual(fingerprint(self.model), before)

    def test_replacing_no_layers_gives_baseline_exactly(self):
        self.assertEqual(predict_and_replace(self.model, [], self.eval_set), perplexity(self.model, self.eval_set))

    def test_replacing_nine_layers_hurts_more_than_one(self):
        model, vocab, eval_set = tiny_model(num_layers=12, seed=1)
        train_uniform(model, tiny_data(vocab), 80, eval_set, optimizer=OptimizerSettings(lr=1e-2), eval_every=80)
        baseline = perplexity(model, eval_set)
        one = predict_and_replace(model, [6], eval_set)
        nine = predict_and_replace(model, range(3, 12), eval_set)
        self.assertGreater(nine, one)
        self.assertGreater(nine, baseline)


class TestLayerStack(unittest.TestCase):
    def test_mixed_widths_use_common_range(self):
        model, _, _ = tiny_model(multipliers=[1, 2, 4])
        rows, notes = layer_stack(model, "up_proj", range(3), None, 0)
        self.assertEqual(rows.shape, (3, 64))
        self.assertIn("widths differ", notes[0])

    def test_oversized_sample_takes_everything(self):
        model, _, _ = tiny_model()
        rows, notes = layer_stack(model, "q_proj", range(3), 1000, 0)
        self.assertEqual(rows.shape, (3, 64))
        self.assertIn("sampled all", notes[0])


class TestDeltaCorrelation(unittest.TestCase):
    def test_independent_layers_give_minus_one_half(self):
        stack = np.random.default_rng(0).normal(size=(6, 20_000))
        rhos = delta_correlations(stack)
        self.assertEqual(len(rhos), 4)
        self.assertAlmostEqual(float(np.mean(rhos)), -0.5, delta=0.02)

    def test_alternating_and_arithmetic_stacks(self):
        v = np.random.default_rng(2).normal(size=100)
        alternating = np.vstack([v * (-1) ** l for l in range(5)])
        arithmetic = np.vstack([v * l + 3.0 for l in range(5)])
        for rho in delta_correlations(alternating):
            self.assertAlmostEqual(rho, -1.0, places=9)
        for rho in delta_correlations(arithmetic):
            self.assertAlmostEqual(rho, 1.0, places=9)

    def test_constant_delta_is_excluded(self):
        v = np.random.default_rng(4).normal(size=50)
        stack = np.vstack([v, v, v + 1.0, 2 * v])
        rhos = delta_correlations(stack)
        self.assertIsNone(rhos[0])

    def test_model_record(self):
        model, _, _ = tiny_model(num_layers=4)
        record = delta_correlation(model, "o_proj")
        self.assertEqual(len(record.gaps), 2)
        self.assertEqual(record.iid_reference, -0.5)
        self.assertEqual(record.element_count, 64)
        two_layer, _, _ = tiny_model(num_layers=2)
        with self.assertRaisesRegex(ValueError, "at least 3 layers"):
            delta_correlation(two_layer, "o_proj")


class TestStructure(unittest.TestCase):
    def test_rank_one_stack_has_one_component(self):
        base = np.random.default_rng(5).normal(size=300)
        stack = np.vstack([s * base for s in (0.5, 1.0, -2.0, 3.0, 0.1)])
        ratios = explained_variance(stack)
        self.assertAlmostEqual(float(ratios[0]), 1.0, delta=1e-6)
        self.assertAlmostEqual(float(ratios.sum()), 1.0, places=9)

    def test_cosine_matrix_is_symmetric_with_unit_diagonal(self):
        stack = np.random.default_rng(6).normal(size=(4, 30))
        matrix = cosine_matrix(stack)
        np.testing.assert_allclose(matrix, matrix.T)
        np.testing.assert_array_equal(np.diag(matrix), 1.0)
        self.assertTrue(np.all(np.abs(matrix) <= 1.0))

    def test_summary_notes_excess_components(self):
        model, _, _ = tiny_model()
        summary = structure_summary(model, "v_proj", k_components=5, sample_size=40)
        self.assertEqual(len(summary.cosine_matrix), 3)
        self.assertEqual(len(summary.explained_variance_ratio), 3)
        self.assertEqual(summary.sample_size, 40)
        self.assertTrue(any("only 3 layers" in note for note in summary.notes))


if __name__ == "__main__":
    unittest.main()
