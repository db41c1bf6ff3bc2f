# tests/test_model.py
import unittest

import numpy as np
from pydantic import ValidationError

from layeranat import tensor as T
from layeranat.cache import ppl_cache
from layeranat.corpus import EvalSet, build_vocab
from layeranat.model import (
    ComponentId,
    build_model,
    clone,
    fingerprint,
    fit_to_shape,
    generate,
    get_weights,
    growth_layers,
    param_count,
    perplexity,
    set_weights,
    spec_param_count,
    uniform_twin,
)
from layeranat.schemas import LayerRole, LayerSpec, ModelSpec
from tests.helpers import SENTENCES, tiny_model, tiny_spec


class TestBuild(unittest.TestCase):
    def test_toy_parameter_count(self):
        """d=4, V=8, block 4, one layer of multiplier 1: 32 + 16 + 112 + 8 + 32."""
        vocab = build_vocab("a b c d")
        spec = tiny_spec(len(vocab), num_layers=1, model_dim=4, head_count=2, block_size=4)
        model = build_model(spec, seed=0, vocab=vocab)
        self.assertEqual(param_count(model), 200)
        self.assertEqual(spec_param_count(spec), 200)

    def test_heterogeneous_widths(self):
        model, _, _ = tiny_model(multipliers=[1, 2, 4])
        self.assertEqual(get_weights(model, (2, "up_proj")).shape, (8, 32))
        self.assertEqual(get_weights(model, (1, "down_proj")).shape, (16, 8))
        self.assertEqual(param_count(model), spec_param_count(model.spec))

    def test_same_seed_same_weights(self):
        a, _, _ = tiny_model(seed=7)
        b, _, _ = tiny_model(seed=7)
        c, _, _ = tiny_model(seed=8)
        self.assertEqual(fingerprint(a), fingerprint(b))
        self.assertNotEqual(fingerprint(a), fingerprint(c))

    def test_invalid_specs_are_rejected(self):
        vocab = build_vocab("a b c d")
        with self.assertRaisesRegex(ValueError, "not divisible"):
            build_model(tiny_spec(len(vocab), model_dim=6, head_count=4), seed=0)
        anti = ModelSpec(
            layers=(LayerSpec(index=0, role=LayerRole.anti, ffn_multiplier=1),),
            model_dim=4,
            head_count=2,
            vocab_size=8,
            block_size=4,
        )
        with self.assertRaisesRegex(ValueError, "anti-layers"):
            build_model(anti, seed=0)
        with self.assertRaisesRegex(ValueError, "does not match"):
            build_model(tiny_spec(9), seed=0, vocab=vocab)
        with self.assertRaises(ValidationError):
            ModelSpec(layers=(), model_dim=4, head_count=2, vocab_size=8, block_size=4)

    def test_growth_stack_roles(self):
        layers = growth_layers()
        self.assertEqual(len(layers), 12)
        self.assertEqual([layer.ffn_multiplier for layer in layers], [1, 4, 4, 1, 4, 4, 1, 2, 4, 4, 2, 1])
        spec = tiny_spec(10)
        self.assertEqual(uniform_twin(spec), spec)


class TestWeights(unittest.TestCase):
    def setUp(self):
        self.model, self.vocab, self.eval_set = tiny_model()

    def test_reserved_and_unknown_components(self):
        with self.assertRaisesRegex(ValueError, "reserved"):
            get_weights(self.model, (0, "gate_proj"))
        with self.assertRaisesRegex(ValueError, "unknown component"):
            get_weights(self.model, (0, "w_proj"))
        with self.assertRaisesRegex(ValueError, "out of range"):
            get_weights(self.model, (3, "q_proj"))

    def test_set_weights_checks_shape(self):
        with self.assertRaisesRegex(ValueError, "does not match"):
            set_weights(self.model, (0, "q_proj"), np.zeros((8, 9)))

    def test_get_weights_returns_a_copy(self):
        weights = get_weights(self.model, ComponentId(1, "v_proj"))
        weights[...] = 0
        self.assertTrue(np.any(get_weights(self.model, (1, "v_proj"))))

    def test_clone_shares_no_arrays(self):
        twin = clone(self.model)
        before = fingerprint(self.model)
        set_weights(twin, (0, "q_proj"), np.zeros((8, 8)))
        self.assertEqual(fingerprint(self.model), before)
        self.assertNotEqual(fingerprint(twin), before)

    def test_fit_to_shape_truncates_and_pads(self):
        values = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(fit_to_shape(values, (2, 2)), [[0, 1], [3, 4]])
        np.testing.assert_array_equal(fit_to_shape(values, (2, 4)), [[0, 1, 2, 0], [3, 4, 5, 0]])
        with self.assertRaises(ValueError):
            fit_to_shape(values, (6,))


class TestForward(unittest.TestCase):
    def setUp(self):
        self.model, self.vocab, self.eval_set = tiny_model()

    def test_logits_are_causal(self):
        rng = np.random.default_rng(0)
        ids = rng.integers(0, len(self.vocab), size=(2, 10))
        changed = ids.copy()
        changed[:, 6] = (changed[:, 6] + 1) % len(self.vocab)
        a = self.model.forward(ids).data
        b = self.model.forward(changed).data
        np.testing.assert_allclose(a[:, :6], b[:, :6], atol=1e-6)
        self.assertFalse(np.allclose(a[:, 6:], b[:, 6:]))

    def test_sequence_longer_than_block_is_rejected(self):
        with self.assertRaisesRegex(ValueError, "exceeds block size"):
            self.model.forward(np.zeros((1, 17), dtype=np.int64))

    def test_active_subset_bypasses_layers(self):
        ids = np.zeros((1, 4), dtype=np.int64)
        full = self.model.forward(ids).data
        np.testing.assert_array_equal(self.model.forward(ids, active={0, 1, 2}).data, full)
        self.assertFalse(np.allclose(self.model.forward(ids, active={0}).data, full))

    def test_forward_and_gradients_are_bit_reproducible(self):
        ids = np.random.default_rng(1).integers(0, len(self.vocab), size=(2, 9))
        targets = np.roll(ids, -1, axis=1)
        twin, _, _ = tiny_model()
        np.testing.assert_array_equal(self.model.forward(ids).data, twin.forward(ids).data)

        grads = []
        for model in (self.model, self.model, twin):
            model.zero_grad()
            T.backward(model.loss(ids, targets))
            grads.append({name: param.grad.copy() for name, param in model.params.items()})
        for other in grads[1:]:
            for name, grad in grads[0].items():
                np.testing.assert_array_equal(other[name], grad, err_msg=name)

    def test_generate_returns_words(self):
        text = generate(self.model, self.vocab, "the cat", max_new_tokens=5)
        self.assertLessEqual(len(text.split()), 5)
        self.assertNotIn("<bos>", text)


class TestPerplexity(unittest.TestCase):
    def test_uniform_logits_give_vocab_size(self):
        vocab = build_vocab("a b c d")
        spec = tiny_spec(len(vocab), num_layers=1, model_dim=4, head_count=2, block_size=8)
        model = build_model(spec, seed=0, vocab=vocab)
        model.params["head"].data[...] = 0.0
        model.touch()
        eval_set = EvalSet.from_sentences(["a b c", "d a"], vocab)
        self.assertAlmostEqual(perplexity(model, eval_set), 8.0, delta=1e-3)

    def test_cache_follows_weights(self):
        model, _, eval_set = tiny_model()
        baseline = perplexity(model, eval_set)
        original = get_weights(model, (1, "up_proj"))
        set_weights(model, (1, "up_proj"), original * 5)
        changed = perplexity(model, eval_set)
        set_weights(model, (1, "up_proj"), original)
        self.assertNotEqual(changed, baseline)
        self.assertEqual(perplexity(model, eval_set), baseline)

    def test_cached_value_matches_fresh_evaluation(self):
        model, _, eval_set = tiny_model(seed=3)
        first = perplexity(model, eval_set)
        ppl_cache.clear()
        self.assertEqual(perplexity(model, eval_set), first)

    def test_sentence_order_does_not_change_perplexity(self):
        model, vocab, _ = tiny_model(seed=2)
        sentences = list(SENTENCES)
        forward = EvalSet.from_sentences(sentences, vocab)
        backward = EvalSet.from_sentences(sentences[::-1], vocab)
        self.assertNotEqual(forward.hash, backward.hash)
        expected = perplexity(model, forward)
        self.assertAlmostEqual(perplexity(model, backward), expected, delta=1e-5 * expected)
        ppl_cache.clear()
        self.assertAlmostEqual(perplexity(model, backward, batch_size=2), expected, delta=1e-5 * expected)

    def test_vocabulary_mismatch_is_rejected(self):
        model, _, _ = tiny_model()
        other = EvalSet.from_sentences(["a b"], build_vocab("a b"))
        with self.assertRaisesRegex(ValueError, "differs from model"):
            perplexity(model, other)


if __name__ == "__main__":
    unittest.main()
