# tests/test_acceptance.py
import time
import unittest

from layeranat.corpus import prepare_data
from layeranat.growth import compare, default_phase_plan, train_growth, train_uniform
from layeranat.model import build_model, param_count, uniform_twin
from layeranat.schemas import RunConfig
from layeranat.settings import SLOW_TESTS, stream_seed

SEEDS = (0, 1, 2)
FULL_BUDGET = 656
REDUCED_BUDGET = 416
MIN_RATIO = 1.5
TIME_LIMIT = 900.0


def run_protocol(config: RunConfig, protocol: str, steps: int):
    data, eval_set = prepare_data(config)
    spec = config.model_spec(len(data.vocab))
    if protocol == "uniform":
        spec = uniform_twin(spec)
    model = build_model(spec, seed=stream_seed(config.seed, "init"), vocab=data.vocab)
    options = {"optimizer": config.optimizer, "eval_every": config.eval_every, "seed": config.seed}
    if protocol == "growth":
        return train_growth(model, default_phase_plan(), data, steps, eval_set, **options), eval_set
    return train_uniform(model, data, steps, eval_set, **options), eval_set


@unittest.skipUnless(SLOW_TESTS, "set LAYERANAT_SLOW_TESTS=1 to run full-size training")
class TestGrowthBeatsUniform(unittest.TestCase):
    def test_three_seeds_at_default_configuration(self):
        start_time = time.time()
        reduced_wins = 0
        for seed in SEEDS:
            config = RunConfig(seed=seed)
            growth, eval_set = run_protocol(config, "growth", FULL_BUDGET)
            uniform, _ = run_protocol(config, "uniform", FULL_BUDGET)
            reduced, _ = run_protocol(config, "growth", REDUCED_BUDGET)

            self.assertEqual(growth.param_count, uniform.param_count)
            report = compare(growth, uniform, eval_set)
            self.assertEqual(report.growth_steps, report.uniform_steps)
            self.assertGreaterEqual(
                report.ratio,
                MIN_RATIO,
                f"seed {seed}: growth {report.growth_val_loss:.4f}, uniform {report.uniform_val_loss:.4f}",
            )

            reduced_report = compare(reduced, uniform, eval_set)
            self.assertTrue(reduced_report.notes)
            if reduced_report.growth_val_loss <= reduced_report.uniform_val_loss:
                reduced_wins += 1

        self.assertGreaterEqual(reduced_wins, 2)
        self.assertLess(time.time() - start_time, TIME_LIMIT)

    def test_parameter_parity_at_default_configuration(self):
        config = RunConfig()
        data, _ = prepare_data(config)
        spec = config.model_spec(len(data.vocab))
        growth = build_model(spec, seed=stream_seed(config.seed, "init"), vocab=data.vocab)
        uniform = build_model(uniform_twin(spec), seed=stream_seed(config.seed, "init"), vocab=data.vocab)
        self.assertEqual(param_count(growth), param_count(uniform))


if __name__ == "__main__":
    unittest.main()
