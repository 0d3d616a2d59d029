import unittest
from dataclasses import asdict

import torch

from tinyloc.container import encode_model, model_size
from tinyloc.distill import KDConfig, distill_train
from tinyloc.harness import BUDGET_32K, BUDGET_64K, ExperimentConfig, budget_check, default_synthetic_sweep, \
    emit_report, evaluate_variant, run_experiment
from tinyloc.models import ModelConfig, build_model
from tinyloc.quantize import quantize_model_static
from tinyloc.rssi_data import generate_synthetic
from tinyloc.training import TrainConfig, as_tensors, evaluate, train_model

DESK = TrainConfig(epochs=50, batch_size=8, learning_rate=5e-3)


class TestDeskScale(unittest.TestCase):
    """Default synthetic dataset: 3 rooms, 4 APs, seed 7"""

    @classmethod
    def setUpClass(cls):
        cls.split = generate_synthetic()
        cls.dims = (cls.split.feature_dim, cls.split.class_count)

    def train(self, name: str, seed: int = 7):
        return train_model(build_model(ModelConfig.parse_name(name, *self.dims), seed), self.split, DESK, seed).model

    def test_baseline_and_static_quantization(self):
        baseline = self.train('mamba:H8L1')
        f1, _ = evaluate(baseline, self.split.test, self.split.class_count)
        self.assertGreaterEqual(f1, 0.90)
        quantized = quantize_model_static(baseline, as_tensors(self.split.train)[0])
        quantized_f1, _ = evaluate(quantized, self.split.test, self.split.class_count)
        self.assertGreaterEqual(quantized_f1, f1 - 0.02)

    def test_distilled_student_keeps_up_with_its_baseline(self):
        teacher = self.train('mamba:H32L1')
        student_cfg = ModelConfig.parse_name('mamba:H4L1', *self.dims)
        student = distill_train(teacher, student_cfg, self.split, KDConfig(train=DESK), seed=7).model
        baseline = self.train('mamba:H4L1')
        student_f1, _ = evaluate(student, self.split.test, self.split.class_count)
        baseline_f1, _ = evaluate(baseline, self.split.test, self.split.class_count)
        self.assertGreaterEqual(student_f1, baseline_f1 - 0.02)

    def test_budget_gating(self):
        sweep = default_synthetic_sweep()
        rows = []
        for name in sweep.models:
            model = build_model(ModelConfig.parse_name(name, *self.dims), seed=sweep.seed)
            n_bytes = model_size(model).total_bytes
            cfg = model.config
            if cfg.hidden_size <= 16:
                self.assertTrue(budget_check(n_bytes, BUDGET_64K), name)
            if cfg.family == 'mamba' and cfg.hidden_size <= 8:
                self.assertTrue(budget_check(n_bytes, BUDGET_32K), name)
            rows.append(evaluate_variant(model, self.split, 'synthetic'))
        markdown = emit_report(rows, 'md')
        self.assertIn('**Under 64 KB**', markdown)
        self.assertIn('**Under 32 KB**', markdown)
        self.assertLess(markdown.index('**Under 64 KB**'), markdown.index('**Under 32 KB**'))

    def test_repeatable(self):
        experiment = ExperimentConfig(models=('mamba:H8L1',), train=TrainConfig(epochs=3, learning_rate=5e-3))
        first = run_experiment(experiment, self.split)
        second = run_experiment(experiment, generate_synthetic())
        self.assertEqual([asdict(r) for r in first], [asdict(r) for r in second])
        a, b = (train_model(build_model(ModelConfig.parse_name('mdcsa:H8L1', *self.dims), 7), self.split,
                            TrainConfig(epochs=2), 7).model for _ in range(2))
        self.assertEqual(encode_model(a), encode_model(b))
        calibration = as_tensors(self.split.train)[0]
        self.assertEqual(encode_model(quantize_model_static(a, calibration)),
                         encode_model(quantize_model_static(b, calibration)))
        self.assertTrue(torch.equal(a(calibration[:2]), b(calibration[:2])))


if __name__ == '__main__':
    unittest.main()
