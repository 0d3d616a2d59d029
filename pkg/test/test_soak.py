import os
import unittest

from tinyloc.container import load_dataset
from tinyloc.models import ModelConfig, build_model
from tinyloc.quantize import quantize_model_static
from tinyloc.training import TrainConfig, as_tensors, evaluate, train_model

SOAK_DATA = os.environ.get('TINYLOC_SOAK_DATA', '')
"""Comma-separated dataset containers built with ``tinyloc prepare-data`` from the public house recordings"""


@unittest.skipUnless(SOAK_DATA, 'TINYLOC_SOAK_DATA not set')
class TestHouses(unittest.TestCase):

    def test_directional_claims(self):
        for path in [p.strip() for p in SOAK_DATA.split(',') if p.strip()]:
            with self.subTest(house=path):
                split = load_dataset(path)
                cfg = ModelConfig.parse_name('mamba:H8L1', split.feature_dim, split.class_count)
                baseline = train_model(build_model(cfg, 7), split, TrainConfig(epochs=50), 7).model
                f1, acc = evaluate(baseline, split.test, split.class_count)
                self.assertGreaterEqual(acc, f1)
                quantized = quantize_model_static(baseline, as_tensors(split.train)[0][:64])
                quantized_f1, _ = evaluate(quantized, split.test, split.class_count)
                self.assertLessEqual(abs(quantized_f1 - f1), 0.05)


if __name__ == '__main__':
    unittest.main()
