import unittest

import torch
from torch import nn

from tinyloc.helper_functions import ShapeError
from tinyloc.models import ModelConfig, build_mamba, build_mdcsa, build_model, param_count, selective_ssm_scan
from tinyloc.nn_core import grad_check


def within(actual: int, target: int, tolerance: float = 0.15) -> bool:
    return abs(actual - target) <= tolerance * target


def naive_scan(delta, A, B, C, D, x):
    """Step-by-step recurrence, one channel and state at a time"""
    steps, channels = x.shape
    states = A.shape[1]
    h = [[torch.zeros((), dtype=x.dtype) for _ in range(states)] for _ in range(channels)]
    y = torch.zeros(steps, channels, dtype=x.dtype)
    for t in range(steps):
        for c in range(channels):
            total = D[c] * x[t, c]
            for n in range(states):
                h[c][n] = torch.exp(delta[t, c] * A[c, n]) * h[c][n] + delta[t, c] * B[t, n] * x[t, c]
                total = total + C[t, n] * h[c][n]
            y[t, c] = total
    return y


class TestModelConfig(unittest.TestCase):

    def test_parse_name(self):
        cfg = ModelConfig.parse_name('mamba:H8L1', 8, 4)
        self.assertEqual(('mamba', 8, (1,)), (cfg.family, cfg.hidden_size, cfg.layer_spec))
        self.assertEqual('Mamba: H8L1', cfg.name)
        mdcsa = ModelConfig.parse_name('MDCSA: H16L3', 8, 4)
        self.assertEqual((1, 4, 7), mdcsa.layer_spec)
        self.assertEqual('MDCSA: H16L3', mdcsa.name)
        with self.assertRaises(ValueError):
            ModelConfig.parse_name('mdcsa:H16L2', 8, 4)
        with self.assertRaises(ValueError):
            ModelConfig.parse_name('lstm:H16L1', 8, 4)

    def test_validation(self):
        with self.assertRaises(ValueError):
            ModelConfig('mamba', 8, (1,), 8, 1)
        with self.assertRaises(ValueError):
            ModelConfig('mdcsa', 8, (0, 3), 8, 4)
        with self.assertRaises(ValueError):
            ModelConfig('mamba', 8, (1,), 8, 4, expand=0)
        with self.assertRaises(ValueError):
            ModelConfig('mamba', 0, (1,), 8, 4)

    def test_metadata(self):
        cfg = ModelConfig('mdcsa', 16, (1, 4, 7), 11, 5, ffn_mult=8)
        self.assertEqual(cfg, ModelConfig.from_metadata(cfg.to_metadata()))
        self.assertEqual(cfg.with_dims(3, 2), ModelConfig('mdcsa', 16, (1, 4, 7), 3, 2, ffn_mult=8))


class TestParamCounts(unittest.TestCase):

    def test_linear(self):
        self.assertEqual(36, param_count(nn.Linear(8, 4)))

    def test_mamba_calibration(self):
        small = param_count(build_mamba(ModelConfig.parse_name('mamba:H8L1', 8, 4)))
        large = param_count(build_mamba(ModelConfig.parse_name('mamba:H32L1', 8, 4)))
        self.assertTrue(within(small, 1432), small)
        self.assertTrue(within(large, 10392), large)

    def test_mdcsa_calibration(self):
        house_a = param_count(build_mdcsa(ModelConfig.parse_name('mdcsa:H16L1', 8, 4)))
        house_b = param_count(build_mdcsa(ModelConfig.parse_name('mdcsa:H8L1', 11, 11)))
        self.assertTrue(within(house_a, 10588), house_a)
        self.assertTrue(within(house_b, 3018), house_b)

    def test_monotone_in_hidden_size(self):
        for family, layers in (('mamba', 1), ('mamba', 2), ('mdcsa', 1), ('mdcsa', 3)):
            counts = [param_count(build_model(ModelConfig.parse_name(f'{family}:H{h}L{layers}', 8, 4)))
                      for h in (2, 4, 8, 16, 32)]
            self.assertEqual(sorted(counts), counts)
            self.assertEqual(len(set(counts)), len(counts))

    def test_stacking_doubles_block_params(self):
        one = build_mamba(ModelConfig.parse_name('mamba:H8L1', 8, 4))
        two = build_mamba(ModelConfig.parse_name('mamba:H8L2', 8, 4))
        self.assertEqual(2 * param_count(one.blocks), param_count(two.blocks))

    def test_count_is_invariant_under_forward(self):
        model = build_model(ModelConfig.parse_name('mdcsa:H8L3', 5, 3))
        before = param_count(model)
        model(torch.rand(2, 7, 5))
        self.assertEqual(before, param_count(model))


class TestSelectiveScan(unittest.TestCase):

    def test_two_step_recurrence(self):
        y = selective_ssm_scan(torch.ones(2, 1), torch.log(torch.tensor([[0.5]])), torch.ones(2, 1),
                               torch.ones(2, 1), torch.zeros(1), torch.ones(2, 1))
        torch.testing.assert_close(y[:, 0], torch.tensor([1.0, 1.5]))

    def test_integrator(self):
        x = torch.tensor([[0.5], [2.0], [-1.0], [3.0]], dtype=torch.float64)
        ones = torch.ones(4, 1, dtype=torch.float64)
        y = selective_ssm_scan(ones, torch.zeros(1, 1, dtype=torch.float64), ones, ones,
                               torch.zeros(1, dtype=torch.float64), x)
        torch.testing.assert_close(y, torch.cumsum(x, dim=0))

    def test_against_naive_loop(self):
        generator = torch.Generator().manual_seed(21)
        for trial in range(100):
            dtype = torch.float64 if trial % 5 == 0 else torch.float32
            steps, channels, states = (int(torch.randint(1, 6, (1,), generator=generator)) for _ in range(3))
            delta = torch.rand(steps, channels, generator=generator).to(dtype) + 0.01
            A = -torch.rand(channels, states, generator=generator).to(dtype) * 2
            B, C = (torch.randn(steps, states, generator=generator).to(dtype) for _ in range(2))
            D = torch.randn(channels, generator=generator).to(dtype)
            x = torch.randn(steps, channels, generator=generator).to(dtype)
            tolerance = 1e-12 if dtype == torch.float64 else 1e-6
            torch.testing.assert_close(selective_ssm_scan(delta, A, B, C, D, x), naive_scan(delta, A, B, C, D, x),
                                       rtol=tolerance, atol=tolerance)

    def test_batched(self):
        generator = torch.Generator().manual_seed(5)
        delta = torch.rand(3, 4, 2, generator=generator) + 0.1
        A = -torch.rand(2, 3, generator=generator)
        B, C = torch.randn(3, 4, 3, generator=generator), torch.randn(3, 4, 3, generator=generator)
        D, x = torch.randn(2, generator=generator), torch.randn(3, 4, 2, generator=generator)
        batched = selective_ssm_scan(delta, A, B, C, D, x)
        for b in range(3):
            torch.testing.assert_close(batched[b], selective_ssm_scan(delta[b], A, B[b], C[b], D, x[b]))


class TestEmissionModels(unittest.TestCase):

    def setUp(self):
        self.configs = [ModelConfig.parse_name(name, 3, 4) for name in
                        ('mamba:H4L1', 'mamba:H4L2', 'mdcsa:H4L1', 'mdcsa:H4L3')]

    def test_output_shapes(self):
        for cfg in self.configs:
            model = build_model(cfg)
            self.assertEqual((1, 4), tuple(model(torch.rand(1, 3)).shape))
            self.assertEqual((7, 4), tuple(model(torch.rand(7, 3)).shape))
            self.assertEqual((2, 7, 4), tuple(model(torch.rand(2, 7, 3)).shape))
            self.assertEqual((2, 7), tuple(model.decode(torch.rand(2, 7, 3)).shape))

    def test_wrong_feature_dim(self):
        with self.assertRaisesRegex(ShapeError, 'input_dim=3'):
            build_model(self.configs[0])(torch.rand(5, 4))

    def test_causal(self):
        for cfg in self.configs:
            model = build_model(cfg).double()
            x = torch.rand(2, 8, 3, dtype=torch.float64)
            base = model(x)
            x[:, 5:] = torch.rand(2, 3, 3, dtype=torch.float64)
            torch.testing.assert_close(model(x)[:, :5], base[:, :5], msg=cfg.name)

    def test_seeded_build(self):
        for cfg in self.configs:
            a, b, c = build_model(cfg, seed=1), build_model(cfg, seed=1), build_model(cfg, seed=2)
            for (name, pa), pb, pc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
                self.assertTrue(torch.equal(pa, pb), name)
            self.assertFalse(all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())))
            self.assertEqual(1, a.seed)

    def test_loss_passes_grad_check(self):
        generator = torch.Generator().manual_seed(13)
        for name in ('mamba:H4L1', 'mdcsa:H8L1', 'mdcsa:H4L3'):
            model = build_model(ModelConfig.parse_name(name, 3, 3), seed=3).double()
            x = torch.rand(2, 6, 3, dtype=torch.float64, generator=generator)
            y = torch.randint(0, 3, (2, 6), generator=generator)
            error = grad_check(lambda: model.loss(x, y), list(model.parameters()), samples=200, generator=generator)
            self.assertLess(error, 1e-4, name)


if __name__ == '__main__':
    unittest.main()
