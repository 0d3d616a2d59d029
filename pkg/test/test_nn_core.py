import math
import unittest

import torch
from torch import nn

from tinyloc.helper_functions import ShapeError, TrainingDivergedError
from tinyloc.nn_core import CausalConv1d, CheckedAdam, adam_step, causal_conv1d, grad_check, layer_norm, linear, \
    scaled_dot_attention, silu, sinusoidal_positions, softmax, xavier_init_


class TestLinear(unittest.TestCase):

    def test_identity_and_bias(self):
        layer = nn.Linear(3, 3).double()
        with torch.no_grad():
            layer.weight.copy_(torch.eye(3))
            layer.bias.zero_()
        x = torch.randn(5, 3, dtype=torch.float64)
        torch.testing.assert_close(linear(x, layer), x)
        with torch.no_grad():
            layer.bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
        torch.testing.assert_close(linear(torch.zeros(2, 3, dtype=torch.float64), layer),
                                   layer.bias.detach().expand(2, 3))

    def test_against_hand_matmul(self):
        generator = torch.Generator().manual_seed(0)
        layer = nn.Linear(4, 3).double()
        x = torch.randn(2, 4, dtype=torch.float64, generator=generator)
        w, b = layer.weight.detach(), layer.bias.detach()
        expected = torch.tensor([[sum(x[i, k].item() * w[j, k].item() for k in range(4)) + b[j].item()
                                  for j in range(3)] for i in range(2)], dtype=torch.float64)
        self.assertLess((linear(x, layer) - expected).abs().max().item(), 1e-12)

    def test_shape_mismatch(self):
        with self.assertRaisesRegex(ShapeError, 'in_features=4'):
            linear(torch.zeros(2, 3), nn.Linear(4, 2))


class TestCausalConv(unittest.TestCase):

    def test_identity_kernel(self):
        x = torch.randn(7, 1)
        torch.testing.assert_close(causal_conv1d(x, torch.ones(1, 1, 1)), x)

    def test_impulse_reproduces_taps(self):
        x = torch.zeros(6, 1, dtype=torch.float64)
        x[2, 0] = 1.0
        taps = torch.tensor([[[0.5, -1.0, 2.0]]], dtype=torch.float64)
        y = causal_conv1d(x, taps)[:, 0]
        torch.testing.assert_close(y, torch.tensor([0.0, 0.0, 2.0, -1.0, 0.5, 0.0], dtype=torch.float64))

    def test_zero_input_gives_bias(self):
        y = causal_conv1d(torch.zeros(4, 2), torch.randn(3, 2, 3), torch.tensor([1.0, 2.0, 3.0]))
        torch.testing.assert_close(y, torch.tensor([[1.0, 2.0, 3.0]]).expand(4, 3))

    def test_causality_and_long_kernel(self):
        x = torch.randn(2, 8, 3, dtype=torch.float64)
        conv = CausalConv1d(3, 3, 5, groups=3).double()
        base = conv(x)
        x[:, 4] += 10.0
        torch.testing.assert_close(conv(x)[:, :4], base[:, :4])
        self.assertEqual((2, 1), tuple(causal_conv1d(torch.randn(2, 1), torch.randn(1, 1, 5)).shape))

    def test_invalid_kernel(self):
        with self.assertRaises(ShapeError):
            causal_conv1d(torch.zeros(4, 1), torch.zeros(1, 1, 0))
        with self.assertRaises(ShapeError):
            CausalConv1d(2, 2, 0)


class TestAttention(unittest.TestCase):

    def test_single_step(self):
        q, k, v = torch.randn(1, 4), torch.randn(1, 4), torch.randn(1, 4)
        out, weights = scaled_dot_attention(q, k, v, return_weights=True)
        torch.testing.assert_close(out, v)
        torch.testing.assert_close(weights, torch.ones(1, 1))

    def test_identical_keys_give_running_mean(self):
        t = 5
        v = torch.randn(t, 3, dtype=torch.float64)
        k = torch.ones(t, 3, dtype=torch.float64)
        out = scaled_dot_attention(torch.randn(t, 3, dtype=torch.float64), k, v)
        running = torch.cumsum(v, dim=0) / torch.arange(1, t + 1, dtype=torch.float64).unsqueeze(1)
        torch.testing.assert_close(out, running)

    def test_against_brute_force(self):
        generator = torch.Generator().manual_seed(3)
        q, k, v = (torch.randn(3, 2, dtype=torch.float64, generator=generator) for _ in range(3))
        out, weights = scaled_dot_attention(q, k, v, return_weights=True)
        for t in range(3):
            scores = [math.exp(sum(q[t, h].item() * k[s, h].item() for h in range(2)) / math.sqrt(2))
                      for s in range(t + 1)]
            expected = [sum(scores[s] / sum(scores) * v[s, h].item() for s in range(t + 1)) for h in range(2)]
            for h in range(2):
                self.assertAlmostEqual(expected[h], out[t, h].item(), delta=1e-10)
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(3, dtype=torch.float64), rtol=0, atol=1e-12)

    def test_causal(self):
        q, k, v = (torch.randn(2, 6, 4, dtype=torch.float64) for _ in range(3))
        base = scaled_dot_attention(q, k, v)
        k2, v2 = k.clone(), v.clone()
        k2[:, 4:] += 3.0
        v2[:, 4:] -= 3.0
        torch.testing.assert_close(scaled_dot_attention(q, k2, v2)[:, :4], base[:, :4])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            scaled_dot_attention(torch.zeros(3, 2), torch.zeros(4, 2), torch.zeros(3, 2))


class TestActivations(unittest.TestCase):

    def test_basic_values(self):
        self.assertEqual(0.0, silu(torch.tensor(0.0)).item())
        torch.testing.assert_close(softmax(torch.full((5,), 3.7, dtype=torch.float64)),
                                   torch.full((5,), 0.2, dtype=torch.float64))
        probs = softmax(torch.tensor([1000.0, 0.0, -1000.0], dtype=torch.float64))
        self.assertAlmostEqual(1.0, probs.sum().item(), delta=1e-12)
        self.assertTrue(torch.isfinite(probs).all())

    def test_layer_norm(self):
        y = layer_norm(torch.randn(4, 16, dtype=torch.float64) * 5 + 2)
        torch.testing.assert_close(y.mean(dim=-1), torch.zeros(4, dtype=torch.float64), rtol=0, atol=1e-10)
        torch.testing.assert_close(y.var(dim=-1, unbiased=False), torch.ones(4, dtype=torch.float64), rtol=0,
                                   atol=1e-3)

    def test_positions(self):
        encoding = sinusoidal_positions(6, 5)
        self.assertEqual((6, 5), tuple(encoding.shape))
        torch.testing.assert_close(encoding[0], torch.tensor([0.0, 1.0, 0.0, 1.0, 0.0]))


class TestInitAndOptimizer(unittest.TestCase):

    def test_xavier_is_seeded(self):
        layers = [nn.Sequential(nn.Linear(6, 4), nn.Conv1d(4, 4, 3)) for _ in range(2)]
        for layer in layers:
            xavier_init_(layer, torch.Generator().manual_seed(5))
        torch.testing.assert_close(layers[0][0].weight, layers[1][0].weight)
        self.assertTrue(torch.all(layers[0][0].weight.abs() <= math.sqrt(6.0 / 10)))
        self.assertEqual(0.0, layers[0][1].bias.abs().sum().item())

    def test_zero_gradient_keeps_params(self):
        w = nn.Parameter(torch.tensor([1.0, -2.0]))
        optimizer = CheckedAdam([('w', w)], lr=0.1)
        adam_step([w], [torch.zeros(2)], optimizer)
        torch.testing.assert_close(w.detach(), torch.tensor([1.0, -2.0]))

    def test_descends_quadratic(self):
        w = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        optimizer = CheckedAdam([('w', w)], lr=0.1)
        adam_step([w], [2 * w.detach()], optimizer)
        self.assertLess(w.item(), 1.0)
        for _ in range(499):
            adam_step([w], [2 * w.detach()], optimizer)
        self.assertLess(abs(w.item()), 1e-2)
        self.assertEqual(w.shape, optimizer.state[w]['exp_avg'].shape)

    def test_nan_gradient_aborts(self):
        w = nn.Parameter(torch.zeros(3))
        optimizer = CheckedAdam([('encoder.weight', w)])
        with self.assertRaisesRegex(TrainingDivergedError, 'encoder.weight'):
            adam_step([w], [torch.tensor([0.0, float('nan'), 1.0])], optimizer)


class TestGradCheck(unittest.TestCase):

    def test_linear_regression(self):
        generator = torch.Generator().manual_seed(1)
        x = torch.randn(20, 3, dtype=torch.float64, generator=generator)
        y = torch.randn(20, dtype=torch.float64, generator=generator)
        w = torch.randn(3, dtype=torch.float64, generator=generator, requires_grad=True)
        b = torch.zeros(1, dtype=torch.float64, requires_grad=True)
        self.assertLess(grad_check(lambda: ((x @ w + b - y) ** 2).mean(), [w, b]), 1e-7)
        self.assertLess(grad_check(lambda: ((x @ w + b - y) ** 2).mean(), [w, b], order=2), 1e-7)

    def test_detects_wrong_gradient(self):
        w = torch.tensor([0.7, -0.3], dtype=torch.float64, requires_grad=True)

        class Halved(torch.autograd.Function):
            @staticmethod
            def forward(ctx, t):
                ctx.save_for_backward(t)
                return (t ** 2).sum()

            @staticmethod
            def backward(ctx, grad):
                t, = ctx.saved_tensors
                return grad * t

        self.assertGreater(grad_check(lambda: Halved.apply(w), [w]), 0.4)


if __name__ == '__main__':
    unittest.main()
