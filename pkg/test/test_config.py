import os
import tempfile
import unittest

from tinyloc.config import DEFAULT_SEED, RunConfig
from tinyloc.helper_functions import ConfigError

SAMPLE = """
[DEFAULT]
seed = 11

[data]
source = synth
rooms = 4
samples_per_room = 200

[model]
family = mdcsa
hidden_size = 16
layers = L3

[quantize]
scheme = dynamic
signed = yes

[distill]
alpha = 0.25
teacher_grid = mdcsa:H32L1, mdcsa:H16L3

[report]
format = csv
variants = baseline, distill
"""


class TestRunConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = RunConfig.from_text('')
        self.assertEqual(DEFAULT_SEED, cfg.seed)
        self.assertEqual('synth', cfg.data_source)
        self.assertEqual(('mamba:H8L1',), cfg.model_grid())
        self.assertEqual(0.1, cfg.kd_config().alpha)
        self.assertEqual('static', cfg.quant_config().scheme)
        self.assertEqual(6.0, cfg.quant_config().tau)
        self.assertEqual('md', cfg.report_format)

    def test_sample(self):
        cfg = RunConfig.from_text(SAMPLE)
        self.assertEqual(11, cfg.seed)
        synth = cfg.synth_config()
        self.assertEqual((4, 200, 11), (synth.room_count, synth.samples_per_room, synth.seed))
        model = cfg.model_config(5, 4)
        self.assertEqual('MDCSA: H16L3', model.name)
        self.assertEqual((1, 4, 7), model.layer_spec)
        self.assertEqual(('mdcsa:H16L3',), cfg.model_grid())
        self.assertTrue(cfg.quant_config().signed)
        experiment = cfg.experiment_config('house')
        self.assertEqual(('baseline', 'distill'), experiment.variants)
        self.assertEqual(('mdcsa:H32L1', 'mdcsa:H16L3'), experiment.teacher_models)
        self.assertEqual((11, 'house', 0.25), (experiment.seed, experiment.dataset_id, experiment.kd.alpha))
        self.assertEqual('csv', cfg.report_format)

    def test_mdcsa_kernel_list(self):
        cfg = RunConfig.from_text('[model]\nfamily = mdcsa\nlayers = 1, 5\n')
        self.assertEqual((1, 5), cfg.model_config(3, 2).layer_spec)

    def test_unknown_settings(self):
        with self.assertRaisesRegex(ConfigError, r'\[trainer\]'):
            RunConfig.from_text('[trainer]\nepochs = 3\n')
        with self.assertRaisesRegex(ConfigError, 'learning_rat'):
            RunConfig.from_text('[train]\nlearning_rat = 0.1\n')
        with self.assertRaisesRegex(ConfigError, 'only "seed"'):
            RunConfig.from_text('[DEFAULT]\nepochs = 3\n')
        with self.assertRaisesRegex(ConfigError, r'seed belongs in \[DEFAULT\]'):
            RunConfig.from_text('[train]\nseed = 3\n')
        with self.assertRaisesRegex(ConfigError, r'seed belongs in \[DEFAULT\]'):
            RunConfig.from_text('[DEFAULT]\nseed = 3\n\n[quant]\nseed = 4\n')
        with self.assertRaises(ConfigError):
            RunConfig.from_text('not an ini file')
        with self.assertRaises(ConfigError):
            RunConfig().override('train', 'momentum', 0.9)

    def test_bad_values(self):
        with self.assertRaisesRegex(ConfigError, 'epochs'):
            RunConfig.from_text('[train]\nepochs = many\n').train_config()
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[train]\nepochs = 0\n').train_config()
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[quantize]\nsigned = perhaps\n').quant_config()
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[data]\nsource = wifi\n').data_source
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[model]\nfamily = mdcsa\nlayers = L2\n').model_config(3, 2)
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[model]\nfamily = lstm\n').model_config(3, 2)
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[report]\nvariants = baseline, pruned\n').experiment_config('x')
        with self.assertRaises(ConfigError):
            RunConfig.from_text('[DEFAULT]\nseed = x\n')

    def test_override_and_echo(self):
        cfg = RunConfig.from_text(SAMPLE)
        cfg.override('quantize', 'tau', 3.5)
        self.assertEqual(3.5, cfg.get_float('quantize', 'tau'))
        echo = cfg.echo()
        self.assertEqual('seed', next(iter(echo)))
        self.assertEqual('11', echo['seed'])
        self.assertEqual('3.5', echo['quantize.tau'])
        self.assertEqual('16', echo['model.hidden_size'])

    def test_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'run.ini')
            with open(path, 'w') as handle:
                handle.write(SAMPLE)
            self.assertEqual(11, RunConfig.load(path).seed)
            with self.assertRaisesRegex(ConfigError, 'Cannot read'):
                RunConfig.load(os.path.join(tmp, 'missing.ini'))


if __name__ == '__main__':
    unittest.main()
