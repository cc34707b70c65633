import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from dept.checkpoint import (CHECKPOINT_VERSION, CheckpointError, load_checkpoint, read_checkpoint_meta,
                             save_checkpoint)
from dept.cpsgraph import build_graph
from dept.encoder import EncoderConfig, EncoderParams

CONFIG = EncoderConfig(layers=1, heads=2, d_model=8, policy_dim=2, feature_dim=3, t_max=2, prior_hidden=4)


def line_graph(n):
    return build_graph([(i, (300.0 * i, 0.0)) for i in range(n)])


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.path = os.path.join(self.dir, 'run', 'checkpoint.npz')
        self.params = EncoderParams(CONFIG, line_graph(3), np.random.default_rng(0))

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_parameters_survive(self):
        save_checkpoint(self.path, self.params, {'seed': 4, 'ablation': {'priors': True}})
        loaded, meta = load_checkpoint(self.path, line_graph(3))
        self.assertEqual(meta['seed'], 4)
        self.assertEqual(meta['version'], CHECKPOINT_VERSION)
        self.assertEqual(meta['encoder'], CONFIG.to_dict())
        for name, p in self.params.named_parameters().items():
            np.testing.assert_array_equal(loaded.named_parameters()[name].value, p.value)

    def test_plain_transformer(self):
        params = EncoderParams(EncoderConfig.from_dict(dict(CONFIG.to_dict(), use_priors=False)), line_graph(3))
        save_checkpoint(self.path, params)
        loaded, _ = load_checkpoint(self.path, line_graph(3))
        self.assertIsNone(loaded.priors)

    def test_meta_only(self):
        save_checkpoint(self.path, self.params, {'scenario': {'rows': 1, 'cols': 3}})
        self.assertEqual(read_checkpoint_meta(self.path)['scenario'], {'rows': 1, 'cols': 3})

    def test_wrong_graph(self):
        save_checkpoint(self.path, self.params)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path, line_graph(4))

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            read_checkpoint_meta(os.path.join(self.dir, 'nothing.npz'))

    def test_version_mismatch(self):
        arrays = {name: p.value for name, p in self.params.named_parameters().items()}
        arrays['__meta__'] = np.array(json.dumps({'version': CHECKPOINT_VERSION + 1}))
        os.makedirs(os.path.dirname(self.path))
        with open(self.path, 'wb') as fd:
            np.savez(fd, **arrays)
        with self.assertRaisesRegex(CheckpointError, 'version'):
            load_checkpoint(self.path, line_graph(3))

    def test_missing_parameter(self):
        save_checkpoint(self.path, self.params)
        with np.load(self.path) as archive:
            arrays = {k: archive[k] for k in archive.files if k != 'qhead.b'}
        with open(self.path, 'wb') as fd:
            np.savez(fd, **arrays)
        with self.assertRaisesRegex(CheckpointError, 'qhead.b'):
            load_checkpoint(self.path, line_graph(3))


if __name__ == '__main__':
    unittest.main()
