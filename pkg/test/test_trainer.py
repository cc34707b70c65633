import csv
import math
import os
import shutil
import tempfile
import unittest

import numpy as np

from dept.controllers import MaxPressureController
from dept.encoder import EncoderConfig, assemble_tokens, forward
from dept.numerics import NumericsError
from dept.priors import PrefitConfig
from dept.trafficsim import build_grid
from dept.trainer import (CURVE_COLUMNS, AblationFlags, DivergenceError, ReplayBuffer, Trainer,
                          TrainingError, TrainSchedule, collect_round, double_dqn_targets)

TINY_ENCODER = EncoderConfig(layers=1, heads=2, d_model=8, policy_dim=2, feature_dim=24, t_max=2,
                             prior_hidden=4)
TINY_PREFIT = PrefitConfig(fit_iterations=20, grid_points=41, embedding_samples=64)


def tiny_trainer(ablation='no-pre-fit', seed=0, **values):
    network, _ = build_grid(1, 2, seed=seed)
    schedule = dict(total_rounds=2, il_rounds=1, round_duration=60, decision_interval=10,
                    epochs_per_round=2, batch_size=4, chunk_size=2, sync_period=2, replay_capacity=100)
    schedule.update(values)
    return Trainer(network, TrainSchedule(**schedule), AblationFlags.from_name(ablation), TINY_ENCODER,
                   TINY_PREFIT, seed, {'rows': 1, 'cols': 2})


def huber_mean(r, delta=1.0):
    return float(np.mean(np.where(np.abs(r) <= delta, 0.5 * r ** 2, delta * (np.abs(r) - 0.5 * delta))))


class TestDoubleDqnTargets(unittest.TestCase):

    def test_hand_example(self):
        y = double_dqn_targets(np.array([[0.0]]), np.array([False]),
                               np.array([[[1.0, 3.0]]]), np.array([[[10.0, 5.0]]]), 0.9)
        # the online net picks the action, the target net scores it
        self.assertAlmostEqual(float(y[0, 0]), 4.5)
        self.assertAlmostEqual(huber_mean(np.array([5.0 - y[0, 0]])), 0.125)

    def test_terminal_and_zero_discount(self):
        rewards = np.array([[-3.0, -1.0], [-2.0, 0.0]])
        q = np.random.default_rng(0).normal(size=(2, 2, 4))
        y = double_dqn_targets(rewards, np.array([True, False]), q, q, 0.9)
        np.testing.assert_array_equal(y[0], rewards[0])
        y = double_dqn_targets(rewards, np.array([False, False]), q, q, 0.0, reward_scale=0.1)
        np.testing.assert_allclose(y, 0.1 * rewards)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        rewards = rng.normal(size=(5, 3))
        terminal = rng.random(5) < 0.3
        online = rng.normal(size=(5, 3, 4))
        target = rng.normal(size=(5, 3, 4))
        y = double_dqn_targets(rewards, terminal, online, target, 0.9, 0.1)
        for b in range(5):
            for i in range(3):
                expected = 0.1 * rewards[b, i]
                if not terminal[b]:
                    expected += 0.9 * target[b, i, int(np.argmax(online[b, i]))]
                self.assertAlmostEqual(y[b, i], expected, places=12)


class TestReplayBuffer(unittest.TestCase):

    def test_overwrites_oldest(self):
        buffer = ReplayBuffer(3, np.random.default_rng(0))
        buffer.extend(range(5))
        self.assertEqual(len(buffer), 3)
        self.assertEqual(set(buffer.sample(200)), {2, 3, 4})

    def test_uniform_sampling(self):
        buffer = ReplayBuffer(10, np.random.default_rng(5))
        buffer.extend(range(4))
        counts = np.bincount(buffer.sample(4000), minlength=4)
        chi2 = float(((counts - 1000.0) ** 2 / 1000.0).sum())
        self.assertLess(chi2, 16.27)

    def test_empty(self):
        with self.assertRaises(TrainingError):
            ReplayBuffer(3, np.random.default_rng(0)).sample(1)


class TestScheduleAndFlags(unittest.TestCase):

    def test_epsilon(self):
        schedule = TrainSchedule(total_rounds=10, il_rounds=4, epsilon_start=1.0, epsilon_end=0.1)
        self.assertEqual(schedule.epsilon(0), 0.0)
        self.assertEqual(schedule.epsilon(3), 0.0)
        self.assertAlmostEqual(schedule.epsilon(4), 1.0)
        self.assertAlmostEqual(schedule.epsilon(9), 0.1)
        self.assertAlmostEqual(schedule.epsilon(20), 0.1)
        values = [schedule.epsilon(r) for r in range(4, 10)]
        self.assertEqual(values, sorted(values, reverse=True))

    def test_schedule_errors(self):
        with self.assertRaises(TrainingError):
            TrainSchedule(total_rounds=2, il_rounds=3)
        with self.assertRaises(TrainingError):
            TrainSchedule(gamma=1.5)
        with self.assertRaises(TrainingError):
            TrainSchedule(round_duration=5, decision_interval=10)
        with self.assertRaises(TrainingError):
            TrainSchedule(batch_size=0)

    def test_flags(self):
        self.assertEqual(AblationFlags.from_name('full').to_dict(),
                         {'pre_fit': True, 'cone_decay': True, 'priors': True})
        self.assertEqual(AblationFlags.from_name('no-pre-fit').to_dict(),
                         {'pre_fit': False, 'cone_decay': True, 'priors': True})
        self.assertEqual(AblationFlags.from_name('no-cone').to_dict(),
                         {'pre_fit': True, 'cone_decay': False, 'priors': True})
        self.assertEqual(AblationFlags.from_name('tte').to_dict(),
                         {'pre_fit': False, 'cone_decay': False, 'priors': False})
        self.assertFalse(AblationFlags(priors=False).pre_fit)
        with self.assertRaises(TrainingError):
            AblationFlags.from_name('no-lut')


class TestCollectRound(unittest.TestCase):

    def test_transitions(self):
        network, _ = build_grid(1, 2, seed=4)
        transitions, result = collect_round(MaxPressureController(), network, 4, 60, 10, 3)
        self.assertEqual(len(transitions), 6)
        self.assertEqual([t.terminal for t in transitions], [False] * 5 + [True])
        np.testing.assert_array_equal(transitions[0].snapshot.valid, [True, False, False])
        np.testing.assert_array_equal(transitions[2].snapshot.valid, [True, True, True])
        for t in transitions:
            self.assertEqual(t.actions.shape, (2,))
            self.assertTrue(np.all(t.rewards <= 0.0))
            # reward is minus the queue behind the features of the next snapshot
            queues = t.next_snapshot.features[0, :, 12:].sum(axis=1) / 0.1
            np.testing.assert_allclose(t.rewards, -queues, atol=1e-9)
        for before, after in zip(transitions[:-1], transitions[1:]):
            self.assertIs(before.next_snapshot, after.snapshot)
        self.assertGreaterEqual(result.avg_travel_time, 0.0)

    def test_partial_interval_is_dropped(self):
        network, _ = build_grid(1, 1)
        transitions, _ = collect_round(MaxPressureController(), network, 0, 65, 10, 2)
        self.assertEqual(len(transitions), 6)

    def test_repeatable(self):
        network, _ = build_grid(1, 2)
        a, _ = collect_round(MaxPressureController(), network, 9, 100, 10, 2)
        b, _ = collect_round(MaxPressureController(), network, 9, 100, 10, 2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.actions, y.actions)
            np.testing.assert_array_equal(x.rewards, y.rewards)


class TestTrainerUpdates(unittest.TestCase):

    def setUp(self):
        self.trainer = tiny_trainer()
        self.transitions, _ = self.trainer.collect_round(MaxPressureController(), 3)

    def test_imitation_loss_of_uniform_q(self):
        online = self.trainer.online
        online.q_w.assign(np.zeros(online.q_w.shape))
        online.q_b.assign(np.zeros(online.q_b.shape))
        self.assertAlmostEqual(self.trainer.il_update(self.transitions[:4]), math.log(4.0), places=9)

    def test_imitation_loss_decreases(self):
        trainer = tiny_trainer(learning_rate=1e-2)
        transitions, _ = trainer.collect_round(MaxPressureController(), 3)
        batch = transitions[:4]
        losses = [trainer.il_update(batch) for _ in range(100)]
        self.assertLess(losses[-1], 0.9 * losses[0])

    def test_ddqn_loss_without_discount(self):
        trainer = tiny_trainer(gamma=0.0)
        transitions, _ = trainer.collect_round(MaxPressureController(), 3)
        batch = transitions[:4]
        online = trainer.online
        q = forward(assemble_tokens([t.snapshot for t in batch], online), online).value
        actions = np.stack([t.actions for t in batch])
        chosen = np.take_along_axis(q, actions[..., None], axis=-1)[..., 0]
        y = 0.1 * np.stack([t.rewards for t in batch])
        self.assertAlmostEqual(trainer.ddqn_update(batch), huber_mean(chosen - y), places=10)

    def test_zero_learning_rate_keeps_parameters(self):
        trainer = tiny_trainer(learning_rate=0.0)
        transitions, _ = trainer.collect_round(MaxPressureController(), 3)
        before = [p.value.copy() for p in trainer.online.parameters()]
        trainer.ddqn_update(transitions[:4])
        trainer.il_update(transitions[:4])
        for value, p in zip(before, trainer.online.parameters()):
            np.testing.assert_array_equal(p.value, value)

    def test_target_sync(self):
        trainer = self.trainer
        batch = self.transitions[:4]
        trainer.ddqn_update(batch)
        differs = any(not np.array_equal(a.value, b.value)
                      for a, b in zip(trainer.online.parameters(), trainer.target.parameters()))
        self.assertTrue(differs)
        trainer.ddqn_update(batch)
        for a, b in zip(trainer.online.parameters(), trainer.target.parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_broken_target_raises_numerics_error(self):
        self.trainer.target.q_b.assign(np.full(self.trainer.target.q_b.shape, np.nan))
        with self.assertRaises(NumericsError):
            self.trainer.ddqn_update(self.transitions[:4])

    def test_target_synced_when_imitation_ends(self):
        trainer = tiny_trainer(sync_period=1000)
        trainer.run_round(0)
        after_imitation = [p.value.copy() for p in trainer.online.parameters()]
        self.assertTrue(any(not np.array_equal(value, p.value)
                            for value, p in zip(after_imitation, trainer.target.parameters())))
        trainer.run_round(1)
        for value, p in zip(after_imitation, trainer.target.parameters()):
            np.testing.assert_array_equal(p.value, value)


class TestTrainer(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_plain_transformer_arm(self):
        trainer = tiny_trainer('tte')
        self.assertIsNone(trainer.online.priors)
        self.assertFalse(trainer.config.use_cone)

    def test_prefit_arm(self):
        trainer = tiny_trainer('full')
        self.assertEqual(len(trainer.online.priors), 1)
        self.assertEqual(trainer.online.priors[0][0].name, 'block0.head0.prior')
        self.assertTrue(trainer.config.use_cone)
        self.assertFalse(tiny_trainer('no-cone').config.use_cone)

    def test_feature_width_checked(self):
        network, _ = build_grid(1, 1)
        with self.assertRaises(TrainingError):
            Trainer(network, flags=AblationFlags.from_name('tte'),
                    encoder_config=EncoderConfig(layers=1, heads=1, d_model=4, feature_dim=3))

    def test_same_seed_same_curve(self):
        curves = []
        for _ in range(2):
            curves.append(tiny_trainer(seed=5).train())
        self.assertEqual(curves[0], curves[1])
        self.assertEqual([row['stage'] for row in curves[0]], ['il', 'rl'])

    def test_learning_curve_file(self):
        path = os.path.join(self.dir, 'curve', 'learning_curve.csv')
        checkpoint = os.path.join(self.dir, 'checkpoint.npz')
        tiny_trainer().train(checkpoint, path)
        with open(path, newline='') as fd:
            rows = list(csv.reader(fd))
        self.assertEqual(tuple(rows[0]), CURVE_COLUMNS)
        self.assertEqual(len(rows), 3)
        self.assertTrue(os.path.exists(checkpoint))

    def test_divergence_saves_checkpoint(self):
        trainer = tiny_trainer()
        trainer.online.q_b.assign(np.full(trainer.online.q_b.shape, np.nan))
        checkpoint = os.path.join(self.dir, 'diverged.npz')
        with self.assertRaises(DivergenceError) as raised:
            trainer.train(checkpoint)
        self.assertEqual(raised.exception.checkpoint_path, checkpoint)
        self.assertTrue(os.path.exists(checkpoint))

    def test_broken_target_saves_checkpoint(self):
        trainer = tiny_trainer(il_rounds=0)
        trainer.target.q_b.assign(np.full(trainer.target.q_b.shape, np.nan))
        checkpoint = os.path.join(self.dir, 'diverged.npz')
        with self.assertRaises(DivergenceError) as raised:
            trainer.train(checkpoint)
        self.assertIn('round 0', str(raised.exception))
        self.assertTrue(os.path.exists(checkpoint))


if __name__ == '__main__':
    unittest.main()
