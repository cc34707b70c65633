# This file is part of DePT.
#
# DePT is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# DePT is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with DePT.  If not, see <http://www.gnu.org/licenses/>.

import csv
import logging
import math
import os
import time

import numpy as np

from dept.checkpoint import save_checkpoint
from dept.controllers import DePTController, MaxPressureController
from dept.encoder import EncoderConfig, EncoderParams, FeatureHistory, assemble_tokens, forward
from dept.numerics import (Adam, NumericsError, OptimizerConfig, cross_entropy_with_logits,
                           huber, no_grad)
from dept.priors import PrefitConfig, prefit_priors
from dept.trafficsim import (LANES_PER_INTERSECTION, metrics, node_features, node_queues,
                             reset_state, step)

CURVE_COLUMNS = ('round', 'stage', 'loss', 'AvgTT', 'AvgQue', 'epsilon',
                 'collect_AvgTT', 'collect_AvgQue')


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):

    def __init__(self, message, checkpoint_path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class Transition:

    def __init__(self, snapshot, actions, rewards, next_snapshot, terminal):
        if not np.all(np.isfinite(rewards)):
            raise TrainingError('transition: non-finite reward {}'.format(rewards))
        self.snapshot = snapshot
        self.actions = np.asarray(actions, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.next_snapshot = next_snapshot
        self.terminal = bool(terminal)


class TrainSchedule:

    '''
    Class:       TrainSchedule
    Description: Round structure and Double-DQN hyper-parameters. Rounds
                 below il_rounds are imitation rounds, the rest are RL
                 rounds with epsilon annealed linearly from epsilon_start to
                 epsilon_end. One epoch is one minibatch update.
    '''
    def __init__(self, total_rounds=40, il_rounds=20, round_duration=1800, decision_interval=10,
                 epochs_per_round=100, batch_size=64, replay_capacity=50000, sync_period=500,
                 epsilon_start=1.0, epsilon_end=0.05, gamma=0.9, learning_rate=1e-3,
                 reward_scale=0.1, chunk_size=4, huber_delta=1.0):
        if il_rounds > total_rounds or il_rounds < 0:
            raise TrainingError('schedule: il_rounds {} must be in 0..total_rounds {}'.format(il_rounds, total_rounds))
        if not 0.0 <= gamma <= 1.0:
            raise TrainingError('schedule: gamma must be in [0,1], got {}'.format(gamma))
        if round_duration < decision_interval or decision_interval < 1:
            raise TrainingError('schedule: round of {} s shorter than the {} s interval'
                                .format(round_duration, decision_interval))
        for name, value in (('batch_size', batch_size), ('replay_capacity', replay_capacity),
                            ('sync_period', sync_period), ('chunk_size', chunk_size)):
            if value < 1:
                raise TrainingError('schedule: {} must be >= 1, got {}'.format(name, value))
        self.total_rounds = int(total_rounds)
        self.il_rounds = int(il_rounds)
        self.round_duration = int(round_duration)
        self.decision_interval = int(decision_interval)
        self.epochs_per_round = int(epochs_per_round)
        self.batch_size = int(batch_size)
        self.replay_capacity = int(replay_capacity)
        self.sync_period = int(sync_period)
        self.epsilon_start = float(epsilon_start)
        self.epsilon_end = float(epsilon_end)
        self.gamma = float(gamma)
        self.learning_rate = float(learning_rate)
        self.reward_scale = float(reward_scale)
        self.chunk_size = int(chunk_size)
        self.huber_delta = float(huber_delta)

    def epsilon(self, round_index):
        rl_rounds = self.total_rounds - self.il_rounds
        k = round_index - self.il_rounds
        if k < 0:
            return 0.0
        frac = k / max(rl_rounds - 1, 1)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * min(frac, 1.0)


class AblationFlags:

    NAMES = ('full', 'no-pre-fit', 'no-cone', 'tte')

    def __init__(self, pre_fit=True, cone_decay=True, priors=True):
        self.priors = bool(priors)
        self.pre_fit = bool(pre_fit) and self.priors
        # the plain transformer has no cone
        self.cone_decay = bool(cone_decay) and self.priors

    @classmethod
    def from_name(cls, name):
        if name == 'full':
            return cls()
        if name == 'no-pre-fit':
            return cls(pre_fit=False)
        if name == 'no-cone':
            return cls(cone_decay=False)
        if name == 'tte':
            return cls(pre_fit=False, cone_decay=False, priors=False)
        raise TrainingError('unknown ablation {}, expected one of {}'.format(name, ', '.join(cls.NAMES)))

    def to_dict(self):
        return {'pre_fit': self.pre_fit, 'cone_decay': self.cone_decay, 'priors': self.priors}


class ReplayBuffer:

    def __init__(self, capacity, rng):
        self.capacity = capacity
        self.rng = rng
        self._items = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def add(self, transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def extend(self, transitions):
        for t in transitions:
            self.add(t)

    def sample(self, n):
        if not self._items:
            raise TrainingError('replay: cannot sample from an empty buffer')
        return [self._items[k] for k in self.rng.integers(0, len(self._items), n)]


'''
Function:   collect_round
Parameter:  controller = Controller driving every intersection
            network    = Network, a fresh state is built from 'seed'
            duration   = simulated seconds
            interval   = seconds per decision
            t_max      = history length of the snapshots
            epsilon    = exploration rate handed to the controller, if given

Description: Runs one round and records a Transition per decision step.
             The reward of node i is minus its total queue after the step;
             the last transition of the round is terminal.
'''
def collect_round(controller, network, seed, duration, interval, t_max, epsilon=None,
                  feature_scale=0.1):
    if epsilon is not None:
        controller.epsilon = epsilon
    controller.reset()
    state = reset_state(network, seed)
    history = FeatureHistory(network.num_intersections, 2 * LANES_PER_INTERSECTION, t_max)
    history.push(node_features(state, feature_scale), state.phase)
    snapshot = history.snapshot()

    transitions = []
    steps = duration // interval
    for k in range(steps):
        actions = np.asarray(controller.act(state, snapshot), dtype=np.int64)
        step(state, actions, interval)
        rewards = -node_queues(state).astype(np.float64)
        history.push(node_features(state, feature_scale), state.phase)
        next_snapshot = history.snapshot()
        transitions.append(Transition(snapshot, actions, rewards, next_snapshot, k == steps - 1))
        snapshot = next_snapshot
    return transitions, metrics(state)


def double_dqn_targets(rewards, terminal, q_online_next, q_target_next, gamma, reward_scale=1.0):
    '''y = scaled r + gamma * Q_target(s', argmax_a Q_online(s', a)); terminal rows keep y = scaled r.'''
    best = np.argmax(q_online_next, axis=-1)
    bootstrap = np.take_along_axis(q_target_next, best[..., None], axis=-1)[..., 0]
    alive = 1.0 - np.asarray(terminal, dtype=np.float64)[:, None]
    return reward_scale * np.asarray(rewards) + gamma * alive * bootstrap


def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


class Trainer:

    '''
    Class:       Trainer
    Parameter:   network        = Network the rounds run on
                 schedule       = TrainSchedule
                 flags          = AblationFlags
                 encoder_config = EncoderConfig, ablation switches are overridden
                 prefit_config  = PrefitConfig
                 seed           = master seed

    Description: Owns the online and target encoders, the optimizer and
                 the replay buffer, and runs the pre-fit, imitation and
                 Double-DQN stages.
    '''
    def __init__(self, network, schedule=None, flags=None, encoder_config=None, prefit_config=None,
                 seed=0, scenario=None):
        self.network = network
        self.schedule = schedule or TrainSchedule()
        self.flags = flags or AblationFlags()
        self.prefit_config = prefit_config or PrefitConfig()
        self.seed = seed
        self.scenario = scenario or {}
        self.rng = np.random.default_rng(seed)

        values = (encoder_config or EncoderConfig()).to_dict()
        values.update(use_priors=self.flags.priors, use_cone=self.flags.cone_decay,
                      mean_speed=self.prefit_config.mean_speed,
                      deviation_range=self.prefit_config.deviation_range)
        config = EncoderConfig.from_dict(values)
        if config.feature_dim != 2 * LANES_PER_INTERSECTION:
            raise TrainingError('trainer: feature width {} does not match the {} lane observation'
                                .format(config.feature_dim, LANES_PER_INTERSECTION))

        priors = None
        if self.flags.pre_fit:
            priors = prefit_priors(self.prefit_config, network.num_intersections, config.layers,
                                   config.heads, config.d_model, config.t_max, config.prior_hidden, seed)
        self.online = EncoderParams(config, network.graph, self.rng, priors)
        self.target = self.online.copy()
        self.optimizer = Adam(self.online.parameters(), OptimizerConfig(self.schedule.learning_rate))
        self.replay = ReplayBuffer(self.schedule.replay_capacity, self.rng)
        self.updates = 0
        self.curve = []

    @property
    def config(self):
        return self.online.config

    def round_seed(self, round_index):
        return self.seed * 100003 + 2 * round_index + 1

    def eval_seed(self, round_index):
        return self.seed * 100003 + 2 * round_index + 2

    def collect_round(self, controller, seed, epsilon=None):
        s = self.schedule
        return collect_round(controller, self.network, seed, s.round_duration, s.decision_interval,
                             self.config.t_max, epsilon)

    def _q(self, params, transitions, next_state=False):
        snapshots = [t.next_snapshot if next_state else t.snapshot for t in transitions]
        return forward(assemble_tokens(snapshots, params), params)

    def _bootstrap_q(self, transitions):
        with no_grad():
            online = self._q(self.online, transitions, next_state=True).value
            target = self._q(self.target, transitions, next_state=True).value
        return online, target

    def il_update(self, batch):
        '''Behavior cloning of the Max-Pressure phases; returns the batch loss.'''
        total = 0.0
        for chunk in _chunks(batch, self.schedule.chunk_size):
            labels = np.stack([t.actions for t in chunk])
            loss = cross_entropy_with_logits(self._q(self.online, chunk), labels) * (len(chunk) / len(batch))
            loss.backward()
            total += float(loss.value)
        self.optimizer.step()
        return total

    def ddqn_update(self, batch):
        s = self.schedule
        total = 0.0
        for chunk in _chunks(batch, s.chunk_size):
            q_online_next, q_target_next = self._bootstrap_q(chunk)
            rewards = np.stack([t.rewards for t in chunk])
            terminal = np.array([t.terminal for t in chunk])
            y = double_dqn_targets(rewards, terminal, q_online_next, q_target_next, s.gamma, s.reward_scale)
            if not np.all(np.isfinite(y)):
                raise NumericsError('ddqn: non-finite target (reward range {}..{}, max |Q_target| {})'
                                    .format(rewards.min(), rewards.max(), np.abs(q_target_next).max()))
            actions = np.stack([t.actions for t in chunk])
            onehot = np.eye(self.config.num_actions)[actions]
            chosen = (self._q(self.online, chunk) * onehot).sum(axis=-1)
            loss = huber(chosen, y, s.huber_delta) * (len(chunk) / len(batch))
            loss.backward()
            total += float(loss.value)
        self.optimizer.step()
        self.updates += 1
        if self.updates % s.sync_period == 0:
            self.sync_target()
        return total

    def sync_target(self):
        logging.debug(' * target network synced after %d updates', self.updates)
        self.target.assign(self.online)

    def evaluate(self, seed):
        controller = DePTController(self.online, 0.0)
        _, result = self.collect_round(controller, seed)
        return result

    def checkpoint_meta(self):
        return {'ablation': self.flags.to_dict(), 'scenario': self.scenario, 'seed': self.seed,
                'updates': self.updates}

    def save(self, path):
        return save_checkpoint(path, self.online, self.checkpoint_meta())

    def run_round(self, round_index):
        s = self.schedule
        imitation = round_index < s.il_rounds
        epsilon = s.epsilon(round_index)
        started = time.perf_counter()
        if round_index == s.il_rounds and s.il_rounds > 0:
            # the first RL round bootstraps from the imitation weights
            self.sync_target()
        if imitation:
            controller = MaxPressureController()
            transitions, collected = self.collect_round(controller, self.round_seed(round_index))
        else:
            controller = DePTController(self.online, epsilon, self.rng)
            transitions, collected = self.collect_round(controller, self.round_seed(round_index), epsilon)
        self.replay.extend(transitions)

        losses = []
        for _ in range(s.epochs_per_round):
            batch = self.replay.sample(s.batch_size)
            losses.append(self.il_update(batch) if imitation else self.ddqn_update(batch))
        loss = float(np.mean(losses)) if losses else 0.0
        if not math.isfinite(loss):
            raise NumericsError('round {}: loss is {}'.format(round_index, loss))

        evaluated = self.evaluate(self.eval_seed(round_index))
        row = {'round': round_index, 'stage': 'il' if imitation else 'rl', 'loss': loss,
               'AvgTT': evaluated.avg_travel_time, 'AvgQue': evaluated.avg_queue, 'epsilon': epsilon,
               'collect_AvgTT': collected.avg_travel_time, 'collect_AvgQue': collected.avg_queue}
        logging.info('* round %d (%s): loss %.4f AvgTT %.2f AvgQue %.3f eps %.3f (%.1f s)',
                     round_index, row['stage'], loss, row['AvgTT'], row['AvgQue'], epsilon,
                     time.perf_counter() - started)
        return row

    '''
    Function:   train
    Parameter:  checkpoint_path = where the final (or diverged) parameters go
                curve_path      = learning-curve CSV, rewritten every round

    Description: Runs every round of the schedule. A non-finite loss, target
                 or gradient saves the current parameters and raises
                 DivergenceError.
    '''
    def train(self, checkpoint_path=None, curve_path=None):
        for r in range(self.schedule.total_rounds):
            try:
                row = self.run_round(r)
            except NumericsError as e:
                path = checkpoint_path or 'diverged.npz'
                self.save(path)
                raise DivergenceError('training diverged in round {}: {}'.format(r, e), path)
            self.curve.append(row)
            if curve_path:
                write_learning_curve(curve_path, self.curve)
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.curve


def write_learning_curve(path, rows):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='') as fd:
        writer = csv.DictWriter(fd, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def train(schedule, flags, network, seed, encoder_config=None, prefit_config=None, out_dir=None,
          scenario=None):
    trainer = Trainer(network, schedule, flags, encoder_config, prefit_config, seed, scenario)
    checkpoint_path = os.path.join(out_dir, 'checkpoint.npz') if out_dir else None
    curve_path = os.path.join(out_dir, 'learning_curve.csv') if out_dir else None
    curve = trainer.train(checkpoint_path, curve_path)
    return trainer, curve
