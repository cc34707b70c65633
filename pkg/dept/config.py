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

import json
import logging
import os

from dept.encoder import EncoderConfig, EncoderError
from dept.priors import PrefitConfig, PriorError
from dept.trafficsim import PRESETS, SimulationError, build_grid
from dept.trainer import AblationFlags, TrainingError, TrainSchedule

CONFIG_VERSION = 1

_SCENARIO_KEYS = ('rows', 'cols', 'lane_length', 'preset', 'rate_scale', 'duration',
                  'decision_interval', 'seed')
_EXPERIMENT_KEYS = ('scenario', 'scenario_file', 'encoder', 'schedule', 'prefit', 'ablation',
                    'seed', 'output_dir')


class ConfigError(Exception):
    pass


def load_json(path):
    if not os.path.isfile(path):
        raise ConfigError('{}: no such file'.format(path))
    try:
        with open(path) as fd:
            document = json.load(fd)
    except ValueError as e:
        raise ConfigError('{}: malformed JSON ({})'.format(path, e))
    if not isinstance(document, dict):
        raise ConfigError('{}: top level must be an object'.format(path))
    return document


def _check_keys(document, allowed, what):
    unknown = sorted(set(document) - set(allowed) - {'version'})
    if unknown:
        raise ConfigError('{}: unknown keys {}'.format(what, ', '.join(unknown)))


def _check_version(document, what):
    version = document.get('version')
    if version != CONFIG_VERSION:
        raise ConfigError('{}: version {} not supported (expected {})'.format(what, version, CONFIG_VERSION))


class ScenarioConfig:

    def __init__(self, rows=3, cols=3, lane_length=300.0, preset='grid-bi', rate_scale=1.0,
                 duration=1800, decision_interval=10, seed=0):
        if preset not in PRESETS:
            raise ConfigError('scenario: unknown preset {}, expected one of {}'.format(preset, ', '.join(PRESETS)))
        if rows < 1 or cols < 1:
            raise ConfigError('scenario: grid must be at least 1x1, got {}x{}'.format(rows, cols))
        if duration < decision_interval or decision_interval < 1:
            raise ConfigError('scenario: duration {} shorter than interval {}'.format(duration, decision_interval))
        self.rows = int(rows)
        self.cols = int(cols)
        self.lane_length = float(lane_length)
        self.preset = preset
        self.rate_scale = float(rate_scale)
        self.duration = int(duration)
        self.decision_interval = int(decision_interval)
        self.seed = int(seed)

    @classmethod
    def from_dict(cls, document, what='scenario'):
        _check_keys(document, _SCENARIO_KEYS, what)
        values = {k: v for k, v in document.items() if k != 'version'}
        try:
            return cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError('{}: bad value ({})'.format(what, e))

    def to_dict(self):
        return {k: getattr(self, k) for k in _SCENARIO_KEYS}

    def build(self, seed=None):
        try:
            return build_grid(self.rows, self.cols, self.lane_length, self.preset,
                              self.seed if seed is None else seed, self.rate_scale)
        except SimulationError as e:
            raise ConfigError('scenario: {}'.format(e))


def load_scenario(path):
    document = load_json(path)
    _check_version(document, path)
    return ScenarioConfig.from_dict(document, path)


class ExperimentConfig:

    '''
    Class:       ExperimentConfig
    Description: Everything a run needs: scenario, encoder shape, schedule,
                 pre-fit settings, ablation arm, seed and output directory.
                 Sections missing from the document take their defaults.
    '''
    def __init__(self, scenario=None, encoder=None, schedule=None, prefit=None, ablation='full',
                 seed=0, output_dir='out'):
        self.scenario = scenario or ScenarioConfig()
        self.encoder = encoder or EncoderConfig()
        self.prefit = prefit or PrefitConfig()
        if ablation not in AblationFlags.NAMES:
            raise ConfigError('ablation: unknown arm {}, expected one of {}'
                              .format(ablation, ', '.join(AblationFlags.NAMES)))
        self.ablation = ablation
        self.schedule = schedule or TrainSchedule(round_duration=self.scenario.duration,
                                                  decision_interval=self.scenario.decision_interval)
        self.seed = int(seed)
        self.output_dir = output_dir

    @property
    def flags(self):
        return AblationFlags.from_name(self.ablation)

    @classmethod
    def from_dict(cls, document, base_dir='.'):
        _check_version(document, 'experiment')
        _check_keys(document, _EXPERIMENT_KEYS, 'experiment')
        if 'scenario' in document and 'scenario_file' in document:
            raise ConfigError('experiment: give either scenario or scenario_file, not both')
        try:
            if 'scenario_file' in document:
                scenario = load_scenario(os.path.join(base_dir, document['scenario_file']))
            else:
                scenario = ScenarioConfig.from_dict(document.get('scenario', {}))
            encoder = EncoderConfig(**document.get('encoder', {}))
            prefit = PrefitConfig(**document.get('prefit', {}))
            schedule_values = {'round_duration': scenario.duration,
                               'decision_interval': scenario.decision_interval}
            schedule_values.update(document.get('schedule', {}))
            schedule = TrainSchedule(**schedule_values)
        except (TypeError, EncoderError, PriorError, TrainingError) as e:
            raise ConfigError('experiment: {}'.format(e))
        logging.debug(' * experiment config: %s, ablation %s', scenario.to_dict(), document.get('ablation', 'full'))
        return cls(scenario, encoder, schedule, prefit, document.get('ablation', 'full'),
                   document.get('seed', 0), document.get('output_dir', 'out'))


def load_experiment(path):
    document = load_json(path)
    return ExperimentConfig.from_dict(document, os.path.dirname(path) or '.')
