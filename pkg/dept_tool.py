#!/usr/bin/python3

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

import argparse
import concurrent.futures
import csv
import logging
import os
import sys

import numpy as np

from dept.checkpoint import CheckpointError, load_checkpoint, read_checkpoint_meta
from dept.config import ConfigError, ExperimentConfig, ScenarioConfig, load_experiment
from dept.controllers import (DePTController, FixedTimeController, MaxPressureController,
                              derive_fixed_time_plan)
from dept.cpsgraph import build_graph, token_index
from dept.encoder import (EncoderConfig, EncoderParams, FeatureHistory, HistorySnapshot,
                          assemble_tokens, attention_components, forward)
from dept.numerics import gradient_check
from dept.priors import prefit_priors
from dept.trafficsim import LANES_PER_INTERSECTION, node_features, reset_state
from dept.trainer import AblationFlags, DivergenceError, collect_round, train

COMPONENTS = ('cone', 'time_lut', 'residual', 'total')

common = argparse.ArgumentParser(add_help=False)
common.add_argument('--config', help='experiment configuration (JSON)')
common.add_argument('--seed', type=int, help='master seed, overrides the configuration')
common.add_argument('--workers', type=int, default=1, help='parallel rollout workers')
common.add_argument('--out', help='output directory, overrides the configuration')
common.add_argument('-v', '--verbose', action="store_true", help='set verbosity')
common.add_argument('--debug', action="store_true", help=argparse.SUPPRESS)

parser = argparse.ArgumentParser(description='Train and evaluate DePT traffic signal controllers.')
commands = parser.add_subparsers(dest='command', metavar='command')
commands.required = True

simulate_parser = commands.add_parser('simulate', parents=[common], help='run a controller and print AvgTT/AvgQue')
simulate_parser.add_argument('--controller', choices=('fixed-time', 'max-pressure', 'dept'), default='fixed-time')
simulate_parser.add_argument('--checkpoint', help='trained parameters for --controller dept')
simulate_parser.add_argument('--runs', type=int, default=1, help='number of consecutive seeds')

train_parser = commands.add_parser('train', parents=[common], help='pre-fit, imitation and Double-DQN training')
train_parser.add_argument('--ablation', choices=AblationFlags.NAMES, help='ablation arm')

evaluate_parser = commands.add_parser('evaluate', parents=[common], help='greedy replay of a checkpoint')
evaluate_parser.add_argument('--checkpoint', required=True, help='trained parameters')
evaluate_parser.add_argument('--runs', type=int, default=1, help='number of consecutive seeds')

gradcheck_parser = commands.add_parser('grad-check', parents=[common], help='finite-difference check of the full model')
gradcheck_parser.add_argument('--tolerance', type=float, default=1e-4, help='largest accepted relative error')

dump_parser = commands.add_parser('dump-attention', parents=[common], help='export the attention decomposition')
dump_parser.add_argument('--checkpoint', help='trained parameters, pre-fitted priors if omitted')
dump_parser.add_argument('--ablation', choices=AblationFlags.NAMES, help='ablation arm without checkpoint')
dump_parser.add_argument('--block', type=int, help='encoder block, the last one if omitted')
dump_parser.add_argument('--head', type=int, default=0)
dump_parser.add_argument('--step', type=int, default=30, help='decision step the history is taken at')
dump_parser.add_argument('--center', type=int, help='query node of the column export, the middle intersection if omitted')


def _experiment(args):
    experiment = load_experiment(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        experiment.seed = args.seed
    if args.out:
        experiment.output_dir = args.out
    if getattr(args, 'ablation', None):
        experiment.ablation = args.ablation
    return experiment


def _make_controller(name, network, scenario, checkpoint):
    if name == 'fixed-time':
        return FixedTimeController(derive_fixed_time_plan(network, interval=scenario.decision_interval)), 1
    if name == 'max-pressure':
        return MaxPressureController(), 1
    if not checkpoint:
        raise ConfigError('--controller dept needs --checkpoint')
    params, _ = load_checkpoint(checkpoint, network.graph)
    return DePTController(params, 0.0), params.config.t_max


def _run_once(scenario_values, controller_name, checkpoint, seed):
    scenario = ScenarioConfig.from_dict(scenario_values)
    network, _ = scenario.build(seed)
    controller, t_max = _make_controller(controller_name, network, scenario, checkpoint)
    _, result = collect_round(controller, network, seed, scenario.duration, scenario.decision_interval, t_max)
    return result.avg_travel_time, result.avg_queue, result.vehicles_served


def _run_many(experiment, controller_name, checkpoint, runs, workers):
    seeds = [experiment.seed + k for k in range(runs)]
    values = experiment.scenario.to_dict()
    if workers > 1 and runs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_once, [values] * runs, [controller_name] * runs,
                                    [checkpoint] * runs, seeds))
    else:
        results = [_run_once(values, controller_name, checkpoint, seed) for seed in seeds]
    return seeds, results


def _append_metrics(out_dir, seeds, results):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, 'metrics.csv')
    new = not os.path.exists(path)
    with open(path, 'a', newline='') as fd:
        writer = csv.writer(fd)
        if new:
            writer.writerow(['round', 'AvgTT', 'AvgQue', 'vehicles served'])
        for seed, (avg_tt, avg_que, served) in zip(seeds, results):
            writer.writerow([seed, avg_tt, avg_que, served])
    return path


def _print_runs(label, seeds, results):
    for seed, (avg_tt, avg_que, served) in zip(seeds, results):
        print('{} seed {}: AvgTT {:.2f} s, AvgQue {:.4f} veh, served {}'.format(label, seed, avg_tt, avg_que, served))
    if len(results) > 1:
        print('{} mean: AvgTT {:.2f} s, AvgQue {:.4f} veh'.format(
            label, np.mean([r[0] for r in results]), np.mean([r[1] for r in results])))


def cmd_simulate(args):
    experiment = _experiment(args)
    if args.runs < 1:
        raise ConfigError('--runs must be >= 1')
    logging.info('* simulating %s on %dx%d %s', args.controller, experiment.scenario.rows,
                 experiment.scenario.cols, experiment.scenario.preset)
    seeds, results = _run_many(experiment, args.controller, args.checkpoint, args.runs, args.workers)
    _print_runs(args.controller, seeds, results)
    _append_metrics(experiment.output_dir, seeds, results)
    return 0


def cmd_train(args):
    experiment = _experiment(args)
    network, _ = experiment.scenario.build(experiment.seed)
    logging.info('* training arm %s with seed %d', experiment.ablation, experiment.seed)
    _, curve = train(experiment.schedule, experiment.flags, network, experiment.seed,
                     experiment.encoder, experiment.prefit, experiment.output_dir,
                     experiment.scenario.to_dict())
    if curve:
        last = curve[-1]
        print('round {}: AvgTT {:.2f} s, AvgQue {:.4f} veh'.format(last['round'], last['AvgTT'], last['AvgQue']))
    print('wrote {}'.format(os.path.join(experiment.output_dir, 'checkpoint.npz')))
    return 0


def cmd_evaluate(args):
    experiment = _experiment(args)
    if not args.config:
        meta = read_checkpoint_meta(args.checkpoint)
        if meta.get('scenario'):
            experiment.scenario = ScenarioConfig.from_dict(meta['scenario'])
    if args.runs < 1:
        raise ConfigError('--runs must be >= 1')
    seeds, results = _run_many(experiment, 'dept', args.checkpoint, args.runs, args.workers)
    _print_runs('dept', seeds, results)
    _append_metrics(experiment.output_dir, seeds, results)
    return 0


'''
Function:   gradient_check_instance
Parameter:  seed = seed of weights and inputs

Description: Two nodes 300 m apart, T_max = 2, two blocks of two heads,
             all priors active. Returns the scalar function sum(Q) and
             the parameter list.
'''
def gradient_check_instance(seed):
    rng = np.random.default_rng(seed)
    graph = build_graph([(0, (0.0, 0.0)), (1, (300.0, 0.0))], [(0, 1, 300.0), (1, 0, 300.0)])
    config = EncoderConfig(layers=2, heads=2, d_model=8, policy_dim=2, num_actions=4, feature_dim=4,
                           t_max=2, prior_hidden=4)
    params = EncoderParams(config, graph, rng)
    snapshot = HistorySnapshot(rng.normal(0.0, 1.0, (2, 2, 4)), rng.integers(0, 4, (2, 2)),
                               np.array([True, True]))

    def fn():
        return forward(assemble_tokens(snapshot, params), params).sum()
    return fn, params.parameters()


def cmd_grad_check(args):
    seed = args.seed if args.seed is not None else 0
    fn, params = gradient_check_instance(seed)
    logging.info('* gradient check over %d coordinates', sum(p.value.size for p in params))
    error = gradient_check(fn, params)
    print('max relative error: {:.3e}'.format(error))
    if not error < args.tolerance:
        print('gradient check failed: {:.3e} >= {:.3e}'.format(error, args.tolerance), file=sys.stderr)
        return 2
    return 0


def _attention_params(args, experiment, network):
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint, network.graph)
        return params
    flags = experiment.flags
    values = experiment.encoder.to_dict()
    values.update(use_priors=flags.priors, use_cone=flags.cone_decay,
                  mean_speed=experiment.prefit.mean_speed, deviation_range=experiment.prefit.deviation_range)
    config = EncoderConfig.from_dict(values)
    priors = None
    if flags.pre_fit:
        priors = prefit_priors(experiment.prefit, network.num_intersections, config.layers, config.heads,
                               config.d_model, config.t_max, config.prior_hidden, experiment.seed)
    return EncoderParams(config, network.graph, np.random.default_rng(experiment.seed), priors)


def _history_at(network, scenario, seed, t_max, step_index):
    # Max-Pressure drives the network up to the exported step
    if step_index == 0:
        state = reset_state(network, seed)
        history = FeatureHistory(network.num_intersections, 2 * LANES_PER_INTERSECTION, t_max)
        history.push(node_features(state), state.phase)
        return history.snapshot()
    transitions, _ = collect_round(MaxPressureController(), network, seed,
                                   step_index * scenario.decision_interval, scenario.decision_interval, t_max)
    return transitions[-1].next_snapshot


'''
Function:   center_column
Parameter:  parts   = attention_components result for one head
            network = grid the model runs on
            t_max   = history length
            center  = query intersection, the middle of the grid if None

Description: Scores of the centre node's current token against every token
             of its grid column. Entry [rho, r] is the key at lag rho on row
             r of that column; hidden keys are nan. Returns the query node
             and one T_max x rows matrix per component.
'''
def center_column(parts, network, t_max, center=None):
    if center is None:
        center = next(x.id for x in network.intersections
                      if x.row == network.rows // 2 and x.col == network.cols // 2)
    if not 0 <= center < network.num_intersections:
        raise ConfigError('--center must be in 0..{}, got {}'.format(network.num_intersections - 1, center))
    col = network.intersections[center].col
    column = [x.id for x in sorted(network.intersections, key=lambda x: x.row) if x.col == col]
    n = network.num_intersections
    query = token_index(center, 0, n, t_max)
    keys = np.array([[token_index(i, rho, n, t_max) for i in column] for rho in range(t_max)])
    hidden = parts['mask'][query, keys]
    return center, {name: np.where(hidden, np.nan, parts[name][query, keys]) for name in COMPONENTS}


def _write_matrix(path, header, matrix):
    with open(path, 'w', newline='') as fd:
        writer = csv.writer(fd)
        writer.writerow(header)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
    logging.info(' * wrote %s', path)


def cmd_dump_attention(args):
    experiment = _experiment(args)
    network, _ = experiment.scenario.build(experiment.seed)
    params = _attention_params(args, experiment, network)
    if args.step < 0:
        raise ConfigError('--step must be >= 0')
    block = params.config.layers - 1 if args.block is None else args.block
    if not 0 <= block < params.config.layers or not 0 <= args.head < params.config.heads:
        raise ConfigError('no head {} in block {} (model has {} blocks of {} heads)'.format(
            args.head, block, params.config.layers, params.config.heads))
    snapshot = _history_at(network, experiment.scenario, experiment.seed, params.config.t_max, args.step)
    parts = attention_components(block, args.head, assemble_tokens(snapshot, params), params)
    center, columns = center_column(parts, network, params.config.t_max, args.center)

    os.makedirs(experiment.output_dir, exist_ok=True)
    prefix = os.path.join(experiment.output_dir, 'attention_b{}_h{}_s{}_'.format(block, args.head, args.step))
    for name in COMPONENTS:
        header = ['block', block, 'head', args.head, 'step', args.step, 'component', name]
        _write_matrix(prefix + name + '.csv', header, np.where(parts['mask'], np.nan, parts[name]))
        _write_matrix('{}{}_center{}.csv'.format(prefix, name, center), header + ['center', center], columns[name])
    print('wrote {} matrices of {} tokens and the column of node {} to {}'.format(
        len(COMPONENTS), parts['total'].shape[0], center, experiment.output_dir))
    return 0


HANDLERS = {
    'simulate': cmd_simulate,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'grad-check': cmd_grad_check,
    'dump-attention': cmd_dump_attention,
}


def run_command(argv):
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1

    if args.debug:
        loglevel = logging.DEBUG
    elif args.verbose:
        loglevel = logging.INFO
    else:
        loglevel = logging.WARNING
    logging.basicConfig(format='%(asctime)s %(levelname)-7s %(message)s', level=loglevel)

    try:
        return HANDLERS[args.command](args)
    except (ConfigError, CheckpointError) as e:
        print('error: {}'.format(e), file=sys.stderr)
        return 1
    except DivergenceError as e:
        print('error: {} (checkpoint {})'.format(e, e.checkpoint_path), file=sys.stderr)
        return 2
    except Exception as e:
        logging.debug('failure', exc_info=True)
        print('error: {}: {}'.format(type(e).__name__, e), file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(run_command(sys.argv[1:]))
