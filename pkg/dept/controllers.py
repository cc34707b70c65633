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

import logging

import numpy as np

from dept.encoder import q_values
from dept.trafficsim import LANES_PER_INTERSECTION, NUM_PHASES, movement_queues


class ControllerError(Exception):
    pass


class Controller:

    '''
    Class:       Controller
    Description: Joint signal controller. act() gets the simulation state
                 (observations and clock) and the token history snapshot,
                 and returns one phase index per intersection.
    '''
    name = 'controller'

    def reset(self):
        pass

    def act(self, state, snapshot=None):
        raise NotImplementedError


class FixedTimePlan:

    def __init__(self, phases, durations, num_phases=None):
        if len(phases) != len(durations) or not phases:
            raise ControllerError('fixed-time plan: {} phases but {} durations'.format(len(phases), len(durations)))
        if any(d <= 0 for d in durations):
            raise ControllerError('fixed-time plan: durations must be positive, got {}'.format(durations))
        num_phases = num_phases if num_phases is not None else max(phases) + 1
        if set(phases) != set(range(num_phases)):
            raise ControllerError('fixed-time plan: sequence {} does not cover all {} phases'.format(phases, num_phases))
        self.phases = tuple(int(p) for p in phases)
        self.durations = tuple(durations)
        self.cycle = sum(self.durations)
        self._ends = np.cumsum(self.durations)

    def phase_at(self, clock):
        position = clock % self.cycle
        return self.phases[int(np.searchsorted(self._ends, position, side='right'))]


def fixed_time_act(plans, clock):
    if isinstance(plans, FixedTimePlan):
        plans = [plans]
    return np.array([plan.phase_at(clock) for plan in plans], dtype=np.int64)


def _largest_remainder(shares, slots):
    total = float(np.sum(shares))
    if total <= 0:
        shares = np.ones(len(shares))
        total = float(len(shares))
    quota = np.asarray(shares, dtype=np.float64) * slots / total
    counts = np.floor(quota).astype(np.int64)
    # stable sort keeps the lowest phase first among equal remainders
    order = np.argsort(-(quota - counts), kind='stable')
    for k in order[:slots - int(counts.sum())]:
        counts[k] += 1
    return counts


'''
Function:   derive_fixed_time_plan
Parameter:  network  = Network with flows
            cycle    = cycle length in seconds
            interval = decision interval, the unit of green time

Description: Per intersection, every phase gets one interval and the rest
             of the cycle is split in whole intervals in proportion to the
             nominal demand crossing the phase's movements.
'''
def derive_fixed_time_plan(network, cycle=60, interval=10):
    if interval <= 0 or cycle % interval != 0:
        raise ControllerError('fixed-time: cycle {} is not a multiple of interval {}'.format(cycle, interval))
    slots = cycle // interval
    if slots < NUM_PHASES:
        raise ControllerError('fixed-time: cycle {} too short for {} phases'.format(cycle, NUM_PHASES))

    demand = np.zeros((network.num_intersections, LANES_PER_INTERSECTION))
    for flow in network.flows:
        for lane_id in flow.route:
            lane = network.lanes[lane_id]
            demand[lane.intersection, lane_id % LANES_PER_INTERSECTION] += flow.rate

    plans = []
    for i in range(network.num_intersections):
        phase_demand = network.phase_masks.astype(np.float64) @ demand[i]
        counts = 1 + _largest_remainder(phase_demand, slots - NUM_PHASES)
        plans.append(FixedTimePlan(list(range(NUM_PHASES)), [int(c) * interval for c in counts]))
    logging.debug(' * fixed-time green split of intersection 0: %s', plans[0].durations)
    return plans


'''
Function:   max_pressure_act
Parameter:  upstream    = (intersections, movements) queue counts
            downstream  = (intersections, movements) downstream road queues
            phase_masks = (phases, movements) bool, movements of each phase

Description: Picks per intersection the phase with the largest summed
             upstream minus downstream queue; ties go to the lowest index.
'''
def max_pressure_act(upstream, downstream, phase_masks):
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    downstream = np.atleast_2d(np.asarray(downstream, dtype=np.float64))
    masks = np.asarray(phase_masks, dtype=np.float64)
    if upstream.shape != downstream.shape or upstream.shape[1] != masks.shape[1]:
        raise ControllerError('max-pressure: shapes {}, {} and {} do not match'
                              .format(upstream.shape, downstream.shape, masks.shape))
    if upstream.min() < 0 or downstream.min() < 0:
        raise ControllerError('max-pressure: queue counts must be >= 0')
    pressure = (upstream - downstream) @ masks.T
    return np.argmax(pressure, axis=1)


class FixedTimeController(Controller):

    name = 'fixed-time'

    def __init__(self, plans):
        self.plans = plans

    def act(self, state, snapshot=None):
        return fixed_time_act(self.plans, state.clock)


class MaxPressureController(Controller):

    name = 'max-pressure'

    def act(self, state, snapshot=None):
        network = state.network
        queues = [movement_queues(state, i) for i in range(network.num_intersections)]
        upstream = np.array([q[0] for q in queues])
        downstream = np.array([q[1] for q in queues])
        return max_pressure_act(upstream, downstream, network.phase_masks)


class DePTController(Controller):

    '''
    Class:       DePTController
    Parameter:   params  = EncoderParams, read only
                 epsilon = probability of a uniform random phase per node
                 rng     = numpy Generator for exploration

    Description: Greedy (or epsilon-greedy) choice on the encoder's
                 per-node Q-values.
    '''
    name = 'dept'

    def __init__(self, params, epsilon=0.0, rng=None):
        if not 0.0 <= epsilon <= 1.0:
            raise ControllerError('dept: epsilon must be in [0,1], got {}'.format(epsilon))
        self.params = params
        self.epsilon = epsilon
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def act(self, state, snapshot=None):
        if snapshot is None:
            raise ControllerError('dept: a history snapshot is required')
        greedy = np.argmax(q_values(snapshot, self.params), axis=1)
        if self.epsilon <= 0.0:
            return greedy
        explore = self.rng.random(greedy.shape[0]) < self.epsilon
        random_actions = self.rng.integers(0, self.params.config.num_actions, greedy.shape[0])
        return np.where(explore, random_actions, greedy)
