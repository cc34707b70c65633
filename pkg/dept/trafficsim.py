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

import collections
import logging

import numpy as np

from dept.cpsgraph import build_graph

APPROACHES = ('W', 'E', 'S', 'N')
TURNS = ('left', 'through', 'right')
LANES_PER_INTERSECTION = len(APPROACHES) * len(TURNS)

FREE_FLOW_SPEED = 10.0      # m/s
SATURATION_RATE = 0.5       # veh/s per movement
JAM_SPACING = 7.5           # m per vehicle

# approach -> direction of travel
_HEADING = {'W': 'E', 'E': 'W', 'S': 'N', 'N': 'S'}
_LEFT_OF = {'E': 'N', 'N': 'W', 'W': 'S', 'S': 'E'}
_RIGHT_OF = {'E': 'S', 'S': 'W', 'W': 'N', 'N': 'E'}
# heading -> (row step, col step, approach used at the next intersection)
_MOVE = {'E': (0, 1, 'W'), 'W': (0, -1, 'E'), 'N': (1, 0, 'S'), 'S': (-1, 0, 'N')}

PHASE_MOVEMENTS = (
    (('W', 'through'), ('W', 'right'), ('E', 'through'), ('E', 'right')),
    (('W', 'left'), ('E', 'left')),
    (('S', 'through'), ('S', 'right'), ('N', 'through'), ('N', 'right')),
    (('S', 'left'), ('N', 'left')),
)
NUM_PHASES = len(PHASE_MOVEMENTS)

PRESETS = {
    'grid-bi': {'W': 300.0, 'E': 300.0, 'S': 90.0, 'N': 90.0},
    'grid-uni': {'W': 300.0, 'N': 90.0},
}


class SimulationError(Exception):
    pass


def local_lane(approach, turn):
    return APPROACHES.index(approach) * len(TURNS) + TURNS.index(turn)


def _phase_masks():
    masks = np.zeros((NUM_PHASES, LANES_PER_INTERSECTION), dtype=bool)
    for phase, movements in enumerate(PHASE_MOVEMENTS):
        for approach, turn in movements:
            masks[phase, local_lane(approach, turn)] = True
    return masks


class Lane:

    '''
    Class:       Lane
    Parameter:   lane_id      = global id, intersection * 12 + local index
                 intersection = intersection the lane feeds
                 approach     = side the traffic comes from (W, E, S, N)
                 turn         = left, through or right
                 length       = meters

    Description: One incoming lane carrying exactly one movement. The
                 downstream road is the approach of the neighbor the
                 movement leads to, or None when it leaves the grid.
    '''
    def __init__(self, lane_id, intersection, approach, turn, length):
        self.id = lane_id
        self.intersection = intersection
        self.approach = approach
        self.turn = turn
        self.length = float(length)
        self.capacity = int(length / JAM_SPACING)
        self.travel_time = int(round(length / FREE_FLOW_SPEED))
        self.next_intersection = None
        self.next_approach = None
        self.downstream_lanes = ()


class Intersection:

    def __init__(self, node_id, row, col, location):
        self.id = node_id
        self.row = row
        self.col = col
        self.location = location
        self.lanes = tuple(range(node_id * LANES_PER_INTERSECTION, (node_id + 1) * LANES_PER_INTERSECTION))
        self.num_phases = NUM_PHASES


class FlowSpec:

    def __init__(self, route, rate, name=''):
        if rate < 0:
            raise SimulationError('flow {}: rate must be >= 0, got {}'.format(name, rate))
        if not route:
            raise SimulationError('flow {}: empty route'.format(name))
        self.route = tuple(route)
        self.rate = float(rate)
        self.name = name


class Network:

    def __init__(self, rows, cols, lane_length, intersections, lanes, flows, preset):
        self.rows = rows
        self.cols = cols
        self.lane_length = lane_length
        self.intersections = intersections
        self.lanes = lanes
        self.flows = flows
        self.preset = preset
        self.phase_masks = _phase_masks()
        self.graph = build_graph(
            [(x.id, x.location) for x in intersections],
            sorted({(lane.intersection, lane.next_intersection, lane_length)
                    for lane in lanes if lane.next_intersection is not None}))
        for flow in flows:
            self._check_route(flow)

    @property
    def num_intersections(self):
        return len(self.intersections)

    @property
    def num_lanes(self):
        return len(self.lanes)

    def _check_route(self, flow):
        for a, b in zip(flow.route[:-1], flow.route[1:]):
            lane = self.lanes[a]
            if b not in lane.downstream_lanes:
                raise SimulationError('flow {}: lane {} does not lead to lane {}'.format(flow.name, a, b))


class Vehicle:

    __slots__ = ('id', 'flow', 'route', 'leg', 'entry', 'exit')

    def __init__(self, vehicle_id, flow, route, entry):
        self.id = vehicle_id
        self.flow = flow
        self.route = route
        self.leg = 0
        self.entry = entry
        self.exit = None


class SimState:

    '''
    Class:       SimState
    Parameter:   network = Network
                 seed    = arrival process seed

    Description: Mutable simulation state: clock, per-lane queues and
                 in-flight schedules, vehicle records, active phases and
                 the running queue integral for AvgQue.
    '''
    def __init__(self, network, seed):
        n = network.num_lanes
        self.network = network
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.clock = 0
        self.ticks = 0
        self.queues = [collections.deque() for _ in range(n)]
        self.in_flight = [collections.deque() for _ in range(n)]
        self.queue_count = np.zeros(n, dtype=np.int64)
        self.flight_count = np.zeros(n, dtype=np.int64)
        self.credit = np.zeros(n)
        self.phase = np.zeros(network.num_intersections, dtype=np.int64)
        self.vehicles = []
        self.entered = 0
        self.exited = 0
        self.arrivals = np.zeros(len(network.flows), dtype=np.int64)
        self.queue_integral = 0.0
        self._rates = np.array([flow.rate for flow in network.flows]) / 3600.0


class LocalState:

    def __init__(self, clock, num_in, num_que):
        self.clock = clock
        self.num_in = num_in
        self.num_que = num_que


def _through_route(rows, cols, start, heading):
    # follows the through lanes from 'start' until the vehicle leaves the grid
    row, col = start
    d_row, d_col, approach = _MOVE[heading]
    route = []
    while 0 <= row < rows and 0 <= col < cols:
        node = row * cols + col
        route.append(node * LANES_PER_INTERSECTION + local_lane(approach, 'through'))
        row, col = row + d_row, col + d_col
    return route


def _preset_flows(rows, cols, preset, rate_scale):
    rates = PRESETS[preset]
    flows = []
    for origin, rate in rates.items():
        heading = _HEADING[origin]
        if origin in ('W', 'E'):
            for r in range(rows):
                start = (r, 0) if origin == 'W' else (r, cols - 1)
                flows.append(FlowSpec(_through_route(rows, cols, start, heading), rate * rate_scale,
                                      '{}{}-row{}'.format(origin, heading, r)))
        else:
            for c in range(cols):
                start = (0, c) if origin == 'S' else (rows - 1, c)
                flows.append(FlowSpec(_through_route(rows, cols, start, heading), rate * rate_scale,
                                      '{}{}-col{}'.format(origin, heading, c)))
    return flows


'''
Function:   build_grid
Parameter:  rows, cols  = grid size (rows grow northwards)
            lane_length = meters between neighbors
            preset      = grid-bi or grid-uni
            seed        = arrival process seed
            rate_scale  = multiplier on every preset rate

Description: Builds the 4-phase, 12-lane intersections of the grid, the
             straight-line boundary flows of the preset and a fresh state.
'''
def build_grid(rows, cols, lane_length=300.0, preset='grid-bi', seed=0, rate_scale=1.0):
    if rows < 1 or cols < 1:
        raise SimulationError('build_grid: rows and cols must be >= 1, got {}x{}'.format(rows, cols))
    if preset not in PRESETS:
        raise SimulationError('build_grid: unknown preset {}'.format(preset))
    if lane_length < FREE_FLOW_SPEED:
        raise SimulationError('build_grid: lane length {} too short'.format(lane_length))
    if rate_scale < 0:
        raise SimulationError('build_grid: rate scale must be >= 0, got {}'.format(rate_scale))

    intersections = []
    lanes = []
    for r in range(rows):
        for c in range(cols):
            node = r * cols + c
            intersections.append(Intersection(node, r, c, (c * lane_length, r * lane_length)))
            for approach in APPROACHES:
                for turn in TURNS:
                    lanes.append(Lane(len(lanes), node, approach, turn, lane_length))

    for lane in lanes:
        x = intersections[lane.intersection]
        heading = _HEADING[lane.approach]
        if lane.turn == 'left':
            heading = _LEFT_OF[heading]
        elif lane.turn == 'right':
            heading = _RIGHT_OF[heading]
        d_row, d_col, arrive = _MOVE[heading]
        row, col = x.row + d_row, x.col + d_col
        if 0 <= row < rows and 0 <= col < cols:
            lane.next_intersection = row * cols + col
            lane.next_approach = arrive
            base = lane.next_intersection * LANES_PER_INTERSECTION + APPROACHES.index(arrive) * len(TURNS)
            lane.downstream_lanes = tuple(range(base, base + len(TURNS)))

    flows = _preset_flows(rows, cols, preset, rate_scale)
    network = Network(rows, cols, lane_length, intersections, lanes, flows, preset)
    logging.info('* built %dx%d %s grid: %d lanes, %d flows', rows, cols, preset, len(lanes), len(flows))
    return network, reset_state(network, seed)


def reset_state(network, seed):
    return SimState(network, seed)


def _enter(state, flow_index, route, queued=False):
    vehicle = Vehicle(len(state.vehicles), flow_index, route, state.clock)
    state.vehicles.append(vehicle)
    state.entered += 1
    lane = route[0]
    if queued:
        state.queues[lane].append(vehicle.id)
        state.queue_count[lane] += 1
    else:
        state.in_flight[lane].append((state.clock + state.network.lanes[lane].travel_time, vehicle.id))
        state.flight_count[lane] += 1
    return vehicle


def inject_vehicle(state, route, queued=False):
    '''Puts one vehicle on the first lane of 'route' at the current clock.'''
    for a, b in zip(route[:-1], route[1:]):
        if b not in state.network.lanes[a].downstream_lanes:
            raise SimulationError('inject_vehicle: lane {} does not lead to lane {}'.format(a, b))
    return _enter(state, -1, tuple(route), queued)


def _tick(state):
    network = state.network
    t = state.clock

    if len(network.flows):
        counts = state.rng.poisson(state._rates)
        for f in np.nonzero(counts)[0]:
            for _ in range(counts[f]):
                _enter(state, f, network.flows[f].route)
            state.arrivals[f] += counts[f]

    for lane in np.nonzero(state.flight_count)[0]:
        flight = state.in_flight[lane]
        while flight and flight[0][0] <= t:
            _, vid = flight.popleft()
            state.queues[lane].append(vid)
            state.flight_count[lane] -= 1
            state.queue_count[lane] += 1

    green = network.phase_masks[state.phase].reshape(-1)
    state.credit = np.where(green, np.minimum(state.credit + SATURATION_RATE, 1.0), 0.0)
    for lane in np.nonzero(green & (state.credit >= 1.0) & (state.queue_count > 0))[0]:
        queue = state.queues[lane]
        while state.credit[lane] >= 1.0 and queue:
            vehicle = state.vehicles[queue[0]]
            if vehicle.leg + 1 < len(vehicle.route):
                target = vehicle.route[vehicle.leg + 1]
                if state.queue_count[target] + state.flight_count[target] >= network.lanes[target].capacity:
                    break
                queue.popleft()
                vehicle.leg += 1
                state.in_flight[target].append((t + 1 + network.lanes[target].travel_time, vehicle.id))
                state.flight_count[target] += 1
            else:
                queue.popleft()
                vehicle.exit = t + 1
                state.exited += 1
            state.queue_count[lane] -= 1
            state.credit[lane] -= 1.0

    state.queue_integral += float(state.queue_count.sum())
    state.ticks += 1
    state.clock = t + 1


'''
Function:   step
Parameter:  state    = SimState, advanced in place
            actions  = phase index per intersection (0-based)
            duration = seconds to simulate under these phases

Description: Each second: Poisson boundary arrivals, in-flight vehicles
             reaching their queue tail, then saturation-rate discharge on
             green movements limited by downstream space.
'''
def step(state, actions, duration):
    actions = np.asarray(actions)
    network = state.network
    if actions.shape != (network.num_intersections,):
        raise SimulationError('step: expected {} actions, got shape {}'.format(network.num_intersections, actions.shape))
    if not np.issubdtype(actions.dtype, np.integer):
        raise SimulationError('step: phase indices must be integers')
    if actions.size and (actions.min() < 0 or actions.max() >= NUM_PHASES):
        raise SimulationError('step: phase index out of range 0..{}'.format(NUM_PHASES - 1))
    if int(duration) != duration or duration < 1:
        raise SimulationError('step: duration must be a positive whole number of seconds, got {}'.format(duration))
    state.phase = actions.astype(np.int64).copy()
    for _ in range(int(duration)):
        _tick(state)
    return state


def observe(state, i):
    network = state.network
    if not 0 <= i < network.num_intersections:
        raise SimulationError('observe: no intersection {}'.format(i))
    lanes = slice(i * LANES_PER_INTERSECTION, (i + 1) * LANES_PER_INTERSECTION)
    num_que = state.queue_count[lanes].copy()
    num_in = num_que + state.flight_count[lanes]
    return LocalState(state.clock, num_in, num_que)


def observe_all(state):
    return [observe(state, i) for i in range(state.network.num_intersections)]


def node_features(state, scale=0.1):
    shape = (state.network.num_intersections, LANES_PER_INTERSECTION)
    num_que = state.queue_count.reshape(shape)
    num_in = num_que + state.flight_count.reshape(shape)
    return np.concatenate([num_in, num_que], axis=1).astype(np.float64) * scale


def node_queues(state):
    return state.queue_count.reshape(state.network.num_intersections, LANES_PER_INTERSECTION).sum(axis=1)


def movement_queues(state, i):
    '''Per-movement (upstream, downstream) queue counts of intersection i.'''
    network = state.network
    if not 0 <= i < network.num_intersections:
        raise SimulationError('movement_queues: no intersection {}'.format(i))
    upstream = np.zeros(LANES_PER_INTERSECTION, dtype=np.int64)
    downstream = np.zeros(LANES_PER_INTERSECTION, dtype=np.int64)
    for k, lane_id in enumerate(network.intersections[i].lanes):
        upstream[k] = state.queue_count[lane_id]
        lanes = network.lanes[lane_id].downstream_lanes
        if lanes:
            downstream[k] = state.queue_count[list(lanes)].sum()
    return upstream, downstream


def vehicles_in_network(state):
    return int(state.queue_count.sum() + state.flight_count.sum())


class SimMetrics:

    def __init__(self, avg_travel_time, avg_queue, vehicles_served, vehicles_entered):
        self.avg_travel_time = avg_travel_time
        self.avg_queue = avg_queue
        self.vehicles_served = vehicles_served
        self.vehicles_entered = vehicles_entered


'''
Function:   metrics
Parameter:  state   = SimState at the end of a run
            horizon = end time in seconds, defaults to the clock

Description: AvgTT over every vehicle that entered, still-travelling ones
             credited up to the horizon; AvgQue is the per-lane queue
             averaged over all simulated seconds. Both are 0 when empty.
'''
def metrics(state, horizon=None):
    horizon = state.clock if horizon is None else horizon
    if state.vehicles:
        times = [(v.exit if v.exit is not None else horizon) - v.entry for v in state.vehicles]
        avg_tt = float(np.mean(times))
    else:
        avg_tt = 0.0
    if state.ticks:
        avg_que = state.queue_integral / (state.ticks * state.network.num_lanes)
    else:
        avg_que = 0.0
    return SimMetrics(avg_tt, avg_que, state.exited, state.entered)
