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


class GraphError(Exception):
    pass


class Node:

    def __init__(self, node_id, location):
        self._id = node_id
        self._location = (float(location[0]), float(location[1]))

    @property
    def id(self):
        return self._id

    @property
    def location(self):
        return self._location


class CpsGraph:

    '''
    Class:       CpsGraph
    Parameter:   nodes = list of Node, ids 0..n-1 in order
                 edges = dict (i, j) -> road length in meters

    Description: Immutable node set with physical locations. The Euclidean
                 distance table is computed once and shared read-only.
    '''
    def __init__(self, nodes, edges):
        self.nodes = tuple(nodes)
        self.edges = dict(edges)
        self.locations = np.array([node.location for node in self.nodes], dtype=np.float64)
        self.locations.flags.writeable = False
        diff = self.locations[:, None, :] - self.locations[None, :, :]
        self.distances = np.linalg.norm(diff, axis=-1)
        self.distances.flags.writeable = False

    @property
    def num_nodes(self):
        return len(self.nodes)

    def distance(self, i, j):
        return float(self.distances[i, j])

    def token_count(self, t_max):
        return t_max * self.num_nodes


'''
Function:   build_graph
Parameter:  locations = list of (node id, (x, y)) pairs
            edges     = list of (i, j, length) triples

Description: Validates ids (dense, no duplicates) and edge endpoints and
             returns the CpsGraph.
'''
def build_graph(locations, edges=()):
    if not locations:
        raise GraphError('build_graph: at least one node is required')
    by_id = {}
    for node_id, location in locations:
        if node_id in by_id:
            raise GraphError('build_graph: duplicate node id {}'.format(node_id))
        by_id[node_id] = location
    if sorted(by_id) != list(range(len(by_id))):
        raise GraphError('build_graph: node ids must be 0..{} without gaps'.format(len(by_id) - 1))

    edge_table = {}
    for i, j, length in edges:
        if i not in by_id or j not in by_id:
            raise GraphError('build_graph: dangling edge ({}, {})'.format(i, j))
        edge_table[(i, j)] = float(length)

    nodes = [Node(node_id, by_id[node_id]) for node_id in range(len(by_id))]
    logging.debug('* built graph with %d nodes and %d edges', len(nodes), len(edge_table))
    return CpsGraph(nodes, edge_table)


def token_index(i, tau, num_nodes, t_max):
    if not 0 <= i < num_nodes:
        raise GraphError('token_index: node {} out of range 0..{}'.format(i, num_nodes - 1))
    if not 0 <= tau < t_max:
        raise GraphError('token_index: lag {} out of range 0..{}'.format(tau, t_max - 1))
    return tau * num_nodes + i


def token_coordinate(index, num_nodes, t_max):
    if not 0 <= index < num_nodes * t_max:
        raise GraphError('token_coordinate: index {} out of range'.format(index))
    return index % num_nodes, index // num_nodes


def token_coordinates(num_nodes, t_max):
    flat = np.arange(num_nodes * t_max)
    return flat % num_nodes, flat // num_nodes


'''
Function:   causal_mask
Parameter:  num_nodes = |V|
            t_max     = number of lags

Description: Boolean token-pair matrix, True where the key (lag rho) lies
             strictly in the future of the query (lag tau), i.e. rho < tau.
'''
def causal_mask(num_nodes, t_max):
    if num_nodes < 1 or t_max < 1:
        raise GraphError('causal_mask: sizes must be positive, got {} and {}'.format(num_nodes, t_max))
    _, lags = token_coordinates(num_nodes, t_max)
    return lags[None, :] < lags[:, None]
