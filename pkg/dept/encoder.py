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
import copy
import logging
import math

import numpy as np

from dept.cpsgraph import causal_mask, token_coordinates
from dept.numerics import MASK_SURROGATE, Parameter, Tensor, concat, no_grad
from dept.priors import DEFAULT_MEAN_SPEED, init_prior_params, prior_components


class EncoderError(Exception):
    pass


class EncoderConfig:

    '''
    Class:       EncoderConfig
    Parameter:   layers, heads, d_model = encoder stack shape
                 policy_dim  = width E of the policy embedding
                 num_actions = phases per node
                 feature_dim = per-node observation width
                 temperature = softmax temperature, sqrt(d_model / heads) if None
                 t_max       = history length in decision steps
                 use_priors  = False gives the plain transformer encoder
                 use_cone    = False drops the ConeDecay term only

    Description: Static shape and ablation description of the encoder.
    '''
    def __init__(self, layers=2, heads=4, d_model=64, policy_dim=8, num_actions=4, feature_dim=24,
                 temperature=None, t_max=10, ffn_dim=None, prior_hidden=16,
                 mean_speed=DEFAULT_MEAN_SPEED, deviation_range=3.0, use_priors=True, use_cone=True):
        if layers < 1 or heads < 1:
            raise EncoderError('encoder: layers and heads must be >= 1, got {} and {}'.format(layers, heads))
        if d_model % heads != 0:
            raise EncoderError('encoder: d_model {} not divisible by {} heads'.format(d_model, heads))
        if t_max < 1:
            raise EncoderError('encoder: t_max must be >= 1, got {}'.format(t_max))
        if num_actions < 1 or feature_dim < 1 or policy_dim < 1:
            raise EncoderError('encoder: action, feature and policy widths must be positive')
        self.layers = int(layers)
        self.heads = int(heads)
        self.d_model = int(d_model)
        self.d_k = self.d_model // self.heads
        self.policy_dim = int(policy_dim)
        self.num_actions = int(num_actions)
        self.feature_dim = int(feature_dim)
        self.temperature = float(temperature) if temperature is not None else math.sqrt(self.d_k)
        if self.temperature <= 0:
            raise EncoderError('encoder: temperature must be positive, got {}'.format(temperature))
        self.t_max = int(t_max)
        self.ffn_dim = int(ffn_dim) if ffn_dim is not None else 2 * self.d_model
        self.prior_hidden = int(prior_hidden)
        self.mean_speed = float(mean_speed)
        self.deviation_range = float(deviation_range)
        self.use_priors = bool(use_priors)
        # no priors means no cone either
        self.use_cone = bool(use_cone) and self.use_priors

    def to_dict(self):
        return {
            'layers': self.layers, 'heads': self.heads, 'd_model': self.d_model,
            'policy_dim': self.policy_dim, 'num_actions': self.num_actions,
            'feature_dim': self.feature_dim, 'temperature': self.temperature,
            't_max': self.t_max, 'ffn_dim': self.ffn_dim, 'prior_hidden': self.prior_hidden,
            'mean_speed': self.mean_speed, 'deviation_range': self.deviation_range,
            'use_priors': self.use_priors, 'use_cone': self.use_cone,
        }

    @classmethod
    def from_dict(cls, values):
        try:
            return cls(**values)
        except TypeError as e:
            raise EncoderError('encoder: bad configuration keys: {}'.format(e))


class EncoderParams:

    def __init__(self, config, graph, rng=None, priors=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.config = config
        self.graph = graph

        def normal(shape, fan_in, name):
            return Parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), name)

        self.input_w = normal((c.feature_dim + c.policy_dim, c.d_model), c.feature_dim + c.policy_dim, 'input.w')
        self.input_b = Parameter(np.zeros(c.d_model), 'input.b')
        self.policy = Parameter(rng.normal(0.0, 1.0, (c.num_actions, c.policy_dim)), 'policy')

        self.blocks = []
        for l in range(c.layers):
            prefix = 'block{}'.format(l)
            block = {
                'wq': [normal((c.d_model, c.d_k), c.d_model, '{}.head{}.wq'.format(prefix, k)) for k in range(c.heads)],
                'wk': [normal((c.d_model, c.d_k), c.d_model, '{}.head{}.wk'.format(prefix, k)) for k in range(c.heads)],
                'wv': [normal((c.d_model, c.d_k), c.d_model, '{}.head{}.wv'.format(prefix, k)) for k in range(c.heads)],
                'wo': normal((c.d_model, c.d_model), c.d_model, prefix + '.wo'),
                'bo': Parameter(np.zeros(c.d_model), prefix + '.bo'),
                'ln1_g': Parameter(np.ones(c.d_model), prefix + '.ln1.g'),
                'ln1_b': Parameter(np.zeros(c.d_model), prefix + '.ln1.b'),
                'ffn_w1': normal((c.d_model, c.ffn_dim), c.d_model, prefix + '.ffn.w1'),
                'ffn_b1': Parameter(np.zeros(c.ffn_dim), prefix + '.ffn.b1'),
                'ffn_w2': normal((c.ffn_dim, c.d_model), c.ffn_dim, prefix + '.ffn.w2'),
                'ffn_b2': Parameter(np.zeros(c.d_model), prefix + '.ffn.b2'),
                'ln2_g': Parameter(np.ones(c.d_model), prefix + '.ln2.g'),
                'ln2_b': Parameter(np.zeros(c.d_model), prefix + '.ln2.b'),
            }
            self.blocks.append(block)

        self.q_w = normal((c.d_model, c.num_actions), c.d_model, 'qhead.w')
        self.q_b = Parameter(np.zeros(c.num_actions), 'qhead.b')

        if not c.use_priors:
            self.priors = None
        elif priors is not None:
            if len(priors) != c.layers or any(len(row) != c.heads for row in priors):
                raise EncoderError('encoder: priors must be a {}x{} grid'.format(c.layers, c.heads))
            self.priors = priors
        else:
            self.priors = [[init_prior_params(graph.num_nodes, c.d_model, c.t_max, c.mean_speed,
                                              c.prior_hidden, c.deviation_range, rng,
                                              name='block{}.head{}.prior'.format(l, k))
                            for k in range(c.heads)] for l in range(c.layers)]

        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise EncoderError('encoder: duplicate parameter names')

    def parameters(self):
        params = [self.input_w, self.input_b, self.policy]
        for block in self.blocks:
            for key in ('wq', 'wk', 'wv'):
                params.extend(block[key])
            params.extend(block[key] for key in ('wo', 'bo', 'ln1_g', 'ln1_b', 'ffn_w1', 'ffn_b1',
                                                 'ffn_w2', 'ffn_b2', 'ln2_g', 'ln2_b'))
        params.extend([self.q_w, self.q_b])
        if self.priors is not None:
            for row in self.priors:
                for prior in row:
                    params.extend(prior.parameters())
        return params

    def named_parameters(self):
        return collections.OrderedDict((p.name, p) for p in self.parameters())

    def copy(self):
        # the graph is immutable and shared
        return copy.deepcopy(self, memo={id(self.graph): self.graph})

    def assign(self, other):
        mine = self.named_parameters()
        theirs = other.named_parameters()
        if list(mine) != list(theirs):
            raise EncoderError('encoder: cannot assign parameters of a different architecture')
        for name, p in mine.items():
            p.assign(theirs[name].value)


class HistorySnapshot:

    def __init__(self, features, actions, valid):
        self.features = features
        self.actions = actions
        self.valid = valid


class FeatureHistory:

    '''
    Class:       FeatureHistory
    Parameter:   num_nodes   = |V|
                 feature_dim = per-node observation width
                 t_max       = number of lags kept

    Description: Rolling buffer of per-node (features, phase) pairs. Lag 0 is
                 the most recent push; lags not yet observed are zero-filled
                 and flagged invalid.
    '''
    def __init__(self, num_nodes, feature_dim, t_max):
        self.num_nodes = num_nodes
        self.feature_dim = feature_dim
        self.t_max = t_max
        self._entries = collections.deque(maxlen=t_max)

    def __len__(self):
        return len(self._entries)

    def reset(self):
        self._entries.clear()

    def push(self, features, actions):
        features = np.asarray(features, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        if features.shape != (self.num_nodes, self.feature_dim):
            raise EncoderError('history: features of shape {} expected {}'
                               .format(features.shape, (self.num_nodes, self.feature_dim)))
        if actions.shape != (self.num_nodes,):
            raise EncoderError('history: actions of shape {} expected ({},)'.format(actions.shape, self.num_nodes))
        self._entries.appendleft((features.copy(), actions.copy()))

    def snapshot(self):
        features = np.zeros((self.t_max, self.num_nodes, self.feature_dim))
        actions = np.zeros((self.t_max, self.num_nodes), dtype=np.int64)
        valid = np.zeros(self.t_max, dtype=bool)
        for lag, (f, a) in enumerate(self._entries):
            features[lag] = f
            actions[lag] = a
            valid[lag] = True
        return HistorySnapshot(features, actions, valid)


class TokenBatch:

    '''
    Class:       TokenBatch
    Parameter:   embeddings = Tensor (B, T_max * |V|, d_model), lag-major
                 valid      = bool (B, T_max * |V|)
                 node_ids, lags = token coordinates in layout order
                 mask       = bool (B, N, N), True for hidden key tokens
    '''
    def __init__(self, embeddings, valid, node_ids, lags, mask):
        self.embeddings = embeddings
        self.valid = valid
        self.node_ids = node_ids
        self.lags = lags
        self.mask = mask

    @property
    def batch_size(self):
        return self.valid.shape[0]

    @property
    def num_tokens(self):
        return self.valid.shape[1]

    def with_embeddings(self, embeddings):
        return TokenBatch(embeddings, self.valid, self.node_ids, self.lags, self.mask)


def _stack_snapshots(snapshots):
    if isinstance(snapshots, HistorySnapshot):
        snapshots = [snapshots]
    if not snapshots:
        raise EncoderError('assemble_tokens: empty batch')
    features = np.stack([s.features for s in snapshots])
    actions = np.stack([s.actions for s in snapshots])
    valid = np.stack([s.valid for s in snapshots])
    return features, actions, valid


'''
Function:   assemble_tokens
Parameter:  snapshots = HistorySnapshot or list of them (one per batch element)
            params    = EncoderParams

Description: token(i, tau) = project([f_{i,t-tau} || P[a_{i,t-tau}]]) in
             lag-major order. Invalid tokens are zeroed before the projection
             and hidden as keys; each token still sees itself so that no
             attention row is empty.
'''
def assemble_tokens(snapshots, params):
    c = params.config
    features, actions, lag_valid = _stack_snapshots(snapshots)
    batch, t_max, num_nodes = actions.shape
    if t_max != c.t_max or num_nodes != params.graph.num_nodes:
        raise EncoderError('assemble_tokens: history shape {} does not match t_max {} and {} nodes'
                           .format(actions.shape, c.t_max, params.graph.num_nodes))
    if features.shape[-1] != c.feature_dim:
        raise EncoderError('assemble_tokens: feature width {} expected {}'.format(features.shape[-1], c.feature_dim))
    if actions.min() < 0 or actions.max() >= c.num_actions:
        raise EncoderError('assemble_tokens: action index out of range 0..{}'.format(c.num_actions - 1))

    n = t_max * num_nodes
    features = features.reshape(batch, n, c.feature_dim)
    actions = actions.reshape(batch, n)
    valid = np.repeat(lag_valid, num_nodes, axis=1)

    x = concat([Tensor(features), params.policy.take(actions, axis=0)], axis=-1)
    x = x * valid[:, :, None].astype(np.float64)
    embeddings = x @ params.input_w + params.input_b

    node_ids, lags = token_coordinates(num_nodes, t_max)
    mask = causal_mask(num_nodes, t_max)[None, :, :] | ~valid[:, None, :]
    diagonal = np.arange(n)
    mask[:, diagonal, diagonal] = False
    return TokenBatch(embeddings, valid, node_ids, lags, mask)


def _head_terms(x, block_index, head, batch, params, queries=None):
    # queries = leading tokens whose rows are scored; None scores every token
    block = params.blocks[block_index]
    queries = batch.num_tokens if queries is None else queries
    xq = x if queries == batch.num_tokens else x.take(np.arange(queries), axis=1)
    residual = (xq @ block['wq'][head]) @ (x @ block['wk'][head]).transpose()
    if params.priors is None:
        return residual, None
    shape = x.shape
    phi_query = xq.reshape(shape[0], queries, 1, shape[2])
    phi_key = x.reshape(shape[0], 1, shape[1], shape[2])
    parts = prior_components(phi_query, phi_key,
                             batch.node_ids[:queries, None], batch.node_ids[None, :],
                             batch.lags[:queries, None], batch.lags[None, :],
                             params.priors[block_index][head], params.graph,
                             use_cone=params.config.use_cone,
                             visible=~batch.mask[:, :queries])
    return residual, parts


def _head_scores(x, block_index, head, batch, params, queries=None):
    residual, parts = _head_terms(x, block_index, head, batch, params, queries)
    if parts is None:
        return residual
    scores = residual + parts['time'] + parts['lut']
    if parts['cone'] is not None:
        scores = scores + parts['cone']
    return scores


def _block_output(batch, block_index, params, queries=None):
    c = params.config
    block = params.blocks[block_index]
    x = batch.embeddings
    queries = batch.num_tokens if queries is None else queries
    xq = x if queries == batch.num_tokens else x.take(np.arange(queries), axis=1)
    mask = batch.mask[:, :queries]
    heads = []
    for k in range(c.heads):
        scores = _head_scores(x, block_index, k, batch, params, queries)
        weights = (scores / c.temperature).masked_softmax(mask)
        heads.append(weights @ (x @ block['wv'][k]))
    attended = concat(heads, axis=-1) @ block['wo'] + block['bo']
    xq = (xq + attended).layer_norm() * block['ln1_g'] + block['ln1_b']
    hidden = (xq @ block['ffn_w1'] + block['ffn_b1']).gelu()
    return (xq + (hidden @ block['ffn_w2'] + block['ffn_b2'])).layer_norm() * block['ln2_g'] + block['ln2_b']


def encoder_block_forward(batch, block_index, params):
    return batch.with_embeddings(_block_output(batch, block_index, params))


'''
Function:   forward
Parameter:  batch  = TokenBatch from assemble_tokens
            params = EncoderParams

Description: Runs every block, reads out the lag-0 tokens (the first |V| in
             layout order) and applies the shared Q-head. Returns a Tensor
             of shape (B, |V|, |A|). The last block only computes the lag-0
             rows; keys still span every token.
'''
def forward(batch, params):
    last = params.config.layers - 1
    for l in range(last):
        batch = encoder_block_forward(batch, l, params)
    current = _block_output(batch, last, params, queries=params.graph.num_nodes)
    return current @ params.q_w + params.q_b


def q_values(snapshot, params):
    with no_grad():
        return forward(assemble_tokens(snapshot, params), params).value[0]


def _block_input(batch, block_index, params):
    for l in range(block_index):
        batch = encoder_block_forward(batch, l, params)
    return batch.embeddings


def attention_scores(block_index, head, batch, params):
    with no_grad():
        x = _block_input(batch, block_index, params)
        scores = _head_scores(x, block_index, head, batch, params).value
    return np.where(batch.mask, MASK_SURROGATE, scores)


'''
Function:   attention_components
Parameter:  block_index, head = which attention head
            batch   = TokenBatch
            params  = EncoderParams
            element = batch element to decompose

Description: Splits the pre-softmax scores of one head into the ConeDecay
             part, the TimeDecay+LUT part and the query-key residual. Returns
             numpy matrices plus the mask and the post-softmax weights.
'''
def attention_components(block_index, head, batch, params, element=0):
    c = params.config
    if not 0 <= block_index < c.layers or not 0 <= head < c.heads:
        raise EncoderError('attention: no head {} in block {}'.format(head, block_index))
    if not 0 <= element < batch.batch_size:
        raise EncoderError('attention: batch element {} out of range'.format(element))
    n = batch.num_tokens
    cone = np.zeros((n, n))
    time_lut = np.zeros((n, n))
    with no_grad():
        x = _block_input(batch, block_index, params)
        residual, parts = _head_terms(x, block_index, head, batch, params)
        residual = residual.value[element]
        if parts is not None:
            time_lut = np.broadcast_to((parts['time'] + parts['lut']).value, (n, n)).copy()
            if parts['cone'] is not None:
                cone = parts['cone'].value[element]
    total = residual + time_lut + cone
    mask = batch.mask[element]
    weights = Tensor(total / c.temperature).masked_softmax(mask).value
    logging.debug(' * attention block %d head %d: %d visible pairs', block_index, head, int((~mask).sum()))
    return {'cone': cone, 'time_lut': time_lut, 'residual': residual, 'total': total,
            'mask': mask, 'weights': weights}
