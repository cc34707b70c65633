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

import contextlib
import logging
import math

import numpy as np

# stands in for -inf in front of a softmax
MASK_SURROGATE = -1e30

_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


class NumericsError(Exception):
    pass


'''
Function:   no_grad

Description: Context manager for evaluation only. Tensors built inside
             record neither operands nor backward closures, so an unused
             result is freed as soon as it goes out of scope.
'''
@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


def _noop():
    pass


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericsError('{}: incompatible shapes {} and {}'.format(op, a.shape, b.shape))


def _lift(other):
    if isinstance(other, Tensor):
        return other
    return Tensor(other)


class Tensor:

    '''
    Class:       Tensor
    Parameter:   value = array-like, stored as float64
                 _children = tensors this one was computed from
                 _op = name of the producing operation

    Description: Dense tensor with eager forward evaluation. Every operation
                 records a closure that later pushes the output gradient back
                 to its operands (reverse-mode differentiation).
    '''
    def __init__(self, value, _children=(), _op=''):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = _grad_enabled and any(child.requires_grad for child in _children)
        self._backward = _noop
        self._prev = _children if self.requires_grad else ()
        self._op = _op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return 'Tensor(shape={}, op={})'.format(self.shape, self._op or 'const')

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def _result(self, value, children, op):
        out = Tensor(value, children, op)
        if not np.all(np.isfinite(out.value)):
            raise NumericsError('{}: non-finite value in forward pass'.format(op))
        return out

    def _attach(self, backward):
        # the closure references this tensor; without gradients it is dropped
        if self.requires_grad:
            self._backward = backward
        return self

    def __add__(self, other):
        other = _lift(other)
        _broadcast_shape('add', self, other)
        out = self._result(self.value + other.value, (self, other), 'add')

        def _backward():
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))
        return out._attach(_backward)

    def __radd__(self, other):
        return self + other

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        _broadcast_shape('mul', self, other)
        out = self._result(self.value * other.value, (self, other), 'mul')

        def _backward():
            self._accumulate(_unbroadcast(out.grad * other.value, self.shape))
            other._accumulate(_unbroadcast(out.grad * self.value, other.shape))
        return out._attach(_backward)

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NumericsError('div: only constant divisors are supported')
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return self.matmul(other)

    def matmul(self, other):
        other = _lift(other)
        if self.ndim < 2 or other.ndim < 2:
            raise NumericsError('matmul: operands need at least 2 dimensions, got {} and {}'
                                .format(self.shape, other.shape))
        if self.shape[-1] != other.shape[-2]:
            raise NumericsError('matmul: inner dimensions differ, {} and {}'
                                .format(self.shape, other.shape))
        try:
            value = np.matmul(self.value, other.value)
        except ValueError:
            raise NumericsError('matmul: batch dimensions of {} and {} do not broadcast'
                                .format(self.shape, other.shape))
        out = self._result(value, (self, other), 'matmul')

        def _backward():
            if self.requires_grad:
                grad = np.matmul(out.grad, np.swapaxes(other.value, -1, -2))
                self._accumulate(_unbroadcast(grad, self.shape))
            if other.requires_grad:
                grad = np.matmul(np.swapaxes(self.value, -1, -2), out.grad)
                other._accumulate(_unbroadcast(grad, other.shape))
        return out._attach(_backward)

    def transpose(self):
        if self.ndim < 2:
            raise NumericsError('transpose: need at least 2 dimensions, got {}'.format(self.shape))
        out = self._result(np.swapaxes(self.value, -1, -2), (self,), 'transpose')

        def _backward():
            self._accumulate(np.swapaxes(out.grad, -1, -2))
        return out._attach(_backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            value = self.value.reshape(shape)
        except ValueError:
            raise NumericsError('reshape: cannot reshape {} into {}'.format(self.shape, shape))
        out = self._result(value, (self,), 'reshape')

        def _backward():
            self._accumulate(out.grad.reshape(self.shape))
        return out._attach(_backward)

    def sum(self, axis=None, keepdims=False):
        out = self._result(self.value.sum(axis=axis, keepdims=keepdims), (self,), 'sum')

        def _backward():
            grad = out.grad
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, self.shape).copy())
        return out._attach(_backward)

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    '''
    Function:   take
    Parameter:  indices = integer array
                axis    = axis to index along

    Description: Embedding lookup. The output replaces 'axis' by the shape of
                 'indices'; repeated indices accumulate their gradients.
    '''
    def take(self, indices, axis=0):
        indices = np.asarray(indices, dtype=np.int64)
        axis = axis % self.ndim
        size = self.shape[axis]
        if indices.size and (indices.min() < -size or indices.max() >= size):
            raise NumericsError('take: index out of range for axis {} of size {}'.format(axis, size))
        out = self._result(np.take(self.value, indices, axis=axis), (self,), 'take')

        def _backward():
            grad = np.zeros_like(self.value)
            index = (slice(None),) * axis + (indices,)
            np.add.at(grad, index, out.grad)
            self._accumulate(grad)
        return out._attach(_backward)

    def gather(self, rows, cols):
        if self.ndim != 2:
            raise NumericsError('gather: need a matrix, got shape {}'.format(self.shape))
        rows, cols = np.broadcast_arrays(np.asarray(rows, dtype=np.int64),
                                         np.asarray(cols, dtype=np.int64))
        if rows.size and (rows.min() < 0 or rows.max() >= self.shape[0]
                          or cols.min() < 0 or cols.max() >= self.shape[1]):
            raise NumericsError('gather: index out of range for shape {}'.format(self.shape))
        out = self._result(self.value[rows, cols], (self,), 'gather')

        def _backward():
            grad = np.zeros_like(self.value)
            np.add.at(grad, (rows, cols), out.grad)
            self._accumulate(grad)
        return out._attach(_backward)

    def select(self, keep):
        '''Entries where the boolean array 'keep' is True, flattened in C order.'''
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != self.shape:
            raise NumericsError('select: mask shape {} does not match {}'.format(keep.shape, self.shape))
        out = self._result(self.value[keep], (self,), 'select')

        def _backward():
            grad = np.zeros_like(self.value)
            grad[keep] = out.grad
            self._accumulate(grad)
        return out._attach(_backward)

    def gelu(self):
        x = self.value
        x2 = x * x
        t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
        out = self._result(0.5 * x * (1.0 + t), (self,), 'gelu')

        def _backward():
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            self._accumulate(out.grad * local)
        return out._attach(_backward)

    def softplus(self):
        x = self.value
        out = self._result(np.logaddexp(0.0, x), (self,), 'softplus')

        def _backward():
            self._accumulate(out.grad * np.exp(-np.logaddexp(0.0, -x)))
        return out._attach(_backward)

    '''
    Function:   masked_softmax
    Parameter:  mask = boolean array broadcastable to the tensor, True = masked

    Description: Softmax over the last axis. Masked entries get the additive
                 surrogate before normalization and exactly 0 weight after it.
    '''
    def masked_softmax(self, mask=None):
        if mask is None:
            masked = np.zeros(self.shape, dtype=bool)
        else:
            try:
                masked = np.broadcast_to(np.asarray(mask, dtype=bool), self.shape)
            except ValueError:
                raise NumericsError('softmax: mask shape {} does not fit {}'
                                    .format(np.shape(mask), self.shape))
        if np.any(np.all(masked, axis=-1)):
            raise NumericsError('softmax: a row is fully masked')
        z = np.where(masked, MASK_SURROGATE, self.value)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(masked, 0.0, np.exp(z))
        y = e / e.sum(axis=-1, keepdims=True)
        out = self._result(y, (self,), 'softmax')

        def _backward():
            g = out.grad
            self._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))
        return out._attach(_backward)

    def layer_norm(self, eps=1e-5):
        x = self.value
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        out = self._result(xhat, (self,), 'layer_norm')

        def _backward():
            g = out.grad
            n = x.shape[-1]
            grad = inv_std / n * (n * g - g.sum(axis=-1, keepdims=True)
                                  - xhat * (g * xhat).sum(axis=-1, keepdims=True))
            self._accumulate(grad)
        return out._attach(_backward)

    '''
    Function:   backward

    Description: Reverse pass from a scalar output. Parameters accumulate.
                 The graph is released afterwards: a second call on the
                 same output reaches no Parameter.
    '''
    def backward(self):
        if self.value.size != 1:
            raise NumericsError('backward: output must be a scalar, got shape {}'.format(self.shape))

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if child.requires_grad and id(child) not in visited:
                    stack.append((child, False))

        for node in topo:
            if not isinstance(node, Parameter):
                node.grad = None
        if isinstance(self, Parameter):
            self.grad = self.grad + np.ones_like(self.value)
        else:
            self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            node._backward()
        for node in topo:
            node._backward = _noop
            node._prev = ()


class Parameter(Tensor):

    def __init__(self, value, name):
        super().__init__(value)
        self.value = np.ascontiguousarray(self.value)
        self.name = name
        self.requires_grad = True
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return 'Parameter({}, shape={})'.format(self.name, self.shape)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise NumericsError('assign: {} expects shape {}, got {}'
                                .format(self.name, self.value.shape, value.shape))
        self.value = np.ascontiguousarray(value.copy())


def scatter(values, keep, fill=0.0):
    '''Inverse of Tensor.select: 'values' placed where 'keep' is True, 'fill' elsewhere.'''
    values = _lift(values)
    keep = np.asarray(keep, dtype=bool)
    if values.shape != (int(keep.sum()),):
        raise NumericsError('scatter: {} values for {} selected entries'.format(values.shape, int(keep.sum())))
    full = np.full(keep.shape, fill, dtype=np.float64)
    full[keep] = values.value
    out = values._result(full, (values,), 'scatter')

    def _backward():
        values._accumulate(out.grad[keep])
    return out._attach(_backward)


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise NumericsError('concat: shapes {} do not line up'.format([t.shape for t in tensors]))
    out = tensors[0]._result(value, tuple(tensors), 'concat')
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward():
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(start, stop)
            t._accumulate(out.grad[tuple(index)])
    return out._attach(_backward)


def mse(pred, target):
    diff = pred - np.asarray(target, dtype=np.float64)
    return (diff * diff).mean()


def huber(pred, target, delta=1.0):
    target = np.asarray(target, dtype=np.float64)
    _broadcast_shape('huber', pred, Tensor(target))
    r = pred.value - target
    small = np.abs(r) <= delta
    loss = np.where(small, 0.5 * r ** 2, delta * (np.abs(r) - 0.5 * delta))
    out = pred._result(loss.mean(), (pred,), 'huber')

    def _backward():
        grad = np.clip(r, -delta, delta) / r.size
        pred._accumulate(_unbroadcast(out.grad * grad, pred.shape))
    return out._attach(_backward)


def cross_entropy_with_logits(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise NumericsError('cross_entropy: labels shape {} does not match logits {}'
                            .format(labels.shape, logits.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise NumericsError('cross_entropy: label out of range 0..{}'.format(num_classes - 1))
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot = np.eye(num_classes)[labels]
    count = max(labels.size, 1)
    out = logits._result(-(log_probs * onehot).sum() / count, (logits,), 'cross_entropy')

    def _backward():
        logits._accumulate(out.grad * (np.exp(log_probs) - onehot) / count)
    return out._attach(_backward)


class OptimizerConfig:

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate < 0:
            raise NumericsError('optimizer: learning rate must be >= 0, got {}'.format(learning_rate))
        for name, beta in (('beta1', beta1), ('beta2', beta2)):
            if not 0.0 < beta < 1.0:
                raise NumericsError('optimizer: {} must be in (0,1), got {}'.format(name, beta))
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


class Adam:

    def __init__(self, params, config=None):
        self.params = list(params)
        self.config = config or OptimizerConfig()
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    '''
    Function:   step

    Description: One bias-corrected Adam update over all parameters, then
                 zeroes the gradients. Nothing is updated if any gradient is
                 non-finite.
    '''
    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericsError('adam: non-finite gradient in parameter {}'.format(p.name))
        cfg = self.config
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for p in self.params:
            m = self._m[id(p)] = cfg.beta1 * self._m[id(p)] + (1.0 - cfg.beta1) * p.grad
            v = self._v[id(p)] = cfg.beta2 * self._v[id(p)] + (1.0 - cfg.beta2) * p.grad ** 2
            update = cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.epsilon)
            p.value = np.ascontiguousarray(p.value - update)
        self.zero_grad()


def adam_step(params, config, state):
    '''Functional form: 'state' is an Adam object created for 'params'.'''
    state.config = config
    state.step()
    return params


'''
Function:   gradient_check
Parameter:  fn     = callable returning a scalar Tensor built from 'params'
            params = list of Parameters
            h      = central difference step
            floor  = lower bound of the relative error denominator

Description: Compares the analytic gradient with central differences on
             every coordinate and returns the largest relative error.
'''
def gradient_check(fn, params, h=1e-5, floor=1e-5):
    if h <= 0:
        raise NumericsError('gradient_check: step must be positive, got {}'.format(h))
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            with no_grad():
                flat[k] = orig + h
                f_plus = float(fn().value)
                flat[k] = orig - h
                f_minus = float(fn().value)
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = grad.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                logging.debug(' * %s[%d]: analytic %g numeric %g', p.name, k, a, numeric)
                worst = err
    for p in params:
        p.zero_grad()
    return worst
