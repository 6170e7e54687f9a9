# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Dense fp64 kernel with hand-derived gradients.

Layers cache what their ``backward`` needs during ``forward``; a layer
instance is therefore single-threaded while training. Parameter gradients
are accumulated (``+=``) so shared parameters work without extra plumbing,
and must be zeroed by the caller before each step.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .exceptions import (
    ArchitectureMismatchError,
    DegenerateVectorError,
    DimensionError,
    EvaluationError,
    ImproperlyConfigured,
    InsufficientBatchError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

#: Norms below this are treated as a collapsed embedding.
NORM_FLOOR = 1e-12

Matrix = np.ndarray


def as_matrix(x) -> Matrix:
    """Return ``x`` as a C-contiguous fp64 array (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=np.float64)


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Return a Philox generator for the substream ``(seed, *key)``.

    Philox is counter based, so every ``key`` names an independent,
    reproducible stream: ``make_rng(3, 7, 1)`` draws the same numbers no
    matter how much was drawn from ``make_rng(3, 7, 0)`` before.
    """
    entropy = [int(seed), *(int(k) for k in key)]
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy)))


class Parameter:
    """A learnable array, its gradient and its optimizer state."""

    __slots__ = ('name', 'value', 'grad', 'velocity')

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.velocity: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f'<Parameter {self.name} {self.value.shape}>'


class Module:
    """Base of every layer and network.

    Parameters and sub-modules are discovered from instance attributes in
    definition order, which fixes the order of :meth:`parameters` and of
    state dict keys.
    """

    training = True

    def named_children(self) -> Iterator[Tuple[str, 'Module']]:
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                yield name, attr
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield f'{name}.{i}', item

    def named_parameters(self, prefix='') -> Iterator[Tuple[str, Parameter]]:
        for name, attr in vars(self).items():
            if isinstance(attr, Parameter):
                yield prefix + name, attr
        for name, child in self.named_children():
            yield from child.named_parameters(f'{prefix}{name}.')

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def named_buffers(self, prefix='') -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self.own_buffers().items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f'{prefix}{name}.')

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        state.update(
            {name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ArchitectureMismatchError(
                f'state keys differ: missing={missing} unexpected={extra}')
        for name, value in state.items():
            target = params[name].value if name in params else buffers[name]
            if target.shape != np.shape(value):
                raise ArchitectureMismatchError(
                    f'{name}: shape {np.shape(value)} != {target.shape}')
            target[...] = value
        return self


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a shape check."""
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(
            f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def matmul_backward(a: Matrix, b: Matrix,
                    dc: Matrix) -> Tuple[Matrix, Matrix]:
    """Return ``(dA, dB)`` for ``C = A @ B`` given ``dC``."""
    return dc @ b.T, a.T @ dc


def softmax(x, axis=-1) -> Matrix:
    """Max-subtracted softmax along ``axis``."""
    return special.softmax(as_matrix(x), axis=axis)


def softmax_backward(y: Matrix, dy: Matrix, axis=-1) -> Matrix:
    """Gradient through ``y = softmax(x)``."""
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def l2_normalize(z, axis=-1) -> Matrix:
    """Scale every vector along ``axis`` to unit l2 norm.

    :raises DegenerateVectorError: if any norm is below ``1e-12``.
    """
    z = as_matrix(z)
    norms = np.linalg.norm(z, axis=axis, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        raise DegenerateVectorError(
            f'cannot normalize a vector of norm {float(norms.min()):.3g}')
    return z / norms


def l2_normalize_backward(z: Matrix, y: Matrix, dy: Matrix,
                          axis=-1) -> Matrix:
    """Gradient through ``y = l2_normalize(z)``."""
    norms = np.linalg.norm(z, axis=axis, keepdims=True)
    return (dy - y * np.sum(y * dy, axis=axis, keepdims=True)) / norms


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clipped to ``[-1, 1]``."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise DimensionError(f'cannot compare {a.shape} with {b.shape}')
    value = float(np.dot(l2_normalize(a).ravel(), l2_normalize(b).ravel()))
    return min(1.0, max(-1.0, value))


class AffineLayer(Module):
    """``y = x W^T + b`` with He-style initialization.

    ``bias=False`` drops ``b``; use it in front of a batch norm, which
    cancels any per-channel offset.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name='affine', bias=True):
        scale = np.sqrt(2.0 / in_dim)
        self.weight = Parameter(
            f'{name}.weight', rng.normal(0.0, scale, size=(out_dim, in_dim)))
        self.bias = Parameter(f'{name}.bias', np.zeros(out_dim)) \
            if bias else None
        self._x = None

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def forward(self, x: Matrix) -> Matrix:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f'expected width {self.in_dim}, got {x.shape[-1]}')
        self._x = x
        y = matmul(x, self.weight.value.T)
        if self.bias is not None:
            y = y + self.bias.value
        return y

    __call__ = forward

    def backward(self, dy: Matrix) -> Matrix:
        dx, dwt = matmul_backward(self._x, self.weight.value.T, dy)
        self.weight.grad += dwt.T
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=0)
        return dx


class BatchNorm(Module):
    """Per-channel batch normalization over the rows of a matrix."""

    def __init__(self, channels: int, eps=1e-5, momentum=0.1,
                 name='bn'):
        if eps <= 0:
            raise ImproperlyConfigured(f'batch norm eps must be > 0: {eps}')
        self.gamma = Parameter(f'{name}.gamma', np.ones(channels))
        self.beta = Parameter(f'{name}.beta', np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self._cache = None

    @property
    def mode(self):
        return 'train' if self.training else 'eval'

    def own_buffers(self):
        return {'running_mean': self.running_mean,
                'running_var': self.running_var}

    def forward(self, x: Matrix) -> Matrix:
        channels = self.gamma.shape[0]
        if x.ndim != 2 or x.shape[1] != channels:
            raise DimensionError(
                f'expected (rows, {channels}), got {x.shape}')
        if self.training:
            rows = x.shape[0]
            if rows < 2:
                raise InsufficientBatchError(
                    f'batch norm in train mode needs >= 2 rows, got {rows}')
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            unbiased = var * rows / (rows - 1)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, self.training)
        return self.gamma.value * x_hat + self.beta.value

    __call__ = forward

    def backward(self, dy: Matrix) -> Matrix:
        x_hat, inv_std, batch_stats = self._cache
        self.gamma.grad += np.sum(dy * x_hat, axis=0)
        self.beta.grad += dy.sum(axis=0)
        dx_hat = dy * self.gamma.value
        if not batch_stats:
            return dx_hat * inv_std
        rows = dy.shape[0]
        return (inv_std / rows) * (
            rows * dx_hat
            - dx_hat.sum(axis=0)
            - x_hat * np.sum(dx_hat * x_hat, axis=0)
        )


class PReLU(Module):
    """Per-channel parametric ReLU; ``x == 0`` takes the positive branch."""

    def __init__(self, channels: int, init=0.25, name='prelu'):
        self.slope = Parameter(f'{name}.slope', np.full(channels, init))
        self._x = None

    def forward(self, x: Matrix) -> Matrix:
        if x.shape[-1] != self.slope.shape[0]:
            raise DimensionError(
                f'expected width {self.slope.shape[0]}, got {x.shape[-1]}')
        self._x = x
        return np.where(x >= 0.0, x, self.slope.value * x)

    __call__ = forward

    def backward(self, dy: Matrix) -> Matrix:
        positive = self._x >= 0.0
        self.slope.grad += np.sum(np.where(positive, 0.0, self._x * dy),
                                  axis=0)
        return np.where(positive, dy, self.slope.value * dy)


def batchnorm_apply(bn: BatchNorm, x) -> Matrix:
    """Apply ``bn`` in its current mode."""
    return bn.forward(as_matrix(x))


def prelu_apply(p: PReLU, x) -> Matrix:
    """Apply ``p`` channel-wise."""
    return p.forward(as_matrix(x))


class Sequential(Module):
    """Layers applied in order; backward runs them in reverse."""

    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Matrix) -> Matrix:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy: Matrix) -> Matrix:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with a single step decay of the learning rate."""

    lr: float = 8e-3
    decay_factor: float = 0.1
    decay_epoch: int = 30
    momentum: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ImproperlyConfigured(f'lr must be > 0, got {self.lr}')
        if not 0 < self.decay_factor <= 1:
            raise ImproperlyConfigured(
                f'decay_factor must be in (0, 1], got {self.decay_factor}')
        if self.decay_epoch < 0:
            raise ImproperlyConfigured(
                f'decay_epoch must be >= 0, got {self.decay_epoch}')
        if not 0 <= self.momentum < 1:
            raise ImproperlyConfigured(
                f'momentum must be in [0, 1), got {self.momentum}')

    def lr_at(self, epoch: int) -> float:
        if epoch >= self.decay_epoch:
            return self.lr * self.decay_factor
        return self.lr


def sgd_step(params: Sequence[Parameter], cfg: SgdConfig, epoch: int):
    """Apply one SGD update to ``params`` from their accumulated grads.

    :raises TrainingDivergedError: if any gradient is non-finite; no
        parameter is touched in that case.
    """
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise TrainingDivergedError(
                f'non-finite gradient in {param.name} at epoch {epoch}')
    lr = cfg.lr_at(epoch)
    for param in params:
        if cfg.momentum:
            if param.velocity is None:
                param.velocity = np.zeros_like(param.value)
            param.velocity *= cfg.momentum
            param.velocity += param.grad
            param.value -= lr * param.velocity
        else:
            param.value -= lr * param.grad


def finite_diff_check(f: Callable[[], float], params: Sequence[Parameter],
                      h=1e-5, max_coords_per_param: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      floor=1e-8) -> float:
    """Compare the gradients stored on ``params`` with central differences.

    ``f`` evaluates the objective at the current parameter values; the
    analytic gradient is whatever ``param.grad`` holds when this is called.
    Every coordinate is checked unless ``max_coords_per_param`` limits it to
    a random subset drawn from ``rng``.

    :returns: max relative error ``|a - n| / max(|a|, |n|, floor)``.
    :raises EvaluationError: if ``f`` returns a non-finite value.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f'step h must lie in [1e-7, 1e-3], got {h}')
    analytic = [p.grad.copy() for p in params]

    def evaluate():
        value = float(f())
        if not np.isfinite(value):
            raise EvaluationError(f'objective evaluated to {value}')
        return value

    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and \
                flat.size > max_coords_per_param:
            chooser = rng if rng is not None else make_rng(0)
            coords = np.sort(chooser.choice(
                flat.size, size=max_coords_per_param, replace=False))
        for i in coords:
            original = flat[i]
            try:
                flat[i] = original + h
                plus = evaluate()
                flat[i] = original - h
                minus = evaluate()
            finally:
                flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[i]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if err > worst:
                logger.debug('%s[%d]: analytic %.6g numeric %.6g',
                             param.name, i, exact, numeric)
                worst = err
    return worst
