# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Bidirectional compatible transfer networks.

A transfer block mixes two views of its (re-normalized) input: a
knowledge-capturing branch that attends over learnable prototypes, and a
forward-mapping branch through a narrow bottleneck. A per-sample gate
balances the two and a residual keeps the input::

    out = (1 - a) * z_c + a * z_m + normalize(z)

Four blocks are cascaded into a :class:`BiCTNetwork`. Each stage trains two
independent networks: ``forward`` maps the previous stage's feature space
into the current one, ``backward`` maps the current space into the
previous one.
"""

import logging
from typing import Optional

import numpy as np
from scipy import special

from .exceptions import DimensionError, ImproperlyConfigured
from .numkernel import (
    AffineLayer,
    BatchNorm,
    Matrix,
    Module,
    Parameter,
    PReLU,
    Sequential,
    as_matrix,
    l2_normalize,
    l2_normalize_backward,
    softmax,
    softmax_backward,
)

logger = logging.getLogger(__name__)

#: Blocks per network.
BLOCK_COUNT = 4
DIRECTIONS = ('forward', 'backward')


class CaptureHead(Sequential):
    """Three affine layers ``C -> C -> C -> P`` with PReLU in between."""

    def __init__(self, channels: int, prototypes: int,
                 rng: np.random.Generator):
        super().__init__(
            AffineLayer(channels, channels, rng, name='capture.0'),
            PReLU(channels, name='capture.1'),
            AffineLayer(channels, channels, rng, name='capture.2'),
            PReLU(channels, name='capture.3'),
            AffineLayer(channels, prototypes, rng, name='capture.4'),
        )


class MappingHead(Sequential):
    """Bottleneck ``C -> C0`` with batch norm and PReLU, back to ``C``."""

    def __init__(self, channels: int, bottleneck: int,
                 rng: np.random.Generator):
        super().__init__(
            AffineLayer(channels, bottleneck, rng, name='mapping.0',
                        bias=False),
            BatchNorm(bottleneck, name='mapping.1'),
            PReLU(bottleneck, name='mapping.2'),
            AffineLayer(bottleneck, channels, rng, name='mapping.3'),
        )

    @property
    def batch_norm(self) -> BatchNorm:
        return self.layers[1]


class GateHead(Module):
    """One affine unit and a sigmoid: the balancing factor per sample.

    With ``fixed`` set the head ignores its input and always answers that
    value; its parameters then receive no gradient.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 fixed: Optional[float] = None):
        if fixed is not None and not 0.0 <= fixed <= 1.0:
            raise ImproperlyConfigured(
                f'fixed gate value must lie in [0, 1], got {fixed}')
        self.affine = AffineLayer(channels, 1, rng, name='gate')
        self.fixed = fixed
        self._a = None

    def forward(self, z_tilde: Matrix) -> Matrix:
        if self.fixed is not None:
            self._a = np.full((z_tilde.shape[0], 1), float(self.fixed))
        else:
            self._a = special.expit(self.affine.forward(z_tilde))
        return self._a

    __call__ = forward

    def backward(self, da: Matrix) -> Matrix:
        if self.fixed is not None:
            return np.zeros((da.shape[0], self.affine.in_dim))
        return self.affine.backward(da * self._a * (1.0 - self._a))


class BiCTBlock(Module):
    """One transfer block: prototypes, capture, mapping and gate heads."""

    def __init__(self, channels: int, prototypes: int, bottleneck: int,
                 rng: np.random.Generator, use_kcm=True, use_fmm=True,
                 gate_fixed: Optional[float] = None):
        if prototypes < 1:
            raise ImproperlyConfigured(
                f'need at least one prototype, got {prototypes}')
        self.prototypes = Parameter(
            'prototypes',
            rng.normal(0.0, np.sqrt(1.0 / channels),
                       size=(prototypes, channels)))
        self.capture = CaptureHead(channels, prototypes, rng)
        self.mapping = MappingHead(channels, bottleneck, rng)
        self.gate = GateHead(channels, rng, fixed=gate_fixed)
        self.use_kcm = use_kcm
        self.use_fmm = use_fmm
        self._k = None
        self._cache = None

    @property
    def channels(self):
        return self.prototypes.shape[1]

    def kcm(self, z_tilde: Matrix) -> Matrix:
        """Prototype mixture ``softmax(g_c(z)) @ v`` of normalized input."""
        k = softmax(self.capture.forward(z_tilde))
        self._k = k
        return k @ self.prototypes.value

    def fmm(self, z_tilde: Matrix) -> Matrix:
        """Bottleneck mapping of normalized input."""
        return self.mapping.forward(z_tilde)

    def forward(self, z: Matrix) -> Matrix:
        z = as_matrix(z)
        if z.ndim != 2 or z.shape[1] != self.channels:
            raise DimensionError(
                f'expected (rows, {self.channels}), got {z.shape}')
        z_tilde = l2_normalize(z)
        zeros = np.zeros_like(z_tilde)
        z_c = self.kcm(z_tilde) if self.use_kcm else zeros
        z_m = self.fmm(z_tilde) if self.use_fmm else zeros
        a = self.gate.forward(z_tilde)
        self._cache = (z, z_tilde, z_c, z_m, a)
        return (1.0 - a) * z_c + a * z_m + z_tilde

    __call__ = forward

    def backward(self, dout: Matrix) -> Matrix:
        z, z_tilde, z_c, z_m, a = self._cache
        dz_tilde = dout.copy()
        dz_tilde += self.gate.backward(
            np.sum(dout * (z_m - z_c), axis=1, keepdims=True))
        if self.use_kcm:
            dz_c = dout * (1.0 - a)
            self.prototypes.grad += self._k.T @ dz_c
            dk = dz_c @ self.prototypes.value.T
            dz_tilde += self.capture.backward(softmax_backward(self._k, dk))
        if self.use_fmm:
            dz_tilde += self.mapping.backward(dout * a)
        return l2_normalize_backward(z, z_tilde, dz_tilde)


class BiCTNetwork(Module):
    """Four cascaded transfer blocks mapping one stage's space to another."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 prototypes=16, bottleneck=32, direction='forward',
                 source_stage=0, target_stage=1, use_kcm=True, use_fmm=True,
                 gate_fixed: Optional[float] = None):
        if direction not in DIRECTIONS:
            raise ImproperlyConfigured(
                f'direction must be one of {DIRECTIONS}, got {direction!r}')
        self.blocks = [
            BiCTBlock(channels, prototypes, bottleneck, rng,
                      use_kcm=use_kcm, use_fmm=use_fmm,
                      gate_fixed=gate_fixed)
            for _ in range(BLOCK_COUNT)
        ]
        self.direction = direction
        self.source_stage = source_stage
        self.target_stage = target_stage

    @property
    def channels(self):
        return self.blocks[0].channels

    def forward(self, z: Matrix) -> Matrix:
        z = as_matrix(z)
        for block in self.blocks:
            z = block.forward(z)
        return z

    __call__ = forward

    def backward(self, dout: Matrix) -> Matrix:
        for block in reversed(self.blocks):
            dout = block.backward(dout)
        return dout

    def __repr__(self):
        return (f'<BiCTNetwork {self.direction} '
                f'{self.source_stage}->{self.target_stage} '
                f'C={self.channels}>')


def kcm_forward(block: BiCTBlock, z) -> Matrix:
    """Knowledge-capturing branch of ``block`` on the rows of ``z``."""
    z = as_matrix(z)
    if z.ndim != 2 or z.shape[1] != block.channels:
        raise DimensionError(
            f'expected (rows, {block.channels}), got {z.shape}')
    return block.kcm(l2_normalize(z))


def fmm_forward(block: BiCTBlock, z) -> Matrix:
    """Forward-mapping branch of ``block`` on the rows of ``z``."""
    z = as_matrix(z)
    if z.ndim != 2 or z.shape[1] != block.channels:
        raise DimensionError(
            f'expected (rows, {block.channels}), got {z.shape}')
    return block.fmm(l2_normalize(z))


def block_forward(block: BiCTBlock, z) -> Matrix:
    return block.forward(z)


def network_forward(net: BiCTNetwork, z) -> Matrix:
    return net.forward(z)
