"""Single-pass squeeze/excitation routing.

All functions take child projections with the child axis second to last:
``[..., N, atoms]``. Leading axes (batch, rows, cols) are carried through so
every location is routed in one vectorized call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor, as_tensor

ZERO_NORM = 1e-12


@dataclass
class SqueezeDescriptors:
    a: Tensor
    b: Tensor
    c: Tensor
    s: Tensor


@dataclass
class RoutedParents:
    v_obj: Tensor
    v_cls: Tensor
    r: Tensor


def squeeze_cosine(U) -> Tensor:
    """Cosine between each child projection and the mean projection.

    A child (or mean) with norm below 1e-12 gets agreement 0.
    """
    U = as_tensor(U)
    mean_u = nx.mean(U, axis=-2, keepdims=True)
    dot = nx.tsum(U * mean_u, axis=-1)
    nsq_u = nx.tsum(U * U, axis=-1)
    nsq_m = nx.tsum(mean_u * mean_u, axis=-1)
    valid = (nsq_u.data > ZERO_NORM ** 2) & (nsq_m.data > ZERO_NORM ** 2)
    denom = nx.sqrt(nx.where(valid, nsq_u * nsq_m, 1.0))
    return nx.clip(nx.where(valid, dot / denom, 0.0), -1.0, 1.0)


def opinion_pool(Z) -> tuple[Tensor, Tensor]:
    """Per-child log class distributions and their uniform average."""
    Z = as_tensor(Z)
    log_q = nx.log_softmax(Z, axis=-1)
    pool = nx.mean(nx.exp(log_q), axis=-2, keepdims=True)
    return log_q, pool


def squeeze_kl(Z) -> Tensor:
    """KL(pooled distribution || child distribution) per child, in nats."""
    log_q, pool = opinion_pool(Z)
    return nx.tsum(pool * (nx.log(pool) - log_q), axis=-1)


def squeeze_variance(Z, literal: bool = False) -> Tensor:
    """Spread of each child's class distribution around 1/K.

    ``literal=True`` subtracts the distribution's total mass instead, which
    is identically 1 and shifts every entry by a constant.
    """
    Z = as_tensor(Z)
    q = nx.softmax(Z, axis=-1)
    center = 1.0 if literal else 1.0 / Z.shape[-1]
    return nx.tsum((q - center) ** 2, axis=-1)


def squeeze(U_obj, U_cls, literal_variance: bool = False) -> SqueezeDescriptors:
    a = squeeze_cosine(U_obj)
    b = squeeze_kl(U_cls)
    c = squeeze_variance(U_cls, literal=literal_variance)
    return SqueezeDescriptors(a, b, c, nx.concat([a, b, c], axis=-1))


@dataclass
class ExcitationWeights:
    W1: Tensor  # [3N/t, 3N]
    W2: Tensor  # [N, 3N/t]
    t: int

    @staticmethod
    def init(N: int, t: int, rng: np.random.Generator, registry=None, prefix: str = "route") -> "ExcitationWeights":
        hidden = excitation_width(N, t)
        b1 = 1.0 / math.sqrt(3 * N)
        b2 = 1.0 / math.sqrt(hidden)
        w1 = rng.uniform(-b1, b1, size=(hidden, 3 * N))
        w2 = rng.uniform(-b2, b2, size=(N, hidden))
        if registry is None:
            return ExcitationWeights(Tensor(w1, requires_grad=True), Tensor(w2, requires_grad=True), t)
        return ExcitationWeights(registry.add(f"{prefix}.W1", w1), registry.add(f"{prefix}.W2", w2), t)


def excitation_width(N: int, t: int) -> int:
    if t <= 0 or (3 * N) % t:
        raise ValueError(f"reduction ratio {t} must divide 3N = {3 * N}")
    return 3 * N // t


def excite(s, w: ExcitationWeights) -> Tensor:
    """r = sigmoid(W2 relu(W1 s)), bias-free."""
    s = as_tensor(s)
    hidden, three_n = w.W1.shape
    if s.shape[-1] != three_n or w.W2.shape[1] != hidden:
        raise ShapeError(f"excitation shapes disagree: s {s.shape}, W1 {w.W1.shape}, W2 {w.W2.shape}")
    lead = s.shape[:-1]
    flat = s.reshape(-1, three_n)
    z = nx.relu(nx.matmul(flat, nx.transpose(w.W1)))
    r = nx.sigmoid(nx.matmul(z, nx.transpose(w.W2)))
    return r.reshape(lead + (w.W2.shape[0],))


def route(U_obj, U_cls, r) -> RoutedParents:
    """Weight both parents' projections with one shared coefficient set."""
    U_obj, U_cls, r = as_tensor(U_obj), as_tensor(U_cls), as_tensor(r)
    N = r.shape[-1]
    if U_obj.shape[-2] != N or U_cls.shape[-2] != N:
        raise ShapeError(f"routing coefficients for {N} children vs projections "
                         f"{U_obj.shape} and {U_cls.shape}")
    rr = r.reshape(r.shape + (1,))
    v_obj = nx.tsum(U_obj * rr, axis=-2)
    v_cls = nx.tsum(U_cls * rr, axis=-2)
    return RoutedParents(v_obj, v_cls, r)


def uniform_coefficients(lead_shape: tuple[int, ...], N: int) -> Tensor:
    return Tensor(np.full(tuple(lead_shape) + (N,), 1.0 / N))


def se_route(U_obj, U_cls, w: ExcitationWeights | None, literal_variance: bool = False) -> RoutedParents:
    """Full routing step; ``w=None`` selects the uniform-coefficient ablation."""
    U_obj = as_tensor(U_obj)
    if w is None:
        r = uniform_coefficients(U_obj.shape[:-2], U_obj.shape[-2])
    else:
        r = excite(squeeze(U_obj, U_cls, literal_variance).s, w)
    return route(U_obj, U_cls, r)
