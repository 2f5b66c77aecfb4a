"""Butterfly orthogonal transforms built from stages of Givens rotations.

Stage ``l`` (0-based) pairs index ``i`` with ``i + 2**l`` for every ``i``
whose bit ``l`` is clear, and rotates each pair by its own angle::

    (u, v) -> (u cos a - v sin a,  u sin a + v cos a)

Pairs within a stage are numbered in increasing order of ``i``. Stages are
applied first to last, so the dense matrix is ``S_L ... S_2 S_1``; the
transpose applies the stages last to first with negated angles.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError

FLOPS_PER_PAIR = 6  # 4 multiplies + 2 adds per rotated pair


def _is_pow2(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 2 and (n & (n - 1)) == 0


def max_layers(dim: int) -> int:
    return int(dim).bit_length() - 1


def check_config(dim: int, num_layers: int) -> None:
    if not _is_pow2(dim):
        raise ConfigError(f"butterfly dim must be a power of two >= 2, got {dim}")
    m = max_layers(dim)
    if not 1 <= num_layers <= m:
        raise ConfigError(f"num_layers must lie in [1, {m}] for dim={dim}, got {num_layers}")


@dataclass
class ButterflyParams:
    """Angles of one butterfly transform, shape ``(num_layers, dim // 2)``."""

    dim: int
    num_layers: int
    angles: np.ndarray

    def __post_init__(self):
        check_config(self.dim, self.num_layers)
        angles = np.asarray(self.angles)
        self.angles = angles if angles.dtype.kind == "f" else angles.astype(np.float64)
        expected = (self.num_layers, self.dim // 2)
        if self.angles.size != expected[0] * expected[1]:
            raise ConfigError(f"expected {expected[0] * expected[1]} angles, got {self.angles.size}")
        self.angles = self.angles.reshape(expected)
        if not np.all(np.isfinite(self.angles)):
            raise ConfigError("butterfly angles must be finite")

    @property
    def n_params(self) -> int:
        return self.angles.size

    @classmethod
    def zeros(cls, dim: int, num_layers: int | None = None) -> "ButterflyParams":
        num_layers = max_layers(dim) if num_layers is None else num_layers
        check_config(dim, num_layers)
        return cls(dim, num_layers, np.zeros((num_layers, dim // 2)))

    def to_bytes(self) -> bytes:
        """``(dim, num_layers)`` as little-endian u32, then the angles as f32, stage-major."""
        head = struct.pack("<II", self.dim, self.num_layers)
        return head + self.angles.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["ButterflyParams", int]:
        dim, num_layers = struct.unpack_from("<II", buf, offset)
        check_config(dim, num_layers)
        offset += 8
        n = num_layers * (dim // 2)
        angles = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float64)
        return cls(dim, num_layers, angles), offset + 4 * n


def init_butterfly(dim: int, num_layers: int | None = None, rng_seed=None, std: float = 0.01) -> ButterflyParams:
    """Draw angles i.i.d. from ``Normal(0, std**2)`` with a seeded generator."""
    num_layers = max_layers(dim) if num_layers is None else num_layers
    check_config(dim, num_layers)
    rng = np.random.default_rng(rng_seed)
    return ButterflyParams(dim, num_layers, rng.normal(0.0, std, size=(num_layers, dim // 2)))


def param_count(dim: int, num_layers: int | None = None) -> int:
    num_layers = max_layers(dim) if num_layers is None else num_layers
    check_config(dim, num_layers)
    return num_layers * (dim // 2)


def expert_param_count(d_in: int, d_out: int, layers_in: int | None = None, layers_out: int | None = None) -> int:
    """Angles held by one expert: input transform plus output transform."""
    return param_count(d_in, layers_in) + param_count(d_out, layers_out)


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------

_counter = threading.local()


class FlopCounter:
    """Counts multiply/add operations performed by :func:`apply` while active.

    >>> with FlopCounter() as fc:
    ...     _ = apply(ButterflyParams.zeros(8), np.ones(8))
    >>> fc.flops
    72
    """

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        self._prev = getattr(_counter, "active", None)
        _counter.active = self
        return self

    def __exit__(self, *exc):
        _counter.active = self._prev
        return False


def _count(n: int) -> None:
    c = getattr(_counter, "active", None)
    if c is not None:
        c.flops += n


# ---------------------------------------------------------------------------
# forward / backward kernels
# ---------------------------------------------------------------------------

def _schedule(num_layers: int, transpose: bool):
    """Stage indices in application order, with the sign applied to the angles."""
    if transpose:
        return [(l, -1.0) for l in reversed(range(num_layers))]
    return [(l, 1.0) for l in range(num_layers)]


def _rotate_stage(x: np.ndarray, l: int, alpha: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    s = 1 << l
    xv = x.reshape(x.shape[:-1] + (d // (2 * s), 2, s))
    u, v = xv[..., 0, :], xv[..., 1, :]
    a = alpha.reshape(d // (2 * s), s)
    c, sn = np.cos(a), np.sin(a)
    out = np.empty_like(xv)
    out[..., 0, :] = u * c - v * sn
    out[..., 1, :] = u * sn + v * c
    return out.reshape(x.shape)


def _check_input(params: ButterflyParams, x: np.ndarray) -> None:
    if x.ndim < 1 or x.shape[-1] != params.dim:
        raise DimensionError(f"butterfly of dim {params.dim} applied to input of shape {x.shape}")


def apply(params: ButterflyParams, x, transpose: bool = False) -> np.ndarray:
    """Apply ``B`` (or ``B^T``) along the last axis of ``x``."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    _check_input(params, x)
    n_vec = x.size // params.dim
    out = x
    for l, sign in _schedule(params.num_layers, transpose):
        out = _rotate_stage(out, l, sign * params.angles[l])
        _count(FLOPS_PER_PAIR * (params.dim // 2) * n_vec)
    return out


def backward(params: ButterflyParams, x, grad_out, transpose: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<grad_out, apply(params, x, transpose)>`` w.r.t. ``x`` and the angles.

    Stage inputs are recomputed from ``x``; the per-pair angle gradient is
    ``g_u (-sin a u - cos a v) + g_v (cos a u - sin a v)`` summed over every
    leading index.
    """
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    _check_input(params, x)
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    d = params.dim
    sched = _schedule(params.num_layers, transpose)
    inputs = []
    h = x
    for l, sign in sched:
        inputs.append(h)
        h = _rotate_stage(h, l, sign * params.angles[l])

    grad_angles = np.zeros_like(params.angles, dtype=np.result_type(x.dtype, params.angles.dtype))
    g = grad_out
    lead = x.ndim - 1
    for (l, sign), h in zip(reversed(sched), reversed(inputs)):
        s = 1 << l
        nb = d // (2 * s)
        hv = h.reshape(h.shape[:-1] + (nb, 2, s))
        gv_ = g.reshape(g.shape[:-1] + (nb, 2, s))
        u, v = hv[..., 0, :], hv[..., 1, :]
        gu, gv = gv_[..., 0, :], gv_[..., 1, :]
        a = sign * params.angles[l].reshape(nb, s)
        c, sn = np.cos(a), np.sin(a)
        da = gu * (-sn * u - c * v) + gv * (c * u - sn * v)
        if lead:
            da = da.sum(axis=tuple(range(lead)))
        grad_angles[l] += sign * da.reshape(-1)
        gin = np.empty_like(gv_)
        gin[..., 0, :] = c * gu + sn * gv
        gin[..., 1, :] = -sn * gu + c * gv
        g = gin.reshape(g.shape)
    return g, grad_angles


def as_dense(params: ButterflyParams) -> np.ndarray:
    """Materialise ``B`` as a ``dim x dim`` matrix (column ``j`` is ``B e_j``)."""
    eye = np.eye(params.dim, dtype=np.result_type(params.angles.dtype, np.float64))
    # rows of apply(eye) are B e_j, so transpose to get columns
    return apply(params, eye).T


# ---------------------------------------------------------------------------
# autodiff integration
# ---------------------------------------------------------------------------

def butterfly_op(x: ad.Tensor, angles: ad.Tensor, transpose: bool = False) -> ad.Tensor:
    """Differentiable butterfly application; ``angles`` has shape ``(L, d/2)``."""
    L, half = angles.shape
    params = ButterflyParams.__new__(ButterflyParams)
    params.dim, params.num_layers, params.angles = 2 * half, L, angles.data
    _check_input(params, x.data)
    xd = x.data
    out = apply(params, xd, transpose)

    def back(g):
        gx, ga = backward(params, xd, g, transpose)
        return gx.astype(xd.dtype, copy=False), ga.astype(angles.dtype, copy=False)

    return ad.record(out, (x, angles), back, "butterfly")
