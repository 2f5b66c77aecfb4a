"""Ternary (1.58-bit) quantisation of the shared substrate.

Weights map to ``gamma * clip(round(W / gamma), -1, 1)`` with ``gamma`` the
mean absolute value of ``W``. Codes are stored 2 bits each, four per byte,
row-major over the whole matrix; inside a byte element ``4p + q`` sits in
bits ``2q..2q+1``. Code ``00`` is 0, ``01`` is +1, ``10`` is -1 and ``11``
is invalid.
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError

GAMMA_FLOOR = 1e-8
BITS_PER_WEIGHT_INFO = 1.58  # log2(3), used for analytical reports
BITS_PER_WEIGHT_PACKED = 2


def absmean_scale(W) -> float:
    """Mean absolute value (exactly rounded sum), floored at ``GAMMA_FLOOR``."""
    W = np.asarray(W, dtype=np.float64)
    gamma = math.fsum(np.abs(W).ravel()) / W.size if W.size else 0.0
    return max(gamma, GAMMA_FLOOR)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ternary_codes(W, gamma: float | None = None) -> np.ndarray:
    """Integer codes in {-1, 0, +1} (int8) for ``W`` at scale ``gamma``."""
    W = np.asarray(W, dtype=np.float64)
    gamma = absmean_scale(W) if gamma is None else gamma
    return np.clip(round_half_away(W / gamma), -1, 1).astype(np.int8)


def pack_codes(codes: np.ndarray) -> np.ndarray:
    flat = np.asarray(codes, dtype=np.int8).ravel()
    if flat.size and (flat.min() < -1 or flat.max() > 1):
        raise ConfigError("ternary codes must lie in {-1, 0, +1}")
    two_bit = np.where(flat == 1, 0b01, np.where(flat == -1, 0b10, 0b00)).astype(np.uint8)
    pad = (-two_bit.size) % 4
    two_bit = np.concatenate([two_bit, np.zeros(pad, dtype=np.uint8)]).reshape(-1, 4)
    return (two_bit[:, 0] | (two_bit[:, 1] << 2) | (two_bit[:, 2] << 4) | (two_bit[:, 3] << 6)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, rows: int, cols: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    n = rows * cols
    if packed.size != (n + 3) // 4:
        raise DimensionError(f"{packed.size} packed bytes cannot hold a {rows}x{cols} matrix")
    fields = np.stack([(packed >> (2 * q)) & 0b11 for q in range(4)], axis=1).ravel()[:n]
    if np.any(fields == 0b11):
        raise ConfigError("invalid ternary code 0b11 in packed data")
    out = np.zeros(n, dtype=np.int8)
    out[fields == 0b01] = 1
    out[fields == 0b10] = -1
    return out.reshape(rows, cols)


@dataclass(frozen=True)
class TernaryMatrix:
    """Packed ternary matrix of shape ``(rows, cols)`` with scale ``gamma``."""

    rows: int
    cols: int
    codes: np.ndarray  # packed uint8, ceil(rows*cols/4) bytes
    gamma: float

    @classmethod
    def from_codes(cls, codes: np.ndarray, gamma: float) -> "TernaryMatrix":
        codes = np.asarray(codes)
        if codes.ndim != 2:
            raise DimensionError(f"codes must be 2-D, got shape {codes.shape}")
        if not gamma > 0:
            raise ConfigError(f"gamma must be positive, got {gamma}")
        return cls(codes.shape[0], codes.shape[1], pack_codes(codes), float(gamma))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def unpack(self) -> np.ndarray:
        return unpack_codes(self.codes, self.rows, self.cols)

    @cached_property
    def column_masks(self) -> tuple[np.ndarray, np.ndarray]:
        """Boolean ``(cols, rows)`` masks of the +1 and -1 codes, one row per input column."""
        codes = np.ascontiguousarray(self.unpack().T)
        return codes == 1, codes == -1

    def values(self, dtype=np.float64) -> np.ndarray:
        return (self.gamma * self.unpack()).astype(dtype)

    @property
    def nbytes(self) -> int:
        return int(self.codes.size)

    def to_bytes(self) -> bytes:
        head = struct.pack("<IId", self.rows, self.cols, self.gamma)
        return head + self.codes.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["TernaryMatrix", int]:
        rows, cols, gamma = struct.unpack_from("<IId", buf, offset)
        offset += 16
        n = (rows * cols + 3) // 4
        codes = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset).copy()
        unpack_codes(codes, rows, cols)  # validates
        return cls(rows, cols, codes, gamma), offset + n


def quantize(W) -> TernaryMatrix:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"quantize expects a matrix, got shape {W.shape}")
    gamma = absmean_scale(W)
    return TernaryMatrix.from_codes(ternary_codes(W, gamma), gamma)


def quantize_values(W: np.ndarray) -> np.ndarray:
    """Dense ``Q(W)`` in the dtype of ``W`` (no packing)."""
    gamma = absmean_scale(W)
    return (gamma * np.clip(round_half_away(W / gamma), -1, 1)).astype(W.dtype, copy=False)


def ste_backward(grad_out):
    """Straight-through estimator: the quantiser's Jacobian is taken as identity."""
    return grad_out


def relative_quant_error(W) -> float:
    """``||W - Q(W)||_F^2 / ||W||_F^2`` as a percentage."""
    W = np.asarray(W, dtype=np.float64)
    denom = float((W * W).sum())
    if denom == 0.0:
        raise ConfigError("relative quantisation error is undefined for a zero matrix")
    diff = W - quantize_values(W)
    return 100.0 * float((diff * diff).sum()) / denom


# ---------------------------------------------------------------------------
# addition-only kernel
# ---------------------------------------------------------------------------

_counter = threading.local()


class OpCounter:
    """Counts additions and multiplications done by the ternary kernels while active."""

    def __init__(self):
        self.adds = 0
        self.muls = 0

    def __enter__(self):
        self._prev = getattr(_counter, "active", None)
        _counter.active = self
        return self

    def __exit__(self, *exc):
        _counter.active = self._prev
        return False


def _count(adds: int, muls: int) -> None:
    c = getattr(_counter, "active", None)
    if c is not None:
        c.adds += adds
        c.muls += muls


def ternary_matmul(T: TernaryMatrix, X) -> np.ndarray:
    """``X @ values(T).T`` for ``X`` of shape ``(..., cols)``, using only signed adds.

    Each weight contributes one signed accumulation (``+x``, ``-x`` or
    nothing for a zero code); the only multiply is the final ``gamma``
    scaling of every output element.
    """
    X = np.asarray(X)
    if X.dtype.kind != "f":
        X = X.astype(np.float64)
    if X.ndim < 1 or X.shape[-1] != T.cols:
        raise DimensionError(f"ternary matrix with {T.cols} columns applied to input of shape {X.shape}")
    plus, minus = T.column_masks
    Xf = X.reshape(-1, T.cols)
    acc = np.zeros((Xf.shape[0], T.rows), dtype=X.dtype)
    zero = np.zeros((), dtype=X.dtype)
    for j in range(T.cols):
        xj = Xf[:, j:j + 1]
        acc += np.where(plus[j], xj, np.where(minus[j], -xj, zero))
    out = T.gamma * acc
    _count(Xf.shape[0] * T.rows * T.cols, Xf.shape[0] * T.rows)
    return out.reshape(X.shape[:-1] + (T.rows,))


def ternary_matvec(T: TernaryMatrix, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError(f"ternary_matvec expects a vector, got shape {x.shape}")
    return ternary_matmul(T, x)


# ---------------------------------------------------------------------------
# autodiff integration
# ---------------------------------------------------------------------------

def ste_quantize(W: ad.Tensor) -> ad.Tensor:
    """Differentiable ``Q(W)``: forward quantises, backward passes the gradient straight through."""
    return ad.record(quantize_values(W.data), (W,), lambda g: (ste_backward(g),), "ste_quantize")
