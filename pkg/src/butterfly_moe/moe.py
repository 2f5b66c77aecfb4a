"""Top-k gated mixture-of-experts layers.

:class:`ButterflyMoELayer` holds one latent substrate ``W_base`` (d_ff x
d_model) and, per expert, an input butterfly ``theta_i`` over d_model and an
output butterfly ``phi_i`` over d_ff. Expert ``i`` computes::

    y_i = B(phi_i) Q(W_base) B(theta_i)^T x

without ever forming the d_ff x d_model expert matrix.
:class:`StandardMoELayer` is the baseline with independent dense experts and
identical gating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import butterfly as bf
from . import ternary as tq
from .errors import ConfigError, DimensionError


@dataclass
class RoutingStats:
    """Per-expert routing statistics for one forward pass.

    ``counts`` are hard top-k assignments; ``soft_mass`` is the summed full
    softmax probability per expert (a :class:`~butterfly_moe.autodiff.Tensor`
    during training so the balance loss reaches the gate).
    """

    counts: np.ndarray
    soft_mass: object
    n_tokens: int
    k: int

    @property
    def n_experts(self) -> int:
        return len(self.counts)

    @property
    def fractions(self) -> np.ndarray:
        if self.n_tokens == 0:
            return np.zeros(len(self.counts))
        return self.counts / (self.k * self.n_tokens)


def top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ties to the lower index."""
    n_experts = logits.shape[-1]
    if not 1 <= k <= n_experts:
        raise ConfigError(f"top-k width must satisfy 1 <= k <= N_E={n_experts}, got k={k}")
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def route_logits(logits, k: int):
    """Top-k selection plus a softmax over the selected logits.

    Returns ``(weights, indices, stats)`` with ``weights``/``indices`` shaped
    ``logits.shape[:-1] + (k,)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    idx = top_k(logits, k)
    sel = np.take_along_axis(logits, idx, axis=-1)
    weights = ad.softmax_array(sel, -1)
    flat_idx = idx.reshape(-1, k)
    n_experts = logits.shape[-1]
    counts = np.bincount(flat_idx.ravel(), minlength=n_experts)
    probs = ad.softmax_array(logits.reshape(-1, n_experts), -1)
    stats = RoutingStats(counts, probs.sum(axis=0), flat_idx.shape[0], k)
    return weights, idx, stats


def load_balance_loss(stats: RoutingStats, n_experts: int | None = None, lambda_balance: float = 0.01) -> ad.Tensor:
    """``lambda * sum_i (m_i / sum_j m_j - 1/N_E)^2`` over soft routing masses ``m``."""
    n_experts = stats.n_experts if n_experts is None else n_experts
    mass = ad.tensor(stats.soft_mass)
    if stats.n_tokens == 0 or lambda_balance == 0:
        return ad.Tensor(np.zeros((), dtype=mass.dtype))
    total = float(np.sum(mass.data))
    if total <= 0:
        return ad.Tensor(np.zeros((), dtype=mass.dtype))
    dev = mass * (1.0 / total) - 1.0 / n_experts
    return (dev * dev).sum() * lambda_balance


def _seed_seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


class _GatedMoE:
    """Shared gating and dispatch; subclasses supply the per-expert map."""

    d_model: int
    d_ff: int
    n_experts: int
    k: int
    lambda_balance: float
    gate: ad.Tensor

    def _check_common(self):
        if self.n_experts < 1 or not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"need N_E >= k >= 1, got N_E={self.n_experts}, k={self.k}")

    def parameters(self) -> list[tuple[str, ad.Tensor]]:
        raise NotImplementedError

    def _expert_forward(self, i: int, x: ad.Tensor, q_T: ad.Tensor | None) -> ad.Tensor:
        raise NotImplementedError

    def _shared(self) -> ad.Tensor | None:
        return None

    def __call__(self, X: ad.Tensor):
        """Differentiable forward.

        Returns ``(Y, stats, balance_loss)`` where ``Y`` has the leading shape
        of ``X`` and trailing size ``d_ff``.
        """
        X = ad.tensor(X)
        if X.shape[-1] != self.d_model:
            raise DimensionError(f"expected trailing dim {self.d_model}, got input of shape {X.shape}")
        lead = X.shape[:-1]
        X2 = ad.reshape(X, (-1, self.d_model))
        N = X2.shape[0]
        logits = X2 @ self.gate
        idx = top_k(logits.data, self.k)
        weights = ad.softmax(ad.take_along_last(logits, idx), -1)
        probs = ad.softmax(logits, -1)
        stats = RoutingStats(np.bincount(idx.ravel(), minlength=self.n_experts),
                             ad.tsum(probs, 0), N, self.k)
        flat_w = ad.reshape(weights, (N * self.k,))
        shared = self._shared()
        Y = None
        for i in range(self.n_experts):
            tok, pos = np.nonzero(idx == i)
            if tok.size == 0:
                continue
            yi = self._expert_forward(i, ad.take_rows(X2, tok), shared)
            wi = ad.take_rows(flat_w, tok * self.k + pos)
            contrib = ad.scatter_rows(ad.scale_rows(yi, wi), tok, N)
            Y = contrib if Y is None else Y + contrib
        if Y is None:
            Y = ad.Tensor(np.zeros((N, self.d_ff), dtype=X.dtype))
        balance = load_balance_loss(stats, self.n_experts, self.lambda_balance)
        return ad.reshape(Y, lead + (self.d_ff,)), stats, balance

    def gate_logits(self, X) -> np.ndarray:
        return np.asarray(X) @ self.gate.data

    def route(self, X, k: int | None = None):
        """Route tokens ``X[..., d_model]``; see :func:`route_logits`."""
        X = np.asarray(X)
        if X.shape[-1] != self.d_model:
            raise DimensionError(f"expected trailing dim {self.d_model}, got input of shape {X.shape}")
        return route_logits(self.gate_logits(X), self.k if k is None else k)


class ButterflyMoELayer(_GatedMoE):
    """Experts as butterfly rotations of one shared ternary substrate."""

    def __init__(self, d_model: int, d_ff: int, n_experts: int = 8, k: int = 2,
                 layers_in: int | None = None, layers_out: int | None = None,
                 lambda_balance: float = 0.01, seed=0, dtype=np.float64,
                 angle_std: float = 0.01, substrate_std: float | None = None,
                 gate_std: float = 0.02):
        bf.check_config(d_model, layers_in or bf.max_layers(d_model))
        bf.check_config(d_ff, layers_out or bf.max_layers(d_ff))
        self.d_model, self.d_ff = d_model, d_ff
        self.n_experts, self.k = n_experts, k
        self._check_common()
        self.layers_in = layers_in or bf.max_layers(d_model)
        self.layers_out = layers_out or bf.max_layers(d_ff)
        self.lambda_balance = lambda_balance
        ss = _seed_seq(seed)
        base_ss, gate_ss, *expert_ss = ss.spawn(2 + 2 * n_experts)
        std = substrate_std if substrate_std is not None else d_model ** -0.5
        self.w_base = ad.Tensor(np.random.default_rng(base_ss).normal(0, std, (d_ff, d_model)),
                                requires_grad=True, dtype=dtype)
        self.gate = ad.Tensor(np.random.default_rng(gate_ss).normal(0, gate_std, (d_model, n_experts)),
                              requires_grad=True, dtype=dtype)
        self.theta = [ad.Tensor(bf.init_butterfly(d_model, self.layers_in, expert_ss[2 * i], angle_std).angles,
                                requires_grad=True, dtype=dtype) for i in range(n_experts)]
        self.phi = [ad.Tensor(bf.init_butterfly(d_ff, self.layers_out, expert_ss[2 * i + 1], angle_std).angles,
                              requires_grad=True, dtype=dtype) for i in range(n_experts)]
        self._frozen: tq.TernaryMatrix | None = None

    def parameters(self):
        out = [("w_base", self.w_base), ("gate", self.gate)]
        out += [(f"theta.{i}", t) for i, t in enumerate(self.theta)]
        out += [(f"phi.{i}", t) for i, t in enumerate(self.phi)]
        return out

    # -- substrate ---------------------------------------------------------
    @property
    def ternary(self) -> tq.TernaryMatrix:
        """Packed ``Q(W_base)``: the frozen copy in inference mode, else re-quantised."""
        return self._frozen if self._frozen is not None else tq.quantize(self.w_base.data)

    def freeze(self) -> "ButterflyMoELayer":
        self._frozen = tq.quantize(self.w_base.data)
        return self

    def unfreeze(self) -> "ButterflyMoELayer":
        self._frozen = None
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen is not None

    def expert(self, i: int) -> tuple[bf.ButterflyParams, bf.ButterflyParams]:
        if not 0 <= i < self.n_experts:
            raise IndexError(f"expert index {i} out of range [0, {self.n_experts})")
        return (bf.ButterflyParams(self.d_model, self.layers_in, self.theta[i].data),
                bf.ButterflyParams(self.d_ff, self.layers_out, self.phi[i].data))

    def _shared(self):
        return ad.transpose(tq.ste_quantize(self.w_base))

    def _expert_forward(self, i, x, q_T):
        xr = bf.butterfly_op(x, self.theta[i], transpose=True)
        return bf.butterfly_op(xr @ q_T, self.phi[i])

    def expert_apply(self, i: int, X, T: tq.TernaryMatrix | None = None, kernel: str = "ternary") -> np.ndarray:
        """Expert ``i`` on every row of ``X`` (no routing), numpy only."""
        theta, phi = self.expert(i)
        T = self.ternary if T is None else T
        xr = bf.apply(theta, X, transpose=True)
        if kernel == "ternary":
            yb = tq.ternary_matmul(T, xr)
        elif kernel == "dense":
            yb = xr @ T.values(xr.dtype).T
        else:
            raise ConfigError(f"unknown kernel {kernel!r}")
        return bf.apply(phi, yb)

    @property
    def n_params(self) -> int:
        return sum(t.size for _, t in self.parameters())


class StandardMoELayer(_GatedMoE):
    """Baseline: ``N_E`` independent full-precision d_ff x d_model experts."""

    def __init__(self, d_model: int, d_ff: int, n_experts: int = 8, k: int = 2,
                 lambda_balance: float = 0.01, seed=0, dtype=np.float64, gate_std: float = 0.02):
        self.d_model, self.d_ff = d_model, d_ff
        self.n_experts, self.k = n_experts, k
        self._check_common()
        self.lambda_balance = lambda_balance
        ss = _seed_seq(seed)
        gate_ss, *expert_ss = ss.spawn(1 + n_experts)
        self.gate = ad.Tensor(np.random.default_rng(gate_ss).normal(0, gate_std, (d_model, n_experts)),
                              requires_grad=True, dtype=dtype)
        std = d_model ** -0.5
        self.experts = [ad.Tensor(np.random.default_rng(s).normal(0, std, (d_ff, d_model)),
                                  requires_grad=True, dtype=dtype) for s in expert_ss]

    def parameters(self):
        return [("gate", self.gate)] + [(f"expert.{i}", w) for i, w in enumerate(self.experts)]

    def _expert_forward(self, i, x, q_T):
        return x @ ad.transpose(self.experts[i])

    def expert_apply(self, i: int, X, T=None, kernel: str = "dense") -> np.ndarray:
        return np.asarray(X) @ self.experts[i].data.T


# ---------------------------------------------------------------------------
# inference-path forward and diagnostics
# ---------------------------------------------------------------------------

def moe_forward(layer: _GatedMoE, X, kernel: str = "ternary"):
    """Routed forward pass in numpy, expert by expert.

    For each expert the routed tokens are gathered, rotated into the
    substrate basis, multiplied by the packed ternary substrate, rotated out
    and scatter-accumulated with their gate weight. Returns ``(Y, stats)``.
    """
    X = np.asarray(X)
    if X.dtype.kind != "f":
        X = X.astype(np.float64)
    if X.shape[-1] != layer.d_model:
        raise DimensionError(f"expected trailing dim {layer.d_model}, got input of shape {X.shape}")
    lead = X.shape[:-1]
    X2 = X.reshape(-1, layer.d_model)
    weights, idx, stats = layer.route(X2)
    T = layer.ternary if isinstance(layer, ButterflyMoELayer) else None
    if T is None:
        kernel = "dense"
    Y = np.zeros((X2.shape[0], layer.d_ff), dtype=X.dtype)
    for i in range(layer.n_experts):
        tok, pos = np.nonzero(idx == i)
        if tok.size == 0:
            continue
        yi = layer.expert_apply(i, X2[tok], T, kernel)
        Y[tok] += weights[tok, pos][:, None] * yi
    return Y.reshape(lead + (layer.d_ff,)), stats


def materialize_expert(layer: ButterflyMoELayer, i: int) -> np.ndarray:
    """Dense ``B(phi_i) Q(W_base) B(theta_i)^T`` -- diagnostics and tests only."""
    theta, phi = layer.expert(i)
    return bf.as_dense(phi) @ layer.ternary.values() @ bf.as_dense(theta).T


def expert_outputs(layer: _GatedMoE, X) -> np.ndarray:
    """Every expert applied to every probe row: shape ``(N_E, n, d_ff)``."""
    X2 = np.asarray(X, dtype=np.float64).reshape(-1, layer.d_model)
    return np.stack([layer.expert_apply(i, X2) for i in range(layer.n_experts)])


def expert_similarity(layer: _GatedMoE, X_probe) -> tuple[np.ndarray, int]:
    """Mean pairwise cosine similarity between expert outputs on shared probe tokens.

    Tokens where any expert's output has zero norm are dropped; the number
    dropped is returned alongside the ``N_E x N_E`` matrix.
    """
    X2 = np.asarray(X_probe, dtype=np.float64).reshape(-1, layer.d_model)
    if X2.shape[0] == 0:
        raise ConfigError("probe batch is empty")
    outs = expert_outputs(layer, X2)
    norms = np.linalg.norm(outs, axis=-1)
    keep = np.all(norms > 0, axis=0)
    excluded = int((~keep).sum())
    if not keep.any():
        raise ConfigError("every probe token produced a zero-norm expert output")
    unit = outs[:, keep] / norms[:, keep, None]
    sim = np.einsum("itd,jtd->ij", unit, unit) / keep.sum()
    return sim, excluded


def diversity_score(similarity) -> float:
    """``1 - mean(off-diagonal similarity)``."""
    S = np.asarray(similarity, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ConfigError(f"similarity matrix must be square, got shape {S.shape}")
    n = S.shape[0]
    if n < 2:
        raise ConfigError("diversity needs at least two experts")
    off = S[~np.eye(n, dtype=bool)]
    return float(1.0 - off.mean())
