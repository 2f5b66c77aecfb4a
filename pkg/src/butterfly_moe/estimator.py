"""scikit-learn style wrapper around :class:`~butterfly_moe.model.Model`.

``X`` holds input token sequences and ``y`` the target sequences, both
``(n_samples, seq_len)`` integer arrays. Fitting trains on ``[X, SEP, y]``
with teacher forcing; ``predict`` decodes greedily after ``[X, SEP]``.
"""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import model as M
from .tasks import SEPARATOR, TaskSample

_PARAMS = [f.name for f in fields(M.ModelConfig) if f.name not in ("task", "n_train", "n_eval", "seq_len")]


class ButterflyMoESequenceModel(BaseEstimator):
    """Sequence-to-sequence token model with a butterfly MoE (or baseline) FFN.

    Hyperparameters mirror :class:`~butterfly_moe.model.ModelConfig`; the
    sequence length is taken from the training data.
    """

    def __init__(self, vocab=32, d_model=64, d_ff=128, n_blocks=2, n_heads=2, n_experts=8, k=2,
                 layers_in=0, layers_out=0, variant="butterfly_moe", lambda_balance=0.01, angle_std=0.01,
                 substrate_std=0.0, gate_std=0.02, lr=3e-3, beta1=0.9, beta2=0.999, weight_decay=0.01,
                 batch=64, epochs=20, seed=0, dtype="float32"):
        self.vocab = vocab
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.n_experts = n_experts
        self.k = k
        self.layers_in = layers_in
        self.layers_out = layers_out
        self.variant = variant
        self.lambda_balance = lambda_balance
        self.angle_std = angle_std
        self.substrate_std = substrate_std
        self.gate_std = gate_std
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.batch = batch
        self.epochs = epochs
        self.seed = seed
        self.dtype = dtype

    def _check_tokens(self, A, name):
        A = check_array(A, dtype=np.int64, ensure_min_features=1)
        if A.min() < 0 or A.max() >= self.vocab:
            raise ValueError(f"{name} has token ids outside [0, {self.vocab})")
        return A

    def _config(self, seq_len: int) -> M.ModelConfig:
        params = {n: getattr(self, n) for n in _PARAMS}
        return M.ModelConfig(seq_len=seq_len, **params).validate()

    def fit(self, X, y):
        X = self._check_tokens(X, "X")
        y = self._check_tokens(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X and y must have the same shape, got {X.shape} and {y.shape}")
        self.config_ = self._config(X.shape[1])
        samples = [TaskSample(tuple(a), tuple(b), "copy") for a, b in zip(X.tolist(), y.tolist())]
        self.model_ = M.build_model(self.config_)
        self.report_ = M.train(self.model_, samples, self.config_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = self._check_tokens(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, model was fitted with {self.n_features_in_}")
        prefix = np.concatenate([X, np.full((len(X), 1), SEPARATOR, dtype=np.int64)], axis=1)
        return self.model_.generate(prefix, X.shape[1])

    def score(self, X, y):
        """Mean token accuracy of greedy decoding."""
        y = self._check_tokens(y, "y")
        return float((self.predict(X) == y).mean())
