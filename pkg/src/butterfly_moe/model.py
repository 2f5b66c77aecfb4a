"""Desk-scale decoder-only transformer whose FFN sublayer is swappable.

Variants:

* ``butterfly_moe`` -- :class:`~butterfly_moe.moe.ButterflyMoELayer` up-projection,
  ReLU, shared dense down-projection
* ``standard_moe`` -- same, with independent dense experts
* ``dense`` -- one FFN whose parameter count matches the butterfly sublayer
"""
from __future__ import annotations

import csv
import io
import json
import math
import resource
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import butterfly as bf
from . import moe
from . import tasks as tk
from . import ternary as tq
from .errors import ConfigError, NumericError

VARIANTS = ("dense", "standard_moe", "butterfly_moe")


@dataclass
class ModelConfig:
    vocab: int = 32
    d_model: int = 64
    d_ff: int = 128
    n_blocks: int = 2
    n_heads: int = 2
    n_experts: int = 8
    k: int = 2
    layers_in: int = 0  # 0 -> log2(d_model)
    layers_out: int = 0  # 0 -> log2(d_ff)
    variant: str = "butterfly_moe"
    lambda_balance: float = 0.01
    angle_std: float = 0.01
    substrate_std: float = 0.0  # 0 -> d_model ** -0.5
    gate_std: float = 0.02
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch: int = 64
    epochs: int = 20
    seed: int = 0
    task: str = "copy"
    seq_len: int = 16
    n_train: int = 2048
    n_eval: int = 512
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("d_model", "d_ff"):
            v = getattr(self, name)
            if v < 2 or v & (v - 1):
                raise ConfigError(f"{name} must be a power of two, got {v}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError(f"need N_E >= k >= 1, got N_E={self.n_experts}, k={self.k}")
        if self.layers_in:
            bf.check_config(self.d_model, self.layers_in)
        if self.layers_out:
            bf.check_config(self.d_ff, self.layers_out)
        if self.task not in tk.TASKS + ("mix",):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.vocab < 3 or self.batch < 1 or self.epochs < 0 or self.n_blocks < 1:
            raise ConfigError("vocab, batch, epochs and n_blocks must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def max_len(self) -> int:
        return 2 * self.seq_len + 2

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}

    def replace(self, **overrides) -> "ModelConfig":
        data = asdict(self)
        types = self.field_types()
        for key, val in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = _coerce(val, types[key], key)
        return ModelConfig(**data)


def _coerce(val, typ, key):
    if isinstance(val, typ) and not (typ is int and isinstance(val, bool)):
        return val
    try:
        if typ is bool:
            return str(val).lower() in ("1", "true", "yes", "on")
        if typ is int:
            return int(str(val), 0) if isinstance(val, str) else int(val)
        return typ(val)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {val!r}") from e


def dense_hidden_size(config: ModelConfig) -> int:
    """Hidden width of the dense FFN matching the butterfly MoE sublayer's parameters."""
    d, f = config.d_model, config.d_ff
    li = config.layers_in or bf.max_layers(d)
    lo = config.layers_out or bf.max_layers(f)
    butterfly_total = f * d + config.n_experts * bf.expert_param_count(d, f, li, lo) + d * config.n_experts + f * d
    return max(1, round(butterfly_total / (2 * d)))


class Model:
    """Embedding, ``n_blocks`` pre-norm blocks (attention + FFN sublayer), output head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dt = np.dtype(config.dtype)
        ss = np.random.SeedSequence(config.seed)
        emb_ss, head_ss, *block_ss = ss.spawn(2 + config.n_blocks)
        D, V = config.d_model, config.vocab
        r = np.random.default_rng(emb_ss)
        self.tok_emb = ad.Tensor(r.normal(0, 0.02 * 5, (V, D)), True, dt)
        self.pos_emb = ad.Tensor(r.normal(0, 0.02 * 5, (config.max_len, D)), True, dt)
        r = np.random.default_rng(head_ss)
        self.ln_f = (ad.Tensor(np.ones(D), True, dt), ad.Tensor(np.zeros(D), True, dt))
        self.head = ad.Tensor(r.normal(0, D ** -0.5, (D, V)), True, dt)
        self.blocks = [self._make_block(s, dt) for s in block_ss]

    def _make_block(self, seed_seq, dt) -> dict:
        c = self.config
        D, F = c.d_model, c.d_ff
        attn_ss, ffn_ss, down_ss = seed_seq.spawn(3)
        r = np.random.default_rng(attn_ss)
        blk = {
            "ln1": (ad.Tensor(np.ones(D), True, dt), ad.Tensor(np.zeros(D), True, dt)),
            "ln2": (ad.Tensor(np.ones(D), True, dt), ad.Tensor(np.zeros(D), True, dt)),
        }
        for name in ("wq", "wk", "wv", "wo"):
            blk[name] = ad.Tensor(r.normal(0, D ** -0.5, (D, D)), True, dt)
        if c.variant == "butterfly_moe":
            blk["ffn"] = moe.ButterflyMoELayer(
                D, F, c.n_experts, c.k, c.layers_in or None, c.layers_out or None,
                c.lambda_balance, seed=ffn_ss, dtype=dt, angle_std=c.angle_std,
                substrate_std=c.substrate_std or None, gate_std=c.gate_std)
            hidden = F
        elif c.variant == "standard_moe":
            blk["ffn"] = moe.StandardMoELayer(D, F, c.n_experts, c.k, c.lambda_balance, seed=ffn_ss, dtype=dt,
                                               gate_std=c.gate_std)
            hidden = F
        else:
            hidden = dense_hidden_size(c)
            blk["up"] = ad.Tensor(np.random.default_rng(ffn_ss).normal(0, D ** -0.5, (D, hidden)), True, dt)
        blk["down"] = ad.Tensor(np.random.default_rng(down_ss).normal(0, hidden ** -0.5, (hidden, D)), True, dt)
        return blk

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for b, blk in enumerate(self.blocks):
            for key in ("ln1", "ln2"):
                out += [(f"blocks.{b}.{key}.weight", blk[key][0]), (f"blocks.{b}.{key}.bias", blk[key][1])]
            for key in ("wq", "wk", "wv", "wo"):
                out.append((f"blocks.{b}.attn.{key}", blk[key]))
            if "ffn" in blk:
                out += [(f"blocks.{b}.moe.{n}", t) for n, t in blk["ffn"].parameters()]
            else:
                out.append((f"blocks.{b}.ffn.up", blk["up"]))
            out.append((f"blocks.{b}.ffn.down", blk["down"]))
        out += [("ln_f.weight", self.ln_f[0]), ("ln_f.bias", self.ln_f[1]), ("head", self.head)]
        return out

    def parameters(self) -> list[ad.Tensor]:
        return [t for _, t in self.named_parameters()]

    @property
    def moe_layers(self) -> list[moe._GatedMoE]:
        return [blk["ffn"] for blk in self.blocks if "ffn" in blk]

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())

    # -- forward ------------------------------------------------------------
    def _attention(self, blk, x: ad.Tensor) -> ad.Tensor:
        B, T, D = x.shape
        H = self.config.n_heads
        hd = D // H

        def heads(w):
            return ad.transpose(ad.reshape(x @ w, (B, T, H, hd)), (0, 2, 1, 3))

        q, k, v = heads(blk["wq"]), heads(blk["wk"]), heads(blk["wv"])
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        causal = np.triu(np.full((T, T), -1e9, dtype=x.dtype), k=1)
        att = ad.softmax(scores + causal, -1)
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
        return out @ blk["wo"]

    def _ffn(self, blk, h: ad.Tensor):
        if "ffn" in blk:
            y, stats, balance = blk["ffn"](h)
            return ad.relu(y) @ blk["down"], stats, balance
        return ad.relu(h @ blk["up"]) @ blk["down"], None, None

    def forward(self, tokens, collect_moe_inputs: bool = False):
        """Logits ``(B, T, V)`` plus the summed balance loss and per-block routing stats."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ConfigError(f"tokens must be (batch, time), got shape {tokens.shape}")
        B, T = tokens.shape
        if T > self.config.max_len:
            raise ConfigError(f"sequence length {T} exceeds model context {self.config.max_len}")
        x = ad.embedding(tokens, self.tok_emb) + ad.take_rows(self.pos_emb, np.arange(T))
        balance = None
        stats, moe_inputs = [], []
        for blk in self.blocks:
            x = x + self._attention(blk, ad.layernorm(x, 1e-5, *blk["ln1"]))
            h = ad.layernorm(x, 1e-5, *blk["ln2"])
            if collect_moe_inputs:
                moe_inputs.append(h.data.reshape(-1, h.shape[-1]).copy())
            f, st, bl = self._ffn(blk, h)
            x = x + f
            if st is not None:
                stats.append(st)
                balance = bl if balance is None else balance + bl
        logits = ad.layernorm(x, 1e-5, *self.ln_f) @ self.head
        if balance is None:
            balance = ad.Tensor(np.zeros((), dtype=logits.dtype))
        out = (logits, balance, stats)
        return out + (moe_inputs,) if collect_moe_inputs else out

    __call__ = forward

    def loss(self, inputs, targets, mask):
        """Cross-entropy over masked positions plus the balance term; returns (total, ce, balance, logits)."""
        logits, balance, _ = self.forward(inputs)
        V = logits.shape[-1]
        flat = ad.reshape(logits, (-1, V))
        sel = np.flatnonzero(np.asarray(mask).ravel())
        ce = ad.cross_entropy(ad.take_rows(flat, sel), np.asarray(targets).ravel()[sel])
        return ce + balance, ce, balance, logits

    # -- inference ----------------------------------------------------------
    def freeze(self) -> "Model":
        for layer in self.moe_layers:
            if isinstance(layer, moe.ButterflyMoELayer):
                layer.freeze()
        return self

    def unfreeze(self) -> "Model":
        for layer in self.moe_layers:
            if isinstance(layer, moe.ButterflyMoELayer):
                layer.unfreeze()
        return self

    def generate(self, prefixes, n_new: int) -> np.ndarray:
        """Greedy continuation of equal-length token ``prefixes`` by ``n_new`` tokens."""
        seq = np.asarray(prefixes, dtype=np.int64)
        with ad.no_grad():
            for _ in range(n_new):
                logits = self.forward(seq)[0].data
                nxt = logits[:, -1].argmax(axis=-1)
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return seq[:, -n_new:]


def build_model(config: ModelConfig) -> Model:
    return Model(config)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to weight matrices only; layer-norm parameters, embeddings
    and butterfly angles are exempt (decaying angles would pull every expert
    towards the identity rotation).
    """

    def __init__(self, named_params, lr=3e-3, betas=(0.9, 0.999), weight_decay=0.01, eps=1e-8):
        self.params = [p for _, p in named_params]
        self.decay = [p.ndim >= 2 and not any(s in n for s in ("theta", "phi", "emb")) for n, p in named_params]
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if decay and self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    token_accuracy: float
    balance_loss: float
    quant_error: float
    diversity: float
    wall_time: float
    peak_memory_mb: float


TIMING_FIELDS = ("wall_time", "peak_memory_mb")


@dataclass
class TrainReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)

    def add(self, rec: EpochRecord) -> None:
        if self.epochs and rec.epoch <= self.epochs[-1].epoch:
            raise ValueError("epochs must be recorded in increasing order")
        self.epochs.append(rec)

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    @property
    def initial(self) -> EpochRecord:
        return self.epochs[0]

    @staticmethod
    def _columns(timing: bool) -> list[str]:
        return [f.name for f in fields(EpochRecord) if timing or f.name not in TIMING_FIELDS]

    def to_json(self, timing: bool = True) -> str:
        names = self._columns(timing)
        rows = [{n: getattr(e, n) for n in names} for e in self.epochs]
        return json.dumps({"config": self.config, "epochs": rows}, indent=2, sort_keys=True, ensure_ascii=False)

    def to_csv(self, timing: bool = True) -> str:
        """RFC-4180 CSV; ``timing=False`` drops the machine-dependent columns."""
        buf = io.StringIO()
        names = self._columns(timing)
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(names)
        for e in self.epochs:
            w.writerow([getattr(e, n) for n in names])
        return buf.getvalue()


def evaluate(model: Model, dataset, batch: int = 256) -> tuple[float, float]:
    """Teacher-forced loss and next-token accuracy over target positions."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    inputs, targets, mask = tk.pack(dataset) if not isinstance(dataset, tuple) else dataset
    total_loss = correct = count = 0.0
    with ad.no_grad():
        for s in range(0, len(inputs), batch):
            x, y, m = inputs[s:s + batch], targets[s:s + batch], mask[s:s + batch]
            logits = model.forward(x)[0].data.astype(np.float64)
            sel_logits, sel_y = logits[m], y[m]
            z = sel_logits - sel_logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total_loss += -logp[np.arange(len(sel_y)), sel_y].sum()
            correct += (sel_logits.argmax(axis=1) == sel_y).sum()
            count += len(sel_y)
    return total_loss / count, correct / count


def substrate_quant_error(model: Model) -> float:
    """Mean relative quantisation error (%) of the latent substrates; NaN without any."""
    errs = [tq.relative_quant_error(l.w_base.data) for l in model.moe_layers if isinstance(l, moe.ButterflyMoELayer)]
    return float(np.mean(errs)) if errs else float("nan")


def probe_inputs(model: Model, dataset, n_tokens: int = 512) -> list[np.ndarray]:
    """Inputs seen by each MoE sublayer on the first tokens of ``dataset``."""
    inputs, _, _ = tk.pack(dataset) if not isinstance(dataset, tuple) else dataset
    n_seq = max(1, math.ceil(n_tokens / inputs.shape[1]))
    with ad.no_grad():
        *_, collected = model.forward(inputs[:n_seq], collect_moe_inputs=True)
    return [c[:n_tokens] for c in collected]


def model_similarity(model: Model, dataset, n_tokens: int = 512) -> list[np.ndarray]:
    """Per-MoE-block expert cosine-similarity matrices on probe tokens."""
    probes = probe_inputs(model, dataset, n_tokens)
    return [moe.expert_similarity(layer, p)[0] for layer, p in zip(model.moe_layers, probes)]


def model_diversity(model: Model, dataset, n_tokens: int = 512) -> float:
    if not model.moe_layers or model.config.n_experts < 2:
        return float("nan")
    return float(np.mean([moe.diversity_score(s) for s in model_similarity(model, dataset, n_tokens)]))


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def make_datasets(config: ModelConfig) -> tuple[list, list]:
    """Train and held-out samples for ``config.task``, both derived from ``config.seed``."""
    train_data = tk.make_dataset(config.task, config.n_train, config.seq_len, config.vocab, [config.seed, 1])
    eval_data = tk.make_dataset(config.task, config.n_eval, config.seq_len, config.vocab, [config.seed, 2])
    return train_data, eval_data


def run(config: ModelConfig, log=None) -> tuple[Model, TrainReport]:
    """Build, train and report on one configuration end to end."""
    train_data, eval_data = make_datasets(config.validate())
    model = build_model(config)
    return model, train(model, train_data, config, eval_data, log)


def train(model: Model, train_data, config: ModelConfig | None = None, eval_data=None, log=None) -> TrainReport:
    """Optimise cross-entropy plus load balancing with AdamW.

    Epoch 0 of the report holds the initial metrics. The data order depends
    only on ``config.seed``, so all variants see identical batches.
    """
    config = (config or model.config).validate()
    eval_data = train_data if eval_data is None else eval_data
    packed = tk.pack(train_data)
    eval_packed = tk.pack(eval_data)
    opt = AdamW(model.named_parameters(), config.lr, (config.beta1, config.beta2), config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 0x0DA7A])
    report = TrainReport(asdict(config))
    t0 = time.perf_counter()

    def snapshot(epoch, balance):
        loss, acc = evaluate(model, eval_packed)
        rec = EpochRecord(epoch, float(loss), float(acc), float(balance),
                          substrate_quant_error(model), model_diversity(model, eval_data),
                          time.perf_counter() - t0, _peak_mb())
        report.add(rec)
        if log:
            log(rec)
        return rec

    snapshot(0, float("nan"))
    n = len(packed[0])
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        bal_sum = 0.0
        steps = 0
        for s in range(0, n, config.batch):
            idx = perm[s:s + config.batch]
            total, ce, bal, _ = model.loss(packed[0][idx], packed[1][idx], packed[2][idx])
            if not np.isfinite(total.data):
                raise NumericError(f"loss became non-finite at epoch {epoch}, step {steps}")
            opt.zero_grad()
            total.backward()
            opt.step()
            bal_sum += float(bal.data)
            steps += 1
        rec = snapshot(epoch, bal_sum / max(steps, 1))
        if not np.isfinite(rec.loss):
            raise NumericError(f"evaluation loss became non-finite at epoch {epoch}")
    return report
