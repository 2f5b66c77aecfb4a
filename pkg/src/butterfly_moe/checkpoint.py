"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"BMOE1"
    u32 config_len, config JSON (UTF-8, sorted keys)
    u32 n_sections
    n_sections x { u16 name_len, name (UTF-8), u8 kind, u64 payload_len, payload }

Section kinds:

* ``KIND_DENSE`` -- u8 ndim, ndim x u32 dims, f32 values (row-major)
* ``KIND_TERNARY`` -- u32 rows, u32 cols, f64 gamma, packed 2-bit codes
* ``KIND_BUTTERFLY`` -- u32 dim, u32 num_layers, f32 angles, stage-major

A butterfly MoE block writes its packed substrate (codes + gamma), the
latent full-precision substrate, one butterfly section per expert transform
and the gate matrix. Every other parameter is a dense section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import butterfly as bf
from . import moe
from . import ternary as tq
from .errors import ConfigError
from .model import Model, ModelConfig

MAGIC = b"BMOE1"
KIND_DENSE, KIND_TERNARY, KIND_BUTTERFLY = 0, 1, 2


def _dense_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f4").tobytes()


def _dense_from(buf: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<B", buf, 0)
    shape = struct.unpack_from(f"<{ndim}I", buf, 1)
    off = 1 + 4 * ndim
    return np.frombuffer(buf, dtype="<f4", offset=off, count=int(np.prod(shape))).reshape(shape)


def _sections(model: Model):
    for name, t in model.named_parameters():
        if ".moe.theta." in name or ".moe.phi." in name:
            continue
        yield name, KIND_DENSE, _dense_bytes(t.data)
    for b, layer in enumerate(model.moe_layers):
        if not isinstance(layer, moe.ButterflyMoELayer):
            continue
        yield f"blocks.{b}.moe.substrate", KIND_TERNARY, layer.ternary.to_bytes()
        for i in range(layer.n_experts):
            theta, phi = layer.expert(i)
            yield f"blocks.{b}.moe.theta.{i}", KIND_BUTTERFLY, theta.to_bytes()
            yield f"blocks.{b}.moe.phi.{i}", KIND_BUTTERFLY, phi.to_bytes()


def dumps(model: Model) -> bytes:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    secs = list(_sections(model))
    out = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(secs))]
    for name, kind, payload in secs:
        nb = name.encode("utf-8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<BQ", kind, len(payload)), payload]
    return b"".join(out)


def save(model: Model, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model))
    return path


def read_sections(buf: bytes) -> tuple[dict, dict]:
    """Parse a checkpoint into ``(config_dict, {name: (kind, payload)})``."""
    if buf[:len(MAGIC)] != MAGIC:
        raise ConfigError("not a checkpoint: bad magic bytes")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        config = json.loads(buf[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        sections = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode("utf-8")
            off += nl
            kind, plen = struct.unpack_from("<BQ", buf, off)
            off += 9
            sections[name] = (kind, buf[off:off + plen])
            off += plen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"corrupt checkpoint: {e}") from e
    return config, sections


def loads(buf: bytes) -> Model:
    config, sections = read_sections(buf)
    model = Model(ModelConfig(**config))
    params = dict(model.named_parameters())
    for name, (kind, payload) in sections.items():
        if kind == KIND_DENSE:
            if name not in params:
                raise ConfigError(f"checkpoint section {name!r} has no matching parameter")
            arr = _dense_from(payload)
            if arr.shape != params[name].shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
            params[name].data[...] = arr
        elif kind == KIND_BUTTERFLY:
            p, _ = bf.ButterflyParams.from_bytes(payload)
            params[name].data[...] = p.angles
    return model


def load(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return loads(path.read_bytes())


def load_substrates(path) -> list[tq.TernaryMatrix]:
    """Packed substrates exactly as stored, one per butterfly MoE block."""
    _, sections = read_sections(Path(path).read_bytes())
    out = []
    for name in sorted(n for n, (k, _) in sections.items() if k == KIND_TERNARY):
        out.append(tq.TernaryMatrix.from_bytes(sections[name][1])[0])
    return out
