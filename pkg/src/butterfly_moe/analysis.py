"""Closed-form memory, compression, FLOP and DRAM-energy models.

Byte counts are exact integers except the substrate at 1.58 bits/weight,
which is fractional. Reports quote MB = 10**6 bytes with MiB = 2**20 bytes
alongside; device budgets use binary units (1 GB budget = 2**30 bytes).
"""
from __future__ import annotations

import math
import operator
import warnings
from dataclasses import asdict, dataclass

from . import butterfly as bf
from .errors import ConfigError

MB = 10 ** 6
MiB = 2 ** 20
GiB = 2 ** 30
KiB = 2 ** 10

DRAM_PJ_PER_BIT = 6.4
BITS_PER_WEIGHT = 1.58
BYTES_PER_ANGLE = 2

# compression ratios quoted for published baselines (not reimplemented)
BASELINE_RATIOS = {
    "QMoE": (10.0, 20.0),
    "MoQE (2-bit)": (5.0, 5.0),
    "PuzzleMoE": (2.0, 2.0),
    "MC": (4.0, 4.0),
}

# budgets and expert counts as printed for the edge-capacity comparison
DEVICES = {"RPi 5": 8 * GiB, "Jetson Nano": 4 * GiB, "ESP32": 512 * KiB}
PAPER_DEVICE_CAPACITY = {
    "Standard MoE": {"RPi 5": 63, "Jetson Nano": 31, "ESP32": 0},
    "QMoE": {"RPi 5": 314, "Jetson Nano": 157, "ESP32": 2},
    "MoQE": {"RPi 5": 320, "Jetson Nano": 160, "ESP32": 2},
    "ButterflyMoE": {"RPi 5": 21079, "Jetson Nano": 10540, "ESP32": 131},
}


def _log2_exact(d: int, name: str) -> int:
    try:
        d = operator.index(d)
    except TypeError:
        raise ConfigError(f"{name} must be an integer, got {d!r}") from None
    if d < 2 or d & (d - 1):
        raise ConfigError(f"{name} must be a power of two, got {d}")
    return d.bit_length() - 1


def substrate_bytes(d_model: int, d_ff: int, bits_per_weight: float = BITS_PER_WEIGHT) -> float:
    _log2_exact(d_model, "d_model")
    _log2_exact(d_ff, "d_ff")
    return bits_per_weight / 8 * d_ff * d_model


def expert_angles(d_model: int, d_ff: int, layers_in: int | None = None, layers_out: int | None = None) -> int:
    """Angles per expert: ``d_model/2 * L_in + d_ff/2 * L_out`` (full depth by default)."""
    li = _log2_exact(d_model, "d_model") if layers_in is None else layers_in
    lo = _log2_exact(d_ff, "d_ff") if layers_out is None else layers_out
    return bf.param_count(d_model, li) + bf.param_count(d_ff, lo)


def expert_rotation_bytes(d_model: int, d_ff: int, bytes_per_angle: int = BYTES_PER_ANGLE,
                          layers_in: int | None = None, layers_out: int | None = None) -> int:
    return bytes_per_angle * expert_angles(d_model, d_ff, layers_in, layers_out)


def butterfly_memory_bytes(d_model: int, d_ff: int, n_experts: int, bits_per_weight: float = BITS_PER_WEIGHT,
                           bytes_per_angle: int = BYTES_PER_ANGLE) -> float:
    if n_experts < 0:
        raise ConfigError(f"n_experts must be non-negative, got {n_experts}")
    return substrate_bytes(d_model, d_ff, bits_per_weight) + n_experts * expert_rotation_bytes(d_model, d_ff, bytes_per_angle)


def standard_moe_memory_bytes(d_model: int, d_ff: int, n_experts: int, b_precision: int = 4) -> int:
    if b_precision not in (2, 4):
        raise ConfigError(f"b_precision must be 2 (FP16) or 4 (FP32) bytes, got {b_precision}")
    return n_experts * d_ff * d_model * b_precision


def compression_ratio(d_model: int, d_ff: int, n_experts: int, b_precision: int = 4,
                      bits_per_weight: float = BITS_PER_WEIGHT, bytes_per_angle: int = BYTES_PER_ANGLE) -> float:
    return (standard_moe_memory_bytes(d_model, d_ff, n_experts, b_precision)
            / butterfly_memory_bytes(d_model, d_ff, n_experts, bits_per_weight, bytes_per_angle))


def asymptotic_compression(d_model: int, d_ff: int, b_precision: int = 4, bytes_per_angle: int = BYTES_PER_ANGLE) -> float:
    """Limit of :func:`compression_ratio` as the expert count grows without bound."""
    return d_model * d_ff * b_precision / expert_rotation_bytes(d_model, d_ff, bytes_per_angle)


@dataclass
class MemoryReport:
    d_model: int
    d_ff: int
    n_experts: int
    b_precision: int
    substrate_bytes_info: float  # at 1.58 bits/weight
    substrate_bytes_packed: int  # at 2 bits/weight
    expert_rotation_bytes: int
    butterfly_bytes: float
    butterfly_bytes_packed: int
    standard_bytes: int
    compression_ratio: float
    asymptotic_ratio: float

    def as_dict(self) -> dict:
        return asdict(self)


def memory_report(d_model: int, d_ff: int, n_experts: int, b_precision: int = 4) -> MemoryReport:
    packed_sub = math.ceil(d_ff * d_model * 2 / 8)
    per_expert = expert_rotation_bytes(d_model, d_ff)
    bfly = butterfly_memory_bytes(d_model, d_ff, n_experts)
    std = standard_moe_memory_bytes(d_model, d_ff, n_experts, b_precision)
    return MemoryReport(
        d_model, d_ff, n_experts, b_precision,
        substrate_bytes(d_model, d_ff), packed_sub, per_expert,
        bfly, packed_sub + n_experts * per_expert, std,
        std / bfly, asymptotic_compression(d_model, d_ff, b_precision),
    )


def memory_sweep(d_model: int, d_ff: int, n_experts_list, b_precision: int = 4) -> list[dict]:
    """Rows ``(N_E, standard_bytes, butterfly_bytes, ratio)`` for each expert count."""
    rows = []
    for n in n_experts_list:
        std = standard_moe_memory_bytes(d_model, d_ff, n, b_precision)
        bfly = butterfly_memory_bytes(d_model, d_ff, n)
        rows.append({"N_E": n, "standard_bytes": std, "butterfly_bytes": bfly, "ratio": std / bfly})
    return rows


def flops_per_token(d_model: int, d_ff: int, k: int, layers_in: int | None = None,
                    layers_out: int | None = None) -> tuple[int, int]:
    """``(rotation_flops, ternary_adds)`` for one token routed to ``k`` experts."""
    li = _log2_exact(d_model, "d_model") if layers_in is None else layers_in
    lo = _log2_exact(d_ff, "d_ff") if layers_out is None else layers_out
    rotation = k * bf.FLOPS_PER_PAIR * (li * d_model // 2 + lo * d_ff // 2)
    return rotation, k * d_ff * d_model


def dram_energy_joules(nbytes: float, pj_per_bit: float = DRAM_PJ_PER_BIT) -> float:
    if nbytes < 0:
        raise ConfigError("byte count must be non-negative")
    return nbytes * 8 * pj_per_bit * 1e-12


def device_capacity(budget_bytes: float, d_model: int, d_ff: int, per_expert_overhead_bytes: float = 0) -> int:
    """Largest expert count whose butterfly memory fits in ``budget_bytes``."""
    sub = substrate_bytes(d_model, d_ff)
    free = budget_bytes - sub - per_expert_overhead_bytes
    if free < 0:
        warnings.warn(f"budget of {budget_bytes} bytes does not hold the {sub:.0f}-byte substrate", stacklevel=2)
        return 0
    return int(free // expert_rotation_bytes(d_model, d_ff))


def capacity_table(d_model: int = 512, d_ff: int = 2048, devices=None) -> list[dict]:
    """Formula capacities next to the published ones, flagging disagreements."""
    devices = DEVICES if devices is None else devices
    std_expert = d_ff * d_model * 4
    rows = []
    for dev, budget in devices.items():
        formula_bfly = device_capacity(budget, d_model, d_ff)
        formula_std = int(budget // std_expert)
        paper = {m: v.get(dev) for m, v in PAPER_DEVICE_CAPACITY.items()}
        rows.append({
            "device": dev, "budget_bytes": budget,
            "standard_formula": formula_std, "standard_paper": paper["Standard MoE"],
            "butterfly_formula": formula_bfly, "butterfly_paper": paper["ButterflyMoE"],
            "discrepancy": formula_bfly != paper["ButterflyMoE"] or formula_std != paper["Standard MoE"],
        })
    return rows


def comparison_table(d_model: int = 512, d_ff: int = 2048, n_experts: int = 64, b_precision: int = 4) -> list[dict]:
    """Footprint of each compression method at ``n_experts``.

    Baselines divide the standard footprint by their quoted ratio; the
    ButterflyMoE row comes from :func:`butterfly_memory_bytes`.
    """
    std = standard_moe_memory_bytes(d_model, d_ff, n_experts, b_precision)
    rows = [{"method": "Standard MoE", "scaling": "O(N d^2)", "ratio_low": 1.0, "ratio_high": 1.0,
             "bytes_low": std, "bytes_high": std}]
    for name, (lo, hi) in BASELINE_RATIOS.items():
        rows.append({"method": name, "scaling": "O(N d^2)", "ratio_low": lo, "ratio_high": hi,
                     "bytes_low": std / hi, "bytes_high": std / lo})
    bfly = butterfly_memory_bytes(d_model, d_ff, n_experts)
    r = std / bfly
    rows.append({"method": "ButterflyMoE", "scaling": "O(d^2 + N d log d)", "ratio_low": r, "ratio_high": r,
                 "bytes_low": bfly, "bytes_high": bfly})
    return rows


def format_bytes(n: float) -> str:
    return f"{n / MB:.2f} MB ({n / MiB:.2f} MiB)"


def format_comparison_table(rows=None) -> str:
    rows = comparison_table() if rows is None else rows
    lines = [f"{'Method':<14} {'Scaling':<20} {'Ratio':>12} {'Footprint':>34}"]
    for r in rows:
        ratio = (f"{r['ratio_low']:.1f}x" if r["ratio_low"] == r["ratio_high"]
                 else f"{r['ratio_low']:.0f}-{r['ratio_high']:.0f}x")
        if r["bytes_low"] == r["bytes_high"]:
            foot = format_bytes(r["bytes_low"])
        else:
            foot = f"{r['bytes_low'] / MiB:.1f}-{r['bytes_high'] / MiB:.1f} MiB"
        lines.append(f"{r['method']:<14} {r['scaling']:<20} {ratio:>12} {foot:>34}")
    return "\n".join(lines)
