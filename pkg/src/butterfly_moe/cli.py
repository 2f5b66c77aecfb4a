"""Command-line entry point: ``butterfly-moe <command> [options]``.

Commands::

    train          train one variant, write checkpoint, report CSV/JSON and manifest
    report-memory  memory sweep over expert counts as CSV
    quant-error    substrate quantisation error at init and in a checkpoint
    diversity      expert cosine-similarity matrices of a checkpoint as CSV
    bench          routed-forward throughput per butterfly depth
    tables         method comparison and device-capacity tables

Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import datetime as dt
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis as an
from . import checkpoint as ckpt
from . import moe
from . import model as M
from . import tasks as tk
from .errors import ConfigError, DimensionError, NumericError

log = logging.getLogger("butterfly_moe")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

CHECKPOINT_NAME = "model.bmoe"
REPORT_CSV, REPORT_JSON, TIMING_CSV, MANIFEST_NAME = "report.csv", "report.json", "timing.csv", "manifest.json"


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def read_config_file(path) -> dict:
    """Flatten every ``key = value`` of an INI-style file into one dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    out = dict(parser.defaults())
    for section in parser.sections():
        for key, val in parser.items(section):
            if key in out and out[key] != val and key not in parser.defaults():
                raise ConfigError(f"key {key!r} set twice with different values in {path}")
            out[key] = val
    return out


def resolve_config(config_path=None, overrides: dict | None = None) -> M.ModelConfig:
    values = read_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return M.ModelConfig().replace(**values).validate()


def write_config_file(config: M.ModelConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["model"] = {k: str(v) for k, v in asdict(config).items()}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _emit(text: str, output) -> None:
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(output).write_text(text, encoding="utf-8", newline="")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(config_path=None, overrides: dict | None = None, out_dir="runs/latest") -> int:
    config = resolve_config(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    def progress(r):
        log.info("epoch %d loss %.4f acc %.4f balance %.5f quant_err %.2f%% diversity %.4f",
                 r.epoch, r.loss, r.token_accuracy, r.balance_loss, r.quant_error, r.diversity)

    model, report = M.run(config, progress)
    ckpt.save(model, out / CHECKPOINT_NAME)
    (out / REPORT_CSV).write_text(report.to_csv(timing=False), encoding="utf-8", newline="")
    (out / REPORT_JSON).write_text(report.to_json(timing=False), encoding="utf-8")
    timing = _csv_text(["epoch"] + list(M.TIMING_FIELDS),
                       [[e.epoch] + [getattr(e, f) for f in M.TIMING_FIELDS] for e in report.epochs])
    (out / TIMING_CSV).write_text(timing, encoding="utf-8", newline="")

    cfg_json = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    artifacts = {name: git_blob_hash((out / name).read_bytes())
                 for name in (CHECKPOINT_NAME, REPORT_CSV, REPORT_JSON, TIMING_CSV)}
    manifest = {
        "config": asdict(config), "config_hash": git_blob_hash(cfg_json), "seed": config.seed,
        "output_dir": str(out.resolve()), "started": started, "finished": _now(), "artifacts": artifacts,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    final = report.final
    print(f"epochs={final.epoch} loss={final.loss:.4f} token_accuracy={final.token_accuracy:.4f} out={out}")
    return EXIT_OK


def cmd_report_memory(d_model: int, d_ff: int, n_experts_list, output=None, b_precision: int = 4) -> int:
    rows = an.memory_sweep(d_model, d_ff, list(n_experts_list), b_precision)
    header = ["N_E", "standard_bytes", "butterfly_bytes", "ratio"]
    _emit(_csv_text(header, [[r[h] for h in header] for r in rows]), output)
    return EXIT_OK


def quant_error_summary(checkpoint_path) -> dict:
    trained = ckpt.load(checkpoint_path)
    initial = M.build_model(trained.config)
    before, after = M.substrate_quant_error(initial), M.substrate_quant_error(trained)
    if not np.isfinite(before):
        raise ConfigError("checkpoint has no ternary substrate (variant is not butterfly_moe)")
    return {"before_pct": before, "after_pct": after, "reduction_pct": 100.0 * (before - after) / before}


def cmd_quant_error(checkpoint_path, output=None) -> int:
    _emit(json.dumps(quant_error_summary(checkpoint_path), indent=2, sort_keys=True) + "\n", output)
    return EXIT_OK


def cmd_diversity(checkpoint_path, probe_seed: int = 0, output=None, n_tokens: int = 512) -> int:
    model = ckpt.load(checkpoint_path)
    cfg = model.config
    if not model.moe_layers:
        raise ConfigError("checkpoint has no MoE sublayers (variant is dense)")
    probe = tk.make_dataset(cfg.task, max(1, n_tokens // cfg.max_len + 1), cfg.seq_len, cfg.vocab, [probe_seed, 3])
    rows = []
    for b, S in enumerate(M.model_similarity(model, probe, n_tokens)):
        rows += [[b, i] + [f"{v:.6f}" for v in S[i]] for i in range(len(S))]
    _emit(_csv_text(["block", "expert"] + [f"e{j}" for j in range(cfg.n_experts)], rows), output)
    return EXIT_OK


def bench(layers_list, d_model: int = 512, d_ff: int = 512, n_experts: int = 8, k: int = 2,
          n_tokens: int = 1024, repeats: int = 7, seed: int = 0) -> list[dict]:
    """Best-of-``repeats`` throughput of the routed forward for each depth.

    Depths are timed round-robin on one BLAS thread. Experts run through the
    dense kernel on the dequantised substrate; the packed addition-only kernel
    is a reference loop whose interpreter overhead would swamp the rotations.
    Speedup is relative to full depth ``log2(d_model)``.
    """
    full = int(np.log2(d_model))
    depths = sorted(set(int(L) for L in layers_list) | {full})
    for L in depths:
        if L < 1 or L > full or L > int(np.log2(d_ff)):
            raise ConfigError(f"depth {L} outside [1, {min(full, int(np.log2(d_ff)))}]")
    X = np.random.default_rng(seed).normal(size=(n_tokens, d_model))
    layers = {L: moe.ButterflyMoELayer(d_model, d_ff, n_experts, k, L, L, seed=seed).freeze() for L in depths}
    best = dict.fromkeys(depths, float("inf"))
    with threadpool_limits(1):
        for L in depths:  # warm-up
            moe.moe_forward(layers[L], X[:64], kernel="dense")
        for _ in range(repeats):
            for L in depths:
                t = time.perf_counter()
                moe.moe_forward(layers[L], X, kernel="dense")
                best[L] = min(best[L], time.perf_counter() - t)
    rows = [{"L": L, "tokens_per_s": n_tokens / best[L], "speedup": best[full] / best[L], "workers": 1}
            for L in depths]
    wanted = set(int(L) for L in layers_list)
    return [r for r in rows if r["L"] in wanted or r["L"] == full]


def cmd_bench(layers_list, output=None, **kw) -> int:
    rows = bench(layers_list, **kw)
    header = ["L", "tokens_per_s", "speedup", "workers"]
    _emit(_csv_text(header, [[r["L"], f"{r['tokens_per_s']:.1f}", f"{r['speedup']:.3f}", r["workers"]] for r in rows]),
          output)
    return EXIT_OK


def cmd_tables(d_model: int = 512, d_ff: int = 2048, n_experts: int = 64) -> int:
    print(an.format_comparison_table(an.comparison_table(d_model, d_ff, n_experts)))
    print()
    print(f"{'Device':<12} {'Std formula':>12} {'Std printed':>12} {'Bfly formula':>13} {'Bfly printed':>13}")
    for r in an.capacity_table(d_model, d_ff):
        flag = "  (mismatch)" if r["discrepancy"] else ""
        print(f"{r['device']:<12} {r['standard_formula']:>12} {r['standard_paper']:>12} "
              f"{r['butterfly_formula']:>13} {r['butterfly_paper']:>13}{flag}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="butterfly-moe", description="Butterfly-rotated ternary mixture-of-experts toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint and reports")
    t.add_argument("--config", help="INI-style config file (key = value)")
    t.add_argument("--out", default="runs/latest", help="output directory")
    for f in fields(M.ModelConfig):
        typ = type(f.default)
        t.add_argument(f"--{f.name}", dest=f.name, type=str if typ is str else typ,
                       required=f.name == "seed", help=f"default {f.default!r}")

    m = sub.add_parser("report-memory", help="memory sweep over expert counts (CSV)")
    m.add_argument("--d_model", type=int, default=512)
    m.add_argument("--d_ff", type=int, default=2048)
    m.add_argument("--n_experts", type=_int_list, default=[8, 16, 32, 64, 128, 256])
    m.add_argument("--b_precision", type=int, default=4)
    m.add_argument("--output", default=None)

    q = sub.add_parser("quant-error", help="substrate quantisation error before and after training")
    q.add_argument("checkpoint")
    q.add_argument("--output", default=None)

    d = sub.add_parser("diversity", help="expert cosine-similarity matrix (CSV)")
    d.add_argument("checkpoint")
    d.add_argument("--probe_seed", type=int, default=0)
    d.add_argument("--n_tokens", type=int, default=512)
    d.add_argument("--output", default=None)

    b = sub.add_parser("bench", help="throughput per butterfly depth")
    b.add_argument("--layers", type=_int_list, default=[2, 4, 6, 9])
    b.add_argument("--d_model", type=int, default=512)
    b.add_argument("--d_ff", type=int, default=512)
    b.add_argument("--n_experts", type=int, default=8)
    b.add_argument("--k", type=int, default=2)
    b.add_argument("--tokens", type=int, default=1024)
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--output", default=None)

    tb = sub.add_parser("tables", help="comparison and device-capacity tables")
    tb.add_argument("--d_model", type=int, default=512)
    tb.add_argument("--d_ff", type=int, default=2048)
    tb.add_argument("--n_experts", type=int, default=64)
    return p


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        names = [f.name for f in fields(M.ModelConfig)]
        return cmd_train(args.config, {n: getattr(args, n) for n in names}, args.out)
    if args.command == "report-memory":
        return cmd_report_memory(args.d_model, args.d_ff, args.n_experts, args.output, args.b_precision)
    if args.command == "quant-error":
        return cmd_quant_error(args.checkpoint, args.output)
    if args.command == "diversity":
        return cmd_diversity(args.checkpoint, args.probe_seed, args.output, args.n_tokens)
    if args.command == "bench":
        return cmd_bench(args.layers, args.output, d_model=args.d_model, d_ff=args.d_ff,
                         n_experts=args.n_experts, k=args.k, n_tokens=args.tokens, repeats=args.repeats)
    return cmd_tables(args.d_model, args.d_ff, args.n_experts)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2 already
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except (ConfigError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, OverflowError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
