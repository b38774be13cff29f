"""Forward-latency benchmarking and the latency/AP/footprint Pareto report.

Latency numbers are wall-clock milliseconds for the reference forward pass
on whatever machine runs the harness. Absolute values are meaningless off
that machine; only orderings between variants measured in the same session
are claimed. Footprints are analytic fp16-equivalent byte counts, so they
are machine-independent.
"""

from __future__ import annotations

import csv
import gc
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import resolve_threads
from .models import (BENCH_VARIANTS, SegModel, build_seg_model, count_params,
                     footprint_fp16_bytes)
from .nn import BatchNorm2d
from .tensor import Tensor, no_grad


@dataclass
class BenchResult:
    model_id: str
    batch: int
    input_size: int
    threads: int
    warmup: int
    params: int
    fp16_bytes: int
    median_ms: float
    p95_ms: float
    samples_ms: list = field(default_factory=list)
    ap: float | None = None
    fire_f1: float | None = None


def _seed_batch_stats(model, x: np.ndarray):
    """Fresh BatchNorm layers have no running stats and refuse eval mode;
    give them one uncounted train-mode forward. Loaded checkpoints already
    carry stats and are left untouched."""
    fresh = [m for m in model.modules()
             if isinstance(m, BatchNorm2d) and int(m.num_batches[0]) == 0]
    if fresh:
        model.train()
        with no_grad():
            model(Tensor(x))


def bench_forward(model, model_id: str, batch: int = 8, input_size: int = 224,
                  warmup: int = 10, iters: int = 100, seed: int = 0) -> BenchResult:
    """Time `iters` eval-mode forwards of a (batch, 1, S, S) input.

    The first `warmup` forwards are discarded. p95 uses numpy's default
    linear interpolation. The declared thread count is the DM_THREADS cap,
    which is also all the concurrency this process uses.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1; zero iterations produce no samples")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    dtype = next(iter(model.parameters())).dtype
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, 1, input_size, input_size)).astype(dtype)
    _seed_batch_stats(model, x)
    model.eval()
    samples = []
    gc_was_on = gc.isenabled()
    with no_grad():
        for _ in range(warmup):
            model(Tensor(x))
        # collector pauses would land in arbitrary samples; timeit does the same
        gc.collect()
        gc.disable()
        try:
            for _ in range(iters):
                t0 = time.perf_counter()
                model(Tensor(x))
                samples.append((time.perf_counter() - t0) * 1e3)
        finally:
            if gc_was_on:
                gc.enable()
    return BenchResult(
        model_id=model_id,
        batch=batch,
        input_size=input_size,
        threads=resolve_threads(None),
        warmup=warmup,
        params=count_params(model),
        fp16_bytes=footprint_fp16_bytes(model),
        median_ms=float(np.median(samples)),
        p95_ms=float(np.percentile(samples, 95)),
        samples_ms=[round(s, 4) for s in samples],
    )


def bench_variants(names=None, batch: int = 8, input_size: int = 224,
                   warmup: int = 10, iters: int = 100, seed: int = 0) -> list:
    """Benchmark freshly built reference variants, one after another."""
    if names is None:
        names = list(BENCH_VARIANTS)
    out = []
    for name in names:
        spec = BENCH_VARIANTS[name]
        model = build_seg_model(spec["emb_dim"], spec["head"], spec["refine"],
                                seed=0)
        model.to_dtype(np.float32)
        out.append(bench_forward(model, name, batch=batch,
                                 input_size=input_size, warmup=warmup,
                                 iters=iters, seed=seed))
    return out


def variant_id(model_config: dict) -> str:
    vid = f"emb{model_config['emb_dim']}_{model_config['head']}"
    if model_config.get("refine"):
        vid += "_refine"
    return vid


# ---------------------------------------------------------------------------
# CSV in/out

_COLUMNS = ("model", "batch", "input", "threads", "warmup", "params",
            "fp16_bytes", "median_ms", "p95_ms", "ap", "fire_f1", "samples_ms")


def write_bench_csv(results, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_COLUMNS)
        for r in results:
            w.writerow([
                r.model_id, r.batch, r.input_size, r.threads, r.warmup,
                r.params, r.fp16_bytes,
                f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}",
                "" if r.ap is None else f"{r.ap:.6f}",
                "" if r.fire_f1 is None else f"{r.fire_f1:.6f}",
                ";".join(f"{s:.4f}" for s in r.samples_ms),
            ])


def read_bench_csv(path) -> list:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "model" not in reader.fieldnames:
            raise ValueError(f"{path}: not a bench CSV (missing header)")
        for row in reader:
            out.append(BenchResult(
                model_id=row["model"],
                batch=int(row["batch"]),
                input_size=int(row["input"]),
                threads=int(row["threads"]),
                warmup=int(row["warmup"]),
                params=int(row["params"]),
                fp16_bytes=int(row["fp16_bytes"]),
                median_ms=float(row["median_ms"]),
                p95_ms=float(row["p95_ms"]),
                ap=float(row["ap"]) if row.get("ap") else None,
                fire_f1=float(row["fire_f1"]) if row.get("fire_f1") else None,
                samples_ms=[float(s) for s in row["samples_ms"].split(";")]
                if row.get("samples_ms") else [],
            ))
    return out


def join_eval_metrics(results, reports):
    """Attach pixel AP / Fire-F1 from eval reports, matched by variant id."""
    by_id = {}
    for rep in reports:
        d = rep.to_json() if hasattr(rep, "to_json") else rep
        mc = d.get("model_config") or {}
        if "emb_dim" in mc:
            by_id[variant_id(mc)] = d
    for r in results:
        d = by_id.get(r.model_id)
        if d is not None:
            r.ap = d["pixel_ap"]
            if d.get("fire"):
                r.fire_f1 = d["fire"]["f1"]
    return results


# ---------------------------------------------------------------------------
# Pareto frontier

def mark_dominated(rows) -> list:
    """rows: (median_ms, fp16_bytes, ap) triples. A row is dominated iff some
    other row is <= in latency and footprint, >= in AP, and strictly better
    in at least one of the three."""
    flags = []
    for i, (lat, fp, ap) in enumerate(rows):
        dominated = False
        for j, (lat2, fp2, ap2) in enumerate(rows):
            if i == j:
                continue
            if (lat2 <= lat and fp2 <= fp and ap2 >= ap
                    and (lat2 < lat or fp2 < fp or ap2 > ap)):
                dominated = True
                break
        flags.append(dominated)
    return flags


def write_pareto_csv(results, path):
    """results must carry ap; rows without one are rejected loudly."""
    missing = [r.model_id for r in results if r.ap is None]
    if missing:
        raise ValueError(f"no eval metrics joined for: {', '.join(missing)}")
    flags = mark_dominated([(r.median_ms, r.fp16_bytes, r.ap) for r in results])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("model", "median_ms", "p95_ms", "fp16_bytes", "params",
                    "ap", "fire_f1", "dominated"))
        for r, d in zip(results, flags):
            w.writerow([r.model_id, f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}",
                        r.fp16_bytes, r.params, f"{r.ap:.6f}",
                        "" if r.fire_f1 is None else f"{r.fire_f1:.6f}",
                        "yes" if d else "no"])
    return flags


def format_bench_table(results) -> str:
    """Fixed-width text rendering of bench rows."""
    headers = ["model", "batch", "params", "fp16_kB", "median_ms", "p95_ms",
               "ap", "fire_f1"]
    rows = []
    for r in results:
        rows.append([
            r.model_id, str(r.batch), f"{r.params:,}",
            f"{r.fp16_bytes / 1024:.1f}",
            f"{r.median_ms:.2f}", f"{r.p95_ms:.2f}",
            "-" if r.ap is None else f"{r.ap:.4f}",
            "-" if r.fire_f1 is None else f"{r.fire_f1:.4f}",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / (n - 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = np.ceil(lo / step) * step
    vals = []
    v = start
    while v <= hi + 1e-9 * step:
        vals.append(round(v, 10))
        v += step
    return vals


def write_pareto_svg(results, path):
    """Latency vs AP scatter, point area tracking footprint; dominated rows
    drawn hollow, the frontier traced left to right."""
    rows = [r for r in results if r.ap is not None]
    if not rows:
        raise ValueError("no rows carry an AP value; join eval metrics first")
    flags = mark_dominated([(r.median_ms, r.fp16_bytes, r.ap) for r in rows])

    w_px, h_px = 640, 420
    ml, mr, mt, mb = 70, 30, 30, 55
    lats = [r.median_ms for r in rows]
    aps = [r.ap for r in rows]
    x_lo, x_hi = 0.0, max(lats) * 1.08
    pad = max(0.02, (max(aps) - min(aps)) * 0.15)
    y_lo = max(0.0, min(aps) - pad)
    y_hi = min(1.0, max(aps) + pad)

    def sx(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * (w_px - ml - mr)

    def sy(v):
        return h_px - mb - (v - y_lo) / (y_hi - y_lo) * (h_px - mt - mb)

    fp_lo = min(r.fp16_bytes for r in rows)
    fp_hi = max(r.fp16_bytes for r in rows)

    def radius(fp):
        if fp_hi == fp_lo:
            return 6.0
        return 4.0 + 6.0 * (fp - fp_lo) / (fp_hi - fp_lo)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" '
        f'viewBox="0 0 {w_px} {h_px}" font-family="sans-serif">',
        f'<rect width="{w_px}" height="{h_px}" fill="white"/>',
    ]
    # axes and grid
    for t in _ticks(x_lo, x_hi):
        x = sx(t)
        parts.append(f'<line x1="{x:.1f}" y1="{mt}" x2="{x:.1f}" y2="{h_px - mb}" '
                     'stroke="#e0e0e0" stroke-width="1"/>')
        parts.append(f'<text x="{x:.1f}" y="{h_px - mb + 18}" font-size="11" '
                     f'text-anchor="middle" fill="#444">{t:g}</text>')
    for t in _ticks(y_lo, y_hi):
        y = sy(t)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{w_px - mr}" y2="{y:.1f}" '
                     'stroke="#e0e0e0" stroke-width="1"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end" fill="#444">{t:.2f}</text>')
    parts.append(f'<line x1="{ml}" y1="{h_px - mb}" x2="{w_px - mr}" y2="{h_px - mb}" '
                 'stroke="#333" stroke-width="1.5"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h_px - mb}" '
                 'stroke="#333" stroke-width="1.5"/>')
    parts.append(f'<text x="{(ml + w_px - mr) / 2:.0f}" y="{h_px - 12}" font-size="13" '
                 'text-anchor="middle" fill="#111">median forward latency (ms)</text>')
    parts.append(f'<text x="16" y="{(mt + h_px - mb) / 2:.0f}" font-size="13" '
                 f'text-anchor="middle" fill="#111" '
                 f'transform="rotate(-90 16 {(mt + h_px - mb) / 2:.0f})">pixel AP</text>')

    frontier = sorted((r for r, d in zip(rows, flags) if not d),
                      key=lambda r: r.median_ms)
    if len(frontier) > 1:
        pts = " ".join(f"{sx(r.median_ms):.1f},{sy(r.ap):.1f}" for r in frontier)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" '
                     'stroke-width="1.5" stroke-dasharray="4 3"/>')
    for r, dom in zip(rows, flags):
        x, y, rad = sx(r.median_ms), sy(r.ap), radius(r.fp16_bytes)
        if dom:
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{rad:.1f}" '
                         'fill="none" stroke="#999" stroke-width="1.5"/>')
        else:
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{rad:.1f}" '
                         'fill="#1f77b4" fill-opacity="0.85"/>')
        parts.append(f'<text x="{x + rad + 4:.1f}" y="{y + 4:.1f}" font-size="10" '
                     f'fill="#333">{r.model_id}</text>')
    parts.append('<text x="' + str(w_px - mr) + '" y="' + str(mt - 8) +
                 '" font-size="10" text-anchor="end" fill="#666">'
                 'point area tracks fp16 footprint; hollow = dominated</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
