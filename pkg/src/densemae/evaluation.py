"""Evaluation protocol: pixel AP, embedding probes, event-level fire
metrics, threshold selection, and tile-to-scene stitching.

Pixel scores are probabilities in [0, 1]. The streaming AP accumulator
histograms them into 4096 fixed bins (bin = min(int(s * 4096), 4095)) so
accumulators from different workers merge by addition; AP treats each
nonempty bin as one tie group, the same convention exact_average_precision
applies to exactly tied scores.

Event-level metrics work on 8-connected components of the (mask AND
valid) image. Recall counts ground-truth events touched by at least one
predicted-positive valid pixel; precision counts predicted components
touching at least one true positive pixel.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Scene, batch_arrays, tile_scene
from .tensor import Tensor, no_grad

N_BINS = 4096
THRESHOLD_GRID = [round(0.01 * k, 2) for k in range(1, 100)]

# probe pool caps: tiles scanned, positive cells kept, negatives per positive
PROBE_N_TILES = 512
PROBE_N_POS = 2048
PROBE_NEG_PER_POS = 50


def resolve_threads(explicit: int | None = None) -> int:
    """Worker count for scene-level fan-out, capped by DM_THREADS (default 1)."""
    if explicit is not None:
        n = int(explicit)
    else:
        n = int(os.environ.get("DM_THREADS", "1"))
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# average precision


class APAccumulator:
    """Mergeable binned AP over probability scores."""

    def __init__(self, bins: int = N_BINS):
        self.bins = bins
        self.pos = np.zeros(bins, dtype=np.int64)
        self.neg = np.zeros(bins, dtype=np.int64)

    def add(self, scores, labels, valid=None):
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel().astype(bool)
        if valid is not None:
            keep = np.asarray(valid).ravel().astype(bool)
            scores = scores[keep]
            labels = labels[keep]
        if scores.size == 0:
            return
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise ValueError("scores must be probabilities in [0, 1]")
        b = np.minimum((scores * self.bins).astype(np.int64), self.bins - 1)
        self.pos += np.bincount(b[labels], minlength=self.bins)
        self.neg += np.bincount(b[~labels], minlength=self.bins)

    def merge(self, other: "APAccumulator"):
        if other.bins != self.bins:
            raise ValueError("cannot merge accumulators with different bin counts")
        self.pos += other.pos
        self.neg += other.neg
        return self

    def total(self):
        return int(self.pos.sum() + self.neg.sum())

    def ap(self) -> float:
        total_pos = int(self.pos.sum())
        if total_pos == 0:
            return 0.0
        ap = 0.0
        tp = 0
        seen = 0
        for b in range(self.bins - 1, -1, -1):
            p = int(self.pos[b])
            n = int(self.neg[b])
            if p == 0 and n == 0:
                continue
            tp += p
            seen += p + n
            if p:
                ap += (tp / seen) * p
        return ap / total_pos

    def pr_points(self):
        """(threshold_low, precision, recall) per nonempty bin, descending."""
        total_pos = int(self.pos.sum())
        pts = []
        tp = 0
        seen = 0
        for b in range(self.bins - 1, -1, -1):
            p, n = int(self.pos[b]), int(self.neg[b])
            if p == 0 and n == 0:
                continue
            tp += p
            seen += p + n
            prec = tp / seen
            rec = tp / total_pos if total_pos else 0.0
            pts.append((b / self.bins, prec, rec))
        return pts


def exact_average_precision(scores, labels) -> float:
    """Tie-grouped AP on the full sorted stream (no binning)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    total_pos = int(labels.sum())
    if total_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.int64)
    ends = np.flatnonzero(np.diff(s) != 0.0)
    ends = np.append(ends, s.size - 1)
    cum = np.cumsum(y)
    tp_end = cum[ends]
    seen = ends + 1
    grp_pos = np.diff(np.concatenate(([0], tp_end)))
    return float(((tp_end / seen) * grp_pos).sum() / total_pos)


# ---------------------------------------------------------------------------
# connected components and event metrics


def connected_components(mask: np.ndarray, valid: np.ndarray):
    """8-connected components of mask AND valid, labels renumbered 1..n in
    raster order of each component's first pixel."""
    m = np.asarray(mask, dtype=bool) & np.asarray(valid, dtype=bool)
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=np.int32))
    if n == 0:
        return labels.astype(np.int32), 0
    flat = labels.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable")  # old label l sits at rank
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[labels], n


@dataclass
class FireStats:
    n_gt: int
    n_detected: int
    n_pred: int
    n_tp: int

    @property
    def recall(self) -> float:
        return self.n_detected / self.n_gt if self.n_gt else 1.0

    @property
    def precision(self) -> float:
        return self.n_tp / self.n_pred if self.n_pred else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def __add__(self, other: "FireStats") -> "FireStats":
        return FireStats(self.n_gt + other.n_gt, self.n_detected + other.n_detected,
                         self.n_pred + other.n_pred, self.n_tp + other.n_tp)


def fire_event_stats(pred: np.ndarray, label: np.ndarray, valid: np.ndarray) -> FireStats:
    """Event counts for one scene. Invalid pixels are excluded from both
    sides before components are formed."""
    pred_v = pred & valid
    label_v = label & valid
    gt_lab, n_gt = connected_components(label_v, valid)
    pr_lab, n_pred = connected_components(pred_v, valid)
    detected = np.unique(gt_lab[(gt_lab > 0) & pred_v])
    tp = np.unique(pr_lab[(pr_lab > 0) & label_v])
    return FireStats(n_gt=n_gt, n_detected=int(detected.size),
                     n_pred=n_pred, n_tp=int(tp.size))


def fire_f1_at_threshold(prob_maps, labels, valids, threshold: float) -> FireStats:
    """Micro-aggregated event stats across scenes at one threshold."""
    agg = FireStats(0, 0, 0, 0)
    for probs, label, valid in zip(prob_maps, labels, valids):
        agg = agg + fire_event_stats(probs >= threshold, label, valid)
    return agg


def select_threshold(prob_maps, labels, valids):
    """Scan 0.01..0.99 (step 0.01) for the best event-level F1; ties go to
    the larger threshold. Returns (t_star, stats_at_t_star, curve)."""
    best_t, best_stats, best_f1 = None, None, -1.0
    curve = []
    # ground-truth components do not depend on t; the scan recomputes only
    # the prediction side
    for t in THRESHOLD_GRID:
        stats = fire_f1_at_threshold(prob_maps, labels, valids, t)
        curve.append((t, stats.f1))
        if stats.f1 >= best_f1:
            best_f1, best_t, best_stats = stats.f1, t, stats
    return best_t, best_stats, curve


# ---------------------------------------------------------------------------
# stitching


def stitch_tiles(shape, tile: int, entries):
    """Assemble per-tile maps into a scene map. entries is a list of
    (y0, x0, patch) with patch (tile, tile). Overlapping pixels belong to
    the tile whose center is nearest (axis-separable midpoint rule)."""
    h, w = shape
    ys = sorted({y0 for y0, _, _ in entries})
    xs = sorted({x0 for _, x0, _ in entries})
    by_pos = {(y0, x0): p for y0, x0, p in entries}
    out = np.zeros(shape, dtype=np.asarray(entries[0][2]).dtype)
    # midpoints between successive tile centers split the axis into
    # ownership intervals
    ybounds = [(ys[i] + ys[i + 1] + tile) / 2 for i in range(len(ys) - 1)]
    xbounds = [(xs[i] + xs[i + 1] + tile) / 2 for i in range(len(xs) - 1)]
    own_y = np.searchsorted(ybounds, np.arange(h), side="right")
    own_x = np.searchsorted(xbounds, np.arange(w), side="right")
    for iy, y0 in enumerate(ys):
        rows = np.flatnonzero(own_y == iy)
        for ix, x0 in enumerate(xs):
            cols = np.flatnonzero(own_x == ix)
            patch = by_pos[(y0, x0)]
            out[np.ix_(rows, cols)] = patch[np.ix_(rows - y0, cols - x0)]
    return out


class OracleModel:
    """Stand-in that emits each tile's ground-truth label as its probability.

    Exists to exercise the tiling/stitching/metric pipeline end to end with
    perfect input, where pixel AP must come out exactly 1.0.
    """

    def eval(self):
        return self

    def train(self, mode=True):
        return self


def scene_probability_map(model, scene: Scene, tile: int, overlap: int,
                          batch_size: int = 4) -> np.ndarray:
    """Tile, forward in eval mode, stitch sigmoid logits back to scene shape."""
    from . import functional as F

    model.eval()
    tiles = tile_scene(scene, tile, overlap)
    if isinstance(model, OracleModel):
        entries = [(t.y0, t.x0, t.label.astype(np.float32)) for t in tiles]
        return stitch_tiles(scene.raster.shape, tile, entries).astype(np.float32)
    dtype = next(iter(model.parameters())).dtype
    entries = []
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i:i + batch_size]
        x, _, _ = batch_arrays(chunk, dtype=dtype)
        with no_grad():
            logits, _ = model(Tensor(x))
            probs = F.sigmoid(logits).data
        for t, p in zip(chunk, probs):
            entries.append((t.y0, t.x0, p[0]))
    return stitch_tiles(scene.raster.shape, tile, entries).astype(np.float32)


# ---------------------------------------------------------------------------
# embedding probes


@dataclass
class ProbePool:
    """Fixed embedding-grid sample: tile-anchored cell indices plus labels.
    Holds no embeddings, so it is identical no matter which checkpoint is
    probed."""
    tile: int
    overlap: int
    entries: list  # (scene_id, y0, x0, cy, cx)
    labels: np.ndarray  # (K,) uint8

    def signature(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"tile": self.tile, "overlap": self.overlap,
                             "entries": [list(e) for e in self.entries],
                             "labels": self.labels.tolist()}).encode())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"tile": self.tile, "overlap": self.overlap,
                "entries": [list(e) for e in self.entries],
                "labels": self.labels.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ProbePool":
        return cls(tile=d["tile"], overlap=d["overlap"],
                   entries=[tuple(e) for e in d["entries"]],
                   labels=np.asarray(d["labels"], dtype=np.uint8))


def build_probe_pool(scenes, tile: int, overlap: int,
                     n_pos: int = PROBE_N_POS,
                     neg_per_pos: int = PROBE_NEG_PER_POS,
                     n_tiles: int = PROBE_N_TILES,
                     seed: int = 0) -> ProbePool:
    """Sample up to n_pos positive cells and neg_per_pos*n_pos negatives.

    At most n_tiles tiles are scanned (sampled without replacement from the
    scene-order tile universe). A cell is positive if any of its 2x2 input
    pixels is labeled, and eligible only if all four are valid. Purely
    index-based and seeded, so the same arguments give the same pool bit
    for bit.
    """
    universe = []
    for scene in scenes:
        for t in tile_scene(scene, tile, overlap):
            universe.append((scene.scene_id, t))
    rng = np.random.default_rng(seed)
    if len(universe) > n_tiles:
        keep = np.sort(rng.choice(len(universe), size=n_tiles, replace=False))
        universe = [universe[i] for i in keep]

    pos_entries, neg_entries = [], []
    for sid, t in universe:
        lab = t.label
        val = t.valid
        cell_pos = (lab[0::2, 0::2] | lab[0::2, 1::2]
                    | lab[1::2, 0::2] | lab[1::2, 1::2])
        cell_ok = (val[0::2, 0::2] & val[0::2, 1::2]
                   & val[1::2, 0::2] & val[1::2, 1::2])
        for cy, cx in zip(*np.nonzero(cell_pos & cell_ok)):
            pos_entries.append((sid, t.y0, t.x0, int(cy), int(cx)))
        for cy, cx in zip(*np.nonzero(~cell_pos & cell_ok)):
            neg_entries.append((sid, t.y0, t.x0, int(cy), int(cx)))
    if not pos_entries:
        raise ValueError("no positive embedding cells available for the probe pool")
    if not neg_entries:
        raise ValueError("no negative embedding cells available for the probe pool")
    k_pos = min(n_pos, len(pos_entries))
    k_neg = min(neg_per_pos * n_pos, len(neg_entries))
    pick_pos = rng.choice(len(pos_entries), size=k_pos, replace=False)
    pick_neg = rng.choice(len(neg_entries), size=k_neg, replace=False)
    entries = [pos_entries[i] for i in pick_pos] + [neg_entries[i] for i in pick_neg]
    labels = np.concatenate([np.ones(k_pos, dtype=np.uint8),
                             np.zeros(k_neg, dtype=np.uint8)])
    return ProbePool(tile=tile, overlap=overlap, entries=entries, labels=labels)


def extract_probe_features(encoder, scenes, pool: ProbePool,
                           batch_size: int = 8) -> np.ndarray:
    """Embed each referenced tile once and gather the pool's cells: (K, D)."""
    by_scene = {s.scene_id: s for s in scenes}
    tile_keys = []
    seen = set()
    for sid, y0, x0, _, _ in pool.entries:
        key = (sid, y0, x0)
        if key not in seen:
            seen.add(key)
            tile_keys.append(key)
    tiles_needed = {}
    for sid in {k[0] for k in tile_keys}:
        if sid not in by_scene:
            raise KeyError(f"probe pool references unknown scene {sid!r}")
        for t in tile_scene(by_scene[sid], pool.tile, pool.overlap):
            if (sid, t.y0, t.x0) in seen:
                tiles_needed[(sid, t.y0, t.x0)] = t

    dtype = next(iter(encoder.parameters())).dtype
    z_by_key = {}
    for i in range(0, len(tile_keys), batch_size):
        chunk = [tiles_needed[k] for k in tile_keys[i:i + batch_size]]
        x, _, _ = batch_arrays(chunk, dtype=dtype)
        with no_grad():
            _, z = encoder(Tensor(x))
        for k, zi in zip(tile_keys[i:i + batch_size], z.data):
            z_by_key[k] = zi
    feats = np.stack([z_by_key[(sid, y0, x0)][:, cy, cx]
                      for sid, y0, x0, cy, cx in pool.entries])
    return feats.astype(np.float64)


def logistic_probe_fit(x: np.ndarray, y: np.ndarray, epochs: int = 200,
                       lr: float = 0.1):
    """Full-batch gradient descent on mean BCE, no regularization."""
    from .functional import _sigmoid_np

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    k = x.shape[0]
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(epochs):
        p = _sigmoid_np(x @ w + b)
        g = p - y
        w -= lr * (x.T @ g) / k
        b -= lr * g.mean()
    return w, b


def probe_ap(encoder, scenes_fit, scenes_eval, pool_fit: ProbePool,
             pool_eval: ProbePool) -> float:
    """Fit the linear probe on one pool, score the other, return exact AP."""
    from .functional import _sigmoid_np

    x_fit = extract_probe_features(encoder, scenes_fit, pool_fit)
    x_eval = extract_probe_features(encoder, scenes_eval, pool_eval)
    w, b = logistic_probe_fit(x_fit, pool_fit.labels)
    scores = _sigmoid_np(x_eval @ w + b)
    return exact_average_precision(scores, pool_eval.labels)


# ---------------------------------------------------------------------------
# full protocol


@dataclass
class EvalReport:
    split: str
    n_scenes: int
    tile: int
    overlap: int
    pixel_ap: float
    threshold: float | None
    threshold_source: str | None
    fire: dict | None
    model_config: dict
    extra: dict = dataclasses.field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            return cls(**json.load(f))


def evaluate_split(model, scenes, split_name: str, tile: int, overlap: int,
                   threshold: float | None = None,
                   threshold_source: str | None = None,
                   n_threads: int | None = None) -> tuple:
    """Pixel AP plus event metrics for a list of scenes.

    threshold None selects t* on these scenes (validation behavior) and
    records it as selected here; a supplied threshold is applied as-is and
    its source recorded (test behavior demands this).
    Returns (EvalReport, accumulator) so callers can write PR curves.
    """
    model.eval()
    workers = resolve_threads(n_threads)

    def _one(scene):
        return scene_probability_map(model, scene, tile, overlap)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            maps = list(ex.map(_one, scenes))
    else:
        maps = [_one(s) for s in scenes]

    acc = APAccumulator()
    for scene, probs in zip(scenes, maps):
        acc.add(probs, scene.label, scene.valid)

    labels = [s.label for s in scenes]
    valids = [s.valid for s in scenes]
    if threshold is None:
        t_star, stats, curve = select_threshold(maps, labels, valids)
        source = threshold_source or f"selected on split {split_name!r}"
        extra = {"f1_curve": [[t, round(f, 6)] for t, f in curve]}
    else:
        t_star = float(threshold)
        stats = fire_f1_at_threshold(maps, labels, valids, t_star)
        if threshold_source is None:
            raise ValueError("an externally supplied threshold needs a recorded source")
        source = threshold_source
        extra = {}

    report = EvalReport(
        split=split_name,
        n_scenes=len(scenes),
        tile=tile,
        overlap=overlap,
        pixel_ap=round(acc.ap(), 6),
        threshold=t_star,
        threshold_source=source,
        fire={"precision": round(stats.precision, 6), "recall": round(stats.recall, 6),
              "f1": round(stats.f1, 6), "n_gt": stats.n_gt, "n_pred": stats.n_pred,
              "n_detected": stats.n_detected, "n_tp": stats.n_tp},
        model_config=model.config.to_dict() if hasattr(model, "config") else {},
        extra=extra,
    )
    return report, acc


def write_pr_csv(acc: APAccumulator, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("threshold,precision,recall\n")
        for t, p, r in acc.pr_points():
            f.write(f"{t:.6f},{p:.6f},{r:.6f}\n")
