"""Synthetic single-band thermal scenes plus the input pipeline.

A scene is a float32 raster with a validity mask and a sparse positive
label mask. The generator layers, in order: a flat base level, a smooth
low-frequency background field, per-column striping, white noise, then
compact 1..4 px hot anomalies (labeled) and broader warm blobs
(deliberately unlabeled, they exist to punish intensity-only detectors).
Everything is drawn from one numpy Generator per scene, so a (config,
seed) pair fixes the scene bit for bit.

On disk a scene is a directory: scene.json (metadata), raster.bin
(little-endian float32), valid.bin and label.bin (uint8). A dataset root
holds scenes/<id>/ plus split.json with a 70/15/15 train/val/test split.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class GeneratorConfig:
    height: int = 896
    width: int = 896
    base_level: float = 300.0
    lowfreq_amp: float = 5.0
    lowfreq_cells: int = 7
    stripe_sigma: float = 0.35
    noise_sigma: float = 1.0
    invalid_fraction: float = 0.213
    invalid_jitter: float = 0.04
    invalid_cells: int = 5
    positive_fraction: float = 1.82e-4
    fire_size_probs: tuple = (0.4, 0.3, 0.2, 0.1)  # sizes 1..4 px
    hard_fire_fraction: float = 0.35
    hard_amp_range: tuple = (1.5, 3.0)    # multiples of noise_sigma
    easy_amp_range: tuple = (4.0, 12.0)
    confuser_density: float = 3.0e-5      # expected blobs per pixel
    confuser_sigma_range: tuple = (2.0, 5.0)
    confuser_amp_range: tuple = (2.0, 6.0)
    force_fire_count: int | None = None   # override the Poisson draw (0 = clean scene)

    def mean_fire_size(self) -> float:
        return float(sum(p * (i + 1) for i, p in enumerate(self.fire_size_probs)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class Scene:
    scene_id: str
    raster: np.ndarray   # (H, W) float32
    valid: np.ndarray    # (H, W) bool
    label: np.ndarray    # (H, W) bool
    meta: dict


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Bilinear interpolation of a coarse (cells+1)^2 Gaussian grid up to (h, w)."""
    coarse = rng.normal(size=(cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    iy = np.minimum(ys.astype(np.intp), cells - 1)
    ix = np.minimum(xs.astype(np.intp), cells - 1)
    fy = (ys - iy)[:, None]
    fx = (xs - ix)[None, :]
    c00 = coarse[np.ix_(iy, ix)]
    c01 = coarse[np.ix_(iy, ix + 1)]
    c10 = coarse[np.ix_(iy + 1, ix)]
    c11 = coarse[np.ix_(iy + 1, ix + 1)]
    top = c00 + fx * (c01 - c00)
    bot = c10 + fx * (c11 - c10)
    return top + fy * (bot - top)


def _grow_blob(rng, y, x, size, h, w):
    pixels = [(y, x)]
    taken = {(y, x)}
    tries = 0
    while len(pixels) < size and tries < 64:
        tries += 1
        py, px = pixels[rng.integers(len(pixels))]
        dy, dx = [(-1, 0), (1, 0), (0, -1), (0, 1)][rng.integers(4)]
        ny, nx = py + dy, px + dx
        if 0 <= ny < h and 0 <= nx < w and (ny, nx) not in taken:
            pixels.append((ny, nx))
            taken.add((ny, nx))
    return pixels


def generate_scene(cfg: GeneratorConfig, seed: int, scene_id: str | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width

    raster = np.full((h, w), cfg.base_level, dtype=np.float64)
    raster += cfg.lowfreq_amp * _smooth_field(rng, h, w, cfg.lowfreq_cells)
    raster += rng.normal(0.0, cfg.stripe_sigma, size=(1, w))  # column striping
    raster += rng.normal(0.0, cfg.noise_sigma, size=(h, w))

    frac = cfg.invalid_fraction + rng.uniform(-cfg.invalid_jitter, cfg.invalid_jitter)
    frac = float(np.clip(frac, 0.02, 0.6))
    inv_field = _smooth_field(rng, h, w, cfg.invalid_cells)
    valid = inv_field <= np.quantile(inv_field, 1.0 - frac)

    label = np.zeros((h, w), dtype=bool)
    if cfg.force_fire_count is not None:
        n_fires = int(cfg.force_fire_count)
    else:
        lam = cfg.positive_fraction * h * w / cfg.mean_fire_size()
        n_fires = int(rng.poisson(lam))

    size_probs = np.asarray(cfg.fire_size_probs, dtype=np.float64)
    size_probs = size_probs / size_probs.sum()
    events = []
    for _ in range(n_fires):
        for _ in range(50):  # prefer valid ground
            y = int(rng.integers(h))
            x = int(rng.integers(w))
            if valid[y, x]:
                break
        size = int(rng.choice(len(size_probs), p=size_probs)) + 1
        hard = rng.random() < cfg.hard_fire_fraction
        lo, hi = cfg.hard_amp_range if hard else cfg.easy_amp_range
        amp = rng.uniform(lo, hi) * cfg.noise_sigma
        pixels = _grow_blob(rng, y, x, size, h, w)
        for py, px in pixels:
            raster[py, px] += amp * rng.uniform(0.75, 1.25)
            label[py, px] = True
        events.append({"y": y, "x": x, "size": len(pixels), "amp": round(float(amp), 4),
                       "hard": bool(hard)})

    n_conf = int(rng.poisson(cfg.confuser_density * h * w))
    for _ in range(n_conf):
        cy = float(rng.uniform(0, h))
        cx = float(rng.uniform(0, w))
        sig = float(rng.uniform(*cfg.confuser_sigma_range))
        amp = float(rng.uniform(*cfg.confuser_amp_range)) * cfg.noise_sigma
        r = int(np.ceil(3 * sig))
        y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
        x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
        yy = np.arange(y0, y1, dtype=np.float64)[:, None]
        xx = np.arange(x0, x1, dtype=np.float64)[None, :]
        raster[y0:y1, x0:x1] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))

    if scene_id is None:
        scene_id = f"scene_{seed:08d}"
    meta = {
        "scene_id": scene_id,
        "seed": int(seed),
        "height": h,
        "width": w,
        "n_fires": n_fires,
        "n_confusers": n_conf,
        "invalid_fraction": round(float(1.0 - valid.mean()), 6),
        "events": events,
    }
    return Scene(scene_id, raster.astype(np.float32), valid, label, meta)


# ---------------------------------------------------------------------------
# scene and dataset I/O


def save_scene(scene: Scene, root) -> Path:
    d = Path(root) / scene.scene_id
    d.mkdir(parents=True, exist_ok=True)
    (d / "raster.bin").write_bytes(np.ascontiguousarray(scene.raster, dtype="<f4").tobytes())
    (d / "valid.bin").write_bytes(scene.valid.astype(np.uint8).tobytes())
    (d / "label.bin").write_bytes(scene.label.astype(np.uint8).tobytes())
    with open(d / "scene.json", "w") as f:
        json.dump(scene.meta, f, indent=1)
        f.write("\n")
    return d


def load_scene(path) -> Scene:
    d = Path(path)
    with open(d / "scene.json") as f:
        meta = json.load(f)
    h, w = meta["height"], meta["width"]
    raster = np.frombuffer((d / "raster.bin").read_bytes(), dtype="<f4").reshape(h, w).copy()
    valid = np.frombuffer((d / "valid.bin").read_bytes(), dtype=np.uint8).reshape(h, w) != 0
    label = np.frombuffer((d / "label.bin").read_bytes(), dtype=np.uint8).reshape(h, w) != 0
    return Scene(meta["scene_id"], raster, valid, label, meta)


def split_scene_ids(scene_ids) -> dict:
    """Deterministic 70/15/15 split in id order: floor(0.7 n) train,
    floor(0.15 n) val, remainder test."""
    ids = list(scene_ids)
    n = len(ids)
    n_train = int(np.floor(0.7 * n))
    n_val = int(np.floor(0.15 * n))
    return {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }


def generate_dataset(root, n_scenes: int, cfg: GeneratorConfig, seed: int) -> dict:
    """Write n_scenes scenes plus split.json and a dataset.json echo.

    Scene seeds are spawned from the dataset seed, so the dataset is a pure
    function of (cfg, seed, n_scenes).
    """
    root = Path(root)
    scenes_dir = root / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    seed_seq = np.random.SeedSequence(seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(n_scenes)]
    ids = []
    for i, s in enumerate(child_seeds):
        scene = generate_scene(cfg, s, scene_id=f"scene_{i:05d}")
        save_scene(scene, scenes_dir)
        ids.append(scene.scene_id)
    split = split_scene_ids(ids)
    with open(root / "split.json", "w") as f:
        json.dump(split, f, indent=1)
        f.write("\n")
    with open(root / "dataset.json", "w") as f:
        json.dump({"n_scenes": n_scenes, "seed": seed, "generator": cfg.to_dict()}, f, indent=1)
        f.write("\n")
    return split


def load_split(root) -> dict:
    with open(Path(root) / "split.json") as f:
        return json.load(f)


def load_scenes(root, split: str | None = None) -> list:
    root = Path(root)
    if split is None:
        ids = sorted(p.name for p in (root / "scenes").iterdir() if p.is_dir())
    else:
        splits = load_split(root)
        if split not in splits:
            raise KeyError(f"unknown split {split!r}, have {sorted(splits)}")
        ids = splits[split]
    return [load_scene(root / "scenes" / sid) for sid in ids]


# ---------------------------------------------------------------------------
# normalization


@dataclass
class RobustScaler:
    median: float
    iqr: float
    clip: float = 20.0

    def apply(self, raster: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """(x - median) / iqr, clipped to +-clip, zeros on invalid pixels."""
        out = (raster.astype(np.float32) - np.float32(self.median)) / np.float32(self.iqr)
        np.clip(out, -self.clip, self.clip, out=out)
        out[~valid] = 0.0
        return out


def fit_robust_scaler(raster: np.ndarray, valid: np.ndarray, clip: float = 20.0) -> RobustScaler:
    vals = raster[valid]
    if vals.size == 0:
        raise ValueError("cannot fit a scaler: no valid pixels")
    q25, q50, q75 = np.percentile(vals.astype(np.float64), [25.0, 50.0, 75.0], method="linear")
    iqr = max(float(q75 - q25), 1e-6)
    return RobustScaler(median=float(q50), iqr=iqr, clip=clip)


# ---------------------------------------------------------------------------
# tiling


@dataclass
class Tile:
    scene_id: str
    y0: int
    x0: int
    patch: np.ndarray   # (T, T) float32, normalized
    valid: np.ndarray   # (T, T) bool
    label: np.ndarray   # (T, T) bool

    def is_positive(self) -> bool:
        return bool((self.label & self.valid).any())


def tile_origins(size: int, tile: int, overlap: int) -> list:
    """Origins along one axis: stride tile - overlap, last tile anchored
    inward so nothing crosses the border."""
    if tile > size:
        raise ValueError(f"tile {tile} larger than extent {size}")
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must be in [0, tile), got {overlap}")
    stride = tile - overlap
    origins = list(range(0, size - tile + 1, stride))
    if origins[-1] != size - tile:
        origins.append(size - tile)
    return origins


def tile_scene(scene: Scene, tile: int, overlap: int,
               scaler: RobustScaler | None = None) -> list:
    """Normalize the scene and cut it into overlapping tiles. The scaler is
    fitted on the scene's valid pixels unless one is supplied."""
    if scaler is None:
        scaler = fit_robust_scaler(scene.raster, scene.valid)
    norm = scaler.apply(scene.raster, scene.valid)
    tiles = []
    for y0 in tile_origins(scene.raster.shape[0], tile, overlap):
        for x0 in tile_origins(scene.raster.shape[1], tile, overlap):
            sl = (slice(y0, y0 + tile), slice(x0, x0 + tile))
            tiles.append(Tile(scene.scene_id, y0, x0, norm[sl].copy(),
                              scene.valid[sl].copy(), scene.label[sl].copy()))
    return tiles


# ---------------------------------------------------------------------------
# augmentation and sampling


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """The 8 square symmetries: k in 0..3 rotates by 90k degrees, k in 4..7
    additionally mirrors left-right (after the rotation)."""
    if not 0 <= k < 8:
        raise ValueError(f"dihedral element must be in 0..7, got {k}")
    out = np.rot90(a, k % 4)
    if k >= 4:
        out = np.fliplr(out)
    return np.ascontiguousarray(out)


def augment_tile(t: Tile, k: int) -> Tile:
    if k == 0:
        return t
    return Tile(t.scene_id, t.y0, t.x0, dihedral(t.patch, k),
                dihedral(t.valid, k), dihedral(t.label, k))


def sample_batch(tiles, batch_size: int, p_pos: float, rng: np.random.Generator,
                 augment: bool = False) -> list:
    """Positive-biased sampling with replacement: each slot draws from the
    positive-tile pool with probability p_pos, else from the negatives."""
    pos = [t for t in tiles if t.is_positive()]
    neg = [t for t in tiles if not t.is_positive()]
    if p_pos > 0 and not pos:
        raise ValueError("p_pos > 0 but no positive tiles available")
    if p_pos < 1 and not neg:
        raise ValueError("p_pos < 1 but no negative tiles available")
    out = []
    for _ in range(batch_size):
        pool = pos if rng.random() < p_pos else neg
        t = pool[rng.integers(len(pool))]
        if augment:
            t = augment_tile(t, int(rng.integers(8)))
        out.append(t)
    return out


def batch_arrays(tiles, dtype=np.float32):
    """Stack tiles into (N, 1, T, T) input plus label/valid masks."""
    x = np.stack([t.patch for t in tiles]).astype(dtype)[:, None]
    label = np.stack([t.label for t in tiles])[:, None]
    valid = np.stack([t.valid for t in tiles])[:, None]
    return x, label, valid
