"""Run orchestration: SSL pretraining and downstream fine-tuning.

Both loops share the same reproducibility scheme. A run carries three seeds
(init, data, mask); every batch draws from a generator keyed by
[seed, epoch, step], so the sample stream is a pure function of the config
and resuming from an epoch checkpoint replays the exact trajectory a
straight-through run would have produced. Wall-clock is logged but excluded
from log digests for the same reason.

Model selection: pretraining ranks epoch checkpoints by linear-probe AP on
the validation pools; fine-tuning ranks by full-stream validation pixel AP.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import functional as F
from .checkpoint import load_state, save_state
from .data import batch_arrays, load_scenes, sample_batch, tile_scene
from .evaluation import build_probe_pool, evaluate_split, probe_ap
from .models import SegModel, build_seg_model
from .optim import AdamW, cosine_warmup_lr
from .selfsup import (DISTILL_WEIGHT_MODES, PretrainModules,
                      build_pretrain_modules, ssl_train_step)
from .tensor import Tensor

PRETRAIN_MODES = ("mae", "hybrid")
TRANSFER_MODES = ("full", "frozen", "random_init")


def _three_seeds(seed: int):
    a, b, c = np.random.SeedSequence(seed).generate_state(3)
    return int(a), int(b), int(c)


@dataclass
class PretrainConfig:
    emb_dim: int = 32
    mask_ratio: float = 0.60
    block: int = 2
    mode: str = "hybrid"
    lam: float = 0.02            # distillation weight; dead field in mae mode
    ema_momentum: float = 0.996
    distill_weight_mode: str = "masked_valid"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 20
    batch: int = 8
    steps_per_epoch: int = 64
    tile: int = 224
    overlap: int = 16
    p_pos: float = 0.5
    augment: bool = True
    patience: int = 10
    probe_n_pos: int = 2048
    probe_neg_per_pos: int = 50
    probe_n_tiles: int = 512
    seed_init: int = 0
    seed_data: int = 1
    seed_mask: int = 2

    def __post_init__(self):
        if self.mode not in PRETRAIN_MODES:
            raise ValueError(f"mode must be one of {PRETRAIN_MODES}, got {self.mode!r}")
        if self.distill_weight_mode not in DISTILL_WEIGHT_MODES:
            raise ValueError(f"unknown distill_weight_mode {self.distill_weight_mode!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        seed = d.pop("seed", None)
        cfg = cls(**d)
        return cfg.with_seed(seed) if seed is not None else cfg

    def with_seed(self, seed: int) -> "PretrainConfig":
        init, data, mask = _three_seeds(seed)
        return replace(self, seed_init=init, seed_data=data, seed_mask=mask)


@dataclass
class FinetuneConfig:
    transfer: str = "full"
    emb_dim: int = 32
    head: str = "trt"
    refine: bool = False
    head_hidden: int = 32
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 30
    batch: int = 8
    steps_per_epoch: int = 64
    tile: int = 224
    overlap: int = 16
    p_pos: float = 0.5
    augment: bool = True
    patience: int = 10
    seed_init: int = 0
    seed_data: int = 1
    seed_mask: int = 2

    def __post_init__(self):
        if self.transfer not in TRANSFER_MODES:
            raise ValueError(f"transfer must be one of {TRANSFER_MODES}, got {self.transfer!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        d = dict(d)
        seed = d.pop("seed", None)
        cfg = cls(**d)
        return cfg.with_seed(seed) if seed is not None else cfg

    def with_seed(self, seed: int) -> "FinetuneConfig":
        init, data, mask = _three_seeds(seed)
        return replace(self, seed_init=init, seed_data=data, seed_mask=mask)


def load_run_config(path):
    """Read a run-config JSON; "phase" picks the dataclass."""
    with open(path) as f:
        d = json.load(f)
    phase = d.pop("phase", None)
    if phase == "pretrain":
        return PretrainConfig.from_dict(d)
    if phase == "finetune":
        return FinetuneConfig.from_dict(d)
    raise ValueError(f'config "phase" must be "pretrain" or "finetune", got {phase!r}')


class TrainLog:
    """Append-only JSONL record. Digests skip wall-clock so identical
    configs and seeds give identical digests across runs."""

    VOLATILE = ("wall_s",)

    def __init__(self):
        self.entries: list[dict] = []

    def add(self, kind: str, **fields) -> dict:
        entry = {"kind": kind, **fields}
        self.entries.append(entry)
        return entry

    def digest(self) -> str:
        canon = [{k: v for k, v in e.items() if k not in self.VOLATILE}
                 for e in self.entries]
        blob = json.dumps(canon, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e) + "\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    log.entries.append(json.loads(line))
        return log


def state_digest(entries) -> str:
    """Order-sensitive sha256 over (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class RunResult:
    best_epoch: int
    best_metric: float
    best_path: str
    epochs_run: int
    log: TrainLog = field(repr=False)


def _train_tiles(scenes, tile: int, overlap: int) -> list:
    return [t for s in scenes for t in tile_scene(s, tile, overlap)]


def _probe_pools(cfg: PretrainConfig, train_scenes, val_scenes):
    fit_seed, eval_seed = (int(x) for x in
                           np.random.SeedSequence([cfg.seed_data, 977]).generate_state(2))
    fit = build_probe_pool(train_scenes, cfg.tile, cfg.overlap,
                           n_pos=cfg.probe_n_pos, neg_per_pos=cfg.probe_neg_per_pos,
                           n_tiles=cfg.probe_n_tiles, seed=fit_seed)
    ev = build_probe_pool(val_scenes, cfg.tile, cfg.overlap,
                          n_pos=cfg.probe_n_pos, neg_per_pos=cfg.probe_neg_per_pos,
                          n_tiles=cfg.probe_n_tiles, seed=eval_seed)
    return fit, ev


def load_pretrain_modules(path):
    """Rebuild PretrainModules from a pretraining checkpoint.

    Returns (modules, manifest_config, raw_entries); raw entries keep the
    optimizer arrays for resume."""
    entries, cfg = load_state(path)
    with_teacher = any(n.startswith("teacher.") for n in entries)
    mods = build_pretrain_modules(int(cfg["emb_dim"]), seed=0,
                                  with_teacher=with_teacher)
    mods.student.load_state_entries(
        {n[len("student."):]: a for n, a in entries.items() if n.startswith("student.")})
    mods.decoder.load_state_entries(
        {n[len("decoder."):]: a for n, a in entries.items() if n.startswith("decoder.")})
    if with_teacher:
        mods.teacher.load_state_entries(
            {n[len("teacher."):]: a for n, a in entries.items() if n.startswith("teacher.")})
    return mods, cfg, entries


def pretrain(config: PretrainConfig, data_dir, out_dir,
             resume_from=None) -> RunResult:
    """Train encoder+decoder (+EMA teacher in hybrid mode) with ssl steps.

    Saves a checkpoint per epoch (weights plus optimizer moments), ranks
    epochs by validation probe AP, copies the winner to best.ckpt, and
    writes train_log.jsonl. A non-finite loss aborts with the offending
    batch seed in both the exception and abort.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_scenes = load_scenes(data_dir, "train")
    val_scenes = load_scenes(data_dir, "val")

    lam = 0.0 if config.mode == "mae" else config.lam
    start_epoch = 0
    if resume_from is None:
        mods = build_pretrain_modules(config.emb_dim, config.seed_init,
                                      with_teacher=(config.mode == "hybrid"))
        for m in (mods.student, mods.decoder, mods.teacher):
            if m is not None:
                m.to_dtype(np.float32)
    else:
        mods, ckpt_cfg, raw = load_pretrain_modules(resume_from)
        if int(ckpt_cfg["emb_dim"]) != config.emb_dim:
            raise ValueError(
                f"checkpoint emb_dim {ckpt_cfg['emb_dim']} != config emb_dim {config.emb_dim}")
        start_epoch = int(ckpt_cfg["epoch"]) + 1

    named = mods.named_trainable_params()
    opt = AdamW((p for _, p in named), lr=config.lr, betas=config.betas,
                weight_decay=config.weight_decay)
    if resume_from is not None:
        opt.load_state_entries(raw, named)

    tiles = _train_tiles(train_scenes, config.tile, config.overlap)
    pool_fit, pool_eval = _probe_pools(config, train_scenes, val_scenes)

    log = TrainLog()
    log.add("run", phase="pretrain", start_epoch=start_epoch,
            seeds=[config.seed_init, config.seed_data, config.seed_mask],
            probe_pools=[pool_fit.signature(), pool_eval.signature()])

    total_steps = config.epochs * config.steps_per_epoch
    warmup = max(1, round(0.05 * total_steps))
    best_epoch, best_ap = -1, -1.0
    since_best = 0
    for epoch in range(start_epoch, config.epochs):
        t0 = time.monotonic()
        for step in range(config.steps_per_epoch):
            gstep = epoch * config.steps_per_epoch + step
            opt.lr = cosine_warmup_lr(gstep, total_steps, warmup, config.lr)
            data_rng = np.random.default_rng([config.seed_data, epoch, step])
            mask_rng = np.random.default_rng([config.seed_mask, epoch, step])
            batch_tiles = sample_batch(tiles, config.batch, config.p_pos,
                                       data_rng, augment=config.augment)
            x, _, valid = batch_arrays(batch_tiles, dtype=np.float32)
            stats = ssl_train_step(mods, opt, x, valid, config.mask_ratio,
                                   config.block, lam, config.ema_momentum,
                                   mask_rng, config.distill_weight_mode)
            if not np.isfinite(stats.total):
                dump = {"epoch": epoch, "step": step,
                        "batch_seed": [config.seed_data, epoch, step],
                        "mask_seed": [config.seed_mask, epoch, step],
                        "loss": {"total": stats.total, "recon": stats.recon,
                                 "distill": stats.distill}}
                with open(out_dir / "abort.json", "w") as f:
                    json.dump(dump, f, indent=1)
                raise RuntimeError(
                    f"non-finite pretrain loss at epoch {epoch} step {step}; "
                    f"batch seed {dump['batch_seed']} (see abort.json)")
            log.add("step", epoch=epoch, step=step, lr=opt.lr,
                    total=stats.total, recon=stats.recon,
                    distill=stats.distill, masked_px=stats.masked_px)

        ap = probe_ap(mods.student, train_scenes, val_scenes, pool_fit, pool_eval)
        entries = mods.state_entries() + opt.state_entries(named)
        log.add("epoch", epoch=epoch, probe_ap=ap,
                params=state_digest(mods.state_entries()),
                wall_s=time.monotonic() - t0)
        ckpt = out_dir / f"epoch_{epoch:03d}.ckpt"
        save_state(ckpt, entries,
                   config={**config.to_dict(), "phase": "pretrain",
                           "epoch": epoch, "probe_ap": ap})
        if ap > best_ap:
            best_epoch, best_ap = epoch, ap
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                log.add("early_stop", epoch=epoch, best_epoch=best_epoch)
                break

    best_path = out_dir / "best.ckpt"
    _copy_checkpoint(out_dir / f"epoch_{best_epoch:03d}.ckpt", best_path)
    log.add("done", best_epoch=best_epoch, best_probe_ap=best_ap,
            log_digest_of="deterministic fields")
    log.save(out_dir / "train_log.jsonl")
    with open(out_dir / "config.json", "w") as f:
        json.dump({**config.to_dict(), "phase": "pretrain"}, f, indent=1)
    return RunResult(best_epoch, best_ap, str(best_path),
                     epochs_run=len([e for e in log.entries if e["kind"] == "epoch"]),
                     log=log)


def _copy_checkpoint(src: Path, dst: Path):
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)


def load_encoder_from_pretrain(model: SegModel, ckpt_path, expect_emb_dim: int):
    """Copy a pretraining checkpoint's student weights into model.encoder."""
    entries, cfg = load_state(ckpt_path)
    if int(cfg.get("emb_dim", -1)) != expect_emb_dim:
        raise ValueError(
            f"checkpoint emb_dim {cfg.get('emb_dim')!r} does not match "
            f"requested emb_dim {expect_emb_dim}")
    enc = {n[len("student."):]: a for n, a in entries.items()
           if n.startswith("student.")}
    if not enc:
        raise ValueError("checkpoint holds no encoder (student.*) entries")
    model.encoder.load_state_entries(enc)
    return cfg


def save_seg_checkpoint(path, model: SegModel, extra: dict,
                        opt: AdamW | None = None, named=None):
    entries = model.state_entries()
    if opt is not None:
        entries = entries + opt.state_entries(named)
    save_state(path, entries, config={**model.config.to_dict(), **extra})


def load_seg_model(path) -> tuple:
    """Rebuild a SegModel from a fine-tune checkpoint: (model, manifest config)."""
    from .models import ModelConfig

    entries, cfg = load_state(path)
    model = SegModel(ModelConfig.from_dict(cfg), seed=0)
    model.load_state_entries({n: a for n, a in entries.items()
                              if not n.startswith("opt.")})
    return model, cfg


def finetune(config: FinetuneConfig, data_dir, out_dir,
             encoder_ckpt=None) -> RunResult:
    """Supervised training of SegModel with masked BCE on valid pixels.

    transfer=full/frozen require a pretraining checkpoint; random_init
    forbids one. Ranks epochs by validation pixel AP, saves best.ckpt plus
    the best epoch's validation report (with its selected threshold).
    """
    if config.transfer in ("full", "frozen") and encoder_ckpt is None:
        raise ValueError(f"transfer={config.transfer} requires an encoder checkpoint")
    if config.transfer == "random_init" and encoder_ckpt is not None:
        raise ValueError("transfer=random_init forbids an encoder checkpoint")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_scenes = load_scenes(data_dir, "train")
    val_scenes = load_scenes(data_dir, "val")

    model = build_seg_model(config.emb_dim, config.head, config.refine,
                            config.seed_init, config.head_hidden)
    model.to_dtype(np.float32)
    if encoder_ckpt is not None:
        load_encoder_from_pretrain(model, encoder_ckpt, config.emb_dim)
        model.to_dtype(np.float32)

    frozen = config.transfer == "frozen"
    if frozen:
        for _, p in model.encoder.named_parameters():
            p.requires_grad = False
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = AdamW((p for _, p in named), lr=config.lr, betas=config.betas,
                weight_decay=config.weight_decay)

    tiles = _train_tiles(train_scenes, config.tile, config.overlap)
    log = TrainLog()
    log.add("run", phase="finetune", transfer=config.transfer,
            seeds=[config.seed_init, config.seed_data, config.seed_mask],
            encoder_ckpt=None if encoder_ckpt is None else str(encoder_ckpt))

    total_steps = config.epochs * config.steps_per_epoch
    warmup = max(1, round(0.05 * total_steps))
    best_epoch, best_ap = -1, -1.0
    since_best = 0
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        model.train()
        for step in range(config.steps_per_epoch):
            gstep = epoch * config.steps_per_epoch + step
            opt.lr = cosine_warmup_lr(gstep, total_steps, warmup, config.lr)
            data_rng = np.random.default_rng([config.seed_data, epoch, step])
            batch_tiles = sample_batch(tiles, config.batch, config.p_pos,
                                       data_rng, augment=config.augment)
            x, label, valid = batch_arrays(batch_tiles, dtype=np.float32)
            logits, _ = model(Tensor(x), detach_features=frozen)
            loss = F.masked_bce_with_logits(logits, label.astype(np.float32), valid)
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            if not np.isfinite(val):
                dump = {"epoch": epoch, "step": step,
                        "batch_seed": [config.seed_data, epoch, step]}
                with open(out_dir / "abort.json", "w") as f:
                    json.dump(dump, f, indent=1)
                raise RuntimeError(
                    f"non-finite finetune loss at epoch {epoch} step {step}; "
                    f"batch seed {dump['batch_seed']} (see abort.json)")
            log.add("step", epoch=epoch, step=step, lr=opt.lr, bce=val,
                    pos_px=int((label & valid).sum()))

        report, _ = evaluate_split(model, val_scenes, "val",
                                   config.tile, config.overlap)
        log.add("epoch", epoch=epoch, val_ap=report.pixel_ap,
                fire_f1=report.fire["f1"], threshold=report.threshold,
                params=state_digest(model.state_entries()),
                wall_s=time.monotonic() - t0)
        save_seg_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model,
                            {"phase": "finetune", "epoch": epoch,
                             "transfer": config.transfer,
                             "val_ap": report.pixel_ap},
                            opt=opt, named=named)
        if report.pixel_ap > best_ap:
            best_epoch, best_ap = epoch, report.pixel_ap
            since_best = 0
            report.save(out_dir / "val_report.json")
        else:
            since_best += 1
            if since_best >= config.patience:
                log.add("early_stop", epoch=epoch, best_epoch=best_epoch)
                break

    best_path = out_dir / "best.ckpt"
    _copy_checkpoint(out_dir / f"epoch_{best_epoch:03d}.ckpt", best_path)
    log.add("done", best_epoch=best_epoch, best_val_ap=best_ap)
    log.save(out_dir / "train_log.jsonl")
    with open(out_dir / "config.json", "w") as f:
        json.dump({**config.to_dict(), "phase": "finetune"}, f, indent=1)
    return RunResult(best_epoch, best_ap, str(best_path),
                     epochs_run=len([e for e in log.entries if e["kind"] == "epoch"]),
                     log=log)
