"""Desk-scale transfer-ordering experiment.

Pretrains one encoder per seed, then finetunes three arms from it (full,
frozen, random init) and scores each on the test split. The claim under
test is an ordering, not absolute numbers: full finetuning from the
pretrained encoder should match or beat both the frozen-encoder arm and
the random-init arm on test AP for most seeds.

Scenes are tiny (one tile each) so the whole five-seed sweep fits in a
desktop-CPU budget. Parameters live in OrderingConfig; the defaults are
tuned so a run stays well under an hour single-threaded.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import GeneratorConfig, generate_dataset, load_scenes
from .evaluation import evaluate_split
from .training import (FinetuneConfig, PretrainConfig, finetune,
                       load_seg_model, pretrain)

ARMS = ("full", "frozen", "random_init")


@dataclass
class OrderingConfig:
    n_scenes: int = 200
    scene_size: int = 64
    # hotter than the full-scale defaults: ~8 fires per 64x64 scene and
    # mostly easy amplitudes, otherwise nothing learns inside the step
    # budget and the arms are indistinguishable noise
    prevalence: float = 5.9e-3
    fire_size_probs: tuple = (0.1, 0.25, 0.3, 0.25, 0.1)
    hard_fire_fraction: float = 0.1
    easy_amp_range: tuple = (6.0, 14.0)
    invalid_fraction: float = 0.12
    data_seed: int = 2024
    seeds: tuple = (0, 1, 2, 3, 4)

    emb_dim: int = 32
    head: str = "dwres"
    # fires are 1..5 px; the half-resolution head alone dilutes them away,
    # the full-resolution refinement stage is what makes them learnable
    refine: bool = True
    tile: int = 64
    overlap: int = 8

    pre_epochs: int = 8
    pre_steps: int = 24
    ft_epochs: int = 8
    ft_steps: int = 20
    lr: float = 1e-3
    batch: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(height=self.scene_size, width=self.scene_size,
                               invalid_fraction=self.invalid_fraction,
                               positive_fraction=self.prevalence,
                               fire_size_probs=self.fire_size_probs,
                               hard_fire_fraction=self.hard_fire_fraction,
                               easy_amp_range=self.easy_amp_range)

    def pretrain_config(self, seed: int) -> PretrainConfig:
        # p_pos 1.0: at this fire rate every scene has at least one event,
        # so there is no negative-tile pool to bias against
        return PretrainConfig(emb_dim=self.emb_dim, mode="hybrid",
                              epochs=self.pre_epochs,
                              steps_per_epoch=self.pre_steps,
                              batch=self.batch, tile=self.tile,
                              overlap=self.overlap, p_pos=1.0,
                              probe_n_tiles=64, probe_n_pos=256,
                              probe_neg_per_pos=20).with_seed(seed)

    def finetune_config(self, transfer: str, seed: int) -> FinetuneConfig:
        return FinetuneConfig(transfer=transfer, emb_dim=self.emb_dim,
                              head=self.head, refine=self.refine,
                              epochs=self.ft_epochs,
                              steps_per_epoch=self.ft_steps, lr=self.lr,
                              batch=self.batch, tile=self.tile,
                              overlap=self.overlap, p_pos=1.0,
                              ).with_seed(seed)


def build_dataset(root, cfg: OrderingConfig):
    generate_dataset(root, cfg.n_scenes, cfg.generator(), cfg.data_seed)


def _test_ap(ckpt_path, val_scenes, test_scenes, cfg: OrderingConfig):
    """Full protocol: threshold picked on val, carried to test."""
    model, _ = load_seg_model(ckpt_path)
    val_report, _ = evaluate_split(model, val_scenes, "val",
                                   cfg.tile, cfg.overlap)
    test_report, _ = evaluate_split(model, test_scenes, "test",
                                    cfg.tile, cfg.overlap,
                                    threshold=val_report.threshold,
                                    threshold_source=f"val sweep for {ckpt_path}")
    return val_report, test_report


def run_seed(data_dir, out_dir, seed: int, cfg: OrderingConfig) -> dict:
    """One pretrain plus the three finetune arms for a single seed."""
    out_dir = Path(out_dir)
    val_scenes = load_scenes(data_dir, "val")
    test_scenes = load_scenes(data_dir, "test")

    t0 = time.monotonic()
    pre = pretrain(cfg.pretrain_config(seed), data_dir, out_dir / "pretrain")
    arms = {}
    for transfer in ARMS:
        encoder = None if transfer == "random_init" else pre.best_path
        run = finetune(cfg.finetune_config(transfer, seed), data_dir,
                       out_dir / transfer, encoder_ckpt=encoder)
        val_report, test_report = _test_ap(run.best_path, val_scenes,
                                           test_scenes, cfg)
        arms[transfer] = {"val_ap": val_report.pixel_ap,
                          "test_ap": test_report.pixel_ap,
                          "test_fire_f1": test_report.fire["f1"],
                          "best_epoch": run.best_epoch,
                          "ckpt": run.best_path}
    return {"seed": seed, "probe_ap": pre.best_metric, "arms": arms,
            "wall_s": round(time.monotonic() - t0, 1)}


def count_wins(per_seed: list) -> dict:
    """How often the full arm matches or beats each competitor on test AP."""
    wins = {"full_ge_frozen": 0, "full_ge_random_init": 0}
    for rec in per_seed:
        full = rec["arms"]["full"]["test_ap"]
        if full >= rec["arms"]["frozen"]["test_ap"]:
            wins["full_ge_frozen"] += 1
        if full >= rec["arms"]["random_init"]["test_ap"]:
            wins["full_ge_random_init"] += 1
    return wins


def run_ordering_experiment(out_dir, cfg: OrderingConfig | None = None,
                            data_dir=None) -> dict:
    """The whole sweep. Returns (and writes) a summary dict.

    data_dir None generates the dataset under out_dir/data; an existing
    directory is reused as-is so reruns can skip generation.
    """
    cfg = cfg or OrderingConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()

    if data_dir is None:
        data_dir = out_dir / "data"
        if not (Path(data_dir) / "split.json").exists():
            build_dataset(data_dir, cfg)

    per_seed = []
    for seed in cfg.seeds:
        rec = run_seed(data_dir, out_dir / f"seed_{seed}", seed, cfg)
        per_seed.append(rec)

    summary = {"config": cfg.to_dict(), "per_seed": per_seed,
               "wins": count_wins(per_seed), "n_seeds": len(cfg.seeds),
               "wall_s": round(time.monotonic() - t0, 1)}
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    return summary


def format_summary(summary: dict) -> str:
    lines = []
    for rec in summary["per_seed"]:
        arms = rec["arms"]
        lines.append(f"seed {rec['seed']}: " + "  ".join(
            f"{t}={arms[t]['test_ap']:.4f}" for t in ARMS)
            + f"  ({rec['wall_s']:.0f}s)")
    wins = summary["wins"]
    n = summary["n_seeds"]
    lines.append(f"full >= frozen: {wins['full_ge_frozen']}/{n}   "
                 f"full >= random_init: {wins['full_ge_random_init']}/{n}")
    lines.append(f"total wall time: {summary['wall_s']:.0f}s")
    return "\n".join(lines)
