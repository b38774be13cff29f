"""Orchestration behavior: reproducibility, resume, transfer contracts."""

import json
import math

import numpy as np
import pytest

import densemae.training as training
from densemae import functional as F
from densemae.data import GeneratorConfig, generate_dataset
from densemae.tensor import Tensor
from densemae.training import (
    FinetuneConfig,
    PretrainConfig,
    RunResult,
    TrainLog,
    finetune,
    load_run_config,
    load_seg_model,
    pretrain,
    state_digest,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = GeneratorConfig(height=64, width=64, force_fire_count=3,
                          confuser_density=1e-4)
    generate_dataset(root, 8, cfg, seed=11)
    return root


def tiny_pretrain_cfg(**over):
    base = dict(emb_dim=16, mode="hybrid", epochs=2, batch=4, steps_per_epoch=3,
                tile=32, overlap=8, probe_n_pos=16, probe_neg_per_pos=2,
                probe_n_tiles=64)
    base.update(over)
    return PretrainConfig(**base).with_seed(5)


def tiny_finetune_cfg(**over):
    base = dict(transfer="full", emb_dim=16, head="dwres", refine=False,
                epochs=2, batch=4, steps_per_epoch=3, tile=32, overlap=8)
    base.update(over)
    return FinetuneConfig(**base).with_seed(6)


@pytest.fixture(scope="module")
def pretrained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    return pretrain(tiny_pretrain_cfg(), dataset, out)


class TestConfigs:
    def test_pretrain_round_trip(self):
        cfg = tiny_pretrain_cfg(lam=0.3, mode="hybrid")
        again = PretrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_finetune_round_trip(self):
        cfg = tiny_finetune_cfg(transfer="frozen", refine=True)
        again = FinetuneConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_seed_shorthand_expands(self):
        a = PretrainConfig.from_dict({"seed": 5})
        b = PretrainConfig().with_seed(5)
        assert (a.seed_init, a.seed_data, a.seed_mask) == \
               (b.seed_init, b.seed_data, b.seed_mask)
        assert len({a.seed_init, a.seed_data, a.seed_mask}) == 3

    def test_invalid_mode_and_transfer(self):
        with pytest.raises(ValueError):
            PretrainConfig(mode="contrastive")
        with pytest.raises(ValueError):
            FinetuneConfig(transfer="partial")

    def test_load_run_config_dispatch(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"phase": "pretrain", "emb_dim": 16}))
        assert isinstance(load_run_config(p), PretrainConfig)
        p.write_text(json.dumps({"phase": "finetune", "head": "trt"}))
        assert isinstance(load_run_config(p), FinetuneConfig)
        p.write_text(json.dumps({"emb_dim": 16}))
        with pytest.raises(ValueError):
            load_run_config(p)


class TestTrainLog:
    def test_digest_ignores_wall_clock(self):
        a, b = TrainLog(), TrainLog()
        a.add("epoch", epoch=0, loss=0.5, wall_s=1.23)
        b.add("epoch", epoch=0, loss=0.5, wall_s=99.0)
        assert a.digest() == b.digest()
        b.entries[0]["loss"] = 0.6
        assert a.digest() != b.digest()

    def test_jsonl_round_trip(self, tmp_path):
        log = TrainLog()
        log.add("step", step=0, loss=1.0)
        log.add("epoch", epoch=0, metric=0.4, wall_s=2.0)
        log.save(tmp_path / "log.jsonl")
        again = TrainLog.load(tmp_path / "log.jsonl")
        assert again.entries == log.entries
        assert again.digest() == log.digest()


class TestMaskedBceContract:
    def test_saturating_logits_near_zero_loss(self):
        rng = np.random.default_rng(0)
        y = (rng.random((2, 1, 8, 8)) < 0.3).astype(np.float32)
        logits = Tensor(np.where(y > 0, 30.0, -30.0).astype(np.float32))
        valid = np.ones(y.shape, dtype=bool)
        assert F.masked_bce_with_logits(logits, y, valid).item() < 1e-6

    def test_single_pixel_ln2(self):
        logits = Tensor(np.zeros((1, 1, 2, 2)))
        y = np.ones((1, 1, 2, 2))
        valid = np.zeros((1, 1, 2, 2), dtype=bool)
        valid[0, 0, 1, 1] = True
        loss = F.masked_bce_with_logits(logits, y, valid).item()
        assert loss == pytest.approx(math.log(2.0), rel=1e-7)


class TestPretrain:
    def test_outputs_and_metric_range(self, pretrained, dataset):
        assert isinstance(pretrained, RunResult)
        assert 0.0 <= pretrained.best_metric <= 1.0
        assert pretrained.epochs_run == 2
        out = pretrained.log
        kinds = [e["kind"] for e in out.entries]
        assert kinds.count("step") == 6
        assert kinds.count("epoch") == 2

    def test_run_artifacts(self, pretrained):
        from pathlib import Path

        best = Path(pretrained.best_path)
        out = best.parent
        assert (out / "train_log.jsonl").exists()
        assert (out / "config.json").exists()
        assert (best / "manifest.json").exists()
        assert (best / "weights.bin").exists()
        cfg = json.loads((best / "manifest.json").read_text())["config"]
        assert cfg["phase"] == "pretrain" and "probe_ap" in cfg

    def test_deterministic_rerun(self, dataset, tmp_path, pretrained):
        res = pretrain(tiny_pretrain_cfg(), dataset, tmp_path / "again")
        assert res.log.digest() == pretrained.log.digest()
        a = (tmp_path / "again" / "best.ckpt" / "weights.bin").read_bytes()
        from pathlib import Path

        b = (Path(pretrained.best_path) / "weights.bin").read_bytes()
        assert a == b

    def test_resume_is_bitwise(self, dataset, tmp_path, pretrained):
        from pathlib import Path

        first_epoch = Path(pretrained.best_path).parent / "epoch_000.ckpt"
        res = pretrain(tiny_pretrain_cfg(), dataset, tmp_path / "resumed",
                       resume_from=first_epoch)
        straight = Path(pretrained.best_path).parent / "epoch_001.ckpt"
        resumed = tmp_path / "resumed" / "epoch_001.ckpt"
        assert (resumed / "weights.bin").read_bytes() == \
               (straight / "weights.bin").read_bytes()
        assert (resumed / "manifest.json").read_bytes() == \
               (straight / "manifest.json").read_bytes()
        assert res.best_metric == pretrained.best_metric

    def test_mae_mode_lambda_is_dead(self, dataset, tmp_path):
        r1 = pretrain(tiny_pretrain_cfg(mode="mae", lam=0.02),
                      dataset, tmp_path / "m1")
        r2 = pretrain(tiny_pretrain_cfg(mode="mae", lam=0.77),
                      dataset, tmp_path / "m2")
        assert r1.log.digest() == r2.log.digest()
        w1 = (tmp_path / "m1" / "best.ckpt" / "weights.bin").read_bytes()
        w2 = (tmp_path / "m2" / "best.ckpt" / "weights.bin").read_bytes()
        assert w1 == w2
        assert all(e["distill"] == 0.0 for e in r1.log.entries
                   if e["kind"] == "step")

    def test_nan_aborts_with_batch_seed(self, dataset, tmp_path, monkeypatch):
        from densemae.selfsup import SSLStepStats

        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            total = float("nan") if calls["n"] == 2 else 0.5
            return SSLStepStats(total=total, recon=total, distill=0.0,
                                masked_px=10)

        monkeypatch.setattr(training, "ssl_train_step", poisoned)
        with pytest.raises(RuntimeError, match="batch seed"):
            pretrain(tiny_pretrain_cfg(), dataset, tmp_path / "bad")
        dump = json.loads((tmp_path / "bad" / "abort.json").read_text())
        assert dump["epoch"] == 0 and dump["step"] == 1
        assert dump["batch_seed"][1:] == [0, 1]


class TestFinetune:
    def test_transfer_checkpoint_validation(self, dataset, tmp_path, pretrained):
        with pytest.raises(ValueError):
            finetune(tiny_finetune_cfg(transfer="full"), dataset, tmp_path / "x")
        with pytest.raises(ValueError):
            finetune(tiny_finetune_cfg(transfer="frozen"), dataset, tmp_path / "x")
        with pytest.raises(ValueError):
            finetune(tiny_finetune_cfg(transfer="random_init"), dataset,
                     tmp_path / "x", encoder_ckpt=pretrained.best_path)

    def test_emb_dim_mismatch_rejected(self, dataset, tmp_path, pretrained):
        cfg = tiny_finetune_cfg(emb_dim=32)
        with pytest.raises(ValueError, match="emb_dim"):
            finetune(cfg, dataset, tmp_path / "x",
                     encoder_ckpt=pretrained.best_path)

    def test_frozen_encoder_is_immutable(self, dataset, tmp_path, pretrained):
        cfg = tiny_finetune_cfg(transfer="frozen", epochs=1)
        res = finetune(cfg, dataset, tmp_path / "fr",
                       encoder_ckpt=pretrained.best_path)
        model, _ = load_seg_model(res.best_path)
        from densemae.checkpoint import load_state

        pre_entries, _ = load_state(pretrained.best_path)
        pre_enc = [(n[len("student."):], a) for n, a in pre_entries.items()
                   if n.startswith("student.")]
        post_enc = model.encoder.state_entries()
        assert state_digest(sorted(pre_enc)) == state_digest(sorted(post_enc))
        # the head itself must have moved
        fresh, _ = load_seg_model(res.best_path)
        from densemae.models import build_seg_model

        init = build_seg_model(16, "dwres", False, cfg.seed_init).to_dtype(np.float32)
        assert state_digest(init.head.state_entries()) != \
            state_digest(model.head.state_entries())

    def test_full_transfer_moves_encoder(self, dataset, tmp_path, pretrained):
        cfg = tiny_finetune_cfg(transfer="full", epochs=1)
        res = finetune(cfg, dataset, tmp_path / "fu",
                       encoder_ckpt=pretrained.best_path)
        model, _ = load_seg_model(res.best_path)
        from densemae.checkpoint import load_state

        pre_entries, _ = load_state(pretrained.best_path)
        pre_enc = [(n[len("student."):], a) for n, a in pre_entries.items()
                   if n.startswith("student.")]
        assert state_digest(sorted(pre_enc)) != \
            state_digest(sorted(model.encoder.state_entries()))

    def test_val_report_and_reload(self, dataset, tmp_path, pretrained):
        cfg = tiny_finetune_cfg(transfer="full", epochs=1)
        res = finetune(cfg, dataset, tmp_path / "rep",
                       encoder_ckpt=pretrained.best_path)
        report = json.loads((tmp_path / "rep" / "val_report.json").read_text())
        assert report["split"] == "val"
        assert "selected" in report["threshold_source"]
        assert report["threshold"] is not None

        model, mcfg = load_seg_model(res.best_path)
        assert mcfg["transfer"] == "full"
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 32, 32)).astype(np.float32))
        model.eval()
        full, coarse = model(x)
        assert full.shape == (1, 1, 32, 32)
        model2, _ = load_seg_model(res.best_path)
        model2.eval()
        full2, _ = model2(x)
        np.testing.assert_array_equal(full.data, full2.data)

    def test_random_init_runs_without_checkpoint(self, dataset, tmp_path):
        cfg = tiny_finetune_cfg(transfer="random_init", epochs=1)
        res = finetune(cfg, dataset, tmp_path / "ri")
        assert 0.0 <= res.best_metric <= 1.0
