"""Dense masked-autoencoder pretraining with an optional EMA teacher.

The student sees the normalized tile with masked pixels zeroed, encodes
it, and the decoder reconstructs the half-resolution (2x2 area mean)
image. The L1 reconstruction loss runs only over pixels that are masked
AND valid at half resolution. When distill_weight_mode is active with
lambda > 0, an EMA teacher encodes the unmasked tile and the student's
embeddings are pulled toward the teacher's by per-pixel cosine distance;
the teacher side is detached and the teacher is updated by EMA after
each optimizer step.

With lambda == 0 the distillation term is not built at all: the loss
graph is exactly the reconstruction graph, so gradients match a pure
masked-autoencoder step bit for bit.

Half-resolution masks follow the embedding grid: the block mask
subsamples top-left (masks.py); validity requires all four covered
full-res pixels to be valid, so reconstruction targets averaged from
any invalid pixel are excluded rather than half-trusted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .masks import batch_masks
from .models import Decoder, Encoder
from .nn import Module
from .optim import ema_update
from .tensor import Tensor, no_grad

DISTILL_WEIGHT_MODES = ("masked_valid", "valid")


def half_res_valid(valid: np.ndarray) -> np.ndarray:
    """(N, 1, H, W) -> (N, 1, H/2, W/2): a half-res cell is valid only if
    all four of its full-res pixels are."""
    v = valid
    return (v[..., 0::2, 0::2] & v[..., 0::2, 1::2]
            & v[..., 1::2, 0::2] & v[..., 1::2, 1::2])


def area_mean_2x2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    return (x[..., 0::2, 0::2] + x[..., 0::2, 1::2]
            + x[..., 1::2, 0::2] + x[..., 1::2, 1::2]) * np.asarray(0.25, dtype=x.dtype)


def recon_loss(x_hat: Tensor, x: np.ndarray, mask_half: np.ndarray,
               valid_half: np.ndarray) -> Tensor:
    """Masked L1 against the 2x2 area mean of the unmasked input.

    x is the clean normalized input (N, 1, H, W); mask_half/valid_half are
    (N, 1, H/2, W/2). Included pixels are masked AND valid.
    """
    target = area_mean_2x2(x)
    include = mask_half & valid_half
    return F.masked_l1(x_hat, target, include)


def distill_loss(z_student: Tensor, z_teacher: np.ndarray,
                 weight_px: np.ndarray) -> Tensor:
    """Per-pixel cosine distance between embedding vectors over weight_px
    (N, H/2, W/2). The teacher side is a plain array, already detached."""
    return F.masked_cosine(z_student, z_teacher, weight_px)


@dataclass
class PretrainModules:
    student: Encoder
    decoder: Decoder
    teacher: Encoder | None

    def trainable(self):
        return [self.student, self.decoder]

    def state_entries(self):
        out = [("student." + n, a) for n, a in self.student.state_entries()]
        out += [("decoder." + n, a) for n, a in self.decoder.state_entries()]
        if self.teacher is not None:
            out += [("teacher." + n, a) for n, a in self.teacher.state_entries()]
        return out

    def named_trainable_params(self):
        out = [("student." + n, p) for n, p in self.student.named_parameters()]
        out += [("decoder." + n, p) for n, p in self.decoder.named_parameters()]
        return out


def build_pretrain_modules(emb_dim: int, seed: int, with_teacher: bool) -> PretrainModules:
    rng = np.random.default_rng(seed)
    student = Encoder(emb_dim, rng)
    decoder = Decoder(emb_dim, rng)
    teacher = None
    if with_teacher:
        # same weights as the student at step 0
        teacher = Encoder(emb_dim, np.random.default_rng(0))
        teacher.load_state_entries(dict(student.state_entries()))
        for p in teacher.parameters():
            p.requires_grad = False
    return PretrainModules(student=student, decoder=decoder, teacher=teacher)


@dataclass
class SSLStepStats:
    total: float
    recon: float
    distill: float
    masked_px: int


def ssl_forward(mods: PretrainModules, x: np.ndarray, valid: np.ndarray,
                mask_full: np.ndarray, lam: float,
                distill_weight_mode: str = "masked_valid"):
    """Build the pretraining loss for one batch.

    x (N, 1, H, W) float, valid (N, 1, H, W) bool, mask_full (N, H, W) bool.
    Returns (loss Tensor, SSLStepStats).
    """
    if distill_weight_mode not in DISTILL_WEIGHT_MODES:
        raise ValueError(f"distill_weight_mode must be one of {DISTILL_WEIGHT_MODES}")
    n, _, h, w = x.shape
    m4 = mask_full[:, None]
    x_in = x.copy()
    x_in[m4] = 0.0  # mask after normalization

    mask_half = m4[..., 0::2, 0::2]
    valid_half = half_res_valid(valid)

    _, z_s = mods.student(Tensor(x_in))
    x_hat = mods.decoder(z_s)
    l_rec = recon_loss(x_hat, x, mask_half, valid_half)

    if lam != 0.0:
        if mods.teacher is None:
            raise ValueError("lambda != 0 requires a teacher")
        with no_grad():
            _, z_t = mods.teacher(Tensor(x))
        if distill_weight_mode == "masked_valid":
            w_px = (mask_half & valid_half)[:, 0]
        else:
            w_px = valid_half[:, 0]
        l_dis = distill_loss(z_s, z_t.data, w_px)
        loss = F.add(l_rec, F.mul(l_dis, lam))
        dis_val = l_dis.item()
    else:
        loss = l_rec
        dis_val = 0.0

    stats = SSLStepStats(total=loss.item(), recon=l_rec.item(), distill=dis_val,
                         masked_px=int((mask_half & valid_half).sum()))
    return loss, stats


def ssl_train_step(mods: PretrainModules, optimizer, x, valid, ratio: float,
                   block: int, lam: float, ema_momentum: float,
                   rng: np.random.Generator,
                   distill_weight_mode: str = "masked_valid") -> SSLStepStats:
    """One full pretraining step: mask, forward, backward, optimizer step,
    then the EMA teacher update (in that order)."""
    n, _, h, w = x.shape
    mask_full, _ = batch_masks(n, h, w, ratio, block, rng)
    loss, stats = ssl_forward(mods, x, valid, mask_full, lam, distill_weight_mode)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if mods.teacher is not None:
        ema_update(mods.teacher, mods.student, ema_momentum)
    return stats
