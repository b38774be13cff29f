"""Encoder, reconstruction decoder, segmentation heads, refinement.

The encoder keeps full resolution through the stem, downsamples once by
stride 2, and widens 32 -> 64 -> 96 -> 96 -> 128 with one dilated (d=2)
unit in the last stage, so embeddings live on a half-resolution grid with
a receptive field wide enough for point anomalies in context. A "conv
unit" is conv3x3 -> GroupNorm(8) -> GELU; the stride-2 downsample is a
bare conv. The projection to emb_dim is 1x1 + GELU with no norm.

Heads map the embedding grid to per-pixel logits on that same grid; the
optional refinement block lifts coarse logits back to input resolution
using the stem features. Without refinement, full-resolution logits come
from bilinear x2 upsampling of the coarse logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import GELU, BatchNorm2d, Conv2d, GroupNorm, Module, Sequential, SiLU
from .tensor import no_grad

STAGE_WIDTHS = (32, 64, 96, 128)
HEAD_KINDS = ("linear", "trt", "dwres")


@dataclass
class ModelConfig:
    emb_dim: int = 64
    head: str = "trt"
    refine: bool = False
    head_hidden: int = 32
    gn_groups: int = 8

    def to_dict(self) -> dict:
        return {"emb_dim": self.emb_dim, "head": self.head, "refine": self.refine,
                "head_hidden": self.head_hidden, "gn_groups": self.gn_groups}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in
                      ("emb_dim", "head", "refine", "head_hidden", "gn_groups") if k in d})


class ConvUnit(Module):
    """conv3x3 -> GroupNorm -> GELU, shape preserving."""

    def __init__(self, c_in, c_out, rng, dilation=1, gn_groups=8):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, dilation=dilation)
        self.norm = GroupNorm(c_out, gn_groups)

    def forward(self, x):
        return F.gelu(self.norm(self.conv(x)))


class Encoder(Module):
    def __init__(self, emb_dim: int, rng: np.random.Generator, gn_groups: int = 8):
        super().__init__()
        w0, w1, w2, w3 = STAGE_WIDTHS
        self.emb_dim = emb_dim
        self.stem = ConvUnit(1, w0, rng, gn_groups=gn_groups)
        self.down = Conv2d(w0, w1, 3, rng, stride=2)  # bare conv, no norm/act
        self.stage1 = ConvUnit(w1, w1, rng, gn_groups=gn_groups)
        self.stage2a = ConvUnit(w1, w2, rng, gn_groups=gn_groups)
        self.stage2b = ConvUnit(w2, w2, rng, gn_groups=gn_groups)
        self.stage3a = ConvUnit(w2, w3, rng, dilation=2, gn_groups=gn_groups)
        self.stage3b = ConvUnit(w3, w3, rng, gn_groups=gn_groups)
        self.proj = Conv2d(w3, emb_dim, 1, rng)

    def forward(self, x):
        """x (N, 1, H, W) -> (f0 (N, 32, H, W), z (N, emb_dim, H/2, W/2))."""
        f0 = self.stem(x)
        h = self.stage1(self.down(f0))
        h = self.stage2b(self.stage2a(h))
        h = self.stage3b(self.stage3a(h))
        z = F.gelu(self.proj(h))
        return f0, z


class Decoder(Module):
    """Embedding grid back to a half-resolution reconstruction."""

    def __init__(self, emb_dim: int, rng: np.random.Generator, hidden: int = 64):
        super().__init__()
        self.reduce = Conv2d(emb_dim, hidden, 1, rng)
        self.mix = Conv2d(hidden, hidden, 3, rng)
        self.out = Conv2d(hidden, 1, 1, rng)

    def forward(self, z):
        h = F.gelu(self.reduce(z))
        h = F.gelu(self.mix(h))
        return self.out(h)


class LinearHead(Module):
    def __init__(self, emb_dim, rng):
        super().__init__()
        self.out = Conv2d(emb_dim, 1, 1, rng)

    def forward(self, z):
        return self.out(z)


class TrtHead(Module):
    """1x1 projection, then 3 x (conv3x3 -> BatchNorm -> SiLU), then 1x1."""

    def __init__(self, emb_dim, rng, hidden=32):
        super().__init__()
        mods = [Conv2d(emb_dim, hidden, 1, rng)]
        for _ in range(3):
            mods += [Conv2d(hidden, hidden, 3, rng), BatchNorm2d(hidden), SiLU()]
        mods.append(Conv2d(hidden, 1, 1, rng))
        self.net = Sequential(*mods)

    def forward(self, z):
        return self.net(z)


class DwResBlock(Module):
    """x + (depthwise3x3 -> pointwise1x1 -> GroupNorm -> SiLU)(x)."""

    def __init__(self, c, rng, dilation, gn_groups=8):
        super().__init__()
        self.dw = Conv2d(c, c, 3, rng, dilation=dilation, groups=c)
        self.pw = Conv2d(c, c, 1, rng)
        self.norm = GroupNorm(c, gn_groups)

    def forward(self, x):
        return F.add(x, F.silu(self.norm(self.pw(self.dw(x)))))


class DwResHead(Module):
    """1x1 projection, 3 depthwise-residual blocks at dilations 1, 2, 4, 1x1 out."""

    def __init__(self, emb_dim, rng, hidden=32, gn_groups=8):
        super().__init__()
        self.proj = Conv2d(emb_dim, hidden, 1, rng)
        self.block1 = DwResBlock(hidden, rng, dilation=1, gn_groups=gn_groups)
        self.block2 = DwResBlock(hidden, rng, dilation=2, gn_groups=gn_groups)
        self.block3 = DwResBlock(hidden, rng, dilation=4, gn_groups=gn_groups)
        self.out = Conv2d(hidden, 1, 1, rng)

    def forward(self, z):
        h = self.proj(z)
        h = self.block3(self.block2(self.block1(h)))
        return self.out(h)


class RefineHead(Module):
    """Upsample coarse logits x2, fuse with stem features, re-predict."""

    def __init__(self, rng, stem_ch=STAGE_WIDTHS[0], hidden=16, gn_groups=8):
        super().__init__()
        self.fuse = Conv2d(stem_ch + 1, hidden, 3, rng)
        self.norm = GroupNorm(hidden, gn_groups)
        self.out = Conv2d(hidden, 1, 1, rng)

    def forward(self, f0, coarse_logits):
        up = F.bilinear_up2(coarse_logits)
        h = F.gelu(self.norm(self.fuse(F.concat_channels(f0, up))))
        return self.out(h)


def _build_head(kind: str, emb_dim: int, rng, hidden: int, gn_groups: int) -> Module:
    if kind == "linear":
        return LinearHead(emb_dim, rng)
    if kind == "trt":
        return TrtHead(emb_dim, rng, hidden)
    if kind == "dwres":
        return DwResHead(emb_dim, rng, hidden, gn_groups)
    raise ValueError(f"unknown head kind {kind!r}, expected one of {HEAD_KINDS}")


class SegModel(Module):
    """Encoder + head (+ optional refinement) producing full-res logits."""

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config.emb_dim, rng, config.gn_groups)
        self.head = _build_head(config.head, config.emb_dim, rng,
                                config.head_hidden, config.gn_groups)
        self.refine = RefineHead(rng, gn_groups=config.gn_groups) if config.refine else None

    def forward(self, x, detach_features: bool = False):
        """Returns (full-res logits (N, 1, H, W), coarse logits (N, 1, H/2, W/2)).

        detach_features runs the encoder outside the graph, so only head and
        refinement parameters receive gradients (frozen-encoder transfer)."""
        if detach_features:
            with no_grad():
                f0, z = self.encoder(x)
        else:
            f0, z = self.encoder(x)
        coarse = self.head(z)
        if self.refine is not None:
            return self.refine(f0, coarse), coarse
        return F.bilinear_up2(coarse), coarse


def build_seg_model(emb_dim: int, head: str, refine: bool, seed: int,
                    head_hidden: int = 32) -> SegModel:
    return SegModel(ModelConfig(emb_dim=emb_dim, head=head, refine=refine,
                                head_hidden=head_hidden), seed)


def count_params(module: Module) -> int:
    return module.num_params()


def footprint_fp16_bytes(module: Module) -> int:
    """Deployment size at fp16: parameters plus persistent float buffers
    (batch-norm running stats); integer bookkeeping buffers are not shipped."""
    n = module.num_params()
    n += sum(b.size for _, b in module.named_buffers()
             if np.issubdtype(b.dtype, np.floating))
    return 2 * n


# named variants used by the latency/footprint sweep
BENCH_VARIANTS = {
    "emb32_trt": dict(emb_dim=32, head="trt", refine=False),
    "emb64_trt": dict(emb_dim=64, head="trt", refine=False),
    "emb32_dwres": dict(emb_dim=32, head="dwres", refine=False),
    "emb64_dwres": dict(emb_dim=64, head="dwres", refine=False),
    "emb32_dwres_refine": dict(emb_dim=32, head="dwres", refine=True),
    "emb64_dwres_refine": dict(emb_dim=64, head="dwres", refine=True),
}
