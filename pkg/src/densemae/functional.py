"""Differentiable ops on Tensors.

Every op returns a new Tensor via make_op with a hand-written backward.
Elementwise ops demand matching shapes (or a python scalar); reductions,
reindexing and broadcasting only happen inside ops that know how to
reverse them.

The masked losses at the bottom share one design rule: included elements
are gathered by index before any arithmetic, the loss is computed on the
gathered values only, and the backward scatters into fresh zeros. Excluded
elements therefore never touch the value or the gradient, not even as a
multiplication by zero, so perturbing them cannot change a single bit of
the result.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, make_op

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_CONV_IMPLS = ("im2col", "direct")
_conv_impl = "im2col"


def set_conv_impl(name: str):
    """Select the conv2d forward algorithm ("im2col" or "direct")."""
    global _conv_impl
    if name not in _CONV_IMPLS:
        raise ValueError(f"unknown conv impl {name!r}, expected one of {_CONV_IMPLS}")
    _conv_impl = name


def get_conv_impl() -> str:
    return _conv_impl


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise basics


def add(a: Tensor, b):
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
        out = a.data + b.data
        return make_op(out, (a, b), lambda g: (g, g))
    c = float(b)
    return make_op(a.data + c, (a,), lambda g: (g,))


def mul(a: Tensor, b):
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    c = float(b)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def tsum(x: Tensor):
    """Sum over all elements, returning a 0-d tensor."""
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.asarray(g), shape),)

    return make_op(np.asarray(x.data.sum()), (x,), backward)


# ---------------------------------------------------------------------------
# activations


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor):
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    return make_op(s, (x,), lambda g: (g * (s * (1.0 - s)),))


def gelu(x: Tensor):
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    return make_op(out, (x,), backward)


def silu(x: Tensor):
    x = _as_tensor(x)
    xd = x.data
    s = _sigmoid_np(xd)
    out = xd * s

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1, impl=None):
    """2-d convolution (cross-correlation) on NCHW input.

    weight is (c_out, c_in // groups, kh, kw); padding is symmetric zeros.
    impl overrides the module-level algorithm choice for this call. Both
    algorithms share one backward, so the choice only affects how the
    forward is computed.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if impl is None:
        impl = _conv_impl
    if impl not in _CONV_IMPLS:
        raise ValueError(f"unknown conv impl {impl!r}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weight")
    if x.dtype != weight.dtype:
        raise TypeError(f"conv2d dtype mismatch: input {x.dtype} vs weight {weight.dtype}")

    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ValueError("channel counts must divide groups")
    if c_in_g != c_in // groups:
        raise ValueError(f"weight expects {c_in_g * groups} input channels, got {c_in}")

    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError("conv output would be empty")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    og = c_out // groups
    w_mat = weight.data.reshape(groups, og, c_in_g * kh * kw)

    if impl == "im2col":
        # channels-major columns (c_in_g*kh*kw, h_out*w_out), one image and
        # one group at a time: tap gathers are block copies, the GEMM result
        # lands straight in the NCHW output, and the scratch stays small
        # enough for the allocator to recycle across calls
        out = np.empty((n, c_out, h_out, w_out), dtype=x.dtype)
        for i in range(n):
            for g in range(groups):
                cols = _im2col(xp[i, g * c_in_g:(g + 1) * c_in_g],
                               kh, kw, stride, dilation, h_out, w_out)
                out[i, g * og:(g + 1) * og] = (w_mat[g] @ cols).reshape(og, h_out, w_out)
    else:
        out = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
        for g in range(groups):
            for oc in range(og):
                w_oc = weight.data[g * og + oc]
                acc = out[:, g * og + oc]
                for ic in range(c_in_g):
                    plane = xp[:, g * c_in_g + ic]
                    for i in range(kh):
                        r0 = i * dilation
                        rows = plane[:, r0:r0 + (h_out - 1) * stride + 1:stride]
                        for j in range(kw):
                            c0 = j * dilation
                            acc += w_oc[ic, i, j] * rows[:, :, c0:c0 + (w_out - 1) * stride + 1:stride]

    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
        out += bias.data.reshape(1, c_out, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dw_mat = np.zeros((groups, og, c_in_g * kh * kw), dtype=weight.data.dtype)
        need_dx = x.requires_grad
        dxp = np.zeros_like(xp) if need_dx else None
        for i in range(n):
            for gi in range(groups):
                go = g[i, gi * og:(gi + 1) * og].reshape(og, h_out * w_out)
                cols = _im2col(xp[i, gi * c_in_g:(gi + 1) * c_in_g],
                               kh, kw, stride, dilation, h_out, w_out)
                dw_mat[gi] += go @ cols.T
                if need_dx:
                    _col2im_add(w_mat[gi].T @ go,
                                dxp[i, gi * c_in_g:(gi + 1) * c_in_g],
                                kh, kw, stride, dilation, h_out, w_out)
        dw = dw_mat.reshape(weight.data.shape)

        dx = None
        if need_dx:
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp

        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return make_op(out, parents, backward)


def _im2col(xg, kh, kw, stride, dilation, h_out, w_out):
    """Columns for one image's channel slice (c, H, W) -> (c*kh*kw, hw)."""
    c = xg.shape[0]
    if kh == 1 and kw == 1 and stride == 1:
        # 1x1 columns are the feature planes themselves
        return xg.reshape(c, h_out * w_out)
    buf = np.empty((c, kh, kw, h_out, w_out), dtype=xg.dtype)
    for ki in range(kh):
        r0 = ki * dilation
        rs = slice(r0, r0 + (h_out - 1) * stride + 1, stride)
        for kj in range(kw):
            c0 = kj * dilation
            buf[:, ki, kj] = xg[:, rs, c0:c0 + (w_out - 1) * stride + 1:stride]
    return buf.reshape(c * kh * kw, h_out * w_out)


def _col2im_add(dcols, dst, kh, kw, stride, dilation, h_out, w_out):
    # inverse gather: accumulate (c*kh*kw, hw) columns back onto (c, H, W)
    c = dst.shape[0]
    dc = dcols.reshape(c, kh, kw, h_out, w_out)
    for ki in range(kh):
        r0 = ki * dilation
        rs = slice(r0, r0 + (h_out - 1) * stride + 1, stride)
        for kj in range(kw):
            c0 = kj * dilation
            dst[:, rs, c0:c0 + (w_out - 1) * stride + 1:stride] += dc[:, ki, kj]


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5):
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    n, c, h, w = x.shape
    if c % num_groups:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    m = (c // num_groups) * h * w

    xg = x.data.reshape(n, num_groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    gc = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gc + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxh = (g * gc).reshape(n, num_groups, m)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                    - xhat_g * (dxh * xhat_g).mean(axis=2, keepdims=True))
        return (dx.reshape(n, c, h, w), dgamma, dbeta)

    return make_op(out, (x, gamma, beta), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5):
    """Batch norm over (N, H, W) per channel.

    In training mode the batch is normalized with its own biased variance
    and the running buffers are updated in place as
    running = (1 - momentum) * running + momentum * batch, with the
    unbiased variance going into running_var. Eval mode normalizes with
    the buffers as given and never touches them.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    n, c, h, w = x.shape
    gc = gamma.data.reshape(1, c, 1, 1)

    if training:
        cnt = n * h * w
        if cnt < 2:
            raise ValueError("batch_norm needs more than one value per channel in training mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (cnt / (cnt - 1.0)))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * gc + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxh = g * gc
            dx = inv.reshape(1, c, 1, 1) * (
                dxh - dxh.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxh * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return (dx, dgamma, dbeta)

        return make_op(out, (x, gamma, beta), backward)

    inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1)
    xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return (g * gc * inv, dgamma, dbeta)

    return make_op(xhat * gc + beta.data.reshape(1, c, 1, 1), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# resampling


def area_down2(x: Tensor):
    """2x2 mean pooling; needs even spatial dims."""
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"area_down2 needs even spatial dims, got {h}x{w}")
    xd = x.data
    out = (xd[..., 0::2, 0::2] + xd[..., 0::2, 1::2]
           + xd[..., 1::2, 0::2] + xd[..., 1::2, 1::2]) * 0.25

    def backward(g):
        dx = np.empty_like(xd)
        q = g * 0.25
        dx[..., 0::2, 0::2] = q
        dx[..., 0::2, 1::2] = q
        dx[..., 1::2, 0::2] = q
        dx[..., 1::2, 1::2] = q
        return (dx,)

    return make_op(out, (x,), backward)


def nearest_down2(x: Tensor):
    """Keep the top-left pixel of each 2x2 block."""
    x = _as_tensor(x)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., 0::2, 0::2] = g
        return (dx,)

    return make_op(x.data[..., 0::2, 0::2].copy(), (x,), backward)


def _bilinear_axis(length_out, length_in):
    # output pixel centers mapped back at half-pixel alignment
    src = (np.arange(length_out) + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, length_in - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, length_in - 1).astype(np.intp)
    return i0, i1, frac


def bilinear_up2(x: Tensor):
    """Bilinear x2 upsampling with half-pixel (align_corners=False) mapping.

    Interpolates as v0 + frac * (v1 - v0), separably per axis, so constant
    inputs reproduce exactly.
    """
    x = _as_tensor(x)
    h, w = x.shape[-2:]
    i0, i1, fy = _bilinear_axis(2 * h, h)
    j0, j1, fx = _bilinear_axis(2 * w, w)
    fy_c = fy.reshape(-1, 1)

    xd = x.data
    r0 = xd[..., i0, :]
    r1 = xd[..., i1, :]
    rows = r0 + fy_c * (r1 - r0)
    c0 = rows[..., j0]
    c1 = rows[..., j1]
    out = c0 + fx * (c1 - c0)

    def backward(g):
        drows = np.zeros(g.shape[:-1] + (w,), dtype=g.dtype)
        np.add.at(drows, (..., j0), g * (1.0 - fx))
        np.add.at(drows, (..., j1), g * fx)
        dx = np.zeros(xd.shape, dtype=g.dtype)
        wy = fy_c
        np.add.at(dx, (..., i0, slice(None)), drows * (1.0 - wy))
        np.add.at(dx, (..., i1, slice(None)), drows * wy)
        return (dx,)

    return make_op(out.astype(xd.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def concat_channels(a: Tensor, b: Tensor):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels shape mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def l2_normalize_channels(x: Tensor, eps: float = 1e-8):
    """Normalize each pixel's channel vector to unit length: x / sqrt(sum_c x^2 + eps)."""
    x = _as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True) + eps)
    out = xd / norm

    def backward(g):
        dot = (g * xd).sum(axis=1, keepdims=True)
        return (g / norm - xd * (dot / norm ** 3),)

    return make_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# masked losses (gather first, see module docstring)


def masked_l1(pred: Tensor, target: np.ndarray, include: np.ndarray, eps: float = 1e-8):
    """sum |pred - target| over include / (count + eps). Empty include gives 0."""
    pred = _as_tensor(pred)
    target = np.asarray(target)
    if target.shape != pred.shape or include.shape != pred.shape:
        raise ValueError("masked_l1 expects target and include shaped like pred")
    idx = np.flatnonzero(include.ravel())
    d = pred.data.ravel()[idx] - target.ravel()[idx]
    denom = idx.size + eps
    val = np.asarray(np.abs(d).sum() / denom, dtype=pred.dtype)

    def backward(g):
        flat = np.zeros(pred.data.size, dtype=pred.dtype)
        flat[idx] = np.sign(d) * (g / denom)
        return (flat.reshape(pred.shape),)

    return make_op(val, (pred,), backward)


def masked_cosine(pred: Tensor, target: np.ndarray, include_px: np.ndarray,
                  eps: float = 1e-8):
    """Mean cosine distance between channel vectors over included pixels.

    pred and target are (N, C, H, W); include_px is (N, H, W). Both sides
    are L2-normalized per pixel on the gathered values and the distance is
    taken as 0.5*||s_hat - t_hat||^2, which equals 1 - cos for unit
    vectors but stays exactly 0.0 when both sides carry the same bits.
    target carries no gradient. Returns sum_px dist / (count + eps); each
    term lies in [0, 2].
    """
    pred = _as_tensor(pred)
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ValueError("masked_cosine expects target shaped like pred")
    n, c, h, w = pred.shape
    if include_px.shape != (n, h, w):
        raise ValueError(f"include_px shape {include_px.shape} != {(n, h, w)}")

    idx = np.flatnonzero(include_px.ravel())
    s = pred.data.transpose(0, 2, 3, 1).reshape(-1, c)[idx]
    t = target.transpose(0, 2, 3, 1).reshape(-1, c)[idx]
    # norm guard well below eps so the value-level identities stay sharp
    ns = np.sqrt((s * s).sum(axis=1, keepdims=True) + 1e-12)
    nt = np.sqrt((t * t).sum(axis=1, keepdims=True) + 1e-12)
    s_hat = s / ns
    t_hat = t / nt
    d = s_hat - t_hat
    denom = idx.size + eps
    val = np.asarray(0.5 * (d * d).sum() / denom, dtype=pred.dtype)

    def backward(g):
        ds_hat = d * (g / denom)
        ds = ds_hat / ns - s * ((ds_hat * s).sum(axis=1, keepdims=True) / ns ** 3)
        flat = np.zeros((n * h * w, c), dtype=pred.dtype)
        flat[idx] = ds
        return (flat.reshape(n, h, w, c).transpose(0, 3, 1, 2).copy(),)

    return make_op(val, (pred,), backward)


def masked_bce_with_logits(logits: Tensor, targets: np.ndarray, include: np.ndarray,
                           eps: float = 1e-8):
    """Binary cross-entropy with logits, averaged over included elements.

    Uses the overflow-safe form max(z, 0) - z*y + log1p(exp(-|z|)).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape or include.shape != logits.shape:
        raise ValueError("masked_bce_with_logits expects targets and include shaped like logits")
    idx = np.flatnonzero(include.ravel())
    z = logits.data.ravel()[idx]
    y = targets.ravel()[idx].astype(logits.dtype, copy=False)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    denom = idx.size + eps
    val = np.asarray(per.sum() / denom, dtype=logits.dtype)

    def backward(g):
        flat = np.zeros(logits.data.size, dtype=logits.dtype)
        flat[idx] = (_sigmoid_np(z) - y) * (g / denom)
        return (flat.reshape(logits.shape),)

    return make_op(val, (logits,), backward)
