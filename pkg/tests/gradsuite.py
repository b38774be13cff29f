"""Case table for the finite-difference gradient suite.

Each op gets a builder that maps a seed to (f, inputs) where f returns a
scalar Tensor. Non-scalar ops are reduced through a fixed random
projection so every output element carries weight in the objective.
test_gradients.py runs a few seeds per op for day-to-day runs; the
acceptance suite runs 20 per op.
"""

import numpy as np

import densemae.functional as F
from densemae.tensor import Tensor

EPS_FD = 1e-6
TOL = 1e-4


def _proj(rng, shape):
    return Tensor(rng.normal(size=shape))


def _reduce(op, rng, out_shape):
    r = _proj(rng, out_shape)
    return lambda *ts: F.tsum(F.mul(op(*ts), r))


def _conv_case(seed):
    rng = np.random.default_rng(seed)
    # rotate through stride/padding/dilation/groups combinations
    stride, padding, dilation, groups = [
        (1, 1, 1, 1), (2, 1, 1, 1), (1, 0, 1, 2), (1, 2, 2, 1), (2, 2, 2, 4),
    ][seed % 5]
    c_in, c_out, k = 4, 4, 3
    x = Tensor(rng.normal(size=(2, c_in, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(c_out, c_in // groups, k, k)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=(c_out,)), requires_grad=True)
    h_out = (6 + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    op = lambda xi, wi, bi: F.conv2d(xi, wi, bi, stride=stride, padding=padding,
                                     dilation=dilation, groups=groups)
    return _reduce(op, rng, (2, c_out, h_out, h_out)), [x, w, b]


def _group_norm_case(seed):
    rng = np.random.default_rng(seed)
    groups = [1, 2, 4, 8][seed % 4]
    x = Tensor(rng.normal(size=(2, 8, 5, 4)), requires_grad=True)
    gamma = Tensor(rng.normal(size=(8,)) + 1.0, requires_grad=True)
    beta = Tensor(rng.normal(size=(8,)), requires_grad=True)
    op = lambda xi, gi, bi: F.group_norm(xi, gi, bi, num_groups=groups)
    return _reduce(op, rng, (2, 8, 5, 4)), [x, gamma, beta]


def _batch_norm_train_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4, 5, 5)), requires_grad=True)
    gamma = Tensor(rng.normal(size=(4,)) + 1.0, requires_grad=True)
    beta = Tensor(rng.normal(size=(4,)), requires_grad=True)
    rm, rv = np.zeros(4), np.ones(4)
    op = lambda xi, gi, bi: F.batch_norm(xi, gi, bi, rm, rv, training=True)
    return _reduce(op, rng, (3, 4, 5, 5)), [x, gamma, beta]


def _batch_norm_eval_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4, 5, 5)), requires_grad=True)
    gamma = Tensor(rng.normal(size=(4,)) + 1.0, requires_grad=True)
    beta = Tensor(rng.normal(size=(4,)), requires_grad=True)
    rm = rng.normal(size=4)
    rv = rng.uniform(0.2, 2.0, size=4)
    op = lambda xi, gi, bi: F.batch_norm(xi, gi, bi, rm, rv, training=False)
    return _reduce(op, rng, (3, 4, 5, 5)), [x, gamma, beta]


def _unary_case(fn):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 5, 4, 2)) * 2.0, requires_grad=True)
        return _reduce(fn, rng, (3, 5, 4, 2)), [x]

    return build


def _area_down2_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 8)), requires_grad=True)
    return _reduce(F.area_down2, rng, (2, 3, 3, 4)), [x]


def _nearest_down2_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 8)), requires_grad=True)
    return _reduce(F.nearest_down2, rng, (2, 3, 3, 4)), [x]


def _bilinear_up2_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 5, 4)), requires_grad=True)
    return _reduce(F.bilinear_up2, rng, (2, 3, 10, 8)), [x]


def _concat_case(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 5, 4, 4)), requires_grad=True)
    return _reduce(F.concat_channels, rng, (2, 8, 4, 4)), [a, b]


def _l2norm_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 6, 3, 3)), requires_grad=True)
    return _reduce(F.l2_normalize_channels, rng, (2, 6, 3, 3)), [x]


def _add_case(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    return _reduce(F.add, rng, (3, 4, 5)), [a, b]


def _mul_case(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    return _reduce(F.mul, rng, (3, 4, 5)), [a, b]


def _tsum_case(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    return (lambda xi: F.tsum(xi)), [x]


def _masked_l1_case(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 1, 6, 6)
    pred = Tensor(rng.normal(size=shape), requires_grad=True)
    # keep |pred - target| away from the kink so finite differences stay valid
    target = pred.data + np.where(rng.random(shape) < 0.5, 1.0, -1.0) * rng.uniform(0.1, 1.0, shape)
    include = rng.random(shape) < 0.5
    include.ravel()[0] = True
    return (lambda p: F.masked_l1(p, target, include)), [pred]


def _masked_cosine_case(seed):
    rng = np.random.default_rng(seed)
    pred = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
    target = rng.normal(size=(2, 4, 5, 5))
    include = rng.random((2, 5, 5)) < 0.5
    include.ravel()[0] = True
    return (lambda p: F.masked_cosine(p, target, include)), [pred]


def _masked_bce_case(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 1, 6, 6)
    logits = Tensor(rng.normal(size=shape) * 3.0, requires_grad=True)
    targets = (rng.random(shape) < 0.3).astype(np.float64)
    include = rng.random(shape) < 0.6
    include.ravel()[0] = True
    return (lambda z: F.masked_bce_with_logits(z, targets, include)), [logits]


CASES = {
    "conv2d": _conv_case,
    "group_norm": _group_norm_case,
    "batch_norm_train": _batch_norm_train_case,
    "batch_norm_eval": _batch_norm_eval_case,
    "gelu": _unary_case(F.gelu),
    "silu": _unary_case(F.silu),
    "sigmoid": _unary_case(F.sigmoid),
    "area_down2": _area_down2_case,
    "nearest_down2": _nearest_down2_case,
    "bilinear_up2": _bilinear_up2_case,
    "concat_channels": _concat_case,
    "l2_normalize_channels": _l2norm_case,
    "add": _add_case,
    "mul": _mul_case,
    "tsum": _tsum_case,
    "masked_l1": _masked_l1_case,
    "masked_cosine": _masked_cosine_case,
    "masked_bce_with_logits": _masked_bce_case,
}


def run_case(op_name: str, seed: int) -> float:
    from densemae.gradcheck import gradcheck

    f, inputs = CASES[op_name](seed)
    return gradcheck(f, inputs, eps=EPS_FD)
