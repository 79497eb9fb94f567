"""Canned gradcheck fixtures at three scopes: primitive ops, reasoning
blocks, and miniature end-to-end models.

Used by both the test suite and the ``gradcheck`` CLI command.  Fragments
are built with inputs bounded away from relu/max kinks where the op itself
is piecewise (random continuous data makes residual ties measure-zero; the
checker's kink exclusion covers the rest).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .gradcheck import GradcheckReport, gradcheck
from .graphreason import GraphReasoningBlock, MultiScaleReasoning
from .network import MGUNet, MGUNetConfig
from .pipeline import TwoStageModel
from .tensor import Tensor

__all__ = ["check_ops", "check_blocks", "check_model", "run_scope", "SCOPES"]

SCOPES = ("op", "block", "model")


def _t(rng, *shape, grad=True, lo=None, hi=None):
    if lo is not None:
        data = rng.uniform(lo, hi, size=shape)
    else:
        data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=grad)


def _away_from_zero(rng, *shape, grad=True):
    data = rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(data, requires_grad=grad)


def _proj(rng, shape):
    return Tensor(rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _scalarize(out, r):
    return ops.reduce_sum(ops.mul(out, r))


def _op_fragments(rng):
    """(name, fragment, checked tensors) triples covering every primitive."""
    frags = []

    def addf(name, make):
        frags.append((name, *make()))

    def f_relu():
        x = _away_from_zero(rng, 3, 4)
        r = _proj(rng, (3, 4))
        return (lambda: _scalarize(ops.relu(x), r)), [x]

    def f_add():
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        r = _proj(rng, (3, 4))
        return (lambda: _scalarize(ops.add(a, b), r)), [a, b]

    def f_sub():
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        r = _proj(rng, (3, 4))
        return (lambda: _scalarize(ops.sub(a, b), r)), [a, b]

    def f_mul():
        a, b = _away_from_zero(rng, 3, 4), _away_from_zero(rng, 3, 4)
        r = _proj(rng, (3, 4))
        return (lambda: _scalarize(ops.mul(a, b), r)), [a, b]

    def f_div():
        a = _t(rng, 3, 4)
        b = Tensor(rng.uniform(0.7, 1.8, size=(3, 4)), requires_grad=True)
        r = _proj(rng, (3, 4))
        return (lambda: _scalarize(ops.div(a, b), r)), [a, b]

    def f_scalar_mul():
        x = _t(rng, 4)
        r = _proj(rng, (4,))
        return (lambda: _scalarize(ops.scalar_mul(x, 1.7), r)), [x]

    def f_scalar_add():
        x = _t(rng, 4)
        r = _proj(rng, (4,))
        return (lambda: _scalarize(ops.scalar_add(x, -0.3), r)), [x]

    def f_log():
        x = Tensor(rng.uniform(0.6, 2.0, size=(3, 3)), requires_grad=True)
        r = _proj(rng, (3, 3))
        return (lambda: _scalarize(ops.log(x), r)), [x]

    def f_clamp_min():
        x = _away_from_zero(rng, 3, 3)
        r = _proj(rng, (3, 3))
        return (lambda: _scalarize(ops.clamp_min(x, 0.0), r)), [x]

    def f_reduce_sum():
        x = _t(rng, 2, 3, 4)
        r = _proj(rng, (2, 4))
        return (lambda: _scalarize(ops.reduce_sum(x, axis=1), r)), [x]

    def f_reduce_mean():
        x = _t(rng, 2, 3, 4)
        r = _proj(rng, (3,))
        return (lambda: _scalarize(ops.reduce_mean(x, axis=(0, 2)), r)), [x]

    def f_reshape():
        x = _t(rng, 3, 4)
        r = _proj(rng, (2, 6))
        return (lambda: _scalarize(ops.reshape(x, (2, 6)), r)), [x]

    def f_transpose2d():
        x = _t(rng, 2, 3, 4)
        r = _proj(rng, (2, 4, 3))
        return (lambda: _scalarize(ops.transpose2d(x), r)), [x]

    def f_concat_slice():
        a, b = _t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3)
        r = _proj(rng, (1, 2, 3, 3))
        return (lambda: _scalarize(
            ops.slice_channels(ops.concat_channels([a, b]), 1, 3), r)), [a, b]

    def f_matmul():
        a, b = _t(rng, 4, 5), _t(rng, 5, 3)
        r = _proj(rng, (4, 3))
        return (lambda: _scalarize(ops.matmul(a, b), r)), [a, b]

    def f_matmul_batched():
        a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
        r = _proj(rng, (2, 3, 5))
        return (lambda: _scalarize(ops.matmul(a, b), r)), [a, b]

    def f_conv2d():
        x, w, b = _t(rng, 1, 2, 5, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
        r = _proj(rng, (1, 3, 5, 6))
        return (lambda: _scalarize(ops.conv2d(x, w, b, padding=(1, 1)), r)), [x, w, b]

    def f_conv2d_strided():
        x, w, b = _t(rng, 1, 2, 7, 7), _t(rng, 2, 2, 3, 3), _t(rng, 2)
        r = _proj(rng, (1, 2, 3, 3))
        return (lambda: _scalarize(ops.conv2d(x, w, b, stride=(2, 2)), r)), [x, w, b]

    def f_conv2d_1x1():
        x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1), _t(rng, 2)
        r = _proj(rng, (2, 2, 4, 4))
        return (lambda: _scalarize(ops.conv2d(x, w, b), r)), [x, w, b]

    def f_max_pool2d():
        x = _t(rng, 1, 2, 6, 6)
        r = _proj(rng, (1, 2, 3, 3))
        return (lambda: _scalarize(ops.max_pool2d(x, (2, 2)), r)), [x]

    def f_avg_pool2d():
        x = _t(rng, 1, 2, 6, 4)
        r = _proj(rng, (1, 2, 2, 2))
        return (lambda: _scalarize(ops.avg_pool2d(x, (3, 2)), r)), [x]

    def f_bilinear():
        x = _t(rng, 1, 2, 3, 5)
        r = _proj(rng, (1, 2, 7, 8))
        return (lambda: _scalarize(ops.bilinear_upsample(x, 7, 8), r)), [x]

    def f_softmax():
        x = _t(rng, 1, 4, 3, 3)
        r = _proj(rng, (1, 4, 3, 3))
        return (lambda: _scalarize(ops.softmax_channels(x), r)), [x]

    def f_channel_norm():
        x = _t(rng, 2, 3, 4, 5)
        g = Tensor(rng.uniform(0.7, 1.4, size=3), requires_grad=True)
        b = _t(rng, 3)
        r = _proj(rng, (2, 3, 4, 5))
        return (lambda: _scalarize(ops.channel_norm(x, g, b), r)), [x, g, b]

    def f_pad_replicate():
        x = _t(rng, 1, 2, 3, 4)
        r = _proj(rng, (1, 2, 6, 7))
        return (lambda: _scalarize(ops.pad_replicate(x, (1, 2), (2, 1)), r)), [x]

    for make in (f_relu, f_add, f_sub, f_mul, f_div, f_scalar_mul, f_scalar_add,
                 f_log, f_clamp_min, f_reduce_sum, f_reduce_mean, f_reshape,
                 f_transpose2d, f_concat_slice, f_matmul, f_matmul_batched,
                 f_conv2d, f_conv2d_strided, f_conv2d_1x1, f_max_pool2d,
                 f_avg_pool2d, f_bilinear, f_softmax, f_channel_norm,
                 f_pad_replicate):
        addf(make.__name__[2:], make)
    return frags


def check_ops(h: float = 1e-6, tol: float = 1e-6, samples: int = 25,
              seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, fragment, checked in _op_fragments(rng):
        report = gradcheck(fragment, checked, samples=samples, h=h, tol=tol,
                           rng=rng, names=[f"{name}:arg{i}" for i in range(len(checked))])
        out.append((name, report))
    return out


def _randomized(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = rng.standard_normal(p.data.shape) * scale
    return module


def check_blocks(h: float = 1e-5, tol: float = 1e-4, samples: int = 10,
                 seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []

    block = _randomized(GraphReasoningBlock(6, 3, 4, rng), rng)
    x = Tensor(rng.standard_normal((1, 6, 4, 6)))
    r = _proj(rng, (1, 6, 4, 6))
    params = dict(block.named_parameters())
    out.append(("graph_reasoning_block", gradcheck(
        lambda: _scalarize(block(x), r), list(params.values()), samples=samples,
        h=h, tol=tol, rng=rng, names=list(params.keys()))))

    mgrm = MultiScaleReasoning(4, 2, (3, 2, 1, 1), rng)
    _randomized(mgrm, rng)
    xm = Tensor(rng.standard_normal((1, 4, 6, 6)))
    rm = _proj(rng, (1, 4, 6, 6))
    mparams = dict(mgrm.named_parameters())
    out.append(("multi_scale_reasoning", gradcheck(
        lambda: _scalarize(mgrm(xm), rm), list(mparams.values()), samples=max(3, samples // 2),
        h=h, tol=tol, rng=rng, names=list(mparams.keys()))))
    return out


def check_model(h: float = 1e-5, tol: float = 1e-4, samples: int = 3,
                seed: int = 0, param_stride: int = 7) -> list:
    rng = np.random.default_rng(seed)
    out = []

    net = MGUNet(MGUNetConfig(num_classes=3, base_channels=2, grb_nodes=(8, 4, 2, 1)), rng)
    for name, p in net.named_parameters():
        if "expand_proj" in name:
            p.data = rng.standard_normal(p.data.shape) * 0.2
    x = Tensor(rng.standard_normal((1, 1, 40, 64)))
    r = _proj(rng, (1, 3, 40, 64))
    params = dict(net.named_parameters())
    keys = list(params)[::param_stride]
    out.append(("miniature_mgunet", gradcheck(
        lambda: _scalarize(net(x)[0], r), [params[k] for k in keys],
        samples=samples, h=h, tol=tol, rng=rng, names=keys)))

    model = TwoStageModel(rng, base_channels=2, grb_nodes=(8, 4, 2, 1))
    for name, p in model.named_parameters():
        if "expand_proj" in name:
            p.data = rng.standard_normal(p.data.shape) * 0.2
    img = Tensor(rng.random((1, 1, 80, 80)))
    gt = rng.integers(0, 11, (80, 80))
    mparams = dict(model.named_parameters())
    mkeys = list(mparams)[::param_stride * 2]
    out.append(("two_stage_total_loss", gradcheck(
        lambda: model.training_loss(img, gt, lam=2.0)[0], [mparams[k] for k in mkeys],
        samples=samples, h=h, tol=tol, rng=rng, names=mkeys)))
    return out


def run_scope(scope: str, tol: float | None = None, seed: int = 0):
    """Run one scope of the suite; returns (all passed, formatted text)."""
    if scope == "op":
        results = check_ops(tol=tol if tol is not None else 1e-6, seed=seed)
    elif scope == "block":
        results = check_blocks(tol=tol if tol is not None else 1e-4, seed=seed)
    elif scope == "model":
        results = check_model(tol=tol if tol is not None else 1e-4, seed=seed)
    else:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    lines = []
    ok = True
    for name, report in results:
        ok &= report.passed
        lines.append(f"[{'PASS' if report.passed else 'FAIL'}] {name}: "
                     f"max_rel_err={report.max_rel_err:.3e} "
                     f"({report.checked} checked, {report.skipped} near kinks)")
        if not report.passed:
            lines.append(report.format())
    return ok, "\n".join(lines)
