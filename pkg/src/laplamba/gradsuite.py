"""Finite-difference checks of every differentiable building block.

Each case draws its shapes from a seeded generator (at most 1x8x8x8) and
checks the gradients of the input and all parameters against central
differences at relative tolerance 1e-4.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import blocks, objectives, ops
from .gradcheck import GradCheckResult, check_gradients, weighted_sum_loss
from .nn import Module
from .ssm2d import VSSM
from .tensor import Tensor

RTOL = 1e-4


@dataclass
class SuiteRow:
    result: GradCheckResult
    shape: tuple
    seconds: float


def _leaf(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _with_params(module: Module, inputs: list) -> list:
    return inputs + [(name, p) for name, p in module.named_parameters()]


def _case_conv(rng):
    c, o, h = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(5, 9))
    x, w, b = _leaf(rng, (1, c, h, h)), _leaf(rng, (o, c, 3, 3)), _leaf(rng, (o,))
    mode = "reflect" if rng.random() < 0.5 else "zeros"
    fn = lambda: weighted_sum_loss(ops.conv2d(x, w, b, padding=1, padding_mode=mode))  # noqa: E731
    return fn, [("x", x), ("weight", w), ("bias", b)], x.shape


def _case_linear(rng):
    c, o, h = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(4, 9))
    x, w, b = _leaf(rng, (1, c, h, h)), _leaf(rng, (o, c)), _leaf(rng, (o,))
    fn = lambda: weighted_sum_loss(ops.linear(x, w, b, axis=1))  # noqa: E731
    return fn, [("x", x), ("weight", w), ("bias", b)], x.shape


def _case_layer_norm(rng):
    c, h = int(rng.integers(3, 9)), int(rng.integers(4, 9))
    x, g, b = _leaf(rng, (1, c, h, h)), _leaf(rng, (c,)), _leaf(rng, (c,))
    fn = lambda: weighted_sum_loss(ops.layer_norm(x, g, b))  # noqa: E731
    return fn, [("x", x), ("gamma", g), ("beta", b)], x.shape


def _module_case(module, x_shape, rng, extra_inputs=0):
    xs = [_leaf(rng, x_shape) for _ in range(1 + extra_inputs)]
    fn = lambda: weighted_sum_loss(module(*xs))  # noqa: E731
    names = ["x"] if not extra_inputs else [f"x{i}" for i in range(len(xs))]
    return fn, _with_params(module, list(zip(names, xs))), x_shape


def _case_gffn(rng):
    c, h = int(rng.integers(2, 9)), int(rng.integers(4, 9))
    return _module_case(blocks.GFFN(rng, c), (1, c, h, h), rng)


def _case_vssm(rng):
    c, h = int(rng.integers(2, 9)), int(rng.integers(3, 9))
    return _module_case(VSSM(rng, c, nstate=4), (1, c, h, h), rng)


def _case_lsrb(rng):
    c, h = int(rng.integers(2, 9)), int(rng.integers(3, 9))
    m = blocks.LSRB(rng, c, nstate=4)
    # move the residual scalars off 1 so their gradients are generic
    m.beta.data[...] = rng.uniform(0.5, 1.5)
    m.gamma.data[...] = rng.uniform(0.5, 1.5)
    return _module_case(m, (1, c, h, h), rng)


def _case_mdfm(rng):
    c, h = int(rng.integers(2, 9)), int(rng.integers(5, 9))
    return _module_case(blocks.MDFM(rng, c), (1, c, h, h), rng, extra_inputs=1)


def _case_hdeb(rng):
    c, h = int(rng.integers(2, 9)), int(rng.choice([4, 8]))
    return _module_case(blocks.HDEB(rng, c), (1, c, h, h), rng, extra_inputs=1)


def _case_loss(rng):
    h = 8
    pred = _leaf(rng, (1, 3, h, h))
    gt = Tensor(rng.standard_normal((1, 3, h, h)))
    fn = lambda: objectives.total_loss(pred, gt).total  # noqa: E731
    return fn, [("pred", pred)], pred.shape


CASES = {
    "conv2d": _case_conv,
    "linear": _case_linear,
    "layer_norm": _case_layer_norm,
    "GFFN": _case_gffn,
    "VSSM": _case_vssm,
    "LSRB": _case_lsrb,
    "MDFM": _case_mdfm,
    "HDEB": _case_hdeb,
    "total_loss": _case_loss,
}


def run(seed: int = 0, max_coords: int = 48, names=None) -> list:
    """Run the selected cases (all by default); returns one :class:`SuiteRow` each."""
    rows = []
    for k, (name, make) in enumerate(CASES.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        fn, tensors, shape = make(rng)
        t0 = time.perf_counter()
        res = check_gradients(fn, tensors, rtol=RTOL, max_coords=max_coords, seed=seed, name=name)
        rows.append(SuiteRow(res, tuple(shape), time.perf_counter() - t0))
    return rows


def format_report(rows: list) -> str:
    head = f"{'block':<12}{'input':<16}{'coords':>8}{'max rel err':>14}{'seconds':>9}  status"
    lines = [head]
    for r in rows:
        shape = "x".join(str(s) for s in r.shape)
        status = "ok" if r.result.passed else f"FAIL ({r.result.worst})"
        lines.append(f"{r.result.name:<12}{shape:<16}{r.result.coords_checked:>8}"
                     f"{r.result.max_rel_error:>14.3e}{r.seconds:>9.2f}  {status}")
    return "\n".join(lines)
