"""
64-bit finite-difference suite over every layer and the full tiny U-Net
"""
import logging
from typing import Callable, List, Tuple

import numpy as np

from src.models import GradCheckCase, GradCheckReport, UNetConfig
from src.tensor_ops import (
    concat_channels,
    conv2d,
    conv2d_backward,
    conv_transpose2d,
    conv_transpose2d_backward,
    grad_check,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    split_channels,
)
from src.trainer import dice_loss
from src.unet import UNet

logger = logging.getLogger(__name__)

LAYER_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5
# piecewise-linear layers carry no truncation error, so they take the larger step
LINEAR_EPS = 1e-3
SMOOTH_EPS = 1e-5
# upper bound on the relative error of one float64 loss evaluation
LOSS_ROUNDOFF = 1e-9

LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def _projected(forward: Callable[[np.ndarray], np.ndarray], backward: Callable[[np.ndarray, np.ndarray], np.ndarray],
               r: np.ndarray) -> LossFn:
    """loss = sum(r * forward(x)); its gradient is backward(r, x)"""
    def loss_fn(x: np.ndarray):
        return float(np.sum(r * forward(x))), backward(r, x)
    return loss_fn


def layer_cases(seed: int = 0) -> List[Tuple[str, LossFn, np.ndarray, float]]:
    """(name, loss, point, finite-difference step) per layer"""
    rng = np.random.default_rng(seed)
    cases = []

    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    x = rng.standard_normal((1, 2, 6, 6))
    r = rng.standard_normal((1, 3, 6, 6))
    cases.append(("conv2d.input", _projected(lambda t: conv2d(t, w, b), lambda d, t: conv2d_backward(d, t, w)[0], r), x, LINEAR_EPS))
    cases.append(("conv2d.weight", _projected(lambda t: conv2d(x, t, b), lambda d, t: conv2d_backward(d, x, t)[1], r), w.copy(), LINEAR_EPS))
    cases.append(("conv2d.bias", _projected(lambda t: conv2d(x, w, t), lambda d, t: conv2d_backward(d, x, w)[2], r), b.copy(), LINEAR_EPS))

    wt = rng.standard_normal((2, 3, 2, 2))
    bt = rng.standard_normal(3)
    xt = rng.standard_normal((1, 2, 3, 4))
    rt = rng.standard_normal((1, 3, 6, 8))
    cases.append(("conv_transpose2d.input",
                  _projected(lambda t: conv_transpose2d(t, wt, bt), lambda d, t: conv_transpose2d_backward(d, t, wt)[0], rt), xt, LINEAR_EPS))
    cases.append(("conv_transpose2d.weight",
                  _projected(lambda t: conv_transpose2d(xt, t, bt), lambda d, t: conv_transpose2d_backward(d, xt, t)[1], rt), wt.copy(), LINEAR_EPS))
    cases.append(("conv_transpose2d.bias",
                  _projected(lambda t: conv_transpose2d(xt, wt, t), lambda d, t: conv_transpose2d_backward(d, xt, wt)[2], rt), bt.copy(), LINEAR_EPS))

    # distinct values spaced well beyond eps keep every window away from ties
    xp = (rng.permutation(2 * 8 * 8).reshape(1, 2, 8, 8) * 0.1).astype(np.float64)
    rp = rng.standard_normal((1, 2, 4, 4))
    cases.append(("maxpool2x2",
                  _projected(lambda t: maxpool2x2(t)[0], lambda d, t: maxpool2x2_backward(d, maxpool2x2(t)[1]), rp), xp, LINEAR_EPS))

    xs = rng.standard_normal((2, 1, 4, 4)) * 3
    rs = rng.standard_normal(xs.shape)
    cases.append(("sigmoid", _projected(sigmoid, lambda d, t: sigmoid_backward(d, sigmoid(t)), rs), xs, SMOOTH_EPS))

    xr = rng.standard_normal((1, 2, 4, 4))
    xr[np.abs(xr) < 0.05] += 0.1
    rr = rng.standard_normal(xr.shape)
    cases.append(("relu", _projected(relu, lambda d, t: relu_backward(d, t), rr), xr, LINEAR_EPS))

    a = rng.standard_normal((1, 2, 4, 4))
    c = rng.standard_normal((1, 3, 4, 4))
    rc = rng.standard_normal((1, 5, 4, 4))
    cases.append(("concat_channels.a", _projected(lambda t: concat_channels(t, c), lambda d, t: split_channels(d, 2)[0], rc), a, LINEAR_EPS))
    cases.append(("concat_channels.b", _projected(lambda t: concat_channels(a, t), lambda d, t: split_channels(d, 2)[1], rc), c.copy(), LINEAR_EPS))

    target = (rng.random((2, 1, 6, 6)) > 0.6).astype(np.float64)
    pred = rng.uniform(0.05, 0.95, size=target.shape)
    cases.append(("dice_loss", lambda p: dice_loss(p, target, 1.0), pred, SMOOTH_EPS))
    return cases


def tiny_unet(seed: int = 0) -> UNet:
    return UNet.build(UNetConfig(levels=2, base_channels=2), seed=seed, dtype="float64")


def check_unet(seed: int = 0, eps: float = SMOOTH_EPS) -> List[GradCheckCase]:
    """End-to-end dice-loss gradients of a levels-2 / base-2 U-Net on 8x8 input"""
    rng = np.random.default_rng(seed)
    model = tiny_unet(seed)
    x = rng.random((1, 1, 8, 8))
    target = np.zeros_like(x)
    target[..., 2:5, 3:6] = 1.0

    def input_loss(t: np.ndarray):
        probs, cache = model.forward_with_cache(t)
        loss, dprobs = dice_loss(probs, target)
        model.zero_grad()
        return loss, model.backward(cache, dprobs)

    cases = [GradCheckCase(name="unet.input", tolerance=MODEL_TOLERANCE,
                           report=grad_check(input_loss, x, eps=eps, roundoff=LOSS_ROUNDOFF))]

    worst, checked, skipped = 0.0, 0, []
    offset = 0
    for name, param in model.params.items():
        original = param.value

        def param_loss(t: np.ndarray, param=param):
            param.value = t
            probs, cache = model.forward_with_cache(x)
            loss, dprobs = dice_loss(probs, target)
            model.zero_grad()
            model.backward(cache, dprobs)
            return loss, param.grad.copy()

        report = grad_check(param_loss, original, eps=eps, roundoff=LOSS_ROUNDOFF)
        param.value = original
        worst = max(worst, report.max_rel_error)
        checked += report.checked
        skipped.extend(offset + i for i in report.skipped)
        offset += original.size
    cases.append(GradCheckCase(
        name="unet.parameters",
        tolerance=MODEL_TOLERANCE,
        report=GradCheckReport(max_rel_error=worst, checked=checked, skipped=skipped),
    ))
    return cases


def run_gradient_suite(seed: int = 0) -> List[GradCheckCase]:
    results = [
        GradCheckCase(name=name, tolerance=LAYER_TOLERANCE,
                      report=grad_check(fn, x, eps=eps, roundoff=LOSS_ROUNDOFF))
        for name, fn, x, eps in layer_cases(seed)
    ]
    results.extend(check_unet(seed))
    for case in results:
        level = logging.INFO if case.passed else logging.ERROR
        logger.log(level, "%-26s max rel err %.3e (%d checked, %d skipped) %s", case.name,
                   case.report.max_rel_error, case.report.checked, len(case.report.skipped),
                   "ok" if case.passed else "FAILED")
    return results
