"""
Dense (N, C, H, W) tensor layers with explicit backward passes, Adam and a
finite-difference gradient checker

Tensors are plain numpy arrays; every function returns new arrays and never
mutates its inputs (Parameter state excepted).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import config
from src.models import AdamConfig, GradCheckReport

logger = logging.getLogger(__name__)


def default_dtype() -> np.dtype:
    return np.dtype(config.DTYPE)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv_shapes(x: np.ndarray, w: np.ndarray):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd for same padding, got {kh}x{kw}")


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded sliding windows, shape (N, C, H, W, kh, kw)"""
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(padded, (kh, kw), axis=(2, 3))


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """Same-padded stride-1 cross-correlation: (N,Cin,H,W) x (Cout,Cin,kh,kw) -> (N,Cout,H,W)"""
    _check_conv_shapes(x, w)
    cols = _windows(x, w.shape[2], w.shape[3])
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, weight and bias"""
    kh, kw = w.shape[2:]
    cols = _windows(x, kh, kw)
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))  # (Cout, Cin, kh, kw)
    db = dout.sum(axis=(0, 2, 3))
    # full correlation with the flipped, channel-swapped kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = conv2d(dout, w_flip)
    return dx, dw.astype(w.dtype, copy=False), db


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def maxpool2x2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling; returns (out, argmax) with ties resolved to the first element in row-major order"""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(dout: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    """Route each output gradient to its argmax position"""
    n, c, oh, ow = dout.shape
    blocks = np.zeros((n, c, oh, ow, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, argmax[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * 2, ow * 2)


def upscale2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour replication, each pixel to a 2x2 block"""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def strided_conv2x2(y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """
    Stride-2 2x2 convolution, the adjoint of conv_transpose2d

    y: (N, Cout, 2H, 2W), w: (Cin, Cout, 2, 2) -> (N, Cin, H, W)
    """
    n, co, h2, w2 = y.shape
    blocks = y.reshape(n, co, h2 // 2, 2, w2 // 2, 2)
    out = np.tensordot(blocks, w, axes=([1, 3, 5], [1, 2, 3]))  # (N, H, W, Cin)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_transpose2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """2x2 stride-2 transposed convolution: (N,Cin,H,W) x (Cin,Cout,2,2) -> (N,Cout,2H,2W)"""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError(f"conv_transpose2d expects a (Cin,Cout,2,2) kernel, got {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[0]}")
    n, _, h, wd = x.shape
    co = w.shape[1]
    t = np.tensordot(x, w, axes=([1], [0]))  # (N, H, W, Cout, 2, 2)
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * wd))
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def conv_transpose2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, co, h2, w2 = dout.shape
    dx = strided_conv2x2(dout, w)
    blocks = dout.reshape(n, co, h2 // 2, 2, w2 // 2, 2)
    dw = np.tensordot(x, blocks, axes=([0, 2, 3], [0, 2, 4]))  # (Cin, Cout, 2, 2)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# activations and channel plumbing
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated through exp(-|x|) and kept strictly inside (0, 1)"""
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    one = np.ones((), dtype=out.dtype)
    return np.clip(out, np.finfo(out.dtype).tiny, np.nextafter(one, 0 * one))


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1 - out)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channels of a, then channels of b"""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} with {b.shape}: batch or spatial mismatch")
    return np.concatenate([a, b], axis=1)


def split_channels(t: np.ndarray, channels_a: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of concat_channels (also its backward)"""
    return t[:, :channels_a], t[:, channels_a:]


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    """A learned tensor with its gradient and Adam moments"""
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)


def adam_step(p: Parameter, cfg: AdamConfig) -> Parameter:
    """Bias-corrected Adam update, in place"""
    if not np.all(np.isfinite(p.grad)):
        raise ValueError(f"non-finite gradient for parameter {p.name}")
    p.step_count += 1
    t = p.step_count
    g = p.grad
    p.adam_m *= cfg.beta1
    p.adam_m += (1.0 - cfg.beta1) * g
    p.adam_v *= cfg.beta2
    p.adam_v += (1.0 - cfg.beta2) * (g * g)
    m_hat = p.adam_m / (1.0 - cfg.beta1 ** t)
    v_hat = p.adam_v / (1.0 - cfg.beta2 ** t)
    p.value -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.value.dtype, copy=False)
    return p


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x: np.ndarray,
    eps: float = 1e-5,
    atol: float = 0.0,
    kink_tol: float = 1e-3,
    roundoff: float = 0.0,
) -> GradCheckReport:
    """
    Compare the analytic gradient of loss_fn against central differences

    Args:
        loss_fn: x -> (scalar loss, gradient with x's shape)
        x: float64 point to check at
        eps: finite-difference step
        atol: coordinates where both gradients are below atol count as exact
        kink_tol: one-sided slopes disagreeing by more than this mark a kink;
            such coordinates are skipped and reported
        roundoff: relative error of one loss evaluation; differences below
            roundoff * max(1, |f|) / eps are judged against that floor

    Returns:
        GradCheckReport with max |a-n| / max(|a|, |n|, floor, 1e-12)
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires float64 input")
    x = x.copy()
    f0, analytic = loss_fn(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    flat = x.reshape(-1)
    grad_flat = analytic.reshape(-1)
    floor = max(roundoff * max(1.0, abs(float(f0))) / eps, 1e-12)
    worst = 0.0
    skipped = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(loss_fn(x)[0])
        flat[i] = orig - eps
        f_minus = float(loss_fn(x)[0])
        flat[i] = orig
        fwd = (f_plus - f0) / eps
        bwd = (f0 - f_minus) / eps
        if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
            skipped.append(i)
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        a = grad_flat[i]
        if abs(a) < atol and abs(numeric) < atol:
            continue
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    if skipped:
        logger.info("grad_check skipped %d coordinate(s) at kinks: %s", len(skipped), skipped[:10])
    return GradCheckReport(max_rel_error=worst, checked=flat.size - len(skipped), skipped=skipped)
