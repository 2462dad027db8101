"""Dense numpy primitives with hand-written pullbacks.

Every differentiable primitive comes in two flavours: ``op(...)`` returns the
output array, ``op_vjp(...)`` returns ``(output, pullback)`` where
``pullback(cotangent)`` yields gradients with respect to the inputs.
Spatial tensors are channels-last, ``(N, H, W, C)``; single images
``(H, W, C)`` are accepted wherever a batch is.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError, StageError

BCE_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True


class ParamSet:
    """Named parameters plus non-learnable buffers (e.g. running statistics).

    Names are dotted paths such as ``backbone.conv1.w``; prefix selection
    is how stages freeze or unfreeze whole sub-models.
    """

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = Param(value, None, trainable)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self.params[name].trainable

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        p = self.params[name]
        if grad.shape != p.value.shape:
            raise ShapeError(f"gradient shape {grad.shape} != value shape {p.value.shape} for {name}")
        if p.grad is None:
            p.grad = grad.astype(p.value.dtype, copy=True)
        else:
            p.grad += grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, prefixes: Iterable[str]) -> None:
        """Make exactly the parameters under ``prefixes`` trainable."""
        prefixes = tuple(prefixes)
        for name, p in self.params.items():
            p.trainable = name.startswith(prefixes) if prefixes else False

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.trainable]

    def count(self, prefix: str = "") -> int:
        return sum(p.value.size for n, p in self.params.items() if n.startswith(prefix))

    def checksum(self, prefixes: Sequence[str] = ("",)) -> str:
        """SHA-256 over the raw bytes of every parameter under ``prefixes``."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(tuple(prefixes)):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {n: p.value.copy() for n, p in self.params.items()}
        out.update({"buffer:" + n: b.copy() for n, b in self.buffers.items()})
        return out

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            if n.startswith("buffer:"):
                self.buffers[n[7:]][...] = v
            else:
                self.params[n].value[...] = v

    def merge(self, other: "ParamSet") -> None:
        for n, p in other.params.items():
            if n in self.params:
                raise KeyError(f"duplicate parameter {n!r}")
            self.params[n] = p
        self.buffers.update(other.buffers)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to every trainable entry, then zero grads."""
    trainable = params.trainable_names()
    for name in trainable:
        if params.params[name].grad is None:
            raise StageError(f"trainable parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in trainable:
        p = params.params[name]
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= step.astype(p.value.dtype, copy=False)
    params.zero_grad()


# --------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d_vjp(x, w, b, stride: int = 1, padding: int = 0):
    """Cross-correlation with zero padding. ``w`` has shape (k, k, Cin, Cout)."""
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    xb, squeeze = _as_batch(x)
    k, k2, cin, cout = w.shape
    if k != k2:
        raise ShapeError(f"non-square kernel {w.shape[:2]}")
    if xb.shape[-1] != cin:
        raise ShapeError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    n, h, wd, _ = xb.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} larger than padded input {h}x{wd}")
    p = padding
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    if k == 1:
        win = xp[:, ::stride, ::stride, :][:, :ho, :wo, :]
        y = win @ w[0, 0] + b
    else:
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        y = np.tensordot(win, w, axes=([4, 5, 3], [0, 1, 2])) + b

    def pullback(dy, need_params: bool = True):
        dyb = dy[None] if squeeze else dy
        dw = db = None
        if need_params:
            db = dyb.sum(axis=(0, 1, 2))
            if k == 1:
                dw = np.tensordot(win, dyb, axes=([0, 1, 2], [0, 1, 2]))[None, None]
            else:
                dw = np.tensordot(win, dyb, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        dxp = np.zeros_like(xp)
        if k == 1:
            dxp[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, :] = dyb @ w[0, 0].T
        else:
            dcols = np.tensordot(dyb, w, axes=([3], [3]))  # (N, Ho, Wo, k, k, Cin)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p : p + h, p : p + wd, :] if p else dxp
        return (dx[0] if squeeze else dx), dw, db

    return (y[0] if squeeze else y), pullback


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    return conv2d_vjp(x, w, b, stride, padding)[0]


def maxpool2d_ceil_vjp(x, window: int = 2, stride: int = 2):
    """Max pooling with ceil-mode output size; cells past the border are ignored."""
    if window != stride:
        raise ShapeError("only non-overlapping pooling (window == stride) is supported")
    xb, squeeze = _as_batch(x)
    n, h, w, c = xb.shape
    s = stride
    ho, wo = -(-h // s), -(-w // s)
    if ho * s != h or wo * s != w:
        xp = np.full((n, ho * s, wo * s, c), -np.inf, dtype=xb.dtype)
        xp[:, :h, :w, :] = xb
    else:
        xp = xb
    cells = xp.reshape(n, ho, s, wo, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, s * s)
    idx = cells.argmax(axis=-1)[..., None]
    y = np.take_along_axis(cells, idx, axis=-1)[..., 0]

    def pullback(dy):
        dyb = dy[None] if squeeze else dy
        g = np.zeros(cells.shape, dtype=dyb.dtype)
        np.put_along_axis(g, idx, dyb[..., None], axis=-1)
        g = g.reshape(n, ho, wo, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * s, wo * s, c)
        dx = g[:, :h, :w, :]
        return dx[0] if squeeze else dx

    return (y[0] if squeeze else y), pullback


def maxpool2d_ceil(x, window: int = 2, stride: int = 2):
    return maxpool2d_ceil_vjp(x, window, stride)[0]


# --------------------------------------------------------------------------
# dense ops


def linear_vjp(x, w, b):
    """``x @ w + b`` for ``x`` of shape (n,) or (N, n) and ``w`` of shape (n, m)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input length {x.shape[-1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)")
    y = x @ w + b

    def pullback(dy, need_params: bool = True):
        dx = dy @ w.T
        if not need_params:
            return dx, None, None
        if x.ndim == 1:
            return dx, np.outer(x, dy), dy.copy()
        return dx, x.T @ dy, dy.sum(axis=0)

    return y, pullback


def linear(x, w, b):
    return linear_vjp(x, w, b)[0]


def batchnorm2d_vjp(x, scale, shift, mode: str = "train", running_mean=None, running_var=None,
                    eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel normalization over (N, H, W).

    In ``train`` mode the running statistics (if given) are updated in place.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects (N, H, W, C), got {x.shape}")
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError("scale/shift must have one entry per channel")
    if mode == "train":
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ShapeError("eval mode needs running statistics")
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * scale + shift

    def pullback(dy, need_params: bool = True):
        dscale = (dy * xhat).sum(axis=(0, 1, 2)) if need_params else None
        dshift = dy.sum(axis=(0, 1, 2)) if need_params else None
        dxhat = dy * scale
        if mode == "eval":
            return dxhat * inv_std, dscale, dshift
        m = x.shape[0] * x.shape[1] * x.shape[2]
        dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
        return dx, dscale, dshift

    return y.astype(x.dtype, copy=False), pullback


def batchnorm2d(x, scale, shift, mode: str = "train", running_mean=None, running_var=None, eps: float = BN_EPS):
    return batchnorm2d_vjp(x, scale, shift, mode, running_mean, running_var, eps)[0]


def relu_vjp(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), lambda dy: dy * mask


def sigmoid_vjp(x):
    y = expit(x)
    return y, lambda dy: dy * y * (1.0 - y)


def pointwise_vjp(x, kind: str):
    if kind == "relu":
        return relu_vjp(x)
    if kind == "sigmoid":
        return sigmoid_vjp(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def pointwise(x, kind: str):
    x = np.asarray(x)
    return pointwise_vjp(x if x.dtype.kind == "f" else x.astype(np.float64), kind)[0]


def mfm_vjp(x):
    """Max-Feature-Map over the last axis: max of first half vs second half."""
    c2 = x.shape[-1]
    if c2 % 2:
        raise ShapeError(f"MFM needs an even channel count, got {c2}")
    c = c2 // 2
    a, b = x[..., :c], x[..., c:]
    first = a >= b
    y = np.where(first, a, b)

    def pullback(dy):
        return np.concatenate([dy * first, dy * ~first], axis=-1)

    return y, pullback


def mfm(x):
    return mfm_vjp(x)[0]


def concat_channels_vjp(inputs: Sequence[np.ndarray]):
    if not inputs:
        raise ShapeError("nothing to concatenate")
    lead = inputs[0].shape[:-1]
    for t in inputs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"spatial mismatch: {t.shape[:-1]} vs {lead}")
    sizes = [t.shape[-1] for t in inputs]
    y = np.concatenate(inputs, axis=-1)
    cuts = np.cumsum(sizes)[:-1]

    def pullback(dy):
        return np.split(dy, cuts, axis=-1)

    return y, pullback


def concat_channels(inputs: Sequence[np.ndarray]):
    return concat_channels_vjp(inputs)[0]


# --------------------------------------------------------------------------
# losses


def bce_loss_vjp(prediction, label):
    """Mean binary cross-entropy on probabilities; supports soft labels.

    Predictions are clamped to [1e-7, 1 - 1e-7]; the pullback is the
    derivative of the unclamped formula evaluated at the clamped value.
    """
    p = np.clip(np.asarray(prediction, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), p.shape)
    n = max(p.size, 1)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))

    dtype = np.result_type(np.asarray(prediction).dtype, np.float32)

    def pullback(dloss: float = 1.0):
        g = dloss * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        return g.astype(dtype)

    return loss, pullback


def bce_loss(prediction, label) -> float:
    return bce_loss_vjp(prediction, label)[0]


def bce_with_logits_vjp(logits, label):
    """Mean BCE of ``sigmoid(logits)`` without the saturation of probabilities."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), z.shape)
    n = max(z.size, 1)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))

    def pullback(dloss: float = 1.0):
        return (dloss * (expit(z) - y) / n).astype(np.asarray(logits).dtype)

    return loss, pullback


# --------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheck:
    passed: bool
    max_rel_error: float
    tolerance: float


def finite_difference_check(fn: Callable[[], float], arrays: Sequence[np.ndarray],
                            analytic: Sequence[np.ndarray], tolerance: float = 1e-4,
                            h: float | None = None, max_coords: int | None = None,
                            seed: int = 0) -> GradCheck:
    """Compare analytic gradients against central differences.

    ``fn`` is a deterministic scalar function that reads ``arrays`` (which are
    perturbed in place and restored). The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. ``max_coords`` samples a
    subset of coordinates per array for large tensors.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        if grad.shape != arr.shape:
            raise ShapeError(f"analytic gradient shape {grad.shape} != {arr.shape}")
        step = h if h is not None else (1e-6 if arr.dtype == np.float64 else 1e-4)
        if not arr.flags.c_contiguous:
            raise ValueError("arrays must be C-contiguous to be perturbed in place")
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn()
            flat[i] = orig - step
            fm = fn()
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            err = abs(float(gflat[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return GradCheck(worst < tolerance, worst, tolerance)
