"""Domain-gap losses on embedding batches: squared MMD, DIL and IDR.

Each ``*_vjp`` returns ``(loss, pullback)``; the pullback maps a scalar
cotangent to gradients with respect to its array inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import ShapeError, StageError

SOURCE, TARGET = 0, 1


@dataclass
class KernelSpec:
    kind: str = "rbf"
    bandwidth: float | str = "median"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise ValueError("rbf bandwidth must be positive")


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(s: np.ndarray, t: np.ndarray) -> float:
    """Median pairwise squared distance over the pooled sample (off-diagonal)."""
    z = np.concatenate([s, t])
    d = _sqdist(z, z)
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def mmd_squared_vjp(s, t, kernel: KernelSpec | None = None):
    """Biased (V-statistic) squared MMD between batches ``s`` (Ns, d) and ``t`` (Nt, d).

    The RBF kernel is ``exp(-||x - y||^2 / bw)`` with ``bw`` the median
    pairwise squared distance unless given. The bandwidth is treated as a
    constant when differentiating.
    """
    kernel = kernel or KernelSpec()
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise ShapeError("MMD needs non-empty batches")
    if s.shape[1] != t.shape[1]:
        raise ShapeError(f"dimension mismatch {s.shape[1]} vs {t.shape[1]}")
    ns, nt = len(s), len(t)
    if kernel.kind == "linear":
        kss, ktt, kst = s @ s.T, t @ t.T, s @ t.T
        bw = None
    else:
        bw = median_bandwidth(s, t) if kernel.bandwidth == "median" else float(kernel.bandwidth)
        kss = np.exp(-_sqdist(s, s) / bw)
        ktt = np.exp(-_sqdist(t, t) / bw)
        kst = np.exp(-_sqdist(s, t) / bw)
    loss = kss.sum() / ns**2 + ktt.sum() / nt**2 - 2.0 * kst.sum() / (ns * nt)

    def pullback(dloss: float = 1.0):
        # dL/dK for each block, then chain through the kernel
        a, b, c = dloss / ns**2, dloss / nt**2, -2.0 * dloss / (ns * nt)
        if kernel.kind == "linear":
            # linear kernel: loss = |mean(s) - mean(t)|^2
            diff = s.mean(0) - t.mean(0)
            return (np.tile(2.0 * dloss * diff / ns, (ns, 1)),
                    np.tile(-2.0 * dloss * diff / nt, (nt, 1)))
        # d/dx exp(-|x-y|^2/bw) = -2/bw * k * (x - y)
        def block(k, x, y, w):
            return (-2.0 / bw) * w * (k.sum(1)[:, None] * x - k @ y)

        ds = 2 * block(kss, s, s, a) + block(kst, s, t, c)
        dt = 2 * block(ktt, t, t, b) + block(kst.T, t, s, c)
        return ds, dt

    return float(loss), pullback


def mmd_squared(s, t, kernel: KernelSpec | None = None) -> float:
    return mmd_squared_vjp(s, t, kernel)[0]


def dil_loss_vjp(domain_probs):
    """Soft-label BCE against the constant 0.5 target."""
    return core.bce_loss_vjp(domain_probs, 0.5)


def dil_loss(domain_probs) -> float:
    return dil_loss_vjp(domain_probs)[0]


def idr_labels(true_domains, stage: str) -> np.ndarray:
    d = np.asarray(true_domains)
    if stage == "classify":
        return d.astype(np.float64)
    if stage == "adapt":
        if np.any(d != SOURCE):
            raise StageError("IDR adaptation acts on source-domain samples only")
        return np.ones(d.shape, dtype=np.float64)
    raise ValueError(f"unknown IDR stage {stage!r}")


def idr_loss_vjp(domain_probs, true_domains, stage: str):
    """BCE of target-domain probabilities against true (classify) or inverted (adapt) labels."""
    return core.bce_loss_vjp(domain_probs, idr_labels(true_domains, stage))


def idr_loss(domain_probs, true_domains, stage: str) -> float:
    return idr_loss_vjp(domain_probs, true_domains, stage)[0]
