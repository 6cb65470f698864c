"""Second-order sensitivity of the loss to weight perturbations.

``omega`` scores a perturbation by dw^T H dw, where H dw comes from a central
difference of first-order gradients, so the Hessian is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .nervlite import Checkpoint, full_loss_and_grad
from .tensor import NonFiniteError

LossAt = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(d)):
            raise ValueError("perturbation has non-finite entries")
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True)
class SensitivityReport:
    config: Tuple[int, ...]
    omega: float
    grad_norm: float
    eps: float
    size_bits: int = 0
    first_order: float = 0.0
    omega_w0: Optional[float] = None


def default_eps(w: np.ndarray, d: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(w)))) / (float(np.max(np.abs(d))) + 1e-12)


def hvp(loss_at: LossAt, w, d, eps: Optional[float] = None) -> np.ndarray:
    """H(w) @ d by central difference of gradients along d."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.shape != w.shape:
        raise ValueError(f"direction has {d.size} entries, w has {w.size}")
    if not np.any(d):
        return np.zeros_like(w)
    eps = default_eps(w, d) if eps is None else float(eps)
    if not eps > 0:
        raise ValueError("eps must be positive")
    gp = np.asarray(loss_at(w + eps * d)[1], dtype=np.float64).reshape(-1)
    gm = np.asarray(loss_at(w - eps * d)[1], dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NonFiniteError("non-finite gradient while probing the Hessian")
    return (gp - gm) / (2.0 * eps)


def omega(loss_at: LossAt, w, delta, eps: Optional[float] = None) -> float:
    d = delta.delta if isinstance(delta, Perturbation) else np.asarray(delta, dtype=np.float64).reshape(-1)
    if not np.any(d):
        return 0.0
    return float(d @ hvp(loss_at, w, d, eps))


def omega_quadratic_oracle(H, delta) -> float:
    H = np.asarray(H, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"Hessian must be square, got {H.shape}")
    if H.shape[0] != d.size:
        raise ValueError("Hessian and perturbation sizes differ")
    return float(d @ H @ d)


def fim_diag_proxy(output_grads, delta_z) -> float:
    g = np.asarray(output_grads, dtype=np.float64)
    dz = np.asarray(delta_z, dtype=np.float64)
    if g.shape != dz.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {dz.shape}")
    return float(np.sum(g * g * dz * dz))


def explicit_hessian(loss_at: LossAt, w, eps: float = 1e-5) -> np.ndarray:
    """Dense Hessian, column by column from gradient central differences (test oracle)."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    n = w.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        gp = np.asarray(loss_at(w + e)[1]).reshape(-1)
        gm = np.asarray(loss_at(w - e)[1]).reshape(-1)
        H[:, j] = (gp - gm) / (2 * eps)
    return 0.5 * (H + H.T)


def clip_loss(ckpt: Checkpoint, target: np.ndarray) -> LossAt:
    """``loss_at`` for the full-clip reconstruction MSE of ``ckpt``'s architecture."""
    spec = ckpt.spec
    order = ckpt.layer_order

    def loss_at(wflat: np.ndarray):
        loss, grads = full_loss_and_grad(spec, ckpt.unflatten(wflat), target)
        return loss, np.concatenate([grads[n].reshape(-1) for n in order])

    return loss_at
