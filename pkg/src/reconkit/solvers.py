"""Classical linear solvers: conjugate gradient, the proximal input
estimate, and a ridge-regularized pseudo-inverse.

``conjugate_gradient`` works on plain numpy arrays;
``conjugate_gradient_graph`` runs the same recursion on autodiff tensors so
gradients flow through the unrolled iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .operators import OperatorHandle

__all__ = [
    "CGReport",
    "conjugate_gradient",
    "conjugate_gradient_graph",
    "prox_estimate",
    "prox_estimate_graph",
    "lambda_schedule",
    "pseudo_inverse_apply",
]


@dataclass
class CGReport:
    iterations: int = 0
    residual_norm: float = 0.0
    converged: bool = False
    # best-so-far residual norm after each iteration (monotone by
    # construction; raw CG 2-norm residuals may oscillate transiently)
    residual_history: list = field(default_factory=list)


def conjugate_gradient(spd_apply, rhs: np.ndarray, max_iters: int = 100, tol: float = 1e-10):
    """Solve M x = rhs for symmetric positive (semi)definite M, zero
    initial guess.  Returns (x, CGReport)."""
    rhs = np.asarray(rhs, dtype=np.float64)
    b_norm = np.linalg.norm(rhs)
    report = CGReport()
    if b_norm == 0:
        report.converged = True
        return np.zeros_like(rhs), report
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = np.vdot(r, r)
    best = np.sqrt(rs)
    for it in range(max_iters):
        mp = spd_apply(p)
        denom = np.vdot(p, mp)
        if denom <= 0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * mp
        rs_new = np.vdot(r, r)
        best = min(best, np.sqrt(rs_new))
        report.iterations = it + 1
        report.residual_history.append(float(best))
        if np.sqrt(rs_new) <= tol * b_norm:
            report.converged = True
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    report.residual_norm = float(np.linalg.norm(rhs - spd_apply(x)))
    return x, report


def conjugate_gradient_graph(spd_apply, rhs: "T.Tensor", max_iters: int = 10, tol: float = 1e-6):
    """CG unrolled on the autodiff tape.

    ``spd_apply`` maps Tensor -> Tensor and may itself carry trainable
    scalars (e.g. the prox regularization weight); gradients propagate
    through every iteration.
    """
    b_norm = float(np.linalg.norm(rhs.data))
    if b_norm == 0:
        return T.constant(np.zeros_like(rhs.data))
    x = T.constant(np.zeros_like(rhs.data))
    r = rhs
    p = r
    rs = T.dot(r, r)
    for _ in range(max_iters):
        if float(np.sqrt(rs.item())) <= tol * b_norm:
            break
        mp = spd_apply(p)
        denom = T.dot(p, mp)
        if denom.item() <= 0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * mp
        rs_new = T.dot(r, r)
        if rs_new.item() <= 0:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def lambda_schedule(sigma: float, eta, y) -> float:
    """lambda = sigma * eta / ||y||_1 (zero when the measurement is empty)."""
    y = np.asarray(y, dtype=np.float64)
    l1 = float(np.abs(y).sum())
    if l1 == 0:
        return 0.0
    eta_val = eta.item() if hasattr(eta, "item") else float(eta)
    return sigma * eta_val / l1


def prox_estimate(op: OperatorHandle, y: np.ndarray, lam: float,
                  cg_iters: int = 10, cg_tol: float = 1e-6) -> np.ndarray:
    """Data-fidelity prox of A^T y: solves (lam A^T A + I) u = (1 + lam) A^T y.

    lam = 0 short-circuits to A^T y.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    aty = op.adjoint(y)
    if lam == 0:
        return aty

    def system(u):
        return lam * op.normal(u) + u

    u, _ = conjugate_gradient(system, (1.0 + lam) * aty, max_iters=cg_iters, tol=cg_tol)
    return u


def prox_estimate_graph(op: OperatorHandle, aty: "T.Tensor", lam: "T.Tensor",
                        cg_iters: int = 10, cg_tol: float = 1e-6) -> "T.Tensor":
    """Differentiable prox estimate on 4-D (1, C, H, W) tensors.

    ``aty`` is A^T y already in the graph; ``lam`` is a scalar tensor so
    gradients reach the learnable SNR weight through the unrolled solver.
    """
    if lam.item() == 0:
        return aty

    def normal4(arr):
        return op.normal(arr[0])[None]

    def system(u):
        return lam * T.apply_linear(u, normal4, normal4) + u

    rhs = (lam + T.constant(1.0)) * aty
    return conjugate_gradient_graph(system, rhs, max_iters=cg_iters, tol=cg_tol)


def pseudo_inverse_apply(op: OperatorHandle, y: np.ndarray, ridge: float = 1e-6,
                         cg_iters: int = 200, cg_tol: float = 1e-10) -> np.ndarray:
    """Tikhonov-regularized pseudo-inverse: (A^T A + ridge I) x = A^T y."""
    if ridge <= 0:
        raise ValueError("ridge must be positive")

    def system(x):
        return op.normal(x) + ridge * x

    x, _ = conjugate_gradient(system, op.adjoint(y), max_iters=cg_iters, tol=cg_tol)
    return x
