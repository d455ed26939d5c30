"""Dense primal-dual interior-point solver for small convex QPs.

Solves::

    minimize    1/2 x'Hx + c'x
    subject to  Gx <= h
                Ax  = b

with Mehrotra's predictor-corrector.  Problem sizes here are a few hundred
variables, so the reduced KKT system is formed densely and factored directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import warnings

import numpy as np
import scipy.linalg


class SolverFailure(RuntimeError):
    def __init__(self, message: str, kkt_residual: float = np.inf):
        self.kkt_residual = kkt_residual
        super().__init__(message)


@dataclass
class QPResult:
    x: np.ndarray
    z: np.ndarray  # inequality multipliers
    y: np.ndarray  # equality multipliers
    s: np.ndarray  # inequality slacks
    iterations: int
    kkt_residual: float
    objective: float


def kkt_residual(H, c, G, h, A, b, x, z, y) -> float:
    """Scaled max of stationarity, primal infeasibility and complementarity."""
    rd = H @ x + c + G.T @ z + A.T @ y
    scale_d = 1.0 + max(np.max(np.abs(c), initial=0.0), np.max(np.abs(H @ x), initial=0.0))
    viol = np.maximum(G @ x - h, 0.0)
    scale_p = 1.0 + np.max(np.abs(h), initial=0.0)
    re = A @ x - b
    slack = np.maximum(h - G @ x, 0.0)
    comp = np.abs(np.maximum(z, 0.0) * slack)
    dual_neg = np.maximum(-z, 0.0)
    return float(
        max(
            np.max(np.abs(rd), initial=0.0) / scale_d,
            np.max(viol, initial=0.0) / scale_p,
            np.max(np.abs(re), initial=0.0) / (1.0 + np.max(np.abs(b), initial=0.0)),
            np.max(comp, initial=0.0) / scale_d,
            np.max(dual_neg, initial=0.0) / scale_d,
        )
    )


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def solve_qp(H, c, G, h, A=None, b=None, tol=1e-10, max_iter=100, gram=None) -> QPResult:
    """Minimize ``1/2 x'Hx + c'x`` subject to ``Gx <= h`` and ``Ax = b``.

    ``gram(w)``, if given, must return ``G' diag(w) G``; structured problems
    use it to skip the dense product.  The best iterate seen is returned
    together with its KKT residual; callers decide whether that is good enough.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    G = np.asarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    n = c.size
    if A is None:
        A = np.zeros((0, n))
        b = np.zeros(0)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, p = G.shape[0], A.shape[0]

    # objective scaling keeps tolerances meaningful across unit systems
    oscale = max(1.0, np.max(np.abs(c), initial=0.0), np.max(np.abs(H), initial=0.0))
    Hs, cs = H / oscale, c / oscale

    x = np.zeros(n)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m)
    y = np.zeros(p)

    def residuals(x, s, z, y):
        rd = Hs @ x + cs + G.T @ z + A.T @ y
        rp = G @ x + s - h
        re = A @ x - b
        return rd, rp, re

    def factor():
        w = z / s
        K = Hs + (gram(w) if gram is not None else G.T @ (w[:, None] * G))
        if not p:
            # positive definite without equalities; LU is the fallback when round-off says otherwise
            try:
                chol = scipy.linalg.cho_factor(K, check_finite=False)
                return w, lambda r: scipy.linalg.cho_solve(chol, r, check_finite=False)
            except np.linalg.LinAlgError:
                pass
        else:
            K = np.block([[K, A.T], [A, np.zeros((p, p))]])
        lu = scipy.linalg.lu_factor(K, check_finite=False)
        return w, lambda r: scipy.linalg.lu_solve(lu, r, check_finite=False)

    def newton(w, solve, rd, rp, re, rc):
        rhs = -rd - G.T @ (w * rp - rc / s)
        sol = solve(np.concatenate([rhs, -re]))
        dx, dy = sol[:n], sol[n:]
        dz = w * (G @ dx + rp) - rc / s
        ds = -(rc + s * dz) / z
        return dx, ds, dz, dy

    def merit(x, s, z, y):
        rd, rp, re = residuals(x, s, z, y)
        gap = float(s @ z) / m if m else 0.0
        return max(
            np.max(np.abs(rd), initial=0.0) / (1.0 + np.max(np.abs(cs), initial=0.0)),
            np.max(np.abs(rp), initial=0.0) / (1.0 + np.max(np.abs(h), initial=0.0)),
            np.max(np.abs(re), initial=0.0) / (1.0 + np.max(np.abs(b), initial=0.0)),
            gap,
        )

    best = (np.inf, x.copy(), s.copy(), z.copy(), y.copy())
    it = 0
    for it in range(1, max_iter + 1):
        rd, rp, re = residuals(x, s, z, y)
        mu = float(s @ z) / m if m else 0.0
        score = merit(x, s, z, y)
        if score < best[0]:
            best = (score, x.copy(), s.copy(), z.copy(), y.copy())
        if score < tol:
            break
        # iterates that lose accuracy after near-convergence are discarded
        if score > 1e3 * best[0] and best[0] < 1e-6:
            break
        try:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                w, solve = factor()
                dx, ds, dz, dy = newton(w, solve, rd, rp, re, s * z)
                a_aff = min(_step_to_boundary(s, ds), _step_to_boundary(z, dz))
                mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m if m else 0.0
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                rc = s * z + ds * dz - sigma * mu
                dx, ds, dz, dy = newton(w, solve, rd, rp, re, rc)
        except (np.linalg.LinAlgError, ValueError):
            break
        if not np.all(np.isfinite(dx)):
            break
        alpha = min(1.0, 0.99 * min(_step_to_boundary(s, ds), _step_to_boundary(z, dz)))
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        y = y + alpha * dy
    score = merit(x, s, z, y)
    if score > best[0]:
        _, x, s, z, y = best
    z_out, y_out = z * oscale, y * oscale
    kkt = kkt_residual(H, c, G, h, A, b, x, z_out, y_out)
    obj = float(0.5 * x @ H @ x + c @ x)
    return QPResult(x, z_out, y_out, s, it, kkt, obj)
