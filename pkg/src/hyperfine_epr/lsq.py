"""Damped least squares (Levenberg-Marquardt) shared by the line-shape and Hamiltonian fits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConvergenceError(RuntimeError):
    """The iteration budget ran out; carries the last iterate and its residual."""

    def __init__(self, message, x=None, cost=None, iterations=None):
        super().__init__(message)
        self.x = x
        self.cost = cost
        self.iterations = iterations


class RankDeficientError(np.linalg.LinAlgError):
    """The Jacobian has (numerically) lost rank; ``null_direction`` spans the unresolved combination."""

    def __init__(self, message, null_direction=None, singular_values=None, names=None):
        super().__init__(message)
        self.null_direction = null_direction
        self.singular_values = singular_values
        self.names = names


@dataclass
class LSQResult:
    x: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    cost: float  # sum of squared residuals
    iterations: int
    converged: bool
    reason: str
    cost_history: list = field(default_factory=list)

    def covariance(self, dof=None) -> np.ndarray:
        """Parameter covariance scaled by the reduced chi-square."""
        n, p = self.jacobian.shape
        dof = max(n - p, 1) if dof is None else dof
        jtj = self.jacobian.T @ self.jacobian
        return np.linalg.pinv(jtj) * (self.cost / dof)


def finite_difference_jacobian(fun, x, scale, rel_step=1e-6, f0=None):
    """Central differences with step ``rel_step * max(|x_k|, scale_k)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(len(x)):
        h = rel_step * max(abs(x[k]), scale[k])
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h))
    return np.column_stack(cols)


def _check_rank(jac, scale, names, rtol):
    js = jac * scale[None, :]
    if js.shape[0] < js.shape[1]:
        # Fewer residuals than parameters: rank is at most the row count.
        _, s, vt = np.linalg.svd(js, full_matrices=True)
        s = np.concatenate([s, np.zeros(js.shape[1] - len(s))])
    else:
        _, s, vt = np.linalg.svd(js, full_matrices=False)
    smax = s.max() if s.size else 0.0
    if smax == 0.0 or s.min() <= rtol * smax:
        null = vt[-1] * scale
        null = null / np.linalg.norm(null)
        null = null * np.sign(null[np.argmax(np.abs(null))])
        combo = ", ".join(
            f"{c:+.3f}*{n}" for c, n in zip(null, names) if abs(c) > 1e-3
        )
        raise RankDeficientError(
            f"Jacobian is rank deficient (singular values {np.array2string(s, precision=3)}); "
            f"unresolved direction: {combo}",
            null_direction=null,
            singular_values=s,
            names=list(names),
        )


def levenberg_marquardt(
    fun,
    x0,
    jac=None,
    x_scale=None,
    xtol=1e-8,
    ftol=0.0,
    max_iter=200,
    fd_rel_step=1e-6,
    damping=1e-3,
    rank_rtol=1e-10,
    names=None,
):
    """Minimise ``sum(fun(x)**2)``.

    Converges when every component of the accepted step satisfies
    ``|dx_k| < xtol * (|x_k| + x_scale_k)``, when the relative decrease of the
    cost falls below ``ftol``, or when the residual vanishes.  Rejected steps
    raise the damping, so the cost never increases between accepted iterates.

    ``jac(x)`` may be supplied; otherwise central differences are used.
    """
    x = np.array(x0, dtype=float)
    p = len(x)
    scale = np.ones(p) if x_scale is None else np.asarray(x_scale, dtype=float)
    names = names or [f"x{k}" for k in range(p)]
    jac = jac or (lambda xx: finite_difference_jacobian(fun, xx, scale, fd_rel_step))

    r = np.asarray(fun(x), dtype=float)
    cost = float(r @ r)
    history = [cost]
    lam = damping
    reason = ""
    J = None
    for it in range(1, max_iter + 1):
        J = np.asarray(jac(x), dtype=float)
        _check_rank(J, scale, names, rank_rtol)
        if cost == 0.0:
            return LSQResult(x, r, J, cost, it - 1, True, "zero residual", history)
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = np.max(diag) * 1e-12 or 1.0
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            small = np.all(np.abs(step) < xtol * (np.abs(x) + scale))
            x_new = x + step
            r_new = np.asarray(fun(x_new), dtype=float)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                rel_drop = (cost - cost_new) / cost if cost > 0 else 0.0
                x, r, cost = x_new, r_new, cost_new
                history.append(cost)
                lam = max(lam / 10, 1e-12)
                accepted = True
                if small:
                    reason = "relative step below xtol"
                elif cost == 0.0:
                    reason = "zero residual"
                elif ftol > 0 and rel_drop < ftol:
                    reason = "relative cost decrease below ftol"
                break
            if small:
                # Even a negligible step fails to lower the cost: at the floor.
                reason = "relative step below xtol"
                break
            lam *= 10
        if reason:
            J = np.asarray(jac(x), dtype=float)
            return LSQResult(x, r, J, cost, it, True, reason, history)
        if not accepted:
            J = np.asarray(jac(x), dtype=float)
            return LSQResult(x, r, J, cost, it, True, "damping saturated at a minimum", history)
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (cost {cost:.6g})",
        x=x,
        cost=cost,
        iterations=max_iter,
    )
