"""Small dense linear-algebra kernels shared by the rest of the package.

Every problem handled here is desk scale (state dimension below ~12,
feature matrices of a few hundred rows), so the implementations favour
exactness and obvious code over scalability.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A matrix counts as Hurwitz only if every eigenvalue real part is below this.
HURWITZ_TOL = -1e-9


class NotHurwitz(ValueError):
    """A matrix required to be Hurwitz has an eigenvalue real part >= 0."""


class SingularSystem(np.linalg.LinAlgError):
    """The vectorized Lyapunov system could not be solved reliably."""


class NonFiniteState(FloatingPointError):
    """An integration stage produced NaN or Inf."""


def spectral_abscissa(a) -> float:
    """Largest eigenvalue real part of a square matrix."""
    a = np.asarray(a, dtype=float)
    return float(np.max(np.linalg.eigvals(a).real))


def is_hurwitz(a, tol: float = HURWITZ_TOL) -> bool:
    return spectral_abscissa(a) < tol


def solve_lyapunov(a_rm, q) -> np.ndarray:
    """Solve ``A'P + P A + Q = 0`` for the symmetric positive definite P.

    Uses Kronecker vectorization, ``(A' (x) I + I (x) A') vec(P) = -vec(Q)``,
    with a dense LU solve.  That is O(n^6) but exact and entirely adequate
    for the system sizes simulated here.

    Raises NotHurwitz if ``a_rm`` has an eigenvalue with real part >= 0 and
    SingularSystem if the linear system cannot be solved to the residual
    tolerance ``1e-9 * ||Q||_F``.
    """
    a = np.asarray(a_rm, dtype=float)
    q = np.asarray(q, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"a_rm must be square, got shape {a.shape}")
    if q.shape != a.shape:
        raise ValueError(f"q shape {q.shape} does not match a_rm {a.shape}")
    if not (np.isfinite(a).all() and np.isfinite(q).all()):
        raise ValueError("a_rm and q must be finite")
    qnorm = np.linalg.norm(q)
    if np.linalg.norm(q - q.T) > 1e-9 * max(qnorm, 1.0):
        raise ValueError("q must be symmetric")
    if np.min(np.linalg.eigvalsh(q)) <= 0.0:
        raise ValueError("q must be positive definite")
    if not is_hurwitz(a):
        raise NotHurwitz(
            f"max eigenvalue real part {spectral_abscissa(a):.3e} >= {HURWITZ_TOL:.0e}"
        )

    n = a.shape[0]
    eye = np.eye(n)
    system = np.kron(a.T, eye) + np.kron(eye, a.T)
    try:
        vec_p = np.linalg.solve(system, -q.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    p = vec_p.reshape(n, n)
    p = 0.5 * (p + p.T)

    residual = np.linalg.norm(a.T @ p + p @ a + q)
    if residual > 1e-9 * qnorm:
        raise SingularSystem(
            f"Lyapunov residual {residual:.3e} exceeds 1e-9*||Q||_F ({1e-9 * qnorm:.3e})"
        )
    if np.min(np.linalg.eigvalsh(p)) <= 0.0:
        raise SingularSystem("computed P is not positive definite")
    return p


def rk4_step(f, x, t: float, dt: float):
    """One classical 4th-order Runge-Kutta step of ``dx/dt = f(t, x)``.

    Raises NonFiniteState if any stage evaluation produces NaN/Inf, which
    the harness treats as a crash/divergence signal.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)

    def stage(ti, xi):
        k = np.asarray(f(ti, xi), dtype=float)
        if not np.isfinite(k).all():
            raise NonFiniteState(f"vector field non-finite at t={ti}")
        return k

    k1 = stage(t, x)
    k2 = stage(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = stage(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = stage(t + dt, x + dt * k3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(x_next).all():
        raise NonFiniteState("state non-finite after RK4 update")
    return x_next


def min_singular_value(m) -> float:
    """Smallest singular value of a p x k matrix (0 for a zero/rank-deficient one)."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"need a p x k matrix with p,k >= 1, got shape {m.shape}")
    return float(np.linalg.svd(m, compute_uv=False)[-1])


@dataclass(frozen=True)
class PcaResult:
    projected: np.ndarray  # (n_points, n_components)
    ratios: np.ndarray  # explained variance ratios, non-increasing, sum <= 1
    degenerate: bool  # True when covariance rank < requested dimension


def pca_project(points, d: int) -> PcaResult:
    """Center ``points`` and project them on the top-``d`` principal directions.

    When the covariance rank is below ``d`` the available components are
    returned and the result is flagged degenerate.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array (n_points, k)")
    n, k = x.shape
    if d < 1 or d > k:
        raise ValueError(f"need 1 <= d <= {k}, got {d}")
    if n < d + 1:
        raise ValueError(f"need at least d+1={d + 1} points, got {n}")

    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, k) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    n_comp = min(d, rank)

    var = s**2
    total = var.sum()
    ratios = var[:n_comp] / total if total > 0.0 else np.zeros(n_comp)
    projected = centered @ vt[:n_comp].T
    return PcaResult(projected=projected, ratios=ratios, degenerate=rank < d)
