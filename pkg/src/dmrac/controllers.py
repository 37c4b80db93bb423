"""Control laws: linear baseline, PID, and the fast adaptive layer.

The fast adaptive layer is shared by shallow MRAC (RBF feature bank) and
DMRAC (feature-network snapshot); only the feature source differs.  Its
weight update is the projection-bounded Lyapunov law, discretized with a
forward Euler step at the fast-loop rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class LinearGains:
    """Full-state feedback K and feedforward K_r of the baseline controller."""

    k: np.ndarray  # (m, n)
    k_r: np.ndarray  # (m, r)

    def __post_init__(self):
        object.__setattr__(self, "k", np.asarray(self.k, dtype=float))
        object.__setattr__(self, "k_r", np.asarray(self.k_r, dtype=float))
        if not (np.isfinite(self.k).all() and np.isfinite(self.k_r).all()):
            raise ValueError("gains must be finite")


def baseline_control(gains: LinearGains, x, r) -> np.ndarray:
    """``u = -K x + K_r r`` so that the closed loop realizes (A_rm, B_rm)."""
    return -(gains.k @ np.asarray(x, dtype=float)) + gains.k_r @ np.asarray(
        r, dtype=float
    )


def adaptive_term(w, phi) -> np.ndarray:
    """``nu_ad = W' phi`` with W of shape (k, m)."""
    return np.asarray(w, dtype=float).T @ np.asarray(phi, dtype=float)


def rbf_features(centers, widths, x, include_bias: bool = False) -> np.ndarray:
    """Gaussian RBF bank ``phi_i = exp(-||x - c_i||^2 / (2 w_i^2))``.

    Optionally appends a constant 1.0 element so a bank can represent pure
    offsets away from every center.
    """
    centers = np.asarray(centers, dtype=float)
    widths = np.asarray(widths, dtype=float)
    if np.any(widths <= 0.0):
        raise ValueError("RBF widths must be positive")
    d2 = np.sum((centers - np.asarray(x, dtype=float)) ** 2, axis=1)
    phi = np.exp(-d2 / (2.0 * widths**2))
    if include_bias:
        phi = np.concatenate([phi, [1.0]])
    return phi


@dataclass
class PidState:
    """Per-axis PID with a clamped integrator; the unmodeled baseline."""

    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    clamp: float = 0.2
    integral: np.ndarray = None
    prev_err: np.ndarray = None

    def __post_init__(self):
        self.kp = np.asarray(self.kp, dtype=float)
        self.ki = np.asarray(self.ki, dtype=float)
        self.kd = np.asarray(self.kd, dtype=float)
        if self.integral is None:
            self.integral = np.zeros_like(self.kp)


def pid_control(pid: PidState, err, dt: float) -> np.ndarray:
    """``u = kp e + ki int(e) + kd de/dt`` with backward-difference derivative."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    err = np.asarray(err, dtype=float)
    pid.integral = np.clip(pid.integral + err * dt, -pid.clamp, pid.clamp)
    deriv = np.zeros_like(err) if pid.prev_err is None else (err - pid.prev_err) / dt
    pid.prev_err = err.copy()
    return pid.kp * err + pid.ki * pid.integral + pid.kd * deriv


@dataclass(frozen=True)
class RbfBank:
    """Shallow-MRAC feature source."""

    centers: np.ndarray
    widths: np.ndarray
    include_bias: bool = False

    def eval(self, x) -> np.ndarray:
        return rbf_features(self.centers, self.widths, x, self.include_bias)

    @property
    def dim(self) -> int:
        return self.centers.shape[0] + (1 if self.include_bias else 0)


@dataclass(frozen=True)
class NetFeatures:
    """DMRAC feature source: a published inner-layer stack, tanh throughout."""

    weights: tuple
    biases: tuple

    def eval(self, x) -> np.ndarray:
        a = np.asarray(x, dtype=float)
        for w, b in zip(self.weights, self.biases):
            a = np.tanh(w @ a + b)
        return a

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass(frozen=True)
class FastAdaptState:
    """Everything the fast loop owns: W, its update law constants, features.

    ``b_proj`` is the input-channel factor of the raw update
    ``Y = phi e' P b_proj``.  Controllers are built with ``b_proj = -2 B``:
    the minus keeps the update descending for the ``e = x_rm - x`` error
    convention and the factor 2 makes the weight term of
    ``V = e'Pe + tr(W~' G^-1 W~)/2`` cancel exactly.
    """

    w: np.ndarray  # (k, m)
    gamma: np.ndarray  # (k, k) positive definite learning rate
    p: np.ndarray  # (n, n) Lyapunov solution
    b_proj: np.ndarray  # (n, m)
    w_bound: float = 50.0
    eps_proj: float = 0.1
    source: object = None  # RbfBank | NetFeatures
    version: int = 0
    stale_count: int = 0
    swap_count: int = 0

    def __post_init__(self):
        for name in ("w", "gamma", "p", "b_proj"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.w_bound <= 0.0 or self.eps_proj <= 0.0:
            raise ValueError("w_bound and eps_proj must be positive")


def make_fast_state(
    source,
    m: int,
    p,
    b_proj,
    gamma,
    w_bound: float = 50.0,
    eps_proj: float = 0.1,
    w0=None,
    version: int = 0,
) -> FastAdaptState:
    k = source.dim
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        gamma = float(gamma) * np.eye(k)
    w = np.zeros((k, m)) if w0 is None else np.asarray(w0, dtype=float).reshape(k, m)
    return FastAdaptState(
        w=w,
        gamma=gamma,
        p=np.asarray(p, dtype=float),
        b_proj=np.asarray(b_proj, dtype=float),
        w_bound=w_bound,
        eps_proj=eps_proj,
        source=source,
        version=version,
    )


def features_of(fast: FastAdaptState, x) -> np.ndarray:
    return fast.source.eval(x)


def proj_update(fast: FastAdaptState, phi, e, dt: float) -> FastAdaptState:
    """Euler step of ``dW/dt = Gamma proj(W, phi e' P b_proj)``.

    The projection passes the raw update through while ||W||_F < w_bound or
    the update points inward; otherwise the radial component is removed,
    scaled by the boundary-layer factor.  A hard renormalization backstop
    keeps the discrete iterates inside ``w_bound * (1 + eps_proj)`` exactly.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    phi = np.asarray(phi, dtype=float)
    e = np.asarray(e, dtype=float)
    y = np.outer(phi, (e @ fast.p) @ fast.b_proj)

    w = fast.w
    norm = float(np.linalg.norm(w))
    radial = float(np.sum(w * y))  # trace(W' Y)
    if norm < fast.w_bound or radial <= 0.0:
        update = y
    else:
        lam = min((norm - fast.w_bound) / (fast.w_bound * fast.eps_proj), 1.0)
        update = y - lam * (radial / (norm * norm)) * w

    w_next = w + dt * (fast.gamma @ update)
    cap = fast.w_bound * (1.0 + fast.eps_proj)
    next_norm = float(np.linalg.norm(w_next))
    if next_norm > cap:
        w_next = w_next * (cap / next_norm)
    return replace(fast, w=w_next)


def swap_features(fast: FastAdaptState, source, version: int) -> FastAdaptState:
    """Install a newer feature snapshot; W is retained unchanged.

    Stale versions (<= the installed one) are discarded and counted.
    """
    if version <= fast.version:
        return replace(fast, stale_count=fast.stale_count + 1)
    return replace(
        fast, source=source, version=int(version), swap_count=fast.swap_count + 1
    )


def total_control(
    gains: LinearGains,
    fast: FastAdaptState | None,
    pid: PidState | None,
    x,
    r,
    phi=None,
    dt: float | None = None,
    saturation=None,
) -> np.ndarray:
    """Combine baseline, adaptive, and PID modes into the applied input.

    PID mode replaces the whole law with the per-axis PID on the attitude
    error; MRAC/DMRAC modes subtract the adaptive term from the linear
    baseline.  With neither state present this is the pure baseline.
    """
    if fast is not None and pid is not None:
        raise ValueError("at most one of fast/pid may be active")
    r = np.asarray(r, dtype=float)
    if pid is not None:
        if dt is None:
            raise ValueError("pid mode needs dt")
        u = pid_control(pid, r - np.asarray(x, dtype=float)[: r.shape[0]], dt)
    else:
        u = baseline_control(gains, x, r)
        if fast is not None:
            if phi is None:
                phi = features_of(fast, x)
            u = u - adaptive_term(fast.w, phi)
    if saturation is not None:
        limit = np.asarray(saturation, dtype=float)
        u = np.clip(u, -limit, limit)
    return u
