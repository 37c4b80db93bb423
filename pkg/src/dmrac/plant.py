"""Uncertain plant, reference model, reference commands, and disturbances.

The plant is the linear attitude model ``dx/dt = A x + B (u + delta(x))``
with the matched uncertainty ``delta`` realized by a composable library of
disturbance terms (synthetic RBF field, wind bias, flapping-cloth torque,
rotor fault).  Everything steps with fixed-dt RK4 and a disturbance sample
held constant across each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .controllers import LinearGains, rbf_features
from .linalg import NotHurwitz, is_hurwitz, rk4_step, spectral_abscissa

GRAVITY = 9.81

# Unit wind torque profile (N*m); the low/med/high levels scale this by 1/2/4.
WIND_UNIT_BIAS = np.array([6.0e-4, -4.5e-4, 2.5e-4])
WIND_UNIT_GAIN = 2.0e-4
WIND_LEVEL_SCALE = {"low": 1.0, "med": 2.0, "high": 4.0}

# Fixed state-coupling map used by the wind and cloth terms: bounded and
# Lipschitz on the whole state box.
_COUPLING = np.array(
    [
        [1.0, 0.4, 0.0, 0.15, 0.0, 0.0],
        [0.4, 1.0, 0.0, 0.0, 0.15, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0, 0.15],
    ]
)


def _state_coupling(x: np.ndarray) -> np.ndarray:
    return np.tanh(_COUPLING @ x)


def controllability_rank(a, b) -> int:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks)))


@dataclass(frozen=True)
class PlantModel:
    a: np.ndarray  # (n, n)
    b: np.ndarray  # (n, m)
    state_low: np.ndarray  # compact operating box, per-dimension minimum
    state_high: np.ndarray
    name: str = ""

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("plant matrices must be finite")
        n = a.shape[0]
        if a.shape != (n, n) or b.shape[0] != n:
            raise ValueError(f"inconsistent plant shapes {a.shape}, {b.shape}")
        if np.linalg.matrix_rank(b) != b.shape[1]:
            raise ValueError("B must have full column rank")
        if controllability_rank(a, b) != n:
            raise ValueError("(A, B) must be controllable")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "state_low", np.asarray(self.state_low, dtype=float))
        object.__setattr__(self, "state_high", np.asarray(self.state_high, dtype=float))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class RefModel:
    a_rm: np.ndarray  # (n, n), Hurwitz
    b_rm: np.ndarray  # (n, r)

    def __post_init__(self):
        a_rm = np.asarray(self.a_rm, dtype=float)
        b_rm = np.asarray(self.b_rm, dtype=float)
        if not is_hurwitz(a_rm):
            raise NotHurwitz(
                f"reference model max Re(eig) = {spectral_abscissa(a_rm):.3e}"
            )
        object.__setattr__(self, "a_rm", a_rm)
        object.__setattr__(self, "b_rm", b_rm)


# ---------------------------------------------------------------------------
# Disturbance library
# ---------------------------------------------------------------------------


class DisturbanceTerm:
    def eval(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def notify_control(self, u: np.ndarray) -> None:
        pass


@dataclass
class SyntheticRbf(DisturbanceTerm):
    """Ground-truth RBF uncertainty ``delta = W*' sigma(x)``."""

    weights: np.ndarray  # (k*, m)
    centers: np.ndarray  # (k*, n)
    widths: np.ndarray  # (k*,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.centers = np.asarray(self.centers, dtype=float)
        self.widths = np.asarray(self.widths, dtype=float)

    def eval(self, x, t):
        return self.weights.T @ rbf_features(self.centers, self.widths, x)


@dataclass
class WindBias(DisturbanceTerm):
    """Constant torque bias plus a state-coupled component, scaled by level."""

    level: str = "low"
    bias: np.ndarray = None
    gain: float = WIND_UNIT_GAIN

    def __post_init__(self):
        if self.level not in WIND_LEVEL_SCALE:
            raise ValueError(f"unknown wind level {self.level!r}")
        if self.bias is None:
            self.bias = WIND_UNIT_BIAS.copy()
        self.bias = np.asarray(self.bias, dtype=float)
        self.scale = WIND_LEVEL_SCALE[self.level]

    def eval(self, x, t):
        return self.scale * (self.bias + self.gain * _state_coupling(x))


@dataclass
class Cloth(DisturbanceTerm):
    """Ornstein-Uhlenbeck torque from erratic cloth flapping.

    The OU state advances by its exact discretization once per call, so the
    term must be sampled exactly once per control step.
    """

    seed: int = 0
    mean_reversion: float = 2.0
    volatility: float = 4.0e-4
    gain: float = 1.5e-4
    dt: float = 1.0 / 200.0
    mean: np.ndarray = None
    init_torque: np.ndarray = None

    def __post_init__(self):
        if self.mean_reversion <= 0.0:
            raise ValueError("mean reversion rate must be positive")
        self.mean = (
            np.zeros(3) if self.mean is None else np.asarray(self.mean, dtype=float)
        )
        if self.init_torque is None:
            self.init_torque = np.zeros_like(self.mean)
        self._tau = np.asarray(self.init_torque, dtype=float).copy()
        self._rng = np.random.default_rng(self.seed)
        decay = math.exp(-self.mean_reversion * self.dt)
        self._decay = decay
        self._noise_scale = self.volatility * math.sqrt(
            (1.0 - decay * decay) / (2.0 * self.mean_reversion)
        )

    def eval(self, x, t):
        value = self._tau + self.gain * _state_coupling(x)
        self._tau = (
            self.mean
            + (self._tau - self.mean) * self._decay
            + self._noise_scale * self._rng.standard_normal(self.mean.shape)
        )
        return value


@dataclass
class RotorFault(DisturbanceTerm):
    """Chipped-blade fault: zero before onset, then a torque bias plus a
    loss-of-authority term proportional to the previous commanded torque.

    Modeled as matched uncertainty (not a B modification) so every
    controller faces the same plant interface.
    """

    t_fault: float = 12.0
    effectiveness: float = 0.5
    bias: np.ndarray = None

    def __post_init__(self):
        if not (0.0 < self.effectiveness <= 1.0):
            raise ValueError("effectiveness must be in (0, 1]")
        self.bias = (
            np.zeros(3) if self.bias is None else np.asarray(self.bias, dtype=float)
        )
        self._u_prev = np.zeros_like(self.bias)

    def eval(self, x, t):
        if t < self.t_fault:
            return np.zeros_like(self.bias)
        return self.bias + (self.effectiveness - 1.0) * self._u_prev

    def notify_control(self, u):
        self._u_prev = np.asarray(u, dtype=float).copy()


@dataclass
class Disturbance:
    """Composite matched uncertainty: the sum of the active terms.

    States outside the operating box are clamped before evaluation and the
    event counted, keeping every term inside its Lipschitz domain.
    """

    terms: list
    m: int
    state_low: np.ndarray = None
    state_high: np.ndarray = None
    clamp_events: int = 0

    def eval(self, x, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.state_low is not None:
            clipped = np.clip(x, self.state_low, self.state_high)
            if not np.array_equal(clipped, x):
                self.clamp_events += 1
                x = clipped
        delta = np.zeros(self.m)
        for term in self.terms:
            delta = delta + term.eval(x, t)
        return delta

    def notify_control(self, u) -> None:
        for term in self.terms:
            term.notify_control(u)


def uncertainty_eval(d: Disturbance, x, t: float) -> np.ndarray:
    return d.eval(x, t)


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def plant_step(
    p: PlantModel, d: Disturbance | None, x, u, t: float, dt: float, delta=None
):
    """RK4 step of ``dx/dt = A x + B (u + delta)``.

    ``delta`` is sampled once at the step start (stochastic terms advance
    per sample) and held constant across the four stages.  Passing an
    explicit ``delta`` skips the sampling, for callers that log it.
    """
    u = np.asarray(u, dtype=float)
    if not np.isfinite(u).all():
        raise ValueError("control input must be finite")
    if delta is None:
        delta = d.eval(x, t) if d is not None else np.zeros(p.m)
    drive = p.b @ (u + np.asarray(delta, dtype=float))
    x_next = rk4_step(lambda _t, s: p.a @ s + drive, x, t, dt)
    if d is not None:
        d.notify_control(u)
    return x_next


def ref_step(rm: RefModel, x_rm, r, dt: float):
    """RK4 step of the reference model ``dx_rm/dt = A_rm x_rm + B_rm r``."""
    drive = rm.b_rm @ np.asarray(r, dtype=float)
    return rk4_step(lambda _t, s: rm.a_rm @ s + drive, x_rm, 0.0, dt)


# ---------------------------------------------------------------------------
# Reference signals and the fixed (non-adaptive) outer-loop map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hover:
    setpoint: float = 1.0


@dataclass(frozen=True)
class Circle:
    radius: float = 1.0
    period: float = 8.0
    height: float = 1.0


@dataclass(frozen=True)
class FigureEight:
    scale: float = 1.0
    period: float = 10.0
    height: float = 1.0


@dataclass(frozen=True)
class Step:
    time: float = 5.0
    level: float = 0.2


def reference_signal(sig, t: float) -> np.ndarray:
    """Position-level command (x, y, z) for the named trajectory at time t."""
    if isinstance(sig, Hover):
        return np.array([0.0, 0.0, sig.setpoint])
    if isinstance(sig, Circle):
        w = 2.0 * math.pi / sig.period
        return np.array(
            [sig.radius * math.cos(w * t), sig.radius * math.sin(w * t), sig.height]
        )
    if isinstance(sig, FigureEight):
        # Lemniscate of Gerono
        w = 2.0 * math.pi / sig.period
        s = math.sin(w * t)
        return np.array([sig.scale * s, sig.scale * s * math.cos(w * t), sig.height])
    if isinstance(sig, Step):
        return np.array([sig.level if t >= sig.time else 0.0, 0.0, 0.0])
    raise TypeError(f"unknown reference signal {sig!r}")


def attitude_command(sig, t: float, tilt_limit: float = 0.35) -> np.ndarray:
    """Fixed small-angle outer-loop map from position command to attitude
    command (roll, pitch, yaw).

    Curved trajectories map their analytic lateral accelerations to tilt
    commands; hover commands level attitude; a step commands the roll axis
    directly (the acceleration map is undefined across the discontinuity).
    """
    if isinstance(sig, Hover):
        return np.zeros(3)
    if isinstance(sig, Step):
        return np.array([sig.level if t >= sig.time else 0.0, 0.0, 0.0])
    if isinstance(sig, Circle):
        w = 2.0 * math.pi / sig.period
        ax = -sig.radius * w * w * math.cos(w * t)
        ay = -sig.radius * w * w * math.sin(w * t)
    elif isinstance(sig, FigureEight):
        w = 2.0 * math.pi / sig.period
        ax = -sig.scale * w * w * math.sin(w * t)
        ay = -2.0 * sig.scale * w * w * math.sin(2.0 * w * t)
    else:
        raise TypeError(f"unknown reference signal {sig!r}")
    roll = np.clip(-ay / GRAVITY, -tilt_limit, tilt_limit)
    pitch = np.clip(ax / GRAVITY, -tilt_limit, tilt_limit)
    return np.array([roll, pitch, 0.0])


# ---------------------------------------------------------------------------
# Quadrotor attitude preset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadPreset:
    plant: PlantModel
    ref_model: RefModel
    gains: LinearGains
    reference: object


def quad_attitude_preset() -> QuadPreset:
    """Desk-scale quadrotor attitude model.

    State (roll, pitch, yaw, p, q, r); input is the three body torques.
    Inertia is a published Mambo-class scale, J = diag(1.4e-4, 1.4e-4,
    2.2e-4) kg m^2.  K and K_r place the per-axis reference poles at
    -4 +/- 4i, i.e. A_rm = A - B K exactly and B_rm = B K_r.
    """
    inertia = np.array([1.4e-4, 1.4e-4, 2.2e-4])
    damping = np.array([0.05, 0.05, 0.03])

    a = np.zeros((6, 6))
    a[:3, 3:] = np.eye(3)
    a[3:, 3:] = -np.diag(damping)
    b = np.zeros((6, 3))
    b[3:, :] = np.diag(1.0 / inertia)

    # poles -4 +/- 4i per axis: s^2 + 8 s + 32
    wn2, two_zeta_wn = 32.0, 8.0
    k = np.hstack([np.diag(wn2 * inertia), np.diag((two_zeta_wn - damping) * inertia)])
    k_r = np.diag(wn2 * inertia)

    a_rm = a - b @ k
    b_rm = b @ k_r

    plant = PlantModel(
        a=a,
        b=b,
        state_low=np.array([-1.2, -1.2, -1.2, -25.0, -25.0, -25.0]),
        state_high=np.array([1.2, 1.2, 1.2, 25.0, 25.0, 25.0]),
        name="quad_attitude",
    )
    ref_model = RefModel(a_rm=a_rm, b_rm=b_rm)
    gains = LinearGains(k=k, k_r=k_r)
    return QuadPreset(plant=plant, ref_model=ref_model, gains=gains, reference=Hover())
