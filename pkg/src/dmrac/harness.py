"""Scenario configuration, the fixed-rate fast loop, campaign runner,
metrics, trajectory logging, snapshot I/O, and feature exports.

Two clocks are supported.  Simulated time (the default) interleaves the
fast loop, the lossy channel, and the trainer deterministically on one
thread, keyed entirely by message timestamps; reruns with the same config
and seed are bit-identical.  Real-socket mode runs the trainer as a
separate OS process over loopback UDP and paces the loop on the wall
clock; it shares every interface but makes no determinism claim.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import controllers as ctl
from . import link as link_mod
from . import net as net_mod
from . import plant as plant_mod
from . import trainer as trainer_mod
from .buffer import ReplayBuffer
from .linalg import NonFiniteState, PcaResult, pca_project, solve_lyapunov


class ConfigError(ValueError):
    """Scenario configuration is malformed (unknown keys, bad values)."""


class ShapeMismatch(ValueError):
    """A loaded snapshot does not match the scenario's network shape."""


# 60 degrees of attitude, 20 rad/s of body rate.
DEFAULT_CRASH_BOUNDS = (
    math.pi / 3.0,
    math.pi / 3.0,
    math.pi / 3.0,
    20.0,
    20.0,
    20.0,
)

# Adaptation gains are calibrated for the torque-scale preset (B carries
# 1/J ~ 7e3): larger values destabilize the Euler-discretized law at 200 Hz.
GAMMA_DEFAULTS = {"mrac": 1.0e-4, "dmrac": 5.0e-5}

PID_DEFAULTS = {
    "kp": (6.0e-3, 6.0e-3, 9.0e-3),
    "ki": (3.0e-3, 3.0e-3, 4.0e-3),
    "kd": (1.5e-3, 1.5e-3, 2.2e-3),
    "clamp": 0.15,
}

CONTROLLERS = ("pid", "mrac", "dmrac", "baseline")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _check_keys(obj: dict, allowed, where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {where}")


def _merged(defaults: dict, given: dict | None, where: str) -> dict:
    given = {} if given is None else dict(given)
    if not isinstance(given, dict):
        raise ConfigError(f"{where} must be an object")
    _check_keys(given, defaults.keys(), where)
    out = dict(defaults)
    out.update(given)
    return out


_REFERENCE_DEFAULTS = {
    "hover": {"setpoint": 1.0},
    "circle": {"radius": 1.0, "period_s": 8.0, "height": 1.0},
    "figure8": {"scale": 1.0, "period_s": 10.0, "height": 1.0},
    "step": {"time_s": 5.0, "level": 0.2},
}

_DISTURBANCE_DEFAULTS = {
    "synthetic_rbf": {"weights": None, "centers": None, "widths": None},
    "wind_bias": {"level": "low", "bias": None, "gain": plant_mod.WIND_UNIT_GAIN},
    "cloth": {
        "mean_reversion": 2.0,
        "volatility": 4.0e-4,
        "gain": 1.5e-4,
        "init_torque": None,
    },
    "rotor_fault": {
        "t_fault_s": (10.0, 20.0),
        "effectiveness": 0.5,
        "bias": None,
        "bias_magnitude": None,
    },
}

_CHANNEL_DEFAULTS = {
    "drop_prob": 0.0,
    "latency_ms": 20.0,
    "jitter_ms": 5.0,
    "reorder": False,
}

_TRAINER_DEFAULTS = {
    "learning_rate": 0.05,
    "minibatch": 64,
    "iterations": 40,
    "publish_policy": "loss_threshold",
    "publish_threshold": None,
    "val_split": 0.2,
    "train_period_s": 1.0,
}

_BUFFER_DEFAULTS = {"capacity": 250, "tolerance": 0.05}

_ADAPTATION_DEFAULTS = {
    "gamma": None,  # None -> per-controller default
    "w_bound": 50.0,
    "eps_proj": 0.1,
    "q_scale": 1.0,
    "w_init": None,  # None -> "last_layer" when warm-started, else "zero"
}

_FEATURES_DEFAULTS = {
    "hidden": (64, 64),
    "feature_dim": 20,
    "dropout": 0.1,
    "rbf_count": 12,
    "rbf_mode": "random",  # or "match_disturbance"
    "rbf_width": 1.5,
    "rbf_bias": False,
}

_SCENARIO_KEYS = (
    "name",
    "plant",
    "controller",
    "duration_s",
    "rate_hz",
    "seed",
    "reference",
    "disturbance",
    "channel",
    "trainer",
    "buffer",
    "adaptation",
    "features",
    "pid",
    "saturation",
    "telemetry_stride",
    "warm_start",
    "save_snapshot",
    "freeze_learning",
    "crash_bounds",
)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = ""
    plant: str = "quad_attitude"
    controller: str = "dmrac"
    duration_s: float = 40.0
    rate_hz: int = 200
    seed: int = 0
    reference: dict = field(default_factory=lambda: {"kind": "hover", "setpoint": 1.0})
    disturbance: tuple = ()
    channel: dict = field(default_factory=lambda: dict(_CHANNEL_DEFAULTS))
    trainer: dict = field(default_factory=lambda: dict(_TRAINER_DEFAULTS))
    buffer: dict = field(default_factory=lambda: dict(_BUFFER_DEFAULTS))
    adaptation: dict = field(default_factory=lambda: dict(_ADAPTATION_DEFAULTS))
    features: dict = field(default_factory=lambda: dict(_FEATURES_DEFAULTS))
    pid: dict = field(default_factory=lambda: dict(PID_DEFAULTS))
    saturation: object = None
    telemetry_stride: int = 1
    warm_start: str | None = None
    save_snapshot: str | None = None
    freeze_learning: bool = False
    crash_bounds: tuple = DEFAULT_CRASH_BOUNDS

    @property
    def dt(self) -> float:
        return 1.0 / float(self.rate_hz)

    @property
    def ticks(self) -> int:
        return int(round(self.duration_s * self.rate_hz))

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "plant": self.plant,
            "controller": self.controller,
            "duration_s": self.duration_s,
            "rate_hz": self.rate_hz,
            "seed": self.seed,
            "reference": dict(self.reference),
            "disturbance": [dict(d) for d in self.disturbance],
            "channel": dict(self.channel),
            "trainer": dict(self.trainer),
            "buffer": dict(self.buffer),
            "adaptation": dict(self.adaptation),
            "features": dict(self.features),
            "pid": dict(self.pid),
            "saturation": self.saturation,
            "telemetry_stride": self.telemetry_stride,
            "warm_start": self.warm_start,
            "save_snapshot": self.save_snapshot,
            "freeze_learning": self.freeze_learning,
            "crash_bounds": list(self.crash_bounds),
        }
        return out


def scenario_from_dict(raw: dict) -> ScenarioConfig:
    """Validate and normalize a scenario config; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("scenario config must be a JSON object")
    _check_keys(raw, _SCENARIO_KEYS, "scenario")

    controller = raw.get("controller", "dmrac")
    if controller not in CONTROLLERS:
        raise ConfigError(f"controller must be one of {CONTROLLERS}, got {controller!r}")
    plant_name = raw.get("plant", "quad_attitude")
    if plant_name != "quad_attitude":
        raise ConfigError(f"unknown plant preset {plant_name!r}")

    duration = float(raw.get("duration_s", 40.0))
    rate = int(raw.get("rate_hz", 200))
    if duration <= 0.0 or rate <= 0:
        raise ConfigError("duration_s and rate_hz must be positive")
    if abs(duration * rate - round(duration * rate)) > 1e-9:
        raise ConfigError("rate_hz * duration_s must be an integer tick count")

    ref_raw = raw.get("reference", {"kind": "hover"})
    if not isinstance(ref_raw, dict) or "kind" not in ref_raw:
        raise ConfigError("reference must be an object with a 'kind'")
    kind = ref_raw["kind"]
    if kind not in _REFERENCE_DEFAULTS:
        raise ConfigError(f"unknown reference kind {kind!r}")
    ref = _merged(
        _REFERENCE_DEFAULTS[kind],
        {k: v for k, v in ref_raw.items() if k != "kind"},
        f"reference.{kind}",
    )
    ref["kind"] = kind

    dist_raw = raw.get("disturbance", [])
    if not isinstance(dist_raw, list):
        raise ConfigError("disturbance must be a list of term objects")
    terms = []
    for i, term in enumerate(dist_raw):
        if not isinstance(term, dict) or "kind" not in term:
            raise ConfigError(f"disturbance[{i}] must be an object with a 'kind'")
        tkind = term["kind"]
        if tkind not in _DISTURBANCE_DEFAULTS:
            raise ConfigError(f"unknown disturbance kind {tkind!r}")
        t = _merged(
            _DISTURBANCE_DEFAULTS[tkind],
            {k: v for k, v in term.items() if k != "kind"},
            f"disturbance[{i}].{tkind}",
        )
        t["kind"] = tkind
        terms.append(t)

    cfg = ScenarioConfig(
        name=str(raw.get("name", "")),
        plant=plant_name,
        controller=controller,
        duration_s=duration,
        rate_hz=rate,
        seed=int(raw.get("seed", 0)),
        reference=ref,
        disturbance=tuple(terms),
        channel=_merged(_CHANNEL_DEFAULTS, raw.get("channel"), "channel"),
        trainer=_merged(_TRAINER_DEFAULTS, raw.get("trainer"), "trainer"),
        buffer=_merged(_BUFFER_DEFAULTS, raw.get("buffer"), "buffer"),
        adaptation=_merged(_ADAPTATION_DEFAULTS, raw.get("adaptation"), "adaptation"),
        features=_merged(_FEATURES_DEFAULTS, raw.get("features"), "features"),
        pid=_merged(PID_DEFAULTS, raw.get("pid"), "pid"),
        saturation=raw.get("saturation"),
        telemetry_stride=int(raw.get("telemetry_stride", 1)),
        warm_start=raw.get("warm_start"),
        save_snapshot=raw.get("save_snapshot"),
        freeze_learning=bool(raw.get("freeze_learning", False)),
        crash_bounds=tuple(
            float(v) for v in raw.get("crash_bounds", DEFAULT_CRASH_BOUNDS)
        ),
    )
    if cfg.telemetry_stride < 1:
        raise ConfigError("telemetry_stride must be >= 1")
    if len(cfg.crash_bounds) != 6:
        raise ConfigError("crash_bounds must list 6 per-state limits")
    return cfg


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return scenario_from_dict(raw)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _build_reference(ref: dict):
    kind = ref["kind"]
    if kind == "hover":
        return plant_mod.Hover(setpoint=float(ref["setpoint"]))
    if kind == "circle":
        return plant_mod.Circle(
            radius=float(ref["radius"]),
            period=float(ref["period_s"]),
            height=float(ref["height"]),
        )
    if kind == "figure8":
        return plant_mod.FigureEight(
            scale=float(ref["scale"]),
            period=float(ref["period_s"]),
            height=float(ref["height"]),
        )
    return plant_mod.Step(time=float(ref["time_s"]), level=float(ref["level"]))


def _draw(spec, rng, low_high_len=2):
    """A scalar stays fixed; a [lo, hi] window is drawn per-seed."""
    if isinstance(spec, (list, tuple)) and len(spec) == low_high_len:
        lo, hi = float(spec[0]), float(spec[1])
        return float(rng.uniform(lo, hi))
    return float(spec)


def _build_disturbance(cfg: ScenarioConfig, model: plant_mod.PlantModel, rng):
    terms = []
    for term in cfg.disturbance:
        kind = term["kind"]
        if kind == "synthetic_rbf":
            if term["weights"] is None or term["centers"] is None:
                raise ConfigError("synthetic_rbf needs explicit weights and centers")
            terms.append(
                plant_mod.SyntheticRbf(
                    weights=np.asarray(term["weights"], dtype=float),
                    centers=np.asarray(term["centers"], dtype=float),
                    widths=np.asarray(term["widths"], dtype=float),
                )
            )
        elif kind == "wind_bias":
            terms.append(
                plant_mod.WindBias(
                    level=term["level"],
                    bias=None if term["bias"] is None else term["bias"],
                    gain=float(term["gain"]),
                )
            )
        elif kind == "cloth":
            terms.append(
                plant_mod.Cloth(
                    seed=int(rng.integers(2**31)),
                    mean_reversion=float(term["mean_reversion"]),
                    volatility=float(term["volatility"]),
                    gain=float(term["gain"]),
                    dt=cfg.dt,
                    init_torque=term["init_torque"],
                )
            )
        elif kind == "rotor_fault":
            t_fault = _draw(term["t_fault_s"], rng)
            effectiveness = _draw(term["effectiveness"], rng)
            if term["bias"] is not None:
                bias = np.asarray(term["bias"], dtype=float)
            elif term["bias_magnitude"] is not None:
                magnitude = _draw(term["bias_magnitude"], rng)
                direction = rng.standard_normal(model.m)
                direction /= np.linalg.norm(direction)
                bias = magnitude * direction
            else:
                bias = np.zeros(model.m)
            terms.append(
                plant_mod.RotorFault(
                    t_fault=t_fault, effectiveness=effectiveness, bias=bias
                )
            )
    drawn = [
        {
            "t_fault": float(t.t_fault),
            "effectiveness": float(t.effectiveness),
            "bias": [float(b) for b in t.bias],
        }
        for t in terms
        if isinstance(t, plant_mod.RotorFault)
    ]
    dist = plant_mod.Disturbance(
        terms=terms,
        m=model.m,
        state_low=model.state_low,
        state_high=model.state_high,
    )
    return dist, drawn


def _build_rbf_bank(cfg: ScenarioConfig, disturbance, n: int, rng) -> ctl.RbfBank:
    feats = cfg.features
    if feats["rbf_mode"] == "match_disturbance":
        for term in disturbance.terms:
            if isinstance(term, plant_mod.SyntheticRbf):
                return ctl.RbfBank(
                    centers=term.centers.copy(),
                    widths=term.widths.copy(),
                    include_bias=bool(feats["rbf_bias"]),
                )
        raise ConfigError("rbf_mode=match_disturbance needs a synthetic_rbf term")
    count = int(feats["rbf_count"])
    span = np.array([0.35, 0.35, 0.35, 3.5, 3.5, 3.5])[:n]
    centers = rng.uniform(-span, span, size=(count, n))
    widths = np.full(count, float(feats["rbf_width"]))
    return ctl.RbfBank(
        centers=centers, widths=widths, include_bias=bool(feats["rbf_bias"])
    )


def _network_widths(cfg: ScenarioConfig, n: int, m: int):
    feats = cfg.features
    return tuple([n] + [int(h) for h in feats["hidden"]] + [int(feats["feature_dim"]), m])


def detect_crash(x, bounds) -> bool:
    """True when any state magnitude exceeds its bound or is non-finite."""
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        return True
    return bool(np.any(np.abs(x) > np.asarray(bounds, dtype=float)))


# ---------------------------------------------------------------------------
# Metrics and trajectory logs
# ---------------------------------------------------------------------------

FINAL_WINDOW_S = 10.0


@dataclass
class RunMetrics:
    ticks: int
    duration_s: float
    rmse_axes: tuple
    rmse_axes_final: tuple
    rmse_enorm: float
    rmse_enorm_final: float
    peak_enorm: float
    w_fro_max: float
    crashed: bool
    crash_time: float | None
    swap_count: int = 0
    stale_count: int = 0
    buffer_admissions: int = 0
    publishes: int = 0
    telemetry_sent: int = 0
    telemetry_dropped: int = 0
    updates_dropped: int = 0
    decode_errors: int = 0
    p99_tick_ms: float | None = None

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["rmse_axes"] = list(self.rmse_axes)
        out["rmse_axes_final"] = list(self.rmse_axes_final)
        return out


def _column_names(n: int, r_dim: int, m: int, with_delta: bool):
    cols = ["tick", "t"]
    cols += [f"x{i}" for i in range(n)]
    cols += [f"x_rm{i}" for i in range(n)]
    cols += [f"r{i}" for i in range(r_dim)]
    cols += [f"u{i}" for i in range(m)]
    cols += [f"nu_ad{i}" for i in range(m)]
    if with_delta:
        cols += [f"delta{i}" for i in range(m)]
    cols += ["e_norm", "w_fro", "feat_version"]
    return cols


@dataclass
class TrajectoryLog:
    columns: list
    rows: np.ndarray  # (ticks, len(columns))
    n: int
    r_dim: int
    m: int
    with_delta: bool

    def col(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def block(self, prefix: str, count: int) -> np.ndarray:
        start = self.columns.index(f"{prefix}0")
        return self.rows[:, start : start + count]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.columns) + "\n")
            tick_i = self.columns.index("tick")
            ver_i = self.columns.index("feat_version")
            for row in self.rows:
                cells = []
                for i, v in enumerate(row):
                    if i in (tick_i, ver_i):
                        cells.append(str(int(v)))
                    else:
                        cells.append(repr(float(v)))
                fh.write(",".join(cells) + "\n")


def read_trajectory_csv(path) -> TrajectoryLog:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        columns = header.split(",")
        rows = [
            [float(v) for v in line.strip().split(",")] for line in fh if line.strip()
        ]
    n = sum(1 for c in columns if c.startswith("x") and not c.startswith("x_rm"))
    r_dim = sum(1 for c in columns if c.startswith("r") and c != "r")
    m = sum(1 for c in columns if c.startswith("u"))
    with_delta = any(c.startswith("delta") for c in columns)
    arr = np.asarray(rows, dtype=float) if rows else np.zeros((0, len(columns)))
    return TrajectoryLog(
        columns=columns, rows=arr, n=n, r_dim=r_dim, m=m, with_delta=with_delta
    )


def metrics_from_log(
    log: TrajectoryLog,
    crashed: bool = False,
    crash_time: float | None = None,
    **counters,
) -> RunMetrics:
    rows = log.rows
    ticks = rows.shape[0]
    if ticks == 0:
        nan = float("nan")
        return RunMetrics(
            ticks=0,
            duration_s=0.0,
            rmse_axes=(nan,) * log.n,
            rmse_axes_final=(nan,) * log.n,
            rmse_enorm=nan,
            rmse_enorm_final=nan,
            peak_enorm=nan,
            w_fro_max=nan,
            crashed=crashed,
            crash_time=crash_time,
            **counters,
        )
    x = log.block("x", log.n)
    x_rm = log.block("x_rm", log.n)
    err = x_rm - x
    t = log.col("t")
    e_norm = log.col("e_norm")
    window = t >= (t[-1] - FINAL_WINDOW_S)
    rmse_axes = tuple(np.sqrt(np.mean(err**2, axis=0)))
    rmse_axes_final = tuple(np.sqrt(np.mean(err[window] ** 2, axis=0)))
    return RunMetrics(
        ticks=ticks,
        duration_s=float(t[-1] + (t[1] - t[0] if ticks > 1 else 0.0)),
        rmse_axes=rmse_axes,
        rmse_axes_final=rmse_axes_final,
        rmse_enorm=float(np.sqrt(np.mean(e_norm**2))),
        rmse_enorm_final=float(np.sqrt(np.mean(e_norm[window] ** 2))),
        peak_enorm=float(np.max(e_norm)),
        w_fro_max=float(np.max(log.col("w_fro"))),
        crashed=crashed,
        crash_time=crash_time,
        **counters,
    )


# ---------------------------------------------------------------------------
# Scenario execution (simulated time)
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    config: ScenarioConfig
    metrics: RunMetrics
    log: TrajectoryLog
    trainer_rows: list
    drawn_faults: list = field(default_factory=list)
    adapt: dict | None = None
    final_stack: ctl.NetFeatures | None = None
    final_w: np.ndarray | None = None
    trainer_net: net_mod.MlpParams | None = None
    paths: dict = field(default_factory=dict)


def _seed_children(seed: int):
    names = (
        "disturbance",
        "bank",
        "net",
        "trainer",
        "channel_up",
        "channel_down",
        "draws",
    )
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children))


def _seed_int(seed_seq) -> int:
    return int(seed_seq.generate_state(1)[0])


def run_scenario(
    cfg: ScenarioConfig,
    out_dir=None,
    mode: str = "sim",
    collect_adapt: bool = False,
) -> RunResult:
    """Execute one scenario; returns metrics, the trajectory log, and the
    trainer metric rows.  Crash is a result, not an error."""
    if mode == "sim":
        return _run_sim(cfg, out_dir=out_dir, collect_adapt=collect_adapt)
    if mode == "socket":
        return _run_socket(cfg, out_dir=out_dir)
    raise ConfigError(f"unknown mode {mode!r}")


def _prepare_network(cfg: ScenarioConfig, n: int, m: int, seeds):
    widths = _network_widths(cfg, n, m)
    spec = net_mod.MlpSpec(
        widths=widths,
        dropout=float(cfg.features["dropout"]),
        seed=_seed_int(seeds["net"]) % (2**31),
    )
    if cfg.warm_start:
        params = load_snapshot(cfg.warm_start, expected_widths=widths)
        params = net_mod.MlpParams(
            spec=spec,
            weights=params.weights,
            biases=params.biases,
            version=params.version,
        )
    else:
        params = net_mod.init_params(spec)
    return params


def _run_sim(cfg: ScenarioConfig, out_dir=None, collect_adapt: bool = False):
    preset = plant_mod.quad_attitude_preset()
    model, rm, gains = preset.plant, preset.ref_model, preset.gains
    n, m = model.n, model.m
    dt = cfg.dt
    total = cfg.ticks
    seeds = _seed_children(cfg.seed)

    disturbance, drawn_faults = _build_disturbance(
        cfg, model, np.random.default_rng(seeds["draws"])
    )
    has_delta = bool(disturbance.terms)
    reference = _build_reference(cfg.reference)
    q = float(cfg.adaptation["q_scale"]) * np.eye(n)
    p = solve_lyapunov(rm.a_rm, q)
    b_proj = -2.0 * model.b

    saturation = cfg.saturation
    pid = None
    fast = None
    core = None
    fast_ep = slow_ep = None
    dims = None
    params = None

    if cfg.controller == "pid":
        pid = ctl.PidState(
            kp=np.asarray(cfg.pid["kp"], dtype=float),
            ki=np.asarray(cfg.pid["ki"], dtype=float),
            kd=np.asarray(cfg.pid["kd"], dtype=float),
            clamp=float(cfg.pid["clamp"]),
        )
    elif cfg.controller == "mrac":
        bank = _build_rbf_bank(
            cfg, disturbance, n, np.random.default_rng(seeds["bank"])
        )
        gamma = cfg.adaptation["gamma"]
        fast = ctl.make_fast_state(
            source=bank,
            m=m,
            p=p,
            b_proj=b_proj,
            gamma=GAMMA_DEFAULTS["mrac"] if gamma is None else float(gamma),
            w_bound=float(cfg.adaptation["w_bound"]),
            eps_proj=float(cfg.adaptation["eps_proj"]),
        )
    elif cfg.controller == "dmrac":
        params = _prepare_network(cfg, n, m, seeds)
        stack = ctl.NetFeatures(
            weights=params.weights[:-1], biases=params.biases[:-1]
        )
        w_init = cfg.adaptation["w_init"]
        if w_init is None:
            w_init = "last_layer" if cfg.warm_start else "zero"
        if w_init not in ("zero", "last_layer"):
            raise ConfigError(f"unknown w_init {w_init!r}")
        w0 = params.weights[-1].T.copy() if w_init == "last_layer" else None
        gamma = cfg.adaptation["gamma"]
        fast = ctl.make_fast_state(
            source=stack,
            m=m,
            p=p,
            b_proj=b_proj,
            gamma=GAMMA_DEFAULTS["dmrac"] if gamma is None else float(gamma),
            w_bound=float(cfg.adaptation["w_bound"]),
            eps_proj=float(cfg.adaptation["eps_proj"]),
            w0=w0,
            version=params.version,
        )
        dims = (n, m, int(cfg.features["feature_dim"]))
        if not cfg.freeze_learning:
            up = link_mod.ChannelModel(seed=_seed_int(seeds["channel_up"]), **cfg.channel)
            down = link_mod.ChannelModel(
                seed=_seed_int(seeds["channel_down"]), **cfg.channel
            )
            fast_ep, slow_ep = link_mod.sim_endpoint_pair(up, down)
            tcfg = trainer_mod.TrainerConfig(
                seed=_seed_int(seeds["trainer"]) % (2**31), **cfg.trainer
            )
            buf = ReplayBuffer(
                capacity=int(cfg.buffer["capacity"]),
                tolerance=float(cfg.buffer["tolerance"]),
            )
            core = trainer_mod.TrainerCore(net=params, buf=buf, cfg=tcfg)

    columns = _column_names(n, 3, m, has_delta)
    rows = np.zeros((total, len(columns)))
    adapt = (
        {"e": [], "w": [], "phi": [], "delta": [], "t": []} if collect_adapt else None
    )

    x = np.zeros(n)
    x_rm = np.zeros(n)
    crashed = False
    crash_time = None
    tele_seq = 0
    pub_seq = 0
    decode_errors = 0
    logged = 0

    for tick in range(total):
        t = tick * dt
        r = plant_mod.attitude_command(reference, t)
        phi = ctl.features_of(fast, x) if fast is not None else None
        nu = ctl.adaptive_term(fast.w, phi) if fast is not None else np.zeros(m)
        u = ctl.total_control(
            gains, fast, pid, x, r, phi=phi, dt=dt, saturation=saturation
        )
        delta = disturbance.eval(x, t) if has_delta else np.zeros(m)

        row = [float(tick), t]
        row += list(x)
        row += list(x_rm)
        row += list(r)
        row += list(u)
        row += list(nu)
        if has_delta:
            row += list(delta)
        e_pre = x_rm - x
        w_fro = float(np.linalg.norm(fast.w)) if fast is not None else 0.0
        version = fast.version if fast is not None else 0
        row += [float(np.linalg.norm(e_pre)), w_fro, float(version)]
        rows[tick] = row
        logged = tick + 1

        if adapt is not None:
            adapt["e"].append(e_pre.copy())
            adapt["w"].append(fast.w.copy() if fast is not None else np.zeros((1, m)))
            adapt["phi"].append(
                phi.copy() if phi is not None else np.zeros(1)
            )
            adapt["delta"].append(delta.copy())
            adapt["t"].append(t)

        try:
            x_next = plant_mod.plant_step(model, None, x, u, t, dt, delta=delta)
            x_rm_next = plant_mod.ref_step(rm, x_rm, r, dt)
        except NonFiniteState:
            crashed = True
            crash_time = t + dt
            break
        disturbance.notify_control(u)
        if detect_crash(x_next, cfg.crash_bounds):
            crashed = True
            crash_time = t + dt
            break

        if fast is not None and not cfg.freeze_learning:
            fast = ctl.proj_update(fast, phi, x_rm_next - x_next, dt)

        if core is not None and tick % cfg.telemetry_stride == 0:
            frame = link_mod.encode(
                link_mod.Telemetry(seq=tele_seq, t=t, x=x, nu_ad=nu, phi=phi)
            )
            tele_seq += 1
            fast_ep.send_bytes(frame, t)

        if core is not None:
            for data in slow_ep.poll(t):
                core.on_frame_bytes(data, dims)
            update = core.maybe_train(t)
            if update is not None:
                frame = link_mod.encode(replace(update, seq=pub_seq))
                pub_seq += 1
                slow_ep.send_bytes(frame, t)
            for data in fast_ep.poll(t):
                try:
                    msg = link_mod.decode(data, dims=dims)
                except link_mod.DecodeError:
                    decode_errors += 1
                    continue
                if isinstance(msg, link_mod.FeatureUpdate):
                    fast = ctl.swap_features(
                        fast,
                        ctl.NetFeatures(weights=msg.weights, biases=msg.biases),
                        msg.version,
                    )

        x, x_rm = x_next, x_rm_next

    log = TrajectoryLog(
        columns=columns,
        rows=rows[:logged],
        n=n,
        r_dim=3,
        m=m,
        with_delta=has_delta,
    )
    metrics = metrics_from_log(
        log,
        crashed=crashed,
        crash_time=crash_time,
        swap_count=fast.swap_count if fast is not None else 0,
        stale_count=fast.stale_count if fast is not None else 0,
        buffer_admissions=core.admissions if core is not None else 0,
        publishes=core.publishes if core is not None else 0,
        telemetry_sent=tele_seq,
        telemetry_dropped=(
            fast_ep._tx.dropped if fast_ep is not None else 0
        ),
        updates_dropped=(slow_ep._tx.dropped if slow_ep is not None else 0),
        decode_errors=decode_errors
        + (core.decode_errors if core is not None else 0),
    )

    if adapt is not None:
        adapt = {k: np.asarray(v) for k, v in adapt.items()}

    result = RunResult(
        config=cfg,
        metrics=metrics,
        log=log,
        trainer_rows=core.metrics_rows() if core is not None else [],
        drawn_faults=drawn_faults,
        adapt=adapt,
        final_stack=(
            ctl.NetFeatures(weights=fast.source.weights, biases=fast.source.biases)
            if fast is not None and isinstance(fast.source, ctl.NetFeatures)
            else None
        ),
        final_w=fast.w.copy() if fast is not None else None,
        trainer_net=core.net if core is not None else None,
    )

    if cfg.save_snapshot and fast is not None and result.final_stack is not None:
        save_fast_snapshot(cfg.save_snapshot, result.final_stack, fast.w, fast.version)
        result.paths["snapshot"] = cfg.save_snapshot
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        traj = os.path.join(out_dir, "trajectory.csv")
        log.to_csv(traj)
        result.paths["trajectory"] = traj
        tm = os.path.join(out_dir, "trainer_metrics.csv")
        trainer_mod.write_metrics_csv(tm, result.trainer_rows)
        result.paths["trainer_metrics"] = tm
        mj = os.path.join(out_dir, "metrics.json")
        with open(mj, "w", encoding="utf-8") as fh:
            json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        result.paths["metrics"] = mj
    return result


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------


def run_campaign(cfg: ScenarioConfig, n_runs: int, seed_base: int, out_dir=None):
    """Run ``n_runs`` seeded scenarios and aggregate crash/tracking stats."""
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    results = []
    for i in range(n_runs):
        rcfg = replace(cfg, seed=seed_base + i)
        rdir = os.path.join(out_dir, f"run_{seed_base + i}") if out_dir else None
        results.append(run_scenario(rcfg, out_dir=rdir))
    survivors = [r.metrics.rmse_enorm_final for r in results if not r.metrics.crashed]
    aggregate = {
        "n_runs": n_runs,
        "seed_base": seed_base,
        "controller": cfg.controller,
        "crash_count": sum(1 for r in results if r.metrics.crashed),
        "rmse_final_mean": float(np.mean(survivors)) if survivors else float("nan"),
        "rmse_final_var": float(np.var(survivors)) if survivors else float("nan"),
        "runs": [
            dict(seed=seed_base + i, **results[i].metrics.to_dict())
            for i in range(n_runs)
        ],
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "aggregate.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(aggregate, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return aggregate, results


# ---------------------------------------------------------------------------
# Snapshot I/O
# ---------------------------------------------------------------------------


def save_snapshot(path, params: net_mod.MlpParams) -> None:
    with open(path, "wb") as fh:
        fh.write(net_mod.save_params(params))


def save_fast_snapshot(path, stack: ctl.NetFeatures, w, version: int) -> None:
    """Snapshot of the controller as flown: the installed inner layers plus
    the fast weights mirrored into the final layer."""
    weights = tuple(stack.weights) + (np.asarray(w, dtype=float).T,)
    biases = tuple(stack.biases) + (np.zeros(np.asarray(w).shape[1]),)
    with open(path, "wb") as fh:
        fh.write(net_mod.pack_layers(version, weights, biases))


def load_snapshot(path, expected_widths=None) -> net_mod.MlpParams:
    with open(path, "rb") as fh:
        data = fh.read()
    params = net_mod.load_params(data)
    if expected_widths is not None and tuple(params.spec.widths) != tuple(
        expected_widths
    ):
        raise ShapeMismatch(
            f"snapshot widths {tuple(params.spec.widths)} != expected "
            f"{tuple(expected_widths)}"
        )
    return params


# ---------------------------------------------------------------------------
# Feature export and analysis
# ---------------------------------------------------------------------------


def collect_regime_states(labeled_cfgs, stride: int = 50):
    """Run each labeled scenario and sample its visited states at ``stride``.

    At least one sample per run is always emitted.
    """
    labels = []
    states = []
    for label, cfg in labeled_cfgs:
        res = run_scenario(cfg)
        xs = res.log.block("x", res.log.n)
        sampled = xs[:: max(1, int(stride))]
        if sampled.shape[0] == 0:
            sampled = xs[:1]
        labels += [label] * sampled.shape[0]
        states.append(sampled)
    return labels, np.vstack(states)


def feature_table(states, stack: ctl.NetFeatures) -> np.ndarray:
    return np.stack([stack.eval(x) for x in states])


def silhouette_score(points, labels) -> float:
    """Mean silhouette over samples: (b - a) / max(a, b) with a the mean
    intra-cluster and b the best inter-cluster mean distance."""
    x = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two labels")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=2))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        same = labels == labels[i]
        n_same = int(same.sum())
        if n_same <= 1:
            scores[i] = 0.0
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = min(np.mean(dist[i, labels == other]) for other in uniq if other != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(np.mean(scores))


@dataclass
class FeatureExport:
    labels: list
    states: np.ndarray
    features: np.ndarray
    pca: PcaResult
    paths: dict = field(default_factory=dict)


def export_features(
    labeled_cfgs, stack: ctl.NetFeatures, stride: int = 50, d: int = 3, out_dir=None
) -> FeatureExport:
    """Feature samples per labeled regime, plus their PCA projection.

    All runs are expected to share the one feature network ``stack``.
    """
    labels, states = collect_regime_states(labeled_cfgs, stride=stride)
    feats = feature_table(states, stack)
    pca = pca_project(feats, d=min(d, feats.shape[1]))
    export = FeatureExport(labels=labels, states=states, features=feats, pca=pca)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fpath = os.path.join(out_dir, "features.csv")
        with open(fpath, "w", encoding="utf-8") as fh:
            k = feats.shape[1]
            fh.write("label," + ",".join(f"phi{i}" for i in range(k)) + "\n")
            for lab, row in zip(labels, feats):
                fh.write(lab + "," + ",".join(repr(float(v)) for v in row) + "\n")
        ppath = os.path.join(out_dir, "features_pca.csv")
        with open(ppath, "w", encoding="utf-8") as fh:
            c = pca.projected.shape[1]
            fh.write("label," + ",".join(f"pc{i}" for i in range(c)) + "\n")
            for lab, row in zip(labels, pca.projected):
                fh.write(lab + "," + ",".join(repr(float(v)) for v in row) + "\n")
        export.paths = {"features": fpath, "pca": ppath}
    return export


# ---------------------------------------------------------------------------
# Real-socket mode: the trainer runs as its own OS process over loopback UDP
# ---------------------------------------------------------------------------


def _socket_trainer_main(cfg_dict, trainer_addr, fast_addr, out_dir):
    cfg = scenario_from_dict(cfg_dict)
    preset = plant_mod.quad_attitude_preset()
    n, m = preset.plant.n, preset.plant.m
    seeds = _seed_children(cfg.seed)
    params = _prepare_network(cfg, n, m, seeds)
    tcfg = trainer_mod.TrainerConfig(
        seed=_seed_int(seeds["trainer"]) % (2**31), **cfg.trainer
    )
    buf = ReplayBuffer(
        capacity=int(cfg.buffer["capacity"]), tolerance=float(cfg.buffer["tolerance"])
    )
    core = trainer_mod.TrainerCore(net=params, buf=buf, cfg=tcfg)
    endpoint = link_mod.UdpEndpoint(local=trainer_addr, remote=fast_addr)
    try:
        dims = (n, m, int(cfg.features["feature_dim"]))
        trainer_mod.run_trainer(endpoint, endpoint, core, dims)
        if out_dir:
            trainer_mod.write_metrics_csv(
                os.path.join(out_dir, "trainer_metrics.csv"), core.metrics_rows()
            )
    finally:
        endpoint.close()


def _run_socket(cfg: ScenarioConfig, out_dir=None):
    if cfg.controller != "dmrac" or cfg.freeze_learning:
        raise ConfigError("socket mode drives the dmrac controller with learning on")
    preset = plant_mod.quad_attitude_preset()
    model, rm, gains = preset.plant, preset.ref_model, preset.gains
    n, m = model.n, model.m
    dt = cfg.dt
    total = cfg.ticks
    seeds = _seed_children(cfg.seed)
    dims = (n, m, int(cfg.features["feature_dim"]))

    disturbance, drawn_faults = _build_disturbance(
        cfg, model, np.random.default_rng(seeds["draws"])
    )
    has_delta = bool(disturbance.terms)
    reference = _build_reference(cfg.reference)
    p = solve_lyapunov(rm.a_rm, float(cfg.adaptation["q_scale"]) * np.eye(n))

    params = _prepare_network(cfg, n, m, seeds)
    stack = ctl.NetFeatures(weights=params.weights[:-1], biases=params.biases[:-1])
    gamma = cfg.adaptation["gamma"]
    fast = ctl.make_fast_state(
        source=stack,
        m=m,
        p=p,
        b_proj=-2.0 * model.b,
        gamma=GAMMA_DEFAULTS["dmrac"] if gamma is None else float(gamma),
        w_bound=float(cfg.adaptation["w_bound"]),
        eps_proj=float(cfg.adaptation["eps_proj"]),
        version=params.version,
    )

    fast_sock = link_mod.UdpEndpoint(local=("127.0.0.1", 0))
    trainer_sock_addr = None
    # Bind a throwaway socket to reserve the trainer port deterministically.
    probe = link_mod.UdpEndpoint(local=("127.0.0.1", 0))
    trainer_sock_addr = probe.local_addr
    probe.close()
    fast_sock.remote = trainer_sock_addr

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    proc = multiprocessing.Process(
        target=_socket_trainer_main,
        args=(cfg.to_dict(), trainer_sock_addr, fast_sock.local_addr, out_dir),
    )
    proc.start()

    reasm = link_mod.Reassembler()
    columns = _column_names(n, 3, m, has_delta)
    rows = np.zeros((total, len(columns)))
    x = np.zeros(n)
    x_rm = np.zeros(n)
    crashed = False
    crash_time = None
    tele_seq = 0
    decode_errors = 0
    logged = 0
    tick_durations = []

    start = time.perf_counter()
    try:
        for tick in range(total):
            deadline = start + (tick + 1) * dt
            tick_start = time.perf_counter()
            t = tick * dt

            for data in fast_sock.poll():
                try:
                    msg = link_mod.decode(data, dims=dims)
                except link_mod.DecodeError:
                    decode_errors += 1
                    continue
                if isinstance(msg, link_mod.Fragment):
                    whole = reasm.feed(msg)
                    if whole is None:
                        continue
                    try:
                        msg = link_mod.decode(whole, dims=dims)
                    except link_mod.DecodeError:
                        decode_errors += 1
                        continue
                if isinstance(msg, link_mod.FeatureUpdate):
                    fast = ctl.swap_features(
                        fast,
                        ctl.NetFeatures(weights=msg.weights, biases=msg.biases),
                        msg.version,
                    )

            r = plant_mod.attitude_command(reference, t)
            phi = ctl.features_of(fast, x)
            nu = ctl.adaptive_term(fast.w, phi)
            u = ctl.total_control(
                gains, fast, None, x, r, phi=phi, dt=dt, saturation=cfg.saturation
            )
            delta = disturbance.eval(x, t) if has_delta else np.zeros(m)

            row = [float(tick), t, *x, *x_rm, *r, *u, *nu]
            if has_delta:
                row += list(delta)
            e_pre = x_rm - x
            row += [
                float(np.linalg.norm(e_pre)),
                float(np.linalg.norm(fast.w)),
                float(fast.version),
            ]
            rows[tick] = row
            logged = tick + 1

            try:
                x_next = plant_mod.plant_step(model, None, x, u, t, dt, delta=delta)
                x_rm_next = plant_mod.ref_step(rm, x_rm, r, dt)
            except NonFiniteState:
                crashed, crash_time = True, t + dt
                break
            disturbance.notify_control(u)
            if detect_crash(x_next, cfg.crash_bounds):
                crashed, crash_time = True, t + dt
                break
            fast = ctl.proj_update(fast, phi, x_rm_next - x_next, dt)

            if tick % cfg.telemetry_stride == 0:
                frame = link_mod.encode(
                    link_mod.Telemetry(seq=tele_seq, t=t, x=x, nu_ad=nu, phi=phi)
                )
                tele_seq += 1
                fast_sock.send_bytes(frame)
            x, x_rm = x_next, x_rm_next

            tick_durations.append(time.perf_counter() - tick_start)
            now = time.perf_counter()
            if now < deadline:
                time.sleep(deadline - now)
    finally:
        fast_sock.send_bytes(link_mod.encode(link_mod.Shutdown(seq=tele_seq)))
        proc.join(timeout=10.0)
        if proc.is_alive():
            proc.terminate()
            proc.join()
        fast_sock.close()

    log = TrajectoryLog(
        columns=columns, rows=rows[:logged], n=n, r_dim=3, m=m, with_delta=has_delta
    )
    p99 = (
        float(np.percentile(np.asarray(tick_durations) * 1e3, 99))
        if tick_durations
        else None
    )
    metrics = metrics_from_log(
        log,
        crashed=crashed,
        crash_time=crash_time,
        swap_count=fast.swap_count,
        stale_count=fast.stale_count,
        telemetry_sent=tele_seq,
        decode_errors=decode_errors,
        p99_tick_ms=p99,
    )
    result = RunResult(
        config=cfg,
        metrics=metrics,
        log=log,
        trainer_rows=[],
        drawn_faults=drawn_faults,
        final_w=fast.w.copy(),
    )
    if out_dir is not None:
        traj = os.path.join(out_dir, "trajectory.csv")
        log.to_csv(traj)
        result.paths["trajectory"] = traj
        mj = os.path.join(out_dir, "metrics.json")
        with open(mj, "w", encoding="utf-8") as fh:
            json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        result.paths["metrics"] = mj
    return result
