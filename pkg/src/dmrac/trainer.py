"""Slow training process: consumes telemetry, curates the replay buffer,
trains the full network by SGD, and publishes inner-layer snapshots.

The core is transport-free (the harness feeds it decoded telemetry in
simulated time); ``run_trainer`` wraps it in an endpoint-driven event loop
for the real-socket mode.  Training cadence is driven by telemetry
timestamps, so the same core is deterministic under both clocks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import link as link_mod
from . import net as net_mod
from .buffer import InsufficientData, ReplayBuffer


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.05
    minibatch: int = 64
    iterations: int = 40
    publish_policy: str = "loss_threshold"  # or "every_round"
    publish_threshold: float | None = None  # None: adaptive 2x best, floor 1e-3
    val_split: float = 0.2
    train_period_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.minibatch < 1:
            raise ValueError("minibatch must be at least 1")
        if not (0.0 < self.val_split < 1.0):
            raise ValueError("validation split must be in (0, 1)")
        if self.publish_policy not in ("loss_threshold", "every_round"):
            raise ValueError(f"unknown publish policy {self.publish_policy!r}")


def train_round(net: net_mod.MlpParams, buf: ReplayBuffer, cfg: TrainerConfig, rng):
    """One training round: ``cfg.iterations`` SGD steps on fresh minibatches.

    A fresh validation slice is held out each round and evaluated with
    dropout off.  Returns the updated network and the round metrics.
    """
    n = len(buf)
    if n < cfg.minibatch:
        raise InsufficientData(f"buffer holds {n} < minibatch {cfg.minibatch}")
    xs, ys = buf.arrays()
    perm = rng.permutation(n)
    val_count = max(1, int(round(cfg.val_split * n)))
    # Small buffers: never starve the minibatch sampler of training rows.
    if n - val_count < cfg.minibatch:
        val_count = max(0, n - cfg.minibatch)
    val_idx = perm[:val_count]
    train_idx = perm[val_count:]
    if val_count == 0:
        val_idx = train_idx

    pre_val = net_mod.batch_loss(net, xs[val_idx], ys[val_idx])
    losses = []
    for _ in range(cfg.iterations):
        batch = rng.choice(train_idx, size=cfg.minibatch, replace=False)
        grads, loss = net_mod.backprop(net, xs[batch], ys[batch], rng=rng)
        net = net_mod.sgd_step(net, grads, cfg.learning_rate)
        losses.append(loss)
    train_loss = (
        float(np.mean(losses))
        if losses
        else net_mod.batch_loss(net, xs[train_idx], ys[train_idx])
    )
    val_loss = net_mod.batch_loss(net, xs[val_idx], ys[val_idx])
    metrics = {
        "pre_val_loss": pre_val,
        "train_loss": train_loss,
        "val_loss": val_loss,
        "rounds": cfg.iterations,
    }
    return net, metrics


def should_publish(history, policy: str, threshold: float | None = None) -> bool:
    """Decide whether the round that just completed warrants a publish.

    ``history`` is the list of round metric dicts, most recent last.  The
    adaptive default publishes when the pre-round validation loss exceeded
    twice the best validation loss seen before it (floor 1e-3), and always
    after the first completed round so the fast loop leaves its
    random-feature regime.
    """
    if not history:
        return False
    if policy == "every_round":
        return True
    last = history[-1]
    if threshold is not None:
        return last["pre_val_loss"] > threshold
    prior = history[:-1]
    if not any(h.get("published") for h in prior):
        return True
    best = min(h["val_loss"] for h in prior)
    return last["pre_val_loss"] > max(2.0 * best, 1e-3)


class TrainerCore:
    """Buffer curation + training + publish decisions, transport-free."""

    def __init__(
        self, net: net_mod.MlpParams, buf: ReplayBuffer, cfg: TrainerConfig
    ):
        self.net = net
        self.buf = buf
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.history = []
        self.version = net.version
        self.admissions = 0
        self.rejections = 0
        self.decode_errors = 0
        self.publishes = 0
        self.last_t = 0.0
        self._next_train_t = cfg.train_period_s
        self._tick = 0

    def on_telemetry(self, msg: link_mod.Telemetry) -> bool:
        self.last_t = max(self.last_t, msg.t)
        self._tick += 1
        admitted = self.buf.insert_if_novel(msg.x, msg.nu_ad, msg.phi, tick=self._tick)
        if admitted:
            self.admissions += 1
        else:
            self.rejections += 1
        return admitted

    def on_frame_bytes(self, data: bytes, dims) -> str:
        """Decode and dispatch one frame; returns its kind ('telemetry',
        'shutdown', or 'error').  Decode errors are counted, never raised."""
        try:
            msg = link_mod.decode(data, dims=dims)
        except link_mod.DecodeError:
            self.decode_errors += 1
            return "error"
        if isinstance(msg, link_mod.Telemetry):
            self.on_telemetry(msg)
            return "telemetry"
        if isinstance(msg, link_mod.Shutdown):
            return "shutdown"
        self.decode_errors += 1
        return "error"

    def maybe_train(self, t: float):
        """Run a round if the cadence elapsed and the buffer is deep enough.

        Returns a FeatureUpdate message to publish, or None.
        """
        if t < self._next_train_t:
            return None
        self._next_train_t = t + self.cfg.train_period_s
        if len(self.buf) < self.cfg.minibatch:
            return None
        self.net, metrics = train_round(self.net, self.buf, self.cfg, self.rng)
        publish = should_publish(
            self.history + [metrics],
            self.cfg.publish_policy,
            self.cfg.publish_threshold,
        )
        metrics = dict(metrics)
        metrics["published"] = publish
        metrics["buffer_size"] = len(self.buf)
        update = None
        if publish:
            self.version += 1
            self.publishes += 1
            self.net = net_mod.with_version(self.net, self.version)
            update = link_mod.FeatureUpdate(
                version=self.version,
                weights=self.net.weights[:-1],
                biases=self.net.biases[:-1],
            )
        metrics["version"] = self.version
        self.history.append(metrics)
        return update

    def metrics_rows(self):
        """Training-metrics rows: round, losses, buffer size, publish flag."""
        rows = []
        for i, h in enumerate(self.history):
            rows.append(
                (
                    i,
                    h["train_loss"],
                    h["val_loss"],
                    h["buffer_size"],
                    1 if h["published"] else 0,
                    h["version"],
                )
            )
        return rows


METRICS_HEADER = "round,train_loss,val_loss,buffer_size,published,version"


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r, tl, vl, size, pub, ver in rows:
            fh.write(f"{r},{repr(float(tl))},{repr(float(vl))},{size},{pub},{ver}\n")


def run_trainer(inbox, outbox, core: TrainerCore, dims, seq_start: int = 0):
    """Endpoint-driven trainer loop; terminates on a Shutdown frame.

    Tolerates arbitrarily long telemetry gaps; link decode errors are
    counted and skipped.  Oversized feature updates are fragmented.
    """
    seq = seq_start
    running = True
    while running:
        frames = inbox.poll()
        for data in frames:
            kind = core.on_frame_bytes(data, dims)
            if kind == "shutdown":
                running = False
        update = core.maybe_train(core.last_t)
        if update is not None:
            frame = link_mod.encode(
                link_mod.FeatureUpdate(
                    version=update.version,
                    weights=update.weights,
                    biases=update.biases,
                    seq=seq,
                )
            )
            seq += 1
            if len(frame) > link_mod.MTU:
                for frag in link_mod.fragment_frame(frame, update.version, seq):
                    outbox.send_bytes(frag, core.last_t)
                    seq += 1
            else:
                outbox.send_bytes(frame, core.last_t)
        if not frames:
            time.sleep(0.0005)
    return core
