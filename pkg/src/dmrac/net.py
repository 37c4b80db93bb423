"""Fully connected network written directly on numpy, trained by plain SGD.

The last hidden layer doubles as the feature map served to the fast
adaptive loop, so hidden activations are tanh (bounded) and dropout uses
the inverted convention: evaluation applies no rescaling, which keeps the
features seen by the controller identical to the features the trainer
evaluates its losses with.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

SNAPSHOT_MAGIC = b"MLPS"


class NonFiniteOutput(FloatingPointError):
    """Forward pass produced NaN or Inf."""


class NonFiniteGradient(FloatingPointError):
    """Backward pass produced NaN or Inf."""


class SnapshotError(ValueError):
    """Parameter snapshot bytes are malformed."""


class SnapshotCrcError(SnapshotError):
    """Parameter snapshot fails its CRC32 check."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: ``widths`` runs input..hidden..feature..output.

    The penultimate width is the feature dimension consumed by the fast
    adaptive layer.  ``dropout`` is one keep-independent drop probability per
    hidden layer (a scalar is broadcast).
    """

    widths: tuple
    activation: str = "tanh"
    dropout: tuple | float = 0.0
    init: str = "glorot_uniform"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.init != "glorot_uniform":
            raise ValueError(f"unsupported init scheme {self.init!r}")
        n_hidden = len(widths) - 2
        if isinstance(self.dropout, (int, float)):
            drops = (float(self.dropout),) * n_hidden
        else:
            drops = tuple(float(p) for p in self.dropout)
        if len(drops) != n_hidden:
            raise ValueError(f"need {n_hidden} dropout rates, got {len(drops)}")
        if any(not (0.0 <= p < 1.0) for p in drops):
            raise ValueError(f"dropout rates must be in [0,1), got {drops}")
        object.__setattr__(self, "dropout", drops)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def feature_dim(self) -> int:
        return self.widths[-2]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MlpParams:
    """Immutable parameter snapshot; training produces new values.

    ``version`` is bumped only when the trainer publishes, never by SGD.
    """

    spec: MlpSpec
    weights: tuple
    biases: tuple
    version: int = 0

    def __post_init__(self):
        expect = layer_shapes(self.spec.widths)
        got = tuple(w.shape for w in self.weights)
        if got != expect:
            raise ValueError(f"weight shapes {got} do not match spec {expect}")
        for w, b, (rows, _) in zip(self.weights, self.biases, expect):
            if b.shape != (rows,):
                raise ValueError(f"bias shape {b.shape} does not match rows {rows}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("parameters must be finite")
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))


@dataclass(frozen=True)
class Gradients:
    weights: tuple
    biases: tuple


def layer_shapes(widths) -> tuple:
    return tuple((widths[i + 1], widths[i]) for i in range(len(widths) - 1))


def init_params(spec: MlpSpec) -> MlpParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases.

    Bit-deterministic for a given spec seed.
    """
    rng = np.random.default_rng(spec.seed)
    weights = []
    biases = []
    for rows, cols in layer_shapes(spec.widths):
        bound = np.sqrt(6.0 / (rows + cols))
        weights.append(rng.uniform(-bound, bound, size=(rows, cols)))
        biases.append(np.zeros(rows))
    return MlpParams(spec=spec, weights=tuple(weights), biases=tuple(biases))


@dataclass
class ForwardCache:
    """Per-layer activations and dropout masks from one forward pass."""

    x: np.ndarray
    hidden: list  # [(activation_pre_dropout, activation_post_dropout, mask|None)]
    y: np.ndarray


def forward(params: MlpParams, x, train: bool = False, rng=None):
    """Evaluate the network; returns (output, cache).

    Train mode applies inverted dropout (kept units divided by the keep
    probability), so eval mode needs no rescaling.
    """
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    if train and rng is None and any(p > 0.0 for p in params.spec.dropout):
        raise ValueError("train-mode forward with dropout needs an rng")

    a = x
    hidden = []
    drops = params.spec.dropout
    for i in range(params.spec.n_layers - 1):
        pre = np.tanh(params.weights[i] @ a + params.biases[i])
        mask = None
        post = pre
        if train and drops[i] > 0.0:
            keep = 1.0 - drops[i]
            mask = rng.random(pre.shape) >= drops[i]
            post = pre * mask / keep
        hidden.append((pre, post, mask))
        a = post
    y = params.weights[-1] @ a + params.biases[-1]
    if not np.isfinite(y).all():
        raise NonFiniteOutput("network output non-finite")
    return y, ForwardCache(x=x, hidden=hidden, y=y)


def features(params: MlpParams, x) -> np.ndarray:
    """Eval-mode activation of the penultimate (feature) layer."""
    return hidden_features(params.weights[:-1], params.biases[:-1], x)


def hidden_features(weights, biases, x) -> np.ndarray:
    """Run a tanh stack on its own; used for published inner-layer snapshots."""
    a = np.asarray(x, dtype=float)
    for w, b in zip(weights, biases):
        a = np.tanh(w @ a + b)
    return a


def _batch_forward(params: MlpParams, xs, train: bool, rng):
    acts = [xs]  # post-dropout activations, acts[0] is the input batch
    pres = []
    masks = []
    drops = params.spec.dropout
    a = xs
    for i in range(params.spec.n_layers - 1):
        pre = np.tanh(a @ params.weights[i].T + params.biases[i])
        mask = None
        post = pre
        if train and drops[i] > 0.0:
            keep = 1.0 - drops[i]
            mask = rng.random(pre.shape) >= drops[i]
            post = pre * mask / keep
        pres.append(pre)
        masks.append(mask)
        acts.append(post)
        a = post
    y = a @ params.weights[-1].T + params.biases[-1]
    return y, acts, pres, masks


def batch_loss(params: MlpParams, xs, ys) -> float:
    """Eval-mode mean squared l2 loss over a batch."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    y, _, _, _ = _batch_forward(params, xs, train=False, rng=None)
    return float(np.mean(np.sum((ys - y) ** 2, axis=1)))


def backprop(params: MlpParams, xs, ys, rng=None, train: bool = True):
    """Exact reverse-mode gradients of the mean squared l2 batch loss.

    ``train=True`` realizes dropout masks (drawn from ``rng``) and returns
    the exact gradients for those masks.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    m = xs.shape[0]
    if m < 1:
        raise ValueError("batch must hold at least one sample")
    if train and rng is None and any(p > 0.0 for p in params.spec.dropout):
        raise ValueError("train-mode backprop with dropout needs an rng")

    y, acts, pres, masks = _batch_forward(params, xs, train=train, rng=rng)
    resid = y - ys
    loss = float(np.mean(np.sum(resid**2, axis=1)))

    grad_w = [None] * params.spec.n_layers
    grad_b = [None] * params.spec.n_layers
    delta = (2.0 / m) * resid
    grad_w[-1] = delta.T @ acts[-1]
    grad_b[-1] = delta.sum(axis=0)
    d_act = delta @ params.weights[-1]
    for i in range(params.spec.n_layers - 2, -1, -1):
        if masks[i] is not None:
            keep = 1.0 - params.spec.dropout[i]
            d_act = d_act * masks[i] / keep
        d_pre = d_act * (1.0 - pres[i] ** 2)
        grad_w[i] = d_pre.T @ acts[i]
        grad_b[i] = d_pre.sum(axis=0)
        if i > 0:
            d_act = d_pre @ params.weights[i]

    for g in grad_w + grad_b:
        if not np.isfinite(g).all():
            raise NonFiniteGradient("gradient non-finite")
    return Gradients(weights=tuple(grad_w), biases=tuple(grad_b)), loss


def sgd_step(params: MlpParams, grads: Gradients, lr: float) -> MlpParams:
    """Plain SGD update ``theta - lr * g``; the version counter is untouched."""
    if lr < 0.0:
        raise ValueError("learning rate must be non-negative")
    weights = tuple(w - lr * g for w, g in zip(params.weights, grads.weights))
    biases = tuple(b - lr * g for b, g in zip(params.biases, grads.biases))
    return replace(params, weights=weights, biases=biases)


def with_version(params: MlpParams, version: int) -> MlpParams:
    return replace(params, version=int(version))


# ---------------------------------------------------------------------------
# Snapshot wire/file format ("MLPS"): little endian, magic + u16 version +
# u16 layer count, then per layer u32 rows, u32 cols, rows*cols f64 weights
# (row major) and rows f64 biases, closed by a CRC32 of everything before it.
# ---------------------------------------------------------------------------


def pack_layers(version: int, weights, biases) -> bytes:
    if not (0 <= version <= 0xFFFF):
        raise ValueError(f"snapshot version must fit u16, got {version}")
    parts = [SNAPSHOT_MAGIC, struct.pack("<HH", version, len(weights))]
    for w, b in zip(weights, biases):
        w = np.ascontiguousarray(w, dtype="<f8")
        b = np.ascontiguousarray(b, dtype="<f8")
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(w.tobytes())
        parts.append(b.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unpack_layers(data: bytes):
    """Parse snapshot bytes; returns (version, weights, biases)."""
    if len(data) < 12:
        raise SnapshotError(f"snapshot truncated at {len(data)} bytes")
    if data[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad snapshot magic {data[:4]!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if crc != zlib.crc32(data[:-4]) & 0xFFFFFFFF:
        raise SnapshotCrcError("snapshot CRC mismatch")
    version, n_layers = struct.unpack("<HH", data[4:8])
    off = 8
    end = len(data) - 4
    weights = []
    biases = []
    for _ in range(n_layers):
        if off + 8 > end:
            raise SnapshotError("snapshot truncated inside layer header")
        rows, cols = struct.unpack("<II", data[off : off + 8])
        off += 8
        if rows < 1 or cols < 1:
            raise SnapshotError(f"invalid layer shape {rows}x{cols}")
        nbytes = 8 * rows * (cols + 1)
        if off + nbytes > end:
            raise SnapshotError("snapshot truncated inside layer data")
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
        off += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        weights.append(w.reshape(rows, cols).astype(float))
        biases.append(b.astype(float))
    if off != end:
        raise SnapshotError(f"{end - off} trailing bytes after last layer")
    for w, b in zip(weights, biases):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise SnapshotError("snapshot holds non-finite values")
    return version, weights, biases


def save_params(params: MlpParams) -> bytes:
    return pack_layers(params.version, params.weights, params.biases)


def load_params(data: bytes, spec: MlpSpec | None = None) -> MlpParams:
    """Rebuild params from snapshot bytes.

    Without a spec the architecture is inferred from the stored shapes
    (tanh hidden layers, no dropout); passing a spec validates shapes.
    """
    version, weights, biases = unpack_layers(data)
    widths = [weights[0].shape[1]] + [w.shape[0] for w in weights]
    if spec is None:
        spec = MlpSpec(widths=tuple(widths))
    elif tuple(spec.widths) != tuple(widths):
        raise SnapshotError(
            f"snapshot widths {tuple(widths)} do not match spec {tuple(spec.widths)}"
        )
    return MlpParams(
        spec=spec, weights=tuple(weights), biases=tuple(biases), version=version
    )
