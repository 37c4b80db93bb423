"""Communication layer between the fast loop and the slow trainer.

Frames are datagrams even in-process: a fixed header (magic "DMRC",
wire version, type, sequence number, payload length), a little-endian
payload, and a trailing CRC32 over header plus payload.  The simulated
channel drops, delays, and optionally reorders frames deterministically
per seed; the real transport is UDP with the same frame bytes, chunking
oversized feature updates into fragments that are installed whole or not
at all.
"""

from __future__ import annotations

import heapq
import socket as socket_mod
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import net as net_mod

MAGIC = b"DMRC"
WIRE_VERSION = 1
HEADER_LEN = 14  # magic 4 + version 1 + type 1 + seq 4 + payload_len 4
FRAME_OVERHEAD = HEADER_LEN + 4  # plus trailing CRC32

TYPE_TELEMETRY = 1
TYPE_FEATURE_UPDATE = 2
TYPE_SHUTDOWN = 3
TYPE_FRAGMENT = 4

MTU = 1400
FRAGMENT_HEADER = struct.Struct("<IHH")  # version, index, total


class DecodeError(ValueError):
    pass


class BadMagic(DecodeError):
    pass


class BadCrc(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


@dataclass(frozen=True)
class Telemetry:
    seq: int
    t: float
    x: np.ndarray
    nu_ad: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class FeatureUpdate:
    version: int
    weights: tuple  # inner-layer stack
    biases: tuple
    seq: int = 0


@dataclass(frozen=True)
class Shutdown:
    seq: int = 0


@dataclass(frozen=True)
class Fragment:
    version: int
    index: int
    total: int
    chunk: bytes
    seq: int = 0


def _frame(msg_type: int, seq: int, payload: bytes) -> bytes:
    header = MAGIC + struct.pack(
        "<BBII", WIRE_VERSION, msg_type, seq & 0xFFFFFFFF, len(payload)
    )
    body = header + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def encode(msg) -> bytes:
    """Serialize a message into one wire frame."""
    if isinstance(msg, Telemetry):
        payload = struct.pack("<d", msg.t)
        payload += np.ascontiguousarray(msg.x, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(msg.nu_ad, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(msg.phi, dtype="<f8").tobytes()
        return _frame(TYPE_TELEMETRY, msg.seq, payload)
    if isinstance(msg, FeatureUpdate):
        payload = net_mod.pack_layers(msg.version, msg.weights, msg.biases)
        return _frame(TYPE_FEATURE_UPDATE, msg.seq, payload)
    if isinstance(msg, Shutdown):
        return _frame(TYPE_SHUTDOWN, msg.seq, b"")
    if isinstance(msg, Fragment):
        payload = FRAGMENT_HEADER.pack(msg.version, msg.index, msg.total) + msg.chunk
        return _frame(TYPE_FRAGMENT, msg.seq, payload)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def decode(data: bytes, dims=None):
    """Parse one frame back into a typed message.

    ``dims`` is the negotiated (n, m, k) needed to split telemetry payloads.
    Arbitrary input bytes are tolerated: malformed frames raise one of the
    DecodeError subclasses and are never fatal to callers.
    """
    if len(data) < FRAME_OVERHEAD:
        raise Truncated(f"frame of {len(data)} bytes is shorter than a header")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    wire_version, msg_type, seq, payload_len = struct.unpack(
        "<BBII", data[4:HEADER_LEN]
    )
    if wire_version != WIRE_VERSION:
        raise DecodeError(f"unsupported wire version {wire_version}")
    if len(data) != FRAME_OVERHEAD + payload_len:
        raise Truncated(
            f"frame length {len(data)} does not match payload_len {payload_len}"
        )
    body = data[: HEADER_LEN + payload_len]
    (crc,) = struct.unpack("<I", data[HEADER_LEN + payload_len :])
    if crc != zlib.crc32(body) & 0xFFFFFFFF:
        raise BadCrc("frame CRC mismatch")
    payload = data[HEADER_LEN : HEADER_LEN + payload_len]

    if msg_type == TYPE_TELEMETRY:
        if dims is None:
            raise DecodeError("telemetry decode needs the negotiated (n, m, k)")
        n, m, k = dims
        expect = 8 * (1 + n + m + k)
        if payload_len != expect:
            raise Truncated(f"telemetry payload {payload_len} != expected {expect}")
        (t,) = struct.unpack("<d", payload[:8])
        vals = np.frombuffer(payload, dtype="<f8", offset=8).astype(float)
        return Telemetry(
            seq=seq, t=t, x=vals[:n], nu_ad=vals[n : n + m], phi=vals[n + m :]
        )
    if msg_type == TYPE_FEATURE_UPDATE:
        try:
            version, weights, biases = net_mod.unpack_layers(payload)
        except net_mod.SnapshotError as exc:
            raise DecodeError(f"feature update payload invalid: {exc}") from exc
        return FeatureUpdate(
            version=version, weights=tuple(weights), biases=tuple(biases), seq=seq
        )
    if msg_type == TYPE_SHUTDOWN:
        if payload_len != 0:
            raise Truncated("shutdown frame carries a payload")
        return Shutdown(seq=seq)
    if msg_type == TYPE_FRAGMENT:
        if payload_len < FRAGMENT_HEADER.size:
            raise Truncated("fragment payload shorter than its sub-header")
        version, index, total = FRAGMENT_HEADER.unpack(
            payload[: FRAGMENT_HEADER.size]
        )
        return Fragment(
            version=version,
            index=index,
            total=total,
            chunk=payload[FRAGMENT_HEADER.size :],
            seq=seq,
        )
    raise UnknownType(f"unknown frame type {msg_type}")


# ---------------------------------------------------------------------------
# Simulated lossy channel
# ---------------------------------------------------------------------------


@dataclass
class ChannelModel:
    """Seeded drop/latency model; delivered payloads are bit-identical."""

    drop_prob: float = 0.0
    latency_ms: float = 20.0
    jitter_ms: float = 5.0
    reorder: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_prob < 1.0) and self.drop_prob != 1.0:
            raise ValueError("drop probability must be in [0, 1]")
        self._rng = np.random.default_rng(self.seed)
        self._last_arrival = -np.inf

    def send(self, t: float):
        """Fate of one frame sent at time ``t``: arrival time or None."""
        if self.drop_prob > 0.0 and self._rng.random() < self.drop_prob:
            return None
        delay = self.latency_ms * 1e-3
        if self.jitter_ms > 0.0:
            delay += self._rng.exponential(self.jitter_ms * 1e-3)
        arrival = t + delay
        if not self.reorder:
            arrival = max(arrival, self._last_arrival)
            self._last_arrival = arrival
        return arrival


def channel_transfer(ch: ChannelModel, frames):
    """Push (frame, send_time) pairs through the channel.

    Returns the delivered (frame, arrival_time) sequence in arrival order
    (stable in send order for ties).
    """
    delivered = []
    last_t = -np.inf
    for i, (frame, t) in enumerate(frames):
        if t < last_t:
            raise ValueError("send times must be non-decreasing")
        last_t = t
        arrival = ch.send(t)
        if arrival is not None:
            delivered.append((arrival, i, frame))
    delivered.sort(key=lambda item: (item[0], item[1]))
    return [(frame, arrival) for arrival, _, frame in delivered]


class DeliveryQueue:
    """Channel plus an arrival-ordered queue, for the simulated-time loop."""

    def __init__(self, channel: ChannelModel):
        self.channel = channel
        self._heap = []
        self._count = 0
        self.sent = 0
        self.dropped = 0

    def send(self, frame: bytes, t: float) -> None:
        self.sent += 1
        arrival = self.channel.send(t)
        if arrival is None:
            self.dropped += 1
            return
        heapq.heappush(self._heap, (arrival, self._count, frame))
        self._count += 1

    def poll(self, t: float):
        out = []
        while self._heap and self._heap[0][0] <= t:
            out.append(heapq.heappop(self._heap)[2])
        return out


# ---------------------------------------------------------------------------
# Fragmentation of oversized frames (real-socket mode)
# ---------------------------------------------------------------------------


def fragment_frame(frame: bytes, version: int, seq_start: int = 0):
    """Split an encoded frame into datagram-sized fragment frames."""
    chunk_size = MTU - FRAME_OVERHEAD - FRAGMENT_HEADER.size
    chunks = [frame[i : i + chunk_size] for i in range(0, len(frame), chunk_size)]
    total = len(chunks)
    return [
        encode(
            Fragment(
                version=version, index=i, total=total, chunk=c, seq=seq_start + i
            )
        )
        for i, c in enumerate(chunks)
    ]


class Reassembler:
    """Collects fragments per version; incomplete versions are discarded
    whole when a newer version starts (no partial installs, ever)."""

    def __init__(self):
        self._version = None
        self._total = 0
        self._chunks = {}
        self.discarded = 0

    def feed(self, frag: Fragment):
        if self._version is not None and frag.version != self._version:
            if self._chunks and len(self._chunks) < self._total:
                self.discarded += 1
            self._version = None
            self._chunks = {}
        if self._version is None:
            self._version = frag.version
            self._total = frag.total
            self._chunks = {}
        if frag.total != self._total:
            self.discarded += 1
            self._version = None
            self._chunks = {}
            return None
        self._chunks[frag.index] = frag.chunk
        if len(self._chunks) == self._total:
            data = b"".join(self._chunks[i] for i in range(self._total))
            self._version = None
            self._chunks = {}
            return data
        return None


# ---------------------------------------------------------------------------
# Endpoints: one interface over simulated queues and real UDP sockets
# ---------------------------------------------------------------------------


class SimEndpoint:
    """One side of an in-process datagram pair."""

    def __init__(self, tx: DeliveryQueue, rx: DeliveryQueue):
        self._tx = tx
        self._rx = rx

    def send_bytes(self, frame: bytes, t: float = 0.0) -> None:
        self._tx.send(frame, t)

    def poll(self, t: float = 0.0):
        return self._rx.poll(t)


def sim_endpoint_pair(up_channel: ChannelModel, down_channel: ChannelModel):
    """(fast side, slow side) endpoints over two simulated channels."""
    up = DeliveryQueue(up_channel)
    down = DeliveryQueue(down_channel)
    fast = SimEndpoint(tx=up, rx=down)
    slow = SimEndpoint(tx=down, rx=up)
    return fast, slow


class UdpEndpoint:
    """Non-blocking UDP datagram endpoint bound to a local port."""

    def __init__(self, local=("127.0.0.1", 0), remote=None):
        self._sock = socket_mod.socket(socket_mod.AF_INET, socket_mod.SOCK_DGRAM)
        self._sock.bind(local)
        self._sock.setblocking(False)
        self.remote = remote

    @property
    def local_addr(self):
        return self._sock.getsockname()

    def send_bytes(self, frame: bytes, t: float = 0.0) -> None:
        self._sock.sendto(frame, self.remote)

    def poll(self, t: float = 0.0):
        frames = []
        while True:
            try:
                data, _ = self._sock.recvfrom(65536)
            except BlockingIOError:
                return frames
            frames.append(data)

    def close(self) -> None:
        self._sock.close()
