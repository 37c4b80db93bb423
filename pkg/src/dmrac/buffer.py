"""Qualified training-data store for the slow trainer.

Admission uses a normalized minimum feature-space distance (the kernel
independence test gamma); eviction at capacity removes the entry whose
deletion maximizes the smallest singular value of the stored feature
matrix; minibatches are drawn uniformly without replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import min_singular_value

EPS_DEN = 1e-9


class InsufficientData(ValueError):
    """Fewer stored samples than the requested minibatch size."""


@dataclass
class BufferEntry:
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    tick: int


class ReplayBuffer:
    """Capacity-bounded store of (state, uncertainty estimate, feature) rows."""

    def __init__(self, capacity: int, tolerance: float):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        if tolerance < 0.0:
            raise ValueError("tolerance must be non-negative")
        self.capacity = int(capacity)
        self.tolerance = float(tolerance)
        self.entries: list[BufferEntry] = []
        self._feat = None  # cached |B| x k feature matrix, rows match entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def feature_matrix(self) -> np.ndarray:
        if self._feat is None:
            self._feat = (
                np.stack([e.phi for e in self.entries])
                if self.entries
                else np.zeros((0, 0))
            )
        return self._feat

    def gamma(self, phi) -> float:
        """Novelty of ``phi``: min distance to stored features over ||phi||.

        An empty buffer returns +inf so the first sample always admits.
        """
        if not self.entries:
            return math.inf
        phi = np.asarray(phi, dtype=float)
        dists = np.linalg.norm(self.feature_matrix - phi, axis=1)
        return float(dists.min() / max(float(np.linalg.norm(phi)), EPS_DEN))

    def insert_if_novel(self, x, y, phi, tick: int) -> bool:
        """Admit the sample iff gamma >= tolerance, evicting at capacity."""
        if self.gamma(phi) < self.tolerance:
            return False
        if len(self.entries) >= self.capacity:
            self.evict_svd_max()
        self.entries.append(
            BufferEntry(
                x=np.asarray(x, dtype=float).copy(),
                y=np.asarray(y, dtype=float).copy(),
                phi=np.asarray(phi, dtype=float).copy(),
                tick=int(tick),
            )
        )
        self._feat = None
        return True

    def evict_svd_max(self) -> int:
        """Drop the entry whose removal maximizes sigma_min of the feature
        matrix; exact ties go to the oldest tick.  Returns the removed index.

        sigma_min of each single-deletion candidate is evaluated through the
        k x k Gram matrix (sigma_min(X)^2 = lambda_min(X'X), with the row's
        outer product subtracted), which is exact and far cheaper than one
        SVD per candidate.
        """
        if not self.entries:
            raise InsufficientData("cannot evict from an empty buffer")
        feats = self.feature_matrix
        gram = feats.T @ feats
        best_idx = 0
        best_sigma = -1.0
        best_tick = None
        for i in range(len(self.entries)):
            if len(self.entries) - 1 < feats.shape[1]:
                # Wide remainder: rank < k, work on the row-side Gram instead.
                remaining = np.delete(feats, i, axis=0)
                sigma = (
                    math.sqrt(
                        max(float(np.linalg.eigvalsh(remaining @ remaining.T)[0]), 0.0)
                    )
                    if remaining.shape[0] > 0
                    else math.inf
                )
            else:
                reduced = gram - np.outer(feats[i], feats[i])
                sigma = math.sqrt(max(float(np.linalg.eigvalsh(reduced)[0]), 0.0))
            tick = self.entries[i].tick
            if sigma > best_sigma or (sigma == best_sigma and tick < best_tick):
                best_idx, best_sigma, best_tick = i, sigma, tick
        del self.entries[best_idx]
        self._feat = None
        return best_idx

    def sample_minibatch(self, m: int, rng) -> list[tuple]:
        """Uniform draw of ``m`` (x, y) pairs without replacement."""
        if m > len(self.entries):
            raise InsufficientData(f"requested {m} of {len(self.entries)} samples")
        idx = rng.choice(len(self.entries), size=m, replace=False)
        return [(self.entries[i].x, self.entries[i].y) for i in idx]

    def arrays(self):
        """Stacked (X, Y) over the whole buffer, in insertion order."""
        xs = np.stack([e.x for e in self.entries])
        ys = np.stack([e.y for e in self.entries])
        return xs, ys

    def dump_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if not self.entries:
                fh.write("tick\n")
                return
            n = self.entries[0].x.shape[0]
            m = self.entries[0].y.shape[0]
            k = self.entries[0].phi.shape[0]
            cols = (
                ["tick"]
                + [f"x{i}" for i in range(n)]
                + [f"y{i}" for i in range(m)]
                + [f"phi{i}" for i in range(k)]
            )
            fh.write(",".join(cols) + "\n")
            for e in self.entries:
                row = [str(e.tick)]
                row += [repr(float(v)) for v in e.x]
                row += [repr(float(v)) for v in e.y]
                row += [repr(float(v)) for v in e.phi]
                fh.write(",".join(row) + "\n")
