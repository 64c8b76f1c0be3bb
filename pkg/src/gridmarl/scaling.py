"""Dynamic scaling of intrinsic rewards by joint-observation familiarity.

An append-only buffer collects the flattened joint observations of every
tenth episode.  For a query observation o the scaler draws a small uniform
subsample of the buffer, keeps the k nearest entries under Euclidean
distance, and converts their summed kernel similarity into a multiplier

    alpha(o) = 1 / (sqrt(sum_N K(o, o_N)) + eps),      K(x, y) = eps / (d^2(x, y) + eps)

so that familiar observations (many near-identical neighbors) damp the raw
novelty reward while unfamiliar ones amplify it.  The scaled reward is the
plain product alpha * r.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScalerConfig:
    k: int = 10                  # nearest neighbors kept
    eps: float = 0.001           # kernel / stability constant
    sample_size: int = 10        # buffer subsample used to approximate k-NN
    store_period: int = 10       # episodes between buffer stores
    alpha_empty: float = 1.0     # multiplier while the buffer is empty
    alpha_max: float = 0.0       # optional clamp; <= 0 disables it

    def validate(self) -> "ScalerConfig":
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.sample_size < self.k:
            raise ValueError(
                f"sample_size ({self.sample_size}) must be >= k ({self.k})"
            )
        if self.store_period < 1:
            raise ValueError(f"store_period must be >= 1, got {self.store_period}")
        if self.alpha_empty <= 0:
            raise ValueError(f"alpha_empty must be > 0, got {self.alpha_empty}")
        return self


class ObservationBuffer:
    """Append-only store of flattened joint-observation vectors.

    Entries are never deleted; an internal array doubles as needed so reads
    can hand out contiguous views without copying.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._data = np.empty((256, self.dim), dtype=np.float64)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    @property
    def data(self) -> np.ndarray:
        """View of the stored vectors, shape (len(self), dim)."""
        return self._data[: self._size]

    def append(self, observations: np.ndarray) -> None:
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        if obs.shape[1] != self.dim:
            raise ValueError(
                f"observation dimensionality {obs.shape[1]} does not match buffer dim {self.dim}"
            )
        needed = self._size + obs.shape[0]
        if needed > self._data.shape[0]:
            grown = max(needed, 2 * self._data.shape[0])
            new = np.empty((grown, self.dim), dtype=np.float64)
            new[: self._size] = self._data[: self._size]
            self._data = new
        self._data[self._size : needed] = obs
        self._size = needed

    def save(self, path) -> None:
        np.savez_compressed(path, version=1, observations=self.data)

    @classmethod
    def load(cls, path) -> "ObservationBuffer":
        with np.load(path) as archive:
            obs = archive["observations"]
        buf = cls(obs.shape[1])
        if obs.shape[0]:
            buf.append(obs)
        return buf


def maybe_store(buffer: ObservationBuffer, episode_index: int,
                episode_observations, store_period: int = 10) -> ObservationBuffer:
    """Append the episode's joint observations iff the cadence fires.

    Stores on episode indices that are multiples of ``store_period``
    (index 0 included, so the very first episode seeds the buffer).
    """
    if episode_index % store_period == 0:
        obs = np.atleast_2d(np.asarray(episode_observations, dtype=np.float64))
        if obs.size:
            buffer.append(obs)
    return buffer


def kernel(x: np.ndarray, y: np.ndarray, eps: float = 0.001) -> float:
    """Similarity in (0, 1]: eps / (squared Euclidean distance + eps)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimensionality mismatch: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return eps / (d2 + eps)


def _sample_rows(n: int, size: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """(batch, size) index matrix, each row uniform without replacement from range(n).

    For small pools a random-matrix argsort gives exact permutation sampling;
    for large pools rejection on duplicate rows is cheaper (duplicates are
    vanishingly rare once n >> size).
    """
    if n <= 2048:
        order = np.argsort(rng.random((batch, n)), axis=1)
        return order[:, :size]
    idx = rng.integers(0, n, size=(batch, size))
    while True:
        srt = np.sort(idx, axis=1)
        bad = np.nonzero((np.diff(srt, axis=1) == 0).any(axis=1))[0]
        if bad.size == 0:
            return idx
        idx[bad] = rng.integers(0, n, size=(bad.size, size))


def alpha_batch(observations: np.ndarray, buffer: ObservationBuffer,
                config: ScalerConfig, rng: np.random.Generator) -> np.ndarray:
    """Scaling factors for a batch of flattened joint observations.

    Per observation: draw ``sample_size`` buffer entries uniformly without
    replacement (the whole buffer if it is smaller), keep the ``k`` nearest,
    and apply the inverse-sqrt kernel-sum rule.  An empty buffer yields
    ``alpha_empty``; a positive ``alpha_max`` clamps from above.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    m = obs.shape[0]
    n = len(buffer)
    if n == 0:
        return np.full(m, config.alpha_empty, dtype=np.float64)
    if obs.shape[1] != buffer.dim:
        raise ValueError(
            f"observation dimensionality {obs.shape[1]} does not match buffer dim {buffer.dim}"
        )
    data = buffer.data
    if n <= config.sample_size:
        # Whole buffer: the sampled approximation coincides with exact k-NN.
        diff = obs[:, None, :] - data[None, :, :]
    else:
        idx = _sample_rows(n, config.sample_size, m, rng)
        diff = obs[:, None, :] - data[idx]
    d2 = np.einsum("mkd,mkd->mk", diff, diff)
    if d2.shape[1] > config.k:
        d2 = np.partition(d2, config.k - 1, axis=1)[:, : config.k]
    sims = config.eps / (d2 + config.eps)
    alphas = 1.0 / (np.sqrt(sims.sum(axis=1)) + config.eps)
    if config.alpha_max > 0:
        np.minimum(alphas, config.alpha_max, out=alphas)
    return alphas


def alpha(obs: np.ndarray, buffer: ObservationBuffer, config: ScalerConfig,
          rng: np.random.Generator) -> float:
    """Scaling factor for a single flattened joint observation."""
    return float(alpha_batch(np.asarray(obs, dtype=np.float64)[None, :], buffer, config, rng)[0])


def scale(r_intrinsic: float, alpha_value: float) -> float:
    """Scaled reward: the exact product alpha * r."""
    out = alpha_value * r_intrinsic
    if not np.isfinite(out):
        raise ValueError(f"non-finite scaled reward from alpha={alpha_value}, r={r_intrinsic}")
    return out
