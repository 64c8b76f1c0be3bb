"""Raw novelty rewards attached to joint observations.

Three interchangeable sources:

* ``prediction_error`` — squared error between a frozen, randomly
  initialized target map and a trainable predictor, both small feed-forward
  nets over the flattened joint observation.  Fitting one region degrades
  the fit elsewhere, so previously mastered observations regain reward after
  the predictor moves on; that resurgence is exactly the instability the
  dynamic scaler is built to damp.
* ``count_based`` — 1/sqrt(N) with N the exact visit count.
* ``constant`` — a fixed value (0 turns intrinsic motivation off).

Reading a reward never mutates a source; ``observe`` is the only update
path and is called once per collected transition.
"""

from __future__ import annotations

import numpy as np

KINDS = ("prediction_error", "count_based", "constant")


class ConstantSource:
    """Fixed reward for every observation."""

    kind = "constant"

    def __init__(self, value: float = 1.0):
        if not np.isfinite(value) or value < 0:
            raise ValueError(f"constant reward must be finite and >= 0, got {value}")
        self.value = float(value)

    def reward(self, joint_obs) -> float:
        return self.value

    def reward_batch(self, observations: np.ndarray) -> np.ndarray:
        observations = np.atleast_2d(observations)
        return np.full(observations.shape[0], self.value, dtype=np.float64)

    def observe(self, joint_obs) -> None:
        pass


class CountBasedSource:
    """Exact visit counting over discrete joint observations.

    Reward is 1/sqrt(N); an observation that was never observed is treated
    as a first visit (reward 1.0) so outputs stay finite.
    """

    kind = "count_based"

    def __init__(self):
        self.counts = {}

    @staticmethod
    def _key(joint_obs):
        return tuple(np.asarray(joint_obs, dtype=np.float64).ravel().tolist())

    def count(self, joint_obs) -> int:
        return self.counts.get(self._key(joint_obs), 0)

    def reward(self, joint_obs) -> float:
        n = self.counts.get(self._key(joint_obs), 0)
        return 1.0 / np.sqrt(n) if n > 0 else 1.0

    def reward_batch(self, observations: np.ndarray) -> np.ndarray:
        observations = np.atleast_2d(observations)
        return np.array([self.reward(row) for row in observations], dtype=np.float64)

    def observe(self, joint_obs) -> None:
        key = self._key(joint_obs)
        self.counts[key] = self.counts.get(key, 0) + 1


class PredictionErrorSource:
    """Trainable predictor chasing a frozen random target network.

    Both nets map the flattened joint observation through one tanh hidden
    layer to an 8-dimensional output; the reward is the mean squared gap.
    ``observe`` applies a single gradient step of the predictor toward the
    target's output at that observation.
    """

    kind = "prediction_error"

    def __init__(self, obs_dim: int, rng: np.random.Generator,
                 hidden: int = 32, out_dim: int = 8,
                 learning_rate: float = 1e-3, input_scale: float = 1.0):
        self.obs_dim = int(obs_dim)
        self.hidden = int(hidden)
        self.out_dim = int(out_dim)
        self.lr = float(learning_rate)
        self.input_scale = float(input_scale)

        def init_pair():
            w1 = rng.normal(0.0, 1.0 / np.sqrt(obs_dim), size=(obs_dim, hidden))
            b1 = rng.normal(0.0, 0.1, size=hidden)
            w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, out_dim))
            b2 = rng.normal(0.0, 0.1, size=out_dim)
            return w1, b1, w2, b2

        self.t_w1, self.t_b1, self.t_w2, self.t_b2 = init_pair()
        self.p_w1, self.p_b1, self.p_w2, self.p_b2 = init_pair()

    def _prep(self, observations) -> np.ndarray:
        x = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        return x * self.input_scale

    def _target(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.t_w1 + self.t_b1) @ self.t_w2 + self.t_b2

    def _predict(self, x: np.ndarray):
        h = np.tanh(x @ self.p_w1 + self.p_b1)
        return h, h @ self.p_w2 + self.p_b2

    def reward(self, joint_obs) -> float:
        return float(self.reward_batch(np.asarray(joint_obs).ravel()[None, :])[0])

    def reward_batch(self, observations: np.ndarray) -> np.ndarray:
        x = self._prep(observations)
        _, pred = self._predict(x)
        gap = pred - self._target(x)
        return np.mean(gap * gap, axis=1)

    def observe(self, joint_obs) -> None:
        x = self._prep(np.asarray(joint_obs).ravel()[None, :])
        h, pred = self._predict(x)
        d_out = 2.0 * (pred - self._target(x)) / self.out_dim
        d_h = (d_out @ self.p_w2.T) * (1.0 - h * h)
        self.p_w2 -= self.lr * (h.T @ d_out)
        self.p_b2 -= self.lr * d_out[0]
        self.p_w1 -= self.lr * (x.T @ d_h)
        self.p_b1 -= self.lr * d_h[0]


def make_source(kind: str, obs_dim: int, rng: np.random.Generator,
                constant_value: float = 1.0, predictor_lr: float = 1e-3,
                input_scale: float = 1.0):
    """Build an intrinsic source by name."""
    if kind == "prediction_error":
        return PredictionErrorSource(obs_dim, rng, learning_rate=predictor_lr,
                                     input_scale=input_scale)
    if kind == "count_based":
        return CountBasedSource()
    if kind == "constant":
        return ConstantSource(constant_value)
    raise ValueError(f"unknown intrinsic source kind {kind!r}; expected one of {KINDS}")


def intrinsic_reward(source, joint_obs) -> float:
    """Current raw novelty reward for one joint observation (read-only)."""
    return source.reward(joint_obs)


def observe(source, joint_obs):
    """Feed one collected joint observation to the source; returns the source."""
    source.observe(joint_obs)
    return source
