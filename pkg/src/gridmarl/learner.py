"""Factorized multi-agent Q-learning with lambda-return targets.

Each agent owns a utility function over (latest observation, previous
action); a mixer combines the chosen utilities into a joint value Q_tot that
is monotone non-decreasing in every input, so per-agent greedy choices
maximize the joint value.  Targets are truncated lambda-returns bootstrapped
through a lagged parameter copy, and episodes are replayed from a
prioritized buffer.

Utility backends: an exact dense table (default, suited to the maze) or a
small per-agent feed-forward net.  Mixer backends: plain summation or a
monotone feed-forward mixer whose mixing weights are kept non-negative by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .maze import NUM_ACTIONS, MazeSpec, State

NO_ACTION = -1  # previous-action sentinel for the first step of an episode

UTILITY_BACKENDS = ("tabular", "mlp")
MIXER_BACKENDS = ("additive", "monotonic-mlp")
OPTIMIZERS = ("auto", "sgd", "rmsprop")


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    td_lambda: float = 0.8
    learning_rate: float = 5e-4
    batch_size: int = 32              # episodes per update
    replay_capacity: int = 2000       # episodes
    target_sync_period: int = 200     # updates between target copies
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 50_000
    priority_exponent: float = 0.3
    uniform_replay: bool = False
    mixer: str = "additive"
    utility: str = "tabular"
    optimizer: str = "auto"           # auto: tabular -> sgd, mlp -> rmsprop

    def validate(self) -> "LearnerConfig":
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0 <= self.td_lambda <= 1:
            raise ValueError(f"td_lambda must be in [0, 1], got {self.td_lambda}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size and replay_capacity must be >= 1")
        if self.target_sync_period < 1:
            raise ValueError("target_sync_period must be >= 1")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if self.priority_exponent < 0:
            raise ValueError("priority_exponent must be >= 0")
        if self.mixer not in MIXER_BACKENDS:
            raise ValueError(f"mixer must be one of {MIXER_BACKENDS}, got {self.mixer!r}")
        if self.utility not in UTILITY_BACKENDS:
            raise ValueError(f"utility must be one of {UTILITY_BACKENDS}, got {self.utility!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        return self

    def epsilon_at(self, env_step: int) -> float:
        """Linearly annealed exploration rate, constant after the anneal window."""
        if self.eps_anneal_steps <= 0:
            return self.eps_end
        frac = min(env_step / self.eps_anneal_steps, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass
class Episode:
    """One collected episode as contiguous arrays.

    ``positions`` has T+1 rows (initial state included); ``flat_obs`` mirrors
    it with the flattened joint observation per state.  ``terminal`` marks an
    episode whose last transition ended the task (no bootstrap past it).
    The intrinsic/scaled reward slots are attached at update time.
    """

    positions: np.ndarray          # (T+1, n, 2) int16
    actions: np.ndarray            # (T, n) int8
    env_rewards: np.ndarray        # (T,) float64
    flat_obs: np.ndarray           # (T+1, n * obs_dim) float64
    terminal: bool = True
    start_step: int = 0            # global env step of the first transition
    priority: float = 1.0
    r_intrinsic: np.ndarray | None = None
    alpha: np.ndarray | None = None
    r_scale: np.ndarray | None = None

    def __post_init__(self):
        t = len(self.actions)
        if t == 0:
            raise ValueError("empty episode")
        if len(self.positions) != t + 1 or len(self.env_rewards) != t:
            raise ValueError("misaligned episode arrays")
        if not np.all(np.isfinite(self.env_rewards)):
            raise ValueError("non-finite environment reward in episode")

    def __len__(self) -> int:
        return len(self.actions)

    def prev_actions(self) -> np.ndarray:
        """(T+1, n) previous joint action per state; NO_ACTION before the first."""
        t, n = self.actions.shape
        prev = np.empty((t + 1, n), dtype=np.int64)
        prev[0] = NO_ACTION
        prev[1:] = self.actions
        return prev


def lambda_returns(combined_rewards, bootstrap_values, gamma: float,
                   lam: float, terminal: bool) -> np.ndarray:
    """Truncated lambda-return targets for one episode.

    ``bootstrap_values[i]`` is the lagged-parameter joint value of the state
    reached after step i; for a terminal episode the value of the final state
    is ignored.  Computed by the reverse recursion
    ``G_t = r_t + gamma * ((1 - lam) * v_{t+1} + lam * G_{t+1})``,
    which telescopes the weighted n-step sum exactly.
    """
    r = np.asarray(combined_rewards, dtype=np.float64)
    v = np.asarray(bootstrap_values, dtype=np.float64)
    t_len = len(r)
    if t_len == 0:
        raise ValueError("empty episode")
    if len(v) != t_len:
        raise ValueError(f"{t_len} rewards but {len(v)} bootstrap values")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(v))):
        raise ValueError("non-finite rewards or bootstrap values")
    out = np.empty(t_len, dtype=np.float64)
    nxt = 0.0 if terminal else v[t_len - 1]
    out[t_len - 1] = r[t_len - 1] + gamma * nxt
    for t in range(t_len - 2, -1, -1):
        out[t] = r[t] + gamma * ((1.0 - lam) * v[t] + lam * out[t + 1])
    return out


# ---------------------------------------------------------------------------
# utility backends
# ---------------------------------------------------------------------------


class TabularUtility:
    """Dense per-agent table over (all agents' cells as seen by the agent,
    previous action)."""

    kind = "tabular"
    MAX_ENTRIES = 50_000_000

    def __init__(self, spec: MazeSpec, params: np.ndarray | None = None):
        self.spec = spec
        n = spec.num_agents
        cells = spec.height * spec.width
        rows = cells ** n * (NUM_ACTIONS + 1)
        if rows * NUM_ACTIONS * n > self.MAX_ENTRIES:
            raise ValueError(
                f"tabular backend would need {rows * NUM_ACTIONS * n} entries; "
                "use the mlp utility backend for a maze this large"
            )
        self.num_agents = n
        self.rows = rows
        self._cells = cells
        # radix per observation slot: slot 0 is the agent's own cell
        self._radix = cells ** np.arange(n, dtype=np.int64)
        # undo optional [0,1] observation normalization when decoding floats
        if spec.normalize_obs:
            self._coord_scale = (max(spec.height - 1, 1), max(spec.width - 1, 1))
        else:
            self._coord_scale = (1, 1)
        if params is None:
            self.params = np.zeros((n, rows, NUM_ACTIONS), dtype=np.float64)
        else:
            self.params = params

    def keys_from_obs(self, obs: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        """Encode observation rows (..., n, 2n) and previous actions (..., n)
        into table rows (..., n)."""
        obs = np.asarray(obs, dtype=np.float64)
        rows = np.rint(obs[..., 0::2] * self._coord_scale[0]).astype(np.int64)
        cols = np.rint(obs[..., 1::2] * self._coord_scale[1]).astype(np.int64)
        cells = rows * self.spec.width + cols           # (..., n, n) cell per slot
        key = np.einsum("...p,p->...", cells, self._radix)
        return key * (NUM_ACTIONS + 1) + (np.asarray(prev_actions) + 1)

    def keys_from_positions(self, positions, prev_actions) -> np.ndarray:
        """Fast integer path used by the rollout loop (no float obs needed)."""
        n = self.num_agents
        w = self.spec.width
        cells = [p[0] * w + p[1] for p in positions]
        keys = np.empty(n, dtype=np.int64)
        for i in range(n):
            key = 0
            radix = 1
            key += cells[i]  # own cell in slot 0
            radix = self._cells
            for j in range(n):
                if j == i:
                    continue
                key += cells[j] * radix
                radix *= self._cells
            keys[i] = key * (NUM_ACTIONS + 1) + (prev_actions[i] + 1)
        return keys

    def q_for_keys(self, keys: np.ndarray) -> np.ndarray:
        """(..., n) keys -> (..., n, NUM_ACTIONS) utilities."""
        agent_idx = np.arange(self.num_agents)
        return self.params[agent_idx, keys]

    def q_batch(self, obs: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        return self.q_for_keys(self.keys_from_obs(obs, prev_actions))

    def clone(self) -> "TabularUtility":
        return TabularUtility(self.spec, params=self.params.copy())

    def copy_from(self, other: "TabularUtility") -> None:
        np.copyto(self.params, other.params)


class MlpUtility:
    """Per-agent two-layer net over (observation, one-hot previous action)."""

    kind = "mlp"

    def __init__(self, spec: MazeSpec, rng: np.random.Generator, hidden: int = 64,
                 weights: dict | None = None):
        self.spec = spec
        n = spec.num_agents
        self.num_agents = n
        self.in_dim = spec.obs_dim + NUM_ACTIONS + 1
        self.hidden = hidden
        self.obs_scale = 1.0 if spec.normalize_obs else 1.0 / max(spec.height - 1, spec.width - 1, 1)
        if weights is None:
            self.w1 = rng.normal(0, 1 / np.sqrt(self.in_dim), (n, self.in_dim, hidden))
            self.b1 = np.zeros((n, hidden))
            self.w2 = rng.normal(0, 1 / np.sqrt(hidden), (n, hidden, NUM_ACTIONS))
            self.b2 = np.zeros((n, NUM_ACTIONS))
        else:
            self.w1, self.b1, self.w2, self.b2 = (
                weights["w1"], weights["b1"], weights["w2"], weights["b2"])

    def _features(self, obs: np.ndarray, prev_actions: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        prev = np.asarray(prev_actions)
        onehot = np.zeros(obs.shape[:-1] + (NUM_ACTIONS + 1,))
        np.put_along_axis(onehot, (prev + 1)[..., None], 1.0, axis=-1)
        return np.concatenate([obs * self.obs_scale, onehot], axis=-1)

    def q_batch(self, obs: np.ndarray, prev_actions: np.ndarray,
                cache: dict | None = None) -> np.ndarray:
        x = self._features(obs, prev_actions)
        h = np.tanh(np.einsum("...ni,nij->...nj", x, self.w1) + self.b1)
        q = np.einsum("...nj,njk->...nk", h, self.w2) + self.b2
        if cache is not None:
            cache["x"], cache["h"] = x, h
        return q

    def backward(self, cache: dict, d_q: np.ndarray) -> dict:
        """Parameter gradients from upstream d_q (..., n, NUM_ACTIONS)."""
        x, h = cache["x"], cache["h"]
        d_h = np.einsum("...nk,njk->...nj", d_q, self.w2) * (1 - h * h)
        flat = lambda a: a.reshape(-1, *a.shape[-2:])
        xf, hf, dqf, dhf = flat(x), flat(h), flat(d_q), flat(d_h)
        return {
            "w2": np.einsum("bnj,bnk->njk", hf, dqf),
            "b2": dqf.sum(axis=0),
            "w1": np.einsum("bni,bnj->nij", xf, dhf),
            "b1": dhf.sum(axis=0),
        }

    def param_dict(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def clone(self) -> "MlpUtility":
        weights = {k: v.copy() for k, v in self.param_dict().items()}
        return MlpUtility(self.spec, rng=None, hidden=self.hidden, weights=weights)

    def copy_from(self, other: "MlpUtility") -> None:
        for k, v in self.param_dict().items():
            np.copyto(v, other.param_dict()[k])


# ---------------------------------------------------------------------------
# mixers
# ---------------------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


class AdditiveMixer:
    """Joint value as the plain sum of agent utilities."""

    kind = "additive"

    def __init__(self, num_agents: int, state_dim: int = 0):
        self.num_agents = num_agents

    def forward(self, utilities: np.ndarray, state_feats=None,
                cache: dict | None = None) -> np.ndarray:
        return np.asarray(utilities, dtype=np.float64).sum(axis=-1)

    def backward(self, cache, d_out: np.ndarray):
        d_util = np.broadcast_to(d_out[..., None], d_out.shape + (self.num_agents,))
        return d_util, {}

    def param_dict(self) -> dict:
        return {}

    def clone(self) -> "AdditiveMixer":
        return AdditiveMixer(self.num_agents)

    def copy_from(self, other) -> None:
        pass


class MonotonicMixer:
    """One-hidden-layer mixer with softplus-positive mixing weights.

    Non-negative weights composed with a monotone activation make the output
    non-decreasing in every utility for any state, so the per-agent argmax
    still maximizes the joint value.  State features enter additively and do
    not touch the utility path's sign.
    """

    kind = "monotonic-mlp"

    def __init__(self, num_agents: int, state_dim: int, rng: np.random.Generator,
                 hidden: int = 16, weights: dict | None = None):
        self.num_agents = num_agents
        self.state_dim = state_dim
        self.hidden = hidden
        if weights is None:
            self.rw1 = rng.normal(0.5, 0.2, (num_agents, hidden))
            self.b1 = np.zeros(hidden)
            self.rw2 = rng.normal(0.5, 0.2, hidden)
            self.b2 = np.zeros(1)
            self.su = rng.normal(0, 0.05, (state_dim, hidden))
            self.sv = rng.normal(0, 0.05, state_dim)
        else:
            self.rw1, self.b1, self.rw2, self.b2, self.su, self.sv = (
                weights["rw1"], weights["b1"], weights["rw2"],
                weights["b2"], weights["su"], weights["sv"])

    def forward(self, utilities: np.ndarray, state_feats: np.ndarray,
                cache: dict | None = None) -> np.ndarray:
        q = np.asarray(utilities, dtype=np.float64)
        s = np.asarray(state_feats, dtype=np.float64)
        w1 = _softplus(self.rw1)
        w2 = _softplus(self.rw2)
        z = q @ w1 + s @ self.su + self.b1
        h = _elu(z)
        out = h @ w2 + s @ self.sv + self.b2[0]
        if cache is not None:
            cache.update(q=q, s=s, z=z, h=h, w1=w1, w2=w2)
        return out

    def backward(self, cache: dict, d_out: np.ndarray):
        q, s, z, h, w1, w2 = (cache[k] for k in ("q", "s", "z", "h", "w1", "w2"))
        elu_grad = np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
        d_h = d_out[..., None] * w2
        d_z = d_h * elu_grad
        d_util = d_z @ w1.T
        flat = lambda a: a.reshape(-1, a.shape[-1])
        qf, sf, zf, hf, df = flat(q), flat(s), flat(d_z), flat(h), flat(d_out[..., None])
        grads = {
            "rw1": (qf.T @ zf) * _sigmoid(self.rw1),
            "b1": zf.sum(axis=0),
            "rw2": (hf * df).sum(axis=0) * _sigmoid(self.rw2),
            "b2": np.array([df.sum()]),
            "su": sf.T @ zf,
            "sv": (sf * df).sum(axis=0),
        }
        return d_util, grads

    def param_dict(self) -> dict:
        return {"rw1": self.rw1, "b1": self.b1, "rw2": self.rw2,
                "b2": self.b2, "su": self.su, "sv": self.sv}

    def clone(self) -> "MonotonicMixer":
        weights = {k: v.copy() for k, v in self.param_dict().items()}
        return MonotonicMixer(self.num_agents, self.state_dim, rng=None,
                              hidden=self.hidden, weights=weights)

    def copy_from(self, other) -> None:
        for k, v in self.param_dict().items():
            np.copyto(v, other.param_dict()[k])


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def state_features(spec: MazeSpec, positions: np.ndarray) -> np.ndarray:
    """Flattened, [0,1]-scaled agent positions used by the monotonic mixer."""
    pos = np.asarray(positions, dtype=np.float64)
    feats = pos.reshape(pos.shape[:-2] + (-1,)).copy()
    feats[..., 0::2] /= max(spec.height - 1, 1)
    feats[..., 1::2] /= max(spec.width - 1, 1)
    return feats


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO episode store with priority-proportional sampling.

    Sampling weight is priority ** exponent (exact uniform when the exponent
    is 0 or the uniform switch is on); draws are with replacement.
    """

    def __init__(self, capacity: int, priority_exponent: float = 0.3,
                 uniform: bool = False):
        self.capacity = capacity
        self.exponent = priority_exponent
        self.uniform = uniform
        self.episodes: list[Episode] = []
        self._next_slot = 0

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, episode: Episode) -> None:
        episode.priority = max((e.priority for e in self.episodes), default=1.0)
        if len(self.episodes) < self.capacity:
            self.episodes.append(episode)
        else:
            self.episodes[self._next_slot] = episode
            self._next_slot = (self._next_slot + 1) % self.capacity

    def probabilities(self) -> np.ndarray:
        n = len(self.episodes)
        if n == 0:
            raise ValueError("empty replay buffer")
        if self.uniform or self.exponent == 0:
            return np.full(n, 1.0 / n)
        w = np.array([e.priority for e in self.episodes], dtype=np.float64) ** self.exponent
        return w / w.sum()

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Episode]:
        idx = rng.choice(len(self.episodes), size=batch_size, p=self.probabilities())
        return [self.episodes[i] for i in idx]


# ---------------------------------------------------------------------------
# learner
# ---------------------------------------------------------------------------


class QLambdaLearner:
    """Collection-time action selection plus batched lambda-return updates."""

    def __init__(self, spec: MazeSpec, config: LearnerConfig, rng: np.random.Generator):
        self.spec = spec
        self.config = config.validate()
        n = spec.num_agents
        self.state_dim = 2 * n

        if config.utility == "tabular":
            self.utility = TabularUtility(spec)
        else:
            self.utility = MlpUtility(spec, rng)
        self.target_utility = self.utility.clone()

        if config.mixer == "additive":
            self.mixer = AdditiveMixer(n)
        else:
            self.mixer = MonotonicMixer(n, self.state_dim, rng)
        self.target_mixer = self.mixer.clone()

        self.optimizer = config.optimizer
        if self.optimizer == "auto":
            self.optimizer = "sgd" if config.utility == "tabular" else "rmsprop"
        self._rms: dict = {}

        self.replay = ReplayBuffer(config.replay_capacity, config.priority_exponent,
                                   config.uniform_replay)
        self.updates_done = 0

    # -- acting ------------------------------------------------------------

    def individual_q(self, history, agent_index: int) -> np.ndarray:
        """Per-action utilities from the latest (observation, previous action)."""
        if not history:
            raise ValueError("empty agent history")
        obs, prev = history[-1]
        prev = NO_ACTION if prev is None else prev
        full_obs = np.zeros((self.spec.num_agents, self.spec.obs_dim))
        full_obs[agent_index] = np.asarray(obs, dtype=np.float64)
        prev_row = np.full(self.spec.num_agents, NO_ACTION, dtype=np.int64)
        prev_row[agent_index] = prev
        q = self.utility.q_batch(full_obs[None], prev_row[None])[0]
        return q[agent_index].copy()

    def mix(self, chosen_utilities, state: State) -> float:
        """Joint value of the given per-agent utilities in the given state."""
        util = np.asarray(chosen_utilities, dtype=np.float64)[None, :]
        feats = state_features(self.spec, np.asarray(state.positions))[None, :]
        return float(self.mixer.forward(util, feats)[0])

    def select_actions(self, observations, prev_actions, epsilon: float,
                       rng: np.random.Generator) -> np.ndarray:
        """Independent epsilon-greedy per agent; argmax ties break low."""
        n = self.spec.num_agents
        prev = np.asarray([NO_ACTION if a is None else a for a in prev_actions])
        q = self.utility.q_batch(np.asarray(observations, dtype=np.float64)[None],
                                 prev[None])[0]
        greedy = np.argmax(q, axis=1)
        explore = rng.random(n) < epsilon
        randoms = rng.integers(0, NUM_ACTIONS, size=n)
        return np.where(explore, randoms, greedy).astype(np.int64)

    def select_actions_from_positions(self, positions, prev_actions, epsilon: float,
                                      rng: np.random.Generator) -> np.ndarray:
        """Rollout fast path for the tabular backend (integer keys, no floats)."""
        if isinstance(self.utility, TabularUtility):
            keys = self.utility.keys_from_positions(positions, prev_actions)
            q = self.utility.q_for_keys(keys)
        else:
            from .maze import joint_observation
            obs = joint_observation(self.spec, positions)
            return self.select_actions(obs, prev_actions, epsilon, rng)
        greedy = np.argmax(q, axis=1)
        n = self.spec.num_agents
        explore = rng.random(n) < epsilon
        randoms = rng.integers(0, NUM_ACTIONS, size=n)
        return np.where(explore, randoms, greedy).astype(np.int64)

    # -- learning ----------------------------------------------------------

    def _padded_batch(self, episodes: list[Episode]):
        b = len(episodes)
        n = self.spec.num_agents
        t_arr = np.array([len(e) for e in episodes], dtype=np.int64)
        t_max = int(t_arr.max())
        obs = np.zeros((b, t_max + 1, n, self.spec.obs_dim))
        prev = np.full((b, t_max + 1, n), NO_ACTION, dtype=np.int64)
        acts = np.zeros((b, t_max, n), dtype=np.int64)
        rew = np.zeros((b, t_max))
        feats = np.zeros((b, t_max + 1, self.state_dim))
        terminal = np.zeros(b, dtype=bool)
        for i, ep in enumerate(episodes):
            t = len(ep)
            obs[i, : t + 1] = ep.flat_obs.reshape(t + 1, n, self.spec.obs_dim)
            prev[i, : t + 1] = ep.prev_actions()
            acts[i, :t] = ep.actions
            if ep.r_scale is None:
                raise ValueError("episode has no scaled rewards attached")
            rew[i, :t] = ep.env_rewards + ep.r_scale
            feats[i, : t + 1] = state_features(self.spec, ep.positions)
            terminal[i] = ep.terminal
        mask = np.arange(t_max)[None, :] < t_arr[:, None]
        return t_arr, t_max, obs, prev, acts, rew, feats, terminal, mask

    def update(self, episodes: list[Episode]) -> float:
        """One optimizer step on a batch of episodes; returns the pre-step loss."""
        if not episodes:
            raise ValueError("empty batch")
        cfg = self.config
        t_arr, t_max, obs, prev, acts, rew, feats, terminal, mask = (
            self._padded_batch(episodes))
        b = len(episodes)

        # bootstrap values v[:, t] = max_a Q_tot(s_{t+1}; lagged params)
        q_next = self.target_utility.q_batch(obs[:, 1:], prev[:, 1:])
        v = self.target_mixer.forward(q_next.max(axis=-1), feats[:, 1:])
        last = np.arange(t_max)[None, :] == (t_arr[:, None] - 1)
        v = np.where(last & terminal[:, None], 0.0, v) * mask

        # lambda-return targets via the reverse recursion, padded and masked
        targets = np.zeros((b, t_max + 1))
        boundary = np.where(terminal, 0.0, v[np.arange(b), t_arr - 1])
        targets[np.arange(b), t_arr] = boundary
        gamma, lam = cfg.gamma, cfg.td_lambda
        for t in range(t_max - 1, -1, -1):
            g = rew[:, t] + gamma * ((1 - lam) * v[:, t] + lam * targets[:, t + 1])
            alive = t < t_arr
            targets[:, t] = np.where(alive, g, 0.0)
            targets[:, t] = np.where(t == t_arr, boundary, targets[:, t])
        targets = targets[:, :t_max]

        # current-parameter joint values for the taken actions
        util_cache: dict = {}
        if isinstance(self.utility, MlpUtility):
            q_all = self.utility.q_batch(obs[:, :-1], prev[:, :-1], cache=util_cache)
        else:
            keys = self.utility.keys_from_obs(obs[:, :-1], prev[:, :-1])
            q_all = self.utility.q_for_keys(keys)
        chosen = np.take_along_axis(q_all, acts[..., None], axis=-1)[..., 0]
        mix_cache: dict = {}
        q_tot = self.mixer.forward(chosen, feats[:, :-1], cache=mix_cache)

        residual = (targets - q_tot) * mask
        n_tr = int(mask.sum())
        loss = float((residual ** 2).sum() / n_tr)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss {loss} at update {self.updates_done}: "
                f"max |target| {np.abs(targets).max()}, max |Q| {np.abs(q_tot).max()}"
            )

        d_qtot_mean = (-2.0 * residual) / n_tr          # gradient of the mean loss
        d_util, mixer_grads = self.mixer.backward(mix_cache, d_qtot_mean)
        d_util = d_util * mask[..., None]

        if isinstance(self.utility, TabularUtility):
            self._tabular_step(keys, acts, residual, d_util, mask)
        else:
            d_q = np.zeros_like(q_all)
            np.put_along_axis(d_q, acts[..., None], d_util[..., None], axis=-1)
            grads = self.utility.backward(util_cache, d_q)
            self._rmsprop_step("utility", self.utility.param_dict(), grads)
        if mixer_grads:
            self._rmsprop_step("mixer", self.mixer.param_dict(), mixer_grads)

        # refresh priorities of the sampled episodes
        per_ep = np.abs(residual).sum(axis=1) / t_arr
        for ep, p in zip(episodes, per_ep):
            ep.priority = float(p) + 1e-6

        self.updates_done += 1
        if self.updates_done % cfg.target_sync_period == 0:
            self.target_sync()
        return loss

    def _tabular_step(self, keys, acts, residual, d_util, mask):
        """Occurrence-averaged TD step per touched table entry.

        The applied delta is lr * mean over the entry's batch occurrences of
        2 * residual * d(Q_tot)/d(utility), i.e. the per-visit step of plain
        SGD on the unaveraged squared error, made robust to entries that
        recur many times within one batch.
        """
        n = self.spec.num_agents
        lr = self.config.learning_rate
        agent_idx = np.broadcast_to(np.arange(n), keys.shape)
        flat_index = ((agent_idx * self.utility.rows + keys) * NUM_ACTIONS + acts)
        m = mask[..., None] & np.ones(n, dtype=bool)
        idx = flat_index[m]
        if self.optimizer == "sgd":
            # undo the mean-loss scaling: recover 2 * residual * dmix per visit
            n_tr = int(mask.sum())
            increments = (-d_util * n_tr)[m]
            uniq, inverse = np.unique(idx, return_inverse=True)
            sums = np.bincount(inverse, weights=increments)
            counts = np.bincount(inverse)
            self.utility.params.reshape(-1)[uniq] += lr * sums / counts
        else:
            grad = np.zeros(self.utility.params.size)
            np.add.at(grad, idx, d_util[m])
            uniq = np.unique(idx)
            self._rmsprop_sparse("tabular", self.utility.params.reshape(-1), grad, uniq)

    def _rmsprop_step(self, tag: str, params: dict, grads: dict,
                      rho: float = 0.99, eps: float = 1e-8) -> None:
        lr = self.config.learning_rate
        for name, p in params.items():
            g = grads[name]
            acc = self._rms.setdefault(f"{tag}.{name}", np.zeros_like(p))
            acc *= rho
            acc += (1 - rho) * g * g
            p -= lr * g / (np.sqrt(acc) + eps)

    def _rmsprop_sparse(self, tag: str, flat_params: np.ndarray, flat_grad: np.ndarray,
                        touched: np.ndarray, rho: float = 0.99, eps: float = 1e-8) -> None:
        lr = self.config.learning_rate
        acc = self._rms.setdefault(tag, np.zeros_like(flat_params))
        g = flat_grad[touched]
        acc[touched] = rho * acc[touched] + (1 - rho) * g * g
        flat_params[touched] -= lr * g / (np.sqrt(acc[touched]) + eps)

    def target_sync(self) -> None:
        """Copy current parameters into the lagged target set (idempotent)."""
        self.target_utility.copy_from(self.utility)
        self.target_mixer.copy_from(self.mixer)

    # -- persistence ---------------------------------------------------------

    def save_params(self, path) -> None:
        payload = {
            "version": np.int64(1),
            "utility_kind": self.utility.kind,
            "mixer_kind": self.mixer.kind,
            "height": self.spec.height,
            "width": self.spec.width,
            "num_agents": self.spec.num_agents,
        }
        if isinstance(self.utility, TabularUtility):
            payload["table"] = self.utility.params
        else:
            for k, v in self.utility.param_dict().items():
                payload[f"utility_{k}"] = v
        for k, v in self.mixer.param_dict().items():
            payload[f"mixer_{k}"] = v
        np.savez_compressed(path, **payload)

    def load_params(self, path) -> None:
        with np.load(path, allow_pickle=False) as archive:
            if str(archive["utility_kind"]) != self.utility.kind:
                raise ValueError(
                    f"checkpoint utility backend {archive['utility_kind']} does not "
                    f"match learner backend {self.utility.kind}")
            if isinstance(self.utility, TabularUtility):
                np.copyto(self.utility.params, archive["table"])
            else:
                for k, v in self.utility.param_dict().items():
                    np.copyto(v, archive[f"utility_{k}"])
            for k, v in self.mixer.param_dict().items():
                np.copyto(v, archive[f"mixer_{k}"])
        self.target_sync()
