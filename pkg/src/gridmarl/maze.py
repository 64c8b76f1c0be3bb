"""Two-agent grid maze with a coordinated corner-occupation team reward.

The maze is a deterministic, fully cooperative task: every agent moves one
cell per step (or idles), walls and borders block movement, and the team
earns a single reward of 100 only when all agents stand on pairwise-distinct
goal cells at the same time.  Each agent observes its own coordinates and
those of every teammate.

Maps are plain ASCII::

    '#'  wall
    '.'  free cell
    'G'  goal cell
    0-9  start cell of the agent with that index

The shipped default is an open 6x12 grid with goals in the four corners and
starts in the two most central cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Action indices. Argmax ties break toward the lowest index, so UP wins an
# all-equal tie.
UP, DOWN, LEFT, RIGHT, IDLE = range(5)
NUM_ACTIONS = 5
ACTION_NAMES = ("up", "down", "left", "right", "idle")
ACTION_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))

GOAL_REWARD = 100.0

DEFAULT_MAP = """\
G..........G
............
.....0......
......1.....
............
G..........G
"""


class MapError(ValueError):
    """Raised for malformed map text or an inconsistent maze description."""


@dataclass(frozen=True)
class MazeSpec:
    """Static description of a maze instance."""

    height: int = 6
    width: int = 12
    walls: frozenset = frozenset()
    starts: tuple = ((2, 5), (3, 6))
    goal_cells: frozenset = frozenset({(0, 0), (0, 11), (5, 0), (5, 11)})
    horizon: int = 50
    normalize_obs: bool = False

    @property
    def num_agents(self) -> int:
        return len(self.starts)

    @property
    def obs_dim(self) -> int:
        """Length of one agent's observation vector (all agents' coordinates)."""
        return 2 * self.num_agents

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def validate(self) -> "MazeSpec":
        """Check the invariants; returns self so construction can chain."""
        if self.height < 1 or self.width < 1:
            raise MapError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if self.horizon < 1:
            raise MapError(f"horizon must be >= 1, got {self.horizon}")
        if self.num_agents < 2:
            raise MapError(f"need at least 2 agents, got {self.num_agents}")
        for i, cell in enumerate(self.starts):
            if not self.in_bounds(cell):
                raise MapError(f"start of agent {i} at {cell} is out of bounds")
            if cell in self.walls:
                raise MapError(f"start of agent {i} at {cell} is a wall")
        for cell in self.goal_cells:
            if not self.in_bounds(cell):
                raise MapError(f"goal cell {cell} is out of bounds")
            if cell in self.walls:
                raise MapError(f"goal cell {cell} is a wall")
        if len(self.goal_cells) < self.num_agents:
            raise MapError(
                f"{len(self.goal_cells)} goal cells cannot host {self.num_agents} "
                "agents on distinct cells"
            )
        return self


@dataclass(frozen=True)
class State:
    """Joint environment state: one cell per agent plus the step counter."""

    positions: tuple
    step_index: int = 0


def load_map(text: str, horizon: int = 50, normalize_obs: bool = False) -> MazeSpec:
    """Parse ASCII map text into a validated :class:`MazeSpec`.

    Rejects non-rectangular grids, unknown characters, gaps in the agent
    index sequence, and any layout that violates the spec invariants.
    """
    lines = [line for line in text.splitlines() if line != ""]
    if not lines:
        raise MapError("empty map")
    width = len(lines[0])
    walls = set()
    goals = set()
    starts = {}
    for r, line in enumerate(lines):
        if len(line) != width:
            raise MapError(f"non-rectangular map: row {r} has {len(line)} cells, expected {width}")
        for c, ch in enumerate(line):
            if ch == "#":
                walls.add((r, c))
            elif ch == "G":
                goals.add((r, c))
            elif ch.isdigit():
                idx = int(ch)
                if idx in starts:
                    raise MapError(f"duplicate start for agent {idx} at ({r}, {c})")
                starts[idx] = (r, c)
            elif ch != ".":
                raise MapError(f"unknown map character {ch!r} at ({r}, {c})")
    if not starts:
        raise MapError("map defines no agent start cells")
    n = len(starts)
    if sorted(starts) != list(range(n)):
        raise MapError(f"agent indices must be contiguous from 0, got {sorted(starts)}")
    spec = MazeSpec(
        height=len(lines),
        width=width,
        walls=frozenset(walls),
        starts=tuple(starts[i] for i in range(n)),
        goal_cells=frozenset(goals),
        horizon=horizon,
        normalize_obs=normalize_obs,
    )
    return spec.validate()


def default_spec(horizon: int = 50, normalize_obs: bool = False) -> MazeSpec:
    """The open 6x12 maze with corner goals and central starts."""
    return load_map(DEFAULT_MAP, horizon=horizon, normalize_obs=normalize_obs)


def joint_observation(spec: MazeSpec, positions) -> np.ndarray:
    """Per-agent observation matrix, shape (num_agents, 2 * num_agents).

    Row i lists agent i's own (row, col) first, then every teammate's
    coordinates in increasing agent-index order.  Coordinates are emitted
    as raw reals unless ``spec.normalize_obs`` maps them into [0, 1].
    """
    n = len(positions)
    obs = np.empty((n, 2 * n), dtype=np.float64)
    for i in range(n):
        obs[i, 0] = positions[i][0]
        obs[i, 1] = positions[i][1]
        k = 2
        for j in range(n):
            if j == i:
                continue
            obs[i, k] = positions[j][0]
            obs[i, k + 1] = positions[j][1]
            k += 2
    if spec.normalize_obs:
        rs = max(spec.height - 1, 1)
        cs = max(spec.width - 1, 1)
        obs[:, 0::2] /= rs
        obs[:, 1::2] /= cs
    return obs


def flatten_observation(obs: np.ndarray) -> np.ndarray:
    """Concatenate the per-agent vectors in agent-index order."""
    return np.ascontiguousarray(obs).reshape(-1)


def reset(spec: MazeSpec, rng=None):
    """Start an episode: agents on their start cells, step counter at 0.

    Placement is deterministic; ``rng`` is accepted for interface symmetry
    with stochastic environments and is unused here.
    """
    spec.validate()
    state = State(positions=tuple(spec.starts), step_index=0)
    return state, joint_observation(spec, state.positions)


def goal_reached(spec: MazeSpec, positions) -> bool:
    """True iff all agents occupy pairwise-distinct goal cells."""
    if any(p not in spec.goal_cells for p in positions):
        return False
    return len(set(positions)) == len(positions)


def step(spec: MazeSpec, state: State, actions):
    """Advance one step; returns (state', observation', reward, done).

    Moves into walls or past the border leave the agent in place; agents may
    co-occupy a cell.  Reward is 100 exactly when the distinct-goal predicate
    holds after the move, which also ends the episode; otherwise the episode
    ends when the horizon is exhausted.
    """
    if state.step_index >= spec.horizon or goal_reached(spec, state.positions):
        raise ValueError(f"stepping a terminal state (step {state.step_index})")
    if len(actions) != spec.num_agents:
        raise ValueError(f"expected {spec.num_agents} actions, got {len(actions)}")
    new_positions = []
    for pos, a in zip(state.positions, actions):
        dr, dc = ACTION_DELTAS[a]
        cand = (pos[0] + dr, pos[1] + dc)
        new_positions.append(cand if spec.is_free(cand) else pos)
    new_positions = tuple(new_positions)
    reward = GOAL_REWARD if goal_reached(spec, new_positions) else 0.0
    new_state = State(positions=new_positions, step_index=state.step_index + 1)
    done = reward == GOAL_REWARD or new_state.step_index >= spec.horizon
    return new_state, joint_observation(spec, new_positions), reward, done
