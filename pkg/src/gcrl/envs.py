"""Tabular benchmark environments with exportable dynamics.

Every environment exposes the same episodic interface (``reset``/``step``),
a dense :class:`~gcrl.mdp.TabularMdp` export used by the exact oracles, and a
small representation matrix (``features``) used for nearest-neighbour search.
"""

from __future__ import annotations

from collections import deque
from typing import NamedTuple

import numpy as np

from .mdp import TabularMdp


class Symmetry(NamedTuple):
    """Paired state map and action permutation ``(T_g, Pi_g)``."""

    name: str
    state_map: np.ndarray
    action_perm: np.ndarray

    def state_matrix(self) -> np.ndarray:
        """Permutation matrix with ``W @ e_s = e_{T s}``."""
        n = len(self.state_map)
        w = np.zeros((n, n))
        w[self.state_map, np.arange(n)] = 1.0
        return w

    def action_matrix(self) -> np.ndarray:
        """Permutation matrix with ``P @ e_a = e_{Pi a}``."""
        n = len(self.action_perm)
        p = np.zeros((n, n))
        p[self.action_perm, np.arange(n)] = 1.0
        return p

    def compose(self, other: "Symmetry") -> "Symmetry":
        """``self`` after ``other``."""
        return Symmetry(f"{self.name}*{other.name}", self.state_map[other.state_map],
                        self.action_perm[other.action_perm])


class TabularEnv:
    name = "tabular"
    n_states: int
    n_actions: int
    gamma: float
    max_steps: int

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)

    def reset(self, seed: int | None = None) -> int:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        return self._reset()

    def _reset(self) -> int:
        raise NotImplementedError

    def _check(self, state: int, action: int) -> None:
        if not 0 <= state < self.n_states:
            raise IndexError(f"state {state} out of range [0, {self.n_states})")
        if not 0 <= action < self.n_actions:
            raise IndexError(f"action {action} out of range [0, {self.n_actions})")

    def step(self, state: int, action: int) -> tuple[int, float, bool]:
        raise NotImplementedError

    def export_mdp(self) -> TabularMdp:
        raise NotImplementedError

    def oracle_symmetries(self) -> list[Symmetry]:
        return []

    def features(self) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# E1: rotation/mirror gridworld

ACTION_NAMES = ("up", "right", "down", "left")
_DIRS = np.array([(0, -1), (1, 0), (0, 1), (-1, 0)])

# Linear maps on centred (x, y) cell coordinates, y growing downwards.
PLANAR_TRANSFORMS = {
    "identity": ((1, 0), (0, 1)),
    "rot90": ((0, -1), (1, 0)),
    "rot180": ((-1, 0), (0, -1)),
    "rot270": ((0, 1), (-1, 0)),
    "mirror_h": ((-1, 0), (0, 1)),
    "mirror_v": ((1, 0), (0, -1)),
    "transpose": ((0, 1), (1, 0)),
    "anti_transpose": ((0, -1), (-1, 0)),
}
EPISODE_TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "mirror_h", "mirror_v")


def _action_perm(mat: np.ndarray) -> np.ndarray:
    out = np.empty(4, dtype=np.int64)
    for a, d in enumerate(_DIRS):
        img = mat @ d
        out[a] = int(np.flatnonzero((_DIRS == img).all(axis=1))[0])
    return out


class RotMirrorGrid(TabularEnv):
    """19x19 gridworld with a D4-symmetric obstacle layout and a central goal.

    Each episode draws a planar transform that maps the start region (the
    top-left corner block) to one of the other corners. Because the layout is
    invariant under the dihedral group, every transform induces an MDP that is
    isomorphic to the identity one under the paired (cell map, action
    relabel). With probability ``p_asym`` an episode perturbs one random
    ``(state, action)``: its move is redirected to a random free neighbour
    with probability ``eps_noise``, which breaks the symmetry.
    """

    name = "rotmirror"

    def __init__(self, size: int = 19, obstacle_density: float = 0.12, layout_seed: int = 0,
                 p_asym: float = 0.0, eps_noise: float = 0.1, step_reward: float = -1.0,
                 goal_reward: float = 0.0, max_steps: int = 400, gamma: float = 0.99,
                 start_block: int = 4, seed: int | None = None):
        super().__init__(seed)
        if size % 2 == 0:
            raise ValueError("grid size must be odd so the goal sits at the centre")
        self.size = size
        self.p_asym = p_asym
        self.eps_noise = eps_noise
        self.step_reward = step_reward
        self.goal_reward = goal_reward
        self.max_steps = max_steps
        self.gamma = gamma
        self.n_actions = 4
        c = size // 2
        self.goal_cell = (c, c)
        free = self._layout(obstacle_density, layout_seed)
        self.cells = [(x, y) for y in range(size) for x in range(size) if free[y, x]]
        self.index = {cell: i for i, cell in enumerate(self.cells)}
        self.n_states = len(self.cells)
        self.goal = self.index[self.goal_cell]
        self._next = np.empty((self.n_states, 4), dtype=np.int64)
        for i, (x, y) in enumerate(self.cells):
            for a, (dx, dy) in enumerate(_DIRS):
                nxt = (x + dx, y + dy)
                self._next[i, a] = self.index.get(nxt, i)
        self._next[self.goal] = self.goal
        self._neighbours = [sorted({int(j) for j in self._next[i]} - {i}) or [i] for i in range(self.n_states)]
        self.start_cells = [self.index[(x, y)] for (x, y) in self.cells
                            if x < start_block and y < start_block]
        self.episode_transform = "identity"
        self.perturbed: tuple[int, int] | None = None
        self._maps: dict[str, np.ndarray] = {}

    def _layout(self, density: float, seed: int) -> np.ndarray:
        """Symmetric obstacle mask, redrawn from the same stream until the
        corners connect to the goal; cells that cannot reach the goal are dropped."""
        size = self.size
        c = size // 2
        rng = np.random.default_rng(seed)
        mats = [np.array(m) for m in PLANAR_TRANSFORMS.values()]
        for _ in range(1000):
            free = np.ones((size, size), dtype=bool)
            # one draw per orbit: sample the octant c <= y <= x
            for y in range(c, size):
                for x in range(y, size):
                    if rng.random() >= density:
                        continue
                    for m in mats:
                        tx, ty = m @ np.array([x - c, y - c]) + c
                        free[ty, tx] = False
            # keep the goal, its neighbours and the corners open
            for dx, dy in [(0, 0), *map(tuple, _DIRS)]:
                free[c + dy, c + dx] = True
            for x, y in [(0, 0), (0, size - 1), (size - 1, 0), (size - 1, size - 1)]:
                free[y, x] = True
            # the reachable set is symmetric because the goal is fixed by every transform
            seen = np.zeros_like(free)
            seen[c, c] = True
            queue = deque([(c, c)])
            while queue:
                x, y = queue.popleft()
                for dx, dy in _DIRS:
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < size and 0 <= ny < size and free[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((nx, ny))
            if seen[0, 0]:
                return seen
        raise ValueError("could not draw a connected layout; lower obstacle_density")

    def transform_state_map(self, name: str) -> np.ndarray:
        if name in self._maps:
            return self._maps[name]
        c = self.size // 2
        m = np.array(PLANAR_TRANSFORMS[name])
        out = np.empty(self.n_states, dtype=np.int64)
        for i, (x, y) in enumerate(self.cells):
            tx, ty = m @ np.array([x - c, y - c]) + c
            out[i] = self.index[(int(tx), int(ty))]
        self._maps[name] = out
        return out

    def symmetry(self, name: str) -> Symmetry:
        return Symmetry(name, self.transform_state_map(name), _action_perm(np.array(PLANAR_TRANSFORMS[name])))

    def _reset(self) -> int:
        self.episode_transform = EPISODE_TRANSFORMS[self.rng.integers(len(EPISODE_TRANSFORMS))]
        self.perturbed = None
        if self.rng.random() < self.p_asym:
            s = int(self.rng.integers(self.n_states - 1))
            s = s + 1 if s >= self.goal else s
            self.perturbed = (s, int(self.rng.integers(4)))
        start = self.start_cells[self.rng.integers(len(self.start_cells))]
        return int(self.transform_state_map(self.episode_transform)[start])

    def step(self, state: int, action: int) -> tuple[int, float, bool]:
        self._check(state, action)
        if state == self.goal:
            return state, 0.0, True
        nxt = int(self._next[state, action])
        if self.perturbed == (state, action) and self.rng.random() < self.eps_noise:
            nbrs = self._neighbours[state]
            nxt = nbrs[self.rng.integers(len(nbrs))]
        reward = self.goal_reward if nxt == self.goal else self.step_reward
        return nxt, reward, nxt == self.goal

    def export_mdp(self) -> TabularMdp:
        n = self.n_states
        p = np.zeros((n, 4, n))
        r = np.zeros((n, 4))
        for s in range(n):
            for a in range(4):
                if s == self.goal:
                    p[s, a, s] = 1.0
                    continue
                base = int(self._next[s, a])
                if self.perturbed == (s, a):
                    p[s, a, base] += 1.0 - self.eps_noise
                    nbrs = self._neighbours[s]
                    for j in nbrs:
                        p[s, a, j] += self.eps_noise / len(nbrs)
                else:
                    p[s, a, base] = 1.0
                r[s, a] = p[s, a, self.goal] * self.goal_reward + (1.0 - p[s, a, self.goal]) * self.step_reward
        term = np.zeros(n, dtype=bool)
        term[self.goal] = True
        return TabularMdp(p, r, self.gamma, term)

    def oracle_symmetries(self) -> list[Symmetry]:
        if self.p_asym != 0.0:
            return []
        return [self.symmetry(name) for name in PLANAR_TRANSFORMS]

    def features(self) -> np.ndarray:
        c = self.size // 2
        return np.array([((x - c) / c, (y - c) / c) for (x, y) in self.cells])


# ---------------------------------------------------------------------------
# E4: chain with a rock-paper-scissors detour

FORWARD, BACKWARD, STAY = 0, 1, 2
ROCK, PAPER, SCISSORS = 0, 1, 2


def rps_payoff(opponent: int, action: int) -> int:
    """+1 if ``action`` beats ``opponent``, -1 if it loses, 0 on a tie."""
    if action == (opponent + 1) % 3:
        return 1
    if opponent == (action + 1) % 3:
        return -1
    return 0


class NoisyRpsChain(TabularEnv):
    """Ten-state goal chain with a three-state rock-paper-scissors gadget.

    Chain state ``k`` is ``chain_len - 1 - k`` steps from the terminal goal.
    Actions are forward/backward/stay on the chain; in gadget state ``o`` (the
    opponent's throw) the same indices mean rock/paper/scissors. Moving
    forward out of a detour state diverts with probability ``eta`` into a
    uniformly drawn gadget state; one round there pays the RPS outcome and
    rejoins the chain at ``rejoin``.
    """

    name = "rps_chain"

    def __init__(self, chain_len: int = 10, eta: float = 0.0, detour_states=(3, 6), rejoin: int = 5,
                 progress_reward: float = 1.0, backward_reward: float = -1.0, goal_reward: float = 10.0,
                 rps_scale: float = 1.0, max_steps: int = 100, gamma: float = 0.95,
                 seed: int | None = None):
        super().__init__(seed)
        if not 0.0 <= eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        self.chain_len = chain_len
        self.eta = eta
        self.detour_states = tuple(detour_states)
        self.rejoin = rejoin
        self.progress_reward = progress_reward
        self.backward_reward = backward_reward
        self.goal_reward = goal_reward
        self.rps_scale = rps_scale
        self.max_steps = max_steps
        self.gamma = gamma
        self.n_states = chain_len + 3
        self.n_actions = 3
        self.goal = chain_len - 1
        self.rps_states = (chain_len, chain_len + 1, chain_len + 2)

    def _reset(self) -> int:
        return 0

    def _chain_move(self, state: int, action: int) -> tuple[int, float]:
        if action == FORWARD:
            nxt = state + 1
            return nxt, self.progress_reward + (self.goal_reward if nxt == self.goal else 0.0)
        if action == BACKWARD:
            if state == 0:
                return 0, 0.0
            return state - 1, self.backward_reward
        return state, 0.0

    def step(self, state: int, action: int) -> tuple[int, float, bool]:
        self._check(state, action)
        if state == self.goal:
            return state, 0.0, True
        if state >= self.chain_len:
            opponent = state - self.chain_len
            return self.rejoin, self.rps_scale * rps_payoff(opponent, action), False
        if action == FORWARD and state in self.detour_states and self.eta > 0 and self.rng.random() < self.eta:
            return self.rps_states[self.rng.integers(3)], 0.0, False
        nxt, reward = self._chain_move(state, action)
        return nxt, reward, nxt == self.goal

    def export_mdp(self) -> TabularMdp:
        n = self.n_states
        p = np.zeros((n, 3, n))
        r = np.zeros((n, 3))
        for s in range(n):
            for a in range(3):
                if s == self.goal:
                    p[s, a, s] = 1.0
                elif s >= self.chain_len:
                    p[s, a, self.rejoin] = 1.0
                    r[s, a] = self.rps_scale * rps_payoff(s - self.chain_len, a)
                else:
                    nxt, reward = self._chain_move(s, a)
                    if a == FORWARD and s in self.detour_states and self.eta > 0:
                        p[s, a, nxt] = 1.0 - self.eta
                        for g in self.rps_states:
                            p[s, a, g] = self.eta / 3.0
                        r[s, a] = (1.0 - self.eta) * reward
                    else:
                        p[s, a, nxt] = 1.0
                        r[s, a] = reward
        term = np.zeros(n, dtype=bool)
        term[self.goal] = True
        return TabularMdp(p, r, self.gamma, term)

    def features(self) -> np.ndarray:
        angles = 0.5 * np.pi * np.arange(self.chain_len) / (self.chain_len - 1)
        chain = np.column_stack([np.cos(angles), np.sin(angles), np.zeros(self.chain_len)])
        base = angles[self.rejoin]
        gadget = np.array([[np.cos(base), np.sin(base), 0.5 + 0.25 * j] for j in range(3)])
        return np.vstack([chain, gadget])


# ---------------------------------------------------------------------------
# E2 (tabular): per-episode button permutation


class ButtonPermTabular(TabularEnv):
    """Press a fixed sequence of semantic buttons under a hidden relabelling.

    The state is the progress index through ``target_sequence``. Each episode
    draws a uniform permutation ``sigma`` so that semantic button ``b`` is
    action ``sigma[b]``. A correct press advances, a wrong press resets the
    progress to zero.
    """

    name = "button_perm"

    def __init__(self, n_buttons: int = 6, target_sequence=(2, 5, 0, 3), step_reward: float = -0.1,
                 success_reward: float = 5.0, max_steps: int = 50, gamma: float = 0.95,
                 seed: int | None = None):
        super().__init__(seed)
        self.n_buttons = n_buttons
        self.target_sequence = tuple(target_sequence)
        if any(not 0 <= b < n_buttons for b in self.target_sequence):
            raise ValueError("target sequence refers to a missing button")
        self.step_reward = step_reward
        self.success_reward = success_reward
        self.max_steps = max_steps
        self.gamma = gamma
        self.n_states = len(self.target_sequence) + 1
        self.n_actions = n_buttons
        self.goal = len(self.target_sequence)
        self.sigma = np.arange(n_buttons)

    def _reset(self) -> int:
        self.sigma = self.rng.permutation(self.n_buttons)
        return 0

    def _move(self, state: int, action: int) -> tuple[int, float]:
        if action == self.sigma[self.target_sequence[state]]:
            nxt = state + 1
            return nxt, self.success_reward if nxt == self.goal else self.step_reward
        return 0, self.step_reward

    def step(self, state: int, action: int) -> tuple[int, float, bool]:
        self._check(state, action)
        if state == self.goal:
            return state, 0.0, True
        nxt, reward = self._move(state, action)
        return nxt, reward, nxt == self.goal

    def export_mdp(self) -> TabularMdp:
        n, m = self.n_states, self.n_actions
        p = np.zeros((n, m, n))
        r = np.zeros((n, m))
        for s in range(n):
            for a in range(m):
                if s == self.goal:
                    p[s, a, s] = 1.0
                else:
                    nxt, reward = self._move(s, a)
                    p[s, a, nxt] = 1.0
                    r[s, a] = reward
        term = np.zeros(n, dtype=bool)
        term[self.goal] = True
        return TabularMdp(p, r, self.gamma, term)

    def features(self) -> np.ndarray:
        angles = 0.5 * np.pi * np.arange(self.n_states) / max(self.n_states - 1, 1)
        return np.column_stack([np.cos(angles), np.sin(angles)])


ENVIRONMENTS = {
    RotMirrorGrid.name: RotMirrorGrid,
    NoisyRpsChain.name: NoisyRpsChain,
    ButtonPermTabular.name: ButtonPermTabular,
}


def make_env(name: str, seed: int | None = None, **params) -> TabularEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed, **params)
