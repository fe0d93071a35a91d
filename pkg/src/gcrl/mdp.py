"""Finite MDPs, Q-models, Bellman backups and TD targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class TabularMdp:
    """Dense finite MDP.

    ``transition[s, a, s2]`` is P(s2 | s, a) and ``reward[s, a]`` the expected
    immediate reward. Terminal states must self-loop with zero reward so that
    the Bellman operator needs no special casing.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise DimensionError(f"transition must be (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise DimensionError(f"reward shape {r.shape} does not match {p.shape[:2]}")
        term = np.zeros(p.shape[0], dtype=bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        if term.shape != (p.shape[0],):
            raise DimensionError("terminal must be a boolean vector over states")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=2), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        for s in np.flatnonzero(term):
            if not np.all(p[s, :, s] == 1.0) or np.any(r[s] != 0.0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal", term)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


class QModel:
    """Action-value function, either a dense table or a linear head.

    In linear mode ``Q(s, .) = head.T @ features[s]``; the feature map is
    stored as an ``(n_states, d)`` matrix since every state space here is
    finite. A tabular model behaves like a linear model with one-hot features.
    """

    def __init__(self, table: np.ndarray | None = None, *, features: np.ndarray | None = None,
                 head: np.ndarray | None = None):
        if (table is None) == (head is None):
            raise ValueError("give exactly one of table or head")
        if table is not None:
            self.table = np.array(table, dtype=float)
            if self.table.ndim != 2:
                raise DimensionError("table must be (n_states, n_actions)")
            self.features = None
            self.head = None
        else:
            if features is None:
                raise ValueError("linear mode needs a feature matrix")
            self.features = np.asarray(features, dtype=float)
            self.head = np.array(head, dtype=float)
            if self.features.ndim != 2 or self.head.ndim != 2 or self.features.shape[1] != self.head.shape[0]:
                raise DimensionError(
                    f"features {self.features.shape} incompatible with head {self.head.shape}")
            self.table = None

    @classmethod
    def tabular(cls, n_states: int, n_actions: int) -> "QModel":
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def linear(cls, features: np.ndarray, n_actions: int) -> "QModel":
        features = np.asarray(features, dtype=float)
        return cls(features=features, head=np.zeros((features.shape[1], n_actions)))

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "QModel":
        return cls.linear(np.eye(n_states), n_actions)

    @property
    def mode(self) -> str:
        return "tabular" if self.table is not None else "linear"

    @property
    def n_states(self) -> int:
        return (self.table if self.table is not None else self.features).shape[0]

    @property
    def n_actions(self) -> int:
        return (self.table if self.table is not None else self.head).shape[1]

    def feature_matrix(self) -> np.ndarray:
        if self.table is not None:
            return np.eye(self.table.shape[0])
        return self.features

    def head_matrix(self) -> np.ndarray:
        """Parameters the value is linear in (the table itself in tabular mode)."""
        return self.table if self.table is not None else self.head

    def values(self) -> np.ndarray:
        if self.table is not None:
            return self.table
        return self.features @ self.head

    def rows(self, states) -> np.ndarray:
        states = np.asarray(states)
        if self.table is not None:
            return self.table[states]
        return self.features[states] @ self.head

    def copy(self) -> "QModel":
        if self.table is not None:
            return QModel(self.table.copy())
        return QModel(features=self.features, head=self.head.copy())

    def add_value_step(self, states, actions, deltas) -> None:
        """Move ``Q(s_i, a_i)`` by ``deltas[i]`` along its own gradient.

        Exact for tables and one-hot features; a semi-gradient step otherwise.
        """
        states = np.asarray(states)
        actions = np.asarray(actions)
        deltas = np.asarray(deltas, dtype=float)
        if self.table is not None:
            np.add.at(self.table, (states, actions), deltas)
        else:
            step = np.zeros((self.head.shape[1], self.head.shape[0]))
            np.add.at(step, actions, deltas[:, None] * self.features[states])
            self.head += step.T

    def add_head_gradient(self, grad: np.ndarray, lr: float) -> None:
        h = self.head_matrix()
        if grad.shape != h.shape:
            raise DimensionError(f"gradient {grad.shape} does not match parameters {h.shape}")
        h -= lr * grad


@dataclass(frozen=True)
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions", "rewards", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"batch field {name} has the wrong length")

    @classmethod
    def from_entries(cls, entries) -> "TransitionBatch":
        s, a, r, s2, d = zip(*entries)
        return cls(np.asarray(s, dtype=np.int64), np.asarray(a, dtype=np.int64),
                   np.asarray(r, dtype=float), np.asarray(s2, dtype=np.int64),
                   np.asarray(d, dtype=bool))

    def __len__(self) -> int:
        return len(self.states)

    def validate(self, n_states: int, n_actions: int) -> None:
        for arr, bound, name in ((self.states, n_states, "state"), (self.next_states, n_states, "state"),
                                 (self.actions, n_actions, "action")):
            if len(arr) and (arr.min() < 0 or arr.max() >= bound):
                raise IndexError(f"{name} id out of range [0, {bound})")


def _check_shapes(mdp: TabularMdp, q: QModel) -> None:
    if q.n_states != mdp.n_states or q.n_actions != mdp.n_actions:
        raise DimensionError(
            f"Q model is {q.n_states}x{q.n_actions} but MDP is {mdp.n_states}x{mdp.n_actions}")


def _backup(mdp: TabularMdp, values: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * (mdp.transition @ values.max(axis=1))


def bellman_backup(mdp: TabularMdp, q: QModel) -> QModel:
    """Apply the optimal Bellman operator exactly; returns a new tabular model."""
    if q.mode != "tabular":
        raise ValueError("bellman_backup expects a tabular Q model")
    _check_shapes(mdp, q)
    return QModel(_backup(mdp, q.table))


def solve_q_star(mdp: TabularMdp, tol: float = 1e-10, max_iters: int = 1_000_000) -> QModel:
    """Value iteration until the sup-norm change drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        nxt = _backup(mdp, q)
        change = np.max(np.abs(nxt - q))
        q = nxt
        if change < tol:
            break
    return QModel(q)


def td_targets(batch: TransitionBatch, q_target: QModel, gamma: float,
               q_online: QModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-step targets ``r + gamma * max Q_target(s')`` and nudges ``y - V(s)``.

    ``V`` comes from ``q_online`` when given, else from ``q_target``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    boot = q_target.rows(batch.next_states).max(axis=1)
    targets = batch.rewards + gamma * np.where(batch.dones, 0.0, boot)
    online = q_target if q_online is None else q_online
    nudges = targets - online.rows(batch.states).max(axis=1)
    return targets, nudges


def double_q_targets(batch: TransitionBatch, selector: QModel, evaluator: QModel,
                     gamma: float) -> np.ndarray:
    """Double estimator: ``selector`` picks the greedy action, ``evaluator`` scores it."""
    nxt = batch.next_states
    greedy = selector.rows(nxt).argmax(axis=1)
    boot = evaluator.rows(nxt)[np.arange(len(nxt)), greedy]
    return batch.rewards + gamma * np.where(batch.dones, 0.0, boot)


def mean_per_pair(states, actions, values, n_actions: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Average ``values`` over repeated ``(s, a)`` pairs.

    Returns the unique states, actions and the per-pair means, ordered by
    flattened pair index.
    """
    key = np.asarray(states) * n_actions + np.asarray(actions)
    uniq, inv = np.unique(key, return_inverse=True)
    sums = np.bincount(inv, weights=values, minlength=len(uniq))
    counts = np.bincount(inv, minlength=len(uniq))
    return uniq // n_actions, uniq % n_actions, sums / counts


def q_update_double(batch: TransitionBatch, q_a: QModel, q_b: QModel, lr: float,
                    gamma: float) -> QModel:
    """One double Q-learning update of ``q_a`` with ``q_b`` as the evaluator.

    Each distinct ``(s, a)`` in the batch moves by ``lr`` times its mean TD
    error, so ``lr=1`` overwrites an entry with its mean target. Returns the
    updated copy of ``q_a``; callers alternate the roles of the two tables.
    """
    if not 0.0 <= lr <= 1.0:
        raise ValueError("lr must lie in [0, 1]")
    out = q_a.copy()
    if lr == 0.0 or len(batch) == 0:
        return out
    y = double_q_targets(batch, q_a, q_b, gamma)
    current = q_a.rows(batch.states)[np.arange(len(batch)), batch.actions]
    s, a, err = mean_per_pair(batch.states, batch.actions, y - current, q_a.n_actions)
    out.add_value_step(s, a, lr * err)
    return out
