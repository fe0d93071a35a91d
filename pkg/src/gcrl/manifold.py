"""Hard enforcement of order and equivariance constraints on a value vector.

Inequalities ``g_e(V) = delta + V[v] - V[u] <= 0`` are turned into equalities
with nonnegative slacks ``mu`` and stacked with equalities ``V[a] = V[b]``:
``c(V, mu) = [g(V) + mu; V[a] - V[b]]``. Updates split into a tangent part
(TD descent that leaves every constraint unchanged to first order) and a
damped minimum-norm normal correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import CorrectionError, DimensionError, NumericError


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    n: int
    ineq_edges: np.ndarray
    eq_pairs: np.ndarray
    mu: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        edges = np.asarray(self.ineq_edges, dtype=np.int64).reshape(-1, 2)
        pairs = np.asarray(self.eq_pairs, dtype=np.int64).reshape(-1, 2)
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        if len(mu) != len(edges):
            raise DimensionError("need one slack per inequality")
        if np.any(mu < 0):
            raise ValueError("slacks must be nonnegative")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        for arr in (edges, pairs):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise IndexError("constraint endpoint out of range")
        object.__setattr__(self, "ineq_edges", edges)
        object.__setattr__(self, "eq_pairs", pairs)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def build(cls, n: int, ineq_edges=(), eq_pairs=(), delta: float = 0.0, v=None) -> "ConstraintSystem":
        """System with slacks ``[-g(v)]_+`` (zero when ``v`` is omitted)."""
        edges = np.asarray(ineq_edges, dtype=np.int64).reshape(-1, 2)
        mu = np.zeros(len(edges))
        if v is not None and len(edges):
            v = np.asarray(v, dtype=float)
            mu = np.maximum(-(delta + v[edges[:, 1]] - v[edges[:, 0]]), 0.0)
        return cls(n, edges, eq_pairs, mu, delta)

    @property
    def n_ineq(self) -> int:
        return len(self.ineq_edges)

    @property
    def n_eq(self) -> int:
        return len(self.eq_pairs)

    def with_mu(self, mu) -> "ConstraintSystem":
        return replace(self, mu=np.asarray(mu, dtype=float))


@dataclass(frozen=True, eq=False)
class SparseJacobians:
    J_g: sp.csr_matrix
    J_h: sp.csr_matrix
    J_V: sp.csr_matrix
    J_c: sp.csr_matrix
    _gram: dict = field(default_factory=dict, repr=False)

    @classmethod
    def of(cls, cs: ConstraintSystem) -> "SparseJacobians":
        m, p, n = cs.n_ineq, cs.n_eq, cs.n
        rows = np.repeat(np.arange(m), 2)
        cols = cs.ineq_edges[:, ::-1].reshape(-1)
        vals = np.tile([1.0, -1.0], m)
        j_g = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
        rows = np.repeat(np.arange(p), 2)
        vals = np.tile([1.0, -1.0], p)
        j_h = sp.csr_matrix((vals, (rows, cs.eq_pairs.reshape(-1))), shape=(p, n))
        j_v = sp.vstack([j_g, j_h], format="csr")
        slack = sp.vstack([sp.identity(m, format="csr"), sp.csr_matrix((p, m))], format="csr")
        j_c = sp.hstack([j_v, slack], format="csr")
        return cls(j_g, j_h, j_v, j_c)

    def gram(self, which: str) -> np.ndarray:
        if which not in self._gram:
            j = self.J_V if which == "V" else self.J_c
            self._gram[which] = (j @ j.T).toarray()
        return self._gram[which]


def jacobians(cs: ConstraintSystem) -> SparseJacobians:
    return SparseJacobians.of(cs)


def g_values(cs: ConstraintSystem, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    e = cs.ineq_edges
    return cs.delta + v[e[:, 1]] - v[e[:, 0]]


def residual(cs: ConstraintSystem, v) -> np.ndarray:
    """``[g(v) + mu; v[a] - v[b]]``."""
    v = np.asarray(v, dtype=float)
    if len(v) != cs.n:
        raise DimensionError(f"value vector has length {len(v)}, expected {cs.n}")
    h = v[cs.eq_pairs[:, 0]] - v[cs.eq_pairs[:, 1]]
    return np.concatenate([g_values(cs, v) + cs.mu, h])


def _damped_solve(gram: np.ndarray, rhs: np.ndarray, eps: float) -> np.ndarray:
    try:
        if eps > 0:
            return np.linalg.solve(gram + eps * np.eye(len(gram)), rhs)
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"constraint solve failed: {exc}") from exc


def tangent_project(js: SparseJacobians, g, eps: float = 0.0) -> np.ndarray:
    """``g - J_V^T (J_V J_V^T + eps I)^{-1} J_V g``; ``eps=0`` uses a pseudoinverse."""
    g = np.asarray(g, dtype=float)
    if js.J_V.shape[0] == 0:
        return g.copy()
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    y = _damped_solve(js.gram("V"), js.J_V @ g, eps)
    return g - js.J_V.T @ y


def normal_step(js: SparseJacobians, c, lam: float, eps: float = 1e-6) -> np.ndarray:
    """Damped minimum-norm correction ``-lam J_c^T (J_c J_c^T + eps I)^{-1} c`` over ``(v, mu)``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    c = np.asarray(c, dtype=float)
    if len(c) == 0:
        return np.zeros(js.J_c.shape[1])
    y = _damped_solve(js.gram("c"), c, eps)
    return -lam * (js.J_c.T @ y)


@dataclass
class UpdateDiagnostics:
    phi_before: float
    phi_after: float
    normal_used: bool
    tangent_norm: float
    normal_norm: float


def manifold_update(cs: ConstraintSystem, js: SparseJacobians, v, td_grad, eta: float, eta_mu: float,
                    lam: float, gate_threshold: float = 0.0, eps: float = 1e-6,
                    eps_tan: float = 0.0) -> tuple[np.ndarray, np.ndarray, UpdateDiagnostics]:
    """One tangent plus (gated) normal step on ``v`` and a slack update.

    ``V+ = V + eta (D_tan + D_nor)`` with ``D_tan = -P_tan td_grad`` and the
    value part of the normal correction used only when ``||c|| > gate_threshold``;
    ``mu+ = [mu - eta_mu (g(V) + mu)]_+``.
    """
    if eta <= 0 or eta_mu <= 0:
        raise ValueError("step sizes must be positive")
    v = np.asarray(v, dtype=float)
    c = residual(cs, v)
    phi_before = 0.5 * float(c @ c)
    d_tan = -tangent_project(js, td_grad, eps_tan)
    use_normal = bool(np.linalg.norm(c) > gate_threshold) and len(c) > 0
    d_nor = normal_step(js, c, lam, eps)[: cs.n] if use_normal else np.zeros(cs.n)
    v_plus = v + eta * (d_tan + d_nor)
    mu_plus = np.maximum(cs.mu - eta_mu * (g_values(cs, v) + cs.mu), 0.0)
    c_after = residual(cs.with_mu(mu_plus), v_plus)
    diag = UpdateDiagnostics(phi_before, 0.5 * float(c_after @ c_after), use_normal,
                             float(np.linalg.norm(d_tan)), float(np.linalg.norm(d_nor)))
    return v_plus, mu_plus, diag


def active_set(cs: ConstraintSystem, v, xi: float) -> ConstraintSystem:
    """Keep inequalities with ``g_e(v) > -xi``; equalities are untouched."""
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    keep = g_values(cs, v) > -xi
    return ConstraintSystem(cs.n, cs.ineq_edges[keep], cs.eq_pairs, cs.mu[keep], cs.delta)


def fallback_correct(cs: ConstraintSystem, js: SparseJacobians, v, tol: float = 1e-6,
                     max_iters: int = 200, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Repeat full corrections ``-J_c^+ c`` (slacks clipped at 0) until ``||c|| <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.array(v, dtype=float)
    mu = cs.mu.copy()
    cur = cs
    for _ in range(max_iters + 1):
        c = residual(cur, v)
        norm = float(np.linalg.norm(c))
        if norm <= tol:
            return v, mu
        step = normal_step(js, c, 1.0, eps)
        v = v + step[: cs.n]
        mu = np.maximum(mu + step[cs.n:], 0.0)
        cur = cs.with_mu(mu)
    raise CorrectionError(f"correction did not converge in {max_iters} iterations", residual_norm=norm)
