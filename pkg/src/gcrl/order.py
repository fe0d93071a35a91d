"""Preference DAGs built from TD evidence and isotonic projection onto them."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.special import expit

from . import kernels
from .errors import NumericError


@dataclass(frozen=True)
class PrefEdge:
    """Comparison ``u -> v``: sample ``u`` should be worth at least ``v``."""

    u: int
    v: int
    w: float

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError("preference edges cannot be self-loops")
        if self.w < 0:
            raise ValueError("edge weights must be nonnegative")


@dataclass(frozen=True, eq=False)
class PrefDag:
    """Weighted acyclic graph over batch indices.

    ``reach[x, y]`` is True iff ``y`` is reachable from ``x`` through at least
    one edge; ``topo`` lists the nodes so that every edge points forward.
    """

    n: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    reach: np.ndarray
    topo: np.ndarray

    @classmethod
    def from_edges(cls, n: int, edges) -> "PrefDag":
        u, v, w = _edge_arrays(edges)
        if len(u) and (u.min() < 0 or v.min() < 0 or max(u.max(), v.max()) >= n):
            raise IndexError("edge endpoint out of range")
        topo = _topological_order(n, u, v)
        if topo is None:
            raise ValueError("edge set contains a directed cycle")
        return cls(n, u, v, w, _closure(n, u, v, topo), topo)

    @property
    def n_edges(self) -> int:
        return len(self.u)

    @property
    def edges(self) -> list[PrefEdge]:
        return [PrefEdge(int(a), int(b), float(c)) for a, b, c in zip(self.u, self.v, self.w)]

    def incidence(self) -> np.ndarray:
        """Dense ``(m, n)`` matrix with +1 at the source and -1 at the target."""
        a = np.zeros((self.n_edges, self.n))
        rows = np.arange(self.n_edges)
        a[rows, self.u] = 1.0
        a[rows, self.v] = -1.0
        return a


@dataclass
class IsotonicResult:
    v_hat: np.ndarray
    iterations: int
    final_violation: float
    exact: bool


def _edge_arrays(edges):
    if isinstance(edges, tuple) and len(edges) == 3 and isinstance(edges[0], np.ndarray):
        u, v, w = edges
        return np.asarray(u, dtype=np.int64), np.asarray(v, dtype=np.int64), np.asarray(w, dtype=float)
    edges = list(edges)
    if not edges:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    u = np.array([e.u for e in edges], dtype=np.int64)
    v = np.array([e.v for e in edges], dtype=np.int64)
    w = np.array([e.w for e in edges], dtype=float)
    return u, v, w


def _topological_order(n, u, v):
    indeg = np.bincount(v, minlength=n)
    succ: list[list[int]] = [[] for _ in range(n)]
    for a, b in zip(u.tolist(), v.tolist()):
        succ[a].append(b)
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        x = heapq.heappop(heap)
        out.append(x)
        for y in succ[x]:
            indeg[y] -= 1
            if indeg[y] == 0:
                heapq.heappush(heap, y)
    return np.array(out, dtype=np.int64) if len(out) == n else None


def _closure(n, u, v, topo):
    reach = np.zeros((n, n), dtype=bool)
    succ: list[list[int]] = [[] for _ in range(n)]
    for a, b in zip(u.tolist(), v.tolist()):
        succ[a].append(b)
    for x in topo[::-1]:
        for y in succ[x]:
            reach[x, y] = True
            reach[x] |= reach[y]
    return reach


# ---------------------------------------------------------------------------
# candidate generation


def preference_scores(nudges, next_q_rows, tau: float) -> np.ndarray:
    """Confidence-weighted scores ``sigmoid(nudge / tau) * exp(-Var_a Q(s', a))``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    nudges = np.asarray(nudges, dtype=float)
    rows = np.asarray(next_q_rows, dtype=float)
    return expit(nudges / tau) * np.exp(-rows.var(axis=1))


def candidate_arrays(features, scores, k: int, percentile_p: float, nudges=None, tau: float = 1.0):
    """Array form of :func:`knn_candidates`; returns ``(u, v, w)``."""
    feats = np.asarray(features, dtype=float)
    scores = np.asarray(scores, dtype=float)
    b = len(scores)
    if b < 2:
        raise ValueError("need at least two samples")
    if not 0.0 <= percentile_p <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    n_keep = math.ceil(b * (1.0 - percentile_p / 100.0) - 1e-9)
    sources = np.argsort(-scores, kind="stable")[:n_keep]
    norms = np.linalg.norm(feats, axis=1)
    valid = norms > 1e-12
    unit = np.zeros_like(feats)
    unit[valid] = feats[valid] / norms[valid, None]
    sim = unit @ unit.T
    sim[:, ~valid] = -np.inf
    np.fill_diagonal(sim, -np.inf)
    src = np.sort(sources[valid[sources]])
    if len(src) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    ranked = np.argsort(-sim[src], axis=1, kind="stable")[:, :k]
    ok = np.isfinite(np.take_along_axis(sim[src], ranked, axis=1))
    u = np.repeat(src, ranked.shape[1])[ok.ravel()]
    v = ranked.ravel()[ok.ravel()]
    if nudges is None:
        return u.astype(np.int64), v.astype(np.int64), scores[u].astype(float)
    gap = nudges[u] - nudges[v]
    keep = gap > 0
    u, v, gap = u[keep], v[keep], gap[keep]
    return u.astype(np.int64), v.astype(np.int64), scores[u] * expit(gap / tau)


def knn_candidates(features, scores, k: int, percentile_p: float, nudges=None,
                   tau: float = 1.0) -> list[PrefEdge]:
    """Propose comparisons between cosine nearest neighbours.

    Only the top ``ceil(B * (1 - p/100))`` samples by score act as sources.
    Each source ``i`` looks at its ``k`` most cosine-similar batch mates
    (ties go to the lower index; zero-norm features are skipped). Without
    ``nudges`` every pair becomes ``i -> j`` with weight ``scores[i]``; with
    them, a pair is kept only when ``nudges[i] > nudges[j]`` and gets weight
    ``scores[i] * sigmoid((nudges[i] - nudges[j]) / tau)``.
    """
    if nudges is not None:
        nudges = np.asarray(nudges, dtype=float)
    u, v, w = candidate_arrays(features, scores, k, percentile_p, nudges, tau)
    return [PrefEdge(int(a), int(b), float(c)) for a, b, c in zip(u, v, w)]


def greedy_dagify(n: int, candidates) -> PrefDag:
    """Add candidates by decreasing weight, skipping any that would close a cycle.

    Ties are broken by ``(u, v)`` in lexicographic order.
    """
    u, v, w = _edge_arrays(candidates)
    if len(u) and (u.min() < 0 or v.min() < 0 or max(u.max(), v.max()) >= n):
        raise IndexError("candidate endpoint out of range")
    order = np.lexsort((v, u, -w))
    keep, reach = kernels.greedy_dagify(n, u, v, order)
    sel = order[keep[order].astype(bool)]
    u, v, w = u[sel], v[sel], w[sel]
    reach = reach.astype(bool)
    # a node reaches strictly more nodes than any of its descendants
    topo = np.lexsort((np.arange(n), -reach.sum(axis=1)))
    return PrefDag(n, u, v, w, reach, topo)


def dag_loss(dag: PrefDag) -> float:
    """Negative mean retained edge weight (0 for an empty DAG)."""
    if dag.n_edges == 0:
        return 0.0
    return -float(dag.w.mean())


# ---------------------------------------------------------------------------
# projections


def violations(v, dag: PrefDag, delta: float) -> tuple[float, float, float]:
    """Mean hinge, mean squared hinge and max hinge of ``delta + v[tgt] - v[src]``."""
    if dag.n_edges == 0:
        return 0.0, 0.0, 0.0
    v = np.asarray(v, dtype=float)
    h = np.maximum(delta + v[dag.v] - v[dag.u], 0.0)
    return float(h.mean()), float((h * h).mean()), float(h.max())


def feasible_potential(dag: PrefDag, delta: float) -> np.ndarray:
    """``delta`` times the longest-path length (in edges) out of every node.

    The step is inflated by a relative 1e-12 so that every edge satisfies
    ``x[u] - x[v] >= delta`` exactly in floating point, not just up to rounding.
    """
    length = np.zeros(dag.n)
    succ: list[list[int]] = [[] for _ in range(dag.n)]
    for a, b in zip(dag.u.tolist(), dag.v.tolist()):
        succ[a].append(b)
    for x in dag.topo[::-1]:
        for y in succ[x]:
            length[x] = max(length[x], length[y] + 1)
    return delta * (1.0 + 1e-12) * length


def dag_width(dag: PrefDag) -> int:
    """Size of a maximum antichain, via a minimum chain cover of the closure."""
    if dag.n == 0:
        return 0
    graph = csr_matrix(dag.reach.astype(np.int8))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return dag.n - int(np.count_nonzero(match >= 0))


def exact_isotonic(v, dag: PrefDag, delta: float, max_iter: int | None = None) -> IsotonicResult:
    """Euclidean projection of ``v`` onto ``{x : x[u] >= x[v] + delta on every edge}``.

    Primal active-set method started from a feasible shift of ``v`` along the
    longest-path potential. If the working set fails to settle within
    ``max_iter`` iterations the result comes from a long penalty solve and is
    flagged ``exact=False``.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    v = np.asarray(v, dtype=float)
    m = dag.n_edges
    if m == 0 or violations(v, dag, delta)[2] == 0.0:
        return IsotonicResult(v.copy(), 0, 0.0, True)
    a = dag.incidence()
    b = np.full(m, float(delta))
    height = feasible_potential(dag, 1.0)
    shift = max(0.0, float(np.max(delta - (v[dag.u] - v[dag.v]))))
    x = v + shift * height
    scale = 1.0 + np.abs(v).max() + delta
    tol = 1e-12 * scale
    work: list[int] = []
    lam = np.zeros(0)
    max_iter = max_iter or 50 * (m + len(v)) + 100
    for it in range(1, max_iter + 1):
        if work:
            aw = a[work]
            gram = aw @ aw.T
            rhs = b[work] - aw @ v
            try:
                lam = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                lam = np.linalg.lstsq(gram, rhs, rcond=None)[0]
            x_star = v + aw.T @ lam
        else:
            lam = np.zeros(0)
            x_star = v.copy()
        p = x_star - x
        if np.max(np.abs(p)) <= tol:
            x = x_star
            if not work or lam.min() >= -tol:
                viol = violations(x, dag, delta)
                return IsotonicResult(x, it, viol[1], True)
            work.pop(int(np.argmin(lam)))
            continue
        ap = a @ p
        slack = a @ x - b
        alpha, block = 1.0, -1
        in_work = np.zeros(m, dtype=bool)
        in_work[work] = True
        for e in np.flatnonzero((ap < -tol) & ~in_work):
            ratio = max(slack[e], 0.0) / -ap[e]
            if ratio < alpha:
                alpha, block = ratio, int(e)
        x = x + alpha * p
        if block >= 0:
            work.append(block)
    res, _, _ = penalty_isotonic(v, dag, delta, mu=1e8, steps=100_000, solver="newton")
    res.exact = False
    res.iterations = max_iter
    return res


def _lipschitz(b: int, dag: PrefDag, mu: float, lambda_rank: float) -> float:
    m = dag.n_edges
    if m == 0:
        return 2.0 / b
    deg = np.bincount(dag.u, minlength=dag.n) + np.bincount(dag.v, minlength=dag.n)
    return 2.0 / b + (2.0 * mu / m + lambda_rank / (4.0 * m)) * 2.0 * deg.max()


def ord_objective(x, v, dag: PrefDag, delta: float, mu: float, lambda_rank: float = 0.0):
    """Value, gradient and Hessian (in ``x``) of the isotonic surrogate plus ranking term."""
    x = np.asarray(x, dtype=float)
    b = len(x)
    diff = x - v
    f = diff @ diff / b
    g = 2.0 / b * diff
    h = 2.0 / b * np.eye(b)
    m = dag.n_edges
    if m:
        gap = x[dag.v] - x[dag.u]
        hinge = np.maximum(delta + gap, 0.0)
        f += mu * (hinge @ hinge) / m
        coef = 2.0 * mu / m * hinge
        curv = 2.0 * mu / m * (delta + gap > 0)
        if lambda_rank:
            f += lambda_rank * np.logaddexp(0.0, gap).sum() / m
            sig = expit(gap)
            coef = coef + lambda_rank / m * sig
            curv = curv + lambda_rank / m * sig * (1.0 - sig)
        g += np.bincount(dag.v, weights=coef, minlength=b) - np.bincount(dag.u, weights=coef, minlength=b)
        a = dag.incidence()
        h += a.T @ (curv[:, None] * a)
    return f, g, h


def penalty_isotonic(v, dag: PrefDag, delta: float, mu: float, steps: int, lr: float | None = None,
                     lambda_rank: float = 0.0, solver: str = "gd", init=None,
                     check_monotone: bool = False) -> tuple[IsotonicResult, float, np.ndarray]:
    """Approximate the projection by minimising the squared-hinge surrogate.

    ``solver="gd"`` runs ``steps`` plain gradient steps from ``v`` (the
    training path; ``lr=None`` picks ``1/L`` from a Lipschitz bound).
    ``solver="newton"`` runs up to ``steps`` damped Newton iterations and
    returns the surrogate minimiser itself.

    Returns the result, the surrogate value at ``v_hat`` and the gradient of
    that value with respect to ``v`` with ``v_hat`` held fixed, i.e.
    ``2/B * (v - v_hat)``.
    """
    if mu <= 0 or steps < 1:
        raise ValueError("need mu > 0 and steps >= 1")
    v = np.asarray(v, dtype=float)
    b = len(v)
    x0 = v.copy() if init is None else np.array(init, dtype=float)
    if solver == "gd":
        step = 1.0 / _lipschitz(b, dag, mu, lambda_rank) if lr is None else lr
        x, losses, bad = kernels.penalty_gd(x0, v, dag.u, dag.v, float(delta), float(mu),
                                            float(lambda_rank), float(step), int(steps))
        if bad >= 0:
            raise NumericError(f"isotonic surrogate became non-finite at iteration {bad}")
        if check_monotone:
            rises = np.diff(losses) > 1e-12 * (1.0 + np.abs(losses[:-1]))
            if rises.any():
                raise NumericError(
                    f"isotonic surrogate increased at iteration {int(np.argmax(rises)) + 1}; lower lr")
        loss, iters = float(losses[-1]), int(steps)
    elif solver == "newton":
        x = x0
        f, g, h = ord_objective(x, v, dag, delta, mu, lambda_rank)
        iters = 0
        for iters in range(1, steps + 1):
            if np.max(np.abs(g)) <= 1e-15 * (1.0 + mu):
                break
            d = np.linalg.solve(h, -g)
            t, slope = 1.0, g @ d
            while True:
                f_new, g_new, h_new = ord_objective(x + t * d, v, dag, delta, mu, lambda_rank)
                if f_new <= f + 1e-4 * t * slope or t < 1e-12:
                    break
                t *= 0.5
            if not np.isfinite(f_new):
                raise NumericError(f"isotonic surrogate became non-finite at iteration {iters}")
            converged = f - f_new <= 1e-16 * (1.0 + abs(f))
            x, f, g, h = x + t * d, f_new, g_new, h_new
            if converged:
                break
        loss = float(f)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    result = IsotonicResult(x, iters, violations(x, dag, delta)[1], False)
    return result, loss, 2.0 / b * (v - x)
