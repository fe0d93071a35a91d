"""Learned symmetries: transform bank, equivariance losses and group projections.

Conventions: a bank slot ``k`` pairs a feature map ``phi -> W_k phi`` with an
action relabelling ``Pi_k``. A slot is a symmetry of ``Q`` when
``Q(s, .) = Pi_k.T @ Q(T_k s, .)``, i.e. ``Q(T_k s, Pi_k a) = Q(s, a)`` with
``Pi e_a = e_{Pi a}``. Composition of slots ``i`` then ``j`` corresponds to
``(W_i W_j, Pi_i Pi_j)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .errors import DimensionError, NumericError
from .mdp import QModel

DEGENERATE_SV = 1e-12
# logit scale used to re-seed Sinkhorn parameters at an exact permutation
ANCHOR_LOGIT = 8.0
SINKHORN_TOL = 1e-9
SINKHORN_MAX_ITERS = 10_000
# the bank refreshes every step; near rank-one logits converge slowly, so it
# stops once the column sums are within the marginal tolerance it needs
BANK_SINKHORN_TOL = 1e-6


# ---------------------------------------------------------------------------
# matrix primitives


def sinkhorn(logits, iters: int = 20, temp: float = 1.0, tol: float = SINKHORN_TOL,
             max_iters: int = SINKHORN_MAX_ITERS) -> np.ndarray:
    """Alternate column and row normalisation of ``exp(logits / temp)``.

    Runs in the log domain; each round normalises columns then rows, so rows
    sum to one exactly. After ``iters`` rounds the iteration keeps going
    until every column sum is within ``tol`` of one (capped at ``max_iters``
    rounds), since badly scaled logits can need far more than 20 rounds. A
    stack of matrices (leading axes) is normalised independently.
    """
    if temp <= 0 or iters < 1 or tol <= 0:
        raise ValueError("need temp > 0, iters >= 1 and tol > 0")
    z = np.asarray(logits, dtype=float) / temp
    if not np.all(np.isfinite(z)):
        raise NumericError("sinkhorn logits must be finite")
    shape = z.shape
    out = kernels.sinkhorn_stack(z.reshape((-1,) + shape[-2:]), int(iters), 1.0, float(tol), int(max_iters))
    return out.reshape(shape)


def _min_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment, ties broken towards low (row, column) indices.

    Returns ``cols`` with row ``r`` assigned to ``cols[r]``. Each row in turn
    takes the lowest column that still admits an optimal completion.
    """
    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    tol = 1e-12 * (1.0 + np.abs(cost).sum())
    chosen = np.full(n, -1)
    free_rows = list(range(n))
    free_cols = list(range(n))
    fixed = 0.0
    for r in range(n):
        free_rows.remove(r)
        for c in list(free_cols):
            rest = [x for x in free_cols if x != c]
            if rest:
                sub = cost[np.ix_(free_rows, rest)]
                rr, cc = linear_sum_assignment(sub)
                total = fixed + cost[r, c] + sub[rr, cc].sum()
            else:
                total = fixed + cost[r, c]
            if total <= best + tol:
                chosen[r] = c
                fixed += cost[r, c]
                free_cols.remove(c)
                break
    return chosen


def proj_perm(s) -> np.ndarray:
    """Permutation matrix closest to ``s`` in Frobenius norm."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError("proj_perm expects a square matrix")
    # ||S - P||^2 = ||S||^2 + n - 2 <S, P>, so maximise the matched mass
    cols = _min_assignment(-s)
    out = np.zeros_like(s)
    out[np.arange(len(cols)), cols] = 1.0
    return out


def polar(a, return_flag: bool = False):
    """Orthogonal polar factor ``U V^T`` of ``a`` (nearest orthogonal matrix).

    With ``return_flag`` also reports whether the smallest singular value is
    below the degeneracy threshold.
    """
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericError("polar factor of a non-finite matrix")
    u, sv, vt = np.linalg.svd(a)
    q = u @ vt
    if return_flag:
        return q, bool(sv.min() < DEGENERATE_SV)
    return q


def procrustes(phi, phi_g, return_flag: bool = False):
    """Orthogonal ``R`` minimising ``||R phi - phi_g||_F`` (columns are samples)."""
    phi = np.asarray(phi, dtype=float)
    phi_g = np.asarray(phi_g, dtype=float)
    if phi.shape != phi_g.shape:
        raise DimensionError("procrustes inputs must have equal shapes")
    return polar(phi_g @ phi.T, return_flag=return_flag)


# ---------------------------------------------------------------------------
# transform bank


def cyclic_structure(k: int) -> tuple[list[tuple[int, int, int]], list[tuple[int, int]]]:
    """Closure and inverse bookkeeping for a bank holding powers of slot 1.

    Slot ``j`` is ``g^j``; closure triples ``(i, j, l)`` say slot ``l`` is
    slot ``i`` composed with slot ``j`` and inverse pairs ``(i, j)`` say slot
    ``j`` is the inverse of slot ``i``.
    """
    closure = [(1, j - 1, j) for j in range(2, k)]
    inverse = [(1, k - 1)] if k >= 3 else []
    return closure, inverse


class TransformBank:
    """``K`` paired (feature transform, action relabelling) candidates.

    ``W`` has shape ``(K, d, d)`` and ``logits``/``Pi`` shape ``(K, A, A)``.
    ``Pi`` caches the Sinkhorn image of ``logits`` and is overwritten with exact
    permutations by :func:`closure_alignment_step`. With ``relabel=False``
    every ``Pi`` stays the identity.
    """

    def __init__(self, W, logits, *, generators=(1,), closure=None, inverse=None,
                 sinkhorn_iters: int = 20, sinkhorn_temp: float = 1.0, relabel: bool = True,
                 Pi=None):
        self.W = np.array(W, dtype=float)
        self.logits = np.array(logits, dtype=float)
        if self.W.ndim != 3 or self.W.shape[1] != self.W.shape[2]:
            raise DimensionError("W must have shape (K, d, d)")
        if self.logits.ndim != 3 or self.logits.shape[1] != self.logits.shape[2] \
                or self.logits.shape[0] != self.W.shape[0]:
            raise DimensionError("logits must have shape (K, A, A)")
        k = self.W.shape[0]
        default_closure, default_inverse = cyclic_structure(k)
        self.generators = tuple(g for g in generators if g < k)
        self.closure = list(default_closure if closure is None else closure)
        self.inverse = list(default_inverse if inverse is None else inverse)
        self.sinkhorn_iters = sinkhorn_iters
        self.sinkhorn_temp = sinkhorn_temp
        self.relabel = relabel
        if Pi is not None:
            self.Pi = np.array(Pi, dtype=float)
        else:
            self.refresh()

    @classmethod
    def initial(cls, d: int, n_actions: int, k: int = 4, rng=None, noise: float = 0.01,
                anchor_logit: float = ANCHOR_LOGIT, **kwargs) -> "TransformBank":
        """Slot 0 exactly ``(I, I)``; other slots ``I`` plus small noise with flat logits."""
        rng = np.random.default_rng(rng)
        w = np.repeat(np.eye(d)[None], k, axis=0)
        if k > 1:
            w[1:] += noise * rng.standard_normal((k - 1, d, d))
        logits = np.zeros((k, n_actions, n_actions))
        logits[0] = anchor_logit * np.eye(n_actions)
        return cls(w, logits, **kwargs)

    @classmethod
    def from_group(cls, W, Pi, anchor_logit: float = ANCHOR_LOGIT, **kwargs) -> "TransformBank":
        """Bank whose slots hold the given exact transforms."""
        Pi = np.asarray(Pi, dtype=float)
        return cls(W, anchor_logit * Pi, Pi=Pi, **kwargs)

    @property
    def K(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def refresh(self) -> None:
        if self.relabel:
            self.Pi = sinkhorn(self.logits, self.sinkhorn_iters, self.sinkhorn_temp, tol=BANK_SINKHORN_TOL)
        else:
            self.Pi = np.repeat(np.eye(self.n_actions)[None], self.K, axis=0)

    def apply_gradients(self, grad_w, grad_pi, lr: float) -> None:
        """Gradient step on ``W`` and (straight through Sinkhorn) on the logits."""
        self.W -= lr * grad_w
        if self.relabel:
            self.logits -= lr * grad_pi
        self.refresh()

    def copy(self) -> "TransformBank":
        return TransformBank(self.W.copy(), self.logits.copy(), generators=self.generators,
                             closure=list(self.closure), inverse=list(self.inverse),
                             sinkhorn_iters=self.sinkhorn_iters, sinkhorn_temp=self.sinkhorn_temp,
                             relabel=self.relabel, Pi=self.Pi.copy())


def closure_residual(bank: TransformBank) -> float:
    """Sum over tracked triples of ``||W_l - W_i W_j||_F + ||Pi_l - Pi_i Pi_j||_F``."""
    total = 0.0
    for i, j, l in bank.closure:
        total += np.linalg.norm(bank.W[l] - bank.W[i] @ bank.W[j])
        total += np.linalg.norm(bank.Pi[l] - bank.Pi[i] @ bank.Pi[j])
    return float(total)


# ---------------------------------------------------------------------------
# losses


@dataclass
class SymGrads:
    head: np.ndarray
    W: np.ndarray
    Pi: np.ndarray

    @classmethod
    def zeros(cls, q: QModel, bank: TransformBank) -> "SymGrads":
        return cls(np.zeros_like(q.head_matrix()), np.zeros_like(bank.W), np.zeros_like(bank.Pi))

    def __add__(self, other: "SymGrads") -> "SymGrads":
        return SymGrads(self.head + other.head, self.W + other.W, self.Pi + other.Pi)

    def scaled(self, c: float) -> "SymGrads":
        return SymGrads(c * self.head, c * self.W, c * self.Pi)


@dataclass
class ApplicabilityWeights:
    alpha: np.ndarray
    sigma_loc: float
    tau_loc: float
    rho: np.ndarray = field(default=None)  # type: ignore[assignment]


def _features(q: QModel, states) -> np.ndarray:
    return q.feature_matrix()[np.asarray(states)]


def _check(q: QModel, bank: TransformBank) -> None:
    if q.feature_matrix().shape[1] != bank.d or q.n_actions != bank.n_actions:
        raise DimensionError("bank dimensions do not match the Q model")


def _residuals(q: QModel, bank: TransformBank, phi: np.ndarray):
    """Per-slot residual rows ``Q(s_i) - Pi_k^T Q(T_k s_i)`` plus intermediates."""
    h = q.head_matrix()
    qs = phi @ h
    psi = phi @ np.transpose(bank.W, (0, 2, 1))
    u = psi @ h
    r = qs[None] - u @ bank.Pi
    return r, psi, u


def _weighted_loss(q: QModel, bank: TransformBank, phi: np.ndarray, coef: np.ndarray):
    """``sum_k sum_i coef[i, k] ||r_ik||^2`` and its gradients."""
    _check(q, bank)
    h = q.head_matrix()
    r, psi, u = _residuals(q, bank, phi)
    cr = r * coef.T[:, :, None]
    value = float(np.sum(cr * r))
    rpt = cr @ np.transpose(bank.Pi, (0, 2, 1))
    k, b = r.shape[:2]
    g_head = 2.0 * (phi.T @ cr.sum(axis=0) - psi.reshape(k * b, -1).T @ rpt.reshape(k * b, -1))
    g_w = -2.0 * ((h @ np.transpose(rpt, (0, 2, 1))) @ phi)
    g_pi = -2.0 * (np.transpose(u, (0, 2, 1)) @ cr)
    return value, SymGrads(g_head, g_w, g_pi)


def equivariance_loss(q: QModel, bank: TransformBank, states) -> tuple[float, SymGrads]:
    """Mean squared equivariance residual over slots and batch, with gradients."""
    phi = _features(q, states)
    coef = np.full((len(phi), bank.K), 1.0 / (bank.K * len(phi)))
    return _weighted_loss(q, bank, phi, coef)


def alpha_formula(nn_dist2, rho, sigma: float, tau: float) -> np.ndarray:
    return np.exp(-np.asarray(nn_dist2) / sigma**2) * np.exp(-np.asarray(rho) / tau)


def applicability_weights(q: QModel, bank: TransformBank, states, sigma_loc: float = 1.0,
                          tau_loc: float = 1.0) -> ApplicabilityWeights:
    """Down-weight samples whose image leaves the batch or breaks equivariance.

    The distance term uses the nearest batch feature (the sample itself
    included) to ``W_k phi_i``; ``rho`` is the squared equivariance residual.
    """
    if sigma_loc <= 0 or tau_loc <= 0:
        raise ValueError("sigma_loc and tau_loc must be positive")
    phi = _features(q, states)
    if len(phi) < 2:
        raise ValueError("applicability weights need a batch of at least two")
    r, psi, _ = _residuals(q, bank, phi)
    rho = np.sum(r * r, axis=2).T
    sq = np.sum(phi * phi, axis=1)
    d2 = np.sum(psi * psi, axis=2)[:, :, None] + sq[None, None, :] - 2.0 * psi @ phi.T
    nn = np.maximum(d2.min(axis=2), 0.0).T
    return ApplicabilityWeights(alpha_formula(nn, rho, sigma_loc, tau_loc), sigma_loc, tau_loc, rho)


def local_equivariance_loss(q: QModel, bank: TransformBank, states, alpha) -> tuple[float, SymGrads]:
    """Per-slot weighted average of squared residuals; ``alpha`` is held constant."""
    phi = _features(q, states)
    alpha = np.asarray(alpha.alpha if isinstance(alpha, ApplicabilityWeights) else alpha, dtype=float)
    if alpha.shape != (len(phi), bank.K):
        raise DimensionError(f"alpha must be (B, K) = {(len(phi), bank.K)}")
    coef = alpha / (bank.K * (alpha.sum(axis=0, keepdims=True) + 1e-8))
    return _weighted_loss(q, bank, phi, coef)


def _pairs(k: int, rng, max_full: int = 6, n_sample: int = 30):
    if k <= max_full:
        i, j = np.divmod(np.arange(k * k), k)
        return i, j
    rng = np.random.default_rng(rng)
    p = rng.integers(0, k, size=(n_sample, 2))
    return p[:, 0], p[:, 1]


@dataclass
class GroupRegs:
    r_id: float
    r_clo: float
    r_inv: float
    r_ord: float
    grad_W: np.ndarray
    grad_Pi: np.ndarray
    clo_argmin: np.ndarray
    inv_argmin: np.ndarray

    @property
    def total(self) -> float:
        return self.r_id + self.r_clo + self.r_inv + self.r_ord


def group_regularizers(bank: TransformBank, orders=(4,), rng=None) -> GroupRegs:
    """Identity anchoring, closure, inverse and finite-order penalties.

    The minima over ``l`` are hard minima; gradients flow to the winner only.
    Closure pairs are enumerated when ``K <= 6`` and sampled (30 pairs)
    otherwise.
    """
    ii, jj = _pairs(bank.K, rng)
    r_id, r_clo, r_inv, r_ord, gw, gp, clo_arg, inv_arg = kernels.group_regs(
        bank.W, bank.Pi, ii, jj, np.asarray(orders, dtype=np.int64))
    return GroupRegs(r_id, r_clo, r_inv, r_ord, gw, gp, clo_arg, inv_arg)


def perm_and_div_regularizers(bank: TransformBank):
    """Mean row entropy of the ``Pi``'s and pairwise ``W`` similarity.

    Returns ``(r_perm, r_div, grad_W, grad_Pi)``.
    """
    pi = bank.Pi
    k, a = pi.shape[0], pi.shape[1]
    logp = np.log(np.maximum(pi, 1e-300))
    r_perm = float(-np.sum(pi * logp) / (k * a))
    g_pi = -(logp + 1.0) / (k * a)
    g_pi = np.where(pi > 0, g_pi, 0.0)
    gw = np.zeros_like(bank.W)
    r_div = 0.0
    if k > 1:
        c = 2.0 / (k * (k - 1))
        for i, j in itertools.combinations(range(k), 2):
            diff = bank.W[i] - bank.W[j]
            e = np.exp(-np.sum(diff * diff))
            r_div += c * e
            gw[i] -= 2.0 * c * e * diff
            gw[j] += 2.0 * c * e * diff
    return r_perm, float(r_div), gw, g_pi


@dataclass
class SymWeights:
    eq: float = 1.0
    grp: float = 0.0
    perm: float = 0.0
    div: float = 0.0


def sym_loss_total(q: QModel, bank: TransformBank, states, weights: SymWeights,
                   alpha=None, orders=(4,), rng=None, sigma_loc: float = 1.0,
                   tau_loc: float = 1.0) -> tuple[float, SymGrads, dict]:
    """Weighted sum of the local equivariance loss and the bank regularisers.

    ``alpha`` defaults to :func:`applicability_weights`. Returns the value,
    the summed gradients and a per-component breakdown.
    """
    parts: dict[str, float] = {}
    grads = SymGrads.zeros(q, bank)
    value = 0.0
    if weights.eq:
        if alpha is None:
            alpha = applicability_weights(q, bank, states, sigma_loc, tau_loc)
        v, g = local_equivariance_loss(q, bank, states, alpha)
        parts["eq"] = v
        value += weights.eq * v
        grads = grads + g.scaled(weights.eq)
    if weights.grp:
        regs = group_regularizers(bank, orders=orders, rng=rng)
        parts["grp"] = regs.total
        value += weights.grp * regs.total
        grads.W += weights.grp * regs.grad_W
        grads.Pi += weights.grp * regs.grad_Pi
    if weights.perm or weights.div:
        r_perm, r_div, gw, gp = perm_and_div_regularizers(bank)
        parts["perm"], parts["div"] = r_perm, r_div
        value += weights.perm * r_perm + weights.div * r_div
        grads.W += weights.div * gw
        grads.Pi += weights.perm * gp
    if not bank.relabel:
        grads.Pi[:] = 0.0
    return float(value), grads, parts


# ---------------------------------------------------------------------------
# projection, closure and alignment


def _project_slots(bank: TransformBank, w: np.ndarray, pi: np.ndarray) -> None:
    for k in range(bank.K):
        w[k] = polar(w[k])
        pi[k] = proj_perm(pi[k]) if bank.relabel else np.eye(bank.n_actions)


def _close(bank: TransformBank, w: np.ndarray, pi: np.ndarray) -> None:
    for i, j, l in bank.closure:
        w[l] = polar(w[i] @ w[j])
        pi[l] = proj_perm(pi[i] @ pi[j])
    w[0] = np.eye(bank.d)
    pi[0] = np.eye(bank.n_actions)
    for i, j in bank.inverse:
        w[j] = w[i].T
        pi[j] = pi[i].T


def closure_alignment_step(bank: TransformBank, q: QModel, states) -> tuple[TransformBank, dict]:
    """Snap the bank onto an exactly closed group and re-align it to the batch.

    1. every ``W`` to its polar factor, every ``Pi`` to the nearest permutation;
    2. tracked composites rebuilt from their factors;
    3. slot 0 reset to the identity, inverse slots set to transposes;
    4. each generator ``W`` replaced by the orthogonal Procrustes map from
       the batch features to their nearest batch neighbours after transform
       (skipped when the cross-covariance is rank deficient), and its ``Pi``
       replaced by the optimal action matching when that strictly lowers the
       matching cost;
    5. steps 2 and 3 repeated so composites follow the realigned generators.

    Returns the new bank and a diagnostics dict.
    """
    _check(q, bank)
    w = bank.W.copy()
    pi = bank.Pi.copy()
    _project_slots(bank, w, pi)
    _close(bank, w, pi)

    phi = _features(q, np.unique(np.asarray(states)))
    h = q.head_matrix()
    y = phi @ h
    skipped = []
    for g in bank.generators:
        img = phi @ w[g].T
        d2 = np.sum(img**2, axis=1)[:, None] + np.sum(phi**2, axis=1)[None] - 2.0 * img @ phi.T
        target = phi[np.argmin(d2, axis=1)]
        rot, degenerate = procrustes(phi.T, target.T, return_flag=True)
        if degenerate:
            skipped.append(g)
        else:
            w[g] = rot
        if bank.relabel:
            yg = (phi @ w[g].T) @ h
            cost = np.sum((yg.T[:, None, :] - y.T[None, :, :]) ** 2, axis=2)
            cols = _min_assignment(cost)
            cand = np.zeros_like(pi[g])
            cand[np.arange(len(cols)), cols] = 1.0
            current = float(np.sum(pi[g] * cost))
            proposed = float(np.sum(cand * cost))
            if proposed < current - 1e-12 * (1.0 + abs(current)):
                pi[g] = cand
    _close(bank, w, pi)
    out = bank.copy()
    out.W = w
    out.Pi = pi
    out.logits = ANCHOR_LOGIT * pi
    return out, {"alignment_skipped": skipped}
