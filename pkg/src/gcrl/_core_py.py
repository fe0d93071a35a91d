"""Pure numpy implementations of the inner loops in :mod:`gcrl._core`."""

from __future__ import annotations

import numpy as np


def greedy_dagify(n, us, vs, order):
    """Insert edges in ``order`` unless they would close a directed cycle.

    Returns ``(keep, reach)`` where ``keep[i]`` flags the accepted candidates
    and ``reach[x, y]`` is 1 iff ``y`` is reachable from ``x`` by at least one
    edge of the accepted set.
    """
    us = np.asarray(us, dtype=np.int64)
    vs = np.asarray(vs, dtype=np.int64)
    keep = np.zeros(len(us), dtype=np.uint8)
    reach = np.zeros((n, n), dtype=bool)
    for idx in order:
        u, v = us[idx], vs[idx]
        if u == v or reach[v, u]:
            continue
        keep[idx] = 1
        sources = reach[:, u].copy()
        sources[u] = True
        row = reach[v].copy()
        row[v] = True
        reach[sources] |= row
    return keep, reach.astype(np.uint8)


def penalty_gd(vhat, v, eu, ev, delta, mu, lam_rank, lr, steps):
    """Gradient descent on the squared-hinge isotonic surrogate.

    Returns ``(vhat, losses, bad_iter)``; ``losses[t]`` is the objective
    before step ``t`` (``losses[steps]`` after the last one) and ``bad_iter``
    is the first iteration with a non-finite value, or -1.
    """
    x = np.array(vhat, dtype=float)
    v = np.asarray(v, dtype=float)
    eu = np.asarray(eu, dtype=np.int64)
    ev = np.asarray(ev, dtype=np.int64)
    b = len(x)
    m = len(eu)
    losses = np.empty(steps + 1)
    for t in range(steps + 1):
        diff = x - v
        loss = diff @ diff / b
        grad = 2.0 / b * diff
        if m:
            gap = x[ev] - x[eu]
            hinge = np.maximum(delta + gap, 0.0)
            loss += mu * (hinge @ hinge) / m
            coef = 2.0 * mu / m * hinge
            if lam_rank:
                loss += lam_rank * np.logaddexp(0.0, gap).sum() / m
                coef = coef + lam_rank / m * 0.5 * (1.0 + np.tanh(0.5 * gap))
            grad += np.bincount(ev, weights=coef, minlength=b) - np.bincount(eu, weights=coef, minlength=b)
        losses[t] = loss
        if not np.isfinite(loss):
            return x, losses, t
        if t == steps:
            break
        x = x - lr * grad
    return x, losses, -1


def _logsumexp(z, axis):
    m = z.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def sinkhorn_stack(logits, iters, temp, tol, max_iters):
    """Log-domain column then row normalisation per matrix.

    At least ``iters`` rounds; then rounds continue until every column sum is
    within ``tol`` of one or ``max_iters`` rounds have run.
    """
    stack = np.array(logits, dtype=float) / temp
    for k in range(stack.shape[0]):
        z = stack[k]
        for t in range(max(iters, max_iters)):
            z = z - _logsumexp(z, 0)
            z = z - _logsumexp(z, 1)
            if t + 1 >= iters and np.max(np.abs(np.exp(z).sum(axis=0) - 1.0)) <= tol:
                break
        stack[k] = z
    return np.exp(stack)


def _tr(x):
    return np.swapaxes(x, -1, -2)


def _power_grads(x, m):
    """``||x_k^m - I||^2`` per slot and the gradients, for a stack ``x``."""
    eye = np.eye(x.shape[-1])
    powers = [np.broadcast_to(eye, x.shape)]
    for _ in range(m):
        powers.append(powers[-1] @ x)
    e = powers[m] - eye
    g = np.zeros_like(x)
    for p in range(m):
        g += _tr(powers[p]) @ e @ _tr(powers[m - 1 - p])
    return np.sum(e * e, axis=(-2, -1)), 2.0 * g


def _min_pair_terms(cw, cp, w, pi, gw, gp, scale):
    # hard-min match of composites against the slots; winner gets -2 scale D
    costs = np.sum((cw[:, None] - w[None]) ** 2, axis=(2, 3)) + np.sum((cp[:, None] - pi[None]) ** 2, axis=(2, 3))
    best = costs.argmin(axis=1)
    dw = cw - w[best]
    dp = cp - pi[best]
    np.add.at(gw, best, -2.0 * scale * dw)
    np.add.at(gp, best, -2.0 * scale * dp)
    return best, float(costs[np.arange(len(best)), best].sum()), dw, dp


def group_regs(W, P, pair_i, pair_j, orders):
    """Identity, closure, inverse and finite-order penalties with gradients.

    Returns ``(r_id, r_clo, r_inv, r_ord, grad_W, grad_P, clo_argmin, inv_argmin)``.
    """
    w = np.asarray(W, dtype=float)
    pi = np.asarray(P, dtype=float)
    ii = np.asarray(pair_i, dtype=np.int64)
    jj = np.asarray(pair_j, dtype=np.int64)
    k = w.shape[0]
    eye_d, eye_a = np.eye(w.shape[1]), np.eye(pi.shape[1])
    gw = np.zeros_like(w)
    gp = np.zeros_like(pi)

    e = _tr(w) @ w - eye_d
    r_id = float(np.sum((w[0] - eye_d) ** 2) + np.sum((pi[0] - eye_a) ** 2) + np.sum(e * e) / k)
    gw[0] += 2.0 * (w[0] - eye_d)
    gp[0] += 2.0 * (pi[0] - eye_a)
    gw += 4.0 / k * (w @ e)

    c = 1.0 / len(ii)
    clo_arg, r_clo, dw, dp = _min_pair_terms(w[ii] @ w[jj], pi[ii] @ pi[jj], w, pi, gw, gp, c)
    r_clo *= c
    np.add.at(gw, ii, 2.0 * c * (dw @ _tr(w[jj])))
    np.add.at(gw, jj, 2.0 * c * (_tr(w[ii]) @ dw))
    np.add.at(gp, ii, 2.0 * c * (dp @ _tr(pi[jj])))
    np.add.at(gp, jj, 2.0 * c * (_tr(pi[ii]) @ dp))

    inv_arg, r_inv, dw, dp = _min_pair_terms(_tr(w), _tr(pi), w, pi, gw, gp, 1.0 / k)
    r_inv /= k
    gw += 2.0 / k * _tr(dw)
    gp += 2.0 / k * _tr(dp)

    r_ord = 0.0
    for m in orders:
        fw, g1 = _power_grads(w, int(m))
        fp, g2 = _power_grads(pi, int(m))
        r_ord += float(np.sum(fw) + np.sum(fp)) / k
        gw += g1 / k
        gp += g2 / k
    return r_id, r_clo, r_inv, r_ord, gw, gp, clo_arg, inv_arg
