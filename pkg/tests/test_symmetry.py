import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_perm, finite_diff, rel_err

from gcrl import _core_py
from gcrl.errors import DimensionError, NumericError
from gcrl.mdp import QModel
from gcrl.symmetry import (ANCHOR_LOGIT, SymWeights, TransformBank, alpha_formula, applicability_weights,
                           closure_alignment_step, closure_residual, cyclic_structure, equivariance_loss,
                           group_regularizers, local_equivariance_loss, perm_and_div_regularizers, polar,
                           procrustes, proj_perm, sinkhorn, sym_loss_total)


def _orth(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _random_bank(rng, k=3, d=4, a=3, relabel=True):
    w = rng.normal(size=(k, d, d)) * 0.5 + np.eye(d)
    logits = rng.normal(size=(k, a, a))
    return TransformBank(w, logits, relabel=relabel)


def _linear_q(rng, n=6, d=4, a=3):
    return QModel(features=rng.normal(size=(n, d)), head=rng.normal(size=(d, a)))


# --- Sinkhorn ----------------------------------------------------------------

@given(st.integers(2, 6), st.integers(0, 10_000))
def test_sinkhorn_marginals(n, seed):
    rng = np.random.default_rng(seed)
    p = sinkhorn(rng.normal(size=(n, n)) * 2, iters=200)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    assert np.all(p > 0)


def test_sinkhorn_rows_exact_after_each_round(rng):
    p = sinkhorn(rng.normal(size=(3, 4, 4)), iters=1)
    np.testing.assert_allclose(p.sum(axis=2), 1.0, atol=1e-14)


def test_sinkhorn_low_temperature_approaches_permutation():
    logits = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    p = sinkhorn(logits, iters=50, temp=0.01)
    np.testing.assert_allclose(p, logits, atol=1e-6)


def test_sinkhorn_errors():
    with pytest.raises(ValueError):
        sinkhorn(np.zeros((2, 2)), iters=0)
    with pytest.raises(NumericError):
        sinkhorn(np.array([[np.inf, 0.0], [0.0, 0.0]]))


def test_sinkhorn_backends_agree(rng):
    z = rng.normal(size=(5, 4, 4)) * 3
    from gcrl import kernels
    np.testing.assert_allclose(kernels.sinkhorn_stack(z, 30, 0.5, 1e-9, 10_000), _core_py.sinkhorn_stack(z, 30, 0.5, 1e-9, 10_000), atol=1e-14)


# --- permutations, polar, Procrustes ----------------------------------------

@given(st.integers(1, 5), st.integers(0, 10_000))
def test_proj_perm_matches_bruteforce(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.random((n, n))
    np.testing.assert_array_equal(proj_perm(s), brute_perm(s))


def test_proj_perm_ties_go_low():
    np.testing.assert_array_equal(proj_perm(np.ones((3, 3))), np.eye(3))
    with pytest.raises(DimensionError):
        proj_perm(np.ones((2, 3)))


@given(st.integers(1, 7), st.integers(0, 10_000))
def test_polar_is_orthogonal_and_nearest(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    q = polar(a)
    np.testing.assert_allclose(q.T @ q, np.eye(d), atol=1e-8)
    best = np.linalg.norm(a - q)
    for _ in range(50):
        assert np.linalg.norm(a - _orth(rng, d)) >= best - 1e-10


def test_polar_flags_degenerate():
    _, flag = polar(np.diag([1.0, 0.0]), return_flag=True)
    assert flag
    with pytest.raises(NumericError):
        polar(np.array([[np.nan]]))


def test_procrustes_recovers_rotation_and_is_optimal(rng):
    for _ in range(20):
        d = int(rng.integers(2, 6))
        r = _orth(rng, d)
        phi = rng.normal(size=(d, 12))
        np.testing.assert_allclose(procrustes(phi, r @ phi), r, atol=1e-10)
        target = rng.normal(size=(d, 12))
        est = procrustes(phi, target)
        np.testing.assert_allclose(est.T @ est, np.eye(d), atol=1e-8)
        best = np.linalg.norm(est @ phi - target)
        for _ in range(1000 // 20):
            assert np.linalg.norm(_orth(rng, d) @ phi - target) >= best - 1e-10
    with pytest.raises(DimensionError):
        procrustes(np.zeros((2, 3)), np.zeros((3, 2)))


# --- bank ------------------------------------------------------------------------

def test_cyclic_structure():
    assert cyclic_structure(4) == ([(1, 1, 2), (1, 2, 3)], [(1, 3)])
    assert cyclic_structure(2) == ([], [])


def test_initial_bank(rng):
    bank = TransformBank.initial(5, 3, k=4, rng=rng)
    np.testing.assert_array_equal(bank.W[0], np.eye(5))
    assert bank.Pi.shape == (4, 3, 3)
    np.testing.assert_allclose(bank.Pi[0], np.eye(3), atol=1e-3)
    with pytest.raises(DimensionError):
        TransformBank(np.zeros((2, 3, 3)), np.zeros((3, 2, 2)))


def test_no_relabel_keeps_identity(rng):
    bank = _random_bank(rng, relabel=False)
    np.testing.assert_array_equal(bank.Pi, np.repeat(np.eye(3)[None], 3, axis=0))
    bank.apply_gradients(np.zeros_like(bank.W), np.ones_like(bank.Pi), 0.1)
    np.testing.assert_array_equal(bank.Pi, np.repeat(np.eye(3)[None], 3, axis=0))


# --- losses and gradients --------------------------------------------------------

def _check_sym_grads(loss_fn, q, bank, tol=1e-4):
    value, grads = loss_fn(q, bank)[:2]

    def with_head(h):
        return loss_fn(QModel(features=q.features, head=h), bank)[0]

    def with_w(w):
        b = bank.copy()
        b.W = w
        return loss_fn(q, b)[0]

    def with_pi(p):
        b = bank.copy()
        b.Pi = p
        return loss_fn(q, b)[0]

    assert rel_err(grads.head, finite_diff(with_head, q.head)) <= tol
    assert rel_err(grads.W, finite_diff(with_w, bank.W)) <= tol
    assert rel_err(grads.Pi, finite_diff(with_pi, bank.Pi)) <= tol


def test_equivariance_loss_gradients(rng):
    for _ in range(50):
        q, bank = _linear_q(rng), _random_bank(rng)
        states = rng.integers(0, 6, size=5)
        _check_sym_grads(lambda qq, bb: equivariance_loss(qq, bb, states), q, bank)


def test_local_equivariance_loss_gradients(rng):
    for _ in range(50):
        q, bank = _linear_q(rng), _random_bank(rng)
        states = rng.integers(0, 6, size=5)
        alpha = applicability_weights(q, bank, states).alpha
        _check_sym_grads(lambda qq, bb: local_equivariance_loss(qq, bb, states, alpha), q, bank)


def test_local_loss_with_unit_alpha_is_plain_loss(rng):
    q, bank = _linear_q(rng), _random_bank(rng)
    states = np.arange(6)
    plain, _ = equivariance_loss(q, bank, states)
    local, _ = local_equivariance_loss(q, bank, states, np.ones((6, 3)))
    assert local == pytest.approx(plain, rel=1e-7)


def test_applicability_weights_formula(rng):
    q, bank = _linear_q(rng), _random_bank(rng)
    states = np.arange(6)
    aw = applicability_weights(q, bank, states, sigma_loc=0.7, tau_loc=2.0)
    phi = q.features
    for i in range(6):
        for k in range(3):
            img = bank.W[k] @ phi[i]
            nn = min(np.sum((img - phi[j]) ** 2) for j in range(6))
            resid = phi[i] @ q.head - bank.Pi[k].T @ ((bank.W[k] @ phi[i]) @ q.head)
            expect = np.exp(-nn / 0.49) * np.exp(-np.sum(resid**2) / 2.0)
            assert aw.alpha[i, k] == pytest.approx(expect, rel=1e-9)
    assert alpha_formula(0.0, 0.0, 1.0, 1.0) == 1.0


def _reference_group_regs(bank, orders=(4,)):
    """Loop form of the identity, closure, inverse and order penalties."""
    w, p = bank.W, bank.Pi
    k = bank.K
    d, a = bank.d, bank.n_actions
    r_id = np.sum((w[0] - np.eye(d)) ** 2) + np.sum((p[0] - np.eye(a)) ** 2)
    r_id += sum(np.sum((w[i].T @ w[i] - np.eye(d)) ** 2) for i in range(k)) / k
    r_clo = np.mean([min(np.sum((w[i] @ w[j] - w[l]) ** 2) + np.sum((p[i] @ p[j] - p[l]) ** 2) for l in range(k))
                     for i, j in itertools.product(range(k), repeat=2)])
    r_inv = np.mean([min(np.sum((w[i].T - w[l]) ** 2) + np.sum((p[i].T - p[l]) ** 2) for l in range(k))
                     for i in range(k)])
    r_ord = sum(np.sum((np.linalg.matrix_power(x, m) - np.eye(len(x))) ** 2)
                for i in range(k) for m in orders for x in (w[i], p[i])) / k
    return r_id, r_clo, r_inv, r_ord


def test_group_regularizers_values_and_gradients(rng):
    for _ in range(50):
        bank = _random_bank(rng, k=int(rng.integers(2, 5)), d=3, a=3)
        regs = group_regularizers(bank)
        np.testing.assert_allclose([regs.r_id, regs.r_clo, regs.r_inv, regs.r_ord],
                                   _reference_group_regs(bank), rtol=1e-10)

        def f_w(w):
            b = bank.copy()
            b.W = w
            return group_regularizers(b).total

        def f_p(p):
            b = bank.copy()
            b.Pi = p
            return group_regularizers(b).total

        assert rel_err(regs.grad_W, finite_diff(f_w, bank.W)) <= 1e-4
        assert rel_err(regs.grad_Pi, finite_diff(f_p, bank.Pi)) <= 1e-4


def test_group_regularizers_vanish_on_exact_group():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    w = np.stack([np.linalg.matrix_power(rot, j) for j in range(4)])
    shift = np.roll(np.eye(4), 1, axis=0)
    p = np.stack([np.linalg.matrix_power(shift, j) for j in range(4)])
    bank = TransformBank.from_group(w, p)
    regs = group_regularizers(bank)
    assert regs.total == pytest.approx(0.0, abs=1e-24)
    assert regs.clo_argmin.tolist() == [(i + j) % 4 for i in range(4) for j in range(4)]
    assert regs.inv_argmin.tolist() == [0, 3, 2, 1]


def test_group_regs_backends_agree(rng):
    for _ in range(10):
        k, d, a = 4, 5, 3
        w, p = rng.normal(size=(k, d, d)), rng.random((k, a, a))
        i, j = np.divmod(np.arange(k * k), k)
        from gcrl import kernels
        got = kernels.group_regs(w, p, i, j, np.array([2, 4]))
        ref = _core_py.group_regs(w, p, i, j, np.array([2, 4]))
        for x, y in zip(got, ref):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-10)


def test_sampled_pairs_for_large_banks(rng):
    bank = _random_bank(rng, k=8, d=2, a=2)
    regs = group_regularizers(bank, rng=np.random.default_rng(0))
    assert len(regs.clo_argmin) == 30


def test_perm_and_div_gradients(rng):
    for _ in range(20):
        bank = _random_bank(rng, k=3, d=3, a=3)
        r_perm, r_div, gw, gp = perm_and_div_regularizers(bank)

        def f_w(w):
            b = bank.copy()
            b.W = w
            return perm_and_div_regularizers(b)[1]

        def f_p(p):
            b = bank.copy()
            b.Pi = p
            return perm_and_div_regularizers(b)[0]

        assert rel_err(gw, finite_diff(f_w, bank.W)) <= 1e-4
        assert rel_err(gp, finite_diff(f_p, bank.Pi)) <= 1e-4
        assert r_perm >= 0


def test_sym_loss_total_components(rng):
    q, bank = _linear_q(rng), _random_bank(rng)
    states = np.arange(6)
    value, grads, parts = sym_loss_total(q, bank, states, SymWeights(eq=1.0, grp=0.5, perm=0.1, div=0.2))
    expect = parts["eq"] + 0.5 * parts["grp"] + 0.1 * parts["perm"] + 0.2 * parts["div"]
    assert value == pytest.approx(expect)
    _, g0, parts0 = sym_loss_total(q, bank, states, SymWeights(eq=0.0))
    assert parts0 == {}
    assert not g0.head.any() and not g0.W.any()


def test_sym_loss_no_relabel_zeroes_pi_gradient(rng):
    q, bank = _linear_q(rng), _random_bank(rng, relabel=False)
    _, grads, _ = sym_loss_total(q, bank, np.arange(6), SymWeights(eq=1.0, grp=1.0, perm=1.0))
    assert not grads.Pi.any()


# --- closure and alignment ---------------------------------------------------------

def _rotation_group_setup():
    """Cyclic group C4 acting on 8 one-hot states, with a matching Q table."""
    n = 8
    shift = np.roll(np.eye(n), 2, axis=0)           # W e_s = e_{s+2}
    w = np.stack([np.linalg.matrix_power(shift, j) for j in range(4)])
    act = np.roll(np.eye(4), 1, axis=0)              # Pi e_a = e_{a+1}
    p = np.stack([np.linalg.matrix_power(act, j) for j in range(4)])
    base = np.random.default_rng(7).normal(size=(2, 4))
    table = np.zeros((n, 4))
    for s in range(n):
        j, r = divmod(s, 2)
        # Q(g^j s_r, Pi^j a) = Q(s_r, a)
        for a in range(4):
            table[s, (a + j) % 4] = base[r, a]
    return QModel(table), w, p


def test_rotation_setup_is_equivariant():
    q, w, p = _rotation_group_setup()
    bank = TransformBank.from_group(w, p)
    value, _ = equivariance_loss(q, bank, np.arange(8))
    assert value < 1e-20


def test_closure_alignment_fixed_point_on_exact_group():
    q, w, p = _rotation_group_setup()
    bank = TransformBank.from_group(w, p)
    out, diag = closure_alignment_step(bank, q, np.arange(8))
    np.testing.assert_allclose(out.W, w, atol=1e-12)
    np.testing.assert_array_equal(out.Pi, p)
    assert diag["alignment_skipped"] == []
    np.testing.assert_array_equal(out.logits, ANCHOR_LOGIT * p)


def test_closure_alignment_reduces_residual_from_perturbation(rng):
    q, w, p = _rotation_group_setup()
    for _ in range(10):
        noisy = TransformBank(w + 0.01 * rng.normal(size=w.shape), ANCHOR_LOGIT * p + 0.01 * rng.normal(size=p.shape))
        before = closure_residual(noisy)
        out, _ = closure_alignment_step(noisy, q, np.arange(8))
        after = closure_residual(out)
        assert after < before
        assert after < 1e-10
        np.testing.assert_allclose(out.W, w, atol=1e-10)
