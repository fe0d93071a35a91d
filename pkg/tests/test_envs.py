import numpy as np
import pytest

from gcrl.envs import (BACKWARD, FORWARD, ButtonPermTabular, NoisyRpsChain, RotMirrorGrid, make_env,
                       rps_payoff)
from gcrl.mdp import solve_q_star


@pytest.fixture(scope="module")
def grid():
    return RotMirrorGrid()


def test_rps_payoff_is_cyclic():
    m = np.array([[rps_payoff(o, a) for a in range(3)] for o in range(3)])
    np.testing.assert_array_equal(m, -m.T)
    for a in range(3):
        assert sorted(rps_payoff(o, a) for o in range(3)) == [-1, 0, 1]


def test_chain_forward_and_export():
    env = NoisyRpsChain(eta=0.0)
    for k in range(env.goal):
        nxt, r, done = env.step(k, FORWARD)
        assert nxt == k + 1 and done == (nxt == env.goal)
    mdp = env.export_mdp()
    assert mdp.n_states == 13
    for k in range(env.goal):
        assert mdp.transition[k, FORWARD, k + 1] == 1.0
    # gadget states are unreachable from the chain without detours
    assert not mdp.transition[:10, :, 10:].any()


def test_chain_optimal_return_and_order():
    env = NoisyRpsChain(eta=0.0)
    q = solve_q_star(env.export_mdp()).table
    v = q.max(axis=1)[:10]
    # earlier states collect more progress reward before the goal
    assert np.all(np.diff(v[:-1]) < 0)
    total, s = 0.0, env.reset(seed=0)
    for _ in range(20):
        s, r, done = env.step(s, int(np.argmax(q[s])))
        total += r
        if done:
            break
    assert total == pytest.approx(19.0)


def test_chain_detours_match_export():
    env = NoisyRpsChain(eta=0.4, seed=1)
    mdp = env.export_mdp()
    for s, a in [(3, FORWARD), (6, FORWARD), (4, FORWARD), (10, 0), (5, BACKWARD)]:
        counts = np.zeros(mdp.n_states)
        n = 20_000
        for _ in range(n):
            counts[env.step(s, a)[0]] += 1
        p = mdp.transition[s, a]
        sd = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= 3 * sd + 1e-12)


def test_chain_has_cycles_in_preference_sense():
    # with detours, sampled TD preferences contain a directed cycle in some batch
    from gcrl.mdp import QModel, TransitionBatch, td_targets
    from gcrl.order import candidate_arrays, preference_scores

    env = NoisyRpsChain(eta=0.3, seed=0)
    rng = np.random.default_rng(0)
    q = QModel(rng.normal(size=(13, 3)) * 0.5)
    feats = env.features()
    found = 0
    for _ in range(50):
        entries, s = [], env.reset()
        while len(entries) < 32:
            a = int(rng.integers(3))
            s2, r, d = env.step(s, a)
            entries.append((s, a, r, s2, d))
            s = env.reset() if d else s2
        b = TransitionBatch.from_entries(entries)
        _, nudges = td_targets(b, q, 0.95)
        scores = preference_scores(nudges, q.rows(b.next_states), 1.0)
        u, v, _ = candidate_arrays(feats[b.states], scores, 5, 0.0)
        adj = np.zeros((32, 32), dtype=bool)
        adj[u, v] = True
        reach = adj.copy()
        for _ in range(6):
            reach |= (reach.astype(int) @ reach.astype(int)) > 0
        found += bool(reach.diagonal().any())
    assert found > 0


def test_grid_layout_properties(grid):
    assert grid.n_states > 200
    assert grid.goal not in grid.start_cells
    mdp = grid.export_mdp()
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0)


def test_grid_step_right(grid):
    c = grid.size // 2
    # find a free cell with a free right neighbour
    for (x, y), s in grid.index.items():
        if (x + 1, y) in grid.index and s != grid.goal and (x + 1, y) != (c, c):
            nxt, r, done = grid.step(s, 1)
            assert nxt == grid.index[(x + 1, y)]
            assert r == grid.step_reward and not done
            break


def test_grid_symmetries_satisfy_invariance(grid):
    mdp = grid.export_mdp()
    syms = grid.oracle_symmetries()
    assert syms[0].name == "identity"
    for g in syms:
        t, pa = g.state_map, g.action_perm
        np.testing.assert_array_equal(mdp.reward[t][:, pa], mdp.reward)
        # P(T s' | T s, Pi a) = P(s' | s, a)
        pushed = mdp.transition[t][:, pa][:, :, t]
        assert np.max(np.abs(pushed - mdp.transition)) <= 1e-12


def test_grid_q_star_equivariance(grid):
    q = solve_q_star(grid.export_mdp(), tol=1e-10).table
    for g in grid.oracle_symmetries():
        assert np.max(np.abs(q[g.state_map][:, g.action_perm] - q)) <= 1e-6


def test_grid_group_closure(grid):
    r = grid.symmetry("rot90")
    acc = grid.symmetry("identity")
    for _ in range(4):
        acc = r.compose(acc)
    np.testing.assert_array_equal(acc.state_map, np.arange(grid.n_states))
    np.testing.assert_array_equal(acc.action_perm, np.arange(4))
    mh = grid.symmetry("mirror_h")
    assert mh.action_perm.tolist() == [0, 3, 2, 1]


def test_grid_asymmetry_disables_oracle():
    env = RotMirrorGrid(p_asym=1.0, seed=0)
    assert env.oracle_symmetries() == []
    env.reset()
    assert env.perturbed is not None
    mdp = env.export_mdp()
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0)


def test_button_perm():
    env = ButtonPermTabular(seed=0)
    s = env.reset()
    for b in env.target_sequence:
        s, r, done = env.step(s, int(env.sigma[b]))
    assert done and r == env.success_reward
    assert env.export_mdp().n_states == len(env.target_sequence) + 1
    s = env.reset()
    wrong = int(env.sigma[(env.target_sequence[0] + 1) % 6])
    assert env.step(s, wrong)[0] == 0


def test_make_env_and_ranges():
    with pytest.raises(ValueError):
        make_env("nope")
    env = make_env("rps_chain", eta=0.1)
    with pytest.raises(IndexError):
        env.step(99, 0)
    with pytest.raises(ValueError):
        NoisyRpsChain(eta=2.0)
