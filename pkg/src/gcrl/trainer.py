"""Training loops: soft regularised double Q-learning and the hard manifold route."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from . import manifold, order, symmetry
from .envs import TabularEnv, make_env
from .errors import ConfigError, NumericError
from .mdp import QModel, TransitionBatch, double_q_targets, mean_per_pair, q_update_double, td_targets

MODES = ("soft", "hard", "baseline", "sym_only", "logic_only", "no_relabel")


@dataclass(frozen=True)
class SoftConfig:
    lambda_sym: float = 0.05
    lambda_dag: float = 0.001
    lambda_ord: float = 0.3
    # lambda_ord starts at this fraction of its final value and grows geometrically
    lambda_ord_start_frac: float = 0.1
    gamma_grp: float = 0.1
    gamma_perm: float = 0.01
    gamma_div: float = 0.01
    mu_start: float = 1.0
    mu_end: float = 1e3
    anneal_horizon: int | None = None
    delta: float = 0.05
    tau: float = 1.0
    knn_k: int = 5
    percentile_p: float = 70.0
    t_iso: int = 3
    lr_q: float = 0.1
    lr_bank: float = 1e-2
    lr_iso: float | None = None
    lambda_rank: float = 0.0
    edge_orientation: str = "delta"
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_horizon: int | None = None
    target_sync: int = 100
    batch: int = 64
    buffer_cap: int = 10_000
    gamma: float | None = None
    bank_k: int = 4
    sinkhorn_iters: int = 20
    sinkhorn_temp: float = 1.0
    sigma_loc: float = 1.0
    tau_loc: float = 1.0
    orders: tuple = (4,)

    def validate(self) -> None:
        for name in ("lambda_sym", "lambda_dag", "lambda_ord", "gamma_grp", "gamma_perm", "gamma_div",
                     "lambda_rank", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 1 <= self.t_iso <= 5:
            raise ConfigError("t_iso must lie in [1, 5]")
        if not 0 < self.lr_q <= 1:
            raise ConfigError("lr_q must lie in (0, 1]")
        if self.mu_start <= 0 or self.mu_end <= 0 or self.tau <= 0:
            raise ConfigError("mu_start, mu_end and tau must be positive")
        if not 0 < self.lambda_ord_start_frac <= 1:
            raise ConfigError("lambda_ord_start_frac must lie in (0, 1]")
        if self.edge_orientation not in ("delta", "source"):
            raise ConfigError("edge_orientation must be 'delta' or 'source'")
        if self.batch < 2 or self.buffer_cap < self.batch or self.target_sync < 1 or self.knn_k < 1:
            raise ConfigError("need batch >= 2, buffer_cap >= batch, target_sync >= 1, knn_k >= 1")
        if not 0 <= self.percentile_p <= 100 or not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError("percentile_p must lie in [0, 100] and 0 <= eps_end <= eps_start <= 1")
        if self.bank_k < 1:
            raise ConfigError("bank_k must be at least 1")


@dataclass(frozen=True)
class HardConfig:
    eta: float = 0.5
    eta_mu: float = 0.5
    lam: float = 1.0
    gate_threshold: float = 1e-6
    group_period_r: int = 10
    eps_damp: float = 1e-6
    xi_active: float = 1.0
    equalities: str = "auto"
    fallback_tol: float = 1e-6
    fallback_iters: int = 200

    def validate(self) -> None:
        if self.eta <= 0 or self.eta_mu <= 0 or self.lam <= 0:
            raise ConfigError("eta, eta_mu and lam must be positive")
        if self.gate_threshold < 0 or self.eps_damp < 0 or self.xi_active < 0:
            raise ConfigError("gate_threshold, eps_damp and xi_active must be nonnegative")
        if self.group_period_r < 1:
            raise ConfigError("group_period_r must be at least 1")
        if self.equalities not in ("auto", "oracle", "bank", "none"):
            raise ConfigError("equalities must be auto, oracle, bank or none")


@dataclass
class RunRecord:
    env: str
    mode: str
    seed: int
    config_hash: str
    eval_steps: list = field(default_factory=list)
    eval_returns: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def config_hash(*parts) -> str:
    blob = json.dumps([p if isinstance(p, dict) else asdict(p) for p in parts], sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def effective_config(mode: str, soft: SoftConfig) -> SoftConfig:
    """Apply a mode's ablation to the soft configuration."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == "baseline":
        return replace(soft, lambda_sym=0.0, lambda_dag=0.0, lambda_ord=0.0)
    if mode == "sym_only":
        return replace(soft, lambda_dag=0.0, lambda_ord=0.0)
    if mode == "logic_only":
        return replace(soft, lambda_sym=0.0)
    return soft


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Effective:
    mu: float
    lambda_ord: float
    epsilon: float


def geometric(start: float, end: float, step: int, horizon: int) -> float:
    if horizon <= 0:
        return end
    frac = min(max(step / horizon, 0.0), 1.0)
    return float(start * (end / start) ** frac)


def anneal(config: SoftConfig, step: int, horizon: int) -> Effective:
    """Geometric ramps for ``mu`` and ``lambda_ord``; linear decay of epsilon."""
    if step > horizon:
        raise ValueError("step beyond the annealing horizon")
    mu = geometric(config.mu_start, config.mu_end, step, horizon)
    lam = 0.0
    if config.lambda_ord > 0:
        lam = geometric(config.lambda_ord * config.lambda_ord_start_frac, config.lambda_ord, step, horizon)
    eps_h = config.eps_horizon or max(horizon // 2, 1)
    frac = min(step / eps_h, 1.0)
    eps = config.eps_start + frac * (config.eps_end - config.eps_start)
    return Effective(mu, lam, eps)


# ---------------------------------------------------------------------------
# learner state


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros(capacity, dtype=np.int64)
        self.d = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0

    def add(self, s: int, a: int, r: float, s2: int, d: bool) -> None:
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, d
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int) -> TransitionBatch:
        idx = rng.integers(0, self.size, size=n)
        return TransitionBatch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx])


@dataclass
class Learner:
    online: QModel
    target: QModel
    bank: symmetry.TransformBank
    features: np.ndarray
    gamma: float
    soft: SoftConfig
    hard: HardConfig
    oracle: list = field(default_factory=list)
    updates: int = 0
    hard_steps: int = 0

    @classmethod
    def create(cls, env: TabularEnv, soft: SoftConfig, hard: HardConfig | None = None, rng=None,
               relabel: bool = True) -> "Learner":
        rng = np.random.default_rng(rng)
        q = QModel.tabular(env.n_states, env.n_actions)
        bank = symmetry.TransformBank.initial(env.n_states, env.n_actions, k=soft.bank_k, rng=rng,
                                              sinkhorn_iters=soft.sinkhorn_iters,
                                              sinkhorn_temp=soft.sinkhorn_temp, relabel=relabel)
        gamma = soft.gamma if soft.gamma is not None else env.gamma
        return cls(q, q.copy(), bank, env.features(), gamma, soft, hard or HardConfig(),
                   env.oracle_symmetries())

    def sync(self) -> None:
        self.updates += 1
        if self.updates % self.soft.target_sync == 0:
            self.target = self.online.copy()


# ---------------------------------------------------------------------------
# soft route


def _greedy_slots(q: QModel, states) -> np.ndarray:
    return q.rows(states).argmax(axis=1)


def edge_weight_grads(dag: order.PrefDag, nudges, next_rows, tau: float, orientation: str):
    """Gradients of ``dag_loss`` with respect to the nudges and next-state rows.

    Edge weights are recomputed from the scores with the DAG's edge set held
    fixed.
    """
    nudges = np.asarray(nudges, dtype=float)
    rows = np.asarray(next_rows, dtype=float)
    b, n_act = rows.shape
    g_nudge = np.zeros(b)
    g_rows = np.zeros_like(rows)
    m = dag.n_edges
    if m == 0:
        return g_nudge, g_rows
    sig = expit(nudges / tau)
    conf = np.exp(-rows.var(axis=1))
    u, v = dag.u, dag.v
    w_src = sig[u] * conf[u]
    if orientation == "delta":
        pair = expit((nudges[u] - nudges[v]) / tau)
        w = w_src * pair
        dw_du = w * ((1.0 - sig[u]) / tau + (1.0 - pair) / tau)
        dw_dv = -w * (1.0 - pair) / tau
        np.add.at(g_nudge, v, -dw_dv / m)
    else:
        w = w_src
        dw_du = w * (1.0 - sig[u]) / tau
    np.add.at(g_nudge, u, -dw_du / m)
    # d conf / d row = -conf * 2/A * (row - mean)
    dconf = -(2.0 / n_act) * (rows - rows.mean(axis=1, keepdims=True))
    coef = np.zeros(b)
    np.add.at(coef, u, -w / m)
    g_rows = coef[:, None] * dconf
    return g_nudge, g_rows


def soft_train_step(learner: Learner, batch: TransitionBatch, eff: Effective,
                    rng: np.random.Generator | None = None) -> dict:
    """One update of the total soft objective.

    The TD part is the plain double Q-learning step; regulariser gradients are
    evaluated at the pre-update table, scaled by the batch size so they share
    the TD step's per-entry scale, and applied with ``lr_q``.
    """
    cfg = learner.soft
    q = learner.online
    b = len(batch)
    diag = {"l_td": 0.0, "l_sym": 0.0, "l_dag": 0.0, "l_ord": 0.0, "violation": 0.0}
    new = q_update_double(batch, q, learner.target, cfg.lr_q, learner.gamma)
    y = double_q_targets(batch, q, learner.target, learner.gamma)
    td_err = y - q.rows(batch.states)[np.arange(b), batch.actions]
    diag["l_td"] = float(np.mean(td_err**2))
    grad = np.zeros_like(q.table)
    lam_ord = eff.lambda_ord
    if lam_ord > 0 or cfg.lambda_dag > 0:
        _, nudges = td_targets(batch, learner.target, learner.gamma, q_online=q)
        next_rows = q.rows(batch.next_states)
        scores = order.preference_scores(nudges, next_rows, cfg.tau)
        orient = nudges if cfg.edge_orientation == "delta" else None
        cand = order.candidate_arrays(learner.features[batch.states], scores, cfg.knn_k, cfg.percentile_p,
                                      orient, cfg.tau)
        dag = order.greedy_dagify(b, cand)
        diag["l_dag"] = order.dag_loss(dag)
        greedy = _greedy_slots(q, batch.states)
        v = q.table[batch.states, greedy]
        diag["violation"] = order.violations(v, dag, cfg.delta)[1]
        if lam_ord > 0 and dag.n_edges:
            _, l_ord, g_v = order.penalty_isotonic(v, dag, cfg.delta, eff.mu, cfg.t_iso, cfg.lr_iso,
                                                   cfg.lambda_rank)
            diag["l_ord"] = l_ord
            np.add.at(grad, (batch.states, greedy), lam_ord * g_v)
        if cfg.lambda_dag > 0 and dag.n_edges:
            g_nudge, g_rows = edge_weight_grads(dag, nudges, next_rows, cfg.tau, cfg.edge_orientation)
            # nudge = y - max_a Q(s, a) with y from the target table
            np.add.at(grad, (batch.states, greedy), -cfg.lambda_dag * g_nudge)
            np.add.at(grad, batch.next_states, cfg.lambda_dag * g_rows)
    if cfg.lambda_sym > 0:
        weights = symmetry.SymWeights(1.0, cfg.gamma_grp, cfg.gamma_perm, cfg.gamma_div)
        value, g, _ = symmetry.sym_loss_total(q, learner.bank, batch.states, weights, orders=cfg.orders,
                                              rng=rng, sigma_loc=cfg.sigma_loc, tau_loc=cfg.tau_loc)
        diag["l_sym"] = value
        grad += cfg.lambda_sym * g.head
        learner.bank.apply_gradients(cfg.lambda_sym * g.W, cfg.lambda_sym * g.Pi, cfg.lr_bank)
    if grad.any():
        new.table -= cfg.lr_q * b * grad
    total = diag["l_td"] + cfg.lambda_sym * diag["l_sym"] + cfg.lambda_dag * diag["l_dag"] + lam_ord * diag["l_ord"]
    if not np.isfinite(total) or not np.all(np.isfinite(new.table)):
        raise NumericError(f"non-finite soft objective: {diag}")
    learner.online = new
    learner.sync()
    return diag


# ---------------------------------------------------------------------------
# hard route


def _union_find(n: int, pairs) -> np.ndarray:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(x) for x in range(n)], dtype=np.int64)


def equality_pairs(slot_states, slot_actions, maps) -> np.ndarray:
    """Slot pairs ``(i, j)`` with ``(T s_i, Pi a_i) = (s_j, a_j)`` for some map."""
    key = {(int(s), int(a)): i for i, (s, a) in enumerate(zip(slot_states, slot_actions))}
    out = set()
    for state_map, action_perm in maps:
        for i, (s, a) in enumerate(zip(slot_states, slot_actions)):
            j = key.get((int(state_map[s]), int(action_perm[a])))
            if j is not None and j != i:
                out.add((min(i, j), max(i, j)))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


def _bank_maps(bank: symmetry.TransformBank, features: np.ndarray, tol: float = 1e-9):
    """State/action maps realised exactly by bank slots on the feature table."""
    maps = []
    for k in range(1, bank.K):
        img = features @ bank.W[k].T
        d2 = (img * img).sum(axis=1)[:, None] - 2.0 * img @ features.T + (features * features).sum(axis=1)
        nearest = d2.argmin(axis=1)
        # recompute the winners exactly; the expanded form loses precision
        if np.linalg.norm(img - features[nearest], axis=1).max() > tol:
            continue
        perm = symmetry.proj_perm(bank.Pi[k])
        maps.append((nearest, perm.argmax(axis=0)))
    return maps


def hard_train_step(learner: Learner, batch: TransitionBatch, rng: np.random.Generator | None = None) -> dict:
    """Tangent/normal update of the batch's unique ``(s, a)`` values.

    Each unique pair is one value slot holding ``Q(s, a)`` with the mean double
    Q target. Order edges come from the batch preference DAG built over
    equality classes (so the constraint set is always feasible); equalities
    tie slots related by an oracle or exactly realised bank transform.
    """
    cfg, hcfg = learner.soft, learner.hard
    q = learner.online
    b = len(batch)
    y = double_q_targets(batch, q, learner.target, learner.gamma)
    s_u, a_u, y_slot = mean_per_pair(batch.states, batch.actions, y, q.n_actions)
    n = len(s_u)
    slot_of = {(int(s), int(a)): i for i, (s, a) in enumerate(zip(s_u, a_u))}
    sample_slot = np.array([slot_of[(int(s), int(a))] for s, a in zip(batch.states, batch.actions)])
    v = q.table[s_u, a_u].copy()

    mode = hcfg.equalities
    if mode == "auto":
        mode = "oracle" if learner.oracle else "bank"
    if mode == "oracle":
        maps = [(g.state_map, g.action_perm) for g in learner.oracle]
    elif mode == "bank":
        maps = _bank_maps(learner.bank, q.feature_matrix())
    else:
        maps = []
    eqs = equality_pairs(s_u, a_u, maps)
    cls = _union_find(n, eqs)

    _, nudges = td_targets(batch, learner.target, learner.gamma, q_online=q)
    scores = order.preference_scores(nudges, q.rows(batch.next_states), cfg.tau)
    orient = nudges if cfg.edge_orientation == "delta" else None
    cu, cv, cw = order.candidate_arrays(learner.features[batch.states], scores, cfg.knn_k, cfg.percentile_p,
                                        orient, cfg.tau)
    su, sv = sample_slot[cu], sample_slot[cv]
    ku, kv = cls[su], cls[sv]
    keep = ku != kv
    su, sv, ku, kv, cw = su[keep], sv[keep], ku[keep], kv[keep], cw[keep]
    class_dag = order.greedy_dagify(n, (ku, kv, cw))
    # map kept class edges back to one representative slot edge each
    chosen = {}
    for a, c, s1, s2 in zip(ku.tolist(), kv.tolist(), su.tolist(), sv.tolist()):
        chosen.setdefault((a, c), (s1, s2))
    edges = np.array([chosen[(int(a), int(c))] for a, c in zip(class_dag.u, class_dag.v)],
                     dtype=np.int64).reshape(-1, 2)

    cs = manifold.ConstraintSystem.build(n, edges, eqs, cfg.delta, v=v)
    cs = manifold.active_set(cs, v, hcfg.xi_active)
    js = manifold.jacobians(cs)
    v_plus, mu_plus, info = manifold.manifold_update(cs, js, v, v - y_slot, hcfg.eta, hcfg.eta_mu, hcfg.lam,
                                                     hcfg.gate_threshold, hcfg.eps_damp)
    fallback = 0
    if info.normal_used and info.phi_after >= info.phi_before:
        fallback = 1
        v_plus, mu_plus = manifold.fallback_correct(cs.with_mu(mu_plus), js, v_plus, hcfg.fallback_tol,
                                                    hcfg.fallback_iters)
    new = q.copy()
    new.add_value_step(s_u, a_u, v_plus - v)
    h_before = float(np.abs(v[eqs[:, 0]] - v[eqs[:, 1]]).sum()) if len(eqs) else 0.0
    h_after = float(np.abs(v_plus[eqs[:, 0]] - v_plus[eqs[:, 1]]).sum()) if len(eqs) else 0.0
    learner.online = new
    learner.hard_steps += 1
    if learner.hard_steps % hcfg.group_period_r == 0 and learner.bank.K > 1:
        learner.bank, _ = symmetry.closure_alignment_step(learner.bank, q, batch.states)
    learner.sync()
    return {"l_td": float(np.mean((v - y_slot) ** 2)), "phi_before": info.phi_before,
            "phi_after": info.phi_after, "eq_before": h_before, "eq_after": h_after,
            "n_ineq": cs.n_ineq, "n_eq": cs.n_eq, "fallback": fallback,
            "violation": _slot_violation(v_plus, edges, cfg.delta)}


def _slot_violation(v, edges, delta) -> float:
    if len(edges) == 0:
        return 0.0
    h = np.maximum(delta + v[edges[:, 1]] - v[edges[:, 0]], 0.0)
    return float(np.mean(h * h))


# ---------------------------------------------------------------------------
# runs


def greedy_action(row: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(row == row.max())
    return int(best[0] if len(best) == 1 else best[rng.integers(len(best))])


def evaluate(env: TabularEnv, q: QModel, episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of the greedy policy (random tie-breaks)."""
    table = q.values()
    ties = [np.flatnonzero(row == row.max()) for row in table]
    total = 0.0
    for _ in range(episodes):
        s = env.reset(int(rng.integers(2**31)))
        for _ in range(env.max_steps):
            best = ties[s]
            a = int(best[0]) if len(best) == 1 else int(best[rng.integers(len(best))])
            s, r, done = env.step(s, a)
            total += r
            if done:
                break
    return total / episodes


def train_run(env_name: str, mode: str, config: SoftConfig | None = None, seed: int = 0,
              total_steps: int = 20_000, eval_every: int | None = None, eval_episodes: int = 20,
              hard: HardConfig | None = None, env_params: dict | None = None) -> RunRecord:
    """Train one learner and log greedy evaluations.

    Evaluations happen at step 0, every ``eval_every`` environment steps
    (default ``total_steps / 100``) and at the end, on a separate
    environment instance. Fully determined by ``seed``.
    """
    soft = effective_config(mode, config or SoftConfig())
    soft.validate()
    hard = hard or HardConfig()
    hard.validate()
    env_params = dict(env_params or {})
    if total_steps < 1:
        raise ConfigError("total_steps must be positive")
    eval_every = eval_every or max(total_steps // 100, 1)
    seeds = np.random.SeedSequence(seed).spawn(4)
    env = make_env(env_name, seed=int(seeds[0].generate_state(1)[0]), **env_params)
    eval_env = make_env(env_name, seed=int(seeds[1].generate_state(1)[0]), **env_params)
    rng = np.random.default_rng(seeds[2])
    eval_rng = np.random.default_rng(seeds[3])
    learner = Learner.create(env, soft, hard, rng=rng, relabel=(mode != "no_relabel"))
    buffer = ReplayBuffer(soft.buffer_cap)
    horizon = soft.anneal_horizon or total_steps
    hashed = config_hash(soft, hard if mode == "hard" else {}, {"env": env_name, **env_params})
    record = RunRecord(env_name, mode, seed, hashed)

    def checkpoint(step: int, window: list) -> None:
        record.eval_steps.append(step)
        record.eval_returns.append(evaluate(eval_env, learner.online, eval_episodes, eval_rng))
        keys = sorted({k for d in window for k in d})
        record.diagnostics.append({k: float(np.mean([d[k] for d in window if k in d])) for k in keys})

    window: list[dict] = []
    checkpoint(0, window)
    s = env.reset()
    ep_len = 0
    for step in range(1, total_steps + 1):
        eff = anneal(soft, min(step, horizon), horizon)
        if rng.random() < eff.epsilon:
            a = int(rng.integers(env.n_actions))
        else:
            a = greedy_action(learner.online.table[s], rng)
        s2, r, done = env.step(s, a)
        ep_len += 1
        buffer.add(s, a, r, s2, done)
        if done or ep_len >= env.max_steps:
            s, ep_len = env.reset(), 0
        else:
            s = s2
        if buffer.size >= soft.batch:
            batch = buffer.sample(rng, soft.batch)
            if mode == "hard":
                window.append(hard_train_step(learner, batch, rng))
            else:
                window.append(soft_train_step(learner, batch, eff, rng))
        if step % eval_every == 0 or step == total_steps:
            if record.eval_steps[-1] != step:
                checkpoint(step, window)
            window = []
    return record


def record_fields() -> list[str]:
    return [f.name for f in fields(RunRecord)]
