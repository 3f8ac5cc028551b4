"""Soft-threshold policies and primal-dual natural policy gradient training.

Two training loops live here:

* ``run_exact_primal_dual`` uses exact policy evaluation for every client and
  exact discounted budget use in the multiplier update.
* ``run_threshold_npg`` is the tabular actor-critic: a count-based TD critic per
  client, a per-visit logit update, and a sampled multiplier update once all
  clients have moved.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .mdp import HIGH, LOW, ClientModel
from .solve import (G_VEC, advantage_table, evaluate_policy, lambda_max,
                    occupancy_measure)

THETA_CLIP = 50.0
ADVANTAGE_MODES = ("model_based", "sampled")
UPDATE_MODES = ("difference", "a1_only")
DUAL_TARGETS = ("discounted", "per_step")


# ---------------------------------------------------------------- policy

@dataclass
class SoftThresholdPolicy:
    """One logit per state; ``P(HIGH | s) = sigmoid(theta[s])``."""

    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.clip(np.asarray(self.theta, dtype=float), -THETA_CLIP, THETA_CLIP)

    @classmethod
    def zeros(cls, m: ClientModel) -> "SoftThresholdPolicy":
        return cls(np.zeros(m.n_states))

    @classmethod
    def from_threshold(cls, f: Sequence[int], m: ClientModel) -> "SoftThresholdPolicy":
        """Logits ``theta(x, y) = f(y) - x``; positive exactly where the hard rule picks HIGH."""
        return cls(np.array([f[s.y] - s.x for s in m.states()], dtype=float))

    def probs(self) -> np.ndarray:
        return policy_probs(self.theta)

    def hard_threshold(self, m: ClientModel) -> tuple[int, ...]:
        """Per stall count, the largest buffer level whose HIGH probability is at least one half.

        Counted as the number of such levels minus one, so a monotone logit
        profile maps to its zero crossing and ``from_threshold`` round-trips.
        """
        grid = self.theta.reshape(m.shape)
        return tuple(int((grid[:, y] >= 0).sum()) - 1 for y in range(m.M + 1))


def policy_probs(theta: np.ndarray) -> np.ndarray:
    t = np.clip(theta, -THETA_CLIP, THETA_CLIP)
    p_high = expit(t)
    # 1 - expit(t) loses everything for large t; expit(-t) keeps full precision.
    return np.stack([p_high, expit(-t)], axis=-1)


def action_prob(policy: SoftThresholdPolicy, s: int, a) -> float:
    t = float(np.clip(policy.theta[s], -THETA_CLIP, THETA_CLIP))
    return float(expit(t) if a == HIGH else expit(-t))


def score(theta: np.ndarray) -> np.ndarray:
    """``d log pi(s, a) / d theta(s)`` as an ``(S, 2)`` array (off-state derivatives vanish)."""
    pi = policy_probs(theta)
    # 1 - pi(HIGH) == pi(LOW) and 1 - pi(LOW) == pi(HIGH); the right-hand sides keep precision.
    return np.stack([pi[:, LOW], -pi[:, HIGH]], axis=1)


# ---------------------------------------------------------------- exact updates

def lagrangian_advantages(theta: np.ndarray, lam: float, m: ClientModel):
    pi = policy_probs(theta)
    ev = evaluate_policy(pi, m, lam)
    return pi, ev, advantage_table(pi, m, lam, ev)


def exact_primal_step(theta: np.ndarray, lam: float, m: ClientModel,
                      rho: np.ndarray | None = None, eta1: float = math.log(2)) -> np.ndarray:
    """Additive logit step at every state from exact Lagrangian advantages.

    ``rho`` does not enter: the natural gradient cancels the visitation weights.
    """
    _, _, adv = lagrangian_advantages(theta, lam, m)
    A = adv.A_lambda
    return theta - eta1 / (1.0 - m.gamma) * (A[:, HIGH] - A[:, LOW])


def multiplicative_policy_update(pi: np.ndarray, A: np.ndarray, eta1: float,
                                 gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """``pi'(s, a) = pi(s, a) exp(-eta1 A(s, a) / (1 - gamma)) / Z(s)``; returns ``(pi', log Z)``.

    Computed in log space so that extreme advantages do not overflow.
    """
    logits = np.log(pi) - eta1 / (1.0 - gamma) * A
    logZ = logsumexp(logits, axis=1)
    return np.exp(logits - logZ[:, None]), logZ


@dataclass(frozen=True)
class NaturalGradient:
    direction: np.ndarray  # pinv(F) @ grad, per state
    fisher: np.ndarray
    grad: np.ndarray
    occupancy: np.ndarray
    rank: int
    cond: float


def lagrangian_objective(theta: np.ndarray, lam: float, m: ClientModel, rho: np.ndarray) -> float:
    ev = evaluate_policy(policy_probs(theta), m, lam)
    return float(rho @ (ev.J_c + lam * ev.J_g))


def policy_gradient(theta: np.ndarray, lam: float, m: ClientModel, rho: np.ndarray) -> np.ndarray:
    """Exact gradient of ``J(rho; lam)`` in ``theta`` from the policy-gradient formula."""
    pi, ev, adv = lagrangian_advantages(theta, lam, m)
    d = occupancy_measure(pi, m, rho).d
    return d * (pi * score(theta) * adv.A_lambda).sum(axis=1) / (1.0 - m.gamma)


def fisher_matrix(theta: np.ndarray, m: ClientModel, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Materialize ``F = E_{s~d, a~pi}[grad log pi grad log pi^T]`` by summing outer products."""
    S = m.n_states
    pi = policy_probs(theta)
    d = occupancy_measure(pi, m, rho).d
    sc = score(theta)
    F = np.zeros((S, S))
    for s in range(S):
        for a in (HIGH, LOW):
            v = np.zeros(S)
            v[s] = sc[s, a]
            F += d[s] * pi[s, a] * np.outer(v, v)
    return F, d


def natural_gradient_oracle(theta: np.ndarray, lam: float, m: ClientModel,
                            rho: np.ndarray) -> NaturalGradient:
    if m.n_states > 256:
        raise ValueError("explicit Fisher oracle is limited to 256 states")
    F, d = fisher_matrix(theta, m, rho)
    grad = policy_gradient(theta, lam, m, rho)
    sv = np.linalg.svd(F, compute_uv=False)
    cutoff = 1e-15 * max(sv.max(), 1e-300)
    rank = int((sv > cutoff).sum())
    cond = float(sv.max() / sv[rank - 1]) if rank else math.inf
    direction = np.linalg.pinv(F, rcond=1e-15, hermitian=True) @ grad
    return NaturalGradient(direction, F, grad, d, rank, cond)


def finite_difference_gradient(theta: np.ndarray, lam: float, m: ClientModel,
                               rho: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(theta)
    for s in range(theta.size):
        e = np.zeros_like(theta)
        e[s] = h
        out[s] = (lagrangian_objective(theta + e, lam, m, rho)
                  - lagrangian_objective(theta - e, lam, m, rho)) / (2 * h)
    return out


# ---------------------------------------------------------------- dual

@dataclass(frozen=True)
class DualState:
    lam: float
    lam_max: float
    eta2: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= self.lam_max:
            raise ValueError(f"lambda {self.lam} outside [0, {self.lam_max}]")


def dual_step(d: DualState, sum_Jg: float, K_bar: float) -> DualState:
    lam = min(max(d.lam + d.eta2 * (sum_Jg - K_bar), 0.0), d.lam_max)
    return replace(d, lam=lam)


# ---------------------------------------------------------------- config / trace

@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``eta2=None`` selects ``(1 - gamma) / (N sqrt(T))`` and ``xi=None`` selects
    the slack of the always-LOW policy (``K_bar``).  ``eta2=0`` freezes the
    multiplier at ``lambda0``.  ``dual_target`` chooses what the sampled
    budget use is compared against in the actor-critic: ``discounted`` uses
    ``K_bar`` and ``per_step`` uses ``K_bar (1 - gamma)``.
    """

    T: int = 1000
    K_bar: float = 10.0
    eta1: float = math.log(2)
    eta2: float | None = None
    xi: float | None = None
    lambda0: float = 0.0
    advantage_mode: str = "model_based"
    update_mode: str = "difference"
    dual_target: str = "discounted"
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not self.eta1 > 0:
            raise ValueError("eta1 must be positive")
        if self.eta2 is not None and self.eta2 < 0:
            raise ValueError("eta2 must be non-negative")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ValueError(f"advantage_mode must be one of {ADVANTAGE_MODES}")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
        if self.dual_target not in DUAL_TARGETS:
            raise ValueError(f"dual_target must be one of {DUAL_TARGETS}")

    def resolved_eta2(self, N: int, gamma: float) -> float:
        if self.eta2 is not None:
            return float(self.eta2)
        return (1.0 - gamma) / (N * math.sqrt(self.T))

    def resolved_xi(self) -> float:
        return float(self.K_bar if self.xi is None else self.xi)

    def lam_max(self, N: int, gamma: float) -> float:
        return lambda_max(N, gamma, self.resolved_xi())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    """Per-iteration records. Exact mode stores one row per (t, client)."""

    rows: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


# ---------------------------------------------------------------- exact loop

EXACT_COLUMNS = ("t", "client", "J_c", "J_g", "lambda", "logZ_mean", "gap_avg", "violation_avg")


@dataclass
class ExactResult:
    thetas: list
    dual: DualState
    trace: TrainTrace
    improvement_slack: np.ndarray   # (T, N): lhs - rhs of the improvement inequality
    logZ: np.ndarray                # (T, N): E_rho log Z_t per client
    lam_steps: np.ndarray           # (T,): |lambda_{t+1} - lambda_t|
    gap_avg: np.ndarray             # (T,)
    violation_avg: np.ndarray       # (T,)


def run_exact_primal_dual(clients: Sequence[tuple[ClientModel, np.ndarray]], cfg: TrainConfig,
                          J_c_star: float | None = None) -> ExactResult:
    """Exact primal-dual NPG started from zero logits and ``cfg.lambda0``.

    ``J_c_star`` is the constrained optimum used for the running optimality gap
    (NaN columns when absent).
    """
    N = len(clients)
    gamma = clients[0][0].gamma
    if any(m.gamma != gamma for m, _ in clients):
        raise ValueError("all clients must share gamma")
    dual = DualState(cfg.lambda0, cfg.lam_max(N, gamma), cfg.resolved_eta2(N, gamma))
    thetas = [np.zeros(m.n_states) for m, _ in clients]
    trace = TrainTrace()
    T = cfg.T
    slack = np.zeros((T, N))
    logZ_all = np.zeros((T, N))
    steps = np.zeros(T)
    gaps = np.zeros(T)
    viols = np.zeros(T)
    sum_jc = np.zeros(N)
    sum_jg = np.zeros(N)

    def evaluate(n, theta):
        m, rho = clients[n]
        pi = policy_probs(theta)
        ev = evaluate_policy(pi, m)
        return pi, ev, float(rho @ ev.J_c), float(rho @ ev.J_g)

    current = [evaluate(n, thetas[n]) for n in range(N)]
    for t in range(T):
        lam = dual.lam
        jc = np.array([c[2] for c in current])
        jg = np.array([c[3] for c in current])
        nxt = []
        for n, (m, rho) in enumerate(clients):
            pi, ev, _, _ = current[n]
            ev_lam = replace(ev, lam=lam)
            A = advantage_table(pi, m, lam, ev_lam).A_lambda
            new_pi, logZ = multiplicative_policy_update(pi, A, cfg.eta1, gamma)
            thetas[n] = np.clip(thetas[n] - cfg.eta1 / (1.0 - gamma) * (A[:, HIGH] - A[:, LOW]),
                                -THETA_CLIP, THETA_CLIP)
            res = evaluate(n, thetas[n])
            nxt.append(res)
            logZ_all[t, n] = float(rho @ logZ)
            lhs = jc[n] - res[2] + lam * (jg[n] - res[3])
            slack[t, n] = lhs - (1.0 - gamma) / cfg.eta1 * logZ_all[t, n]
        sum_jc += jc
        sum_jg += jg
        gaps[t] = sum_jc.sum() / (t + 1) - J_c_star if J_c_star is not None else math.nan
        viols[t] = max(sum_jg.sum() / (t + 1) - cfg.K_bar, 0.0)
        new_dual = dual_step(dual, float(jg.sum()), cfg.K_bar)
        steps[t] = abs(new_dual.lam - dual.lam)
        for n in range(N):
            trace.rows.append({"t": t, "client": n, "J_c": jc[n], "J_g": jg[n], "lambda": lam,
                               "logZ_mean": logZ_all[t, n], "gap_avg": gaps[t],
                               "violation_avg": viols[t]})
        dual = new_dual
        current = nxt
    return ExactResult(thetas, dual, trace, slack, logZ_all, steps, gaps, viols)


def convergence_bounds(N: int, gamma: float, T: int, xi: float) -> tuple[float, float]:
    """Upper bounds on the running-average optimality gap and constraint violation."""
    gap = 4.0 * N / ((1.0 - gamma) ** 2 * math.sqrt(T))
    viol = (2.0 / xi + 4.0 * xi) * N**2 / ((1.0 - gamma) ** 2 * math.sqrt(T))
    return gap, viol


# ---------------------------------------------------------------- actor-critic

AC_COLUMNS = ("t", "lambda", "mean_sum_g", "mean_cost")


@dataclass
class ACState:
    """Everything the actor-critic needs to continue from tick ``t``."""

    t: int
    theta: np.ndarray    # (N, S)
    J: np.ndarray        # (N, S)
    counts: np.ndarray   # (N, S) int64
    states: np.ndarray   # (N,) int64
    lam: float
    rng: np.random.Generator
    window_g: float = 0.0
    window_c: float = 0.0
    window_n: int = 0
    rows: list = field(default_factory=list)


class _Stack:
    """Per-client kernel arrays stacked along a leading client axis."""

    def __init__(self, models: Sequence[ClientModel]):
        shapes = {m.shape for m in models}
        if len(shapes) != 1:
            raise ValueError("all clients must share (L, M) for the vectorized actor-critic")
        ks = [m.kernel for m in models]
        self.nxt = np.stack([k.nxt for k in ks])
        self.prob = np.stack([k.prob for k in ks])
        self.cum = np.cumsum(self.prob, axis=3)
        self.cost = np.stack([k.cost for k in ks])
        self.cbar = np.stack([k.cbar for k in ks])
        self.gamma = np.array([m.gamma for m in models])


def ac_init(clients: Sequence[tuple[ClientModel, np.ndarray]], cfg: TrainConfig) -> ACState:
    rng = np.random.default_rng(cfg.seed)
    S = clients[0][0].n_states
    N = len(clients)
    states = np.array([rng.choice(S, p=rho) for _, rho in clients], dtype=np.int64)
    return ACState(0, np.zeros((N, S)), np.zeros((N, S)), np.ones((N, S), dtype=np.int64),
                   states, float(cfg.lambda0), rng)


def run_threshold_npg(clients: Sequence[tuple[ClientModel, np.ndarray]], cfg: TrainConfig,
                      state: ACState | None = None, until: int | None = None,
                      on_tick=None) -> ACState:
    """Run the actor-critic from ``state`` (fresh when ``None``) up to tick ``until``.

    ``on_tick(state)`` is called after every completed tick; the harness uses
    it for periodic checkpoints.
    """
    models = [m for m, _ in clients]
    N = len(models)
    gamma0 = models[0].gamma
    st = ac_init(clients, cfg) if state is None else state
    stop = cfg.T if until is None else min(until, cfg.T)
    log_every = cfg.log_every or max(1, cfg.T // 1000)
    k = _Stack(models)
    eta2 = cfg.resolved_eta2(N, gamma0)
    lam_max = cfg.lam_max(N, gamma0)
    target = cfg.K_bar if cfg.dual_target == "discounted" else cfg.K_bar * (1.0 - gamma0)
    step_scale = cfg.eta1 / (1.0 - k.gamma)
    rows = np.arange(N)
    theta, J, counts = st.theta, st.J, st.counts
    sampled = cfg.advantage_mode == "sampled"
    a1_only = cfg.update_mode == "a1_only"

    while st.t < stop:
        s = st.states
        lam = st.lam
        counts[rows, s] += 1
        u = st.rng.random((2, N))
        a = np.where(u[0] < expit(theta[rows, s]), HIGH, LOW)
        br = (u[1][:, None] >= k.cum[rows, s, a]).sum(axis=1).clip(max=3)
        s2 = k.nxt[rows, s, a, br]
        c = k.cost[rows, s, a, br]
        g = (a == HIGH).astype(float)
        J_next_old = J[rows, s2]
        J[rows, s] += (lam * g + c + k.gamma * J_next_old - J[rows, s]) / counts[rows, s]
        Js = J[rows, s]
        if sampled:
            td = lam * g + c + k.gamma * J[rows, s2] - Js
            A1 = np.where(a == HIGH, td, 0.0)
            A2 = np.where(a == LOW, td, 0.0)
        else:
            lookahead = (k.prob[rows, s] * J[rows[:, None, None], k.nxt[rows, s]]).sum(axis=2)
            Q = k.cbar[rows, s] + lam * G_VEC + k.gamma[:, None] * lookahead
            A1 = Q[:, HIGH] - Js
            A2 = Q[:, LOW] - Js
        direction = A1 if a1_only else A1 - A2
        theta[rows, s] = np.clip(theta[rows, s] - step_scale * direction, -THETA_CLIP, THETA_CLIP)
        sum_g = float(g.sum())
        st.lam = min(max(lam + eta2 * (sum_g - target), 0.0), lam_max)
        st.states = s2
        st.t += 1
        st.window_g += sum_g
        st.window_c += float(c.sum())
        st.window_n += 1
        if st.t % log_every == 0 or st.t == cfg.T:
            st.rows.append({"t": st.t, "lambda": st.lam, "mean_sum_g": st.window_g / st.window_n,
                            "mean_cost": st.window_c / st.window_n})
            st.window_g = st.window_c = 0.0
            st.window_n = 0
        if on_tick is not None:
            on_tick(st)
    return st


def tail_mean_sum_g(st: ACState, frac: float = 0.1) -> float:
    """Tick-weighted mean of the sampled budget use over the last ``frac`` of logged ticks."""
    if not st.rows:
        return math.nan
    t_end = st.rows[-1]["t"]
    start = t_end * (1.0 - frac)
    tot = n = 0.0
    prev = 0
    for r in st.rows:
        width = r["t"] - prev
        if r["t"] > start:
            tot += r["mean_sum_g"] * width
            n += width
        prev = r["t"]
    return tot / n


def learned_policies(st: ACState, models: Sequence[ClientModel]) -> list[SoftThresholdPolicy]:
    return [SoftThresholdPolicy(st.theta[n].copy()) for n in range(len(models))]
