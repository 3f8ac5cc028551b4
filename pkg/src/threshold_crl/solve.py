"""Exact dynamic programming for a single client and for the decomposed dual.

Tables are flat numpy arrays indexed by ``m.index(s)``; ``(S, 2)`` arrays
hold one column per action (``HIGH`` first).  A deterministic policy is an
integer array of action indices; a stochastic policy is an ``(S, 2)`` array of
probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import HIGH, LOW, ActionClass, ClientModel, ClientState

G_VEC = np.array([1.0, 0.0])
DIRECT_SOLVE_MAX_STATES = 4096


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------- result types

@dataclass(frozen=True)
class ThresholdFunction:
    f: tuple[int, ...]  # f[y] in {-1, ..., L}; -1 means never HIGH

    def action(self, s: ClientState) -> ActionClass:
        return HIGH if s.x <= self.f[s.y] else LOW

    def policy(self, m: ClientModel) -> np.ndarray:
        return np.array([int(self.action(s)) for s in m.states()], dtype=np.int64)


@dataclass(frozen=True)
class NotThreshold:
    """Witness that a policy is not of threshold form: LOW at x_low, HIGH at x_high > x_low."""

    y: int
    x_low: int
    x_high: int


@dataclass(frozen=True)
class VIResult:
    J: np.ndarray
    policy: np.ndarray
    iters: int
    residual: float


@dataclass(frozen=True)
class EvalResult:
    J_c: np.ndarray
    J_g: np.ndarray
    lam: float
    budget_share: float = 0.0  # K_bar / N

    def J_lagrangian(self, rho: np.ndarray) -> float:
        return float(rho @ (self.J_c + self.lam * self.J_g) - self.lam * self.budget_share)


@dataclass(frozen=True)
class Advantages:
    A_lambda: np.ndarray
    A_c: np.ndarray
    A_g: np.ndarray


@dataclass(frozen=True)
class OccupancyMeasure:
    d: np.ndarray
    rho: np.ndarray


# ---------------------------------------------------------------- helpers

def as_stochastic(pi: np.ndarray) -> np.ndarray:
    """Promote a deterministic action array to an ``(S, 2)`` distribution."""
    pi = np.asarray(pi)
    if pi.ndim == 2:
        return pi.astype(float)
    out = np.zeros((pi.size, 2))
    out[np.arange(pi.size), pi.astype(np.int64)] = 1.0
    return out


def uniform_rho(m: ClientModel) -> np.ndarray:
    return np.full(m.n_states, 1.0 / m.n_states)


def point_rho(m: ClientModel, s: ClientState = ClientState(0, 0)) -> np.ndarray:
    rho = np.zeros(m.n_states)
    rho[m.index(s)] = 1.0
    return rho


def q_values(J: np.ndarray, lam: float, m: ClientModel) -> np.ndarray:
    """One-step lookahead ``Q[s, a]`` for the Lagrangian stage cost ``c + lam * g``."""
    k = m.kernel
    return k.cbar + lam * G_VEC + m.gamma * (k.P @ J)


def greedy(Q: np.ndarray) -> np.ndarray:
    # Strict comparison sends exact ties to LOW.
    return np.where(Q[..., HIGH] < Q[..., LOW], int(HIGH), int(LOW)).astype(np.int64)


def policy_kernel(pi: np.ndarray, m: ClientModel):
    """Return ``(P_pi, c_pi, g_pi)`` for a stochastic or deterministic policy."""
    pi = as_stochastic(pi)
    k = m.kernel
    P_pi = np.einsum("sa,sat->st", pi, k.P)
    c_pi = (pi * k.cbar).sum(axis=1)
    g_pi = pi @ G_VEC
    return P_pi, c_pi, g_pi


def _solve_linear(P_pi: np.ndarray, r: np.ndarray, gamma: float) -> np.ndarray:
    S = r.shape[0]
    if S <= DIRECT_SOLVE_MAX_STATES:
        return np.linalg.solve(np.eye(S) - gamma * P_pi, r)
    J = np.zeros_like(r)
    while True:
        Jn = r + gamma * (P_pi @ J)
        if np.abs(Jn - J).max() <= 1e-12:
            return Jn
        J = Jn


# ---------------------------------------------------------------- Bellman / VI

def bellman_backup(J: np.ndarray, lam: float, m: ClientModel) -> tuple[np.ndarray, np.ndarray]:
    Q = q_values(J, lam, m)
    return Q.min(axis=1), greedy(Q)


def value_iteration(m: ClientModel, lam: float, tol: float = 1e-9,
                    max_iter: int = 100_000, J0: np.ndarray | None = None) -> VIResult:
    """Iterate the Bellman operator from ``J0`` (zero by default).

    Stops once the sup-norm step is at most ``tol (1 - gamma) / (2 gamma)``,
    which bounds the distance of the returned table to the fixed point by ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    J = np.zeros(m.n_states) if J0 is None else np.array(J0, dtype=float)
    stop = tol * (1.0 - m.gamma) / (2.0 * m.gamma)
    res = np.inf
    for it in range(1, max_iter + 1):
        Jn, pol = bellman_backup(J, lam, m)
        res = float(np.abs(Jn - J).max())
        J = Jn
        if res <= stop:
            _, pol = bellman_backup(J, lam, m)
            return VIResult(J, pol, it, res)
    raise ConvergenceError(f"value iteration did not converge in {max_iter} iterations", res)


def value_iteration_grid(m: ClientModel, lams: np.ndarray, tol: float = 1e-10,
                         max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Value iteration run for every ``lam`` at once; returns ``(J[G, S], policy[G, S])``."""
    lams = np.asarray(lams, dtype=float)
    k = m.kernel
    base = k.cbar[None] + lams[:, None, None] * G_VEC  # (G, S, 2)
    J = np.zeros((lams.size, m.n_states))
    stop = tol * (1.0 - m.gamma) / (2.0 * m.gamma)
    for _ in range(max_iter):
        Q = base + m.gamma * np.einsum("sak,gsak->gsa", k.prob, J[:, k.nxt])
        Jn = Q.min(axis=2)
        res = float(np.abs(Jn - J).max())
        J = Jn
        if res <= stop:
            Q = base + m.gamma * np.einsum("sak,gsak->gsa", k.prob, J[:, k.nxt])
            return J, greedy(Q)
    raise ConvergenceError("grid value iteration did not converge", res)


# ---------------------------------------------------------------- structure

def extract_threshold(pi: np.ndarray, m: ClientModel) -> ThresholdFunction | NotThreshold:
    grid = np.asarray(pi).reshape(m.shape)
    f = []
    for y in range(m.M + 1):
        high = grid[:, y] == HIGH
        n = int(high.sum())
        if not high[:n].all():
            x_low = int(np.argmin(high))
            x_high = x_low + 1 + int(np.argmax(high[x_low + 1:]))
            return NotThreshold(y, x_low, x_high)
        f.append(n - 1)
    return ThresholdFunction(tuple(f))


def switching_constant(s: ClientState, m: ClientModel) -> float:
    """Cost-difference constant of the switching condition at ``s``.

    The shipped cost depends on the source state only, so the three stage
    costs coincide and the constant is exactly zero.
    """
    cp = m.cost
    c_ss = cp.stage(s, m.M)
    c_up = cp.stage(s, m.M)    # cost of s -> s + e_x
    c_down = cp.stage(s, m.M)  # cost of s -> s - e_x
    return ((1.0 - m.beta) * (c_ss - c_up) + m.beta * (c_down - c_ss)) / m.gamma


def threshold_condition(J: np.ndarray, s: ClientState, lam: float, m: ClientModel,
                        tie_tol: float = 1e-9) -> tuple[float, float, ActionClass]:
    """Return ``(lhs, r, action)``; ``action`` is LOW iff ``lhs >= r`` up to ``tie_tol``."""
    s = ClientState(*s)
    up, down = s.plus(1, m.L), s.minus(1, m.M)
    Js, Ju, Jd = J[m.index(s)], J[m.index(up)], J[m.index(down)]
    lhs = (1.0 - m.beta) * (Ju - Js) + m.beta * (Js - Jd)
    r = switching_constant(s, m) - lam / (m.gamma * (1.0 - m.alpha) * (m.mu_high - m.mu_low))
    return float(lhs), float(r), (LOW if lhs >= r - tie_tol else HIGH)


def difference_profile(J: np.ndarray, m: ClientModel, form: str = "adjacent") -> np.ndarray:
    """Buffer-direction differences of ``J`` as an ``(L, M+1)`` array.

    ``adjacent``: ``J(x+1, y) - J(x, y)``.
    ``drain``: ``J(x+1, y) - J((x+1, y) - e_x)``, where draining the last packet
    also increments the stall count.
    """
    G = J.reshape(m.shape)
    if form == "adjacent":
        return G[1:, :] - G[:-1, :]
    if form == "drain":
        out = G[1:, :] - G[:-1, :]
        y_next = np.minimum(np.arange(m.M + 1) + 1, m.M)
        out[0, :] = G[1, :] - G[0, y_next]
        return out
    raise ValueError(f"unknown form {form!r}")


def monotone_violation(J: np.ndarray, m: ClientModel, form: str = "adjacent") -> float:
    """Largest decrease along x of the difference profile (<= 0 means monotone)."""
    d = difference_profile(J, m, form)
    if d.shape[0] < 2:
        return 0.0
    return float((d[:-1] - d[1:]).max())


# ---------------------------------------------------------------- evaluation

def evaluate_policy(pi: np.ndarray, m: ClientModel, lam: float = 0.0,
                    budget_share: float = 0.0) -> EvalResult:
    P_pi, c_pi, g_pi = policy_kernel(pi, m)
    J_c = _solve_linear(P_pi, c_pi, m.gamma)
    J_g = _solve_linear(P_pi, g_pi, m.gamma)
    return EvalResult(J_c, J_g, float(lam), float(budget_share))


def advantage_table(pi: np.ndarray, m: ClientModel, lam: float,
                    ev: EvalResult | None = None) -> Advantages:
    if ev is None:
        ev = evaluate_policy(pi, m, lam)
    k = m.kernel
    A_c = k.cbar + m.gamma * (k.P @ ev.J_c) - ev.J_c[:, None]
    A_g = G_VEC + m.gamma * (k.P @ ev.J_g) - ev.J_g[:, None]
    return Advantages(A_c + lam * A_g, A_c, A_g)


def occupancy_measure(pi: np.ndarray, m: ClientModel, rho: np.ndarray) -> OccupancyMeasure:
    rho = np.asarray(rho, dtype=float)
    P_pi, _, _ = policy_kernel(pi, m)
    S = m.n_states
    d = (1.0 - m.gamma) * np.linalg.solve((np.eye(S) - m.gamma * P_pi).T, rho)
    d = np.clip(d, 0.0, None)
    return OccupancyMeasure(d / d.sum(), rho)


def policy_from_occupancy(x: np.ndarray) -> np.ndarray:
    """Stationary policy induced by a state-action occupancy ``x[s, a]``."""
    tot = x.sum(axis=1, keepdims=True)
    out = np.full_like(x, 0.5)
    np.divide(x, tot, out=out, where=tot > 0)
    return out


# ---------------------------------------------------------------- dual

def slater_margin(K_bar: float) -> float:
    """Always-LOW uses no budget, so it is strictly feasible with margin ``K_bar``."""
    return float(K_bar)


def lambda_max(N: int, gamma: float, xi: float) -> float:
    return 2.0 * N / ((1.0 - gamma) * xi)


@dataclass(frozen=True)
class DualValue:
    D: float
    policies: list
    J_c: np.ndarray  # per-client rho-weighted values
    J_g: np.ndarray


def dual_function(lam: float, clients: Sequence[tuple[ClientModel, np.ndarray]],
                  K_bar: float, tol: float = 1e-10) -> DualValue:
    """D(lam) = sum_n min_pi J_n^pi(rho_n; lam), minus lam * K_bar in total."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    total = 0.0
    pols, jc, jg = [], [], []
    for m, rho in clients:
        vi = value_iteration(m, lam, tol=tol)
        ev = evaluate_policy(vi.policy, m, lam)
        total += float(rho @ vi.J)
        pols.append(vi.policy)
        jc.append(float(rho @ ev.J_c))
        jg.append(float(rho @ ev.J_g))
    return DualValue(total - lam * K_bar, pols, np.array(jc), np.array(jg))


def dual_grid(clients: Sequence[tuple[ClientModel, np.ndarray]], K_bar: float,
              lam_max: float, step: float = 1e-3, tol: float = 1e-10):
    """Evaluate D on ``0, step, ..., lam_max``; returns ``(lams, D)``."""
    n = int(round(lam_max / step))
    lams = np.linspace(0.0, n * step, n + 1)
    D = -lams * K_bar
    cache: dict = {}
    for m, rho in clients:
        if m not in cache:
            cache[m] = value_iteration_grid(m, lams, tol=tol)[0]
        D = D + cache[m] @ rho
    return lams, D


@dataclass(frozen=True)
class Decentralization:
    lam_star: float
    D_star: float
    mix_weight: float          # probability on the lower-lambda greedy policies
    policies: list             # per-client stationary randomized policies
    J_c: np.ndarray            # per-client rho-weighted values of those policies
    J_g: np.ndarray
    K_bar: float
    step: float

    @property
    def slackness(self) -> float:
        return float(self.lam_star * (self.J_g.sum() - self.K_bar))

    @property
    def primal_value(self) -> float:
        return float(self.J_c.sum())

    @property
    def duality_gap(self) -> float:
        return float(self.primal_value + self.lam_star * (self.J_g.sum() - self.K_bar) - self.D_star)


def decentralize(clients: Sequence[tuple[ClientModel, np.ndarray]], K_bar: float,
                 lam_max: float | None = None, step: float = 1e-3) -> Decentralization:
    """Grid-search the dual and build per-client policies meeting the budget.

    Greedy policies just below and just above the grid maximizer bracket the
    budget; mixing their occupancy measures with a common weight gives
    stationary per-client policies whose summed budget use equals ``K_bar``.
    """
    N = len(clients)
    if lam_max is None:
        lam_max = lambda_max(N, clients[0][0].gamma, slater_margin(K_bar))
    lams, D = dual_grid(clients, K_bar, lam_max, step)
    i = int(np.argmax(D))
    lam_star = float(lams[i])

    def side(lam):
        out = []
        for m, rho in clients:
            pol = value_iteration(m, lam, tol=1e-11).policy
            occ = occupancy_measure(pol, m, rho).d[:, None] * as_stochastic(pol)
            ev = evaluate_policy(pol, m)
            out.append((occ, float(rho @ ev.J_c), float(rho @ ev.J_g)))
        return out

    lo = side(max(lam_star - step, 0.0))
    hi = side(min(lam_star + step, lam_max))
    g_lo = sum(r[2] for r in lo)
    g_hi = sum(r[2] for r in hi)
    if g_lo <= K_bar:
        q = 1.0
    elif g_hi >= K_bar:
        q = 0.0
    else:
        q = (K_bar - g_hi) / (g_lo - g_hi)
    pols, jc, jg = [], [], []
    for (m, rho), a, b in zip(clients, lo, hi):
        pol = policy_from_occupancy(q * a[0] + (1.0 - q) * b[0])
        ev = evaluate_policy(pol, m)
        pols.append(pol)
        jc.append(float(rho @ ev.J_c))
        jg.append(float(rho @ ev.J_g))
    return Decentralization(lam_star, float(D[i]), float(q), pols, np.array(jc), np.array(jg),
                            float(K_bar), float(step))
