"""Single-client streaming MDP: states, actions, transition kernel and costs.

A client state is ``(x, y)`` with buffer level ``x in 0..L`` and stall count
``y in 0..M``.  Actions are the two service classes; ``HIGH`` has the larger
per-step arrival probability ``mu_high``.  Each step the client either

* stays put            w.p. (1 - alpha) * P1(a)
* gains one packet     w.p. (1 - alpha) * P2(a),   P2(a) = mu(a) (1 - beta)
* plays one packet out w.p. (1 - alpha) * P3(a),   P3(a) = (1 - mu(a)) beta
* resets to (0, 0)     w.p. alpha                  (user ends the session)

Playing out the last packet (``x == 1``) counts a new stall, capped at ``M``.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np


class ModelError(ValueError):
    """Raised when a ClientModel violates its invariants."""


class ActionClass(enum.IntEnum):
    """Service class. The integer value doubles as the action column index."""

    HIGH = 0
    LOW = 1

    @property
    def g(self) -> int:
        return 1 if self is ActionClass.HIGH else 0


HIGH = ActionClass.HIGH
LOW = ActionClass.LOW


class ClientState(NamedTuple):
    x: int
    y: int

    def plus(self, k: int, L: int) -> "ClientState":
        return ClientState(min(self.x + k, L), self.y)

    def minus(self, k: int, M: int) -> "ClientState":
        # Not associative with plus(): draining exactly to zero bumps the stall count.
        return ClientState(max(self.x - k, 0), min(self.y + (1 if self.x == k else 0), M))


ORIGIN = ClientState(0, 0)


@dataclass(frozen=True)
class CostParams:
    """Stage cost ``delta * y + c_stall * 1{x == 0}``; resets cost ``c_term``."""

    delta: float = 0.05
    c_stall: float = 1.0
    c_term: float = 1.0
    normalize: bool = True

    def scale(self, M: int) -> float:
        if not self.normalize:
            return 1.0
        total = self.delta * M + self.c_stall + self.c_term
        return 1.0 / total if total > 0 else 1.0

    def stage(self, s: ClientState, M: int) -> float:
        return (self.delta * s.y + self.c_stall * (s.x == 0)) * self.scale(M)

    def termination(self, M: int) -> float:
        return self.c_term * self.scale(M)


@dataclass(frozen=True)
class ClientModel:
    mu_high: float
    mu_low: float
    beta: float
    alpha: float
    L: int
    M: int
    gamma: float
    cost: CostParams = field(default_factory=CostParams)

    @property
    def n_states(self) -> int:
        return (self.L + 1) * (self.M + 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.L + 1, self.M + 1)

    def mu(self, a: ActionClass) -> float:
        return self.mu_high if a == HIGH else self.mu_low

    def branch_probs(self, a: ActionClass) -> tuple[float, float, float]:
        mu = self.mu(a)
        p2 = mu * (1.0 - self.beta)
        p3 = (1.0 - mu) * self.beta
        return 1.0 - p2 - p3, p2, p3

    def index(self, s: ClientState) -> int:
        return s.x * (self.M + 1) + s.y

    def state(self, i: int) -> ClientState:
        return ClientState(*divmod(int(i), self.M + 1))

    def states(self):
        for x in range(self.L + 1):
            for y in range(self.M + 1):
                yield ClientState(x, y)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "cost"}
        out.update(asdict(self.cost))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ClientModel":
        keys = {"mu_high", "mu_low", "beta", "alpha", "L", "M", "gamma",
                "delta", "c_stall", "c_term", "normalize"}
        unknown = set(d) - keys
        if unknown:
            raise ModelError(f"unknown client model keys: {sorted(unknown)}")
        cost = CostParams(**{k: d[k] for k in ("delta", "c_stall", "c_term", "normalize") if k in d})
        m = cls(float(d["mu_high"]), float(d["mu_low"]), float(d["beta"]), float(d["alpha"]),
                int(d["L"]), int(d["M"]), float(d["gamma"]), cost)
        return m

    def with_cost(self, **kw) -> "ClientModel":
        return replace(self, cost=replace(self.cost, **kw))

    @cached_property
    def kernel(self) -> "Kernel":
        problems = validate_model(self)
        if problems:
            raise ModelError("; ".join(problems))
        return Kernel.build(self)


@dataclass(frozen=True)
class TransitionEntry:
    next: ClientState
    prob: float
    cost: float
    is_reset: bool


def validate_model(m: ClientModel) -> list[str]:
    """Return every invariant violation of ``m`` (empty list means ok)."""
    out = []
    if not 0.0 < m.mu_high <= 1.0:
        out.append("mu_high must lie in (0, 1]")
    if not 0.0 <= m.mu_low < 1.0:
        out.append("mu_low must lie in [0, 1)")
    if not m.mu_high > m.mu_low:
        out.append("mu_high must exceed mu_low")
    if not 0.0 < m.beta < 1.0:
        out.append("beta must lie in (0, 1)")
    if not m.beta < m.mu_high:
        out.append("beta < mu_high required")
    if not 0.0 < m.alpha <= 1.0:
        # alpha == 1 is accepted as a degenerate always-reset model
        out.append("alpha must lie in (0, 1]")
    if not 0.0 < m.gamma < 1.0:
        out.append("gamma must lie in (0, 1)")
    if m.L < 0 or m.M < 0:
        out.append("L and M must be non-negative")
    c = m.cost
    if c.delta < 0 or c.c_stall < 0 or c.c_term < 0:
        out.append("cost coefficients must be non-negative")
    if c.normalize and c.delta * m.M + c.c_stall + c.c_term <= 0:
        out.append("normalize requires a positive cost total")
    for a in ActionClass:
        for p in m.branch_probs(a):
            if not -1e-15 <= p <= 1.0 + 1e-15:
                out.append(f"branch probability {p} for {a.name} outside [0, 1]")
    return out


def _branches(s: ClientState, a: ActionClass, m: ClientModel):
    p1, p2, p3 = m.branch_probs(a)
    keep = 1.0 - m.alpha
    return [
        (s, keep * p1, False),
        (s.plus(1, m.L), keep * p2, False),
        (s.minus(1, m.M), keep * p3, False),
        (ORIGIN, m.alpha, True),
    ]


def stage_costs(s: ClientState, entry: TransitionEntry, a: ActionClass,
                cp: CostParams, M: int) -> tuple[float, int]:
    """Cost ``c`` and constraint usage ``g`` of one transition out of ``s``."""
    c = cp.termination(M) if entry.is_reset else cp.stage(s, M)
    return c, ActionClass(a).g


def transition_distribution(s: ClientState, a: ActionClass, m: ClientModel) -> list[TransitionEntry]:
    """Exact next-state distribution with duplicate successors merged.

    The reset branch keeps its own cost; when it collides with a natural move
    onto (0, 0) the merged entry carries the probability-weighted cost.
    """
    bad = validate_model(m)
    if bad:
        raise ModelError("; ".join(bad))
    s = ClientState(*s)
    a = ActionClass(a)
    merged: dict[ClientState, list] = {}
    for nxt, p, reset in _branches(s, a, m):
        if p <= 0.0:
            continue
        c = m.cost.termination(m.M) if reset else m.cost.stage(s, m.M)
        if nxt in merged:
            rec = merged[nxt]
            rec[1] += p * c
            rec[0] += p
            rec[2] = rec[2] or reset
        else:
            merged[nxt] = [p, p * c, reset]
    return [TransitionEntry(nxt, p, pc / p, reset) for nxt, (p, pc, reset) in merged.items()]


def sample_step(s: ClientState, a: ActionClass, m: ClientModel,
                rng: np.random.Generator) -> tuple[ClientState, float, int, bool]:
    """Like ``sample_transition`` but also reports whether the reset branch fired."""
    s = ClientState(*s)
    a = ActionClass(a)
    u = rng.random()
    acc = 0.0
    for nxt, p, reset in _branches(s, a, m):
        acc += p
        if u < acc:
            break
    c = m.cost.termination(m.M) if reset else m.cost.stage(s, m.M)
    return nxt, c, a.g, reset


def sample_transition(s: ClientState, a: ActionClass, m: ClientModel,
                      rng: np.random.Generator) -> tuple[ClientState, float, int]:
    """Draw ``(next, c, g)`` from the kernel using the caller's generator (one uniform per call)."""
    return sample_step(s, a, m, rng)[:3]


@dataclass(frozen=True)
class Kernel:
    """Array form of the kernel.

    ``P[s, a, s']`` and the expected stage cost ``cbar[s, a]`` serve the exact
    solvers; the per-branch arrays (``nxt``, ``prob``, ``cost``, each of
    shape ``(S, 2, 4)``) serve samplers and one-step lookahead.
    """

    P: np.ndarray
    cbar: np.ndarray
    nxt: np.ndarray
    prob: np.ndarray
    cost: np.ndarray

    @classmethod
    def build(cls, m: ClientModel) -> "Kernel":
        S = m.n_states
        P = np.zeros((S, 2, S))
        cbar = np.zeros((S, 2))
        nxt = np.zeros((S, 2, 4), dtype=np.int64)
        prob = np.zeros((S, 2, 4))
        cost = np.zeros((S, 2, 4))
        for s in m.states():
            i = m.index(s)
            for a in ActionClass:
                for k, (ns, p, reset) in enumerate(_branches(s, a, m)):
                    c = m.cost.termination(m.M) if reset else m.cost.stage(s, m.M)
                    j = m.index(ns)
                    nxt[i, a, k] = j
                    prob[i, a, k] = p
                    cost[i, a, k] = c
                    P[i, a, j] += p
                    cbar[i, a] += p * c
        for arr in (P, cbar, nxt, prob, cost):
            arr.setflags(write=False)
        return cls(P, cbar, nxt, prob, cost)

    @property
    def g(self) -> np.ndarray:
        return np.array([1.0, 0.0])


def tiny_model() -> ClientModel:
    """Six-state model used throughout the tests (L=2, M=1)."""
    return ClientModel(mu_high=0.9, mu_low=0.3, beta=0.5, alpha=0.05, L=2, M=1, gamma=0.9,
                       cost=CostParams(delta=0.05, c_stall=1.0, c_term=1.0, normalize=True))


def reference_model() -> ClientModel:
    """Default client of the six-client reference configuration."""
    return ClientModel(mu_high=0.8, mu_low=0.35, beta=0.5, alpha=0.02, L=10, M=3, gamma=0.95,
                       cost=CostParams(delta=0.05, c_stall=1.0, c_term=1.0, normalize=True))
