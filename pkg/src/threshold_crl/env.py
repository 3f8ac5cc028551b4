"""Multi-client streaming simulator built on the single-client kernel."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import HIGH, LOW, ActionClass, ClientModel, ClientState, sample_step
from .npg import policy_probs
from .policies import greedy_buffer_assign, hard_threshold_action, index_assign, vanilla_assign

POLICY_KINDS = ("vanilla", "greedy", "threshold", "index", "soft", "always_high", "always_low")
# Kinds whose assignments may exceed K and therefore run in soft mode.
UNCONSTRAINED_KINDS = ("threshold", "soft", "always_high")
TRACE_COLUMNS = ("t", "client", "x", "y", "action", "c", "g", "reset")
SUMMARY_COLUMNS = ("episode", "disc_cost", "disc_g", "stalls", "mean_buffer", "qoe")


class EnvError(ValueError):
    pass


class ConstraintViolation(EnvError):
    def __init__(self, offenders: list[int], K: int):
        super().__init__(f"{len(offenders)} clients assigned HIGH with K={K}: clients {offenders}")
        self.offenders = offenders


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose and integer keys (episode, client, ...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *keys]))


@dataclass
class EnvConfig:
    clients: Sequence[ClientModel]
    K: int
    mode: str = "hard"
    horizon: int = 200
    rho: Sequence[np.ndarray] | None = None
    seed: int = 0

    def __post_init__(self):
        N = len(self.clients)
        if N == 0:
            raise EnvError("at least one client required")
        if not 0 <= self.K <= N:
            raise EnvError(f"K={self.K} must lie in [0, N={N}]")
        if self.mode not in ("soft", "hard"):
            raise EnvError("mode must be 'soft' or 'hard'")
        if self.horizon < 1:
            raise EnvError("horizon must be at least 1")
        if self.rho is None:
            self.rho = []
            for m in self.clients:
                r = np.zeros(m.n_states)
                r[0] = 1.0
                self.rho.append(r)
        if len(self.rho) != N:
            raise EnvError("one initial distribution per client required")
        for n, (r, m) in enumerate(zip(self.rho, self.clients)):
            r = np.asarray(r, dtype=float)
            if r.shape != (m.n_states,) or (r < 0).any() or abs(r.sum() - 1.0) > 1e-9:
                raise EnvError(f"rho for client {n} is not a distribution over its states")

    @property
    def N(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class StepOutcome:
    states: tuple
    c: tuple
    g: tuple
    resets: tuple
    epoch: int


class StreamingEnv:
    """Steps every client by its own kernel; one generator per (episode, client)."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.states: list[ClientState] = []
        self.epoch = 0
        self._rngs: list[np.random.Generator] = []

    def reset(self, episode: int = 0) -> list[ClientState]:
        cfg = self.cfg
        self._rngs = [substream(cfg.seed, "env", episode, n) for n in range(cfg.N)]
        self.states = []
        for m, rho, rng in zip(cfg.clients, cfg.rho, self._rngs):
            self.states.append(m.state(rng.choice(m.n_states, p=rho)))
        self.epoch = 0
        return list(self.states)

    def step(self, assignment: Sequence[ActionClass]) -> StepOutcome:
        cfg = self.cfg
        if len(assignment) != cfg.N:
            raise EnvError(f"assignment has {len(assignment)} entries for {cfg.N} clients")
        if cfg.mode == "hard":
            high = [n for n, a in enumerate(assignment) if a == HIGH]
            if len(high) > cfg.K:
                raise ConstraintViolation(high, cfg.K)
        nxt, cs, gs, rs = [], [], [], []
        for m, s, a, rng in zip(cfg.clients, self.states, assignment, self._rngs):
            s2, c, g, reset = sample_step(s, a, m, rng)
            nxt.append(s2)
            cs.append(c)
            gs.append(g)
            rs.append(reset)
        self.states = nxt
        out = StepOutcome(tuple(nxt), tuple(cs), tuple(gs), tuple(rs), self.epoch)
        self.epoch += 1
        return out


# ---------------------------------------------------------------- metrics

def qoe_proxy(buffers: Sequence[int], drop: float = 0.5, recover: float = 0.01) -> float:
    """Quality proxy for one client's trace of buffer levels.

    Starts at 5, loses ``drop`` on every step spent with an empty buffer and
    regains ``recover / (1 + stall events so far)`` on every playing step.
    """
    q, events, prev = 5.0, 0, False
    for x in buffers:
        stalled = x == 0
        if stalled and not prev:
            events += 1
        q += -drop if stalled else recover / (1 + events)
        q = min(5.0, max(1.0, q))
        prev = stalled
    return q


@dataclass
class Metrics:
    disc_cost: np.ndarray   # per client
    disc_g: np.ndarray      # per client
    stalls: np.ndarray      # per client, playouts that emptied the buffer
    mean_buffer: np.ndarray
    qoe: np.ndarray
    trace: list = field(default_factory=list)

    def summary_row(self, episode: int) -> dict:
        return {"episode": episode, "disc_cost": float(self.disc_cost.sum()),
                "disc_g": float(self.disc_g.sum()), "stalls": int(self.stalls.sum()),
                "mean_buffer": float(self.mean_buffer.mean()), "qoe": float(self.qoe.mean())}


def metrics_from_trace(trace: list[dict], N: int, gamma: Sequence[float],
                       final: Sequence[ClientState]) -> Metrics:
    """Recompute all episode metrics from raw trace rows.

    Row ``t`` holds the state at the start of step ``t`` together with the
    action taken there and the resulting cost, budget use and reset flag;
    ``final`` is the joint state after the last step.
    """
    dc, dg = np.zeros(N), np.zeros(N)
    xs: list[list[int]] = [[] for _ in range(N)]
    resets: list[list[int]] = [[] for _ in range(N)]
    for r in sorted(trace, key=lambda r: (r["client"], r["t"])):
        n = r["client"]
        w = gamma[n] ** r["t"]
        dc[n] += w * r["c"]
        dg[n] += w * r["g"]
        xs[n].append(r["x"])
        resets[n].append(r["reset"])
    stalls = np.zeros(N, dtype=np.int64)
    for n in range(N):
        after = xs[n][1:] + [final[n].x]
        stalls[n] = sum(1 for x, x2, rs in zip(xs[n], after, resets[n])
                        if x == 1 and x2 == 0 and not rs)
    mean_buf = np.array([np.mean(x) for x in xs])
    qoe = np.array([qoe_proxy(x) for x in xs])
    return Metrics(dc, dg, stalls, mean_buf, qoe, trace)


Decider = Callable[[list[ClientState], np.random.Generator], list[ActionClass]]


def make_decider(kind: str, cfg: EnvConfig, artifacts: dict | None = None) -> Decider:
    """Build the per-epoch decision rule for ``kind``.

    ``artifacts`` supplies trained objects: ``thresholds`` (per-client
    ThresholdFunction) for ``threshold`` and ``policies`` (per-client
    SoftThresholdPolicy) for ``index`` and ``soft``.
    """
    artifacts = artifacts or {}
    K, models = cfg.K, list(cfg.clients)
    if kind == "vanilla":
        return lambda states, rng: vanilla_assign(states)
    if kind == "always_low":
        return lambda states, rng: [LOW] * len(states)
    if kind == "always_high":
        return lambda states, rng: [HIGH] * len(states)
    if kind == "greedy":
        return lambda states, rng: greedy_buffer_assign(states, K)
    if kind == "threshold":
        fs = artifacts["thresholds"]
        return lambda states, rng: [hard_threshold_action(f, s) for f, s in zip(fs, states)]
    if kind == "index":
        pols = artifacts["policies"]
        score = artifacts.get("score", "logit")
        gate = bool(artifacts.get("positive_only", False))
        return lambda states, rng: index_assign(pols, states, K, models, score, gate)
    if kind == "soft":
        probs = [policy_probs(p.theta)[:, HIGH] for p in artifacts["policies"]]

        def soft(states, rng):
            u = rng.random(len(states))
            return [HIGH if u[n] < probs[n][models[n].index(s)] else LOW
                    for n, s in enumerate(states)]
        return soft
    raise EnvError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")


def run_episode(env: StreamingEnv, decide: Decider, episode: int,
                keep_trace: bool = False) -> Metrics:
    cfg = env.cfg
    states = env.reset(episode)
    prng = substream(cfg.seed, "policy", episode)
    gamma = [m.gamma for m in cfg.clients]
    trace = []
    for t in range(cfg.horizon):
        acts = decide(states, prng)
        out = env.step(acts)
        for n, (s, a) in enumerate(zip(states, acts)):
            trace.append({"t": t, "client": n, "x": s.x, "y": s.y, "action": int(a),
                          "c": out.c[n], "g": out.g[n], "reset": int(out.resets[n])})
        states = list(out.states)
    met = metrics_from_trace(trace, cfg.N, gamma, states)
    if not keep_trace:
        met.trace = []
    return met


@dataclass
class EvalSummary:
    kind: str
    rows: list

    def mean(self, col: str) -> float:
        return float(np.mean([r[col] for r in self.rows]))

    def stderr(self, col: str) -> float:
        v = np.array([r[col] for r in self.rows], dtype=float)
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan

    def values(self, col: str) -> np.ndarray:
        return np.array([r[col] for r in self.rows], dtype=float)


def evaluate_policy_in_env(kind: str, cfg: EnvConfig, episodes: int,
                           artifacts: dict | None = None, trace_episode: int | None = None):
    """Run ``episodes`` episodes of ``kind``; returns ``(EvalSummary, trace rows or None)``.

    Kinds that can exceed the HIGH budget run with the budget unenforced.
    """
    if kind in UNCONSTRAINED_KINDS and cfg.mode == "hard":
        cfg = EnvConfig(cfg.clients, cfg.K, "soft", cfg.horizon, cfg.rho, cfg.seed)
    env = StreamingEnv(cfg)
    decide = make_decider(kind, cfg, artifacts)
    rows, kept = [], None
    for ep in range(episodes):
        met = run_episode(env, decide, ep, keep_trace=(ep == trace_episode))
        if ep == trace_episode:
            kept = met.trace
        rows.append(met.summary_row(ep))
    return EvalSummary(kind, rows), kept
