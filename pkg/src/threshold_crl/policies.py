"""Per-epoch scheduling rules mapping the joint client state to service classes.

Ties among equally ranked clients go to the client with more stalls, then to
the lower client index.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .mdp import HIGH, LOW, ActionClass, ClientModel, ClientState
from .solve import ThresholdFunction


class PolicyConfigError(ValueError):
    pass


def hard_threshold_action(f: ThresholdFunction, s: ClientState) -> ActionClass:
    return HIGH if s.x <= f.f[s.y] else LOW


def vanilla_assign(states: Sequence[ClientState]) -> list[ActionClass]:
    return [LOW] * len(states)


def _top_k(primary: Sequence[float], states: Sequence[ClientState], K: int) -> list[ActionClass]:
    # Sort key: primary ascending, then y descending, then index ascending.
    order = sorted(range(len(states)), key=lambda n: (primary[n], -states[n].y, n))
    winners = set(order[:max(0, min(K, len(states)))])
    return [HIGH if n in winners else LOW for n in range(len(states))]


def greedy_buffer_assign(states: Sequence[ClientState], K: int) -> list[ActionClass]:
    """Give the K HIGH slots to the clients with the smallest buffers."""
    if K > len(states):
        raise PolicyConfigError(f"K={K} exceeds the number of clients {len(states)}")
    return _top_k([s.x for s in states], states, K)


def index_scores(policies, states: Sequence[ClientState], models: Sequence[ClientModel],
                 score: str = "logit") -> list[float]:
    """Per-client score of the current state; larger means more deserving of HIGH.

    ``logit`` reads the learned logit.  ``value`` reads a per-client value table
    (passed in place of ``policies``) and ranks larger cost-to-go first.
    """
    out = []
    for n, s in enumerate(states):
        if n >= len(policies):
            raise PolicyConfigError(f"no trained parameters for client {n}")
        table = policies[n].theta if score == "logit" else np.asarray(policies[n])
        m = models[n]
        if not (0 <= s.x <= m.L and 0 <= s.y <= m.M) or m.index(s) >= len(table):
            raise PolicyConfigError(f"client {n}: state {tuple(s)} has no table entry")
        out.append(float(table[m.index(s)]))
    return out


def index_assign(policies, states: Sequence[ClientState], K: int,
                 models: Sequence[ClientModel], score: str = "logit",
                 positive_only: bool = False) -> list[ActionClass]:
    """Rank clients by score (descending) and grant HIGH to the top ``min(K, N)``.

    With ``positive_only`` a client must also have a positive logit, so a
    single client with a free slot follows its own threshold rule.
    """
    if score not in ("logit", "value"):
        raise PolicyConfigError(f"unknown index score {score!r}")
    if positive_only and score != "logit":
        raise PolicyConfigError("positive_only applies to logit scores only")
    sc = index_scores(policies, states, models, score)
    out = _top_k([-v for v in sc], states, K)
    if positive_only:
        out = [a if v > 0 else LOW for a, v in zip(out, sc)]
    return out
