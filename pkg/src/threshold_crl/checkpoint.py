"""Versioned JSON checkpoints for the actor-critic and stable config hashing."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .npg import ACState

FORMAT = "threshold-crl-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def stable_hash(obj) -> str:
    """sha256 of the canonical JSON form (sorted keys, repr floats)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    bg = getattr(np.random, name)()
    bg.state = state
    return np.random.Generator(bg)


def to_record(st: ACState, config_hash: str) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "config_hash": config_hash,
        "t": st.t,
        "lambda": st.lam,
        "theta": st.theta.tolist(),
        "J": st.J.tolist(),
        "counts": st.counts.tolist(),
        "states": st.states.tolist(),
        "rng": _rng_state(st.rng),
        "window": {"g": st.window_g, "c": st.window_c, "n": st.window_n},
        "rows": st.rows,
    }


def from_record(rec: dict, config_hash: str | None = None) -> ACState:
    if rec.get("format") != FORMAT:
        raise CheckpointError("not a threshold-crl checkpoint")
    if rec.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {rec.get('version')}")
    if config_hash is not None and rec["config_hash"] != config_hash:
        raise CheckpointError("checkpoint was written for a different configuration "
                              f"({rec['config_hash'][:12]} != {config_hash[:12]})")
    w = rec["window"]
    return ACState(
        t=int(rec["t"]),
        theta=np.array(rec["theta"], dtype=float),
        J=np.array(rec["J"], dtype=float),
        counts=np.array(rec["counts"], dtype=np.int64),
        states=np.array(rec["states"], dtype=np.int64),
        lam=float(rec["lambda"]),
        rng=_restore_rng(rec["rng"]),
        window_g=float(w["g"]), window_c=float(w["c"]), window_n=int(w["n"]),
        rows=list(rec["rows"]),
    )


def save(path: str | os.PathLike, st: ACState, config_hash: str) -> None:
    """Write atomically so an interrupted save never leaves a torn file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(to_record(st, config_hash)))
    os.replace(tmp, path)


def load(path: str | os.PathLike, config_hash: str | None = None) -> ACState:
    try:
        rec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    return from_record(rec, config_hash)
