"""Command-line entry point: solve, train, evaluate, verify, bench."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .bench import run_bench
from .config import ConfigError, ExperimentConfig, apply_overrides, load
from .env import SUMMARY_COLUMNS, TRACE_COLUMNS, EnvError, evaluate_policy_in_env, POLICY_KINDS
from .npg import (AC_COLUMNS, EXACT_COLUMNS, SoftThresholdPolicy, run_exact_primal_dual,
                  run_threshold_npg)
from .solve import ThresholdFunction, decentralize, extract_threshold, value_iteration
from .verify import lambda_grid, run_verification

log = logging.getLogger("threshold_crl")

SCHEMA_VERSION = 1
POLICY_FORMAT = "threshold-crl-policy"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def update_manifest(out: Path, cfg: ExperimentConfig, command: str, schemas: dict) -> None:
    """Record the CSV schema version and column lists written by ``command``.

    The manifest has no timestamps so reruns leave it byte-identical.
    """
    path = out / "manifest.json"
    man = json.loads(path.read_text()) if path.exists() else {}
    man["schema_version"] = SCHEMA_VERSION
    man["config_hash"] = cfg.hash()
    man.setdefault("commands", {})[command] = {k: list(v) for k, v in sorted(schemas.items())}
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _policy_record(theta: np.ndarray, lam: float, cfg: ExperimentConfig) -> dict:
    return {"format": POLICY_FORMAT, "version": SCHEMA_VERSION, "config_hash": cfg.hash(),
            "lambda": float(lam), "theta": np.asarray(theta).tolist()}


def load_policy_theta(path: str) -> tuple[np.ndarray, float]:
    """Per-client logits and multiplier from either a policy file or a checkpoint."""
    rec = json.loads(Path(path).read_text())
    if rec.get("format") not in (POLICY_FORMAT, ckpt.FORMAT):
        raise ConfigError(f"{path} is neither a policy file nor a checkpoint")
    return np.array(rec["theta"], dtype=float), float(rec.get("lambda", 0.0))


# ---------------------------------------------------------------- commands

def cmd_solve(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir) / "solve"
    lams = lambda_grid(cfg)
    write_csv(out / "grid.csv", ("index", "lambda"),
              [{"index": i, "lambda": float(l)} for i, l in enumerate(lams)])
    distinct = []
    for m in cfg.clients:
        if m not in distinct:
            distinct.append(m)
    for k, m in enumerate(distinct):
        thr_rows = []
        for i, lam in enumerate(lams):
            vi = value_iteration(m, float(lam), tol=cfg.solver.tol)
            states = list(m.states())
            write_csv(out / f"value_m{k}_l{i:03d}.csv", ("x", "y", "value"),
                      [{"x": s.x, "y": s.y, "value": vi.J[m.index(s)]} for s in states])
            write_csv(out / f"policy_m{k}_l{i:03d}.csv", ("x", "y", "action"),
                      [{"x": s.x, "y": s.y, "action": "HIGH" if vi.policy[m.index(s)] == 0 else "LOW"}
                       for s in states])
            res = extract_threshold(vi.policy, m)
            for y in range(m.M + 1):
                f = res.f[y] if isinstance(res, ThresholdFunction) else "NA"
                thr_rows.append({"lambda": float(lam), "y": y, "f": f})
        write_csv(out / f"thresholds_m{k}.csv", ("lambda", "y", "f"), thr_rows)
    update_manifest(Path(cfg.output_dir), cfg, "solve",
                    {"solve/grid.csv": ("index", "lambda"),
                     "solve/value_m*_l*.csv": ("x", "y", "value"),
                     "solve/policy_m*_l*.csv": ("x", "y", "action"),
                     "solve/thresholds_m*.csv": ("lambda", "y", "f")})
    print(f"solved {len(distinct)} client model(s) on {len(lams)} multipliers -> {out}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config()
    pairs = cfg.pairs()
    if args.exact:
        dc = decentralize(pairs, cfg.K_bar, step=cfg.solver.dual_step)
        res = run_exact_primal_dual(pairs, tc, J_c_star=dc.primal_value)
        write_csv(out / "train_exact.csv", EXACT_COLUMNS, res.trace.rows)
        (out / "policy_exact.json").write_text(
            json.dumps(_policy_record(np.stack(res.thetas), res.dual.lam, cfg)))
        update_manifest(out, cfg, "train-exact", {"train_exact.csv": EXACT_COLUMNS})
        print(f"exact primal-dual: T={tc.T}, final lambda={res.dual.lam!r}, "
              f"gap_avg={float(res.gap_avg[-1])!r}, violation_avg={float(res.violation_avg[-1])!r}")
        return 0

    h = cfg.train_hash()
    state = ckpt.load(args.resume, h) if args.resume else None
    path = out / "checkpoint.json"
    every = cfg.report.checkpoint_every

    def on_tick(st):
        if every and st.t % every == 0:
            ckpt.save(path, st, h)

    st = run_threshold_npg(pairs, tc, state=state, until=args.until, on_tick=on_tick)
    ckpt.save(path, st, h)
    if st.t < tc.T:
        print(f"stopped at tick {st.t} of {tc.T}; resume with --resume {path}")
        return 0
    write_csv(out / "train_ac.csv", AC_COLUMNS, st.rows)
    (out / "policy_ac.json").write_text(json.dumps(_policy_record(st.theta, st.lam, cfg)))
    update_manifest(out, cfg, "train-ac", {"train_ac.csv": AC_COLUMNS})
    print(f"actor-critic: T={tc.T}, final lambda={st.lam!r}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    kind = args.policy
    artifacts: dict = {}
    if args.checkpoint:
        theta, _ = load_policy_theta(args.checkpoint)
        theta = np.atleast_2d(theta)
        if theta.shape[0] < cfg.N:
            raise ConfigError(f"checkpoint has {theta.shape[0]} clients, config has {cfg.N}")
        pols = [SoftThresholdPolicy(theta[n]) for n in range(cfg.N)]
        artifacts["policies"] = pols
        artifacts["thresholds"] = [ThresholdFunction(p.hard_threshold(m))
                                   for p, m in zip(pols, cfg.clients)]
    elif kind in ("index", "soft"):
        raise ConfigError(f"--policy {kind} needs --checkpoint with trained logits")
    elif kind == "threshold":
        dc = decentralize(cfg.pairs(), cfg.K_bar, step=cfg.solver.dual_step)
        fs = []
        for m in cfg.clients:
            res = extract_threshold(value_iteration(m, dc.lam_star).policy, m)
            if not isinstance(res, ThresholdFunction):
                raise ConfigError(f"the optimal policy at lambda={dc.lam_star} is not of threshold "
                                  "form; pass --checkpoint to use learned thresholds")
            fs.append(res)
        artifacts["thresholds"] = fs
    episodes = args.episodes if args.episodes is not None else cfg.report.episodes
    trace_ep = 0 if cfg.report.write_trace else None
    summary, trace = evaluate_policy_in_env(kind, cfg.env(), episodes, artifacts, trace_ep)
    out = Path(cfg.output_dir)
    write_csv(out / f"eval_{kind}.csv", SUMMARY_COLUMNS, summary.rows)
    schemas = {f"eval_{kind}.csv": SUMMARY_COLUMNS}
    if trace is not None:
        write_csv(out / f"eval_{kind}_trace.csv", TRACE_COLUMNS, trace)
        schemas[f"eval_{kind}_trace.csv"] = TRACE_COLUMNS
    update_manifest(out, cfg, f"evaluate-{kind}", schemas)
    print(f"{kind}: {episodes} episodes, discounted cost {summary.mean('disc_cost'):.4f} "
          f"+/- {summary.stderr('disc_cost'):.4f}, qoe {summary.mean('qoe'):.3f}")
    return 0


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    theta = lam = error = None
    if args.checkpoint:
        try:
            th, lam = load_policy_theta(args.checkpoint)
            theta = np.atleast_2d(th)[0]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            # An unreadable checkpoint is a failed check, not a crash.
            error = f"unusable checkpoint {args.checkpoint}: {exc}"
            log.warning(error)
    rep = run_verification(cfg, args.tol, theta, lam, error)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(rep.to_json())
    (out / "verify.txt").write_text(rep.to_text())
    sys.stdout.write(rep.to_text())
    return 0 if rep.passed else 1


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    res = run_bench(list(cfg.clients), cfg.env().K, repeats=args.repeats, seed=cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    for name, r in res["results"].items():
        print(f"{name:30s} p50={r['p50_ns']:.0f}ns p90={r['p90_ns']:.0f}ns p99={r['p99_ns']:.0f}ns")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="threshold-crl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--seed", type=int, default=None, help="override the top-level seed")
        sp.add_argument("--out", default=None, help="override the output directory")
        return sp

    common(sub.add_parser("solve", help="value iteration over the multiplier grid"))
    tr = common(sub.add_parser("train", help="exact primal-dual or actor-critic training"))
    mode = tr.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="exact primal-dual iteration")
    mode.add_argument("--ac", action="store_true", help="sampled actor-critic (default)")
    tr.add_argument("--resume", default=None, help="continue from an actor-critic checkpoint")
    tr.add_argument("--until", type=int, default=None, help="stop after this many ticks")
    ev = common(sub.add_parser("evaluate", help="simulate a scheduling policy"))
    ev.add_argument("--policy", choices=POLICY_KINDS, required=True)
    ev.add_argument("--episodes", type=int, default=None)
    ev.add_argument("--checkpoint", default=None, help="policy file or checkpoint with logits")
    vf = common(sub.add_parser("verify", help="run the numerical verification report"))
    vf.add_argument("--tol", type=float, default=None, help="override every headline tolerance")
    vf.add_argument("--checkpoint", default=None, help="also test the logits stored here")
    bn = common(sub.add_parser("bench", help="decision latency microbenchmark"))
    bn.add_argument("--repeats", type=int, default=20000)
    return p


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "evaluate": cmd_evaluate,
            "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load(args.config), out=args.out, seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, EnvError, ckpt.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
