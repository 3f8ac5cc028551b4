"""Numerical verification of the structural and convergence properties.

Each check produces a measured quantity and a tolerance; a check passes when
the measurement is finite and within tolerance.  ``measured`` is oriented so
that smaller is better (violations, errors, or bound-minus-value deficits).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ExperimentConfig
from .env import substream
from .npg import (TrainConfig, exact_primal_step, finite_difference_gradient,
                  lagrangian_advantages, multiplicative_policy_update, natural_gradient_oracle,
                  policy_probs, run_exact_primal_dual, convergence_bounds)
from .solve import (ThresholdFunction, decentralize, extract_threshold, lambda_max,
                    monotone_violation, slater_margin, threshold_condition, switching_constant,
                    value_iteration_grid)

CHECKS = ("threshold-structure", "monotone-differences", "switching-condition",
          "lemma4-equivalence", "corollary1-identity", "improvement-lemma", "theorem3-bounds",
          "decentralization-slackness")

DEFAULT_TOL = {
    "threshold-structure": 0.0,        # number of non-threshold optimal policies
    "monotone-differences": 1e-9,
    "switching-condition": 0.0,        # disagreements outside the tie band
    "lemma4-equivalence": 1e-6,
    "lemma4-fisher-offdiag": 1e-15,
    "lemma4-gradient-fd": 1e-5,
    "corollary1-identity": 1e-12,
    "improvement-lemma": 1e-9,
    "improvement-logZ": 1e-12,
    "theorem3-bounds": 0.0,            # largest (value - bound); must be <= 0
    "decentralization-slackness": 1e-2,
}


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def get(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return repr(v)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v
        return json.dumps({"passed": self.passed,
                           "checks": [clean(asdict(c)) for c in self.checks]}, indent=2,
                          sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            lines.append(f"{'PASS' if c.passed else 'FAIL'}  {c.name:28s} measured={c.measured!r:<24} "
                         f"tol={c.tolerance!r}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _ok(measured: float, tol: float) -> bool:
    return bool(np.isfinite(measured) and measured <= tol)


def _distinct(cfg: ExperimentConfig):
    seen, out = set(), []
    for m, rho in cfg.pairs():
        key = (m, rho.tobytes())
        if key not in seen:
            seen.add(key)
            out.append((m, rho))
    return out


def lambda_grid(cfg: ExperimentConfig) -> np.ndarray:
    top = cfg.solver.lambda_max
    if top is None:
        top = lambda_max(cfg.N, cfg.gamma, slater_margin(cfg.K_bar))
    return np.linspace(0.0, top, cfg.solver.lambda_points)


def check_structure(cfg: ExperimentConfig, tol: dict) -> list[Check]:
    lams = lambda_grid(cfg)
    bad_thr, worst_mono, worst_drain, bad_switch, c0_max = [], -math.inf, -math.inf, 0, 0.0
    for k, (m, _) in enumerate(_distinct(cfg)):
        J, pols = value_iteration_grid(m, lams, tol=cfg.solver.tol)
        for lam, j, p in zip(lams, J, pols):
            res = extract_threshold(p, m)
            if not isinstance(res, ThresholdFunction):
                bad_thr.append({"model": k, "lambda": float(lam), "y": res.y,
                                "x_low": res.x_low, "x_high": res.x_high})
            worst_mono = max(worst_mono, monotone_violation(j, m))
            worst_drain = max(worst_drain, monotone_violation(j, m, "drain"))
            for s in m.states():
                lhs, r, a = threshold_condition(j, s, lam, m)
                if a != p[m.index(s)] and abs(lhs - r) > 1e-9:
                    bad_switch += 1
                c0_max = max(c0_max, abs(switching_constant(s, m)))
    return [
        Check("threshold-structure", _ok(len(bad_thr), tol["threshold-structure"]),
              float(len(bad_thr)), tol["threshold-structure"],
              {"grid": [float(x) for x in lams], "failures": bad_thr}),
        Check("monotone-differences", _ok(worst_mono, tol["monotone-differences"]), worst_mono,
              tol["monotone-differences"], {"drain_form": worst_drain}),
        Check("switching-condition", _ok(bad_switch, tol["switching-condition"]) and c0_max == 0.0,
              float(bad_switch), tol["switching-condition"], {"max_abs_c0": c0_max}),
    ]


def check_natural_gradient(cfg: ExperimentConfig, tol: dict, theta_override: np.ndarray | None = None,
                 lam_override: float | None = None, theta_error: str | None = None) -> Check:
    if theta_error is not None:
        return Check("lemma4-equivalence", False, math.nan, tol["lemma4-equivalence"],
                     {"error": theta_error, "from_checkpoint": True})
    m, rho = cfg.pairs()[0]
    rng = substream(cfg.seed, "verify-natural-gradient")
    eta1 = cfg.train.eta1
    lam_hi = lambda_grid(cfg)[-1]
    cases = []
    if theta_override is not None:
        lam0 = 0.0 if lam_override is None else float(lam_override)
        cases.append((np.asarray(theta_override, dtype=float), lam0))
    else:
        for _ in range(cfg.report.gradient_samples):
            cases.append((rng.uniform(-5, 5, m.n_states), float(rng.uniform(0, lam_hi))))
    worst = worst_off = worst_fd = 0.0
    min_rank = m.n_states
    try:
        for i, (theta, lam) in enumerate(cases):
            if theta.shape != (m.n_states,):
                raise ValueError(f"theta has shape {theta.shape}, expected ({m.n_states},)")
            if not np.isfinite(theta).all():
                raise ValueError(f"{int((~np.isfinite(theta)).sum())} non-finite logits")
            ng = natural_gradient_oracle(theta, lam, m, rho)
            _, _, adv = lagrangian_advantages(theta, lam, m)
            A = adv.A_lambda
            target = eta1 / (1 - m.gamma) * (A[:, 0] - A[:, 1])
            mask = ng.occupancy > 1e-8
            err = np.abs(eta1 * ng.direction - target)[mask]
            e = float(err.max()) if err.size else 0.0
            if not (np.isfinite(e) and np.isfinite(ng.fisher).all()):
                worst = math.nan
                break
            worst = max(worst, e)
            off = ng.fisher - np.diag(np.diag(ng.fisher))
            worst_off = max(worst_off, float(np.abs(off).max()))
            min_rank = min(min_rank, ng.rank)
            if i < 10:  # finite differences are the slow part
                fd = finite_difference_gradient(theta, lam, m, rho)
                rel = float(np.linalg.norm(ng.grad - fd) / max(np.linalg.norm(fd), 1e-300))
                worst_fd = max(worst_fd, rel)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return Check("lemma4-equivalence", False, math.nan, tol["lemma4-equivalence"],
                     {"error": str(exc)})
    passed = (_ok(worst, tol["lemma4-equivalence"]) and _ok(worst_off, tol["lemma4-fisher-offdiag"])
              and _ok(worst_fd, tol["lemma4-gradient-fd"]))
    return Check("lemma4-equivalence", passed, worst, tol["lemma4-equivalence"],
                 {"fisher_offdiag": worst_off, "gradient_fd_rel": worst_fd, "min_rank": min_rank,
                  "cases": len(cases), "from_checkpoint": theta_override is not None})


def check_update_identity(cfg: ExperimentConfig, tol: dict) -> Check:
    m, rho = cfg.pairs()[0]
    rng = substream(cfg.seed, "verify-update-identity")
    eta1 = cfg.train.eta1
    lam_hi = lambda_grid(cfg)[-1]
    worst = 0.0
    for _ in range(cfg.report.identity_samples):
        theta = rng.uniform(-5, 5, m.n_states)
        lam = float(rng.uniform(0, lam_hi))
        pi, _, adv = lagrangian_advantages(theta, lam, m)
        new_theta = exact_primal_step(theta, lam, m, rho, eta1)
        additive = policy_probs(new_theta)
        mult, _ = multiplicative_policy_update(pi, adv.A_lambda, eta1, m.gamma)
        worst = max(worst, float(np.abs(additive - mult).max()))
    return Check("corollary1-identity", _ok(worst, tol["corollary1-identity"]), worst,
                 tol["corollary1-identity"], {"instances": cfg.report.identity_samples})


def check_primal_dual(cfg: ExperimentConfig, tol: dict) -> list[Check]:
    pairs = cfg.pairs()
    dc = decentralize(pairs, cfg.K_bar, step=cfg.solver.dual_step)
    slack = abs(dc.slackness)
    gap_tol = dc.step * cfg.N / (1 - cfg.gamma)
    dec = Check("decentralization-slackness",
                _ok(slack, tol["decentralization-slackness"]) and abs(dc.duality_gap) <= gap_tol,
                slack, tol["decentralization-slackness"],
                {"lambda_star": dc.lam_star, "D_star": dc.D_star, "primal": dc.primal_value,
                 "duality_gap": dc.duality_gap, "gap_tolerance": gap_tol,
                 "budget_use": float(dc.J_g.sum()), "K_bar": cfg.K_bar})
    xi = cfg.train.xi if cfg.train.xi is not None else slater_margin(cfg.K_bar)
    worst_imp, worst_logz, worst_bound = -math.inf, math.inf, -math.inf
    per_T = []
    for T in cfg.report.bound_horizons:
        tc = TrainConfig(T=int(T), K_bar=cfg.K_bar, eta1=cfg.train.eta1, xi=cfg.train.xi)
        res = run_exact_primal_dual(pairs, tc, J_c_star=dc.primal_value)
        gb, vb = convergence_bounds(cfg.N, cfg.gamma, int(T), xi)
        step_bound = tc.resolved_eta2(cfg.N, cfg.gamma) * cfg.N / (1 - cfg.gamma)
        deficits = [res.gap_avg[-1] - gb, res.violation_avg[-1] - vb,
                    float(res.lam_steps.max()) - step_bound]
        worst_bound = max(worst_bound, max(deficits))
        worst_imp = max(worst_imp, float(-res.improvement_slack.min()))
        worst_logz = min(worst_logz, float(res.logZ.min()))
        per_T.append({"T": int(T), "gap_avg": float(res.gap_avg[-1]), "gap_bound": gb,
                      "violation_avg": float(res.violation_avg[-1]), "violation_bound": vb,
                      "max_lambda_step": float(res.lam_steps.max()), "lambda_step_bound": step_bound})
    imp = Check("improvement-lemma",
                _ok(worst_imp, tol["improvement-lemma"]) and _ok(-worst_logz, tol["improvement-logZ"]),
                worst_imp, tol["improvement-lemma"], {"min_logZ": worst_logz})
    thm = Check("theorem3-bounds", _ok(worst_bound, tol["theorem3-bounds"]), worst_bound,
                tol["theorem3-bounds"], {"runs": per_T, "J_c_star": dc.primal_value, "xi": xi})
    return [imp, thm, dec]


def run_verification(cfg: ExperimentConfig, tol_override: float | None = None,
                     theta_override: np.ndarray | None = None,
                     lam_override: float | None = None,
                     theta_error: str | None = None) -> VerificationReport:
    """Run every check; ``tol_override`` replaces all headline tolerances."""
    tol = {**DEFAULT_TOL, **cfg.report.tolerances}
    if tol_override is not None:
        for name in CHECKS:
            tol[name] = float(tol_override)
    checks = check_structure(cfg, tol)
    checks.append(check_natural_gradient(cfg, tol, theta_override, lam_override, theta_error))
    checks.append(check_update_identity(cfg, tol))
    checks.extend(check_primal_dual(cfg, tol))
    order = {n: i for i, n in enumerate(CHECKS)}
    checks.sort(key=lambda c: order[c.name])
    return VerificationReport(checks)
