"""Sampled checks of the monotonicity and Lipschitz hypotheses, with witnesses.

Every check is a finite-sample certificate: a violation comes with the pair
that produced it, a pass only says no sampled pair failed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import DIRECTIONS, CoefficientSet, MonotoneConstants, eval_A, eval_h
from .spaces import StateQuintuple, jump_sq_norm, pairing_A

A4_PARTS = ("b", "f", "sigma", "g", "phi", "h")


def tolerance(lhs, rhs, rel: float = 1e-9):
    return rel * (1.0 + np.abs(lhs) + np.abs(rhs))


@dataclass(frozen=True)
class PairSampler:
    """Draws ``(v, v', t)``: structured rays first, then Gaussian pairs.

    Rays move one stacked coordinate (and, when ``pair_rays``, two at once)
    by ``r`` from a Gaussian base point, for each radius ``r``.  The remaining
    samples are independent standard normal pairs scaled by a radius cycled
    through ``radii``.
    """

    radii: tuple[float, ...] = (0.1, 1.0, 10.0)
    seed: int = 0
    rays: bool = True
    pair_rays: bool = True
    max_pair_dim: int = 24

    def ray_directions(self, D: int) -> np.ndarray:
        dirs = [np.eye(D)]
        if self.pair_rays and D <= self.max_pair_dim:
            rows = []
            for a in range(D):
                for b in range(a + 1, D):
                    for s in (1.0, -1.0):
                        e = np.zeros(D)
                        e[a], e[b] = 1.0, s
                        rows.append(e)
            if rows:
                dirs.append(np.array(rows))
        return np.concatenate(dirs)

    def n_rays(self, D: int) -> int:
        return len(self.ray_directions(D)) * len(self.radii) if self.rays else 0

    def draw(self, spec, n: int):
        """Return ``(v, v_prime, t)`` with batch shape ``(n,)``."""
        if n < 1:
            raise ValueError("n_samples must be at least 1")
        rng = np.random.default_rng(self.seed)
        D = spec.stacked_dim
        radii = np.asarray(self.radii, dtype=float)
        blocks_a, blocks_b = [], []
        if self.rays:
            dirs = self.ray_directions(D)
            for r in radii:
                base = rng.standard_normal((len(dirs), D)) * r
                blocks_a.append(base + r * dirs)
                blocks_b.append(base)
        a = np.concatenate(blocks_a) if blocks_a else np.empty((0, D))
        b = np.concatenate(blocks_b) if blocks_b else np.empty((0, D))
        rest = max(0, n - len(a))
        scale = radii[np.arange(rest) % len(radii)][:, None]
        a = np.concatenate([a, rng.standard_normal((rest, D)) * scale])[:n]
        b = np.concatenate([b, rng.standard_normal((rest, D)) * scale])[:n]
        t = rng.uniform(0.0, spec.T, size=n)
        return StateQuintuple.unstack(a, spec), StateQuintuple.unstack(b, spec), t

    def describe(self) -> dict:
        return asdict(self)


@dataclass
class Witness:
    hypothesis: str
    inequality: str
    v: StateQuintuple
    v_prime: StateQuintuple
    t: float
    slack: float
    params: dict

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "inequality": self.inequality,
            "t": self.t,
            "slack": self.slack,
            "params": self.params,
            "v": {n: a.tolist() for n, a in zip(self.v._names, self.v.components())},
            "v_prime": {n: a.tolist() for n, a in zip(self.v_prime._names, self.v_prime.components())},
        }


@dataclass
class Verdict:
    passed: bool
    witnesses: list[Witness]
    n_samples: int
    max_slack: float

    def __bool__(self) -> bool:
        return self.passed


def _sq(a, nd):
    return np.sum(a * a, axis=tuple(range(-nd, 0)))


def _diffs(v, vp):
    d = v - vp
    return d, _sq(d.y, 1), _sq(d.Y, 1), _sq(d.z, 2), _sq(d.Z, 2)


def a1_terms(coeffs: CoefficientSet, v, vp, t):
    """Return ``(pairing, theta1 weight, theta2 weight)`` per sample."""
    ms = coeffs.spec.markspace
    dA = eval_A(coeffs, t, v) - eval_A(coeffs, t, vp)
    d, y2, Y2, z2, Z2 = _diffs(v, vp)
    return pairing_A(dA, d, ms), y2 + z2, Y2 + Z2 + jump_sq_norm(d.k, ms.weight_array)


def a1_slack(coeffs, v, vp, t, theta1, theta2, direction="A1/A2"):
    P, a, b = a1_terms(coeffs, v, vp, t)
    rhs = theta1 * a + theta2 * b
    if direction == DIRECTIONS[0]:
        return P + rhs, tolerance(P, rhs)
    return rhs - P, tolerance(P, rhs)


def a2_terms(coeffs, y, yp):
    dy = y - yp
    return np.sum((eval_h(coeffs, y) - eval_h(coeffs, yp)) * dy, axis=-1), _sq(dy, 1)


def a2_slack(coeffs, y, yp, beta, direction="A1/A2"):
    P, n2 = a2_terms(coeffs, y, yp)
    rhs = beta * n2
    if direction == DIRECTIONS[0]:
        return rhs - P, tolerance(P, rhs)
    return P + rhs, tolerance(P, rhs)


def a4_terms(coeffs, v, vp, t) -> dict[str, tuple]:
    """Per inequality: ``(lhs, c-weight, gamma-weight)`` with lhs <= c*U + gamma*V."""
    w = coeffs.spec.markspace.weight_array
    dA = eval_A(coeffs, t, v) - eval_A(coeffs, t, vp)
    d, y2, Y2, z2, Z2 = _diffs(v, vp)
    k2 = jump_sq_norm(d.k, w)
    full = y2 + Y2 + z2 + Z2 + k2
    zero = np.zeros_like(full)
    dh = eval_h(coeffs, v.y) - eval_h(coeffs, vp.y)
    return {
        "b": (_sq(dA.b, 1), full, zero),
        "f": (_sq(dA.f, 1), full, zero),
        "sigma": (_sq(dA.sigma, 2), y2 + Y2 + Z2 + k2, 0.5 * z2),
        "g": (_sq(dA.g, 2), y2 + Y2 + z2, Z2 + k2),
        "phi": (jump_sq_norm(dA.phi, w), y2 + Y2 + Z2 + k2, 0.5 * z2),
        "h": (np.sqrt(_sq(dh, 1)), np.sqrt(y2), zero),
    }


def a4_slacks(coeffs, v, vp, t, c, gamma):
    out = {}
    for name, (L, U, V) in a4_terms(coeffs, v, vp, t).items():
        rhs = c * U + gamma * V
        out[name] = (L - rhs, tolerance(L, rhs))
    return out


def _collect(hyp, ineq, slack, tol, v, vp, t, params, max_witnesses, out):
    bad = np.flatnonzero(slack > tol)
    for i in bad[: max(0, max_witnesses - len(out))]:
        out.append(Witness(hyp, ineq, v[i].copy(), vp[i].copy(), float(t[i]), float(slack[i]), dict(params)))
    return len(bad)


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")


def verify_A1(coeffs, theta1, theta2, sampler=None, n_samples=10_000, direction="A1/A2", max_witnesses=10):
    _check_direction(direction)
    sampler = PairSampler() if sampler is None else sampler
    v, vp, t = sampler.draw(coeffs.spec, n_samples)
    s, tol = a1_slack(coeffs, v, vp, t, theta1, theta2, direction)
    wit: list[Witness] = []
    params = {"theta1": theta1, "theta2": theta2, "direction": direction}
    n_bad = _collect("A1", direction.split("/")[0], s, tol, v, vp, t, params, max_witnesses, wit)
    return Verdict(n_bad == 0, wit, n_samples, float(np.max(s)))


def verify_A2(coeffs, beta, sampler=None, n_samples=10_000, direction="A1/A2", max_witnesses=10):
    _check_direction(direction)
    sampler = PairSampler() if sampler is None else sampler
    v, vp, t = sampler.draw(coeffs.spec, n_samples)
    s, tol = a2_slack(coeffs, v.y, vp.y, beta, direction)
    wit: list[Witness] = []
    params = {"beta": beta, "direction": direction}
    n_bad = _collect("A2", direction.split("/")[1], s, tol, v, vp, t, params, max_witnesses, wit)
    return Verdict(n_bad == 0, wit, n_samples, float(np.max(s)))


def verify_A4(coeffs, c, gamma, sampler=None, n_samples=10_000, max_witnesses=10):
    sampler = PairSampler() if sampler is None else sampler
    v, vp, t = sampler.draw(coeffs.spec, n_samples)
    wit: list[Witness] = []
    n_bad, worst = 0, -np.inf
    for name, (s, tol) in a4_slacks(coeffs, v, vp, t, c, gamma).items():
        n_bad += _collect("A4", name, s, tol, v, vp, t, {"c": c, "gamma": gamma}, max_witnesses, wit)
        worst = max(worst, float(np.max(s)))
    return Verdict(n_bad == 0, wit, n_samples, worst)


def recompute_slack(coeffs: CoefficientSet, w: Witness) -> float:
    """Slack of a stored witness, evaluated from scratch."""
    v, vp = w.v[None], w.v_prime[None]
    t = np.array([w.t])
    p = w.params
    if w.hypothesis == "A1":
        s, _ = a1_slack(coeffs, v, vp, t, p["theta1"], p["theta2"], p["direction"])
    elif w.hypothesis == "A2":
        s, _ = a2_slack(coeffs, v.y, vp.y, p["beta"], p["direction"])
    else:
        s, _ = a4_slacks(coeffs, v, vp, t, p["c"], p["gamma"])[w.inequality]
    return float(s[0])


# --- constant estimation ------------------------------------------------------


def _ratio_min(num, den, mask):
    return float(np.min(num[mask] / den[mask])) if np.any(mask) else np.inf


def _ratio_max(num, den, mask):
    return float(np.max(num[mask] / den[mask])) if np.any(mask) else 0.0


def _estimate_theta(P, Q, direction):
    """Largest theta with theta1 = theta2 = theta passing on every sample, or None."""
    # A1: P + theta Q <= 0;  A1': theta Q - P <= 0
    excess = P if direction == DIRECTIONS[0] else -P
    if np.any(excess > tolerance(P, 0.0)):
        return None
    return max(_ratio_min(-excess, Q, Q > 0), 0.0)


def _estimate_beta(P, n2, direction):
    # A2: beta |dy|^2 <= P;  A2': beta |dy|^2 <= -P
    gain = P if direction == DIRECTIONS[0] else -P
    if np.any(gain < -tolerance(P, 0.0)):
        return None
    bound = _ratio_min(gain, n2, n2 > 0)
    return max(bound, 0.0) if np.isfinite(bound) else 0.0


def _estimate_a4(terms):
    """Lexicographic (gamma, c): smallest gamma, then smallest c at that gamma."""
    gamma = 0.0
    for L, U, V in terms.values():
        tol = tolerance(L, 0.0)
        pinned = (U <= 0) & (L > tol)
        if np.any(pinned & (V <= 0)):
            return None
        gamma = max(gamma, _ratio_max(L, V, pinned & (V > 0)))
    c = _c_at_gamma(terms, gamma)
    return gamma, c


def _c_at_gamma(terms, gamma):
    c = 0.0
    for L, U, V in terms.values():
        c = max(c, _ratio_max(L - gamma * V, U, U > 0))
    return c


@dataclass
class HypothesisReport:
    statuses: dict[str, str]
    constants: dict[str, float | None]
    witnesses: list[Witness]
    n_samples: int
    sampler: dict
    direction: str
    requirement_flags: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    declared: dict | None = None

    @property
    def violated(self) -> bool:
        return any(s == "violated" for s in self.statuses.values())

    def to_dict(self) -> dict:
        return {
            "statuses": self.statuses,
            "constants": self.constants,
            "direction": self.direction,
            "n_samples": self.n_samples,
            "sampler": self.sampler,
            "declared": self.declared,
            "requirement_flags": self.requirement_flags,
            "notes": self.notes,
            "witnesses": [w.to_dict() for w in self.witnesses],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, **kw)

    def summary_table(self) -> str:
        rows = [("hypothesis", "status")] + sorted(self.statuses.items())
        rows += [("", "")] + [(k, "n/a" if v is None else f"{v:.6g}") for k, v in self.constants.items()]
        width = max(len(r[0]) for r in rows) + 2
        lines = [f"{a:<{width}}{b}" for a, b in rows]
        lines.append(f"samples: {self.n_samples}  direction: {self.direction}  witnesses: {len(self.witnesses)}")
        lines += [f"flag: {f}" for f in self.requirement_flags]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def estimate_constants(coeffs, sampler=None, n_samples=10_000, direction="auto", max_witnesses=10):
    """Best constants supported by the sample.

    theta is estimated on the diagonal theta1 = theta2 (largest feasible),
    beta as the largest feasible value, and (gamma, c) as the smallest
    feasible pair, gamma first.  The slacks are affine in the constants, so
    each bound is the exact extremum of a ratio over the sample.
    """
    if n_samples < 100:
        raise ValueError("constant estimation needs at least 100 samples")
    sampler = PairSampler() if sampler is None else sampler
    v, vp, t = sampler.draw(coeffs.spec, n_samples)
    P, a, b = a1_terms(coeffs, v, vp, t)
    Q = a + b
    Ph, n2 = a2_terms(coeffs, v.y, vp.y)
    dirs = DIRECTIONS if direction == "auto" else (direction,)
    for d in dirs:
        _check_direction(d)
    chosen, theta, beta = dirs[0], None, None
    for d in dirs:
        theta, beta = _estimate_theta(P, Q, d), _estimate_beta(Ph, n2, d)
        if theta is not None:
            chosen = d
            break
    statuses, wit, notes = {}, [], []
    if theta is None:
        statuses["A1"] = "violated"
        for d in dirs:
            s, tol = a1_slack(coeffs, v, vp, t, 0.0, 0.0, d)
            _collect("A1", d.split("/")[0], s, tol, v, vp, t,
                     {"theta1": 0.0, "theta2": 0.0, "direction": d}, len(wit) + max_witnesses, wit)
        for d in dirs:
            beta = _estimate_beta(Ph, n2, d)
            if beta is not None:
                chosen = d
                break
    else:
        statuses["A1"] = "estimated"
    if beta is None:
        statuses["A2"] = "violated"
        s, tol = a2_slack(coeffs, v.y, vp.y, 0.0, chosen)
        _collect("A2", chosen.split("/")[1], s, tol, v, vp, t,
                 {"beta": 0.0, "direction": chosen}, len(wit) + max_witnesses, wit)
    else:
        statuses["A2"] = "estimated"
    terms = a4_terms(coeffs, v, vp, t)
    a4 = _estimate_a4(terms)
    if a4 is None or a4[0] >= 1.0:
        statuses["A4"] = "violated"
        gamma = 1.0 - 1e-12 if a4 is None else a4[0]
        c = _c_at_gamma(terms, min(gamma, 1.0 - 1e-12))
        for name, (s, tol) in a4_slacks(coeffs, v, vp, t, c, min(gamma, 1.0 - 1e-12)).items():
            _collect("A4", name, s, tol, v, vp, t, {"c": c, "gamma": gamma}, len(wit) + max_witnesses, wit)
        a4 = (None, None)
    else:
        statuses["A4"] = "estimated"
    statuses["A3"] = "satisfied-by-construction"
    gamma_star, c_star = a4
    constants = {"theta1": theta, "theta2": theta, "beta": beta, "c": c_star, "gamma": gamma_star}
    flags = []
    if theta is not None and beta is not None:
        if not theta + theta > 0:
            flags.append("theta1 + theta2 > 0 unmet")
        if not theta + beta > 0:
            flags.append("theta2 + beta > 0 unmet")
    if c_star is not None and c_star == 0.0:
        notes.append("c* = 0: hypotheses require c > 0, any positive c works")
    declared = coeffs.declared_constants
    if declared is not None and c_star is not None:
        constants["c_at_declared_gamma"] = _c_at_gamma(terms, declared.gamma)
    notes.append("theta estimated on the diagonal theta1 = theta2")
    return HypothesisReport(statuses, constants, wit, n_samples, sampler.describe(), chosen, flags, notes)


def check_hypotheses(coeffs, constants: MonotoneConstants | None = None, sampler=None, n_samples=10_000):
    """Verify at the declared constants, falling back to estimation.

    A hypothesis is ``verified-at-declared`` when the declared constants pass,
    ``estimated`` when they fail (or are absent) but feasible constants exist on
    the sample, and ``violated`` when no constants pass.  Witnesses against the
    declared constants are kept either way.
    """
    sampler = PairSampler() if sampler is None else sampler
    constants = coeffs.declared_constants if constants is None else constants
    direction = "auto" if constants is None else constants.direction
    report = estimate_constants(coeffs, sampler, n_samples, direction)
    if constants is None:
        report.notes.append("no declared constants")
        return report
    d = constants.direction
    checks = {
        "A1": verify_A1(coeffs, constants.theta1, constants.theta2, sampler, n_samples, d),
        "A2": verify_A2(coeffs, constants.beta, sampler, n_samples, d),
        "A4": verify_A4(coeffs, constants.c, constants.gamma, sampler, n_samples),
    }
    for name, verdict in checks.items():
        if verdict.passed:
            report.statuses[name] = "verified-at-declared"
        elif report.statuses[name] != "violated":
            report.notes.append(f"{name} fails at the declared constants; feasible constants estimated instead")
        report.witnesses.extend(verdict.witnesses)
    report.requirement_flags.extend(f"declared: {f}" for f in constants.requirement_violations())
    report.declared = asdict(constants)
    return report
