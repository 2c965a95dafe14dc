"""Property checks of the calibrated map, runnable as one deterministic battery.

Every check returns a :class:`CheckResult` whose ``worst_margin`` is the
smallest slack observed in the inequality it tests (negative when violated);
a check passes when ``worst_margin >= -tolerance``.  Checks with several
parts rescale each part to the check's tolerance and list the raw values in
``details``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ALG_TOL,
    INEQ_SLACK,
    ROUNDTRIP_TOL,
    BeamIndex,
    BranchSpec,
    MapParams,
    _branch_inverse,
    _f0,
    _f0_inv,
    _fold,
    _half_beam_inverse,
    _s_eval,
    _unfold,
)
from .calibration import _jacobians
from .dynamics import CertifiedBall, StepFailure, grow_on_h0, propagate_ball
from .sampling import sphere_points

TOLERANCES = {
    "expansion": INEQ_SLACK,
    "boundary": INEQ_SLACK,
    "ball_lemmas": INEQ_SLACK,
    "roundtrips_and_zeros": ROUNDTRIP_TOL,
    "pair_contraction": INEQ_SLACK,
}
LATTICE_SPAN = 3          # beams are drawn with |r_j| <= LATTICE_SPAN
PULLBACK_SAMPLES = 64


@dataclass
class CheckResult:
    name: str
    samples: int
    worst_margin: float
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.worst_margin >= -self.tolerance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "samples": self.samples,
            "worst_margin": self.worst_margin,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "details": self.details,
        }


@dataclass
class SuiteReport:
    checks: list
    seed: int
    params: MapParams

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "seed": self.seed,
            "params": self.params.to_dict(),
            "checks": [c.to_dict() for c in self.checks],
        }


def _combine(name: str, samples: int, parts: dict) -> CheckResult:
    """Merge ``{part: (margin, tol)}`` into one result on the check's tolerance scale."""
    tol = TOLERANCES[name]
    worst = min(m * (tol / t) for m, t in parts.values())
    details = {k: {"worst_margin": m, "tolerance": t} for k, (m, t) in parts.items()}
    return CheckResult(name, samples, float(worst), tol, details)


def _random_beams(rng, n: int, d: int, signs: bool = True):
    r = rng.integers(-LATTICE_SPAN, LATTICE_SPAN + 1, size=(n, d - 1))
    s = rng.choice([-1, 1], size=n) if signs else np.ones(n, dtype=int)
    return r, s


def _from_local(r, s, off, h):
    """Absolute points from beam indices, horizontal offsets and heights."""
    X = np.empty((len(h), r.shape[1] + 1))
    X[:, :-1] = 2.0 * r + off
    X[:, -1] = s * h
    return X


# ---------------------------------------------------------------------------
# expansion


def _pairs_in_half_beams(rng, n: int, d: int, h_lo: float, h_hi: float, spread: float):
    r, s = _random_beams(rng, n, d)
    off_a = rng.uniform(-1, 1, (n, d - 1))
    h_a = rng.uniform(h_lo, h_hi, n)
    if spread >= 2:
        off_b = rng.uniform(-1, 1, (n, d - 1))
        h_b = rng.uniform(h_lo, h_hi, n)
    else:
        off_b = np.clip(off_a + rng.uniform(-spread, spread, (n, d - 1)), -1, 1)
        h_b = np.maximum(h_a + rng.uniform(-spread, spread, n), 0.0)
    return _from_local(r, s, off_a, h_a), _from_local(r, s, off_b, h_b)


def _aligned_pairs(rng, n: int, d: int, step: float = 1e-4):
    """Near pairs along the least-stretched direction of a sampled Jacobian.

    Heights are log-uniform and, for ``d >= 3``, half the points sit close
    to a diagonal ``|u_1| = |u_2|``: the stretching of F is weakest near
    ``H_0`` and along those diagonals.
    """
    r, s = _random_beams(rng, n, d)
    off = rng.uniform(-1, 1, (n, d - 1))
    h = 10.0 ** rng.uniform(-5, 0.5, n)
    if d >= 3:
        k = rng.random(n) < 0.5
        sign = np.where(rng.random(k.sum()) < 0.5, -1.0, 1.0)
        off[k, 1] = sign * np.abs(off[k, 0]) * (1 - 10.0 ** rng.uniform(-5, -1, k.sum()))
    A = _from_local(r, s, off, h)
    J, ok = _jacobians(A)
    v = np.linalg.svd(J)[2][:, -1, :]
    B = A + step * v
    inside = ok & (np.max(np.abs(B[:, :-1] - 2.0 * r), axis=1) <= 1.0) & (s * B[:, -1] >= 0)
    return A[inside], B[inside]


def check_expansion(n: int, seed: int, p: MapParams) -> CheckResult:
    """``|S(a) - S(b)| >= alpha |a - b|`` for pairs in a common closed half-beam.

    A quarter of the pairs each are near (spread 1e-3), aligned with the
    least-stretched direction of ``DF``, far (independent points with
    ``h <= 1.5``) and in the exponential regime (``1 <= h <= 6``).  The ``threshold`` part also requires the sampled
    ratio to exceed ``4 sqrt(d - 1)``, so a scale that is too small fails
    even when ``alpha`` was recomputed from it.
    """
    rng = np.random.default_rng(seed)
    k = max(n // 4, 1)
    groups = {
        "near": _pairs_in_half_beams(rng, k, p.d, 0.0, 3.0, 1e-3),
        "aligned": _aligned_pairs(rng, k, p.d),
        "far": _pairs_in_half_beams(rng, k, p.d, 0.0, 1.5, 2.0),
        "exponential": _pairs_in_half_beams(rng, max(n - 3 * k, 1), p.d, 1.0, 6.0, 2.0),
    }
    parts = {}
    lowest = math.inf
    total = 0
    for name, (A, B) in groups.items():
        gap = np.linalg.norm(A - B, axis=1)
        keep = gap > 1e-12
        ratio = np.linalg.norm(_s_eval(A[keep], p) - _s_eval(B[keep], p), axis=1) / gap[keep]
        lowest = min(lowest, float(np.min(ratio)))
        total += len(ratio)
        parts[name] = (float(np.min(ratio) - p.alpha), INEQ_SLACK)
    parts["threshold"] = (lowest - 4.0 * math.sqrt(p.d - 1), INEQ_SLACK)
    res = _combine("expansion", total, parts)
    res.details["min_ratio"] = lowest
    return res


# ---------------------------------------------------------------------------
# boundary maps


def check_boundary_maps(n: int, seed: int, p: MapParams) -> CheckResult:
    """``S(boundary of T(r)) subset H_0`` and ``S(H_0) subset H_0 cap B(0, lambda)``."""
    rng = np.random.default_rng(seed)
    d = p.d
    k = max(n // 3, 1)
    # side faces: one local coordinate at +-1
    r, s = _random_beams(rng, k, d)
    off = rng.uniform(-1, 1, (k, d - 1))
    face = rng.integers(0, d - 1, k)
    off[np.arange(k), face] = rng.choice([-1.0, 1.0], k)
    side = _from_local(r, s, off, rng.uniform(0, 5, k))
    # H_0, both as bottom faces and as arbitrary points of the hyperplane
    r2, _ = _random_beams(rng, 2 * k, d)
    flat = _from_local(r2, np.ones(2 * k), rng.uniform(-1, 1, (2 * k, d - 1)), np.zeros(2 * k))
    Ys = _s_eval(side, p)
    Yf = _s_eval(flat, p)
    parts = {
        "side_faces_to_H0": (float(-np.max(np.abs(Ys[:, -1])) / p.lam), INEQ_SLACK),
        "H0_to_H0": (float(-np.max(np.abs(Yf[:, -1])) / p.lam), INEQ_SLACK),
        "H0_norm_bound": (float(np.min(1.0 + 1e-12 - np.linalg.norm(Yf, axis=1) / p.lam)), INEQ_SLACK),
    }
    return _combine("boundary", len(side) + len(flat), parts)


# ---------------------------------------------------------------------------
# ball lemmas


def _pullback_margin(Y, br: BranchSpec, x, t: float, p: MapParams) -> float:
    X = _branch_inverse(Y, br, p)
    return float(np.min(t - np.linalg.norm(X - x, axis=1)) / max(1.0, t))


def check_ball_lemmas(n: int, seed: int, p: MapParams) -> CheckResult:
    """The two inscribed-ball lemmas on ``n`` random admissible instances each.

    First lemma: ``B(S(x), alpha t) subset S(B(x, t))`` for ``B(x, t)`` in a
    half-beam.  Second lemma: for ``x in H_0`` the ball returned by
    :func:`grow_on_h0` has radius ``min(2t, 1/2)``, is centred on ``H_0``,
    lies in one beam and pulls back into ``B(x, t)``.
    """
    rng = np.random.default_rng(seed)
    d = p.d
    dirs = sphere_points(PULLBACK_SAMPLES, d)
    worst_pull1 = worst_law1 = worst_pull2 = worst_law2 = worst_h0 = worst_beam = math.inf
    law_count = 0
    r, s = _random_beams(rng, n, d)
    off = rng.uniform(-0.9, 0.9, (n, d - 1))
    h = rng.uniform(0.05, 3.0, n)
    frac = rng.uniform(0.05, 0.95, n)
    X = _from_local(r, s, off, h)
    for i in range(n):
        beam = BeamIndex(r[i], int(s[i]))
        slack = min(float(np.min(1.0 - np.abs(off[i]))), float(h[i]))
        t = frac[i] * slack
        br = BranchSpec.half_beam(beam)
        b = CertifiedBall(X[i], t, br)
        try:
            nb = propagate_ball(b, p)
            law_count += 1
            worst_law1 = min(worst_law1, -abs(nb.radius - p.alpha * t) / (p.alpha * t))
        except StepFailure:
            pass
        y = _s_eval(X[i][None, :], p)[0]
        worst_pull1 = min(worst_pull1, _pullback_margin(y + p.alpha * t * dirs, br, X[i], t, p))
    r, _ = _random_beams(rng, n, d, signs=False)
    off = rng.uniform(-0.9, 0.9, (n, d - 1))
    frac = rng.uniform(0.02, 1.0, n)
    X = _from_local(r, np.ones(n), off, np.zeros(n))
    for i in range(n):
        t = frac[i] * float(np.min(1.0 - np.abs(off[i])))
        br = BranchSpec.full_beam(r[i])
        nb = grow_on_h0(CertifiedBall(X[i], t, br), p)
        want = min(2.0 * t, 0.5)
        worst_law2 = min(worst_law2, -abs(nb.radius - want) / want)
        worst_h0 = min(worst_h0, -abs(float(nb.center[-1])))
        worst_beam = min(worst_beam, nb.slack())
        Y = nb.point + nb.radius * dirs
        worst_pull2 = min(worst_pull2, _pullback_margin(Y, br, X[i], t, p))
    parts = {
        "alpha_t_pullback": (worst_pull1, INEQ_SLACK),
        "alpha_t_radius_law": (worst_law1, ALG_TOL),
        "min_2t_half_pullback": (worst_pull2, INEQ_SLACK),
        "min_2t_half_radius_law": (worst_law2, ALG_TOL),
        "center_on_H0": (worst_h0, ALG_TOL),
        "ball_in_one_beam": (worst_beam, ALG_TOL),
    }
    res = _combine("ball_lemmas", 2 * n, parts)
    res.details["alpha_t_radius_law_instances"] = law_count
    return res


# ---------------------------------------------------------------------------
# round trips, zeros and pair contraction


def _rel_err(a, b) -> float:
    return float(np.max(np.linalg.norm(a - b, axis=1) / np.maximum(1.0, np.linalg.norm(b, axis=1))))


def check_roundtrips_and_zeros(n: int, seed: int, p: MapParams) -> CheckResult:
    """Core round trips, the zeros of S and expansion away from each zero."""
    rng = np.random.default_rng(seed)
    d = p.d
    r, s = _random_beams(rng, n, d)
    off = rng.uniform(-1, 1, (n, d - 1))
    h = rng.uniform(0, 5, n)
    X = _from_local(r, s, off, h)
    m, U, H, par = _fold(X, p.fold_tie_rule)
    err_fold = _rel_err(_unfold(m, U, H, par), X)
    Uh, Hh = _f0_inv(_f0(U, H))
    err_f0 = _rel_err(np.column_stack([Uh, Hh]), np.column_stack([U, H]))
    Y = _s_eval(X, p)
    err_branch = 0.0
    for key in {(tuple(ri), int(si)) for ri, si in zip(r, s)}:
        mask = np.all(r == key[0], axis=1) & (s == key[1])
        Xb = _half_beam_inverse(Y[mask], BeamIndex(*key), p)
        err_branch = max(err_branch, _rel_err(Xb, X[mask]))
    full_err = 0.0
    for key in {tuple(ri) for ri in r}:
        mask = np.all(r == key, axis=1)
        Xb = _branch_inverse(Y[mask], BranchSpec.full_beam(key), p)
        full_err = max(full_err, _rel_err(Xb, X[mask]))
    zr = rng.integers(-50, 51, size=(100, d - 1))
    Z = np.column_stack([2.0 * zr, np.zeros(100)])
    zero_norm = float(np.max(np.linalg.norm(_s_eval(Z, p), axis=1)))
    # x sharing the closed half-beam T(r, sign) with its zero (2r, 0)
    z = np.column_stack([2.0 * r, np.zeros(n)])
    dist = np.linalg.norm(X - z, axis=1)
    ok = dist > 0
    ratio = np.linalg.norm(Y[ok], axis=1) / dist[ok]
    parts = {
        "fold_unfold": (-err_fold, ALG_TOL),
        "f0_roundtrip": (-err_f0, ROUNDTRIP_TOL),
        "half_beam_branch": (-err_branch, ROUNDTRIP_TOL),
        "full_beam_branch": (-full_err, ROUNDTRIP_TOL),
        "zeros": (-zero_norm / p.lam, ALG_TOL),
        "expansion_from_zero": (float(np.min(ratio) - p.alpha), INEQ_SLACK),
    }
    return _combine("roundtrips_and_zeros", n, parts)


def _pair_samples(rng, n: int, d: int):
    """Pairs of close points on either side of the shared face of a random pair domain.

    Half the pairs straddle ``H_0``, half a side face; both points stay 0.2
    away from the other faces so the segment between their images lifts
    through the pair branch.
    """
    r, s = _random_beams(rng, n, d)
    off = rng.uniform(-0.8, 0.8, (n, d - 1))
    h = rng.uniform(0.2, 3.0, n)
    depth = rng.uniform(1e-3, 0.03, (n, 2))
    wiggle = rng.uniform(-0.02, 0.02, (n, d))
    A = _from_local(r, s, off, h)
    B = _from_local(r, s, off + wiggle[:, :-1], h + wiggle[:, -1])
    specs = []
    for i in range(n):
        a = BeamIndex(r[i], int(s[i]))
        if i % 2 == 0 or d == 1:
            A[i, -1] = s[i] * depth[i, 0]
            B[i, -1] = -s[i] * depth[i, 1]
            b = BeamIndex(r[i], -int(s[i]))
        else:
            k = int(rng.integers(0, d - 1))
            side = int(rng.choice([-1, 1]))
            A[i, k] = 2.0 * r[i, k] + side * (1.0 - depth[i, 0])
            B[i, k] = 2.0 * r[i, k] + side * (1.0 + depth[i, 1])
            rr = r[i].copy()
            rr[k] += side
            b = BeamIndex(rr, int(s[i]))
        specs.append(BranchSpec.pair(a, b))
    return A, B, specs


def check_pair_contraction(n: int, seed: int, p: MapParams) -> CheckResult:
    """The pair inverse branch is ``1/alpha``-Lipschitz across the shared face.

    Pairs of points straddling the shared face are mapped forward; their
    images are pulled back through the pair branch and the distance ratio is
    compared with ``1/alpha``.
    """
    rng = np.random.default_rng(seed)
    A, B, specs = _pair_samples(rng, n, p.d)
    YA, YB = _s_eval(A, p), _s_eval(B, p)
    worst = math.inf
    rt = 0.0
    for i, br in enumerate(specs):
        xa = _branch_inverse(YA[i][None, :], br, p)[0]
        xb = _branch_inverse(YB[i][None, :], br, p)[0]
        rt = max(rt, float(np.linalg.norm(xa - A[i])), float(np.linalg.norm(xb - B[i])))
        lip = np.linalg.norm(xa - xb) / np.linalg.norm(YA[i] - YB[i])
        worst = min(worst, 1.0 / p.alpha - lip)
    parts = {
        "pair_lipschitz": (float(worst), INEQ_SLACK),
        "pair_roundtrip": (-rt, ROUNDTRIP_TOL),
    }
    return _combine("pair_contraction", n, parts)


def run_suite(n: int = 10_000, seed: int = 0, p: MapParams = None, tolerances: dict = None) -> SuiteReport:
    """All checks; the ball lemmas use ``n // 10`` instances since each is a chain step.

    ``tolerances`` replaces the pass threshold of the named checks.
    """
    checks = [
        check_expansion(n, seed, p),
        check_boundary_maps(n, seed + 1, p),
        check_ball_lemmas(max(n // 10, 1), seed + 2, p),
        check_roundtrips_and_zeros(n, seed + 3, p),
        check_pair_contraction(n, seed + 4, p),
    ]
    for c in checks:
        if tolerances and c.name in tolerances:
            c.tolerance = float(tolerances[c.name])
    return SuiteReport(checks, seed, p)
