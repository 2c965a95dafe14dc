"""Orbits, escape classification and certified ball chains.

A ball chain ``U_0, ..., U_N`` records sets with ``U_{j+1} subset S(U_j)``
together with the inverse branch of S defined on (a domain containing)
``U_j``.  Composing the branches backwards gives a map of ``U_N`` into
``U_0``; when ``closure(U_0) subset U_N`` it is a contraction with factor at
most ``alpha^-N`` and its fixed point is a periodic point of period N.

Chains are built in phases:

A. push a ball forward while its image ball stays inside one half-beam;
B. move to a ball centred on a face shared by two adjacent half-beams, then
   to a ball centred on ``H_0`` whose image is known to contain a ball;
C. grow balls on ``H_0`` with ``t -> min(2t, 1/2)``;
D. jump to ``B(z, 1)`` around a zero ``z`` of S;
E. pull ``B(0, alpha^k) cap int T_0`` back towards the origin.

Orbits through balls well above ``H_0`` reach norms like ``exp(10^4)``, so
ball centres are kept as tuples of mpfr values (see :mod:`qrsine.precise`)
and radii as floats.  Every step is checked by pulling back boundary samples
of the new ball through the recorded branch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import precise as P
from .core import (
    ALG_TOL,
    INEQ_SLACK,
    BeamIndex,
    BranchDomainError,
    BranchKind,
    BranchSpec,
    DomainError,
    MapParams,
    _branch_inverse,
    _s_eval,
)
from .sampling import ball_points, sphere_points

PULLBACK_SAMPLES = 64
MAX_RETRIES = 10
MAX_CONTRACTION_ITERS = 10_000
NUDGE_SCHEDULE = (0.0, 1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128, 1 / 256)
PHASE_A_LIMIT = 400
SUBTARGET_TRIES = 16     # alternative sub-balls tried when an orbit is too tall

ACC = 64                 # bits of absolute accuracy for chain centres
IMAGE_SAFETY = 0.97      # applied to sampled inscribed radii
FLOAT_SAFE_MAG = 20      # below 2^20 the float64 core is accurate enough
EXP_CAP = 700.0          # exp() of larger heights overflows float64
ESCAPE_KMAX = 100
ESCAPE_BAILOUT = 1e6


def _image_samples(d: int) -> int:
    return 256 if d == 2 else 1024


class StepFailure(RuntimeError):
    """A chain step could not produce an admissible ball."""


class AlgorithmFailure(RuntimeError):
    def __init__(self, msg, chain=None):
        super().__init__(msg)
        self.chain = chain


class NumericalError(RuntimeError):
    def __init__(self, msg, chain=None):
        super().__init__(msg)
        self.chain = chain


class Escape(str, enum.Enum):
    ESCAPED_HEURISTIC = "EscapedHeuristic"
    BOUNDED_SO_FAR = "BoundedSoFar"


@dataclass(frozen=True)
class CertifiedBall:
    """Ball ``B(center, radius)`` certified to lie in ``domain``.

    With ``clipped`` set the set is ``B(center, radius) cap domain`` instead;
    that is how the tail sets ``B(0, alpha^k) cap int T_0`` are stored.
    ``center`` is a tuple of mpfr values; ``point`` is its float64 rounding.
    """

    center: tuple
    radius: float
    domain: BranchSpec
    clipped: bool = False
    phase: str = ""

    def __post_init__(self):
        object.__setattr__(self, "center", P.as_point(self.center))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def point(self) -> np.ndarray:
        return P.to_float(self.center)

    @property
    def height(self) -> float:
        return abs(float(self.center[-1]))

    @property
    def moderate(self) -> bool:
        """Small enough for the float64 core to resolve the ball."""
        return P.vmag(self.center) < FLOAT_SAFE_MAG and self.radius < 2.0**40

    def slack(self) -> float:
        if self.clipped:
            return math.inf
        return P.dist_to_branch_boundary(self.center, self.domain) - self.radius


@dataclass
class BallChain:
    balls: List[CertifiedBall]
    steps: List[BranchSpec]
    retries: int = 0

    def __post_init__(self):
        if len(self.steps) != len(self.balls) - 1:
            raise ValueError("a chain needs exactly one step per consecutive pair of balls")

    @classmethod
    def from_balls(cls, balls, retries: int = 0) -> "BallChain":
        balls = list(balls)
        return cls(balls, [b.domain for b in balls[:-1]], retries)

    @property
    def period(self) -> int:
        return len(self.steps)

    def pull_back(self, y, start: Optional[int] = None, stop: int = 0, p: MapParams = None,
                  acc: Union[int, Callable[[int], int]] = ACC, trace: bool = False):
        """Apply the recorded branches ``steps[start-1], ..., steps[stop]`` to ``y``.

        ``acc`` is the absolute accuracy in bits, or a function of the level
        being produced.  With ``trace`` the list of all intermediate points
        (level ``start`` first) is returned.
        """
        x = P.as_point(y)
        start = len(self.steps) if start is None else start
        path = [x]
        try:
            for j in range(start - 1, stop - 1, -1):
                a = acc(j) if callable(acc) else acc
                x = P.branch_inverse(x, self.steps[j], p, a)
                path.append(x)
        except P.PrecisionLimitError as exc:
            raise NumericalError(str(exc), self) from exc
        return path if trace else x

    def pullback_margins(self, p: MapParams, n: int = PULLBACK_SAMPLES) -> np.ndarray:
        """Per step, the worst containment margin of pulled-back boundary samples.

        Non-negative entries (up to ``INEQ_SLACK``) mean every pulled-back
        sample of ``balls[j+1]`` landed in ``balls[j]``.
        """
        return np.array([_step_margin(self.balls[j], self.balls[j + 1], br, p, n)
                         for j, br in enumerate(self.steps)])

    def verify(self, p: MapParams, n: int = PULLBACK_SAMPLES) -> bool:
        return bool(np.all(self.pullback_margins(p, n) >= -INEQ_SLACK))


@dataclass
class PeriodicPointResult:
    """Periodic point of the chain, located in ``chain.balls[start_level]``.

    ``point`` is the float64 rounding of ``exact``; both residuals are
    evaluated at ``exact`` with enough precision to resolve the orbit.
    """

    point: np.ndarray
    period: int
    backward_residual: float
    forward_residual: float
    chain: BallChain
    contraction_ratio: float = float("nan")
    start_level: int = 0
    exact: tuple = ()
    orbit_heights: list = field(default_factory=list)


@dataclass
class BlowupCertificate:
    """``S^k(U) supset B(0, R)``; ``samples`` holds ``(y, x, error)`` triples."""

    k: int
    chain: BallChain
    samples: list
    U_center: np.ndarray = None
    U_radius: float = 0.0
    R: float = 0.0
    start_level: int = 0

    @property
    def max_error(self) -> float:
        return max(err for _, _, err in self.samples)


@dataclass
class ProbeResult:
    periodic: PeriodicPointResult
    escape_proxy: Optional[np.ndarray]
    seed_ball: CertifiedBall = None
    pre_steps: list = field(default_factory=list)


class Orbit(NamedTuple):
    points: np.ndarray
    overflow: bool


# ---------------------------------------------------------------------------
# geometry helpers


def _project_into(X, domain: BranchSpec):
    """Nearest points of the (closed) branch domain; identity inside."""
    X = X.copy()
    beams = domain.half_beams()
    r = np.asarray(beams[0].r, dtype=float)
    lo, hi = 2 * r - 1, 2 * r + 1
    if domain.kind is BranchKind.ADJACENT_PAIR and beams[0].sign == beams[1].sign:
        r2 = np.asarray(beams[1].r, dtype=float)
        lo, hi = np.minimum(lo, 2 * r2 - 1), np.maximum(hi, 2 * r2 + 1)
    X[:, :-1] = np.clip(X[:, :-1], lo, hi)
    vertical = domain.kind is BranchKind.HALF_BEAM or (
        domain.kind is BranchKind.ADJACENT_PAIR and beams[0].sign == beams[1].sign
    )
    if vertical:
        X[:, -1] = beams[0].sign * np.maximum(beams[0].sign * X[:, -1], 0.0)
    return X


def _closure_samples(ball: CertifiedBall, dirs):
    Y = ball.point + ball.radius * dirs
    if ball.clipped:
        Y = _project_into(Y, ball.domain)
    return Y


def _containment_margin(X, ball: CertifiedBall):
    tol_scale = max(1.0, ball.radius)
    margin = (ball.radius - np.linalg.norm(X - ball.point, axis=1)) / tol_scale
    if ball.clipped:
        inside = np.linalg.norm(X - _project_into(X, ball.domain), axis=1)
        margin = np.minimum(margin, -inside)
    return margin


def _step_margin(cur: CertifiedBall, nxt: CertifiedBall, br: BranchSpec, p: MapParams,
                 n: int = PULLBACK_SAMPLES) -> float:
    """Worst margin of ``n`` boundary samples of ``nxt`` pulled back into ``cur``."""
    dirs = sphere_points(n, p.d)
    if cur.moderate and nxt.moderate:
        Y = _closure_samples(nxt, dirs)
        try:
            X = _branch_inverse(Y, br, p)
        except BranchDomainError:
            return -math.inf
        return float(np.min(_containment_margin(X, cur)))
    if nxt.clipped or cur.clipped:
        raise DomainError("clipped balls are expected near the origin")
    worst = math.inf
    scale = max(1.0, cur.radius)
    try:
        for z in dirs:
            y = P.add(nxt.center, P.as_point(nxt.radius * z), ACC)
            x = P.branch_inverse(y, br, p, ACC)
            worst = min(worst, (cur.radius - P.dist(x, cur.center, ACC)) / scale)
    except BranchDomainError:
        return -math.inf
    except P.PrecisionLimitError as exc:
        raise NumericalError(str(exc)) from exc
    return worst


def _checked(cur: CertifiedBall, nxt: CertifiedBall, p: MapParams, terminal: bool = False) -> CertifiedBall:
    """``nxt`` after checking its domain and the pullback into ``cur``.

    A ``terminal`` ball is never pulled back through, so its domain is not checked.
    """
    if not terminal and nxt.slack() < -INEQ_SLACK:
        raise StepFailure(f"ball leaves its domain by {-nxt.slack():.3g}")
    margin = _step_margin(cur, nxt, cur.domain, p)
    if margin < -INEQ_SLACK:
        raise StepFailure(f"pulled-back samples miss the previous ball by {-margin:.3g}")
    return nxt


def _s_hp(x, p: MapParams, acc: int = ACC) -> tuple:
    try:
        return P.s_eval(x, p, acc)
    except P.PrecisionLimitError as exc:
        raise NumericalError(f"orbit leaves the representable range: {exc}") from exc


def _lemma_radius(b: CertifiedBall, p: MapParams, sharp: bool) -> float:
    """``alpha t``, times ``e^(h_min - 1)`` with ``sharp`` (``l(DS) >= alpha e^(h-1)``)."""
    rho = p.alpha * b.radius
    if sharp and not b.clipped:
        lift = b.height - b.radius - 1.0
        if lift > EXP_CAP:
            return math.inf
        rho *= math.exp(max(lift, 0.0))
    return rho


def _sampled_radius(b: CertifiedBall, y, p: MapParams) -> float:
    """Inscribed radius of ``S(B)`` around ``y`` measured on boundary samples.

    S is a homeomorphism of each branch domain onto its image, so the image
    of the ball contains ``B(y, dist(y, S(boundary)))``.
    """
    if b.clipped or not b.moderate or b.height + b.radius > EXP_CAP:
        return 0.0
    Z = sphere_points(_image_samples(p.d), p.d)
    with np.errstate(over="ignore", invalid="ignore"):
        Y = _s_eval(b.point + b.radius * Z, p)
    yf = P.to_float(y)
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(yf))):
        return 0.0
    return IMAGE_SAFETY * float(np.min(np.linalg.norm(Y - yf, axis=1)))


def _image(b: CertifiedBall, p: MapParams, sharp: bool):
    y = _s_hp(b.center, p)
    rho = _lemma_radius(b, p, sharp)
    if sharp:
        rho = max(rho, _sampled_radius(b, y, p))
    return y, rho


def _half_beam_fit(center, radius: float, p: MapParams) -> Optional[BranchSpec]:
    br = BranchSpec.half_beam(P.halfbeam_of(center, p))
    return br if P.dist_to_branch_boundary(center, br) >= radius else None


def _square_ball(x, delta: float, p: MapParams, phase: str) -> CertifiedBall:
    """Inscribed ball of the (d-1)-square in H_0 with a vertex at ``x``.

    The square has side ``2 delta <= 1`` and is oriented towards the centre
    of the beam containing ``x``, so the ball lies in that beam.
    """
    x = tuple(x[:-1]) + P.as_point([0.0])
    r = P.halfbeam_of(x, p).r
    off = P.local_offsets(x, r)
    shift = [delta if o <= 0 else -delta for o in off] + [0.0]
    center = P.add(x, P.as_point(shift), ACC)
    return CertifiedBall(center, delta, BranchSpec.full_beam(r), phase=phase)


def _as_ball(U, p: MapParams, phase: str = "seed") -> CertifiedBall:
    """Accept a CertifiedBall or a ``(center, radius)`` pair inside ``int T_0``."""
    if isinstance(U, CertifiedBall):
        return U
    c, t = U
    return CertifiedBall(c, float(t), BranchSpec.half_beam(BeamIndex.origin(p.d)), phase=phase)


# ---------------------------------------------------------------------------
# orbits


def orbit(x, kmax: int, bailout: float, p: MapParams) -> Orbit:
    """``x, S(x), ...`` up to ``kmax`` steps or the first point beyond ``bailout``."""
    if kmax < 1:
        raise DomainError("kmax must be >= 1")
    pts = [np.asarray(x, dtype=float)]
    overflow = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(kmax):
            if np.linalg.norm(pts[-1]) > bailout:
                break
            nxt = _s_eval(pts[-1][None, :], p)[0]
            if not np.all(np.isfinite(nxt)):
                overflow = True
                break
            pts.append(nxt)
    return Orbit(np.array(pts), overflow)


def escape_times(X, kmax: int, bailout: float, p: MapParams) -> np.ndarray:
    """First k with ``|S^k(x)| > bailout`` per row, or ``kmax + 1`` if none.

    A non-finite iterate counts as escaped at that step.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.full(X.shape[0], kmax + 1, dtype=np.int64)
    active = np.arange(X.shape[0])
    cur = X.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(kmax + 1):
            nrm = np.linalg.norm(cur, axis=1)
            gone = ~(nrm <= bailout)
            out[active[gone]] = k
            active, cur = active[~gone], cur[~gone]
            if active.size == 0 or k == kmax:
                break
            cur = _s_eval(cur, p)
    return out


def classify_escape(x, kmax: int, bailout: float, p: MapParams) -> Escape:
    """Heuristic proxy for membership in the escaping set; not a decision procedure."""
    if bailout < 10 * p.lam:
        raise DomainError("bailout must be at least 10 * lambda")
    k = escape_times(np.asarray(x, dtype=float)[None, :], kmax, bailout, p)[0]
    return Escape.ESCAPED_HEURISTIC if k <= kmax else Escape.BOUNDED_SO_FAR


# ---------------------------------------------------------------------------
# chain steps


def propagate_ball(b: CertifiedBall, p: MapParams, sharp: bool = False) -> CertifiedBall:
    """A ball centred at ``S(c)`` inside ``S(B(c, t))``, tagged with a half-beam or beam.

    The radius is ``alpha t``; with ``sharp`` it is the larger of the
    height-aware lemma radius and the sampled inscribed radius.
    """
    y, rho = _image(b, p, sharp)
    br = _half_beam_fit(y, rho, p)
    if br is None:
        full = BranchSpec.full_beam(P.halfbeam_of(y, p).r)
        if P.dist_to_branch_boundary(y, full) >= rho:
            br = full
    if br is None:
        raise StepFailure("image ball does not fit in a half-beam or beam")
    return CertifiedBall(y, rho, br, phase="A")


def cross_face_step(b: CertifiedBall, p: MapParams, sharp: bool = False, image=None) -> CertifiedBall:
    """Ball centred on a crossed face of the half-beam of ``S(c)``.

    The most deeply crossed face is tried first.  The centre is the
    projection of ``S(c)`` onto the face, nudged toward the face centre by
    fractions of the overshoot; the candidate with the largest radius wins.
    """
    d = p.d
    y, rho = image if image is not None else _image(b, p, sharp)
    beam = P.halfbeam_of(y, p)
    if P.dist_to_branch_boundary(y, BranchSpec.half_beam(beam)) >= rho:
        raise DomainError("image ball lies inside one half-beam")
    off = P.local_offsets(y, beam.r)
    yd = float(y[-1])  # may be inf; only used when small or for its sign
    faces = [(1.0 - abs(o), k, 1 if o >= 0 else -1) for k, o in enumerate(off)]
    faces.append((beam.sign * yd, d - 1, 0))
    faces.sort()
    best = None
    for slack, k, side in faces:
        if slack >= rho:
            continue
        if k < d - 1:
            r2 = list(beam.r)
            r2[k] += side
            pair = BranchSpec.pair(beam, BeamIndex(r2, beam.sign))
        else:
            pair = BranchSpec.pair(beam, BeamIndex(beam.r, -beam.sign))
        excess = rho - max(slack, 0.0)
        for frac in NUDGE_SCHEDULE:
            o = list(off)
            for j in range(d - 1):
                if j == k:
                    o[j] = float(side)
                else:
                    o[j] -= math.copysign(min(frac * excess, abs(o[j])), o[j])
            if k == d - 1:
                cd, dz = 0.0, -yd
            else:
                dz = beam.sign * frac * excess
                with P.working(P.mag(y[-1]) + P.MIN_PREC):
                    cd = y[-1] + dz
            gap = math.hypot(*[a - b_ for a, b_ in zip(o, off)], dz)
            c = P.from_local(beam.r, o, cd)
            t = min(rho - gap, P.dist_to_branch_boundary(c, pair), 1.0)
            if best is None or t > best[0]:
                best = (t, c, pair)
        if best[0] >= 1e-9:
            break
    if best is None or not best[0] >= 1e-9:
        raise StepFailure("no face ball with positive radius")
    t, c, pair = best
    return CertifiedBall(c, t * (1 - 1e-6), pair, phase="B")


def h0_recenter(b: CertifiedBall, p: MapParams, sharp: bool = False) -> CertifiedBall:
    """From a pair ball centred on a face, a square-inscribed ball on ``H_0``."""
    if b.domain.kind is not BranchKind.ADJACENT_PAIR:
        raise DomainError("h0_recenter needs a ball with an AdjacentPair domain")
    x = _s_hp(b.center, p)
    rho = _lemma_radius(b, p, sharp)
    delta = min(rho / (2.0 * math.sqrt(p.d - 1)), 0.5)
    return _square_ball(x, delta, p, "B")


def grow_on_h0(b: CertifiedBall, p: MapParams) -> CertifiedBall:
    """``H_0``-centred ball of radius ``min(2t, 1/2)`` inside ``S(b)``."""
    if abs(float(b.center[-1])) > ALG_TOL or b.domain.kind is not BranchKind.FULL_BEAM:
        raise DomainError("grow_on_h0 needs an H_0-centred ball in a full beam")
    return _square_ball(_s_hp(b.center, p), min(2.0 * b.radius, 0.5), p, "C")


def locate_zero_ball(b: CertifiedBall, p: MapParams) -> CertifiedBall:
    """``B(z, 1) subset S(b)`` for a ball of radius 1/2 on ``H_0``; ``z`` is a zero of S."""
    if abs(b.radius - 0.5) > ALG_TOL or abs(float(b.center[-1])) > ALG_TOL:
        raise DomainError("locate_zero_ball needs an H_0-centred ball of radius 1/2")
    y = _s_hp(b.center, p)
    m = P.halfbeam_of(y, p).r
    z = tuple(2 * k for k in m) + (0,)
    return CertifiedBall(z, 1.0, BranchSpec.full_beam(m), phase="D")


def tail_chain(U0: CertifiedBall, m: int, p: MapParams):
    """Balls ``B(0, alpha^(j-m-1)) cap int T_0`` for ``j = m+2 .. N``.

    N is the first index whose ball contains ``closure(U0)``.
    """
    t0 = BranchSpec.half_beam(BeamIndex.origin(p.d))
    if P.dist_to_branch_boundary(U0.center, t0) - U0.radius < INEQ_SLACK:
        raise DomainError("U0 must lie strictly inside T_0")
    reach = float(P.norm(U0.center)) + U0.radius
    zero = (0.0,) * p.d
    balls = []
    j = m + 2
    while True:
        R = p.alpha ** (j - m - 1)
        balls.append(CertifiedBall(zero, R, t0, clipped=True, phase="E"))
        if R > reach + INEQ_SLACK:
            return j, balls
        j += 1


# ---------------------------------------------------------------------------
# chain building


def _build_to_zero(prefix: Sequence[CertifiedBall], p: MapParams, sharp: bool = True):
    """Extend ``prefix`` through phases A-D; returns ``(balls, m, retries)``.

    ``balls[m]`` is the last radius-1/2 ball on ``H_0`` and ``balls[m+1]``
    the ball around a zero of S.  A failing face step halves the last ball
    and resumes phase A from it.
    """
    balls = list(prefix)
    retries = 0
    while True:
        try:
            while True:
                cur = balls[-1]
                y, rho = _image(cur, p, sharp)
                br = _half_beam_fit(y, rho, p)
                if br is None:
                    break
                if len(balls) >= PHASE_A_LIMIT:
                    raise AlgorithmFailure("phase A did not reach a face", BallChain.from_balls(balls))
                balls.append(_checked(cur, CertifiedBall(y, rho, br, phase="A"), p))
            balls.append(_checked(balls[-1], cross_face_step(balls[-1], p, sharp, (y, rho)), p))
            break
        except StepFailure as exc:
            retries += 1
            if retries > MAX_RETRIES:
                raise AlgorithmFailure(f"step failed after {MAX_RETRIES} retries: {exc}",
                                       BallChain.from_balls(balls, retries)) from exc
            balls[-1] = replace(balls[-1], radius=balls[-1].radius / 2)
    try:
        balls.append(_checked(balls[-1], h0_recenter(balls[-1], p, sharp), p))
        while balls[-1].radius < 0.5:
            balls.append(_checked(balls[-1], grow_on_h0(balls[-1], p), p))
        m = len(balls) - 1
        balls.append(_checked(balls[-1], locate_zero_ball(balls[-1], p), p))
    except StepFailure as exc:
        raise AlgorithmFailure(str(exc), BallChain.from_balls(balls, retries)) from exc
    return balls, m, retries


def build_chain(prefix: Sequence[CertifiedBall], p: MapParams, sharp: bool = True) -> BallChain:
    """Closed chain from ``prefix`` (starting in ``int T_0``) back over ``prefix[0]``."""
    balls, m, retries = _build_to_zero(prefix, p, sharp)
    _, tail = tail_chain(balls[0], m, p)
    for b in tail:
        try:
            balls.append(_checked(balls[-1], b, p))
        except StepFailure as exc:
            raise AlgorithmFailure(str(exc), BallChain.from_balls(balls, retries)) from exc
    return BallChain.from_balls(balls, retries)


# ---------------------------------------------------------------------------
# periodic points


def tol_fwd(N: int, p: MapParams) -> float:
    """Forward-residual tolerance ``1e-10 (2 lambda Lip)^N``."""
    return 1e-10 * (2.0 * p.lam * p.lip_est) ** N


def _log2_tol_fwd(N: int, p: MapParams) -> float:
    return math.log2(1e-10) + N * math.log2(2.0 * p.lam * p.lip_est)


def _cycle(chain: BallChain, s: int, p: MapParams, acc=ACC, trace: bool = False):
    """Composed inverse around the cycle, from level ``s`` back to level ``s``."""
    N = chain.period

    def f(x):
        first = chain.pull_back(x, start=s, stop=0, p=p, acc=acc, trace=True)
        second = chain.pull_back(first[-1], start=N, stop=s, p=p, acc=acc, trace=True)
        if not trace:
            return second[-1]
        pts = {s - i: q for i, q in enumerate(first)}
        pts.update({N - i: q for i, q in enumerate(second)})
        pts.pop(N, None)
        return second[-1], pts

    return f


def _converged(a, b, bits: float) -> bool:
    diff = P.sub(a, b, int(bits) + 8)
    return all(not v for v in diff) or P.vmag(diff) < -bits


def _refine(chain: BallChain, s: int, x, p: MapParams, tol_log2: float):
    """High-precision fixed point of the cycle map and its forward residual.

    The forward orbit of an error at level ``s`` grows by at most
    ``2^amp`` per step, so the point is computed to ``sum(amp) - tol_log2``
    bits.  Pulling back shrinks errors by ``2^low`` per step; each level of
    the backward pass only carries the accuracy it passes on.
    """
    N = chain.period
    _, pts = _cycle(chain, s, p, ACC, trace=True)(x)
    order = [(s + i) % N for i in range(N)]
    heights = {lvl: abs(float(q[-1])) for lvl, q in pts.items()}
    amp = [P.amplification_bits(heights[lvl], p) for lvl in order]
    low = {lvl: P.contraction_bits(heights[lvl], p) for lvl in range(N)}
    acc_q = max(ACC, math.ceil(sum(amp) - tol_log2 + 16))

    def remaining(level):
        if level >= s:
            return sum(low[i] for i in range(s, level))
        return sum(low[i] for i in range(0, level)) + sum(low[i] for i in range(s, N))

    schedule = {lvl: max(ACC, math.ceil(acc_q - remaining(lvl))) for lvl in range(N)}
    f = _cycle(chain, s, p, acc=lambda lvl: schedule[lvl])
    q = x
    for _ in range(16):
        nxt = f(q)
        done = _converged(nxt, q, acc_q)
        q = nxt
        if done:
            break
    else:
        raise NumericalError("high-precision refinement did not converge", chain)
    y = q
    cum = 0.0
    for a in amp:
        cum += a
        y = _s_hp(y, p, max(ACC, math.ceil(acc_q - cum)))
    fwd = float(P.norm(P.sub(y, q, ACC)))
    return q, fwd, [heights[lvl] for lvl in order]


def _contraction_ratio(chain: BallChain, s: int, p: MapParams, pairs: int = 10) -> float:
    """Largest observed ``|f(a) - f(b)| / |a - b|`` for the cycle map on ``balls[s]``."""
    ball = chain.balls[s]
    f = _cycle(chain, s, p)
    pts = ball_points(2 * pairs, p.d, ball.radius, offset=7)
    worst = 0.0
    for i in range(pairs):
        a = P.add(ball.center, P.as_point(pts[2 * i]), ACC)
        b = P.add(ball.center, P.as_point(pts[2 * i + 1]), ACC)
        den = P.dist(a, b, ACC)
        if den > 0:
            worst = max(worst, P.dist(f(a), f(b), ACC) / den)
    return worst


def _periodic_from_chain(chain: BallChain, s: int, p: MapParams, tol: float) -> PeriodicPointResult:
    f = _cycle(chain, s, p)
    x = chain.balls[s].center
    for _ in range(MAX_CONTRACTION_ITERS):
        nxt = f(x)
        step = P.dist(nxt, x, ACC)
        x = nxt
        if step < tol:
            break
    else:
        raise NumericalError("contraction did not converge", chain)
    exact, fwd, heights = _refine(chain, s, x, p, _log2_tol_fwd(chain.period, p))
    point = P.to_float(exact)
    back = P.dist(f(P.as_point(point)), P.as_point(point), ACC)
    return PeriodicPointResult(
        point=point,
        period=chain.period,
        backward_residual=back,
        forward_residual=fwd,
        chain=chain,
        contraction_ratio=_contraction_ratio(chain, s, p),
        start_level=s,
        exact=exact,
        orbit_heights=heights,
    )


def find_periodic(U0, p: MapParams, tol: float = 1e-13, sharp: bool = True) -> PeriodicPointResult:
    """Periodic point of S in the ball ``U0`` (which must lie in ``int T_0``).

    ``sharp=False`` grows phase-A radii by exactly ``alpha`` per step.
    """
    U0 = _as_ball(U0, p)
    t0 = BranchSpec.half_beam(BeamIndex.origin(p.d))
    if U0.domain != t0 or P.dist_to_branch_boundary(U0.center, t0) - U0.radius < INEQ_SLACK:
        raise DomainError("U0 must lie strictly inside T_0")
    chain = build_chain([U0], p, sharp)
    return _periodic_from_chain(chain, 0, p, tol)


# ---------------------------------------------------------------------------
# arbitrary target balls


def _target_subball(center, radius: float, p: MapParams):
    """Sub-ball of ``B(center, radius)`` inside one half-beam, away from ``H_0``.

    Coordinates too close to a vertical face are moved in by up to
    ``radius / 3`` and a centre too close to ``H_0`` is lifted to height
    ``radius / 2``; the sub-ball keeps twice its radius of clearance above
    ``H_0``.
    """
    c = np.asarray(center, dtype=float)
    beam = P.halfbeam_of(P.as_point(c), p)
    c1 = c.copy()
    for k, o in enumerate(P.local_offsets(P.as_point(c), beam.r)):
        if abs(o) > 1.0 - radius / 3:
            c1[k] = 2 * beam.r[k] + math.copysign(1.0 - radius / 3, o)
    if abs(c1[-1]) < radius / 2:
        c1[-1] = beam.sign * radius / 2
    hb = BranchSpec.half_beam(beam)
    t1 = min(radius - float(np.linalg.norm(c1 - c)),
             0.95 * P.dist_to_branch_boundary(P.as_point(c1), hb),
             abs(c1[-1]) / 2) * 0.999
    if not t1 > 0:
        raise DomainError("no admissible sub-ball in the target ball")
    return c1, t1, beam


def _outer_beam(beam: BeamIndex, d: int) -> BeamIndex:
    """A half-beam next to ``T_0`` whose image half-space contains ``beam``."""
    if beam.sign > 0:
        return BeamIndex.origin(d)
    return BeamIndex((1,) + (0,) * (d - 2), 1)


def _preimage_ball(target: CertifiedBall, br: BranchSpec, p: MapParams, phase: str) -> CertifiedBall:
    """Ball around the branch preimage of ``target``'s centre containing its preimage.

    The radius is the sampled spread of pulled-back boundary points (5%
    inflated), capped by the rigorous ``t / alpha``.
    """
    v = P.branch_inverse(target.center, br, p, ACC)
    Z = sphere_points(_image_samples(p.d), p.d)
    X = _branch_inverse(target.point + target.radius * Z, br, p)
    spread = float(np.max(np.linalg.norm(X - P.to_float(v), axis=1)))
    rad = min(target.radius / p.alpha, 1.05 * spread)
    return CertifiedBall(v, rad, br, phase=phase)


def target_prefix(center, radius: float, p: MapParams, attempts: int = 30) -> List[CertifiedBall]:
    """``[U_0, U_1, U_2]`` with ``U_0 subset int T_0`` and ``U_2 subset B(center, radius)``.

    ``U_{j+1} subset S(U_j)``: the two pre-steps go through ``T_0`` and a
    half-beam next to it, so the chain built from this prefix starts in
    ``T_0`` and reaches the target ball in two steps.
    """
    c1, t1, beam = _target_subball(center, radius, p)
    outer = BranchSpec.half_beam(_outer_beam(beam, p.d))
    t0 = BranchSpec.half_beam(BeamIndex.origin(p.d))
    for _ in range(attempts):
        U2 = CertifiedBall(c1, t1, BranchSpec.half_beam(beam), phase="target")
        try:
            U1 = _preimage_ball(U2, outer, p, "pre")
            if U1.slack() > INEQ_SLACK:
                U0 = _preimage_ball(U1, t0, p, "seed")
                if U0.slack() > INEQ_SLACK:
                    _checked(U1, U2, p)
                    _checked(U0, U1, p)
                    return [U0, U1, U2]
        except (StepFailure, BranchDomainError):
            pass
        t1 /= 2
    raise AlgorithmFailure("could not fit the pre-step balls")


def _sub_targets(center, radius: float, d: int):
    """The ball itself, then half-size sub-balls around it in quasi-random directions."""
    c = np.asarray(center, dtype=float)
    yield c, radius
    for v in sphere_points(SUBTARGET_TRIES, d, offset=3):
        yield c + 0.5 * radius * v, 0.5 * radius


def _retargeted(center, radius: float, p: MapParams, build: Callable):
    """``build(c, r)`` on the first sub-ball whose orbit stays representable.

    Some targets send the continuation of the chain to heights whose images
    need more precision than the backend allows; any sub-ball of the target
    serves equally well, so a few alternatives are tried before giving up.
    """
    last = None
    for c, r in _sub_targets(center, radius, p.d):
        try:
            return build(c, r)
        except NumericalError as exc:
            last = exc
    raise last


def probe_density(center, radius: float, budget: int, p: MapParams, kmax: int = ESCAPE_KMAX,
                  bailout: float = ESCAPE_BAILOUT, tol: float = 1e-13) -> ProbeResult:
    """Periodic point and (heuristic) escaping point in ``B(center, radius)``.

    The periodic point lies in ``U_2``, a sub-ball of the target reached in
    two steps from ``U_0 subset int T_0``.  The escape proxy is the first of
    ``budget`` quasi-random points of the ball whose orbit passes
    ``bailout`` within ``kmax`` steps.
    """
    if radius <= 0:
        raise DomainError("radius must be positive")

    def build(c, r):
        chain = build_chain(target_prefix(c, r, p), p)
        return chain, _periodic_from_chain(chain, 2, p, tol)

    chain, periodic = _retargeted(center, radius, p, build)
    escape = None
    if budget > 0:
        X = np.asarray(center, dtype=float) + ball_points(budget, p.d, radius)
        k = escape_times(X, kmax, bailout, p)
        hit = np.flatnonzero(k <= kmax)
        if hit.size:
            escape = X[hit[0]]
    return ProbeResult(periodic, escape, chain.balls[0], chain.balls[:3])


# ---------------------------------------------------------------------------
# blow-up


def _direct_seed(center, radius: float, p: MapParams) -> Optional[CertifiedBall]:
    """Sub-ball of ``B(center, radius)`` in ``int T_0`` with the same centre, if any."""
    t0 = BranchSpec.half_beam(BeamIndex.origin(p.d))
    c = P.as_point(center)
    slack = P.dist_to_branch_boundary(c, t0)
    if slack <= 1e-6:
        return None
    return CertifiedBall(c, min(radius, 0.5 * slack), t0, phase="seed")


def _verify_sample(chain: BallChain, start: int, y, p: MapParams, err_bits: float = 40.0):
    """Pull ``y`` back to level ``start`` and push it forward again, in high precision."""
    K = chain.period
    path = chain.pull_back(y, start=K, stop=start, p=p, trace=True)
    pts = {K - i: q for i, q in enumerate(path)}
    levels = range(start, K)
    amp = [P.amplification_bits(abs(float(pts[lvl][-1])), p) for lvl in levels]
    low = {lvl: P.contraction_bits(abs(float(pts[lvl][-1])), p) for lvl in levels}
    acc_x = max(ACC, math.ceil(sum(amp) + err_bits))
    sched = {lvl: max(ACC, math.ceil(acc_x - sum(low[i] for i in range(start, lvl))))
             for lvl in range(start, K + 1)}
    x = chain.pull_back(y, start=K, stop=start, p=p, acc=lambda lvl: sched[lvl])
    z = x
    cum = 0.0
    for a in amp:
        cum += a
        z = _s_hp(z, p, max(ACC, math.ceil(acc_x - cum)))
    err = P.dist(z, P.as_point(y), ACC) / max(1.0, float(np.linalg.norm(y)))
    return x, err


def certify_blowup(center, radius: float, R: float, p: MapParams, n_samples: int = 100) -> BlowupCertificate:
    """k and a chain with ``S^k(B(center, radius)) supset B(0, R)``, checked on samples.

    If the ball meets ``int T_0`` around its centre the chain starts there;
    otherwise it starts from the pre-step prefix of a sub-ball of the target
    and k counts steps from that sub-ball.
    """
    if radius <= 0 or R <= 0:
        raise DomainError("radius and R must be positive")
    seed = _direct_seed(center, radius, p)
    if seed is not None:
        chain, start = _blowup_chain([seed], R, p), 0
    else:
        chain, start = _cheapest_blowup_chain(center, radius, R, p), 2
    samples = []
    for y in ball_points(n_samples, p.d, R):
        x, err = _verify_sample(chain, start, y, p)
        samples.append((y, P.to_float(x), err))
    return BlowupCertificate(
        k=chain.period - start,
        chain=chain,
        samples=samples,
        U_center=np.asarray(center, dtype=float),
        U_radius=float(radius),
        R=float(R),
        start_level=start,
    )


def _verification_bits(chain: BallChain, p: MapParams) -> float:
    """Precision the pullback checks need, from the heights of the chain centres."""
    return sum(P.amplification_bits(abs(float(b.center[-1])), p) for b in chain.balls)


def _cheapest_blowup_chain(center, radius: float, R: float, p: MapParams) -> BallChain:
    """Blow-up chain from the sub-ball of the target that is cheapest to verify.

    Chains are cheap to build, while pulling samples back through a chain
    with a tall orbit can take minutes, so every candidate sub-ball is built
    and the one needing the least precision wins.
    """
    best, cost, last = None, math.inf, None
    for c, r in _sub_targets(center, radius, p.d):
        try:
            chain = _blowup_chain(target_prefix(c, r, p), R, p)
        except NumericalError as exc:
            last = exc
            continue
        bits = _verification_bits(chain, p)
        if best is None or bits < cost:
            best, cost = chain, bits
    if best is None:
        raise last
    return best


def _blowup_chain(prefix, R: float, p: MapParams) -> BallChain:
    balls, m, retries = _build_to_zero(prefix, p)
    beam0 = BranchSpec.full_beam((0,) * (p.d - 1))
    zero = (0.0,) * p.d
    i = 0
    try:
        while True:
            Rk = p.alpha ** (1 + i)
            last = Rk >= R
            nxt = CertifiedBall(zero, Rk, beam0, clipped=not last, phase="R")
            balls.append(_checked(balls[-1], nxt, p, terminal=last))
            if last:
                break
            i += 1
    except StepFailure as exc:
        raise AlgorithmFailure(str(exc), BallChain.from_balls(balls, retries)) from exc
    return BallChain.from_balls(balls, retries)
