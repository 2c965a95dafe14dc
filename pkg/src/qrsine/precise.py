"""Arbitrary-precision scalar evaluation of S and its inverse branches.

Orbits through a ball high above ``H_0`` pass through points of norm
``exp(10^4)`` and more, far outside float64.  Here a point is a tuple of
gmpy2 ``mpfr`` values and every routine is told how many bits of *absolute*
accuracy its result needs (``acc``).  The working precision is then derived
from the magnitude of the result and, for forward evaluation, from the local
error amplification of S.

Folding uses the exact integer ratio of each coordinate, so the lattice index
of a huge point is always exact.  The inverse branches do their
transcendental work at the (small) precision of the local coordinates and
only the final lattice offset is added at high precision.
"""

from __future__ import annotations

import math
from typing import Sequence

import gmpy2
import numpy as np
from gmpy2 import mpfr

from .core import ALG_TOL, BeamIndex, BranchDomainError, BranchKind, BranchSpec, DomainError, MapParams, TieRule

GUARD = 24
MIN_PREC = 64
MAX_PREC = 1 << 21
LOG2E = 1.0 / math.log(2.0)


class PrecisionLimitError(ArithmeticError):
    """The requested accuracy needs more bits than ``MAX_PREC``."""


def working(bits) -> gmpy2.context:
    """Context manager setting the mpfr precision to ``bits`` (at least 64)."""
    bits = max(int(math.ceil(bits)), MIN_PREC)
    if bits > MAX_PREC:
        raise PrecisionLimitError(f"{bits} bits requested, limit is {MAX_PREC}")
    return gmpy2.context(gmpy2.get_context(), precision=bits)


def mag(v) -> int:
    """Exponent ``e`` with ``|v| < 2^e`` (0 for zero)."""
    return int(gmpy2.get_exp(v)) if v else 0


def vmag(x: Sequence) -> int:
    return max(mag(v) for v in x)


def as_point(x) -> tuple:
    """Exact conversion of floats, ints or mpfr values to a tuple of mpfr."""
    out = []
    for v in x:
        if isinstance(v, (int, np.integer)):
            with working(max(int(v).bit_length(), 1) + 1):
                out.append(mpfr(int(v)))
        elif isinstance(v, type(mpfr(0))):
            out.append(v)
        else:
            v = float(v)
            if not math.isfinite(v):
                raise DomainError("non-finite input")
            with working(MIN_PREC):
                out.append(mpfr(v))
    return tuple(out)


def to_float(x: Sequence) -> np.ndarray:
    """Nearest float64 vector (``inf`` where the magnitude overflows)."""
    return np.array([float(v) for v in x])


def is_finite(x: Sequence) -> bool:
    return all(gmpy2.is_finite(v) for v in x)


def _bits(value_mag: int, acc: int) -> int:
    return max(value_mag, 1) + acc + GUARD


def sub(x, y, acc: int = 64) -> tuple:
    with working(_bits(max(vmag(x), vmag(y)), acc)):
        return tuple(a - b for a, b in zip(x, y))


def add(x, y, acc: int = 64) -> tuple:
    with working(_bits(max(vmag(x), vmag(y)) + 1, acc)):
        return tuple(a + b for a, b in zip(x, y))


def norm(x, rel: int = 64):
    with working(rel + GUARD):
        return gmpy2.sqrt(sum((v * v for v in x), mpfr(0)))


def dist(x, y, acc: int = 64) -> float:
    return float(norm(sub(x, y, acc)))


# ---------------------------------------------------------------------------
# folding


def _round_half(v, rule: TieRule) -> int:
    """Lattice index ``m`` of one coordinate: ``ceil(v/2 - 1/2)`` or ``floor(v/2 + 1/2)``."""
    n, den = v.as_integer_ratio()
    n, den = int(n), int(den)
    if rule is TieRule.TOWARD_EVEN_LOWER:
        return -((den - n) // (2 * den))
    return (n + den) // (2 * den)


def fold(x: Sequence, rule: TieRule, acc: int = 64):
    """``(m, u, h, parity)`` with exact integer ``m`` and ``u`` accurate to ``2^-acc``."""
    m = tuple(_round_half(v, rule) for v in x[:-1])
    u = []
    for v, mk in zip(x[:-1], m):
        n, den = v.as_integer_ratio()
        with working(acc + GUARD):
            w = mpfr(int(n) - 2 * mk * int(den)) / int(den)
            u.append(-w if mk % 2 else w)
    with working(x[-1].precision):
        h = abs(x[-1])
    parity = (sum(mk % 2 for mk in m) + (x[-1] < 0)) % 2
    return m, tuple(u), h, parity


# ---------------------------------------------------------------------------
# the fundamental half-beam map


def _meridian_fwd(r, h):
    if r + h > 1:
        p, q = 2 * r + h - 1, 1 - r
    else:
        p, q = r, h
    n = gmpy2.hypot(p, q)
    if not n:
        return mpfr(0), mpfr(0)
    scale = (p / 2 + q) / n
    return p * scale, q * scale


def _meridian_inv(a, b):
    g = a / 2 + b
    if not g:
        return mpfr(0), mpfr(0)
    scale = gmpy2.hypot(a, b) / g
    p, q = a * scale, b * scale
    if p + q > 1:
        r, h = 1 - q, p + 2 * q - 1
    else:
        r, h = p, q
    return min(max(r, mpfr(0)), mpfr(1)), min(max(h, mpfr(0)), mpfr(1))


def _f0(u, h):
    s = max(abs(v) for v in u)
    a, b = _meridian_fwd(s, min(h, mpfr(1)))
    n2 = gmpy2.sqrt(sum((v * v for v in u), mpfr(0)))
    k = a / n2 if n2 else mpfr(0)
    out = [v * k for v in u] + [b]
    if h > 1:
        g = gmpy2.exp(h - 1)
        out = [v * g for v in out]
    return out


def _f0_inv(w):
    wp, b = w[:-1], w[-1]
    nrm = gmpy2.sqrt(sum((v * v for v in w), mpfr(0)))
    if nrm <= 1:
        a = gmpy2.sqrt(sum((v * v for v in wp), mpfr(0)))
        s, h = _meridian_inv(a, b)
        top = max(abs(v) for v in wp)
    else:
        wp = [v / nrm for v in wp]
        bh = b / nrm
        a = gmpy2.sqrt(sum((v * v for v in wp), mpfr(0)))
        s = a / (2 * bh + a) if a else mpfr(0)
        h = 1 + gmpy2.log(nrm)
        top = max(abs(v) for v in wp)
    k = s / top if top else mpfr(0)
    return [v * k for v in wp], h


def amplification_bits(h: float, p: MapParams) -> float:
    """log2 of an upper bound for ``|DS|`` at height ``h``."""
    return math.log2(p.lam * max(p.lip_est, 1.0)) + LOG2E * max(h - 1.0, 0.0)


def contraction_bits(h_min: float, p: MapParams) -> float:
    """log2 of the certified lower bound ``alpha e^(h-1)`` for ``l(DS)``."""
    return math.log2(p.alpha) + LOG2E * max(h_min - 1.0, 0.0)


def s_eval(x: Sequence, p: MapParams, acc: int = 64) -> tuple:
    """``S(x)`` with absolute error about ``2^-acc`` (given exact ``x``)."""
    if not is_finite(x):
        raise DomainError("non-finite input")
    h = float(abs(x[-1]))
    if not math.isfinite(h):
        raise PrecisionLimitError("height beyond float range needs more than MAX_PREC bits")
    local = acc + GUARD + max(0, math.ceil(amplification_bits(h, p)))
    m, u, hh, parity = fold(x, p.fold_tie_rule, local)
    with working(local):
        y = _f0(list(u), hh)
        if parity:
            y[-1] = -y[-1]
        lam = mpfr(p.lam)
        return tuple(lam * v for v in y)


def _local_inverse(y, beam: BeamIndex, p: MapParams, acc: int, strict: bool):
    """Local coordinates ``(u', h)`` of the preimage of ``y`` in ``beam``."""
    ymag = vmag(y)
    with working(acc + GUARD + max(ymag, 0).bit_length() + 8):
        lam = mpfr(p.lam)
        w = [v / lam for v in y]
        if beam.parity:
            w[-1] = -w[-1]
        if w[-1] < 0:
            tol = ALG_TOL * max(mpfr(1), gmpy2.sqrt(sum((v * v for v in w), mpfr(0))))
            if strict and -w[-1] > tol:
                raise BranchDomainError(f"point not in the image half-space of {beam}")
            w[-1] = mpfr(0)
        return _f0_inv(w)


def half_beam_inverse(y: Sequence, beam: BeamIndex, p: MapParams, acc: int = 64, strict: bool = True) -> tuple:
    u, h = _local_inverse(y, beam, p, acc, strict)
    out = []
    for rk, uk in zip(beam.r, u):
        with working(max(abs(2 * rk).bit_length(), 1) + acc + GUARD):
            out.append(2 * rk + (-uk if rk % 2 else uk))
    with working(max(mag(h), 1) + acc + GUARD):
        out.append(beam.sign * h)
    return tuple(out)


def branch_inverse(y: Sequence, br: BranchSpec, p: MapParams, acc: int = 64) -> tuple:
    """Preimage of ``y`` in the branch domain; same selection rule as the float core."""
    if not is_finite(y):
        raise DomainError("non-finite input")
    if br.kind is BranchKind.HALF_BEAM:
        return half_beam_inverse(y, br.primary, p, acc)
    first, second = br.half_beams()
    yd = y[-1]
    if (yd > 0 and second.parity == 0) or (yd < 0 and second.parity == 1):
        return half_beam_inverse(y, second, p, acc, strict=False)
    return half_beam_inverse(y, first, p, acc, strict=False)


# ---------------------------------------------------------------------------
# beam geometry


def halfbeam_of(x: Sequence, p: MapParams) -> BeamIndex:
    m = tuple(_round_half(v, p.fold_tie_rule) for v in x[:-1])
    return BeamIndex(m, -1 if x[-1] < 0 else 1)


def local_offsets(x: Sequence, r: Sequence[int]) -> list:
    """``x_k - 2 r_k`` for the horizontal coordinates, as floats."""
    out = []
    for v, rk in zip(x[:-1], r):
        n, den = v.as_integer_ratio()
        with working(MIN_PREC):
            out.append(float(mpfr(int(n) - 2 * int(rk) * int(den)) / int(den)))
    return out


def dist_to_branch_boundary(c: Sequence, br: BranchSpec) -> float:
    """Same slack as the float version, computed from exact lattice offsets."""
    r = br.primary.r
    off = local_offsets(c, r)
    slack = [1.0 - abs(o) for o in off]
    cd = float(c[-1])
    vertical = math.inf
    if br.kind is BranchKind.HALF_BEAM:
        vertical = br.primary.sign * cd
    elif br.kind is BranchKind.ADJACENT_PAIR and br.primary.sign == br.secondary.sign:
        r2 = br.secondary.r
        j = max(range(len(r)), key=lambda k: abs(r2[k] - r[k]))
        lo = 2 * min(r[j], r2[j]) - 1 - 2 * r[j]
        hi = 2 * max(r[j], r2[j]) + 1 - 2 * r[j]
        slack[j] = min(off[j] - lo, hi - off[j])
        vertical = br.primary.sign * cd
    return float(min(min(slack) if slack else math.inf, vertical))


def from_local(r: Sequence[int], off: Sequence[float], xd) -> tuple:
    """Point with horizontal coordinates ``2 r_k + off_k`` and last coordinate ``xd``."""
    out = []
    for rk, o in zip(r, off):
        with working(max(abs(2 * int(rk)).bit_length(), 1) + MIN_PREC):
            out.append(2 * int(rk) + mpfr(float(o)))
    return tuple(out) + as_point([xd])
