"""JSON records for every result type.

Finite floats are written as JSON numbers.  Values JSON cannot hold are
written as strings: ``"inf"``, ``"-inf"``, ``"nan"``, and coordinates beyond
float64 range in mpfr decimal notation such as ``"1.2345e+40000"``.
Output is deterministic: keys keep insertion order and floats use ``repr``.
"""

from __future__ import annotations

import json
import math

import gmpy2
import numpy as np

from . import precise as P
from .core import BeamIndex, BranchKind, BranchSpec, MapParams
from .dynamics import BallChain, BlowupCertificate, CertifiedBall, Orbit, PeriodicPointResult, ProbeResult

DIGITS = 17
_MPFR = type(gmpy2.mpfr(0))


def num(x):
    """JSON-safe scalar."""
    if isinstance(x, _MPFR):
        if gmpy2.is_finite(x) and (not x or abs(P.mag(x)) < 1000):
            return float(x)
        if not gmpy2.is_finite(x):
            return str(float(x))
        return mp_str(x)
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def mp_str(v) -> str:
    """Decimal string with DIGITS significant digits, valid for any magnitude."""
    mant, exp, _ = v.digits(10, DIGITS)
    sign = "-" if mant.startswith("-") else ""
    mant = mant.lstrip("-")
    return f"{sign}{mant[0]}.{mant[1:]}e{int(exp) - 1:+d}"


def parse_num(s, precision: int = P.MIN_PREC):
    """Inverse of :func:`num` for coordinates: float or mpfr."""
    if isinstance(s, str):
        with gmpy2.context(gmpy2.get_context(), precision=precision):
            return gmpy2.mpfr(s)
    return float(s)


def point(x) -> list:
    return [num(v) for v in x]


def beam(b: BeamIndex) -> dict:
    return {"r": list(b.r), "sign": b.sign}


def branch(br: BranchSpec) -> dict:
    out = {"kind": br.kind.value, "primary": beam(br.primary)}
    if br.secondary is not None:
        out["secondary"] = beam(br.secondary)
    return out


def branch_from(obj: dict) -> BranchSpec:
    sec = obj.get("secondary")
    return BranchSpec(
        BranchKind(obj["kind"]),
        BeamIndex(tuple(obj["primary"]["r"]), obj["primary"]["sign"]),
        None if sec is None else BeamIndex(tuple(sec["r"]), sec["sign"]),
    )


def ball(b: CertifiedBall) -> dict:
    out = {"center": point(b.center), "radius": num(b.radius), "domain": branch(b.domain)}
    if b.clipped:
        out["clipped"] = True
    if b.phase:
        out["phase"] = b.phase
    return out


def ball_from(obj: dict) -> CertifiedBall:
    center = P.as_point([parse_num(v) for v in obj["center"]])
    return CertifiedBall(center, float(obj["radius"]), branch_from(obj["domain"]),
                         clipped=bool(obj.get("clipped", False)), phase=obj.get("phase", ""))


def chain(c: BallChain) -> dict:
    return {"period": c.period, "retries": c.retries, "balls": [ball(b) for b in c.balls]}


def chain_from(obj: dict) -> BallChain:
    return BallChain.from_balls([ball_from(b) for b in obj["balls"]], obj.get("retries", 0))


def periodic(r: PeriodicPointResult) -> dict:
    return {
        "period": r.period,
        "point": point(r.point),
        "backward_residual": num(r.backward_residual),
        "forward_residual": num(r.forward_residual),
        "contraction_ratio": num(r.contraction_ratio),
        "start_level": r.start_level,
        "orbit_heights": [num(h) for h in r.orbit_heights],
        "chain": chain(r.chain),
    }


def probe(r: ProbeResult) -> dict:
    return {
        "periodic": periodic(r.periodic),
        "escape_proxy": None if r.escape_proxy is None else point(r.escape_proxy),
    }


def blowup(c: BlowupCertificate) -> dict:
    return {
        "k": c.k,
        "R": num(c.R),
        "ball": {"center": point(c.U_center), "radius": num(c.U_radius)},
        "start_level": c.start_level,
        "samples": len(c.samples),
        "max_relative_error": num(c.max_error),
        "chain": chain(c.chain),
    }


def orbit(o: Orbit) -> dict:
    return {"points": [point(x) for x in o.points], "overflow": bool(o.overflow)}


def params(p: MapParams) -> dict:
    return {k: num(v) if isinstance(v, float) else v for k, v in p.to_dict().items()}


def clean(obj):
    """Recursively replace non-JSON scalars via :func:`num`."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [clean(v) for v in obj]
    if obj is None or isinstance(obj, str):
        return obj
    return num(obj)


def dumps(obj) -> str:
    return json.dumps(clean(obj), indent=2, allow_nan=False) + "\n"
