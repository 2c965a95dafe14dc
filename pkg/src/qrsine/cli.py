"""Command-line entry point ``qrsine``.

Exit status: 0 on success, 1 when an algorithm or check fails (a diagnostic
JSON record is still written), 2 for usage errors.  Results go to stdout as
JSON, or to ``--out``; a short human summary goes to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import serialize as ser
from .calibration import CalibrationReport, ConstructionError, calibrate
from .config import ConfigError, RunConfig
from .core import DomainError, MapParams, s_eval
from .dynamics import (
    AlgorithmFailure,
    NumericalError,
    certify_blowup,
    escape_times,
    find_periodic,
    orbit,
    probe_density,
)
from .invariants import run_suite
from .render import SliceSpec, render_slice

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_coords(tokens) -> list:
    """Floats from comma- and/or space-separated tokens."""
    out = []
    for tok in tokens:
        for part in re.split(r"[,\s]+", tok.strip()):
            if part:
                try:
                    v = float(part)
                except ValueError:
                    raise UsageError(f"not a number: {part!r}") from None
                if not math.isfinite(v):
                    raise UsageError(f"not a finite number: {part!r}")
                out.append(v)
    if not out:
        raise UsageError("no coordinates given")
    return out


def _fmt(v: float) -> str:
    return "%.17g" % (float(v) + 0.0)


def _global_options(parser, suppress: bool):
    dflt = {"default": argparse.SUPPRESS} if suppress else {}
    g = parser.add_argument_group("global options")
    g.add_argument("--d", type=int, help="dimension (default: config, coordinates, or 2)", **dflt)
    g.add_argument("--seed", type=int, help="seed for calibration and sampling", **dflt)
    g.add_argument("--margin", type=float, help="calibration margin (> 1)", **dflt)
    g.add_argument("--n", type=int, help="calibration sample count", **dflt)
    g.add_argument("--config", help="key = value run configuration file", **dflt)
    g.add_argument("--out", help="write the JSON result here instead of stdout", **dflt)
    g.add_argument("--cache-dir", help="calibration cache directory", **dflt)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    ap = argparse.ArgumentParser(prog="qrsine", description="Quasiregular sine map toolkit.")
    _global_options(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[common], help="estimate beta and choose lambda")
    c.add_argument("--force", action="store_true", help="ignore the cache")

    e = sub.add_parser("eval", parents=[common], help="print S(x)")
    e.add_argument("x", nargs="+")

    o = sub.add_parser("orbit", parents=[common], help="forward orbit of a point")
    o.add_argument("x", nargs="+")
    o.add_argument("--kmax", type=int, default=20)
    o.add_argument("--bailout", type=float, default=1e6)

    r = sub.add_parser("render", parents=[common], help="escape-time image of a coordinate plane")
    r.add_argument("--image", required=True, help="output PPM path")
    r.add_argument("--plane", default=None, help="two 0-based axes, default 0,d-1")
    r.add_argument("--center", default=None, help="point at the image centre")
    r.add_argument("--width", type=int, default=512)
    r.add_argument("--height", type=int, default=512)
    r.add_argument("--scale", type=float, default=1 / 64)
    r.add_argument("--kmax", type=int, default=100)
    r.add_argument("--bailout", type=float, default=1e6)
    r.add_argument("--workers", type=int, default=1)

    pp = sub.add_parser("periodic", parents=[common], help="periodic point in a ball")
    pp.add_argument("--ball", required=True, help="c_1,...,c_d,radius")
    pp.add_argument("--budget", type=int, default=0, help="escape-proxy samples")

    b = sub.add_parser("blowup", parents=[common], help="k with S^k(ball) containing B(0, R)")
    b.add_argument("--ball", required=True, help="c_1,...,c_d,radius")
    b.add_argument("--R", type=float, required=True)
    b.add_argument("--samples", type=int, default=100)

    s = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    s.add_argument("--checks-n", type=int, default=10_000, help="samples per check")
    s.add_argument("--corrupt-lambda", type=float, default=None, metavar="F",
                   help="replace lambda by F * 4 sqrt(d-1) / beta_est (forced failure)")
    return ap


# ---------------------------------------------------------------------------
# configuration and calibration


def _run_config(args, d_hint=None) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    explicit_d = getattr(args, "d", None)
    if explicit_d is not None:
        cfg.d = explicit_d
    elif d_hint is not None and not getattr(args, "config", None):
        cfg.d = d_hint
    for key in ("seed", "margin", "n"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if d_hint is not None and d_hint != cfg.d:
        raise UsageError(f"got {d_hint} coordinates but d = {cfg.d}")
    return cfg


def _cache_dir(args) -> Path:
    d = getattr(args, "cache_dir", None) or os.environ.get("QRSINE_CACHE")
    return Path(d) if d else Path.home() / ".cache" / "qrsine"


def calibration(cfg: RunConfig, cache: Path, force: bool = False) -> CalibrationReport:
    """Calibration for ``cfg``, read from or stored in a cache keyed by (d, margin, n, seed)."""
    path = cache / f"calibration_d{cfg.d}_m{cfg.margin!r}_n{cfg.n}_s{cfg.seed}.json"
    if not force and path.exists():
        try:
            return CalibrationReport.from_dict(json.loads(path.read_text()))
        except (OSError, ValueError, KeyError, TypeError):
            pass
    rep = calibrate(cfg.d, cfg.margin, cfg.n, cfg.seed)
    try:
        cache.mkdir(parents=True, exist_ok=True)
        path.write_text(ser.dumps(rep.to_dict()))
    except OSError as exc:
        print(f"warning: cannot cache calibration at {path}: {exc.strerror or exc}", file=sys.stderr)
    return rep


def _params(args, d_hint=None):
    cfg = _run_config(args, d_hint)
    return cfg, calibration(cfg, _cache_dir(args)).params()


def _ball_arg(text: str):
    vals = parse_coords([text])
    if len(vals) < 3:
        raise UsageError("--ball needs d >= 2 centre coordinates and a radius")
    return vals[:-1], vals[-1]


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(args):
    cfg = _run_config(args)
    rep = calibration(cfg, _cache_dir(args), force=args.force)
    summary = f"d={rep.d} beta={rep.beta_est:.6g} lambda={rep.lam:.6g} alpha={rep.alpha:.6g}"
    return EXIT_OK, rep.to_dict(), summary


def cmd_eval(args):
    x = parse_coords(args.x)
    _, p = _params(args, len(x))
    y = s_eval(np.array(x), p)
    print(" ".join(_fmt(v) for v in y))
    return EXIT_OK, {"x": x, "S(x)": [float(v) for v in y]}, None


def cmd_orbit(args):
    x = parse_coords(args.x)
    _, p = _params(args, len(x))
    if args.kmax < 1:
        raise UsageError("--kmax must be >= 1")
    o = orbit(np.array(x), args.kmax, args.bailout, p)
    k = int(escape_times(np.array(x)[None, :], args.kmax, args.bailout, p)[0])
    rec = ser.orbit(o)
    rec["escape_time"] = k if k <= args.kmax else None
    return EXIT_OK, rec, f"{len(o.points) - 1} steps, escape time {rec['escape_time']}"


def cmd_render(args):
    center = parse_coords([args.center]) if args.center else None
    cfg, p = _params(args, None if center is None else len(center))
    d = cfg.d
    i, j = (0, d - 1) if args.plane is None else (int(v) for v in parse_coords([args.plane]))
    if not (0 <= i < d and 0 <= j < d and i != j):
        raise UsageError(f"--plane needs two distinct axes in 0..{d - 1}")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        spec = SliceSpec.coordinate_plane(d, i, j, args.width, args.height, args.scale, center=center,
                                          kmax=args.kmax, bailout=args.bailout)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    data = render_slice(spec, p, args.image, workers=args.workers)
    rec = {
        "image": args.image,
        "width": spec.width,
        "height": spec.height,
        "plane": [i, j],
        "scale": spec.scale,
        "kmax": spec.kmax,
        "bailout": spec.bailout,
        "bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    return EXIT_OK, rec, f"wrote {args.image} ({spec.width}x{spec.height})"


def cmd_periodic(args):
    c, r = _ball_arg(args.ball)
    cfg, p = _params(args, len(c))
    tol = cfg.tolerances.get("periodic", 1e-13)
    try:
        res = find_periodic((c, r), p, tol=tol)
        mode, escape = "direct", None
        if args.budget > 0:
            escape = probe_density(c, r, args.budget, p, tol=tol).escape_proxy
    except DomainError:
        pr = probe_density(c, r, args.budget, p, tol=tol)
        res, mode, escape = pr.periodic, "prefix", pr.escape_proxy
    rec = {"ball": {"center": c, "radius": r}, "mode": mode}
    rec.update(ser.periodic(res))
    rec["escape_proxy"] = None if escape is None else ser.point(escape)
    summary = (f"period {res.period}, backward {res.backward_residual:.2e}, "
               f"forward {res.forward_residual:.2e}")
    return EXIT_OK, rec, summary


def cmd_blowup(args):
    c, r = _ball_arg(args.ball)
    _, p = _params(args, len(c))
    cert = certify_blowup(c, r, args.R, p, n_samples=args.samples)
    return EXIT_OK, ser.blowup(cert), f"k = {cert.k}, max relative error {cert.max_error:.2e}"


def cmd_selftest(args):
    cfg, p = _params(args)
    if args.corrupt_lambda is not None:
        lam = args.corrupt_lambda * 4.0 * math.sqrt(p.d - 1) / p.beta_est
        p = replace(p, lam=lam, alpha=lam * p.beta_est)
    rep = run_suite(args.checks_n, cfg.seed, p, cfg.tolerances)
    failed = [c.name for c in rep.checks if not c.passed]
    summary = "all checks passed" if not failed else "failed: " + ", ".join(failed)
    return (EXIT_OK if rep.passed else EXIT_FAIL), rep.to_dict(), summary


COMMANDS = {
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "orbit": cmd_orbit,
    "render": cmd_render,
    "periodic": cmd_periodic,
    "blowup": cmd_blowup,
    "selftest": cmd_selftest,
}


def _emit(args, record) -> None:
    text = ser.dumps(record)
    out = getattr(args, "out", None)
    if out:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {out}: {exc.strerror or exc}") from None
    elif args.command != "eval":
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        status, record, summary = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"qrsine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AlgorithmFailure, NumericalError, ConstructionError, DomainError, OSError) as exc:
        record = {"status": type(exc).__name__, "message": str(exc)}
        chain = getattr(exc, "chain", None)
        if chain is not None:
            record["partial_chain"] = ser.chain(chain)
        sys.stdout.write(ser.dumps(record))
        print(f"qrsine {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _emit(args, record)
    if summary:
        print(f"qrsine {args.command}: {summary}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
