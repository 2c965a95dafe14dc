"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a ``[criterion N] PASS|FAIL`` line (visible with ``-v``
or ``-s``) that includes the measured quantities and the wall time.
"""

import json
import math
import time

import numpy as np
import pytest

import qrsine.dynamics as D
from qrsine import calibration as C
from qrsine.calibration import calibrate, estimate_beta
from qrsine.cli import main
from qrsine.core import s_eval
from qrsine.dynamics import certify_blowup, escape_times, probe_density, tol_fwd
from qrsine.invariants import (
    check_ball_lemmas,
    check_boundary_maps,
    check_expansion,
    check_pair_contraction,
    check_roundtrips_and_zeros,
)
from qrsine.render import SliceSpec, render_slice


class Criterion:
    """Prints one summary line when the block exits, whatever the outcome."""

    def __init__(self, capsys, number):
        self.capsys = capsys
        self.number = number
        self.notes = []
        self.ok = True

    def check(self, cond, note):
        self.notes.append(note)
        self.ok = self.ok and bool(cond)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        wall = time.perf_counter() - self.t0
        if exc is not None:
            self.ok = False
            self.notes.append(f"{exc_type.__name__}: {exc}")
        status = "PASS" if self.ok else "FAIL"
        with self.capsys.disabled():
            print(f"\n[criterion {self.number}] {status} ({wall:.1f} s): " + "; ".join(self.notes))
        if exc is None:
            assert self.ok, "; ".join(self.notes)
        return False


@pytest.fixture
def criterion(capsys):
    return lambda number: Criterion(capsys, number)


def test_criterion_01_calibration(criterion):
    C._polished_beta.cache_clear()  # time a cold calibration
    with criterion(1) as c:
        for d in (2, 3):
            rep = calibrate(d, margin=1.1, n=10_000)
            b2 = estimate_beta(20_000, 0, d=d)
            drift = abs(b2 - rep.beta_est) / rep.beta_est
            c.check(rep.alpha > 4 * math.sqrt(d - 1), f"d={d} alpha={rep.alpha:.4f} > {4 * math.sqrt(d - 1):.4f}")
            c.check(rep.alpha / (4 * math.sqrt(d - 1)) == pytest.approx(1.1), f"margin {rep.alpha / (4 * math.sqrt(d - 1)):.3f}")
            c.check(drift < 0.05, f"beta drift {drift:.2e}")
        elapsed = time.perf_counter() - c.t0
        c.check(elapsed < 30, f"runtime {elapsed:.1f} s < 30 s")


def test_criterion_02_expansion(criterion, p2, p3):
    with criterion(2) as c:
        for p in (p2, p3):
            t = time.perf_counter()
            r = check_expansion(100_000, 0, p)
            elapsed = time.perf_counter() - t
            c.check(r.passed and r.worst_margin >= -1e-9, f"d={p.d} worst_margin={r.worst_margin:.3e}")
            c.check(elapsed < 10, f"d={p.d} {elapsed:.2f} s < 10 s")


def test_criterion_03_inverse_soundness(criterion, p2, p3):
    with criterion(3) as c:
        for p in (p2, p3):
            r = check_roundtrips_and_zeros(10_000, 11, p)
            worst = min(r.details[k]["worst_margin"] for k in ("half_beam_branch", "full_beam_branch", "f0_roundtrip"))
            c.check(worst >= -1e-10, f"d={p.d} round-trip error {-worst:.1e} <= 1e-10")
            q = check_pair_contraction(10_000, 12, p)
            lip = q.details["pair_lipschitz"]["worst_margin"]
            c.check(lip >= -1e-9, f"d={p.d} 1/alpha - pair Lipschitz >= {lip:.2e}")
            c.check(q.passed, f"d={p.d} pair check {q.worst_margin:.1e}")


def test_criterion_04_zeros_and_boundary(criterion, p2, p3):
    with criterion(4) as c:
        rng = np.random.default_rng(40)
        for p in (p2, p3):
            Z = np.zeros((100, p.d))
            Z[:, :-1] = 2.0 * rng.integers(-50, 51, (100, p.d - 1))
            worst = float(np.max(np.linalg.norm(s_eval(Z, p), axis=1)))
            c.check(worst <= 1e-12 * p.lam, f"d={p.d} max |S(zero)| = {worst:.1e}")
            r = check_boundary_maps(10_000, 41, p)
            c.check(r.passed and r.worst_margin >= -1e-9, f"d={p.d} boundary margin {r.worst_margin:.1e}")


def test_criterion_05_ball_lemmas(criterion, p2, p3):
    with criterion(5) as c:
        for p in (p2, p3):
            r = check_ball_lemmas(1000, 50, p)
            laws = {k: r.details[k]["worst_margin"] for k in ("alpha_t_radius_law", "min_2t_half_radius_law")}
            c.check(r.passed, f"d={p.d} worst_margin {r.worst_margin:.1e}")
            c.check(r.details["alpha_t_radius_law_instances"] > 0 and all(v >= -1e-12 for v in laws.values()),
                    f"d={p.d} radius laws {laws['alpha_t_radius_law']:.0e}/{laws['min_2t_half_radius_law']:.0e} "
                    f"on {r.details['alpha_t_radius_law_instances']} instances")


def test_criterion_06_periodic_points_everywhere(criterion, p2, p3):
    with criterion(6) as c:
        for p in (p2, p3):
            rng = np.random.default_rng(600 + p.d)
            hits = 0
            for centre in rng.uniform(-10, 10, (100, p.d)):
                per = probe_density(centre, 0.05, 0, p).periodic
                hits += bool(np.linalg.norm(per.point - centre) < 0.05
                             and per.backward_residual < 1e-10
                             and per.forward_residual < tol_fwd(per.period, p))
            c.check(hits == 100, f"d={p.d} {hits}/100")
        elapsed = time.perf_counter() - c.t0
        c.check(elapsed < 300, f"runtime {elapsed:.0f} s < 300 s")


def test_criterion_07_blowup(criterion, p2, p3):
    with criterion(7) as c:
        errs, ks = [], []
        for p in (p2, p3):
            rng = np.random.default_rng(700 + p.d)
            for centre in rng.uniform(-10, 10, (10, p.d)):
                cert = certify_blowup(centre, 0.05, 10.0, p, n_samples=100)
                ks.append(cert.k)
                errs.append(cert.max_error if len(cert.samples) == 100 else math.inf)
        c.check(len(errs) == 20 and max(errs) < 1e-6, f"20 balls, k in [{min(ks)}, {max(ks)}], max error {max(errs):.1e}")
        elapsed = time.perf_counter() - c.t0
        c.check(elapsed < 300, f"runtime {elapsed:.0f} s < 300 s")


def test_criterion_08_escaping_and_periodic_dense(criterion, p2, p3):
    with criterion(8) as c:
        for p in (p2, p3):
            rng = np.random.default_rng(800 + p.d)
            both = 0
            for centre in rng.uniform(-10, 10, (25, p.d)):
                res = probe_density(centre, 1.0, 4096, p, kmax=100, bailout=1e6)
                per = res.periodic
                periodic_ok = np.linalg.norm(per.point - centre) < 1.0 and per.backward_residual < 1e-10
                esc = res.escape_proxy
                escape_ok = (esc is not None and np.linalg.norm(esc - centre) < 1.0
                             and escape_times(esc[None, :], 100, 1e6, p)[0] <= 100)
                both += bool(periodic_ok and escape_ok)
            c.check(both == 25, f"d={p.d} {both}/25 unit balls with both points")


def test_criterion_09_render(criterion, p3):
    with criterion(9) as c:
        s = SliceSpec.coordinate_plane(3, 0, 2, 512, 512, 1 / 64, kmax=100, bailout=1e6)
        t = time.perf_counter()
        a = render_slice(s, p3, workers=4)
        elapsed = time.perf_counter() - t
        b = render_slice(s, p3, workers=4)
        one = render_slice(s, p3, workers=1)
        c.check(elapsed < 10, f"512x512 on 4 workers in {elapsed:.2f} s")
        c.check(a == b == one, "byte-identical across runs and worker counts")


def test_criterion_10_forced_failures(criterion, capsys, tmp_path, monkeypatch):
    def run(*argv):
        code = main(list(argv))
        out, _ = capsys.readouterr()
        return code, out

    with criterion(10) as c:
        for d in ("2", "3"):
            code, out = run("selftest", "--d", d, "--checks-n", "3000", "--corrupt-lambda", "0.9")
            failed = [x["name"] for x in json.loads(out)["checks"] if not x["pass"]]
            c.check(code == 1 and failed[:1] == ["expansion"], f"d={d} corrupted selftest exit {code}, failed {failed}")
            code, _ = run("selftest", "--d", d, "--checks-n", "3000")
            c.check(code == 0, f"d={d} clean selftest exit {code}")
        statuses = {}
        code, out = run("blowup", "--ball", "0,0,0.5,0.01", "--R", "10", "--samples", "2")
        statuses[json.loads(out)["status"]] = code
        code, out = run("blowup", "--ball", "0,0.5,-1", "--R", "10")
        statuses[json.loads(out)["status"]] = code
        code, out = run("render", "--width", "4", "--height", "4", "--image", str(tmp_path / "no" / "x.ppm"))
        statuses[json.loads(out)["status"]] = code

        def failing_face_step(*args, **kwargs):
            raise D.StepFailure("forced")

        monkeypatch.setattr(D, "cross_face_step", failing_face_step)
        code, out = run("periodic", "--ball", "0,0,0.5,0.05")
        rec = json.loads(out)
        statuses[rec["status"]] = code
        c.check(rec.get("partial_chain") is not None, "AlgorithmFailure reports a partial chain")
        monkeypatch.undo()
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("d = 2\nmystery = 1\n")
        statuses["ConfigError"] = run("--config", str(cfg), "eval", "0", "0")[0]
        with pytest.raises(SystemExit) as info:
            main(["eval", "--no-such-flag"])
        statuses["usage"] = info.value.code
        want = {"NumericalError": 1, "DomainError": 1, "OSError": 1, "AlgorithmFailure": 1, "ConfigError": 2, "usage": 2}
        c.check(statuses == want, f"statuses {statuses}")
