import math
from dataclasses import replace

import numpy as np
import pytest

from qrsine.core import INEQ_SLACK, s_eval
from qrsine.invariants import (
    TOLERANCES,
    CheckResult,
    check_ball_lemmas,
    check_boundary_maps,
    check_expansion,
    check_pair_contraction,
    check_roundtrips_and_zeros,
    run_suite,
)


def corrupted(p, factor=0.9):
    lam = factor * 4.0 * math.sqrt(p.d - 1) / p.beta_est
    return replace(p, lam=lam, alpha=lam * p.beta_est)


def test_check_result_pass_rule():
    assert CheckResult("x", 1, -0.5e-9, 1e-9).passed
    assert not CheckResult("x", 1, -2e-9, 1e-9).passed
    assert set(CheckResult("x", 1, 0.0, 1e-9).to_dict()) >= {"name", "samples", "worst_margin", "pass"}


def test_axis_pairs_expand_by_lambda(p):
    h = np.array([0.1, 0.35, 0.8])
    X = np.zeros((3, p.d))
    X[:, -1] = h
    Y = s_eval(X, p)
    ratios = np.abs(np.diff(Y[:, -1])) / np.diff(h)
    np.testing.assert_allclose(ratios, p.lam, rtol=1e-12)
    assert np.all(ratios >= p.alpha)


def test_check_expansion(p):
    r = check_expansion(20_000, 0, p)
    assert r.passed and r.worst_margin >= -INEQ_SLACK
    assert r.details["exponential"]["worst_margin"] >= 0
    assert r.details["min_ratio"] >= p.alpha - INEQ_SLACK


def test_check_expansion_detects_small_lambda(p):
    r = check_expansion(10_000, 0, corrupted(p))
    assert not r.passed


def test_boundary_examples(p):
    x = np.zeros(p.d)
    x[0], x[-1] = 1.0, 0.7
    assert abs(s_eval(x, p)[-1]) <= 1e-12 * p.lam
    y = np.zeros(p.d)
    y[: p.d - 1] = 0.3
    assert np.linalg.norm(s_eval(y, p)) <= p.lam
    assert check_boundary_maps(10_000, 1, p).passed


def test_ball_lemmas(p):
    r = check_ball_lemmas(300, 2, p)
    assert r.passed
    assert r.details["alpha_t_radius_law_instances"] > 0


def test_roundtrips_and_zeros(p):
    for z in ([2.0] + [0.0] * (p.d - 1), [-4.0] + [2.0] * (p.d - 2) + [0.0]):
        assert np.linalg.norm(s_eval(np.array(z), p)) == 0.0
    x = np.zeros(p.d)
    x[0] = 0.1
    assert np.linalg.norm(s_eval(x, p)) >= (p.alpha - 1e-9) * 0.1
    assert check_roundtrips_and_zeros(10_000, 3, p).passed


def test_pair_contraction(p):
    r = check_pair_contraction(5000, 4, p)
    assert r.passed


def test_run_suite_deterministic(p2):
    a = run_suite(3000, 7, p2)
    b = run_suite(3000, 7, p2)
    assert a.passed and a.to_dict() == b.to_dict()
    assert [c.name for c in a.checks] == list(TOLERANCES)


def test_run_suite_tolerance_override(p2):
    rep = run_suite(2000, 0, p2, {"expansion": 1e-3})
    assert rep.checks[0].tolerance == 1e-3


def test_suite_fails_at_expansion_when_lambda_is_corrupted(p):
    rep = run_suite(3000, 0, corrupted(p))
    assert not rep.passed
    assert not rep.checks[0].passed and rep.checks[0].name == "expansion"
