import math

import numpy as np
import pytest

from qrsine import calibration as C
from qrsine.calibration import (
    CalibrationReport,
    ConstructionError,
    SeamProximityError,
    calibrate,
    choose_lambda,
    dilatation_report,
    estimate_beta,
    jacobian_fd,
    singular_bounds,
)
from qrsine.core import DomainError


def test_singular_bounds_examples():
    assert singular_bounds(np.eye(3)) == pytest.approx((1.0, 1.0))
    assert singular_bounds(np.diag([2.0, 0.5])) == pytest.approx((0.5, 2.0))


def test_singular_bounds_bracket_random_images():
    rng = np.random.default_rng(30)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        ell, nrm = singular_bounds(A)
        H = rng.normal(size=(100, 3))
        H /= np.linalg.norm(H, axis=1, keepdims=True)
        stretch = np.linalg.norm(H @ A.T, axis=1)
        assert np.all(stretch >= ell - 1e-12) and np.all(stretch <= nrm + 1e-12)


def test_jacobian_on_the_axis_is_the_identity():
    # on the axis F(0, h) = (0, h); the kink of |u| averages out in a central difference
    for d in (2, 3):
        x = [0.0] * (d - 1) + [0.5]
        with pytest.raises(SeamProximityError):
            jacobian_fd(x)
        np.testing.assert_allclose(jacobian_fd(x, strict=False), np.eye(d), atol=1e-5)


def test_jacobian_orientation_and_second_order():
    x = np.array([0.31, -0.17, 0.42])
    assert np.linalg.det(jacobian_fd(x)) > 0
    y = np.array([0.3, 0.2, 1.7])
    J = [jacobian_fd(y, step=s) for s in (4e-3, 2e-3, 1e-3)]
    ratio = np.linalg.norm(J[0] - J[1]) / np.linalg.norm(J[1] - J[2])
    assert ratio == pytest.approx(4.0, rel=0.05)


def test_choose_lambda_arithmetic():
    p = choose_lambda(0.2, 1.1, 2)
    assert p.lam == pytest.approx(22.0) and p.alpha == pytest.approx(4.4)
    assert p.alpha / 4.0 == pytest.approx(1.1)
    q = choose_lambda(0.15, 1.25, 3)
    assert q.lam == pytest.approx(1.25 * 4 * math.sqrt(2) / 0.15) and q.alpha == pytest.approx(7.0710678, rel=1e-7)
    with pytest.raises(DomainError):
        choose_lambda(0.2, 1.0, 2)
    with pytest.raises(DomainError):
        choose_lambda(-0.2, 1.1, 2)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_calibration_expansion_threshold(d):
    rep = calibrate(d)
    assert rep.alpha > 4 * math.sqrt(d - 1)
    assert rep.alpha / (4 * math.sqrt(d - 1)) == pytest.approx(1.1)
    rep.params().validate()


def test_estimate_beta_deterministic_and_monotone():
    for d in (2, 3):
        b1 = estimate_beta(10_000, 0, d=d)
        assert b1 > 0
        assert estimate_beta(10_000, 0, d=d) == b1
        b2 = estimate_beta(20_000, 0, d=d)
        assert b2 <= b1 + 1e-12
        assert abs(b2 - b1) / b1 < 0.05


def test_estimate_beta_needs_enough_samples():
    with pytest.raises(DomainError):
        estimate_beta(100, 0, d=2)


def test_sampled_expansion_floor(p):
    X = C._accepted_samples(100_000, 7, p.d)
    ell = C._ell(X)
    assert np.min(p.lam * ell) >= p.alpha - 1e-6


def test_dilatation_report(report2, report3):
    for rep in (report2, report3):
        assert rep.K_hat >= 1 and rep.K_prime_hat >= 1
        other = dilatation_report(10_000, 5, rep.params(), rep.margin)
        assert other.K_hat == pytest.approx(rep.K_hat, rel=0.1)
        assert other.K_prime_hat == pytest.approx(rep.K_prime_hat, rel=0.1)
        assert CalibrationReport.from_dict(rep.to_dict()) == rep


def test_axis_jacobian_is_a_similarity():
    ell, nrm = singular_bounds(jacobian_fd([0.0, 0.0, 0.3], strict=False))
    assert nrm / ell == pytest.approx(1.0, abs=1e-5)


def test_construction_errors(monkeypatch, p2):
    monkeypatch.setattr(C, "_ell", lambda X: np.zeros(len(X)))
    with pytest.raises(ConstructionError):
        estimate_beta(10_000, 0, d=2)
    monkeypatch.undo()
    flip = np.diag([1.0, -1.0])

    def reflected(X, step=C.FD_STEP):
        return np.broadcast_to(flip, (len(X), 2, 2)).copy(), np.ones(len(X), bool)

    monkeypatch.setattr(C, "_jacobians", reflected)
    with pytest.raises(ConstructionError):
        dilatation_report(10_000, 0, p2)
