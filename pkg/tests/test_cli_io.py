import hashlib
import json
import math

import gmpy2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrsine import serialize as ser
from qrsine.cli import main, parse_coords
from qrsine.config import TOLERANCE_KEYS, ConfigError, RunConfig
from qrsine.core import BeamIndex, BranchSpec, DomainError
from qrsine.dynamics import BallChain, CertifiedBall, find_periodic
from qrsine.render import SliceSpec, encode_ppm, escape_image, palette, render_slice


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# rendering


def small_slice(d, center=None, size=48, scale=0.1, kmax=40):
    return SliceSpec.coordinate_plane(d, 0, d - 1, size, size, scale, center=center, kmax=kmax)


def test_slice_pixel_geometry():
    s = SliceSpec((1.0, 2.0, 3.0), (1, 0, 0), (0, 0, 1), 4, 6, 0.5)
    P = s.pixel_points(range(6)).reshape(6, 4, 3)
    np.testing.assert_allclose(P[3, 2], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(P[0, 0], [1.0 - 1.0, 2.0, 3.0 + 1.5])
    assert np.all(P[:, :, 1] == 2.0)


def test_slice_validation():
    with pytest.raises(DomainError):
        SliceSpec((0, 0), (1, 0), (0.5, 0.5), 4, 4, 0.1)
    with pytest.raises(DomainError):
        SliceSpec((0, 0), (1, 0), (0, 1.0 + 1e-9), 4, 4, 0.1)
    with pytest.raises(DomainError):
        SliceSpec((0, 0, 0), (1, 0), (0, 1), 4, 4, 0.1)
    with pytest.raises(DomainError):
        SliceSpec((0, 0), (1, 0), (0, 1), 0, 4, 0.1)
    with pytest.raises(DomainError):
        SliceSpec((0, 0), (1, 0), (0, 1), 4, 4, -0.1)
    c = 1 / math.sqrt(2)
    SliceSpec((0, 0, 0), (c, c, 0), (0, 0, 1), 4, 4, 0.1)


def test_palette_is_monotone_with_black_sentinel():
    k = np.arange(0, 102)
    rgb = palette(k, 100).astype(int)
    assert np.all(np.diff(rgb[:-1], axis=0) <= 0)
    assert np.array_equal(rgb[-1], [0, 0, 0])
    assert np.all(rgb[:-1].sum(axis=1) > 0)


def test_zero_pixel_is_sentinel_and_axis_pixel_escapes_fast(p):
    d = p.d
    center = np.zeros(d)
    center[0] = 2.0
    s = small_slice(d, center=center)
    img = escape_image(s, p)
    assert img[s.height // 2, s.width // 2] == s.kmax + 1
    # pixel on the x_d-axis at height 2: scale 0.1, so 20 rows above the centre row
    axis_slice = small_slice(d)
    img = escape_image(axis_slice, p)
    k = img[axis_slice.height // 2 - 20, axis_slice.width // 2]
    assert 1 <= k <= 3
    rgb = palette(np.array([axis_slice.kmax + 1, k]), axis_slice.kmax)
    assert rgb[0].sum() == 0 and rgb[1].sum() > 0


def test_ppm_bytes_deterministic_across_workers(p3):
    s = SliceSpec.coordinate_plane(3, 0, 2, 40, 37, 0.2, kmax=30)
    a = render_slice(s, p3, workers=1)
    b = render_slice(s, p3, workers=3)
    c = render_slice(s, p3, workers=1)
    assert a == b == c
    header = b"P6\n40 37\n255\n"
    assert a.startswith(header) and len(a) == len(header) + 40 * 37 * 3


def test_render_io_error_names_the_path(p2, tmp_path):
    bad = tmp_path / "missing" / "x.ppm"
    with pytest.raises(OSError, match="missing"):
        render_slice(small_slice(2, size=4), p2, bad)
    good = tmp_path / "x.ppm"
    data = render_slice(small_slice(2, size=4), p2, good)
    assert good.read_bytes() == data


def test_encode_ppm_layout():
    rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    data = encode_ppm(rgb)
    assert data == b"P6\n3 2\n255\n" + bytes(range(18))


# ---------------------------------------------------------------------------
# configuration


def test_config_parse_and_roundtrip():
    text = "# run\nd = 3\nmargin=1.25\n\nn = 20000  # samples\nseed = 4\ntol.expansion = 1e-8\n"
    cfg = RunConfig.parse(text)
    assert (cfg.d, cfg.margin, cfg.n, cfg.seed) == (3, 1.25, 20000, 4)
    assert cfg.tolerances == {"expansion": 1e-8}
    assert RunConfig.parse(cfg.dumps()) == cfg


@pytest.mark.parametrize(
    "text, line",
    [
        ("d = 2\nbogus = 1\n", 2),
        ("d = two\n", 1),
        ("seed = 1\n\nmargin 1.1\n", 3),
        ("d = 2\nd = 3\n", 2),
        ("tol.nothing = 1e-3\n", 1),
    ],
)
def test_config_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"cfg:{line}:"):
        RunConfig.parse(text, "cfg")


def test_config_semantic_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.parse("margin = 0.9\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("n = 10\n")
    with pytest.raises(ConfigError):
        RunConfig.parse("tol.expansion = -1\n")
    with pytest.raises(ConfigError, match="nope.cfg"):
        RunConfig.load(tmp_path / "nope.cfg")


@settings(max_examples=200, deadline=None)
@given(
    st.integers(2, 8),
    st.floats(1.0001, 10, allow_nan=False),
    st.integers(10_000, 10**7),
    st.integers(0, 2**31),
    st.dictionaries(st.sampled_from(TOLERANCE_KEYS), st.floats(1e-15, 1.0)),
)
def test_config_roundtrip_property(d, margin, n, seed, tols):
    cfg = RunConfig(d, margin, n, seed, tols)
    assert RunConfig.parse(cfg.dumps()) == cfg


# ---------------------------------------------------------------------------
# serialization


def test_num_handles_every_scalar():
    assert ser.num(float("inf")) == "inf" and ser.num(-float("inf")) == "-inf" and ser.num(float("nan")) == "nan"
    assert ser.num(np.int64(3)) == 3 and ser.num(np.float64(0.5)) == 0.5
    with gmpy2.context(gmpy2.get_context(), precision=200):
        big = gmpy2.exp(gmpy2.mpfr(5000))
    s = ser.num(big)
    assert isinstance(s, str) and s.endswith("e+2171")
    assert float(ser.parse_num(s) / big) == pytest.approx(1.0, rel=1e-15)


def test_chain_roundtrip_with_huge_centres(p2):
    with gmpy2.context(gmpy2.get_context(), precision=300):
        hx = gmpy2.exp(gmpy2.mpfr(3000))
    beam = BeamIndex((0,), 1)
    balls = [
        CertifiedBall((0.1, 0.5), 0.05, BranchSpec.half_beam(beam), phase="seed"),
        CertifiedBall((0.0, hx), 0.2, BranchSpec.pair(beam, BeamIndex((1,), 1)), phase="B"),
        CertifiedBall((0.0, 0.0), 4.4, BranchSpec.half_beam(beam), clipped=True, phase="E"),
    ]
    chain = BallChain.from_balls(balls, retries=2)
    rec = ser.chain(chain)
    json.loads(ser.dumps(rec))
    back = ser.chain_from(json.loads(ser.dumps(rec)))
    assert back.period == 2 and back.retries == 2
    assert [b.domain for b in back.balls] == [b.domain for b in balls]
    assert back.balls[2].clipped and back.balls[1].phase == "B"
    assert float(back.balls[1].center[1] / hx) == pytest.approx(1.0, rel=1e-15)


def test_periodic_record(p3):
    res = find_periodic(([0.0, 0.0, 0.5], 0.05), p3)
    rec = json.loads(ser.dumps(ser.periodic(res)))
    assert rec["period"] == res.period and rec["backward_residual"] < 1e-10
    assert [set(b) >= {"center", "radius", "domain"} for b in rec["chain"]["balls"]]


# ---------------------------------------------------------------------------
# command line


def test_parse_coords():
    assert parse_coords(["1,2", "3"]) == [1.0, 2.0, 3.0]
    assert parse_coords(["-1.5, 2e-3"]) == [-1.5, 0.002]


def test_cli_eval_zero(capsys):
    code, out, _ = run(capsys, "eval", "0", "0", "0")
    assert code == 0 and out == "0 0 0\n"
    code, out, _ = run(capsys, "--d", "3", "eval", "0,0,0")
    assert code == 0 and out == "0 0 0\n"


def test_cli_eval_out_file(capsys, tmp_path):
    out_file = tmp_path / "e.json"
    code, out, _ = run(capsys, "eval", "0", "1", "--out", str(out_file))
    rec = json.loads(out_file.read_text())
    assert code == 0 and rec["S(x)"][1] == pytest.approx(float(out.split()[1]))


def test_cli_selftest_passes(capsys):
    code, out, err = run(capsys, "selftest", "--d", "2")
    assert code == 0 and json.loads(out)["pass"] is True and "passed" in err


def test_cli_selftest_fails_when_lambda_is_corrupted(capsys):
    code, out, err = run(capsys, "selftest", "--d", "2", "--checks-n", "3000", "--corrupt-lambda", "0.9")
    rep = json.loads(out)
    assert code == 1 and rep["pass"] is False
    assert [c["name"] for c in rep["checks"] if not c["pass"]][0] == "expansion"
    assert "expansion" in err


def test_cli_periodic_example_and_determinism(capsys):
    args = ("periodic", "--ball", "0,0,0.5,0.05")
    code, out, _ = run(capsys, *args)
    rec = json.loads(out)
    assert code == 0 and rec["mode"] == "direct" and rec["period"] >= 1
    assert rec["backward_residual"] < 1e-10 and "forward_residual" in rec
    assert run(capsys, *args)[1] == out


def test_cli_periodic_outside_t0_uses_prefix(capsys):
    code, out, _ = run(capsys, "periodic", "--ball", "5.3,-2.1,0.1", "--budget", "64")
    rec = json.loads(out)
    assert code == 0 and rec["mode"] == "prefix" and rec["escape_proxy"] is not None


def test_cli_orbit_and_calibrate(capsys, tmp_path):
    code, out, _ = run(capsys, "orbit", "0", "2", "--kmax", "5")
    rec = json.loads(out)
    assert code == 0 and rec["escape_time"] == 2 and rec["points"][0] == [0.0, 2.0]
    cache = tmp_path / "c"
    code, out, _ = run(capsys, "--cache-dir", str(cache), "calibrate", "--d", "3")
    assert code == 0 and json.loads(out)["alpha"] > 4 * math.sqrt(2)
    assert len(list(cache.glob("calibration_d3_*.json"))) == 1
    assert run(capsys, "--cache-dir", str(cache), "calibrate", "--d", "3")[1] == out


def test_cli_render(capsys, tmp_path):
    img = tmp_path / "a.ppm"
    code, out, _ = run(capsys, "render", "--d", "3", "--width", "32", "--height", "16", "--image", str(img),
                       "--workers", "2", "--scale", "0.1")
    rec = json.loads(out)
    data = img.read_bytes()
    assert code == 0 and rec["sha256"] == hashlib.sha256(data).hexdigest() and data.startswith(b"P6\n32 16\n")


def test_cli_config_file(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("d = 3\nseed = 0\n")
    code, out, _ = run(capsys, "--config", str(cfg), "eval", "0", "0", "1")
    assert code == 0 and len(out.split()) == 3
    code, _, err = run(capsys, "--config", str(cfg), "eval", "0", "1")
    assert code == 2 and "coordinates" in err
    cfg.write_text("d = 3\nwhat = 1\n")
    code, _, err = run(capsys, "--config", str(cfg), "eval", "0", "0", "1")
    assert code == 2 and "run.cfg:2" in err


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--bogus", "1"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
    code, _, _ = run(capsys, "eval", "1", "x")
    assert code == 2
    code, _, _ = run(capsys, "periodic", "--ball", "0.5")
    assert code == 2
    code, _, _ = run(capsys, "render", "--image", "x.ppm", "--plane", "0,0")
    assert code == 2


def test_cli_algorithm_failure_status(capsys):
    # the d = 3 blow-up example needs more precision than the backend allows
    code, out, err = run(capsys, "blowup", "--ball", "0,0,0.5,0.01", "--R", "10", "--samples", "2")
    rec = json.loads(out)
    assert code == 1 and rec["status"] == "NumericalError" and "NumericalError" in err


def test_cli_domain_and_io_failures(capsys, tmp_path):
    code, out, _ = run(capsys, "blowup", "--ball", "0,0.5,-1", "--R", "10")
    assert code == 1 and json.loads(out)["status"] == "DomainError"
    code, out, _ = run(capsys, "render", "--width", "4", "--height", "4", "--image", str(tmp_path / "no" / "x.ppm"))
    assert code == 1 and json.loads(out)["status"] == "OSError"


def test_cli_blowup_success(capsys):
    code, out, _ = run(capsys, "blowup", "--ball", "3.3,1.2,0.05", "--R", "10", "--samples", "10")
    rec = json.loads(out)
    assert code == 0 and rec["k"] >= 1 and rec["max_relative_error"] < 1e-6 and rec["samples"] == 10
