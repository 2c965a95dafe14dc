import pytest

from qrsine.calibration import calibrate


@pytest.fixture(scope="session")
def report2():
    return calibrate(2)


@pytest.fixture(scope="session")
def report3():
    return calibrate(3)


@pytest.fixture(scope="session")
def p2(report2):
    return report2.params()


@pytest.fixture(scope="session")
def p3(report3):
    return report3.params()


@pytest.fixture(params=[2, 3], ids=["d2", "d3"])
def p(request, p2, p3):
    return p2 if request.param == 2 else p3


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("QRSINE_CACHE", str(tmp_path_factory.getbasetemp() / "calibration-cache"))
