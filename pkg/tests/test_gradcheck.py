import numpy as np
import pytest

from qpinqi.gradcheck import (THRESHOLDS, CheckRow, Report, central_difference, check_lindc,
                              check_sigmodel, run)


def test_central_difference_on_cubic():
    f = lambda x: float(np.sum(x ** 3))
    x, v = np.array([1.0, 2.0]), np.array([1.0, -1.0])
    assert central_difference(f, x, v, 1e-4) == pytest.approx(3 - 12, rel=1e-7)


def test_row_and_report():
    rows = [CheckRow("a", 1.0, 1.0 + 1e-7), CheckRow("b", 0.0, 0.0)]
    rep = Report("lindc", 1e-6, rows)
    assert rows[1].rel_error == 0 and rep.passed
    rep.rows.append(CheckRow("c", 1.0, 2.0))
    assert not rep.passed and rep.max_error == 0.5
    assert "FAIL" in rep.table() and "NO" in rep.table()


@pytest.mark.parametrize("target", ["sigmodel", "prior", "lindc", "nlreg"])
def test_component_checks_pass(target):
    rep = run(target)
    assert rep.passed, rep.table()
    assert rep.threshold == THRESHOLDS[target]


def test_checks_detect_a_broken_gradient(monkeypatch):
    from qpinqi import sigmodel
    orig = sigmodel.SaturationRecovery.vjp
    monkeypatch.setattr(sigmodel.SaturationRecovery, "vjp", lambda self, p, dy: 1.01 * orig(self, p, dy))
    assert not check_sigmodel().passed


def test_lindc_check_covers_all_families():
    names = [r.name for r in check_lindc(seed=5).rows]
    assert names == ["prior image 1", "weight 1", "prior image 2", "weight 2", "k-space", "coil maps"]


def test_unknown_target():
    with pytest.raises(ValueError):
        run("everything")
