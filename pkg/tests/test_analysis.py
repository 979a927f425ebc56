import numpy as np
import pytest

from pkin.analysis import AuditReport, fit_decay, mass_audit, positivity_audit, rho_target
from pkin.equilibria import sqrt_maxwellian
from pkin.errors import DomainError, FitInvalidError, UsageError
from pkin.vgrid import DistributionField
from tests.fixtures import N_SPACE, solver_grid


def test_exponential_fit():
    t = np.linspace(0.0, 10.0, 200)
    fit = fit_decay(t, 0.3 * np.exp(-t))
    assert fit.rho == pytest.approx(1.0, abs=1e-3)
    assert fit.c == pytest.approx(1.0, rel=1e-3)
    assert np.exp(fit.log_C) == pytest.approx(0.3, rel=1e-3)
    assert fit.residual < 1e-6
    assert not fit.truncated_at_zero


def test_stretched_exponential_fit():
    t = np.linspace(0.0, 20.0, 400)
    fit = fit_decay(t, np.exp(-2.0 * t ** (2.0 / 3.0)), period=1.0)
    assert fit.rho == pytest.approx(2.0 / 3.0, abs=1e-3)
    assert fit.c == pytest.approx(2.0, rel=1e-2)
    assert fit.t_lo == pytest.approx(1.0, abs=0.06)
    assert set(fit.to_dict()) == {"c", "rho", "C", "residual", "window", "n_points", "truncated_at_zero"}


def test_fit_needs_enough_points():
    t = np.linspace(0.0, 1.0, 10)
    with pytest.raises(FitInvalidError):
        fit_decay(t, np.exp(-t))
    with pytest.raises(FitInvalidError):
        fit_decay(np.linspace(0.0, 1.0, 30), np.ones(29))


def test_fit_rejects_growth():
    t = np.linspace(0.0, 5.0, 50)
    with pytest.raises(FitInvalidError):
        fit_decay(t, np.exp(t))


def test_fit_truncates_at_zero(caplog):
    t = np.linspace(0.0, 10.0, 60)
    y = np.exp(-t)
    y[50:] = 0.0
    fit = fit_decay(t, y)
    assert fit.truncated_at_zero
    assert fit.t_hi == t[49]
    assert "reaches zero" in caplog.text
    y[15:] = 0.0
    with pytest.raises(FitInvalidError):
        fit_decay(t, y)


@pytest.mark.parametrize("gamma, rho", [(1.0, 1.0), (0.0, 1.0), (-1.0, 2.0 / 3.0), (-2.0, 0.5)])
def test_rho_target(gamma, rho):
    assert rho_target(gamma) == pytest.approx(rho)


@pytest.mark.parametrize("gamma", [-3.0, 1.5])
def test_rho_target_domain(gamma):
    with pytest.raises(DomainError):
        rho_target(gamma)


def test_positivity_audit():
    grid = solver_grid()
    zero = np.zeros((2, N_SPACE, grid.n_nodes))
    assert positivity_audit(zero, None, grid).passed

    dip = zero.copy()
    dip[1, 3, 7] = -2.0 * sqrt_maxwellian(grid.nodes[7])
    result = positivity_audit(DistributionField(dip, grid, 1.0 / N_SPACE), None, grid)
    assert not result.passed
    assert result.location == (1, 3, 7)
    assert result.min_value < 0


def test_mass_audit():
    grid = solver_grid()
    slices = np.tile(sqrt_maxwellian(grid.nodes), (3, N_SPACE, 1))
    audit = mass_audit(slices, grid, 1.0 / N_SPACE)
    assert audit.max_drift == pytest.approx(0.0, abs=1e-14)
    assert len(audit.series) == 3
    with pytest.raises(UsageError):
        mass_audit(slices[:1], grid, 1.0 / N_SPACE)


def test_audit_report_sealing():
    report = AuditReport()
    report.add("mass_drift", 0.0, True)
    report.add("min_F", -1.0, False)
    report.add("note", "info")
    assert not report.all_passed
    assert report.failures() == ["min_F"]
    report.seal()
    with pytest.raises(UsageError):
        report.add("mass_drift", 1.0, True)
    report.add("extra", 1.0)
    assert report.to_dict()["entries"]["extra"] == 1.0
