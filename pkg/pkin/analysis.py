"""
Decay-rate fits, positivity / mass audits and the audit report.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from pkin.equilibria import global_maxwellian, sqrt_maxwellian
from pkin.errors import DomainError, FitInvalidError, UsageError
from pkin.vgrid import DistributionField, VelocityGrid, truncation_mass_loss


MIN_FIT_POINTS = 20
RHO_BOUNDS = (0.05, 1.5)


def rho_target(gamma: float) -> float:
    """Stretched-exponential decay exponent: 1 for hard potentials, 2 / (2 + |gamma|) for soft."""
    if not -3.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (-3, 1], got {gamma}")
    if gamma >= 0:
        return 1.0
    return 2.0 / (2.0 + abs(gamma))


@dataclass(frozen=True)
class DecayFit:
    c: float
    rho: float
    log_C: float
    residual: float
    t_lo: float
    t_hi: float
    n_points: int
    truncated_at_zero: bool = False

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "rho": self.rho,
            "C": float(np.exp(self.log_C)),
            "residual": self.residual,
            "window": [self.t_lo, self.t_hi],
            "n_points": self.n_points,
            "truncated_at_zero": self.truncated_at_zero,
        }


def _first_local_max(y: np.ndarray) -> int:
    for i in range(len(y)):
        left = i == 0 or y[i] >= y[i - 1]
        right = i == len(y) - 1 or y[i] >= y[i + 1]
        if left and right:
            return i
    return 0


def _inner_fit(t: np.ndarray, log_y: np.ndarray, rho: float) -> tuple[float, float, float]:
    design = np.column_stack([np.ones_like(t), -(t**rho)])
    (log_c, c), *_ = np.linalg.lstsq(design, log_y, rcond=None)
    rms = float(np.sqrt(np.mean((design @ np.array([log_c, c]) - log_y) ** 2)))
    return float(log_c), float(c), rms


def fit_decay(t, norms, period: Optional[float] = None) -> DecayFit:
    """Least-squares fit of log norm = log C - c t^rho over the decay window; rho by bounded
    scalar minimization with the inner (log C, c) solve."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(norms, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise FitInvalidError(f"times and norms must be matching 1-d series, got {t.shape} and {y.shape}")
    if len(y) < MIN_FIT_POINTS:
        raise FitInvalidError(f"a decay fit needs at least {MIN_FIT_POINTS} points, got {len(y)}")

    truncated = False
    nonpositive = np.nonzero(y <= 0)[0]
    if nonpositive.size:
        truncated = True
        t, y = t[: nonpositive[0]], y[: nonpositive[0]]
        logging.warning(f"Norm series reaches zero at index {nonpositive[0]}; fitting the positive prefix")
        if len(y) < MIN_FIT_POINTS:
            raise FitInvalidError(f"only {len(y)} positive norms before the series reaches zero")

    lo = _first_local_max(y)
    if period is not None:
        lo = max(lo, int(np.searchsorted(t, t[0] + period)))
    floor = 1e3 * np.finfo(float).eps * y[0]
    below = np.nonzero(y[lo:] < floor)[0]
    hi = lo + below[0] if below.size else len(y)
    if hi - lo < 3:
        raise FitInvalidError(f"decay window [{lo}, {hi}) is too short to fit")
    tw, yw = t[lo:hi], y[lo:hi]
    if not yw[-1] < yw[0]:
        raise FitInvalidError("norm series does not decrease over the fit window")

    log_y = np.log(yw)
    # shift so the model is evaluated from the window start; t^rho needs t >= 0
    t0 = tw - t[0]
    result = optimize.minimize_scalar(
        lambda rho: _inner_fit(t0, log_y, rho)[2],
        bounds=RHO_BOUNDS,
        method="bounded",
        options={"xatol": 1e-6},
    )
    rho = float(result.x)
    log_c, c, rms = _inner_fit(t0, log_y, rho)
    if not c > 0:
        raise FitInvalidError(f"fitted decay constant c = {c} is not positive")
    fit = DecayFit(c, rho, log_c, rms, float(tw[0]), float(tw[-1]), int(hi - lo), truncated)
    logging.info(f"Decay fit: rho = {rho:.4f}, c = {c:.4f}, residual {rms:.2e} on [{tw[0]:.4g}, {tw[-1]:.4g}]")
    return fit


@dataclass(frozen=True)
class PositivityResult:
    min_value: float
    max_value: float
    location: tuple
    passed: bool

    def to_dict(self) -> dict:
        return {
            "min_value": self.min_value,
            "max_value": self.max_value,
            "location": list(self.location),
            "passed": self.passed,
        }


def positivity_audit(f_per, f_star: Optional[np.ndarray], grid: VelocityGrid) -> PositivityResult:
    """min over all slices, cells and nodes of F = mu + sqrt(mu) (f* + f_per)."""
    values = f_per.values if isinstance(f_per, DistributionField) else np.asarray(f_per, dtype=float)
    if values.ndim == 2:
        values = values[None]
    total = values if f_star is None else values + np.asarray(f_star)[None]
    F = global_maxwellian(grid.nodes) + sqrt_maxwellian(grid.nodes) * total
    where = np.unravel_index(int(np.argmin(F)), F.shape)
    min_value, max_value = float(F[where]), float(F.max())
    passed = min_value >= -1e-10 * max_value
    if not passed:
        logging.warning(f"F is negative ({min_value:.3e}) at slice {where[0]}, cell {where[1]}, node {where[2]}")
    return PositivityResult(min_value, max_value, tuple(int(i) for i in where), passed)


@dataclass(frozen=True)
class MassAudit:
    series: np.ndarray
    max_drift: float

    def to_dict(self) -> dict:
        return {"series": [float(m) for m in self.series], "max_drift": self.max_drift}


def mass_audit(trajectory, grid: VelocityGrid, cell_width: float) -> MassAudit:
    values = trajectory.values if isinstance(trajectory, DistributionField) else np.asarray(trajectory, dtype=float)
    if values.ndim != 3 or values.shape[0] < 2:
        raise UsageError(f"a mass audit needs at least two (space, velocity) slices, got shape {values.shape}")
    series = np.sum(values @ (sqrt_maxwellian(grid.nodes) * grid.quad_weight), axis=-1) * cell_width
    return MassAudit(series, float(np.max(np.abs(series - series[0]))))


@dataclass
class AuditReport:
    """Named audit values with pass/fail flags; once sealed, recorded entries are final."""

    entries: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)
    sealed: bool = False

    def add(self, key: str, value, passed: Optional[bool] = None):
        if self.sealed and key in self.entries:
            raise UsageError(f"audit entry {key!r} is sealed")
        self.entries[key] = value
        if passed is not None:
            self.passed[key] = bool(passed)

    def seal(self) -> "AuditReport":
        self.sealed = True
        return self

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> list[str]:
        return [key for key, ok in self.passed.items() if not ok]

    def to_dict(self) -> dict:
        return {"entries": self.entries, "passed": self.passed, "all_passed": self.all_passed}


def audit_periodic(solution, f_star: Optional[np.ndarray], grid: VelocityGrid, tol: float) -> AuditReport:
    report = AuditReport()
    mass = mass_audit(solution.history, grid, solution.history.cell_width)
    positivity = positivity_audit(solution.history, f_star, grid)
    scale = max(float(np.max(np.abs(solution.slices))), 1e-300)
    report.add("mass_drift", mass.max_drift, mass.max_drift <= 1e-8 * max(scale, 1.0))
    report.add("max_slice_mass", float(np.max(np.abs(mass.series))))
    report.add("min_F", positivity.to_dict(), positivity.passed)
    report.add("periodicity_residual", solution.periodicity_residual, solution.periodicity_residual <= 10 * tol)
    report.add("truncation_mass_loss", truncation_mass_loss(grid))
    return report.seal()
