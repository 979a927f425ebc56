"""
Linearized collision operator on the velocity grid.

L = nu - K with K = K_gain - K_loss. The loss part and nu come from a closed-form quadrature of
|v - u|^gamma against the grid Maxwellian (cell-averaged near the diagonal). The gain part is
assembled by stochastic deposition: per matrix row v, pairs (u, omega) are drawn with u ~ N(0, 2I)
and omega uniform on the sphere, the post-collision velocities v' and u' are formed, and the
weights B * sqrt(mu(u)) sqrt(mu(.)) are spread trilinearly onto the grid. The assembled matrix is
symmetrized and then corrected, symmetrically and with rank at most ten, so that the five
collision invariants are exact null vectors of L on the grid.

The first `stencil` samples of every row are kept as a sparse deposition stencil for the
bilinear form Gamma.
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
import scipy.sparse as sp
from scipy import integrate, linalg
from scipy.sparse.linalg import LinearOperator, lobpcg

from pkin.equilibria import global_maxwellian, sqrt_maxwellian
from pkin.errors import AssemblyError, ConfigurationError, DimensionError
from pkin.kernel_cache import CacheKey, KernelCache
from pkin.util.managers import TimerContextManager
from pkin.util.random import COERCIVITY_PROBES, KERNEL_ASSEMBLY, KERNEL_SPLIT, substream
from pkin.vgrid import VelocityGrid, WeightSpec, weight


# sqrt(mu(u)) / p(u) for the sampling density p of N(0, 2I)
_IMPORTANCE = (2.0 * np.pi) ** -0.5 * (4.0 * np.pi) ** 1.5
_SPHERE = 4.0 * np.pi
_ROW_CHUNK = 256


@dataclass(frozen=True)
class AngularProfile:
    name: str
    b: Callable[[np.ndarray], np.ndarray]
    sphere_integral: float


ANGULAR_PROFILES = {
    "cos": AngularProfile("cos", lambda c: np.abs(c), 2.0 * np.pi),
    "cos2": AngularProfile("cos2", lambda c: c * c, 4.0 * np.pi / 3.0),
}


def angular_profile(name: str) -> AngularProfile:
    try:
        return ANGULAR_PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown model.b {name!r}, expected one of {sorted(ANGULAR_PROFILES)}") from None


def check_gamma(gamma: float) -> None:
    if not -3.0 < gamma <= 1.0:
        raise ConfigurationError(f"model.gamma must lie in (-3, 1], got {gamma}")


def cutoff(s, m: float):
    """C1 cubic ramp: 1 below m, 0 above 2m."""
    t = np.clip((np.asarray(s, dtype=float) - m) / m, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


def collision_frequency(v, gamma: float, b: str = "cos") -> float:
    """nu(v) = (int b domega) * int |v - u|^gamma mu(u) du, by a radial quadrature.

    |v - Z| for Z ~ N(0, I) has the noncentral chi density, so the velocity integral reduces to
    sqrt(2 pi) E|v - Z|^gamma.
    """
    check_gamma(gamma)
    profile = angular_profile(b)
    s = float(np.linalg.norm(v))

    if s < 1e-8:

        def density(r):
            return np.sqrt(2.0 / np.pi) * r * r * np.exp(-0.5 * r * r)

    else:

        def density(r):
            return (r / s) / np.sqrt(2.0 * np.pi) * np.exp(-0.5 * (r - s) ** 2) * -np.expm1(-2.0 * r * s)

    lo, hi = max(0.0, s - 12.0), s + 12.0
    points = [s] if lo < s < hi else None
    moment, _ = integrate.quad(lambda r: r**gamma * density(r), lo, hi, points=points, limit=200)
    return float(profile.sphere_integral * np.sqrt(2.0 * np.pi) * moment)


def _cell_average(offsets: np.ndarray, h: float, n_sub: int, kernel: Callable) -> np.ndarray:
    sub = ((np.arange(n_sub) + 0.5) / n_sub - 0.5) * h
    subs = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(offsets.shape[0])
    for start in range(0, offsets.shape[0], 1024):
        block = offsets[start : start + 1024, None, :] + subs[None, :, :]
        out[start : start + 1024] = kernel(np.linalg.norm(block, axis=-1)).mean(axis=1)
    return out


def _offset_table(grid: VelocityGrid, gamma: float, m: Optional[float] = None) -> np.ndarray:
    """|v_i - u|^gamma (times chi_m when m is given) for every lattice offset, cell-averaged over
    the target cell next to the diagonal and, with a cutoff, wherever chi_m is not flat."""
    n, h = grid.n_per_axis, grid.spacing
    o = np.arange(-(n - 1), n)
    steps = np.stack(np.meshgrid(o, o, o, indexing="ij"), axis=-1).reshape(-1, 3)
    offsets = steps * h
    dist = np.linalg.norm(offsets, axis=-1)

    if m is None:

        def kernel(s):
            with np.errstate(divide="ignore"):
                return s**gamma

        near = np.max(np.abs(steps), axis=-1) <= 1
        table = np.where(near, 0.0, kernel(np.where(near, 1.0, dist)))
        table[near] = _cell_average(offsets[near], h, 8, kernel)
        return table

    def kernel(s):
        with np.errstate(divide="ignore"):
            return np.where(s < 2.0 * m, s**gamma * cutoff(s, m), 0.0)

    reach = dist - 0.5 * np.sqrt(3.0) * h < 2.0 * m
    table = np.zeros(offsets.shape[0])
    table[reach] = _cell_average(offsets[reach], h, 8, kernel)
    return table


def _gather(table: np.ndarray, grid: VelocityGrid, rows: np.ndarray) -> np.ndarray:
    n = grid.n_per_axis
    idx = grid.lattice_index
    d = idx[rows, None, :] - idx[None, :, :] + (n - 1)
    flat = (d[..., 0] * (2 * n - 1) + d[..., 1]) * (2 * n - 1) + d[..., 2]
    return table[flat]


def loss_matrix(grid: VelocityGrid, gamma: float, b: str = "cos", m: Optional[float] = None) -> np.ndarray:
    """A with (A f)_i = int int B(v_i - u, omega) sqrt(mu(u)) f(u) domega du on the grid."""
    profile = angular_profile(b)
    table = _offset_table(grid, gamma, m)
    column = sqrt_maxwellian(grid.nodes) * grid.quad_weight
    A = np.empty((grid.n_nodes, grid.n_nodes))
    for start in range(0, grid.n_nodes, _ROW_CHUNK):
        rows = np.arange(start, min(start + _ROW_CHUNK, grid.n_nodes))
        A[rows] = profile.sphere_integral * _gather(table, grid, rows) * column[None, :]
    return A


def grid_collision_frequency(grid: VelocityGrid, gamma: float, b: str = "cos") -> np.ndarray:
    """nu on the grid, consistent with loss_matrix: nu = A sqrt(mu)."""
    profile = angular_profile(b)
    table = _offset_table(grid, gamma)
    mu_quad = global_maxwellian(grid.nodes) * grid.quad_weight
    nu = np.empty(grid.n_nodes)
    for start in range(0, grid.n_nodes, _ROW_CHUNK):
        rows = np.arange(start, min(start + _ROW_CHUNK, grid.n_nodes))
        nu[rows] = profile.sphere_integral * (_gather(table, grid, rows) @ mu_quad)
    return nu


def trilinear(grid: VelocityGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices and weights, each (N, 8); corners off the lattice get weight 0."""
    n, h = grid.n_per_axis, grid.spacing
    u = (points + grid.v_max) / h - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    idx = np.zeros(points.shape[:-1] + (8,), dtype=np.int64)
    wts = np.ones(points.shape[:-1] + (8,))
    for corner in range(8):
        bits = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        c = base + bits
        w = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=-1)
        inside = np.all((c >= 0) & (c < n), axis=-1)
        c = np.clip(c, 0, n - 1)
        idx[..., corner] = (c[..., 0] * n + c[..., 1]) * n + c[..., 2]
        wts[..., corner] = np.where(inside, w, 0.0)
    return idx, wts


def raw_basis(grid: VelocityGrid) -> np.ndarray:
    """Columns sqrt(mu), v_i sqrt(mu), (|v|^2 - 3) sqrt(mu)."""
    v = grid.nodes
    sqrt_mu = sqrt_maxwellian(v)
    return np.column_stack(
        [sqrt_mu, v[:, 0] * sqrt_mu, v[:, 1] * sqrt_mu, v[:, 2] * sqrt_mu, (grid.speed**2 - 3.0) * sqrt_mu]
    )


def continuum_basis(grid: VelocityGrid) -> np.ndarray:
    """e_0..e_4 with their continuum normalization (unit L2 norm on R^3)."""
    scale = (2.0 * np.pi) ** -0.25
    E = raw_basis(grid) * scale
    E[:, 4] /= np.sqrt(6.0)
    return E


class SpectralProjector:
    """Orthogonal projection onto span{e_0..e_4}.

    With metric=None the inner product is the plain quadrature one; a metric (e.g. nu) gives the
    projection that is orthogonal for sum f g metric quad.
    """

    def __init__(self, grid: VelocityGrid, metric: Optional[np.ndarray] = None):
        self._grid = grid
        self._metric = np.ones(grid.n_nodes) if metric is None else np.asarray(metric, dtype=float)
        self._measure = self._metric * grid.quad_weight
        E = raw_basis(grid)
        gram = E.T @ (E * self._measure[:, None])
        chol = np.linalg.cholesky(gram)
        self._basis = linalg.solve_triangular(chol, E.T, lower=True).T
        self._continuum_e0_norm = float(np.sum(continuum_basis(grid)[:, 0] ** 2 * grid.quad_weight))

    @property
    def basis(self) -> np.ndarray:
        """Orthonormalized e_0..e_4 as columns; the first column is proportional to sqrt(mu)."""
        return self._basis

    @property
    def raw(self) -> np.ndarray:
        return raw_basis(self._grid)

    @property
    def continuum_e0_norm(self) -> float:
        """sum of e_0^2 quad before re-orthonormalization; 1 up to truncation."""
        return self._continuum_e0_norm

    def gram(self) -> np.ndarray:
        return self._basis.T @ (self._basis * self._measure[:, None])

    def gram_condition(self) -> float:
        return float(np.linalg.cond(self.gram()))

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        return (np.asarray(f) * self._measure) @ self._basis

    def project(self, f: np.ndarray) -> np.ndarray:
        return self.coefficients(f) @ self._basis.T

    def complement(self, f: np.ndarray) -> np.ndarray:
        return f - self.project(f)


def project_P(projector: SpectralProjector, f: np.ndarray) -> np.ndarray:
    return projector.project(f)


@dataclass(frozen=True)
class GainStencil:
    """Sparse interpolation rows for u' and v' of the first samples of every kernel row."""

    u_interp: sp.csr_matrix
    v_interp: sp.csr_matrix
    weights: np.ndarray  # (n_v, samples)

    @property
    def samples(self) -> int:
        return self.weights.shape[1]


@dataclass
class _RowBatch:
    row: np.ndarray
    u_idx: Optional[np.ndarray] = None
    u_wts: Optional[np.ndarray] = None
    v_idx: Optional[np.ndarray] = None
    v_wts: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None


class _GainSampler:
    """Per-row stochastic deposition of the gain kernel."""

    def __init__(self, grid: VelocityGrid, gamma: float, profile: AngularProfile, seed: int):
        self._grid = grid
        self._gamma = gamma
        self._profile = profile
        self._sqrt_mu = sqrt_maxwellian(grid.nodes)
        self._rngs = [substream(seed, KERNEL_ASSEMBLY, i) for i in range(grid.n_nodes)]

    def _interp_sqrt_mu(self, idx, wts):
        return np.sum(self._sqrt_mu[idx] * wts, axis=-1)

    def _collide(self, v: np.ndarray, draws: np.ndarray):
        u = np.sqrt(2.0) * draws[:, :3]
        omega = draws[:, 3:]
        omega = omega / np.linalg.norm(omega, axis=-1, keepdims=True)
        g = v[None, :] - u
        g_norm = np.linalg.norm(g, axis=-1)
        g_omega = np.sum(g * omega, axis=-1)
        cos_phi = np.divide(g_omega, g_norm, out=np.zeros_like(g_norm), where=g_norm > 0)
        with np.errstate(divide="ignore"):
            B = np.where(g_norm > 0, g_norm**self._gamma, 0.0) * self._profile.b(cos_phi)
        v_post = v[None, :] - g_omega[:, None] * omega
        u_post = u + g_omega[:, None] * omega
        return B, v_post, u_post

    def sample_row(self, i: int, n_samples: int, normalizer: int, keep: int = 0) -> _RowBatch:
        draws = self._rngs[i].standard_normal((n_samples, 6))
        B, v_post, u_post = self._collide(self._grid.nodes[i], draws)
        W = B * _IMPORTANCE * _SPHERE
        v_idx, v_wts = trilinear(self._grid, v_post)
        u_idx, u_wts = trilinear(self._grid, u_post)
        at_v = (W / normalizer * self._interp_sqrt_mu(u_idx, u_wts))[:, None] * v_wts
        at_u = (W / normalizer * self._interp_sqrt_mu(v_idx, v_wts))[:, None] * u_wts
        n_v = self._grid.n_nodes
        row = np.bincount(v_idx.ravel(), weights=at_v.ravel(), minlength=n_v)
        row += np.bincount(u_idx.ravel(), weights=at_u.ravel(), minlength=n_v)
        batch = _RowBatch(row=row)
        if keep:
            batch.u_idx, batch.u_wts = u_idx[:keep], u_wts[:keep]
            batch.v_idx, batch.v_wts = v_idx[:keep], v_wts[:keep]
            batch.weights = W[:keep] / keep
        return batch


def _map_rows(fn, n_rows: int, workers: int):
    if workers <= 1:
        return [fn(i) for i in range(n_rows)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_rows)))


def _build_stencil(grid: VelocityGrid, batches: list[_RowBatch]) -> GainStencil:
    n_v = grid.n_nodes
    samples = batches[0].weights.shape[0]

    def interp(attr_idx, attr_wts):
        idx = np.concatenate([getattr(b, attr_idx) for b in batches])
        wts = np.concatenate([getattr(b, attr_wts) for b in batches])
        rows = np.repeat(np.arange(n_v * samples), 8)
        return sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n_v * samples, n_v))

    return GainStencil(
        u_interp=interp("u_idx", "u_wts"),
        v_interp=interp("v_idx", "v_wts"),
        weights=np.stack([b.weights for b in batches]),
    )


def asymmetry(K: np.ndarray) -> float:
    denom = np.linalg.norm(K + K.T)
    return float(np.linalg.norm(K - K.T) / denom) if denom > 0 else 0.0


def null_space_residual(K: np.ndarray, nu: np.ndarray, E: np.ndarray) -> float:
    """Largest over basis columns of max_i |(K e - nu e)_i| / max_i |nu e|_i."""
    residual = K @ E - nu[:, None] * E
    return float(np.max(np.max(np.abs(residual), axis=0) / np.max(np.abs(nu[:, None] * E), axis=0)))


def conservative_correction(K: np.ndarray, nu: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Symmetric low-rank update making K E = nu E exact."""
    D = nu[:, None] * E - K @ E
    G = np.linalg.inv(E.T @ E)
    EG = E @ G
    correction = D @ EG.T + EG @ D.T - EG @ (E.T @ D) @ EG.T
    corrected = K + correction
    return 0.5 * (corrected + corrected.T)


def assemble_K(
    grid: VelocityGrid,
    gamma: float,
    b: str = "cos",
    budget: int = 20000,
    seed: int = 0,
    stencil: int = 64,
    max_asymmetry: float = 0.05,
    max_budget: Optional[int] = None,
    workers: int = 1,
    loss: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, Optional[GainStencil], dict]:
    """Returns (K, gain stencil, diagnostics); K is symmetric with exact null vectors."""
    check_gamma(gamma)
    profile = angular_profile(b)
    if budget < 1:
        raise ConfigurationError(f"model.budget must be positive, got {budget}")
    if stencil > budget:
        raise ConfigurationError(f"model.stencil ({stencil}) cannot exceed model.budget ({budget})")
    max_budget = budget if max_budget is None else max(max_budget, budget)
    sampler = _GainSampler(grid, gamma, profile, seed)
    A = loss_matrix(grid, gamma, b) if loss is None else loss
    sqrt_mu = sqrt_maxwellian(grid.nodes)
    nu = A @ sqrt_mu
    K_loss = sqrt_mu[:, None] * A

    with TimerContextManager(f"depositing {budget} gain samples per row over {grid.n_nodes} rows"):
        batches = _map_rows(lambda i: sampler.sample_row(i, budget, budget, keep=stencil), grid.n_nodes, workers)
    gain = np.stack([batch.row for batch in batches])
    gain_stencil = _build_stencil(grid, batches) if stencil > 0 else None
    total = budget

    history = []
    while True:
        a = asymmetry(gain - K_loss)
        history.append({"budget": total, "asymmetry": a})
        logging.info(f"Kernel asymmetry {a:.4e} at {total} samples per row")
        if a <= max_asymmetry or 2 * total > max_budget:
            break
        with TimerContextManager(f"doubling the gain budget to {2 * total} samples per row"):
            extra = _map_rows(lambda i: sampler.sample_row(i, total, total), grid.n_nodes, workers)
        gain = 0.5 * (gain + np.stack([batch.row for batch in extra]))
        total *= 2

    diagnostics = {"asymmetry": a, "budget_used": total, "budget_history": history}
    if a > max_asymmetry:
        raise AssemblyError(
            f"kernel asymmetry {a:.4e} above {max_asymmetry} after {total} samples per row",
            diagnostics,
        )

    K_sym = 0.5 * ((gain - K_loss) + (gain - K_loss).T)
    E = raw_basis(grid)
    diagnostics["null_residual_before_correction"] = null_space_residual(K_sym, nu, E)
    K = conservative_correction(K_sym, nu, E)
    diagnostics["null_residual"] = null_space_residual(K, nu, E)
    logging.info(
        f"Null-space residual {diagnostics['null_residual_before_correction']:.3e} before correction, "
        f"{diagnostics['null_residual']:.3e} after"
    )
    return K, gain_stencil, diagnostics


def assemble_Km(
    grid: VelocityGrid,
    gamma: float,
    m: float,
    b: str = "cos",
    budget: int = 20000,
    seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """The chi_m-localized part of K: gain samples restricted to |u - v| < 2m, uniform in the ball."""
    if not 0.0 < m <= 1.0:
        raise ConfigurationError(f"model.m must lie in (0, 1], got {m}")
    profile = angular_profile(b)
    radius = 2.0 * m
    volume = 4.0 / 3.0 * np.pi * radius**3
    sqrt_mu = sqrt_maxwellian(grid.nodes)
    n_v = grid.n_nodes

    def row(i: int) -> np.ndarray:
        rng = substream(seed, KERNEL_SPLIT, int(round(m * 2**20)), i)
        draws = rng.standard_normal((budget, 6))
        shell = rng.random(budget) ** (1.0 / 3.0)
        v = grid.nodes[i]
        direction = draws[:, :3] / np.linalg.norm(draws[:, :3], axis=-1, keepdims=True)
        u = v[None, :] + radius * shell[:, None] * direction
        omega = draws[:, 3:] / np.linalg.norm(draws[:, 3:], axis=-1, keepdims=True)
        g = v[None, :] - u
        g_norm = np.linalg.norm(g, axis=-1)
        g_omega = np.sum(g * omega, axis=-1)
        cos_phi = np.divide(g_omega, g_norm, out=np.zeros_like(g_norm), where=g_norm > 0)
        with np.errstate(divide="ignore"):
            B = np.where(g_norm > 0, g_norm**gamma, 0.0) * profile.b(cos_phi) * cutoff(g_norm, m)
        W = B * sqrt_maxwellian(u) * volume * _SPHERE / budget
        v_idx, v_wts = trilinear(grid, v[None, :] - g_omega[:, None] * omega)
        u_idx, u_wts = trilinear(grid, u + g_omega[:, None] * omega)
        at_v = (W * np.sum(sqrt_mu[u_idx] * u_wts, axis=-1))[:, None] * v_wts
        at_u = (W * np.sum(sqrt_mu[v_idx] * v_wts, axis=-1))[:, None] * u_wts
        out = np.bincount(v_idx.ravel(), weights=at_v.ravel(), minlength=n_v)
        out += np.bincount(u_idx.ravel(), weights=at_u.ravel(), minlength=n_v)
        return out

    with TimerContextManager(f"assembling the m={m} localized kernel", for_debug=True):
        gain = np.stack(_map_rows(row, n_v, workers))
    Km = gain - sqrt_mu[:, None] * loss_matrix(grid, gamma, b, m=m)
    return 0.5 * (Km + Km.T)


@dataclass(frozen=True)
class KernelSplit:
    km: np.ndarray
    kc: np.ndarray


def split_K(
    K: np.ndarray,
    grid: VelocityGrid,
    gamma: float,
    m: float,
    b: str = "cos",
    budget: int = 20000,
    seed: int = 0,
    workers: int = 1,
    km: Optional[np.ndarray] = None,
) -> KernelSplit:
    """Km + Kc equals K up to the rounding of one subtraction; CollisionModel redefines its K
    as the sum so that the identity is exact there."""
    if not 0.0 < m <= 1.0:
        raise ConfigurationError(f"model.m must lie in (0, 1], got {m}")
    if km is None:
        km = assemble_Km(grid, gamma, m, b, budget, seed, workers)
    return KernelSplit(km=km, kc=K - km)


def operator_sup_norm(matrix: np.ndarray) -> float:
    """Operator norm on bounded fields: the largest absolute row sum."""
    return float(np.max(np.sum(np.abs(matrix), axis=1)))


def cutoff_scaling_exponent(
    grid: VelocityGrid,
    gamma: float,
    ms=(1.0, 0.5, 0.25),
    b: str = "cos",
    budget: int = 20000,
    seed: int = 0,
    workers: int = 1,
) -> tuple[float, list[float]]:
    """Slope of log ||K^m|| against log m."""
    norms = [operator_sup_norm(assemble_Km(grid, gamma, m, b, budget, seed, workers)) for m in ms]
    slope = np.polyfit(np.log(ms), np.log(norms), 1)[0]
    logging.info(f"K^m norms {['%.4e' % n for n in norms]} at m={list(ms)}: exponent {slope:.3f}")
    return float(slope), norms


def kc_weighted_row_sums(kc: np.ndarray, grid: VelocityGrid, spec: WeightSpec) -> np.ndarray:
    """sum_j |Kc_ij| w(v_i) / w(v_j)."""
    w = weight(grid.nodes, spec)
    return np.sum(np.abs(kc) / w[None, :], axis=1) * w


class CollisionOperator(Protocol):
    grid: VelocityGrid
    nu: np.ndarray

    def gain(self, f: np.ndarray) -> np.ndarray: ...

    def apply_L(self, f: np.ndarray) -> np.ndarray: ...

    def gamma_bilinear(self, f: np.ndarray, g: np.ndarray) -> np.ndarray: ...

    @property
    def null_projector(self) -> SpectralProjector: ...


@dataclass(frozen=True)
class CollisionModel:
    grid: VelocityGrid
    gamma: float
    angular: str
    m_cutoff: float
    nu: np.ndarray = field(repr=False)
    k_matrix: np.ndarray = field(repr=False)
    km_matrix: np.ndarray = field(repr=False)
    kc_matrix: np.ndarray = field(repr=False)
    loss: np.ndarray = field(repr=False)
    projector: SpectralProjector = field(repr=False)
    stencil: Optional[GainStencil] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n_v = self.grid.n_nodes
        for name in ("k_matrix", "km_matrix", "kc_matrix", "loss"):
            if getattr(self, name).shape != (n_v, n_v):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected ({n_v}, {n_v})")
        assert np.all(self.nu > 0), "collision frequency must be positive"

    @property
    def null_projector(self) -> SpectralProjector:
        return self.projector

    def gain(self, f: np.ndarray) -> np.ndarray:
        """K f over the last axis; K is symmetric."""
        return np.asarray(f) @ self.k_matrix

    def apply_L(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        return self.nu * f - f @ self.k_matrix

    def gamma_bilinear(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gamma(f, g) with all five moments projected out; pairs rows of f and g."""
        if self.stencil is None:
            raise ConfigurationError("this collision model was built without a gain stencil")
        f, g = np.broadcast_arrays(np.asarray(f, dtype=float), np.asarray(g, dtype=float))
        shape = f.shape
        F = f.reshape(-1, shape[-1])
        G = g.reshape(-1, shape[-1])
        n_v, samples = self.stencil.weights.shape
        at_u = (self.stencil.u_interp @ F.T).reshape(n_v, samples, -1)
        at_v = (self.stencil.v_interp @ G.T).reshape(n_v, samples, -1)
        gain = np.einsum("is,isk->ki", self.stencil.weights, at_u * at_v)
        loss = G * (F @ self.loss.T)
        return self.projector.complement(gain - loss).reshape(shape)

    def summary(self) -> dict:
        ratio = self.nu / (1.0 + self.grid.speed) ** self.gamma
        return {
            "gamma": self.gamma,
            "angular": self.angular,
            "m_cutoff": self.m_cutoff,
            "nu_min": float(self.nu.min()),
            "nu_max": float(self.nu.max()),
            "nu_ratio_bounds": [float(ratio.min()), float(ratio.max())],
            **{k: v for k, v in self.diagnostics.items() if k != "budget_history"},
        }


def build_collision_model(
    grid: VelocityGrid,
    gamma: float = 1.0,
    b: str = "cos",
    m_cutoff: float = 1.0,
    budget: int = 20000,
    seed: int = 0,
    stencil: int = 64,
    max_asymmetry: float = 0.05,
    max_budget: Optional[int] = None,
    workers: int = 1,
    cache_dir: Optional[str] = None,
) -> CollisionModel:
    check_gamma(gamma)
    if not 0.0 < m_cutoff <= 1.0:
        raise ConfigurationError(f"model.m must lie in (0, 1], got {m_cutoff}")
    cache = KernelCache(cache_dir)
    key = CacheKey(gamma, grid.v_max, grid.n_per_axis, m_cutoff, budget, seed)
    A = loss_matrix(grid, gamma, b)
    nu = A @ sqrt_maxwellian(grid.nodes)

    cached_k = cache.load("k", key, b)
    cached_km = cache.load("km", key, b)
    if cached_k is not None and cached_km is not None:
        K, diagnostics = cached_k[0], dict(cached_k[1].get("diagnostics", {}))
        km = cached_km[0]
        diagnostics["from_cache"] = True
        gain_stencil = None
        if stencil > 0:
            sampler = _GainSampler(grid, gamma, angular_profile(b), seed)
            batches = _map_rows(lambda i: sampler.sample_row(i, stencil, stencil, keep=stencil), grid.n_nodes, workers)
            gain_stencil = _build_stencil(grid, batches)
    else:
        K, gain_stencil, diagnostics = assemble_K(
            grid, gamma, b, budget, seed, stencil, max_asymmetry, max_budget, workers, loss=A
        )
        km = assemble_Km(grid, gamma, m_cutoff, b, budget, seed, workers)
        diagnostics["from_cache"] = False
        meta = {"diagnostics": {k: v for k, v in diagnostics.items() if k != "from_cache"}}
        cache.store("k", key, b, K, meta)
        cache.store("km", key, b, km, {})

    split = split_K(K, grid, gamma, m_cutoff, b, km=km)
    return CollisionModel(
        grid=grid,
        gamma=gamma,
        angular=b,
        m_cutoff=m_cutoff,
        nu=nu,
        k_matrix=split.km + split.kc,
        km_matrix=split.km,
        kc_matrix=split.kc,
        loss=A,
        projector=SpectralProjector(grid),
        stencil=gain_stencil,
        diagnostics=diagnostics,
    )


def apply_L(model: CollisionOperator, f: np.ndarray) -> np.ndarray:
    return model.apply_L(f)


def gamma_bilinear(model: CollisionOperator, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return model.gamma_bilinear(f, g)


class LinearizedCollision:
    """f -> -Gamma(f_ref, f) - Gamma(f, f_ref)."""

    def __init__(self, model: CollisionOperator, f_ref: np.ndarray):
        self._model = model
        self._f_ref = np.asarray(f_ref, dtype=float)
        self._trivial = not np.any(self._f_ref)

    def __call__(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if self._trivial:
            return np.zeros(np.broadcast_shapes(f.shape, self._f_ref.shape))
        return -self._model.gamma_bilinear(self._f_ref, f) - self._model.gamma_bilinear(f, self._f_ref)


def linearize_around(model: CollisionOperator, f_ref: np.ndarray) -> LinearizedCollision:
    return LinearizedCollision(model, f_ref)


class BgkSurrogate:
    """Relaxation surrogate f -> nu (f - P_nu f) with P_nu the nu-orthogonal projection onto the
    collision invariants. Symmetric, conservative, and without a quadratic part."""

    def __init__(self, grid: VelocityGrid, gamma: float = 1.0, b: str = "cos"):
        check_gamma(gamma)
        self.grid = grid
        self.gamma = gamma
        self.angular = b
        self.nu = grid_collision_frequency(grid, gamma, b)
        self.projector = SpectralProjector(grid)
        self.weighted_projector = SpectralProjector(grid, metric=self.nu)

    @property
    def null_projector(self) -> SpectralProjector:
        return self.weighted_projector

    def gain(self, f: np.ndarray) -> np.ndarray:
        return self.nu * self.weighted_projector.project(f)

    def apply_L(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        return self.nu * (f - self.weighted_projector.project(f))

    def gamma_bilinear(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(np.shape(f), np.shape(g)))

    def summary(self) -> dict:
        ratio = self.nu / (1.0 + self.grid.speed) ** self.gamma
        return {
            "surrogate": "bgk",
            "gamma": self.gamma,
            "angular": self.angular,
            "nu_min": float(self.nu.min()),
            "nu_max": float(self.nu.max()),
            "nu_ratio_bounds": [float(ratio.min()), float(ratio.max())],
        }


def bgk_surrogate(model: BgkSurrogate, f: np.ndarray) -> np.ndarray:
    return model.apply_L(f)


def rayleigh_quotients(op: CollisionOperator, probes: np.ndarray) -> np.ndarray:
    """<L f, f> / <nu f, f> for the rows of probes."""
    quad = op.grid.quad_weight
    Lf = op.apply_L(probes)
    return np.sum(Lf * probes * quad, axis=-1) / np.sum(op.nu * probes * probes * quad, axis=-1)


def coercivity_constant(
    op: CollisionOperator,
    n_probes: int = 64,
    seed: int = 0,
    refine: bool = True,
    maxiter: int = 200,
) -> float:
    """Smallest Rayleigh quotient over random probes orthogonal to the collision invariants,
    optionally pushed down by LOBPCG on the constrained generalized problem L x = c nu x."""
    rng = substream(seed, COERCIVITY_PROBES)
    projector = op.null_projector
    probes = projector.complement(rng.standard_normal((n_probes, op.grid.n_nodes)))
    quotients = rayleigh_quotients(op, probes)
    best = float(np.min(quotients))
    logging.info(f"Probe coercivity minimum {best:.6f} over {n_probes} probes")
    if not refine:
        return best

    n_v = op.grid.n_nodes
    k = min(8, max(1, n_v // 8))
    start = probes[np.argsort(quotients)[:k]].T
    A = LinearOperator((n_v, n_v), matvec=lambda x: op.apply_L(x.ravel()), matmat=lambda X: op.apply_L(X.T).T)
    B = sp.diags(op.nu)
    # Y^T B x = 0 with Y = E / nu keeps the iterates orthogonal to the invariants
    Y = projector.raw / op.nu[:, None]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            values, _ = lobpcg(A, start, B=B, Y=Y, largest=False, maxiter=maxiter, tol=1e-8)
        refined = float(np.min(values))
        logging.info(f"LOBPCG coercivity estimate {refined:.6f}")
        best = min(best, refined)
    except (np.linalg.LinAlgError, ValueError) as e:
        logging.warning(f"LOBPCG refinement failed ({e}); keeping the probe minimum")
    return best
