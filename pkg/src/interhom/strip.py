"""Invariant measure on the strip and the interface parameters.

The sigma-finite invariant measure of the full process on ``R x T^{d-1}`` is
computed on ``[-K, K] x T^{d-1}``.  The outermost unit cell on each side is
closed by ``mu = c_pm mu_pm`` (the torus densities from the cell problems),
with ``c_pm`` unknowns of the same sparse system.  Two scalar equations close
the system: zero net probability flux through ``x_1 = 0`` and
``c_+ + c_- = 1``.

From the measure we read off the limiting cell masses ``q_pm``, the exit
weights ``p_pm = q_pm D11_pm / (q_+ D11_+ + q_- D11_-)``, the tangential
interface drift ``alpha_j = 2 (p_+/D11_+ + p_-/D11_-) int b_j dmu`` and the
coefficients ``M_pm``, ``K`` of the limiting SDE.
"""

from dataclasses import dataclass, field
import json
import logging
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell import assemble_generator, CellSolution
from .errors import (DiscretizationError, GridMismatchError, InvalidInputError,
                     SingularSolveError, TruncationError)
from .fields import GridSpec, eval_drift

log = logging.getLogger(__name__)

DEFAULT_K_TRUNC = 8
MAX_K_TRUNC = 64
MIN_K_TRUNC = 4
NEGATIVE_CLIP = 1e-10
MASS_FLOOR = 1e-11
BURN_IN = 1
R2_MIN = 0.95
ALPHA_TAIL_TOL = 1e-6


@dataclass(frozen=True)
class QExtraction:
    q_plus: float
    q_minus: float
    rate_plus: float
    rate_minus: float
    r2_plus: float
    r2_minus: float
    tail_plus: float
    tail_minus: float
    scale: float

    @property
    def below_floor(self):
        return self.rate_plus is None and self.rate_minus is None


def _fit_side(m, burn_in):
    """Exponential fit of the cell-mass increments on one side.

    Returns ``(rate, r2, tail)`` where ``tail`` bounds the error of the
    average of the two outermost masses as an estimate of the limit.
    """
    inc = np.abs(np.diff(m))
    j = np.arange(inc.size)
    keep = (j >= burn_in) & (inc > MASS_FLOOR)
    if keep.sum() < 2:
        return None, None, MASS_FLOOR
    x, y = j[keep], np.log(inc[keep])
    slope, icpt = np.polyfit(x, y, 1)
    pred = slope * x + icpt
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    if slope >= 0:
        raise TruncationError(
            f"cell masses do not converge (fitted log-slope {slope:.3g} >= 0); "
            "increase k_trunc")
    rate = -slope
    r = math.exp(-rate)
    last = inc[-1]
    if last <= MASS_FLOOR:
        # outermost increment already at roundoff: extrapolate the fit instead
        last = math.exp(slope * (inc.size - 1) + icpt)
    tail = last * (1 + r) / (2 * (1 - r)) + MASS_FLOOR
    return rate, r2, tail


def extract_q(masses_plus, masses_minus, burn_in=BURN_IN):
    """Limits ``q_pm`` of the unit-cell masses, normalized so that ``q_+ + q_- = 1``.

    ``masses_plus[j]`` is the mass of ``[j, j+1] x T^{d-1}`` and
    ``masses_minus[j]`` that of ``[-j-1, -j] x T^{d-1}``.  The limit is the
    average of the two outermost cells; the decay rate per cell comes from a
    log-linear fit of successive mass differences past ``burn_in``.
    """
    mp = np.asarray(masses_plus, dtype=float)
    mm = np.asarray(masses_minus, dtype=float)
    if mp.size < 4 or mm.size < 4:
        raise InvalidInputError("need at least 4 cell masses per side")
    qp_raw = 0.5 * (mp[-1] + mp[-2])
    qm_raw = 0.5 * (mm[-1] + mm[-2])
    scale = qp_raw + qm_raw
    if not scale > 0:
        raise InvalidInputError("cell masses must have a positive limit")
    mp, mm = mp / scale, mm / scale
    q_plus = qp_raw / scale
    rp, r2p, tp = _fit_side(mp, burn_in)
    rm, r2m, tm = _fit_side(mm, burn_in)
    return QExtraction(q_plus, 1.0 - q_plus, rp, rm, r2p, r2m, tp, tm, scale)


@dataclass
class StripMeasure:
    grid: GridSpec
    density: np.ndarray
    masses_plus: np.ndarray
    masses_minus: np.ndarray
    q: QExtraction
    closure: tuple
    residual: float

    @property
    def k_trunc(self):
        return self.grid.k_trunc

    @property
    def q_plus(self):
        return self.q.q_plus

    @property
    def q_minus(self):
        return self.q.q_minus

    def x1(self):
        k, n = self.grid.k_trunc, self.grid.n
        return -k + np.arange(2 * k * n) / n

    def summary(self):
        q = self.q
        return {
            "k_trunc": self.k_trunc,
            "n": self.grid.n,
            "q_plus": q.q_plus,
            "q_minus": q.q_minus,
            "rate_plus": q.rate_plus,
            "rate_minus": q.rate_minus,
            "r2_plus": q.r2_plus,
            "r2_minus": q.r2_minus,
            "tail_plus": q.tail_plus,
            "tail_minus": q.tail_minus,
            "masses_plus": self.masses_plus.tolist(),
            "masses_minus": self.masses_minus.tolist(),
            "residual": self.residual,
        }


def strip_weights(grid):
    """Trapezoid weights in ``x_1`` over ``[-K, K]``.

    ``x_1 = K`` is not a node; the outer layer is periodic, so its value is
    the one at ``x_1 = K - 1``.
    """
    k, n = grid.k_trunc, grid.n
    w = np.ones(2 * k * n)
    w[0] = 0.5
    w[-n] += 0.5
    return w


def _cell_masses(density, grid):
    """Trapezoid masses of the unit cells on both sides of the interface."""
    k, n, h = grid.k_trunc, grid.n, grid.h
    marg = density.reshape(grid.strip_shape()).reshape(2 * k * n, -1).sum(axis=1)
    marg = marg * h ** (grid.dim - 1)
    # x1 = K is not a node; the outer layer is periodic so it equals x1 = K - 1
    marg = np.append(marg, marg[-n])

    def mass(a):
        i = (a + k) * n
        seg = marg[i:i + n + 1]
        return h * (seg.sum() - 0.5 * (seg[0] + seg[-1]))

    plus = np.array([mass(j) for j in range(k)])
    minus = np.array([mass(-j - 1) for j in range(k)])
    return plus, minus


def _solve_truncated(field_, cells, grid, order):
    k, n, d = grid.k_trunc, grid.n, grid.dim
    shape = grid.strip_shape()
    size = int(np.prod(shape))
    pts = grid.strip_points()
    drift = eval_drift(field_, pts)
    L = assemble_generator(drift, shape, grid.h, (False,) + (True,) * (d - 1), order)
    i1 = np.repeat(np.arange(shape[0]), size // shape[0])
    left = i1 <= n
    right = i1 >= shape[0] - n
    inner = ~(left | right)
    torus_index = np.ravel_multi_index(
        ((i1 % n),) + tuple(np.unravel_index(np.arange(size), shape)[1:]), (n,) * d)
    far_plus = np.where(right, cells[0].mu[torus_index], 0.0)
    far_minus = np.where(left, cells[1].mu[torus_index], 0.0)

    A = L.T.tocsr()
    A_I = A[inner]
    col_plus = A_I @ far_plus
    col_minus = A_I @ far_minus
    A_II = A_I[:, inner]

    step = (i1 >= k * n).astype(float)
    flux = L @ step
    # away from x1 = 0 the step is locally constant, so only row-sum roundoff remains
    if np.max(np.abs(flux[~inner])) > 1e-10 * np.max(np.abs(flux)):
        raise InvalidInputError("flux functional reaches the closure layer; grid too coarse")
    flux[np.abs(i1 - k * n) > 2 * order] = 0.0
    flux_row = sp.csr_matrix(np.concatenate([flux[inner], [flux @ far_plus, flux @ far_minus]]))
    system = sp.bmat([
        [A_II, sp.csr_matrix(col_plus[:, None]), sp.csr_matrix(col_minus[:, None])],
        [flux_row[:, :-2], flux_row[:, -2:-1], flux_row[:, -1:]],
        [None, sp.csr_matrix([[1.0]]), sp.csr_matrix([[1.0]])],
    ], format="csc")
    rhs = np.zeros(system.shape[0])
    rhs[-1] = 1.0
    try:
        lu = spla.splu(system)
    except RuntimeError as exc:
        raise SingularSolveError(f"strip system is singular: {exc}") from exc
    sol = lu.solve(rhs)
    sol = sol + lu.solve(rhs - system @ sol)
    if not np.all(np.isfinite(sol)):
        raise SingularSolveError("strip solve produced non-finite values")
    c_plus, c_minus = sol[-2], sol[-1]
    density = c_plus * far_plus + c_minus * far_minus
    density[inner] = sol[:-2]
    scale = np.max(np.abs(density))
    resid = float(np.max(np.abs(system @ sol - rhs)) / (abs(system).max() * scale))
    if density.min() < -NEGATIVE_CLIP * scale:
        raise DiscretizationError(
            f"strip density has negative values down to {density.min():.3e}")
    density = np.where(density < 0.0, 0.0, density)
    return density, (float(c_plus), float(c_minus)), resid


def solve_strip_measure(field_, cells, grid, order=4, auto_double=True, max_k_trunc=MAX_K_TRUNC):
    """Invariant measure on the truncated strip.

    ``cells`` is the pair ``(plus, minus)`` of :class:`CellSolution`.  When
    the exponential fit of the cell masses is poor (``R^2 < 0.95``) or not
    decaying, ``k_trunc`` is doubled up to ``max_k_trunc``.
    """
    plus, minus = cells
    if grid.k_trunc is None:
        grid = GridSpec(grid.n, grid.dim, DEFAULT_K_TRUNC)
    if grid.k_trunc < MIN_K_TRUNC:
        raise InvalidInputError(f"k_trunc must be >= {MIN_K_TRUNC}")
    for c in (plus, minus):
        if c.grid.n != grid.n or c.grid.dim != grid.dim:
            raise GridMismatchError("cell solutions and strip grid differ")
    if field_.dim != grid.dim:
        raise GridMismatchError("field and strip grid dimensions differ")
    while True:
        density, closure, resid = _solve_truncated(field_, (plus, minus), grid, order)
        mp, mm = _cell_masses(density, grid)
        try:
            q = extract_q(mp, mm)
            poor = any(r2 is not None and r2 < R2_MIN for r2 in (q.r2_plus, q.r2_minus))
            err = None
        except TruncationError as exc:
            poor, err = True, exc
        if poor and auto_double and 2 * grid.k_trunc <= max_k_trunc:
            log.info("strip fit contaminated at k_trunc=%d, doubling", grid.k_trunc)
            grid = GridSpec(grid.n, grid.dim, 2 * grid.k_trunc)
            continue
        if err is not None:
            raise err
        break
    density = density / q.scale
    return StripMeasure(grid, density, mp / q.scale, mm / q.scale, q,
                        (closure[0] / q.scale, closure[1] / q.scale), resid)


def compute_p(q, D):
    """Exit weights ``(p_+, p_-)`` from cell limits ``q = (q_+, q_-)`` and tensors ``D = (D_+, D_-)``."""
    qp, qm = q
    dp = float(np.atleast_2d(D[0])[0, 0])
    dm = float(np.atleast_2d(D[1])[0, 0])
    if dp <= 0 or dm <= 0:
        raise InvalidInputError("normal diffusivities D11 must be positive")
    if abs(qp + qm - 1.0) > 1e-12:
        raise InvalidInputError(f"q must be normalized to q_+ + q_- = 1, got {qp + qm}")
    p_plus = qp * dp / (qp * dp + qm * dm)
    return p_plus, 1.0 - p_plus


@dataclass(frozen=True)
class AlphaResult:
    alpha: np.ndarray
    integrals: np.ndarray
    tail_residual: np.ndarray


def compute_alpha(strip, field_, p, D, cells=None, tol=ALPHA_TAIL_TOL):
    """Tangential interface drift ``alpha_j``, ``j = 2..d``.

    ``int b_j dmu`` is a quadrature over the truncated strip.  Beyond the
    truncation each unit cell contributes ``c_pm int b_pm,j dmu_pm``, zero by
    centering; what remains (the discrete centering residual per cell plus the
    fitted strip tail) is reported and must stay below ``tol``.
    """
    grid = strip.grid
    d = grid.dim
    if d == 1:
        empty = np.zeros(0)
        return AlphaResult(empty, empty, empty)
    pts = grid.strip_points()
    b = eval_drift(field_, pts)
    w = np.repeat(strip_weights(grid), grid.n ** (d - 1)) * grid.cell_volume
    integrals = b[:, 1:].T @ (strip.density * w)
    factor = 2.0 * (p[0] / np.atleast_2d(D[0])[0, 0] + p[1] / np.atleast_2d(D[1])[0, 0])
    tail = np.zeros(d - 1)
    sup = field_.sup_bound()[1:]
    tail += sup * max(strip.q.tail_plus, strip.q.tail_minus)
    if cells is not None:
        for cell, tf, c in ((cells[0], field_.plus, strip.closure[0]),
                            (cells[1], field_.minus, strip.closure[1])):
            per_cell = tf(cell.grid.points())[:, 1:].T @ cell.mu * cell.grid.cell_volume
            tail += abs(c) * np.abs(per_cell)
    if np.any(tail > tol):
        raise TruncationError(f"tangential drift tail residual {tail} exceeds {tol}")
    return AlphaResult(factor * integrals, integrals, tail)


@dataclass
class InterfaceParams:
    """Coefficients of the limiting process.

    ``K[0] = p_+ - p_-``, ``K[j] = alpha_j``; ``M_pm`` lower-triangular with
    ``M M^T = D``.
    """

    p_plus: float
    p_minus: float
    alpha: np.ndarray
    D_plus: np.ndarray
    D_minus: np.ndarray
    M_plus: np.ndarray
    M_minus: np.ndarray
    K: np.ndarray
    q_plus: float = None
    q_minus: float = None
    extra: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.D_plus.shape[0]

    @property
    def skew_scale(self):
        """``c = p_+/sqrt(D11_+) + p_-/sqrt(D11_-)`` of the natural-scale map."""
        return (self.p_plus / math.sqrt(self.D_plus[0, 0])
                + self.p_minus / math.sqrt(self.D_minus[0, 0]))

    @property
    def skew_beta(self):
        """Probability that the unit-lattice skew walk steps up from 0."""
        return self.p_plus / math.sqrt(self.D_plus[0, 0]) / self.skew_scale

    def to_dict(self):
        out = {
            "p_plus": self.p_plus,
            "p_minus": self.p_minus,
            "alpha": np.asarray(self.alpha).tolist(),
            "D_plus": self.D_plus.tolist(),
            "D_minus": self.D_minus.tolist(),
            "M_plus": self.M_plus.tolist(),
            "M_minus": self.M_minus.tolist(),
            "K": self.K.tolist(),
            "q_plus": self.q_plus,
            "q_minus": self.q_minus,
            "skew_walk": {"beta_plus": self.skew_beta, "local_time_per_visit_over_h":
                          1.0 / self.skew_scale},
        }
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {"p_plus", "p_minus", "alpha", "D_plus", "D_minus", "M_plus", "M_minus", "K",
                 "q_plus", "q_minus", "skew_walk"}
        return cls(float(data["p_plus"]), float(data["p_minus"]),
                   np.asarray(data["alpha"], dtype=float),
                   np.asarray(data["D_plus"], dtype=float), np.asarray(data["D_minus"], dtype=float),
                   np.asarray(data["M_plus"], dtype=float), np.asarray(data["M_minus"], dtype=float),
                   np.asarray(data["K"], dtype=float), data.get("q_plus"), data.get("q_minus"),
                   {k: v for k, v in data.items() if k not in known})

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _factor(D, name):
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1] or not np.allclose(D, D.T, rtol=0, atol=1e-12):
        raise InvalidInputError(f"{name} must be a symmetric square matrix")
    try:
        return np.linalg.cholesky(D)
    except np.linalg.LinAlgError as exc:
        raise InvalidInputError(f"{name} is not positive definite") from exc


def params_from_values(p_plus, D_plus, D_minus, alpha=(), q=(None, None), extra=None):
    """Build :class:`InterfaceParams` directly from ``p_+``, ``D_pm`` and ``alpha``."""
    D_plus = np.atleast_2d(np.asarray(D_plus, dtype=float))
    D_minus = np.atleast_2d(np.asarray(D_minus, dtype=float))
    if D_plus.shape != D_minus.shape:
        raise InvalidInputError("D_plus and D_minus must have the same shape")
    alpha = np.asarray(alpha, dtype=float).ravel()
    if alpha.size != D_plus.shape[0] - 1:
        raise InvalidInputError(f"alpha needs {D_plus.shape[0] - 1} entries")
    if not 0.0 < p_plus < 1.0:
        raise InvalidInputError(f"p_+ must lie in (0, 1), got {p_plus}")
    p_minus = 1.0 - p_plus
    M_plus, M_minus = _factor(D_plus, "D_plus"), _factor(D_minus, "D_minus")
    K = np.concatenate([[p_plus - p_minus], alpha])
    return InterfaceParams(float(p_plus), float(p_minus), alpha, D_plus, D_minus,
                           M_plus, M_minus, K, q[0], q[1], dict(extra or {}))


def assemble_interface_params(cells, q, alpha):
    """Interface parameters from the cell pair, ``q = (q_+, q_-)`` and ``alpha``."""
    plus, minus = cells
    if isinstance(plus, CellSolution):
        D_plus, D_minus = plus.D, minus.D
    else:
        D_plus, D_minus = np.atleast_2d(plus), np.atleast_2d(minus)
    p_plus, _ = compute_p(q, (D_plus, D_minus))
    params = params_from_values(p_plus, D_plus, D_minus, alpha, q)
    for M, D in ((params.M_plus, params.D_plus), (params.M_minus, params.D_minus)):
        err = np.max(np.abs(M @ M.T - D))
        if err > 1e-12 * max(1.0, np.max(np.abs(D))):
            raise DiscretizationError(f"factorization check failed ({err:.3e})")
    return params
