"""Periodic cell problems on the torus.

For one side of the interface this module computes the invariant density
``mu`` of ``L = 1/2 Laplacian + b . grad``, the correctors ``g`` solving
``L g_i = -b_i`` with ``int g_i dmu = 0``, and the effective tensor

    D_ij = int (delta_ik + d_k g_i)(delta_jk + d_k g_j) dmu.

Derivatives use central difference stencils of order 4 by default (order 2
and first-order upwind drift are available).  Linear systems are bordered
with one extra row and column and solved by sparse LU.
"""

from dataclasses import dataclass, field
import json
import logging
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (CenteringError, ConvergenceError, DiscretizationError, GridMismatchError,
                     InvalidInputError, SingularSolveError)
from .fields import GridSpec, TorusField, check_centering

log = logging.getLogger(__name__)

# offset -> weight, for h-scaled first and h^2-scaled second derivatives
FIRST_DERIVATIVE = {
    2: {1: 0.5, -1: -0.5},
    4: {1: 2.0 / 3.0, -1: -2.0 / 3.0, 2: -1.0 / 12.0, -2: 1.0 / 12.0},
}
SECOND_DERIVATIVE = {
    2: {1: 1.0, -1: 1.0},
    4: {1: 4.0 / 3.0, -1: 4.0 / 3.0, 2: -1.0 / 12.0, -2: -1.0 / 12.0},
}

SOLVE_TOL = 1e-10
CENTERING_TOL = 1e-8
NEGATIVE_CLIP = 1e-12
ASYMMETRY_TOL = 1e-6


def assemble_generator(drift, shape, h, periodic, order=4, upwind=False):
    """Sparse matrix of ``1/2 Laplacian + drift . grad`` on a tensor grid.

    ``drift`` has shape ``(prod(shape), d)`` in row-major node order.  Along
    non-periodic axes, stencil entries falling outside the grid are dropped;
    rows near such edges are then not conservative and must not be used.
    Diagonal entries are set to minus the sum of the off-diagonal ones, so
    constants are annihilated up to a single rounding.
    """
    if order not in FIRST_DERIVATIVE:
        raise InvalidInputError(f"unsupported stencil order {order}")
    if upwind and order != 2:
        raise InvalidInputError("upwind drift is only available with order 2")
    shape = tuple(shape)
    d = len(shape)
    size = int(np.prod(shape))
    drift = np.asarray(drift, dtype=float).reshape(size, d)
    if not np.all(np.isfinite(drift)):
        raise InvalidInputError("non-finite drift sample")
    idx = np.arange(size).reshape(shape)
    rows, cols, vals = [], [], []
    for a in range(d):
        offsets = set(SECOND_DERIVATIVE[order]) | set(FIRST_DERIVATIVE[order])
        if upwind:
            offsets |= {1, -1}
        for o in sorted(offsets):
            w = 0.5 * SECOND_DERIVATIVE[order].get(o, 0.0) / h**2 * np.ones(size)
            if upwind:
                ba = drift[:, a]
                if o == 1:
                    w = w + np.maximum(ba, 0.0) / h
                elif o == -1:
                    w = w - np.minimum(ba, 0.0) / h
            else:
                w = w + drift[:, a] * FIRST_DERIVATIVE[order].get(o, 0.0) / h
            nb = np.roll(idx, -o, axis=a)
            valid = np.ones(shape, dtype=bool)
            if not periodic[a]:
                pos = np.arange(shape[a]) + o
                ok = (pos >= 0) & (pos < shape[a])
                valid = np.broadcast_to(
                    ok.reshape([-1 if ax == a else 1 for ax in range(d)]), shape)
            valid = valid.ravel()
            rows.append(idx.ravel()[valid])
            cols.append(nb.ravel()[valid])
            vals.append(w[valid])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(size, size))
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def derivative(f, shape, h, axis, order=4):
    """Periodic central-difference derivative of a grid function."""
    f = np.asarray(f).reshape(shape)
    out = np.zeros(shape)
    for o, w in FIRST_DERIVATIVE[order].items():
        out += w * np.roll(f, -o, axis=axis)
    return (out / h).ravel()


@dataclass(frozen=True)
class GeneratorMatrix:
    matrix: sp.csr_matrix
    grid: GridSpec
    drift: np.ndarray
    order: int = 4
    upwind: bool = False

    def apply(self, f):
        return self.matrix @ np.asarray(f, dtype=float).ravel()


def discretize_generator(b, grid, order=4, upwind=False):
    """Assemble the torus generator for the field ``b`` on ``grid``."""
    if b.dim != grid.dim:
        raise GridMismatchError(f"field dimension {b.dim} != grid dimension {grid.dim}")
    drift = b(grid.points())
    mat = assemble_generator(drift, grid.shape, grid.h, (True,) * grid.dim, order, upwind)
    return GeneratorMatrix(mat, grid, drift, order, upwind)


def _factorize(matrix):
    try:
        return spla.splu(matrix.tocsc())
    except RuntimeError as exc:
        raise SingularSolveError(f"bordered system is singular: {exc}") from exc


def _refined_solve(lu, matrix, rhs, sweeps=2):
    x = lu.solve(rhs)
    for _ in range(sweeps):
        x = x + lu.solve(rhs - matrix @ x)
    return x


def _relative_residual(matrix, x, rhs):
    r = matrix @ x - rhs
    scale = abs(matrix).max() * np.max(np.abs(x)) + np.max(np.abs(rhs)) + 1e-300
    return float(np.max(np.abs(r)) / scale)


def solve_invariant_density(L):
    """Density ``mu`` with ``L^* mu = 0`` and ``sum(mu) h^d = 1``.

    Returns ``(mu, residual)``, the residual being ``max|L^T mu|`` relative to
    the operator scale.  Tiny negative values are clipped; larger ones raise
    :class:`DiscretizationError`.
    """
    grid = L.grid
    w = grid.cell_volume
    size = grid.size
    adj = L.matrix.T.tocsc()
    bordered = sp.bmat([[adj, sp.csc_matrix(np.ones((size, 1)))],
                        [sp.csc_matrix(np.full((1, size), w)), None]], format="csc")
    rhs = np.zeros(size + 1)
    rhs[-1] = 1.0
    lu = _factorize(bordered)
    sol = _refined_solve(lu, bordered, rhs)
    mu, lam = sol[:size], sol[-1]
    if not np.all(np.isfinite(sol)):
        raise SingularSolveError("invariant density solve produced non-finite values")
    scale = np.max(np.abs(mu))
    # a simple null space forces the multiplier to vanish: 1^T L^T = (L 1)^T = 0
    if abs(lam) > 1e-8 * abs(adj).max() * scale:
        raise SingularSolveError(f"adjoint null space is not simple (multiplier {lam:.3e})")
    if mu.min() < -NEGATIVE_CLIP * scale:
        raise DiscretizationError(
            f"invariant density has negative values down to {mu.min():.3e}; "
            "refine the grid or use the upwind scheme")
    mu = np.where(mu < 0.0, 0.0, mu)
    mu = mu / (mu.sum() * w)
    resid = float(np.max(np.abs(adj @ mu)) / (abs(adj).max() * scale))
    return mu, resid


def solve_corrector(L, b, mu, tol=CENTERING_TOL):
    """Correctors ``g_i`` with ``L g_i = -b_i`` and ``int g_i dmu = 0``.

    Returns ``(g, residuals)`` with ``g`` of shape ``(d, n^d)``.
    """
    grid = L.grid
    size = grid.size
    w = grid.cell_volume
    mu = np.asarray(mu, dtype=float).ravel()
    if mu.size != size:
        raise GridMismatchError("density and generator grids differ")
    centering = check_centering(b, mu, grid)
    if np.max(np.abs(centering)) > tol:
        raise CenteringError(
            f"drift is not centered with respect to mu (residual {centering}); "
            "the corrector equation has no solution")
    bordered = sp.bmat([[L.matrix, sp.csr_matrix(np.ones((size, 1)))],
                        [sp.csr_matrix(w * mu[None, :]), None]], format="csc")
    lu = _factorize(bordered)
    g = np.zeros((grid.dim, size))
    residuals = []
    for i in range(grid.dim):
        rhs = np.concatenate([-L.drift[:, i], [0.0]])
        sol = _refined_solve(lu, bordered, rhs)
        gi = sol[:size]
        gi -= np.sum(gi * mu) * w
        g[i] = gi
        res = _relative_residual(L.matrix, gi, -L.drift[:, i] + sol[-1])
        if not np.isfinite(res) or res > SOLVE_TOL:
            raise ConvergenceError(f"corrector solve residual {res:.3e} exceeds {SOLVE_TOL}")
        residuals.append(res)
    return g, residuals


def effective_tensor(g, mu, grid, order=4, strict=False):
    """Effective diffusion tensor; returns ``(D, asymmetry)``."""
    g = np.asarray(g, dtype=float)
    mu = np.asarray(mu, dtype=float).ravel()
    d = grid.dim
    if g.shape != (d, grid.size) or mu.size != grid.size:
        raise GridMismatchError("correctors, density and grid are inconsistent")
    # A[i, k] = delta_ik + d_k g_i, one grid function per entry
    A = np.empty((d, d, grid.size))
    for i in range(d):
        for k in range(d):
            A[i, k] = derivative(g[i], grid.shape, grid.h, k, order) + (1.0 if i == k else 0.0)
    D = np.einsum("ikn,jkn,n->ij", A, A, mu) * grid.cell_volume
    asym = float(np.max(np.abs(D - D.T)))
    if asym > ASYMMETRY_TOL:
        msg = f"effective tensor asymmetry {asym:.3e} exceeds {ASYMMETRY_TOL}"
        if strict:
            raise DiscretizationError(msg)
        warnings.warn(msg)
    return 0.5 * (D + D.T), asym


@dataclass
class CellSolution:
    side: str
    grid: GridSpec
    mu: np.ndarray
    g: np.ndarray
    D: np.ndarray
    residuals: dict = field(default_factory=dict)
    order: int = 4
    upwind: bool = False

    def to_dict(self):
        return {
            "side": self.side,
            "grid": {"n": self.grid.n, "dim": self.grid.dim},
            "order": self.order,
            "upwind": self.upwind,
            "mu": self.mu.tolist(),
            "g": [gi.tolist() for gi in self.g],
            "D": self.D.tolist(),
            "residuals": self.residuals,
        }

    @classmethod
    def from_dict(cls, data):
        grid = GridSpec(int(data["grid"]["n"]), int(data["grid"]["dim"]))
        return cls(data["side"], grid, np.asarray(data["mu"], dtype=float),
                   np.asarray(data["g"], dtype=float), np.asarray(data["D"], dtype=float),
                   dict(data.get("residuals", {})), int(data.get("order", 4)),
                   bool(data.get("upwind", False)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def solve_cell(side, b, grid, order=4, upwind=False, strict=False):
    """Full cell pipeline for one side: generator, density, correctors, tensor."""
    if side not in ("+", "-"):
        raise InvalidInputError(f"side must be '+' or '-', got {side!r}")
    if not isinstance(b, TorusField):
        raise InvalidInputError("cell problems take a TorusField")
    L = discretize_generator(b, grid, order, upwind)
    mu, res_mu = solve_invariant_density(L)
    centering = check_centering(b, mu, grid)
    g, res_g = solve_corrector(L, b, mu)
    D, asym = effective_tensor(g, mu, grid, order, strict)
    eig = np.linalg.eigvalsh(D)
    if eig.min() <= 0:
        raise DiscretizationError(f"effective tensor is not positive definite: {eig}")
    log.debug("cell %s: D=%s", side, D.tolist())
    residuals = {
        "density": res_mu,
        "corrector": res_g,
        "centering": centering.tolist(),
        "asymmetry": asym,
    }
    return CellSolution(side, grid, mu, g, D, residuals, order, upwind)
