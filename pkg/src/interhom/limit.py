"""The limiting process and checks of its martingale problem.

The first coordinate is a skew random walk on the lattice ``j h`` in natural
scale: site ``j`` sits at ``j h sqrt(D11_+)`` for ``j > 0`` and at
``j h sqrt(D11_-)`` for ``j < 0``.  One step takes time ``h^2``, so each side
diffuses with its own ``D11``.  Away from 0 the walk is symmetric.  From 0 it
steps up with probability

    beta_+ = (p_+ / sqrt(D11_+)) / c,    c = p_+ / sqrt(D11_+) + p_- / sqrt(D11_-),

which makes the exit probability through symmetric physical levels equal to
``p_+``.  Each visit to 0 adds ``h / c`` to the symmetric local time ``L``; the
mean displacement of a visit is then exactly ``(p_+ - p_-) dL``.

The tangential coordinates move by the rows ``2..d`` of ``M_+`` or ``M_-``
applied to the step's Brownian increment, plus ``alpha dL``.  A step leaving
0 uses the side it moves to; the mean this gives the coupling ``M_i1 dW_1``
(``(p_+ rho_+ - p_- rho_-) dL`` with ``rho = M_i1 / M_11``) is subtracted, so
``E X_i(T) = alpha_i E L(T)`` holds exactly for the walk.
"""

from dataclasses import dataclass
import math

import numpy as np
from numba import njit
from scipy import stats

from .errors import DegenerateParameterError, DomainError, InvalidInputError
from .rng import mix64, path_keys, stream_key, uniform, gauss_pair
from .sde import PathEstimate
from .strip import InterfaceParams

DEFAULT_H = 0.01
MIN_STEPS = 10_000
GLUING_TOL = 1e-10
KS_C_ALPHA = 1.628  # two-sample KS coefficient at the 1% level
_NORMAL_SALT = np.uint64(0x3C6EF372FE94F82B)


@dataclass(frozen=True)
class LimitScheme:
    params: InterfaceParams
    h: float = DEFAULT_H
    T: float = 1.0
    seed: int = 0
    min_steps: int = MIN_STEPS

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise InvalidInputError("h must be positive")
        if not 0.0 < self.params.p_plus < 1.0:
            raise DegenerateParameterError("p_+ must lie strictly between 0 and 1")
        n = self.T / self.h ** 2
        if abs(n - round(n)) > 1e-6 * max(n, 1.0) or round(n) < 1:
            raise InvalidInputError(f"T = {self.T} is not a whole number of steps of length h^2")
        if round(n) < self.min_steps:
            raise InvalidInputError(
                f"only {round(n)} steps fill T; need at least {self.min_steps} (reduce h)")

    @property
    def nsteps(self):
        return int(round(self.T / self.h ** 2))

    @property
    def dt(self):
        return self.h ** 2

    @property
    def beta_plus(self):
        return self.params.skew_beta

    @property
    def local_time_step(self):
        return self.h / self.params.skew_scale

    def describe(self):
        p = self.params
        return {
            "h": self.h, "T": self.T, "steps": self.nsteps,
            "beta_plus": self.beta_plus,
            "local_time_step": self.local_time_step,
            "mapping": "natural scale x -> sqrt(D11_pm) x; "
                       "beta_+ = (p_+/sqrt(D11_+)) / (p_+/sqrt(D11_+) + p_-/sqrt(D11_-)); "
                       "dL = h / (p_+/sqrt(D11_+) + p_-/sqrt(D11_-)) per visit to 0",
            "sqrt_D11": [math.sqrt(p.D_plus[0, 0]), math.sqrt(p.D_minus[0, 0])],
        }


def _arrays(scheme):
    p = scheme.params
    d = p.dim
    # tangential drift per unit local time: alpha minus the mean that the
    # side-dependent coupling M_i1 dW_1 picks up on steps leaving 0
    rho_p = p.M_plus[1:, 0] / p.M_plus[0, 0]
    rho_m = p.M_minus[1:, 0] / p.M_minus[0, 0]
    drift = np.asarray(p.alpha, dtype=float).reshape(d - 1) - (p.p_plus * rho_p - p.p_minus * rho_m)
    return (np.ascontiguousarray(p.M_plus), np.ascontiguousarray(p.M_minus),
            np.ascontiguousarray(drift), math.sqrt(p.D_plus[0, 0]), math.sqrt(p.D_minus[0, 0]))


@njit(cache=True)
def _walk(keys, j0, xt0, mp, mm, ldrift, sp, sm, beta, dl, h, nsteps, stop_plus, stop_minus,
          rec_stride, xt_out, j_out, l_out, tplus_out, rec):
    """Skew walk with tangential coordinates.

    A step leaving 0 belongs to the side it moves to.  Its first Brownian
    increment is the lattice step itself; ``ldrift`` (per unit local time)
    removes the mean this gives the coupled tangential noise, so that
    ``int M_i1(X_1) dW_1`` stays a martingale.

    Stops early when the lattice index reaches ``stop_plus`` or
    ``-stop_minus`` (pass 0 to disable).  ``rec`` receives ``(t, x_1..x_d, L)``
    every ``rec_stride`` steps for path 0 when it has rows.
    """
    n = keys.shape[0]
    d = mp.shape[0]
    dw = np.empty(d)
    xt = np.empty(d)
    dt = h * h
    for p in range(n):
        key = keys[p]
        nkey = mix64(key ^ _NORMAL_SALT)
        j = j0
        for i in range(1, d):
            xt[i] = xt0[i]
        L = 0.0
        tplus = 0.0
        pair = 0
        spare = 0.0
        have = False
        r = 0
        for s in range(nsteps):
            if p == 0 and rec.shape[0] > 0 and s % rec_stride == 0:
                rec[r, 0] = s * dt
                rec[r, 1] = j * h * (sp if j > 0 else sm)
                for i in range(1, d):
                    rec[r, 1 + i] = xt[i]
                rec[r, d + 1] = L
                r += 1
            u = uniform(key, s)
            if j == 0:
                up = u <= beta
                L += dl
                side = 1 if up else -1
                step = h if up else -h
                dw[0] = step
            else:
                up = u <= 0.5
                side = 1 if j > 0 else -1
                step = h if up else -h
                dw[0] = step
            for i in range(1, d):
                if have:
                    dw[i] = h * spare
                    have = False
                else:
                    g0, g1 = gauss_pair(nkey, pair)
                    pair += 1
                    dw[i] = h * g0
                    spare = g1
                    have = True
            for i in range(1, d):
                acc = 0.0
                for k in range(d):
                    acc += (mp[i, k] if side > 0 else mm[i, k]) * dw[k]
                if j == 0:
                    acc += ldrift[i - 1] * dl
                xt[i] += acc
            if side > 0:
                tplus += dt
            j += 1 if up else -1
            if (stop_plus > 0 and j >= stop_plus) or (stop_minus > 0 and j <= -stop_minus):
                break
        if p == 0 and rec.shape[0] > 0 and r < rec.shape[0]:
            rec[r, 0] = nsteps * dt
            rec[r, 1] = j * h * (sp if j > 0 else sm)
            for i in range(1, d):
                rec[r, 1 + i] = xt[i]
            rec[r, d + 1] = L
        j_out[p] = j
        for i in range(1, d):
            xt_out[p, i] = xt[i]
        l_out[p] = L
        tplus_out[p] = tplus


def _lattice_index(scheme, x1):
    p = scheme.params
    scale = math.sqrt(p.D_plus[0, 0] if x1 > 0 else p.D_minus[0, 0]) * scheme.h
    return int(round(x1 / scale))


def _position(scheme, j):
    p = scheme.params
    j = np.asarray(j)
    return np.where(j > 0, math.sqrt(p.D_plus[0, 0]), math.sqrt(p.D_minus[0, 0])) * j * scheme.h


@dataclass
class LimitSample:
    """Terminal states of independent limit paths with the quantities the checks need."""

    x0: np.ndarray
    x_T: np.ndarray
    local_time: np.ndarray
    time_plus: np.ndarray
    T: float
    seed: int


def _run(scheme, n_paths, x0, stream, stop=(0, 0), record_stride=0, start=0):
    p = scheme.params
    d = p.dim
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x0.size != d:
        raise InvalidInputError(f"start point needs {d} coordinates")
    j0 = _lattice_index(scheme, x0[0])
    keys = path_keys(stream_key(scheme.seed, stream), n_paths, start)
    mp, mm, ldrift, sp, sm = _arrays(scheme)
    xt = np.zeros((n_paths, d))
    jj = np.zeros(n_paths, dtype=np.int64)
    L = np.zeros(n_paths)
    tplus = np.zeros(n_paths)
    nrec = scheme.nsteps // record_stride + 1 if record_stride else 0
    rec = np.zeros((nrec, d + 2))
    _walk(keys, j0, x0, mp, mm, ldrift, sp, sm, scheme.beta_plus, scheme.local_time_step,
          scheme.h, scheme.nsteps, int(stop[0]), int(stop[1]), max(int(record_stride), 1),
          xt, jj, L, tplus, rec)
    xt[:, 0] = _position(scheme, jj)
    x0 = x0.copy()
    x0[0] = float(_position(scheme, j0))
    return x0, xt, L, tplus, rec


def simulate_limit(params, h=DEFAULT_H, T=1.0, n_paths=10_000, seed=0, x0=None,
                   stream="limit", min_steps=MIN_STEPS):
    """Sample ``X(T)``, ``L(T)`` and the time spent in ``x_1 > 0`` for ``n_paths`` limit paths."""
    scheme = LimitScheme(params, h, T, seed, min_steps)
    x0, xt, L, tplus, _ = _run(scheme, n_paths, x0, stream)
    return LimitSample(np.repeat(x0[None, :], n_paths, axis=0), xt, L, tplus, T, seed)


@dataclass
class LimitPath:
    t: np.ndarray
    x: np.ndarray
    local_time: np.ndarray


def simulate_limit_path(params, h=DEFAULT_H, T=1.0, seed=0, x0=None, stride=1, index=0,
                        stream="limit", min_steps=MIN_STEPS):
    """One limit path recorded every ``stride`` steps, as ``(t, x, L)``."""
    scheme = LimitScheme(params, h, T, seed, min_steps)
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    _, _, _, _, rec = _run(scheme, 1, x0, stream, record_stride=stride, start=index)
    return LimitPath(rec[:, 0], rec[:, 1:-1], rec[:, -1])


def simulate_skew_first(params, h=DEFAULT_H, T=1.0, seed=0, stride=1, index=0,
                        min_steps=MIN_STEPS):
    """First coordinate and local time of one limit path: ``(t, x_1, L)``."""
    path = simulate_limit_path(params, h, T, seed, None, stride, index, min_steps=min_steps)
    return path.t, path.x[:, 0], path.local_time


def skew_exit_probability(params, delta, h=DEFAULT_H, n_paths=10_000, seed=0):
    """Probability that the walk from 0 leaves ``(-delta, delta)`` on the positive side."""
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    p = params
    m_plus = max(1, int(round(delta / (h * math.sqrt(p.D_plus[0, 0])))))
    m_minus = max(1, int(round(delta / (h * math.sqrt(p.D_minus[0, 0])))))
    horizon = 50.0 * delta ** 2 / min(p.D_plus[0, 0], p.D_minus[0, 0])
    nsteps = int(math.ceil(horizon / h ** 2))
    scheme = LimitScheme(params, h, nsteps * h ** 2, seed, min_steps=1)
    _, xt, _, _, _ = _run(scheme, n_paths, None, "skew_exit", stop=(m_plus, m_minus))
    up = xt[:, 0] > 0
    reached = (xt[:, 0] >= m_plus * h * math.sqrt(p.D_plus[0, 0]) - 1e-12) | \
              (xt[:, 0] <= -m_minus * h * math.sqrt(p.D_minus[0, 0]) + 1e-12)
    if reached.mean() < 0.99:
        raise InvalidInputError("too many walks did not leave the window")
    return PathEstimate.from_samples(up[reached].astype(float), seed, "skew_exit_p_plus",
                                     delta=delta, h=h)


# -- gluing test functions ------------------------------------------------------

@dataclass(frozen=True)
class GluingTestFunction:
    """Piecewise quadratic ``f_pm(x) = c + g_pm . x + x^T H_pm x / 2`` on ``x_1 > 0`` / ``x_1 <= 0``."""

    c: float
    g_plus: np.ndarray
    g_minus: np.ndarray
    H_plus: np.ndarray
    H_minus: np.ndarray

    @property
    def dim(self):
        return self.g_plus.size

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        fp = self.c + x @ self.g_plus + 0.5 * np.einsum("ni,ij,nj->n", x, self.H_plus, x)
        fm = self.c + x @ self.g_minus + 0.5 * np.einsum("ni,ij,nj->n", x, self.H_minus, x)
        return np.where(x[:, 0] > 0, fp, fm)

    def normal_derivatives(self, xt):
        """One-sided ``d_1 f`` at the interface point ``(0, xt)``."""
        xt = np.asarray(xt, dtype=float)
        return (self.g_plus[0] + self.H_plus[0, 1:] @ xt,
                self.g_minus[0] + self.H_minus[0, 1:] @ xt)

    def tangential_gradient(self, xt):
        xt = np.asarray(xt, dtype=float)
        return self.g_plus[1:] + self.H_plus[1:, 1:] @ xt

    def continuity_residual(self):
        return float(max(np.max(np.abs(self.g_plus[1:] - self.g_minus[1:]), initial=0.0),
                         np.max(np.abs(self.H_plus[1:, 1:] - self.H_minus[1:, 1:]), initial=0.0)))

    def gluing_coefficients(self, params):
        """Gluing residual at ``(0, xt)`` as an affine function of ``xt``: ``[r_0, r_2, .., r_d]``."""
        a = np.asarray(params.alpha, dtype=float)
        pp, pm = params.p_plus, params.p_minus
        r0 = pp * self.g_plus[0] - pm * self.g_minus[0] + a @ self.g_plus[1:]
        rk = pp * self.H_plus[0, 1:] - pm * self.H_minus[0, 1:] + a @ self.H_plus[1:, 1:]
        return np.concatenate([[r0], rk])

    def gluing_residual(self, params):
        return float(np.max(np.abs(self.gluing_coefficients(params))))

    def generator_constants(self, params):
        """``(D_ij^pm / 2) d_i d_j f_pm``, constant on each side."""
        return (0.5 * float(np.sum(params.D_plus * self.H_plus)),
                0.5 * float(np.sum(params.D_minus * self.H_minus)))


def make_gluing_test_function(params, c=0.0, g_minus=None, H_minus=None, h_plus_11=None):
    """Piecewise quadratic in the domain of the limiting generator.

    The caller fixes the constant, the full minus-side slope ``g_minus`` and
    Hessian ``H_minus``, and optionally the plus-side curvature ``H_+[0, 0]``.
    Tangential parts are shared (continuity); ``d_1 f_+`` at the interface is
    solved from ``p_+ d_1 f_+ - p_- d_1 f_- + sum_j alpha_j d_j f = 0``.
    """
    d = params.dim
    if params.p_plus <= 0.0 or params.p_plus >= 1.0:
        raise DegenerateParameterError("p_+ must lie strictly between 0 and 1")
    g_minus = np.zeros(d) if g_minus is None else np.asarray(g_minus, dtype=float).ravel()
    H_minus = np.zeros((d, d)) if H_minus is None else np.asarray(H_minus, dtype=float)
    if g_minus.size != d or H_minus.shape != (d, d):
        raise InvalidInputError(f"coefficients must have dimension {d}")
    if not np.allclose(H_minus, H_minus.T, rtol=0, atol=1e-14):
        raise InvalidInputError("Hessian must be symmetric")
    a = np.asarray(params.alpha, dtype=float)
    pp, pm = params.p_plus, params.p_minus
    g_plus = g_minus.copy()
    g_plus[0] = (pm * g_minus[0] - a @ g_minus[1:]) / pp
    H_plus = H_minus.copy()
    if h_plus_11 is not None:
        H_plus[0, 0] = float(h_plus_11)
    cross = (pm * H_minus[0, 1:] - a @ H_minus[1:, 1:]) / pp
    H_plus[0, 1:] = cross
    H_plus[1:, 0] = cross
    f = GluingTestFunction(float(c), g_plus, g_minus, H_plus, H_minus)
    if f.gluing_residual(params) > GLUING_TOL:
        raise DomainError("gluing solve failed to reach tolerance")
    return f


def verify_martingale_problem(sample, f, params, allow_violation=False):
    """Mean of ``f(X_T) - f(X_0) - int_0^T Lbar f(X_s) ds`` over the sample.

    For piecewise quadratics ``Lbar f`` is a constant on each side, so the
    integral only needs the time spent in ``x_1 > 0``.  Test functions that
    break continuity or the gluing condition raise :class:`DomainError`
    unless ``allow_violation`` is set (negative controls).
    """
    if f.dim != params.dim:
        raise InvalidInputError("test function and parameters differ in dimension")
    if not allow_violation:
        if f.continuity_residual() > GLUING_TOL:
            raise DomainError("test function is discontinuous across the interface")
        r = f.gluing_residual(params)
        if r > GLUING_TOL:
            raise DomainError(f"test function violates the gluing condition (residual {r:.3e})")
    ap, am = f.generator_constants(params)
    comp = ap * sample.time_plus + am * (sample.T - sample.time_plus)
    defect = f(sample.x_T) - f(sample.x0) - comp
    return PathEstimate.from_samples(defect, sample.seed, "martingale_defect",
                                     gluing_residual=f.gluing_residual(params))


# -- law comparison ---------------------------------------------------------------

@dataclass
class LawComparison:
    statistics: list
    pvalues: list
    max_statistic: float
    threshold: float
    passed: bool

    def to_dict(self):
        return {"ks": self.statistics, "pvalues": self.pvalues,
                "max_ks": self.max_statistic, "threshold": self.threshold,
                "passed": self.passed}


def ks_threshold(n, m, c_alpha=KS_C_ALPHA):
    return c_alpha * math.sqrt((n + m) / (n * m))


def compare_laws(samples_micro, samples_limit, min_samples=1000):
    """Per-coordinate two-sample Kolmogorov-Smirnov distances at the 1% level."""
    a = np.atleast_2d(np.asarray(samples_micro, dtype=float))
    b = np.atleast_2d(np.asarray(samples_limit, dtype=float))
    if a.shape[0] == 1 and a.shape[1] > 1 and a.ndim == 2 and np.ndim(samples_micro) == 1:
        a, b = a.T, b.T
    if a.shape != b.shape:
        raise InvalidInputError(f"sample shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < min_samples:
        raise InvalidInputError(f"need at least {min_samples} samples, got {a.shape[0]}")
    res = [stats.ks_2samp(a[:, i], b[:, i]) for i in range(a.shape[1])]
    ks = [float(r.statistic) for r in res]
    thr = ks_threshold(a.shape[0], b.shape[0])
    return LawComparison(ks, [float(r.pvalue) for r in res], max(ks), thr, max(ks) < thr)
