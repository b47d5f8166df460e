"""Monte Carlo for the microscopic diffusion ``dX = b(X) ds + dB``.

Euler-Maruyama with a fixed step.  Every path draws its noise from its own
counter-based key, so estimates do not depend on evaluation order and two
runs with the same seed agree bit for bit.  Using the same seed for two
configurations gives common random numbers, which is what the ratio and
trend checks rely on.

Coordinates are microscopic.  A slab ``|x_1| <= c`` of the rescaled process
``X^eps(t) = eps X(t / eps^2)`` is the slab ``|x_1| <= c / eps`` here, and
rescaled time is ``eps^2`` times microscopic time.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit

from .errors import HorizonError, InvalidInputError, PathAbortedError
from .fields import DEFAULT_ETA, InterfaceDriftField, TorusField, drift_at
from .rng import gauss_pair, mix64, path_keys, stream_key, uniform

DEFAULT_DT = 1e-3
DEFAULT_A = 0.75
DEFAULT_EPSILON = 0.05
CENSOR_LIMIT = 0.01
HORIZON_FACTOR = 50.0
MIN_PATHS = 100
# salt for the uniform stream used by the bridge correction
_BRIDGE_SALT = np.uint64(0xA5A5A5A55A5A5A5A)


@dataclass(frozen=True)
class SimConfig:
    epsilon: float = DEFAULT_EPSILON
    dt: float = DEFAULT_DT
    horizon: float = None
    a: float = DEFAULT_A
    seed: int = 0
    n_paths: int = 10_000
    bridge: bool = True

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise InvalidInputError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0.5 < self.a < 1.0:
            raise InvalidInputError(f"delta exponent a must lie in (1/2, 1), got {self.a}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if self.n_paths < MIN_PATHS:
            raise InvalidInputError(f"need at least {MIN_PATHS} paths, got {self.n_paths}")
        if self.horizon is not None and self.horizon < self.dt:
            raise InvalidInputError("horizon must be at least one time step")

    @property
    def delta(self):
        return self.epsilon ** self.a

    @property
    def level(self):
        """Exit level ``delta / eps`` in microscopic units."""
        return self.delta / self.epsilon

    def check_hitting(self):
        check_hitting_dt(self.dt, self.level)


def check_hitting_dt(dt, level):
    """Step size must resolve the microscopic exit layer: ``dt <= min(level^2 / 100, 1e-3)``."""
    bound = min(level ** 2 / 100.0, 1e-3)
    if dt > bound * (1 + 1e-12):
        raise InvalidInputError(f"dt={dt} too coarse for hitting times (need <= {bound:.3g})")


@dataclass(frozen=True)
class PathEstimate:
    value: float
    stderr: float
    n: int
    seed: int
    name: str
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_samples(cls, samples, seed, name, **extra):
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        if n < 2:
            raise InvalidInputError("need at least two samples for a standard error")
        value = float(samples.mean())
        stderr = float(samples.std(ddof=1) / math.sqrt(n))
        if not (math.isfinite(value) and math.isfinite(stderr)):
            raise PathAbortedError(f"estimator {name} produced a non-finite value")
        return cls(value, stderr, n, int(seed), name, dict(extra))

    def zscore(self, target, other_stderr=0.0):
        se = math.hypot(self.stderr, other_stderr)
        if se == 0.0:
            return 0.0 if self.value == target else math.inf
        return (self.value - target) / se

    def within(self, target, nse=3.0, other_stderr=0.0):
        return abs(self.zscore(target, other_stderr)) <= nse

    def to_dict(self):
        out = {"name": self.name, "value": self.value, "stderr": self.stderr,
               "n": self.n, "seed": self.seed}
        if self.extra:
            out["extra"] = self.extra
        return out


# -- compiled kernels ---------------------------------------------------------

@njit(cache=True)
def _next_normals(key, state, z):
    """Fill ``z`` from the path's Gaussian stream; ``state = [pair, spare flag, spare]``."""
    for i in range(z.shape[0]):
        if state[1] != 0.0:
            z[i] = state[2]
            state[1] = 0.0
        else:
            g0, g1 = gauss_pair(key, np.int64(state[0]))
            state[0] += 1.0
            z[i] = g0
            state[1] = 1.0
            state[2] = g1


@njit(cache=True)
def _exit_kernel(x0s, keys, tp, tm, tq, eta, dt, level, max_steps, bridge,
                 occ_half, exc_lo, exc_hi, side, tau, xexit, bint, occ, nexc):
    n, d = x0s.shape
    x = np.empty(d)
    xn = np.empty(d)
    bx = np.empty(d)
    z = np.empty(d)
    state = np.zeros(3)
    sq = math.sqrt(dt)
    for p in range(n):
        key = keys[p]
        ukey = mix64(key ^ _BRIDGE_SALT)
        state[0] = 0.0
        state[1] = 0.0
        for i in range(d):
            x[i] = x0s[p, i]
            bint[p, i] = 0.0
        occ[p] = 0.0
        nexc[p] = 0
        armed = abs(x[0]) <= exc_lo
        side[p] = 0
        if abs(x[0]) >= level:
            side[p] = 1 if x[0] > 0 else -1
            tau[p] = 0.0
            for i in range(d):
                xexit[p, i] = x[i]
            continue
        step = 0
        while step < max_steps:
            drift_at(x, tp, tm, tq, eta, bx)
            _next_normals(key, state, z)
            ok = True
            for i in range(d):
                xn[i] = x[i] + bx[i] * dt + sq * z[i]
                if not math.isfinite(xn[i]):
                    ok = False
            if not ok:
                side[p] = -2
                break
            theta = 1.0
            hit = 0
            if xn[0] >= level:
                hit = 1
                theta = (level - x[0]) / (xn[0] - x[0])
            elif xn[0] <= -level:
                hit = -1
                theta = (-level - x[0]) / (xn[0] - x[0])
            elif bridge:
                # the Brownian bridge between the two states may still have crossed
                eu = 2.0 * (level - x[0]) * (level - xn[0]) / dt
                el = 2.0 * (level + x[0]) * (level + xn[0]) / dt
                if eu < 40.0 or el < 40.0:
                    pu = math.exp(-eu)
                    pl = math.exp(-el)
                    u = uniform(ukey, step)
                    if u <= pu:
                        hit = 1
                        theta = 0.5
                    elif u <= pu + pl:
                        hit = -1
                        theta = 0.5
            if abs(x[0]) <= occ_half:
                occ[p] += theta * dt
            for i in range(d):
                bint[p, i] += theta * dt * bx[i]
            if hit != 0:
                side[p] = hit
                tau[p] = (step + theta) * dt
                for i in range(d):
                    xexit[p, i] = x[i] + theta * (xn[i] - x[i])
                xexit[p, 0] = hit * level
                break
            for i in range(d):
                x[i] = xn[i]
            step += 1
            a = abs(x[0])
            if armed and a >= exc_hi:
                nexc[p] += 1
                armed = False
            elif not armed and a <= exc_lo:
                armed = True
        if side[p] == 0:
            tau[p] = step * dt
            for i in range(d):
                xexit[p, i] = x[i]


@njit(cache=True)
def _terminal_kernel(x0s, keys, tp, tm, tq, eta, dt, nsteps, sub, out):
    n, d = x0s.shape
    x = np.empty(d)
    bx = np.empty(d)
    z = np.empty(d)
    dw = np.empty(d)
    state = np.zeros(3)
    sq = math.sqrt(dt / sub)
    for p in range(n):
        key = keys[p]
        state[0] = 0.0
        state[1] = 0.0
        for i in range(d):
            x[i] = x0s[p, i]
        for _ in range(nsteps):
            drift_at(x, tp, tm, tq, eta, bx)
            for i in range(d):
                dw[i] = 0.0
            for _r in range(sub):
                _next_normals(key, state, z)
                for i in range(d):
                    dw[i] += sq * z[i]
            for i in range(d):
                x[i] += bx[i] * dt + dw[i]
        for i in range(d):
            out[p, i] = x[i]


@njit(cache=True)
def _record_kernel(x0, key, tp, tm, tq, eta, dt, nsteps, out):
    d = x0.shape[0]
    x = x0.copy()
    bx = np.empty(d)
    z = np.empty(d)
    state = np.zeros(3)
    sq = math.sqrt(dt)
    for i in range(d):
        out[0, i] = x[i]
    for s in range(nsteps):
        drift_at(x, tp, tm, tq, eta, bx)
        _next_normals(key, state, z)
        for i in range(d):
            x[i] += bx[i] * dt + sq * z[i]
            out[s + 1, i] = x[i]


# -- helpers -----------------------------------------------------------------

def as_interface_field(b, dim=None):
    """Accept an interface field, a torus field (same on both sides) or ``None`` (zero drift)."""
    if isinstance(b, InterfaceDriftField):
        return b
    if isinstance(b, TorusField):
        return InterfaceDriftField(b, b)
    if b is None:
        if dim is None:
            raise InvalidInputError("dimension needed for a zero field")
        z = TorusField.zero(dim)
        return InterfaceDriftField(z, z)
    raise InvalidInputError(f"unsupported drift type {type(b).__name__}")


def _starts(x0, n, dim):
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[1] != dim:
        raise InvalidInputError(f"start point dimension {x0.shape[1]} != field dimension {dim}")
    if not np.all(np.isfinite(x0)):
        raise InvalidInputError("non-finite start point")
    if x0.shape[0] == 1:
        return np.repeat(x0, n, axis=0)
    if x0.shape[0] != n:
        raise InvalidInputError("need one start point or one per path")
    return np.ascontiguousarray(x0)


def start_lattice(dim, eta=DEFAULT_ETA):
    """Witness set for uniformity over the interface: 5 points across ``|x_1| <= eta``.

    Tangential coordinates are spread as ``i / 5`` over one period.
    """
    x1 = np.array([-eta, -eta / 2, 0.0, eta / 2, eta])
    pts = np.zeros((5, dim))
    pts[:, 0] = x1
    if dim > 1:
        pts[:, 1:] = (np.arange(5) / 5.0)[:, None]
    return pts


@dataclass
class ExitSample:
    side: np.ndarray
    tau: np.ndarray
    x_exit: np.ndarray
    drift_integral: np.ndarray
    occupation: np.ndarray
    excursions: np.ndarray
    level: float
    dt: float

    @property
    def censored(self):
        return self.side == 0

    @property
    def n_censored(self):
        return int(np.sum(self.censored))


def run_exit(b, x0, level, n_paths, seed, stream, dt=DEFAULT_DT, bridge=True, horizon=None,
             occ_half=0.0, excursion_levels=(0.0, 0.0), censor_limit=CENSOR_LIMIT, start=0):
    """Simulate ``n_paths`` paths until ``|x_1| >= level`` or the horizon.

    The default horizon is ``50 level^2``, fifty times the exit time of
    Brownian motion started at the centre.  More than ``censor_limit``
    censored paths raise :class:`HorizonError`; fewer are flagged in the
    returned sample.
    """
    if not level > 0:
        raise InvalidInputError("exit level must be positive")
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    f = as_interface_field(b, np.atleast_2d(x0).shape[1])
    d = f.dim
    x0s = _starts(x0, n_paths, d)
    if np.any(np.abs(x0s[:, 0]) > level):
        raise InvalidInputError("start points must lie inside the exit slab")
    if horizon is None:
        horizon = HORIZON_FACTOR * level ** 2
    max_steps = int(math.ceil(horizon / dt))
    keys = path_keys(stream_key(seed, stream), n_paths, start)
    side = np.zeros(n_paths, dtype=np.int64)
    tau = np.zeros(n_paths)
    xexit = np.zeros((n_paths, d))
    bint = np.zeros((n_paths, d))
    occ = np.zeros(n_paths)
    nexc = np.zeros(n_paths, dtype=np.int64)
    tp, tm, tq = f.tables
    _exit_kernel(x0s, keys, tp, tm, tq, f.eta, float(dt), float(level), max_steps, bool(bridge),
                 float(occ_half), float(excursion_levels[0]), float(excursion_levels[1]),
                 side, tau, xexit, bint, occ, nexc)
    if np.any(side == -2):
        raise PathAbortedError(f"{int(np.sum(side == -2))} paths reached a non-finite state")
    out = ExitSample(side, tau, xexit, bint, occ, nexc, float(level), float(dt))
    frac = out.n_censored / n_paths
    if frac > censor_limit:
        raise HorizonError(f"{frac:.2%} of paths censored at horizon {horizon:g} "
                           f"(limit {censor_limit:.0%})")
    return out


# -- public operations ---------------------------------------------------------

@dataclass
class Path:
    t: np.ndarray
    x: np.ndarray

    @property
    def horizon(self):
        return float(self.t[-1])


def simulate_path(b, x0, dt, T, seed=0, index=0, stream="path"):
    """One Euler-Maruyama path on ``[0, T]``; reproducible from ``(seed, index)``."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    if T < dt * (1 - 1e-12):
        raise InvalidInputError("T must be at least one step")
    x0 = np.asarray(x0, dtype=float).ravel()
    f = as_interface_field(b, x0.size)
    if x0.size != f.dim:
        raise InvalidInputError("start point dimension does not match the field")
    nsteps = int(round(T / dt))
    key = path_keys(stream_key(seed, stream), 1, index)[0]
    out = np.empty((nsteps + 1, f.dim))
    tp, tm, tq = f.tables
    _record_kernel(x0, key, tp, tm, tq, f.eta, float(dt), nsteps, out)
    if not np.all(np.isfinite(out)):
        raise PathAbortedError("path reached a non-finite state")
    return Path(np.arange(nsteps + 1) * dt, out)


def simulate_terminal(b, x0, dt, T, n_paths, seed=0, stream="terminal", substeps=1):
    """States ``X(T)`` for ``n_paths`` paths.

    With ``substeps = m`` each step of size ``dt`` is driven by the sum of
    ``m`` Brownian increments of size ``dt / m``; runs with ``(dt, m)`` and
    ``(dt / m, 1)`` then share the same Brownian path.
    """
    if not dt > 0 or substeps < 1:
        raise InvalidInputError("dt must be positive and substeps >= 1")
    f = as_interface_field(b, np.atleast_2d(x0).shape[1])
    x0s = _starts(x0, n_paths, f.dim)
    nsteps = int(round(T / dt))
    if nsteps < 1 or abs(nsteps * dt - T) > 1e-9 * max(T, 1.0):
        raise InvalidInputError("T must be a positive multiple of dt")
    keys = path_keys(stream_key(seed, stream), n_paths)
    out = np.empty_like(x0s)
    tp, tm, tq = f.tables
    _terminal_kernel(x0s, keys, tp, tm, tq, f.eta, float(dt), nsteps, int(substeps), out)
    if not np.all(np.isfinite(out)):
        raise PathAbortedError("paths reached a non-finite state")
    return out


def rescaled_state(path, epsilon, t):
    """``eps X(t / eps^2)`` with linear interpolation between stored steps."""
    if not 0 < epsilon <= 1:
        raise InvalidInputError("epsilon must lie in (0, 1]")
    s = t / epsilon ** 2
    if s < 0 or s > path.horizon * (1 + 1e-12):
        raise HorizonError(f"rescaled time {t} needs microscopic time {s:g} > {path.horizon:g}")
    x = np.array([np.interp(s, path.t, path.x[:, i]) for i in range(path.x.shape[1])])
    return epsilon * x


@dataclass
class HittingResult:
    tau: float
    x_exit: np.ndarray
    side: int
    censored: bool


def hitting_time(b, x0, level, dt=DEFAULT_DT, seed=0, index=0, bridge=True, horizon=None,
                 stream="hit"):
    """First time ``|x_1|`` reaches ``level`` for one path, with its exit state."""
    x0 = np.asarray(x0, dtype=float).ravel()
    if abs(x0[0]) > level:
        raise InvalidInputError("start must lie inside the slab |x_1| <= level")
    s = run_exit(b, x0[None, :], level, 1, seed, stream, dt, bridge, horizon,
                 censor_limit=1.0, start=index)
    return HittingResult(float(s.tau[0]), s.x_exit[0], int(s.side[0]), bool(s.censored[0]))


@dataclass
class ExitProbEstimate:
    p_plus: PathEstimate
    p_minus: PathEstimate
    per_start: list
    spread: float
    n_censored: int
    starts: np.ndarray

    def to_dict(self):
        return {"p_plus": self.p_plus.to_dict(), "p_minus": self.p_minus.to_dict(),
                "per_start": [e.to_dict() for e in self.per_start], "spread": self.spread,
                "n_censored": self.n_censored, "starts": self.starts.tolist()}


def _resolve_delta(epsilon, delta, a, dt, check_dt):
    if not 0 < epsilon <= 1:
        raise InvalidInputError(f"epsilon must lie in (0, 1], got {epsilon}")
    if delta is None:
        if not 0.5 < a < 1:
            raise InvalidInputError("delta exponent must lie in (1/2, 1)")
        delta = epsilon ** a
    level = delta / epsilon
    if check_dt:
        check_hitting_dt(dt, level)
    return delta, level


def estimate_exit_probs(b, epsilon, delta=None, x0s=None, n_paths=10_000, seed=0,
                        dt=DEFAULT_DT, bridge=True, a=DEFAULT_A, check_dt=True):
    """Probabilities that ``X^eps`` leaves ``|x_1| <= delta`` through each side.

    ``x0s`` are microscopic start points in the interface slab (default: the
    5-point lattice across ``|x_1| <= eta``); paths are split evenly among
    them.  ``spread`` is the largest difference between per-start estimates.
    """
    f = as_interface_field(b) if b is not None else None
    if f is None:
        raise InvalidInputError("a field is required")
    delta, level = _resolve_delta(epsilon, delta, a, dt, check_dt)
    if x0s is None:
        x0s = start_lattice(f.dim, f.eta)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    m = x0s.shape[0]
    starts = np.repeat(x0s, -(-n_paths // m), axis=0)[:n_paths]
    s = run_exit(f, starts, level, n_paths, seed, "exit", dt, bridge)
    ok = ~s.censored
    up = (s.side == 1).astype(float)
    p_plus = PathEstimate.from_samples(up[ok], seed, "p_plus", epsilon=epsilon, delta=delta)
    p_minus = PathEstimate(1.0 - p_plus.value, p_plus.stderr, p_plus.n, int(seed), "p_minus")
    per = []
    for i in range(m):
        sel = ok & np.all(starts == x0s[i], axis=1)
        per.append(PathEstimate.from_samples(up[sel], seed, f"p_plus[start {i}]",
                                             start=x0s[i].tolist()))
    vals = [e.value for e in per]
    return ExitProbEstimate(p_plus, p_minus, per, float(max(vals) - min(vals)),
                            s.n_censored, x0s)


def estimate_tangential_drift(b, epsilon, delta=None, x0=None, n_paths=10_000, seed=0,
                              dt=DEFAULT_DT, bridge=True, a=DEFAULT_A, check_dt=True):
    """``(1/delta) E[X_j^eps(tau^delta) - X_j^eps(0)]`` for ``j = 2..d``.

    ``x0`` is a microscopic start point (default the origin).
    """
    f = as_interface_field(b)
    if f.dim < 2:
        raise InvalidInputError("tangential drift needs dimension >= 2")
    delta, level = _resolve_delta(epsilon, delta, a, dt, check_dt)
    x0 = np.zeros(f.dim) if x0 is None else np.asarray(x0, dtype=float)
    s = run_exit(f, x0[None, :], level, n_paths, seed, "tangential", dt, bridge)
    ok = ~s.censored
    disp = epsilon * (s.x_exit[ok, 1:] - x0[1:]) / delta
    return [PathEstimate.from_samples(disp[:, j], seed, f"tangential_drift[{j + 2}]",
                                      epsilon=epsilon, delta=delta)
            for j in range(f.dim - 1)]


def estimate_alpha_longrun(b, k, x0=None, n_paths=4000, seed=0, dt=DEFAULT_DT, bridge=True):
    """``(1/k) E int_0^{tau_k} b_j(X_s) ds``, ``tau_k`` the exit time of ``|x_1| < k``."""
    if k < 4:
        raise InvalidInputError("k must be at least 4")
    f = as_interface_field(b)
    if f.dim < 2:
        raise InvalidInputError("tangential drift needs dimension >= 2")
    x0 = np.zeros(f.dim) if x0 is None else np.asarray(x0, dtype=float)
    s = run_exit(f, x0[None, :], float(k), n_paths, seed, "longrun", dt, bridge)
    ok = ~s.censored
    vals = s.drift_integral[ok, 1:] / k
    return [PathEstimate.from_samples(vals[:, j], seed, f"alpha_longrun[{j + 2}]", k=k)
            for j in range(f.dim - 1)]


def brownian_occupation(k, n_paths=20_000, seed=0, dt=1e-2, bridge=True):
    """``E_0 int_0^{tau_k} 1{|B_s| <= 1} ds`` for one-dimensional Brownian motion.

    Exact value ``2k - 1``.  A coarse step is enough here because there is no
    drift and the bridge correction removes the leading exit bias.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    s = run_exit(None, np.zeros((1, 1)), float(k), n_paths, seed, "occupation", dt, bridge,
                 occ_half=1.0)
    ok = ~s.censored
    return PathEstimate.from_samples(s.occupation[ok], seed, "brownian_occupation", k=k)


@dataclass
class OccupationStats:
    occupation: PathEstimate
    excursions: PathEstimate
    excursion_constant: float

    def to_dict(self):
        return {"occupation": self.occupation.to_dict(), "excursions": self.excursions.to_dict(),
                "excursion_constant": self.excursion_constant}


def interface_occupation_stats(b, epsilon, delta=None, n_paths=4000, seed=0, dt=DEFAULT_DT,
                               a=DEFAULT_A, eta=None, bridge=True):
    """Rescaled time spent in ``|x_1| <= eps eta`` before leaving ``|x_1| <= delta``, from 0.

    Excursions count the passages from ``|x_1| <= eta`` out to ``|x_1| >= 2 eta``
    (microscopic), and ``excursion_constant`` is their mean divided by
    ``sqrt(delta) / eps``.
    """
    f = as_interface_field(b, 1)
    eta = f.eta if eta is None else float(eta)
    delta, level = _resolve_delta(epsilon, delta, a, dt, False)
    if 2 * eta >= level:
        raise InvalidInputError("window too small compared to the interface")
    x0 = np.zeros((1, f.dim))
    s = run_exit(f, x0, level, n_paths, seed, "occupation", dt, bridge, occ_half=eta,
                 excursion_levels=(eta, 2 * eta))
    ok = ~s.censored
    occ = PathEstimate.from_samples(epsilon ** 2 * s.occupation[ok], seed, "interface_occupation",
                                    epsilon=epsilon, delta=delta)
    exc = PathEstimate.from_samples(s.excursions[ok].astype(float), seed, "excursions",
                                    epsilon=epsilon, delta=delta)
    return OccupationStats(occ, exc, exc.value / (math.sqrt(delta) / epsilon))
