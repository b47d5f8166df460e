"""Drift fields: periodic Fourier fields on the torus and interface fields on the strip.

A :class:`TorusField` is a finite Fourier sum per component, so it is smooth
and 1-periodic in every coordinate by construction.  An
:class:`InterfaceDriftField` glues two torus fields across the slab
``|x_1| <= eta`` with a smooth partition of unity and may add a perturbation
that is localized in the slab by a bump in ``x_1``.

Fields are packed into flat float tables (one row per Fourier term:
``[axis, cos, sin, k_1 .. k_d]``) so the same data drive the vectorized
NumPy evaluator used by the PDE solvers and the compiled evaluator used in
the path simulators.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit

from .errors import DimensionMismatchError, GridMismatchError, InvalidInputError

TWO_PI = 2.0 * math.pi

DEFAULT_ETA = 0.5


@dataclass(frozen=True)
class FourierTerm:
    axis: int
    k: tuple
    cos: float = 0.0
    sin: float = 0.0


@dataclass(frozen=True)
class TorusField:
    """Vector field on the unit torus ``T^d`` given as a finite Fourier sum.

    Component ``axis`` receives ``cos * cos(2 pi k.x) + sin * sin(2 pi k.x)``
    from every term with that axis.
    """

    dim: int
    terms: tuple = ()

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InvalidInputError(f"dimension must be >= 1, got {self.dim}")
        clean = []
        for t in self.terms:
            if not isinstance(t, FourierTerm):
                t = FourierTerm(**t) if isinstance(t, dict) else FourierTerm(*t)
            k = tuple(int(v) for v in t.k)
            if len(k) != self.dim:
                raise DimensionMismatchError(
                    f"wave vector {k} has length {len(k)}, field dimension is {self.dim}")
            if not 0 <= int(t.axis) < self.dim:
                raise InvalidInputError(f"axis {t.axis} out of range for dimension {self.dim}")
            c, s = float(t.cos), float(t.sin)
            if not (math.isfinite(c) and math.isfinite(s)):
                raise InvalidInputError("Fourier coefficients must be finite")
            clean.append(FourierTerm(int(t.axis), k, c, s))
        object.__setattr__(self, "terms", tuple(clean))

    @classmethod
    def zero(cls, dim):
        return cls(dim, ())

    @classmethod
    def from_potential(cls, dim, terms):
        """Gradient field ``-grad V`` for ``V = sum cos cos(2 pi k.x) + sin sin(2 pi k.x)``.

        ``terms`` holds ``(k, cos, sin)`` triples or mappings with those keys.
        """
        out = []
        for t in terms:
            if isinstance(t, dict):
                k, a, s = t["k"], t.get("cos", 0.0), t.get("sin", 0.0)
            else:
                k, a, s = t
            k = tuple(int(v) for v in k)
            if len(k) != dim:
                raise DimensionMismatchError(f"wave vector {k} does not match dimension {dim}")
            for j, kj in enumerate(k):
                if kj != 0:
                    out.append(FourierTerm(j, k, -TWO_PI * kj * s, TWO_PI * kj * a))
        return cls(dim, tuple(out))

    def __add__(self, other):
        if other.dim != self.dim:
            raise DimensionMismatchError("cannot add fields of different dimension")
        return TorusField(self.dim, self.terms + other.terms)

    def scaled(self, factor):
        return TorusField(self.dim, tuple(
            FourierTerm(t.axis, t.k, factor * t.cos, factor * t.sin) for t in self.terms))

    def point_reflected(self):
        """The field ``x -> -b(-x)``.

        Pairing ``minus = plus.point_reflected()`` makes the interface field odd
        under ``x -> -x``, which forces ``q_+ = q_-`` and ``alpha = 0``.
        """
        return TorusField(self.dim, tuple(
            FourierTerm(t.axis, t.k, -t.cos, t.sin) for t in self.terms))

    def mirrored(self):
        """The field ``x -> R b(R x)`` with ``R`` flipping the sign of ``x_1``.

        ``minus = plus.mirrored()`` gives an interface field symmetric under
        ``x_1 -> -x_1``, so ``q_+ = q_-``.
        """
        out = []
        for t in self.terms:
            k = (-t.k[0],) + tuple(t.k[1:])
            sign = -1.0 if t.axis == 0 else 1.0
            out.append(FourierTerm(t.axis, k, sign * t.cos, sign * t.sin))
        return TorusField(self.dim, tuple(out))

    def table(self):
        tab = np.zeros((len(self.terms), 3 + self.dim))
        for r, t in enumerate(self.terms):
            tab[r, 0] = t.axis
            tab[r, 1] = t.cos
            tab[r, 2] = t.sin
            tab[r, 3:] = t.k
        return tab

    def sup_bound(self):
        """Componentwise upper bound on ``|b_i|`` from the Fourier coefficients."""
        bound = np.zeros(self.dim)
        for t in self.terms:
            bound[t.axis] += math.hypot(t.cos, t.sin)
        return bound

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = eval_table(self.table(), x, self.dim)
        return out[0] if x.ndim == 1 else out

    def to_dict(self):
        return [{"axis": t.axis, "k": list(t.k), "cos": t.cos, "sin": t.sin} for t in self.terms]


def eval_table(tab, x, dim):
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise DimensionMismatchError(f"points have dimension {x.shape[-1]}, field has {dim}")
    out = np.zeros(x.shape)
    if tab.shape[0] == 0:
        return out
    phase = TWO_PI * (x @ tab[:, 3:].T)
    for r in range(tab.shape[0]):
        a = int(tab[r, 0])
        if tab[r, 1] != 0.0:
            out[:, a] += tab[r, 1] * np.cos(phase[:, r])
        if tab[r, 2] != 0.0:
            out[:, a] += tab[r, 2] * np.sin(phase[:, r])
    return out


def _smooth_step_kernel(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def blend(s):
    """Smooth step with ``blend(s) = 0`` for ``s <= -1`` and ``1`` for ``s >= 1``.

    Built from the ``exp(-1/t)`` mollifier; satisfies ``blend(-s) = 1 - blend(s)``.
    """
    s = np.asarray(s, dtype=float)
    a = _smooth_step_kernel(1.0 + s)
    b = _smooth_step_kernel(1.0 - s)
    return a / (a + b)


def bump(s):
    """Smooth bump supported on ``(-1, 1)`` with ``bump(0) = 1``."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True)
class InterfaceDriftField:
    """Drift on ``R x T^{d-1}`` equal to ``plus`` for ``x_1 > eta`` and ``minus`` for ``x_1 < -eta``.

    Inside the slab: ``blend(x_1/eta) plus + (1 - blend) minus + bump(x_1/eta) perturbation``.
    """

    plus: TorusField
    minus: TorusField
    eta: float = DEFAULT_ETA
    perturbation: TorusField = None
    _tables: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.plus.dim != self.minus.dim:
            raise DimensionMismatchError(
                f"plus has dimension {self.plus.dim}, minus has {self.minus.dim}")
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise InvalidInputError(f"eta must be positive, got {self.eta}")
        pert = self.perturbation
        if pert is None:
            pert = TorusField.zero(self.plus.dim)
            object.__setattr__(self, "perturbation", pert)
        elif pert.dim != self.plus.dim:
            raise DimensionMismatchError("perturbation dimension differs from plus/minus")
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "_tables",
                           (self.plus.table(), self.minus.table(), pert.table()))

    @property
    def dim(self):
        return self.plus.dim

    @property
    def tables(self):
        return self._tables

    def sup_bound(self):
        return self.plus.sup_bound() + self.minus.sup_bound() + self.perturbation.sup_bound()

    def __call__(self, x):
        return eval_drift(self, x)

    def to_dict(self):
        out = {"dim": self.dim, "eta": self.eta,
               "plus": {"drift": self.plus.to_dict()},
               "minus": {"drift": self.minus.to_dict()}}
        if self.perturbation.terms:
            out["perturbation"] = {"drift": self.perturbation.to_dict()}
        return out


def make_interface_field(plus, minus, eta=DEFAULT_ETA, perturbation=None):
    return InterfaceDriftField(plus, minus, eta, perturbation)


def eval_drift(field, x):
    """Evaluate the interface drift at one point ``(d,)`` or many points ``(N, d)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != field.dim:
        raise DimensionMismatchError(f"point dimension {x.shape[-1]} != field dimension {field.dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite coordinates")
    tp, tm, tq = field.tables
    d = field.dim
    s = x[:, 0] / field.eta
    out = np.zeros_like(x)
    right = s >= 1.0
    left = s <= -1.0
    mid = ~(right | left)
    if right.any():
        out[right] = eval_table(tp, x[right], d)
    if left.any():
        out[left] = eval_table(tm, x[left], d)
    if mid.any():
        xm = x[mid]
        c = blend(s[mid])[:, None]
        out[mid] = c * eval_table(tp, xm, d) + (1.0 - c) * eval_table(tm, xm, d)
        if tq.shape[0]:
            out[mid] += bump(s[mid])[:, None] * eval_table(tq, xm, d)
    return out[0] if single else out


def check_centering(b, mu, grid):
    """Quadrature of ``int b dmu`` on a torus grid, one value per component.

    ``mu`` is a density (``sum(mu) * h^d = 1``) sampled on ``grid``.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.size != grid.size:
        raise GridMismatchError(f"density has {mu.size} samples, grid has {grid.size}")
    if b.dim != grid.dim:
        raise GridMismatchError("field and grid dimensions differ")
    samples = b(grid.points())
    return samples.T @ mu.ravel() * grid.cell_volume


# -- compiled evaluators used by the path simulators ------------------------

@njit(cache=True, inline="always")
def _table_add(tab, x, out, weight):
    d = x.shape[0]
    for r in range(tab.shape[0]):
        ph = 0.0
        for j in range(d):
            ph += tab[r, 3 + j] * x[j]
        ph *= TWO_PI
        v = 0.0
        if tab[r, 1] != 0.0:
            v += tab[r, 1] * math.cos(ph)
        if tab[r, 2] != 0.0:
            v += tab[r, 2] * math.sin(ph)
        out[int(tab[r, 0])] += weight * v


@njit(cache=True, inline="always")
def _blend_scalar(s):
    if s <= -1.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    a = math.exp(-1.0 / (1.0 + s))
    b = math.exp(-1.0 / (1.0 - s))
    return a / (a + b)


@njit(cache=True, inline="always")
def _bump_scalar(s):
    if s <= -1.0 or s >= 1.0:
        return 0.0
    return math.exp(1.0 - 1.0 / (1.0 - s * s))


@njit(cache=True)
def drift_at(x, tp, tm, tq, eta, out):
    """Compiled twin of :func:`eval_drift` for a single point; writes into ``out``."""
    for i in range(out.shape[0]):
        out[i] = 0.0
    s = x[0] / eta
    if s >= 1.0:
        _table_add(tp, x, out, 1.0)
    elif s <= -1.0:
        _table_add(tm, x, out, 1.0)
    else:
        c = _blend_scalar(s)
        _table_add(tp, x, out, c)
        _table_add(tm, x, out, 1.0 - c)
        if tq.shape[0] > 0:
            _table_add(tq, x, out, _bump_scalar(s))


# -- field files ------------------------------------------------------------

def _side_from_dict(dim, spec, where):
    if spec is None:
        return TorusField.zero(dim)
    if isinstance(spec, list):
        spec = {"drift": spec}
    if not isinstance(spec, dict):
        raise InvalidInputError(f"{where}: expected a mapping with 'drift' and/or 'potential'")
    unknown = set(spec) - {"drift", "potential"}
    if unknown:
        raise InvalidInputError(f"{where}: unknown keys {sorted(unknown)}")
    out = TorusField(dim, tuple(FourierTerm(int(t["axis"]), tuple(t["k"]),
                                            float(t.get("cos", 0.0)), float(t.get("sin", 0.0)))
                                for t in spec.get("drift", []) or []))
    if spec.get("potential"):
        out = out + TorusField.from_potential(dim, spec["potential"])
    return out


def field_from_dict(data):
    """Build an :class:`InterfaceDriftField` from a parsed field-definition mapping.

    Recognized keys: ``dim``, ``eta`` (default 1/2), ``plus``, ``minus``,
    ``perturbation``.  Each side is a list of drift terms
    ``{axis, k, cos, sin}`` or a mapping with ``drift`` and/or ``potential``
    term lists (potential terms are ``{k, cos, sin}`` and contribute ``-grad V``).
    """
    if not isinstance(data, dict):
        raise InvalidInputError("field definition must be a mapping")
    unknown = set(data) - {"dim", "eta", "plus", "minus", "perturbation"}
    if unknown:
        raise InvalidInputError(f"unknown field-definition keys {sorted(unknown)}")
    if "dim" not in data:
        raise InvalidInputError("field definition needs 'dim'")
    dim = int(data["dim"])
    try:
        plus = _side_from_dict(dim, data.get("plus"), "plus")
        minus = _side_from_dict(dim, data.get("minus"), "minus")
        pert = _side_from_dict(dim, data.get("perturbation"), "perturbation")
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed term: {exc}") from exc
    return InterfaceDriftField(plus, minus, float(data.get("eta", DEFAULT_ETA)), pert)


# -- grids ------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``n`` nodes per unit length in each of ``dim`` directions."""

    n: int
    dim: int
    k_trunc: int = None

    def __post_init__(self):
        if int(self.n) < 8:
            raise InvalidInputError(f"grid resolution must be >= 8, got {self.n}")
        if int(self.dim) < 1:
            raise InvalidInputError("grid dimension must be >= 1")
        if self.k_trunc is not None and int(self.k_trunc) < 1:
            raise InvalidInputError("k_trunc must be a positive number of cells")

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def size(self):
        return self.n ** self.dim

    @property
    def cell_volume(self):
        return self.h ** self.dim

    def axes(self):
        return [np.arange(self.n) * self.h for _ in range(self.dim)]

    def points(self):
        """Torus nodes as an ``(n^d, d)`` array in row-major order (axis 0 slowest)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def strip_shape(self):
        if self.k_trunc is None:
            raise InvalidInputError("strip grid needs k_trunc")
        return (2 * self.k_trunc * self.n,) + (self.n,) * (self.dim - 1)

    def strip_points(self):
        k = self.k_trunc
        if k is None:
            raise InvalidInputError("strip grid needs k_trunc")
        x1 = -k + np.arange(2 * k * self.n) * self.h
        mesh = np.meshgrid(x1, *self.axes()[1:], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)
