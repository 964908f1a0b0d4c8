"""Noise models, interval maps and the reflected transfer-operator kernel.

The stochastic system is ``x_{n+1} = pi(T(x_n) + omega_n)`` where ``omega_n``
has density ``rho`` supported on ``[-eps, eps]`` and ``pi`` folds the real line
back onto ``[0, 1]`` by reflection at the endpoints.  Its transfer operator is
the integral operator with kernel

    k(x, y) = (P_pi tau_{-T(y)} rho)(x),

where ``P_pi f(x) = sum_{i in 2Z} f(i + x) + f(i - x)``.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline

from .errors import InvalidInputError, InvalidParameterError

# images of P_pi are only summed for |i| <= FOLD_CAP
FOLD_CAP = 4
SUPPORT_LIMIT = 3.0

_GL8 = np.polynomial.legendre.leggauss(8)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _unit_bump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


@functools.lru_cache(maxsize=None)
def bump_normalization(epsilon: float) -> float:
    """Return N(eps) such that N(eps) * exp(-eps^2 / (eps^2 - x^2)) integrates to one.

    Uses ``rho_eps(x) = rho_1(x / eps) / eps``, so only the unit bump is
    integrated.
    """
    epsilon = float(epsilon)
    if not (epsilon > 0.0) or not math.isfinite(epsilon):
        raise InvalidParameterError(f"epsilon must be positive, got {epsilon!r}")
    # integrand is even; integrate one half to keep quad away from the symmetric split
    half, _ = integrate.quad(lambda u: math.exp(-1.0 / (1.0 - u * u)) if u < 1.0 else 0.0,
                             0.0, 1.0, epsabs=0.0, epsrel=1e-13, limit=200)
    return 1.0 / (2.0 * half * epsilon)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Additive noise density with compact support ``[-epsilon, epsilon]``.

    ``density`` and ``density_deriv`` must be vectorised and vanish outside
    the support.  The CDF is tabulated once at construction (cubic Hermite
    interpolation using the exact density as derivative data) so that cell
    integrals of the folded kernel can be taken in closed form.
    """

    epsilon: float
    density: Callable[[np.ndarray], np.ndarray]
    density_deriv: Callable[[np.ndarray], np.ndarray]
    lipschitz_hint: float | None = None
    name: str = "custom"
    table_size: int = 4001
    _cdf: CubicHermiteSpline = field(init=False, repr=False)

    def __post_init__(self):
        eps = float(self.epsilon)
        if not (0.0 < eps <= 1.0):
            raise InvalidParameterError(f"noise support radius must lie in (0, 1], got {eps!r}")
        nodes = np.linspace(-eps, eps, self.table_size)
        a, b = nodes[:-1], nodes[1:]
        t, w = _GL8
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        pts = mid[:, None] + half[:, None] * t[None, :]
        pieces = (self.density(pts) * w[None, :]).sum(axis=1) * half
        values = np.concatenate([[0.0], np.cumsum(pieces)])
        slopes = np.asarray(self.density(nodes), dtype=float)
        object.__setattr__(self, "_cdf", CubicHermiteSpline(nodes, values, slopes, extrapolate=False))

    def cdf(self, z):
        z = np.asarray(z, dtype=float)
        eps = self.epsilon
        out = self._cdf(np.clip(z, -eps, eps))
        out = np.where(z <= -eps, 0.0, out)
        return np.where(z >= eps, 1.0, out)

    @property
    def total_mass(self) -> float:
        return float(self._cdf(self.epsilon))


def bump_noise(epsilon: float) -> NoiseModel:
    """The smooth bump ``rho(x) = N(eps) exp(-eps^2/(eps^2 - x^2))`` on ``(-eps, eps)``."""
    eps = float(epsilon)
    norm = bump_normalization(eps)

    def density(x):
        return norm * _unit_bump(np.asarray(x, dtype=float) / eps)

    def density_deriv(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        inside = np.abs(x) < eps
        xi = x[inside]
        d = eps * eps - xi * xi
        out[inside] = norm * np.exp(-eps * eps / d) * (-2.0 * eps * eps * xi) / (d * d)
        return out

    return NoiseModel(epsilon=eps, density=density, density_deriv=density_deriv,
                      name=f"bump(eps={eps:.10g})")


# ---------------------------------------------------------------------------
# maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MapModel:
    """A map of ``[0, 1]`` into itself, evaluated pointwise.

    ``breakpoints`` lists interior points where the map (or its derivative)
    jumps; quadrature splits cells there.  ``overshoot`` widens the accepted
    range to ``[-overshoot, 1 + overshoot]``; the reflecting fold keeps the
    noisy orbit in ``[0, 1]`` regardless, and perturbed maps use it.
    """

    func: Callable[[np.ndarray], np.ndarray]
    description: str
    parameters: dict = field(default_factory=dict)
    breakpoints: tuple = ()
    name: str = "custom"
    overshoot: float = 0.0

    def eval(self, x):
        return self(x)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.func(x), dtype=float)
        lo, hi = -self.overshoot, 1.0 + self.overshoot
        if out.size and (out.min() < lo - 1e-12 or out.max() > hi + 1e-12 or not np.all(np.isfinite(out))):
            raise InvalidInputError(f"map {self.name!r} left [{lo:g}, {hi:g}]: range [{out.min()}, {out.max()}]")
        return np.clip(out, lo, hi)

    @property
    def cache_key(self) -> str:
        params = ",".join(f"{k}={_fmt_param(v)}" for k, v in sorted(self.parameters.items()))
        return f"{self.name}({params})"


def _fmt_param(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt_param(u) for u in np.ravel(v)) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def pomeau_manneville(alpha: float = 0.5) -> MapModel:
    """``T(x) = x(1 + (2x)^alpha)`` on ``[0, 1/2)`` and ``2x - 1`` on ``[1/2, 1]``."""
    alpha = float(alpha)
    if alpha <= 0:
        raise InvalidParameterError("alpha must be positive")

    def T(x):
        left = x * (1.0 + (2.0 * np.clip(x, 0.0, None)) ** alpha)
        return np.where(x < 0.5, left, 2.0 * x - 1.0)

    return MapModel(T, f"Pomeau-Manneville map, alpha={alpha:g}", {"alpha": alpha},
                    breakpoints=(0.5,), name="pomeau-manneville")


IE_LENGTH_MATRIX = np.array([[13, 37, 77, 47],
                             [10, 30, 60, 37],
                             [3, 10, 24, 14],
                             [4, 10, 19, 12]], dtype=float)


def leading_eigenvector_lengths(matrix=IE_LENGTH_MATRIX) -> np.ndarray:
    """Normalised entries of the Perron eigenvector of a positive matrix."""
    w, v = np.linalg.eig(np.asarray(matrix, dtype=float))
    vec = np.abs(v[:, np.argmax(w.real)].real)
    return vec / vec.sum()


def interval_exchange(order_after: Sequence[int] = (4, 3, 2, 1), lengths=None) -> MapModel:
    """Interval exchange: interval ``k`` (1-based) is moved to the slot it occupies in ``order_after``.

    The default ``(4, 3, 2, 1)`` with lengths from :func:`leading_eigenvector_lengths`
    is the weak-mixing example with breakpoints near 0.43, 0.77, 0.89.
    """
    order_after = tuple(int(k) for k in order_after)
    m = len(order_after)
    if sorted(order_after) != list(range(1, m + 1)):
        raise InvalidParameterError(f"order_after must be a permutation of 1..{m}")
    lengths = leading_eigenvector_lengths() if lengths is None else np.asarray(lengths, dtype=float)
    if lengths.shape != (m,) or np.any(lengths <= 0):
        raise InvalidParameterError("need one positive length per interval")
    lengths = lengths / lengths.sum()
    starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    new_starts = np.empty(m)
    pos = 0.0
    for k in order_after:
        new_starts[k - 1] = pos
        pos += lengths[k - 1]
    shifts = new_starts - starts

    def T(x):
        idx = np.clip(np.searchsorted(starts, x, side="right") - 1, 0, m - 1)
        return x + shifts[idx]

    return MapModel(T, f"interval exchange {tuple(range(1, m + 1))}->{order_after}",
                    {"order_after": list(order_after), "lengths": lengths.tolist()},
                    breakpoints=tuple(starts[1:]), name="interval-exchange")


def affine(a: float = 1.0, b: float = 0.0, mode: str = "mod") -> MapModel:
    """``T(x) = a x + b`` folded into ``[0, 1]`` either mod 1 or by clamping."""
    a, b = float(a), float(b)
    if mode not in ("mod", "clamp"):
        raise InvalidParameterError("mode must be 'mod' or 'clamp'")
    lo, hi = sorted((b, a + b))
    if mode == "mod":
        if 0.0 <= lo and hi <= 1.0:
            def T(x):
                return a * x + b
            bps = ()
        else:
            def T(x):
                return np.mod(a * x + b, 1.0)
            ks = np.arange(math.floor(lo) + 1, math.ceil(hi))
            bps = tuple(sorted((k - b) / a for k in ks if 0.0 < (k - b) / a < 1.0)) if a != 0 else ()
    else:
        def T(x):
            return np.clip(a * x + b, 0.0, 1.0)
        bps = tuple(sorted(p for p in ((0.0 - b) / a, (1.0 - b) / a) if 0.0 < p < 1.0)) if a != 0 else ()
    return MapModel(T, f"affine {a:g}x+{b:g} ({mode})", {"a": a, "b": b, "mode": mode},
                    breakpoints=bps, name="affine")


def table_map(xs=None, ts=None, path=None) -> MapModel:
    """Piecewise-linear map through samples ``(x, T(x))``, optionally read from a two-column CSV."""
    if path is not None:
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    continue  # header line
        if not rows:
            raise InvalidInputError(f"no samples in {path}")
        xs, ts = map(np.array, zip(*rows))
    xs, ts = np.asarray(xs, dtype=float), np.asarray(ts, dtype=float)
    if xs.ndim != 1 or xs.shape != ts.shape or xs.size < 2:
        raise InvalidInputError("table map needs matching x and T(x) columns with at least two rows")
    order = np.argsort(xs)
    xs, ts = xs[order], ts[order]
    if np.any(np.diff(xs) <= 0):
        raise InvalidInputError("table map x values must be distinct")
    if ts.min() < 0.0 or ts.max() > 1.0:
        raise InvalidInputError("table map values must lie in [0, 1]")

    def T(x):
        return np.interp(x, xs, ts)

    inner = tuple(float(x) for x in xs if 0.0 < x < 1.0)
    return MapModel(T, "piecewise-linear table map",
                    {"source": str(path) if path else "inline", "xs": xs.tolist(), "ts": ts.tolist()},
                    breakpoints=inner, name="table")


MAP_BUILDERS = {
    "pomeau-manneville": pomeau_manneville,
    "interval-exchange": interval_exchange,
    "affine": affine,
    "table": table_map,
}


def make_map(name: str, **params) -> MapModel:
    try:
        builder = MAP_BUILDERS[name]
    except KeyError:
        raise InvalidParameterError(f"unknown map {name!r}; choose from {sorted(MAP_BUILDERS)}") from None
    return builder(**params)


# ---------------------------------------------------------------------------
# reflection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReflectedDensity:
    points: np.ndarray
    values: np.ndarray
    provenance: str = ""


def image_terms(lo: float, hi: float):
    """Terms ``(i, s)`` of P_pi, meaning ``f(i + s*x)``, that can be nonzero for x in [0, 1].

    ``[lo, hi]`` bounds the support of ``f``.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise InvalidInputError(f"invalid support bounds [{lo}, {hi}]")
    if lo < -SUPPORT_LIMIT or hi > SUPPORT_LIMIT:
        raise InvalidInputError(f"support [{lo}, {hi}] exceeds [-{SUPPORT_LIMIT:g}, {SUPPORT_LIMIT:g}]")
    terms = []
    for i in range(-FOLD_CAP, FOLD_CAP + 1, 2):
        if i <= hi and i + 1 >= lo:       # i + x sweeps [i, i+1]
            terms.append((i, 1))
        if i - 1 <= hi and i >= lo:       # i - x sweeps [i-1, i]
            terms.append((i, -1))
    return terms


def reflect_fold(f, eval_points, support) -> ReflectedDensity:
    """Evaluate ``P_pi f`` at ``eval_points``.

    ``support`` is a list of ``(a, b)`` intervals containing the support of
    ``f``; the set of reflected images is derived from it.
    """
    if support is None or len(support) == 0:
        raise InvalidInputError("reflect_fold needs the declared support of f")
    support = [(float(a), float(b)) for a, b in support]
    lo = min(a for a, _ in support)
    hi = max(b for _, b in support)
    x = np.asarray(eval_points, dtype=float)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise InvalidInputError("evaluation points must lie in [0, 1]")
    total = np.zeros_like(x)
    for i, s in image_terms(lo, hi):
        total = total + np.asarray(f(i + s * x), dtype=float)
    return ReflectedDensity(points=x, values=total, provenance=f"fold of f supported in {support}")


def _shift_terms(noise: NoiseModel, t=None):
    # supports [t - eps, t + eps]; t normally in [0, 1], wider for overshooting maps
    lo, hi = 0.0, 1.0
    if t is not None and np.size(t):
        lo, hi = min(lo, float(np.min(t))), max(hi, float(np.max(t)))
    return image_terms(lo - noise.epsilon, hi + noise.epsilon)


def kernel_value(map_: MapModel, noise: NoiseModel, x, y):
    """``k(x, y) = (P_pi tau_{-T(y)} rho)(x)``, broadcasting over ``x`` and ``y``."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    t = map_(y)
    out = np.zeros(x.shape)
    for i, s in _shift_terms(noise, t):
        out += noise.density(i + s * x - t)
    return out


def kernel_map_derivative_factor(map_: MapModel, noise: NoiseModel, x, y):
    """``(P_pi tau_{-T(y)} rho')(x)``; the map-perturbation kernel derivative is ``-factor * Tdot(y)``."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    t = map_(y)
    out = np.zeros(x.shape)
    for i, s in _shift_terms(noise, t):
        out += noise.density_deriv(i + s * x - t)
    return out


def folded_cell_increments(primitive, noise: NoiseModel, t, edges):
    """Integrals over cells ``[edges[k], edges[k+1]]`` of ``P_pi g(. - t)`` given a primitive of ``g``.

    With ``primitive = noise.cdf`` this is the mass the kernel column at
    shift ``t`` places in each cell; with ``primitive = noise.density`` it is
    the cell integral of the derivative factor.  Returns shape ``(len(t), len(edges) - 1)``.
    """
    t = np.asarray(t, dtype=float)[:, None]
    a, b = edges[None, :-1], edges[None, 1:]
    out = np.zeros((t.shape[0], edges.size - 1))
    for i, s in _shift_terms(noise, t):
        if s == 1:
            out += primitive(i + b - t) - primitive(i + a - t)
        else:
            out += primitive(i - a - t) - primitive(i - b - t)
    return out
