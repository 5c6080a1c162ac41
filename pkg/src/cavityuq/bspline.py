"""Univariate and tensor-product B-spline bases.

Open knot vectors on [0, 1], Cox-de Boor evaluation with derivatives,
Greville abscissae, degree truncation and uniform h-refinement. These are
the building blocks for geometry maps, deformation fields and the mixed
discretization spaces.
"""

from dataclasses import dataclass, field
from functools import reduce
import operator

import numpy as np

__all__ = [
    "KnotVector",
    "TensorBasis",
    "eval_basis",
    "greville_points",
    "truncate_knots",
    "refine_knots",
    "open_uniform_knots",
]


def open_uniform_knots(degree: int, n_spans: int) -> "KnotVector":
    """Open knot vector on [0, 1] with ``n_spans`` equal spans."""
    if n_spans < 1:
        raise ValueError("need at least one span")
    interior = np.linspace(0.0, 1.0, n_spans + 1)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return KnotVector(degree, knots)


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector on [0, 1] together with a polynomial degree.

    The vector must be non-decreasing with the first and last knot repeated
    ``degree + 1`` times (0 and 1 respectively), and locally quasi-uniform:
    consecutive non-empty span lengths may differ by at most a factor
    ``theta``. The number of basis functions is ``len(knots) - degree - 1``.
    """

    degree: int
    knots: np.ndarray
    theta: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))
        k = self.knots
        p = self.degree
        if p < 0:
            raise ValueError("degree must be non-negative")
        if self.n_basis < p + 1:
            raise ValueError("knot vector too short for degree %d" % p)
        if np.any(np.diff(k) < 0):
            raise ValueError("knots must be non-decreasing")
        if not (np.all(k[: p + 1] == 0.0) and np.all(k[-(p + 1):] == 1.0)):
            raise ValueError("knot vector must be %d-open on [0, 1]" % p)
        spans = np.diff(k)
        h = spans[spans > 0]
        if h.size > 1:
            ratio = h[1:] / h[:-1]
            if np.any(ratio > self.theta) or np.any(ratio < 1.0 / self.theta):
                raise ValueError(
                    "knot vector violates local quasi-uniformity (theta=%g)" % self.theta
                )
        # cache breakpoints (non-empty span boundaries)
        object.__setattr__(self, "_breaks", np.unique(k))

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def breakpoints(self) -> np.ndarray:
        return self._breaks

    @property
    def n_spans(self) -> int:
        return len(self._breaks) - 1

    def find_span(self, x: float) -> int:
        """Index j of the non-empty span with knots[j] <= x < knots[j+1].

        Span selection is right-continuous; x = 1 is assigned to the last
        non-empty span so every point of [0, 1] has a well-defined span.
        """
        if x < 0.0 or x > 1.0:
            raise ValueError("point %g outside [0, 1]" % x)
        n = self.n_basis
        if x >= 1.0:
            return n - 1
        j = int(np.searchsorted(self.knots, x, side="right")) - 1
        return min(max(j, self.degree), n - 1)

    def basis_ders(self, x: float, nderiv: int = 0) -> tuple[int, np.ndarray]:
        """Nonzero basis functions and derivatives at x.

        Returns ``(first, D)`` where ``D[k, a]`` is the k-th derivative of
        basis function ``first + a`` for ``a = 0..degree``. Cox-de Boor
        recursion, right-continuous at knots.
        """
        if nderiv > self.degree:
            raise ValueError("derivative order exceeds degree")
        span = self.find_span(x)
        D = _ders_basis_funs(span, x, self.degree, nderiv, self.knots)
        return span - self.degree, D

    def greville(self) -> np.ndarray:
        """Greville abscissae, one per basis function (knot averages)."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        idx = np.arange(self.n_basis)
        return np.array([self.knots[j + 1: j + p + 1].sum() / p for j in idx])

    def truncated(self) -> "KnotVector":
        """Degree p-1 knot vector with first and last knot removed."""
        if self.degree == 0:
            raise ValueError("cannot truncate degree-0 space")
        return KnotVector(self.degree - 1, self.knots[1:-1], self.theta)

    def refined(self) -> "KnotVector":
        """Uniform h-refinement: bisect every non-empty span."""
        mids = 0.5 * (self._breaks[:-1] + self._breaks[1:])
        return KnotVector(self.degree, np.sort(np.concatenate([self.knots, mids])), self.theta)


def _ders_basis_funs(span, x, p, n, knots):
    """Values and derivatives of the p+1 B-splines supported on a span.

    Standard triangular-table recursion; returns array (n+1, p+1).
    """
    ndu = np.empty((p + 1, p + 1))
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    ders = np.zeros((n + 1, p + 1))
    ders[0, :] = ndu[:, p]
    a = np.empty((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, n + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, n + 1):
        ders[k, :] *= fac
        fac *= p - k
    return ders


def eval_basis(kv: KnotVector, x: float, nderiv: int = 0):
    """Nonzero basis functions at x as (index, value, derivatives) tuples.

    Exactly the degree+1 functions supported on the span containing x are
    returned; ``derivatives`` is an array of the 1..nderiv derivatives.
    """
    first, D = kv.basis_ders(x, nderiv)
    return [(first + a, D[0, a], D[1:, a].copy()) for a in range(kv.degree + 1)]


def greville_points(kv: KnotVector) -> np.ndarray:
    return kv.greville()


def truncate_knots(kv: KnotVector) -> KnotVector:
    return kv.truncated()


def refine_knots(kv: KnotVector) -> KnotVector:
    return kv.refined()


@dataclass(frozen=True)
class TensorBasis:
    """Tensor product of 1, 2 or 3 univariate spline bases.

    The lexicographic index map runs direction 1 fastest:
    ``flat = i1 + k1*i2 (+ k1*k2*i3)``.
    """

    kvs: tuple

    def __post_init__(self):
        object.__setattr__(self, "kvs", tuple(self.kvs))
        if not 1 <= len(self.kvs) <= 3:
            raise ValueError("dimension must be 1, 2 or 3")

    @property
    def dim(self) -> int:
        return len(self.kvs)

    @property
    def shape(self) -> tuple:
        return tuple(kv.n_basis for kv in self.kvs)

    @property
    def n_basis(self) -> int:
        return reduce(operator.mul, self.shape, 1)

    def ravel_index(self, multi) -> int:
        flat = 0
        for i, k in zip(reversed(multi), reversed(self.shape)):
            flat = flat * k + i
        return flat

    def unravel_index(self, flat: int) -> tuple:
        out = []
        for k in self.shape:
            out.append(flat % k)
            flat //= k
        return tuple(out)

    def eval_ders(self, x, nderiv: int = 0):
        """Per-direction (first_index, ders) tables at point x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.size != self.dim:
            raise ValueError("point dimension mismatch")
        return [kv.basis_ders(xi, nderiv) for kv, xi in zip(self.kvs, x)]

    def refined(self) -> "TensorBasis":
        return TensorBasis(tuple(kv.refined() for kv in self.kvs))
