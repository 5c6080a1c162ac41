"""Geometry maps, deformation fields and pullback coefficient algebra.

A reference patch is parameterized by a (possibly rational) spline map F
from the unit square/cube. Shape perturbations are vector fields composed
of modes V_i weighted by parameters z_i in [-1, 1] and a global amplitude
t, so the deformed configuration is  x + t * sum_i z_i V_i(x).

Transporting the curl-curl eigenproblem back to the reference domain turns
the deformation into coefficients: with J the deformation Jacobian,

    C = (1/det J) J^T J          (curl coefficient; scalar 1/det J in 2d)
    A = det(J) J^{-1} J^{-T}     (mass coefficient)

This module provides C, A, their directional derivatives in the amplitude,
and the per-mode derivative matrices at the reference configuration.
"""

from dataclasses import dataclass, field

import numpy as np

from .bspline import KnotVector, TensorBasis, open_uniform_knots

__all__ = [
    "GeometryMap",
    "DeformationField",
    "ClosedFormMode",
    "SplineMode",
    "CoefficientSample",
    "pullback_coefficients",
    "coefficients_at",
    "coefficient_derivatives_general",
    "reference_mode_coefficients",
    "eval_map",
    "read_deformation_file",
    "write_deformation_file",
    "read_patch_file",
    "write_patch_file",
    "MapSingularError",
]

DET_TOL = 1e-12


class MapSingularError(ValueError):
    """Raised when a map Jacobian is (numerically) not invertible."""


# ---------------------------------------------------------------------------
# geometry map
# ---------------------------------------------------------------------------

class GeometryMap:
    """Spline/NURBS patch map from the unit d-cube to the reference domain.

    Control points are stored one row per basis function in the tensor
    basis' lexicographic order, coordinates in meters. Weights default to 1
    (polynomial map). The Jacobian determinant is checked to be positive on
    a Gauss grid at construction.
    """

    def __init__(self, basis: TensorBasis, control: np.ndarray, weights=None, check: bool = True):
        self.basis = basis
        self.control = np.asarray(control, dtype=float)
        if self.control.shape != (basis.n_basis, basis.dim):
            raise ValueError("control point array has wrong shape")
        if weights is None:
            weights = np.ones(basis.n_basis)
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (basis.n_basis,):
            raise ValueError("weight array has wrong shape")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        self.dim = basis.dim
        # control grid with direction-1 index fastest
        shape = basis.shape
        self._grid = self.control.reshape(tuple(reversed(shape)) + (self.dim,))
        self._wgrid = self.weights.reshape(tuple(reversed(shape)))
        self.is_rational = not np.allclose(self.weights, 1.0)
        if check:
            self._check_orientation()

    @classmethod
    def rectangle(cls, a: float, b: float) -> "GeometryMap":
        """Axis-aligned rectangle [0, a] x [0, b] as a bilinear patch."""
        kv = open_uniform_knots(1, 1)
        basis = TensorBasis((kv, kv))
        control = np.array([[0, 0], [a, 0], [0, b], [a, b]], dtype=float)
        return cls(basis, control)

    @classmethod
    def identity(cls, dim: int) -> "GeometryMap":
        """Identity map on the unit d-cube."""
        kv = open_uniform_knots(1, 1)
        basis = TensorBasis((kv,) * dim)
        pts = [np.array([0.0, 1.0])] * dim
        mesh = np.meshgrid(*pts, indexing="ij")
        control = np.stack([m.reshape(-1, order="F") for m in mesh], axis=-1)
        return cls(basis, control)

    def _check_orientation(self):
        for x in _gauss_grid(self.basis):
            _, J = self.jacobian(x)
            if np.linalg.det(J) <= DET_TOL:
                raise MapSingularError("map not invertible at point %s" % (x,))

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)

    def evaluate(self, x) -> np.ndarray:
        return self.jacobian(x)[0]

    def jacobian(self, x):
        """Physical point F(x) and Jacobian dF/dx at parametric x."""
        tabs = self.basis.eval_ders(x, 1)
        d = self.dim
        # homogeneous accumulation: numerator (d) and weight, plus derivatives
        slc = tuple(
            slice(first, first + kv.degree + 1)
            for (first, _), kv in zip(tabs, self.basis.kvs)
        )
        ctrl = self._grid[tuple(reversed(slc))]          # (..,:,:) local block
        wloc = self._wgrid[tuple(reversed(slc))]
        vals = [D[0] for (_, D) in tabs]
        ders = [D[1] for (_, D) in tabs]
        num = _tensor_contract(ctrl * wloc[..., None], vals, d)
        den = _tensor_contract(wloc[..., None], vals, 1)[0]
        point = num / den
        J = np.empty((d, d))
        for k in range(d):
            facs = [ders[j] if j == k else vals[j] for j in range(d)]
            dnum = _tensor_contract(ctrl * wloc[..., None], facs, d)
            dden = _tensor_contract(wloc[..., None], facs, 1)[0]
            J[:, k] = (dnum - point * dden) / den
        return point, J

    def refined(self) -> "GeometryMap":
        """Same map over the h-refined basis (control points re-fitted)."""
        fine = self.basis.refined()
        pts = _greville_grid(fine)
        vals = np.array([self.evaluate(x) for x in pts])
        coll = _collocation_matrix(fine, pts)
        control = np.linalg.solve(coll, vals)
        if self.is_rational:
            raise NotImplementedError("refinement of rational maps")
        return GeometryMap(fine, control)


def _tensor_contract(block, factors, d):
    """Contract a local coefficient block with per-direction factor vectors.

    ``block`` has axes ordered (dir_d, ..., dir_1, component).
    """
    out = block
    for f in factors:  # factors listed dir_1..dir_d; contract innermost first
        out = np.tensordot(f, out, axes=([0], [len(out.shape) - 2]))
    return out.reshape(d)


def _gauss_grid(basis: TensorBasis):
    """Per-span Gauss points of order degree+1, tensorized."""
    axes = []
    for kv in basis.kvs:
        nodes, _ = np.polynomial.legendre.leggauss(kv.degree + 1)
        b = kv.breakpoints
        pts = (0.5 * (nodes[None, :] + 1.0) * np.diff(b)[:, None] + b[:-1, None]).ravel()
        axes.append(pts)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _greville_grid(basis: TensorBasis):
    axes = [kv.greville() for kv in basis.kvs]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1, order="F") for m in mesh], axis=-1)


def _collocation_matrix(basis: TensorBasis, pts):
    n = basis.n_basis
    A = np.zeros((len(pts), n))
    for r, x in enumerate(pts):
        tabs = basis.eval_ders(x, 0)
        idx = [np.arange(first, first + kv.degree + 1) for (first, _), kv in zip(tabs, basis.kvs)]
        vals = [D[0] for (_, D) in tabs]
        if basis.dim == 1:
            A[r, idx[0]] = vals[0]
        elif basis.dim == 2:
            for j2, i2 in enumerate(idx[1]):
                for j1, i1 in enumerate(idx[0]):
                    A[r, basis.ravel_index((i1, i2))] = vals[0][j1] * vals[1][j2]
        else:
            for j3, i3 in enumerate(idx[2]):
                for j2, i2 in enumerate(idx[1]):
                    for j1, i1 in enumerate(idx[0]):
                        A[r, basis.ravel_index((i1, i2, i3))] = (
                            vals[0][j1] * vals[1][j2] * vals[2][j3]
                        )
    return A


# ---------------------------------------------------------------------------
# deformation fields
# ---------------------------------------------------------------------------

def _mode_axis_scaling(d, axis):
    axis = int(axis)

    def value(x):
        v = np.zeros(d)
        v[axis] = x[axis]
        return v

    def jac(x):
        J = np.zeros((d, d))
        J[axis, axis] = 1.0
        return J

    return value, jac


def _mode_shear(d, target, source):
    target, source = int(target), int(source)

    def value(x):
        v = np.zeros(d)
        v[target] = x[source]
        return v

    def jac(x):
        J = np.zeros((d, d))
        J[target, source] = 1.0
        return J

    return value, jac


def _mode_bump(d, axis, amplitude):
    """Polynomial bump amplitude * prod_k 4 x_k (1 - x_k), vanishing on the boundary."""
    axis = int(axis)
    amplitude = float(amplitude)

    def profile(x):
        return np.prod(4.0 * x * (1.0 - x))

    def value(x):
        v = np.zeros(d)
        v[axis] = amplitude * profile(x)
        return v

    def jac(x):
        J = np.zeros((d, d))
        for k in range(d):
            terms = 4.0 * x * (1.0 - x)
            grad = 4.0 * (1.0 - 2.0 * x[k])
            others = np.prod(np.delete(terms, k)) if d > 1 else 1.0
            J[axis, k] = amplitude * grad * others
        return J

    return value, jac


_CLOSED_FORM_CATALOG = {
    "axis_scaling": (_mode_axis_scaling, 1),
    "shear": (_mode_shear, 2),
    "bump": (_mode_bump, 2),
}


@dataclass(frozen=True)
class ClosedFormMode:
    """Catalog deformation mode with analytic value and Jacobian."""

    dim: int
    name: str
    params: tuple

    def __post_init__(self):
        if self.name not in _CLOSED_FORM_CATALOG:
            raise ValueError("unknown closed-form mode %r" % self.name)
        factory, nparams = _CLOSED_FORM_CATALOG[self.name]
        if len(self.params) != nparams:
            raise ValueError("mode %r takes %d parameters" % (self.name, nparams))
        val, jac = factory(self.dim, *self.params)
        object.__setattr__(self, "_value", val)
        object.__setattr__(self, "_jac", jac)

    def value(self, x):
        return self._value(np.asarray(x, dtype=float))

    def jacobian(self, x):
        return self._jac(np.asarray(x, dtype=float))

    def tokens(self):
        return ["closed_form", self.name] + [repr(float(p)) for p in self.params]


class SplineMode:
    """Vector-valued spline deformation mode over the parametric patch."""

    def __init__(self, basis: TensorBasis, coeffs: np.ndarray):
        self.basis = basis
        self.dim = basis.dim
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (basis.n_basis, self.dim):
            raise ValueError("coefficient array has wrong shape")
        shape = basis.shape
        self._grid = self.coeffs.reshape(tuple(reversed(shape)) + (self.dim,))

    @classmethod
    def fit(cls, basis: TensorBasis, func) -> "SplineMode":
        """Interpolate a callable at the Greville grid."""
        pts = _greville_grid(basis)
        vals = np.array([func(x) for x in pts])
        coll = _collocation_matrix(basis, pts)
        return cls(basis, np.linalg.solve(coll, vals))

    def value(self, x):
        return self._eval(x, 0)[0]

    def jacobian(self, x):
        return self._eval(x, 1)[1]

    def _eval(self, x, nder):
        tabs = self.basis.eval_ders(x, nder)
        d = self.dim
        slc = tuple(
            slice(first, first + kv.degree + 1)
            for (first, _), kv in zip(tabs, self.basis.kvs)
        )
        block = self._grid[tuple(reversed(slc))]
        vals = [D[0] for (_, D) in tabs]
        v = _tensor_contract(block, vals, d)
        if nder == 0:
            return v, None
        J = np.empty((d, d))
        ders = [D[1] for (_, D) in tabs]
        for k in range(d):
            facs = [ders[j] if j == k else vals[j] for j in range(d)]
            J[:, k] = _tensor_contract(block, facs, d)
        return v, J

    def tokens(self):
        out = ["spline", str(self.dim)]
        for kv in self.basis.kvs:
            out.append(str(kv.degree))
            out.append(str(len(kv.knots)))
            out.extend(repr(float(k)) for k in kv.knots)
        out.extend(repr(float(c)) for c in self.coeffs.ravel())
        return out


class DeformationField:
    """Collection of deformation modes V_i sharing the parametric patch.

    Modes are evaluated in parametric coordinates; physical-coordinate
    Jacobians are obtained by the chain rule through the geometry map.
    """

    def __init__(self, modes):
        self.modes = list(modes)
        if self.modes:
            dims = {m.dim for m in self.modes}
            if len(dims) != 1:
                raise ValueError("modes have inconsistent dimensions")
            self.dim = dims.pop()
        else:
            self.dim = None

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mode_values(self, x) -> np.ndarray:
        return np.array([m.value(x) for m in self.modes])

    def mode_jacobians(self, x) -> np.ndarray:
        return np.array([m.jacobian(x) for m in self.modes])

    def value(self, x, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if len(z) != self.n_modes:
            raise ValueError("parameter vector length mismatch")
        vals = self.mode_values(x)
        return np.tensordot(z, vals, axes=1) if self.n_modes else np.zeros(len(x))


# ---------------------------------------------------------------------------
# deformation field files (plain text, whitespace separated)
# ---------------------------------------------------------------------------

def write_deformation_file(field: DeformationField, path):
    lines = [" ".join(m.tokens()) for m in field.modes]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_deformation_file(path, dim: int = 2) -> DeformationField:
    """Parse a mode-per-record deformation file.

    Records are whitespace-separated token runs starting with
    ``closed_form <name> <params...>`` or ``spline <d> <per-direction
    degree, knot count, knots...> <coefficients...>``. Lines beginning with
    ``#`` are comments.
    """
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    modes = []
    pos = 0
    while pos < len(tokens):
        tag = tokens[pos]
        pos += 1
        if tag == "closed_form":
            name = tokens[pos]
            pos += 1
            _, nparams = _CLOSED_FORM_CATALOG.get(name, (None, None))
            if nparams is None:
                raise ValueError("unknown closed-form mode %r" % name)
            params = tuple(float(t) for t in tokens[pos: pos + nparams])
            pos += nparams
            modes.append(ClosedFormMode(dim, name, params))
        elif tag == "spline":
            d = int(tokens[pos])
            pos += 1
            kvs = []
            for _ in range(d):
                p = int(tokens[pos])
                nk = int(tokens[pos + 1])
                pos += 2
                knots = np.array([float(t) for t in tokens[pos: pos + nk]])
                pos += nk
                kvs.append(KnotVector(p, knots))
            basis = TensorBasis(tuple(kvs))
            ncoef = basis.n_basis * d
            coeffs = np.array([float(t) for t in tokens[pos: pos + ncoef]])
            pos += ncoef
            modes.append(SplineMode(basis, coeffs.reshape(basis.n_basis, d)))
        else:
            raise ValueError("unknown deformation record %r" % tag)
    return DeformationField(modes)


def write_patch_file(G: GeometryMap, path):
    tokens = ["patch", str(G.dim)]
    for kv in G.basis.kvs:
        tokens.append(str(kv.degree))
        tokens.append(str(len(kv.knots)))
        tokens.extend(repr(float(k)) for k in kv.knots)
    tokens.extend(repr(float(c)) for c in G.control.ravel())
    if G.is_rational:
        tokens.append("weights")
        tokens.extend(repr(float(w)) for w in G.weights)
    with open(path, "w") as fh:
        fh.write(" ".join(tokens) + "\n")


def read_patch_file(path) -> GeometryMap:
    with open(path) as fh:
        tokens = []
        for line in fh:
            tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "patch":
        raise ValueError("not a patch file: %s" % path)
    d = int(tokens[1])
    pos = 2
    kvs = []
    for _ in range(d):
        p = int(tokens[pos])
        nk = int(tokens[pos + 1])
        pos += 2
        kvs.append(KnotVector(p, np.array([float(t) for t in tokens[pos: pos + nk]])))
        pos += nk
    basis = TensorBasis(tuple(kvs))
    n = basis.n_basis * d
    control = np.array([float(t) for t in tokens[pos: pos + n]]).reshape(basis.n_basis, d)
    pos += n
    weights = None
    if pos < len(tokens) and tokens[pos] == "weights":
        pos += 1
        weights = np.array([float(t) for t in tokens[pos: pos + basis.n_basis]])
    return GeometryMap(basis, control, weights)


# ---------------------------------------------------------------------------
# pullback coefficient algebra
# ---------------------------------------------------------------------------

@dataclass
class CoefficientSample:
    """Pullback coefficients and per-mode derivatives at one point.

    ``C`` is the curl coefficient (symmetric 3x3 for d=3, positive scalar
    for d=2), ``A`` the symmetric d x d mass coefficient. ``dC``/``dA`` hold
    the per-mode derivatives at the reference configuration when requested.
    """

    x: np.ndarray
    C: object
    A: np.ndarray
    dC: list = field(default_factory=list)
    dA: list = field(default_factory=list)


def _checked_det(J):
    det = np.linalg.det(J)
    if det <= DET_TOL:
        raise MapSingularError("map not invertible at point")
    return det


def pullback_coefficients(J: np.ndarray):
    """Curl and mass coefficients of a deformation Jacobian.

    d=3: C = (1/det J) J^T J and A = det(J) J^{-1} J^{-T}.
    d=2: the curl of a planar field is scalar, so C degenerates to the
    scalar 1/det J while A keeps the matrix formula.
    """
    J = np.asarray(J, dtype=float)
    d = J.shape[0]
    det = _checked_det(J)
    Jinv = np.linalg.inv(J)
    A = det * (Jinv @ Jinv.T)
    if d == 2:
        return 1.0 / det, A
    return (J.T @ J) / det, A


def coefficients_at(G: GeometryMap, V: DeformationField, t: float, z, x) -> CoefficientSample:
    """Exact (non-linearized) coefficients of the deformed map at x."""
    _, Jdef = eval_map(G, V, t, z, x, split=True)[2:]
    C, A = pullback_coefficients(Jdef)
    return CoefficientSample(np.asarray(x, dtype=float), C, A)


def coefficient_derivatives_general(J: np.ndarray, Jdot: np.ndarray):
    """Directional derivatives of the pullback coefficients.

    For the matrix coefficients (any d),
      dC = -tr(Jdot J^{-1}) C + (1/det J)(Jdot^T J + (Jdot^T J)^T)
      dA =  tr(Jdot J^{-1}) A - J^{-1} Jdot A - (J^{-1} Jdot A)^T.
    In 2d the scalar curl coefficient derivative is -tr(Jdot J^{-1})/det J.
    """
    J = np.asarray(J, dtype=float)
    Jdot = np.asarray(Jdot, dtype=float)
    d = J.shape[0]
    det = _checked_det(J)
    Jinv = np.linalg.inv(J)
    trace = np.trace(Jdot @ Jinv)
    A = det * (Jinv @ Jinv.T)
    W = Jinv @ Jdot @ A
    dA = trace * A - W - W.T
    if d == 2:
        return -trace / det, dA
    C = (J.T @ J) / det
    S = Jdot.T @ J
    dC = -trace * C + (S + S.T) / det
    return dC, dA


def reference_mode_matrix(dV: np.ndarray) -> np.ndarray:
    """Shared building block tr(dV) I - dV - dV^T of the per-mode derivatives."""
    dV = np.asarray(dV, dtype=float)
    return np.trace(dV) * np.eye(dV.shape[0]) - dV - dV.T


def reference_mode_coefficients(V: DeformationField, x, G: GeometryMap = None):
    """Per-mode coefficient derivatives at the reference configuration.

    Returns a list of (dC_i, dA_i). With B_i = tr(dV_i) I - dV_i - dV_i^T
    evaluated in physical coordinates, dC_i = -B_i and dA_i = +B_i for d=3;
    in 2d the curl part is the scalar -tr(dV_i).
    """
    out = []
    if G is not None:
        _, JF = G.jacobian(x)
        JFinv = np.linalg.inv(JF)
    else:
        JFinv = None
    for m in V.modes:
        dV = m.jacobian(x)
        if JFinv is not None:
            dV = dV @ JFinv
        B = reference_mode_matrix(dV)
        if V.dim == 2:
            out.append((-np.trace(dV), B))
        else:
            out.append((-B, B))
    return out


def eval_map(G: GeometryMap, V: DeformationField, t: float, z, x, split: bool = False):
    """Deformed physical point and Jacobian at parametric x.

    The deformed map is F(x) + t sum_i z_i V_i(x) with modes evaluated in
    parametric coordinates. Returns (point, J) where J is the Jacobian of
    the composite map with respect to x; with ``split=True`` additionally
    returns the geometry Jacobian dF and the deformation Jacobian in
    physical coordinates (J dF^{-1}).
    """
    z = np.asarray(z, dtype=float)
    if V.n_modes != len(z):
        raise ValueError("parameter vector length mismatch")
    point, JF = G.jacobian(x)
    J = JF.copy()
    if V.n_modes and t != 0.0:
        vals = V.mode_values(x)
        jacs = V.mode_jacobians(x)
        point = point + t * np.tensordot(z, vals, axes=1)
        J = J + t * np.tensordot(z, jacs, axes=1)
    det = np.linalg.det(J)
    if det <= DET_TOL:
        raise MapSingularError("map not invertible at point %s" % (x,))
    if split:
        return point, J, JF, J @ np.linalg.inv(JF)
    return point, J
