"""Tangentially-conforming 2d spline discretization and matrix assembly.

The vector-valued space couples two scalar tensor-product spline spaces of
mixed degree: the x component lives in S^{p1-1}(Xi1') x S^{p2}(Xi2) and the
y component in S^{p1}(Xi1) x S^{p2-1}(Xi2'), where Xi' drops the first and
last knot. Basis functions whose tangential trace on the patch boundary is
nonzero are eliminated (perfectly conducting wall).

Basis functions are pulled back covariantly through the patch map F:
values transform with dF^{-T} and the scalar planar curl with 1/det dF.
Stiffness and mass matrices for arbitrary coefficient fields are assembled
with per-span Gauss-Legendre quadrature of order max(p1, p2) + 1 per
direction, accumulated in a fixed span order so results do not depend on
any parallel execution layout.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .bspline import KnotVector, open_uniform_knots
from .geometry import DeformationField, GeometryMap, MapSingularError

__all__ = [
    "HCurlSpace",
    "EigenPencil",
    "build_space",
    "assemble",
    "assemble_pencil",
    "sampled_matrices",
    "gradient_embedding",
    "evaluate_field",
    "dump_matrix_csv",
]


class HCurlSpace:
    """Mixed-degree two-component spline space with boundary DOFs removed."""

    def __init__(self, kv1: KnotVector, kv2: KnotVector):
        if kv1.degree < 1 or kv2.degree < 1:
            raise ValueError("component degrees must be at least 1")
        self.kv1 = kv1
        self.kv2 = kv2
        self.kv1t = kv1.truncated()
        self.kv2t = kv2.truncated()
        # component 1: x-factor truncated, y-factor full
        self.shape1 = (self.kv1t.n_basis, self.kv2.n_basis)
        # component 2: x-factor full, y-factor truncated
        self.shape2 = (self.kv1.n_basis, self.kv2t.n_basis)
        self.n_full = self.shape1[0] * self.shape1[1] + self.shape2[0] * self.shape2[1]
        self._build_active_map()
        self._assemblers = {}

    def _build_active_map(self):
        n1x, n1y = self.shape1
        n2x, n2y = self.shape2
        active = np.full(self.n_full, -1, dtype=int)
        n = 0
        for g in range(self.n_full):
            comp, ix, iy = self.unpack_index(g)
            if comp == 0 and iy in (0, n1y - 1):
                continue  # x component tangential on y-boundaries
            if comp == 1 and ix in (0, n2x - 1):
                continue  # y component tangential on x-boundaries
            active[g] = n
            n += 1
        self.active = active
        self.n_active = n

    @property
    def N(self) -> int:
        return self.n_active

    def pack_index(self, comp, ix, iy) -> int:
        if comp == 0:
            return iy * self.shape1[0] + ix
        return self.shape1[0] * self.shape1[1] + iy * self.shape2[0] + ix

    def unpack_index(self, g: int):
        n1 = self.shape1[0] * self.shape1[1]
        if g < n1:
            return 0, g % self.shape1[0], g // self.shape1[0]
        g -= n1
        return 1, g % self.shape2[0], g // self.shape2[0]

    @property
    def degrees(self):
        return (self.kv1.degree, self.kv2.degree)

    def refined(self) -> "HCurlSpace":
        return HCurlSpace(self.kv1.refined(), self.kv2.refined())

    def scalar_interior_dim(self) -> int:
        """Dimension of the zero-trace scalar spline space (gradient count)."""
        return max(self.kv1.n_basis - 2, 0) * max(self.kv2.n_basis - 2, 0)


def build_space(degrees, spans_or_knots) -> HCurlSpace:
    """Construct the space from degrees and span counts or knot vectors."""
    p1, p2 = degrees
    if isinstance(spans_or_knots, (tuple, list)) and isinstance(spans_or_knots[0], KnotVector):
        kv1, kv2 = spans_or_knots
        if (kv1.degree, kv2.degree) != (p1, p2):
            raise ValueError("knot vector degrees do not match requested degrees")
    else:
        s1, s2 = spans_or_knots
        kv1 = open_uniform_knots(p1, s1)
        kv2 = open_uniform_knots(p2, s2)
    return HCurlSpace(kv1, kv2)


def _directional_tables(kv_full, kv_trunc, nodes01, weights01, breaks):
    """Span-wise basis tables for the full and truncated space of a direction."""
    ns = len(breaks) - 1
    nq = len(nodes01)
    pf, pt = kv_full.degree, kv_trunc.degree
    fv = np.empty((ns, nq, pf + 1))
    fd = np.empty((ns, nq, pf + 1))
    tv = np.empty((ns, nq, pt + 1))
    td = np.empty((ns, nq, pt + 1))
    f0f = np.empty(ns, dtype=int)
    f0t = np.empty(ns, dtype=int)
    qx = np.empty((ns, nq))
    qw = np.empty((ns, nq))
    for s in range(ns):
        a, b = breaks[s], breaks[s + 1]
        xs = a + (b - a) * nodes01
        qx[s] = xs
        qw[s] = 0.5 * (b - a) * weights01
        for q, x in enumerate(xs):
            first, D = kv_full.basis_ders(x, 1)
            fv[s, q], fd[s, q] = D[0], D[1]
            if q == 0:
                f0f[s] = first
            first_t, Dt = kv_trunc.basis_ders(x, 1)
            tv[s, q], td[s, q] = Dt[0], Dt[1]
            if q == 0:
                f0t[s] = first_t
    return dict(fv=fv, fd=fd, tv=tv, td=td, f0f=f0f, f0t=f0t, qx=qx, qw=qw)


class Assembler:
    """Cached quadrature, basis and geometry tables for one (space, map) pair.

    Array layout: spans are enumerated s = sy*nsx + sx and quadrature
    points q = qx*nq + qy; this fixed ordering makes every accumulation
    deterministic.
    """

    def __init__(self, space: HCurlSpace, G: GeometryMap):
        self.space = space
        self.G = G
        p1, p2 = space.degrees
        nq = max(p1, p2) + 1
        nodes, weights = np.polynomial.legendre.leggauss(nq)
        nodes01 = 0.5 * (nodes + 1.0)
        bx = space.kv1.breakpoints
        by = space.kv2.breakpoints
        tx = _directional_tables(space.kv1, space.kv1t, nodes01, weights, bx)
        ty = _directional_tables(space.kv2, space.kv2t, nodes01, weights, by)
        nsx, nsy = len(bx) - 1, len(by) - 1
        self.n_spans = nsx * nsy
        self.nq2 = nq * nq
        n1loc = p1 * (p2 + 1)
        n2loc = (p1 + 1) * p2
        self.n_loc = n1loc + n2loc
        S, Q, L = self.n_spans, self.nq2, self.n_loc

        self.val = np.zeros((S, Q, L, 2))
        self.curl = np.zeros((S, Q, L))
        self.gidx = np.full((S, L), space.N, dtype=int)
        self.wq = np.empty((S, Q))
        self.xhat = np.empty((S, Q, 2))

        for sy in range(nsy):
            for sx in range(nsx):
                s = sy * nsx + sx
                # tensorized quadrature, x-major
                xs, ys = tx["qx"][sx], ty["qx"][sy]
                self.xhat[s, :, 0] = np.repeat(xs, nq)
                self.xhat[s, :, 1] = np.tile(ys, nq)
                self.wq[s] = np.repeat(tx["qw"][sx], nq) * np.tile(ty["qw"][sy], nq)
                # component 1 (x): truncated x basis, full y basis
                v1 = np.einsum("qa,wb->qwab", tx["tv"][sx], ty["fv"][sy])
                c1 = -np.einsum("qa,wb->qwab", tx["tv"][sx], ty["fd"][sy])
                # component 2 (y): full x basis, truncated y basis
                v2 = np.einsum("qa,wb->qwab", tx["fv"][sx], ty["tv"][sy])
                c2 = np.einsum("qa,wb->qwab", tx["fd"][sx], ty["tv"][sy])
                self.val[s, :, :n1loc, 0] = v1.reshape(Q, n1loc)
                self.val[s, :, n1loc:, 1] = v2.reshape(Q, n2loc)
                self.curl[s, :, :n1loc] = c1.reshape(Q, n1loc)
                self.curl[s, :, n1loc:] = c2.reshape(Q, n2loc)
                loc = 0
                for a in range(p1):
                    for b in range(p2 + 1):
                        g = space.pack_index(0, tx["f0t"][sx] + a, ty["f0f"][sy] + b)
                        self.gidx[s, loc] = space.active[g] if space.active[g] >= 0 else space.N
                        loc += 1
                for a in range(p1 + 1):
                    for b in range(p2):
                        g = space.pack_index(1, tx["f0f"][sx] + a, ty["f0t"][sy] + b)
                        self.gidx[s, loc] = space.active[g] if space.active[g] >= 0 else space.N
                        loc += 1

        # geometry tables
        J = np.empty((S, Q, 2, 2))
        for s in range(S):
            for q in range(Q):
                _, J[s, q] = G.jacobian(self.xhat[s, q])
        self.JF = J
        self.detJF = _det2(J)
        if np.any(self.detJF <= 0):
            raise MapSingularError("map not invertible at quadrature point")
        self.JFinv = _inv2(J, self.detJF)
        self._mode_cache = {}

    # -- coefficient evaluation ------------------------------------------

    def mode_tables(self, V: DeformationField):
        """Parametric and physical mode Jacobians at all quadrature points."""
        key = id(V)
        if key not in self._mode_cache:
            S, Q = self.wq.shape
            M = V.n_modes
            jac_par = np.empty((M, S, Q, 2, 2))
            for s in range(S):
                for q in range(Q):
                    jacs = V.mode_jacobians(self.xhat[s, q])
                    jac_par[:, s, q] = jacs if M else np.zeros((0, 2, 2))
            jac_phys = np.einsum("msqab,sqbc->msqac", jac_par, self.JFinv)
            self._mode_cache[key] = (jac_par, jac_phys, V)
        return self._mode_cache[key]

    def sampled_coefficients(self, V: DeformationField, t: float, z):
        """Exact curl/mass coefficient fields of the deformed map."""
        z = np.asarray(z, dtype=float)
        jac_par, _, _ = self.mode_tables(V)
        Jc = self.JF.copy()
        if V.n_modes and t != 0.0:
            Jc = Jc + t * np.einsum("m,msqab->sqab", z, jac_par)
        Jdef = np.einsum("sqab,sqbc->sqac", Jc, self.JFinv)
        det = _det2(Jdef)
        if np.any(det <= 1e-12):
            raise MapSingularError("map not invertible at quadrature point")
        Jdefinv = _inv2(Jdef, det)
        cvals = 1.0 / det
        Avals = det[..., None, None] * np.einsum("sqab,sqcb->sqac", Jdefinv, Jdefinv)
        return cvals, Avals

    def mode_coefficient_derivatives(self, V: DeformationField):
        """Per-mode reference derivative fields (scalar curl part, matrix mass part)."""
        _, jac_phys, _ = self.mode_tables(V)
        tr = np.einsum("msqaa->msq", jac_phys)
        eye = np.eye(2)
        B = tr[..., None, None] * eye - jac_phys - np.swapaxes(jac_phys, -1, -2)
        return -tr, B

    # -- matrix assembly --------------------------------------------------

    def stiffness_from_values(self, cvals) -> np.ndarray:
        fac = self.wq * cvals / self.detJF
        loc = np.einsum("sq,sqa,sqb->sab", fac, self.curl, self.curl)
        return self._scatter(loc)

    def mass_from_values(self, Avals) -> np.ndarray:
        Atil = np.einsum("sqab,sqbc,sqdc->sqad", self.JFinv, Avals, self.JFinv)
        Atil *= (self.wq * self.detJF)[..., None, None]
        loc = np.einsum("sqic,sqcd,sqjd->sij", self.val, Atil, self.val)
        return self._scatter(loc)

    def stiffness(self, cfun) -> np.ndarray:
        return self.stiffness_from_values(_eval_scalar_field(cfun, self.xhat))

    def mass(self, afun) -> np.ndarray:
        return self.mass_from_values(_eval_matrix_field(afun, self.xhat))

    def _scatter(self, loc) -> np.ndarray:
        N = self.space.N
        out = np.zeros((N + 1, N + 1))
        rows = self.gidx[:, :, None]
        cols = self.gidx[:, None, :]
        np.add.at(out, (rows, cols), loc)
        return out[:N, :N]


def _det2(J):
    return J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]


def _inv2(J, det):
    out = np.empty_like(J)
    out[..., 0, 0] = J[..., 1, 1]
    out[..., 1, 1] = J[..., 0, 0]
    out[..., 0, 1] = -J[..., 0, 1]
    out[..., 1, 0] = -J[..., 1, 0]
    return out / det[..., None, None]


def _eval_scalar_field(c, xhat):
    if np.isscalar(c):
        return np.full(xhat.shape[:2], float(c))
    out = np.empty(xhat.shape[:2])
    for s in range(xhat.shape[0]):
        for q in range(xhat.shape[1]):
            out[s, q] = c(xhat[s, q])
    return out


def _eval_matrix_field(a, xhat):
    if isinstance(a, np.ndarray) and a.shape == (2, 2):
        return np.broadcast_to(a, xhat.shape[:2] + (2, 2)).copy()
    out = np.empty(xhat.shape[:2] + (2, 2))
    for s in range(xhat.shape[0]):
        for q in range(xhat.shape[1]):
            out[s, q] = a(xhat[s, q])
    return out


def get_assembler(space: HCurlSpace, G: GeometryMap) -> Assembler:
    key = id(G)
    if key not in space._assemblers:
        space._assemblers[key] = Assembler(space, G)
    return space._assemblers[key]


def assemble(space: HCurlSpace, G: GeometryMap, coefficient, kind: str) -> np.ndarray:
    """Assemble the stiffness or mass matrix for a coefficient field.

    ``coefficient`` is a constant or a callable of the parametric point:
    a scalar for ``kind="stiffness"`` and a symmetric 2x2 matrix for
    ``kind="mass"``.
    """
    asm = get_assembler(space, G)
    if kind == "stiffness":
        return asm.stiffness(coefficient)
    if kind == "mass":
        return asm.mass(coefficient)
    raise ValueError("kind must be 'stiffness' or 'mass'")


@dataclass
class EigenPencil:
    """Reference matrices and their per-mode derivatives.

    K0 is positive semidefinite (curl-curl with gradient kernel), M0
    positive definite; the dK_i and dM_i are symmetric but indefinite.
    """

    K0: np.ndarray
    M0: np.ndarray
    dK: list
    dM: list
    space: HCurlSpace = None
    G: GeometryMap = None
    V: DeformationField = None

    @property
    def n_modes(self) -> int:
        return len(self.dK)

    def validate(self, tol: float = 1e-12):
        for name, mat in [("K0", self.K0), ("M0", self.M0)] + [
            ("dK[%d]" % i, m) for i, m in enumerate(self.dK)
        ] + [("dM[%d]" % i, m) for i, m in enumerate(self.dM)]:
            scale = np.linalg.norm(mat)
            if scale > 0 and np.linalg.norm(mat - mat.T) > tol * scale:
                raise ValueError("assembled matrix %s is not symmetric" % name)
        try:
            scipy.linalg.cholesky(self.M0)
        except scipy.linalg.LinAlgError as exc:
            raise ValueError("mass matrix not positive definite") from exc


def assemble_pencil(space: HCurlSpace, G: GeometryMap, V: DeformationField) -> EigenPencil:
    """Reference stiffness/mass plus per-mode derivative matrices."""
    asm = get_assembler(space, G)
    K0 = asm.stiffness_from_values(np.ones_like(asm.wq))
    M0 = asm.mass_from_values(np.broadcast_to(np.eye(2), asm.wq.shape + (2, 2)).copy())
    dc, dA = asm.mode_coefficient_derivatives(V)
    dK = [asm.stiffness_from_values(dc[i]) for i in range(V.n_modes)]
    dM = [asm.mass_from_values(dA[i]) for i in range(V.n_modes)]
    pencil = EigenPencil(K0, M0, dK, dM, space, G, V)
    pencil.validate()
    return pencil


def sampled_matrices(space: HCurlSpace, G: GeometryMap, V: DeformationField, t: float, z):
    """Assemble K and M with exact coefficients of the deformed map."""
    asm = get_assembler(space, G)
    cvals, Avals = asm.sampled_coefficients(V, t, z)
    return asm.stiffness_from_values(cvals), asm.mass_from_values(Avals)


def gradient_embedding(space: HCurlSpace) -> np.ndarray:
    """Coefficient map from zero-trace scalar splines to their gradients.

    Columns span the discrete gradient subspace; the curl-curl stiffness
    annihilates every column regardless of the coefficient field.
    """
    kv1, kv2 = space.kv1, space.kv2
    k1, k2 = kv1.n_basis, kv2.n_basis
    p1, p2 = kv1.degree, kv2.degree
    n_int = space.scalar_interior_dim()
    out = np.zeros((space.N, n_int))
    dx = p1 / (kv1.knots[p1 + 1: k1 + p1] - kv1.knots[1: k1])     # length k1-1
    dy = p2 / (kv2.knots[p2 + 1: k2 + p2] - kv2.knots[1: k2])     # length k2-1
    col = 0
    for js in range(1, k2 - 1):
        for is_ in range(1, k1 - 1):
            # d/dx: difference of consecutive scalar coefficients in x
            for i, sgn in ((is_ - 1, 1.0), (is_, -1.0)):
                if 0 <= i < k1 - 1:
                    a = space.active[space.pack_index(0, i, js)]
                    if a >= 0:
                        out[a, col] += sgn * dx[i]
            for j, sgn in ((js - 1, 1.0), (js, -1.0)):
                if 0 <= j < k2 - 1:
                    a = space.active[space.pack_index(1, is_, j)]
                    if a >= 0:
                        out[a, col] += sgn * dy[j]
            col += 1
    return out


def evaluate_field(space: HCurlSpace, G: GeometryMap, coeffs, points) -> np.ndarray:
    """Physical vector values of a coefficient vector at parametric points."""
    coeffs = np.asarray(coeffs, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((len(points), 2))
    p1, p2 = space.degrees
    for r, x in enumerate(points):
        f1x, D1x = space.kv1t.basis_ders(x[0], 0)
        f1y, D1y = space.kv2.basis_ders(x[1], 0)
        f2x, D2x = space.kv1.basis_ders(x[0], 0)
        f2y, D2y = space.kv2t.basis_ders(x[1], 0)
        vhat = np.zeros(2)
        for a in range(p1):
            for b in range(p2 + 1):
                g = space.active[space.pack_index(0, f1x + a, f1y + b)]
                if g >= 0:
                    vhat[0] += coeffs[g] * D1x[0, a] * D1y[0, b]
        for a in range(p1 + 1):
            for b in range(p2):
                g = space.active[space.pack_index(1, f2x + a, f2y + b)]
                if g >= 0:
                    vhat[1] += coeffs[g] * D2x[0, a] * D2y[0, b]
        _, J = G.jacobian(x)
        out[r] = np.linalg.solve(J.T, vhat)
    return out


def dump_matrix_csv(mat: np.ndarray, path):
    """Debug dump of a dense matrix as (row, col, value) triplets."""
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                if mat[i, j] != 0.0:
                    fh.write("%d,%d,%s\n" % (i, j, repr(mat[i, j])))
