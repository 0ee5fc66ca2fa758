"""P1 finite element core: assembly, quadrature, transfer operators, norms.

All matrices are scipy CSR with sorted indices. Dirichlet conditions are
imposed by restriction to interior nodes, never by penalties. Complex
fields ride on real matrices acting blockwise.
"""

import hashlib

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.io import mmwrite

__all__ = [
    "QuadratureRule",
    "CoefficientField",
    "CoefficientViolation",
    "assemble_mass",
    "assemble_stiffness",
    "prolongation_matrix",
    "l2_project",
    "prolong",
    "norm",
    "FineEvaluation",
    "restrict_matrix",
    "export_matrix_market",
]


class CoefficientViolation(Exception):
    """A coefficient failed a positivity requirement during assembly."""


class QuadratureRule:
    """Barycentric points/weights on the reference triangle, weights sum to 1."""

    def __init__(self, points, weights, degree):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.degree = degree

    @staticmethod
    def midpoint():
        # edge midpoints, exact for quadratics
        pts = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
        return QuadratureRule(pts, [1.0 / 3.0] * 3, 2)

    @staticmethod
    def degree4():
        # 6-point rule, exact for quartics
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        pts, wts = [], []
        for a, w in ((a1, w1), (a2, w2)):
            pts += [[1 - 2 * a, a, a], [a, 1 - 2 * a, a], [a, a, 1 - 2 * a]]
            wts += [w, w, w]
        return QuadratureRule(pts, wts, 4)


class CoefficientField:
    """Scalar coefficient on the unit square with provenance metadata.

    fn(x, y) must accept equal-shaped arrays. kind is one of 'smooth',
    'piecewise-on-grid', 'random-checkerboard'; extra metadata (cell size,
    seed, value range) is kept for cache keys and reporting.
    """

    def __init__(self, fn, kind="smooth", bounds=None, **meta):
        self.fn = fn
        self.kind = kind
        self.bounds = bounds
        self.meta = meta

    def __call__(self, x, y):
        return self.fn(x, y)

    @staticmethod
    def constant(value):
        v = float(value)
        return CoefficientField(lambda x, y: np.full_like(np.asarray(x, dtype=float), v),
                                kind="smooth", bounds=(v, v))

    def sample_min(self, n=256):
        """Minimum over a dense cell-midpoint grid (avoids cell boundaries)."""
        t = (np.arange(n) + 0.5) / n
        X, Y = np.meshgrid(t, t)
        return float(np.min(self(X, Y)))

    def content_hash(self, n=256):
        """Stable hash of sampled values plus metadata, for cache keys."""
        t = (np.arange(n) + 0.5) / n
        X, Y = np.meshgrid(t, t)
        vals = np.ascontiguousarray(self(X, Y), dtype=np.float64)
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(repr(sorted(self.meta.items())).encode())
        h.update(vals.tobytes())
        return h.hexdigest()[:16]


def _geometry(mesh):
    v = mesh.nodes[mesh.elements]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # constant P1 gradients: rows i hold grad(lambda_i) on each element
    g = np.empty((mesh.n_elements, 3, 2))
    g[:, 1, 0] = d2[:, 1] / det
    g[:, 1, 1] = -d2[:, 0] / det
    g[:, 2, 0] = -d1[:, 1] / det
    g[:, 2, 1] = d1[:, 0] / det
    g[:, 0] = -g[:, 1] - g[:, 2]
    return v, area, g


def _scatter(mesh, local):
    local = 0.5 * (local + np.transpose(local, (0, 2, 1)))  # kill roundoff asymmetry
    el = mesh.elements
    rows = np.repeat(el, 3, axis=1).ravel()
    cols = np.tile(el, (1, 3)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    A.sort_indices()
    return A


def quad_points(mesh, quad):
    """Physical quadrature points, shape (n_elements, nq) per coordinate."""
    v = mesh.nodes[mesh.elements]
    x = np.einsum("qi,ei->eq", quad.points, v[:, :, 0])
    y = np.einsum("qi,ei->eq", quad.points, v[:, :, 1])
    return x, y


def assemble_mass(mesh, weight=None, quad=None):
    """(weight * u, v) over P1 hats; exact local matrix when weight is None."""
    _, area, _ = _geometry(mesh)
    if weight is None:
        base = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
        local = area[:, None, None] * base[None]
        return _scatter(mesh, local)
    if quad is None:
        quad = QuadratureRule.degree4()
    x, y = quad_points(mesh, quad)
    wvals = np.broadcast_to(np.asarray(weight(x, y), dtype=float), x.shape)
    lam = quad.points  # (nq, 3): P1 values are the barycentric coordinates
    wq = area[:, None] * quad.weights[None, :] * wvals
    local = np.einsum("eq,qi,qj->eij", wq, lam, lam)
    return _scatter(mesh, local)


def assemble_stiffness(mesh, b=None, quad=None):
    """(b grad u, grad v); raises CoefficientViolation on a nonpositive b sample."""
    _, area, g = _geometry(mesh)
    if b is None:
        beff = area
    else:
        if quad is None:
            quad = QuadratureRule.degree4()
        x, y = quad_points(mesh, quad)
        bvals = np.broadcast_to(np.asarray(b(x, y), dtype=float), x.shape)
        if np.any(bvals <= 0.0):
            raise CoefficientViolation("diffusion coefficient must be positive")
        beff = area * (quad.weights[None, :] * bvals).sum(axis=1)
    local = beff[:, None, None] * np.einsum("eid,ejd->eij", g, g)
    return _scatter(mesh, local)


def prolongation_matrix(refmap):
    """Fine-node values of coarse P1 functions; (fine nodes) x (coarse nodes) CSR."""
    r = refmap.factor
    n = refmap.coarse_mesh.n_side
    nf = n * r
    kf = nf + 1
    kc = n + 1
    fi, fj = np.meshgrid(np.arange(kf), np.arange(kf))
    fi = fi.ravel()
    fj = fj.ravel()
    cx = np.minimum(fi // r, n - 1)
    cy = np.minimum(fj // r, n - 1)
    a = fi - cx * r
    bb = fj - cy * r
    v00 = cy * kc + cx
    v10 = v00 + 1
    v01 = v00 + kc
    v11 = v01 + 1
    lower = a >= bb  # on the diagonal both triangles agree
    cols = np.where(lower[:, None],
                    np.column_stack([v00, v10, v11]),
                    np.column_stack([v00, v11, v01]))
    s = a / r
    t = bb / r
    w_low = np.column_stack([1.0 - s, s - t, t])
    w_up = np.column_stack([1.0 - t, s, t - s])
    weights = np.where(lower[:, None], w_low, w_up)
    rows = np.repeat(np.arange(kf * kf), 3)
    P = sp.coo_matrix((weights.ravel(), (rows, cols.ravel())),
                      shape=(kf * kf, kc * kc)).tocsr()
    P.sort_indices()
    return P


def prolong(coarse_vector, refmap):
    """Interpolate a coarse nodal vector onto the fine mesh."""
    coarse_vector = np.asarray(coarse_vector)
    if coarse_vector.shape[0] != refmap.coarse_mesh.n_nodes:
        raise ValueError("coarse vector length does not match the coarse mesh")
    return prolongation_matrix(refmap) @ coarse_vector


def l2_project(fine_vector, refmap, interior_only=False):
    """Best L2 approximation of a fine nodal function in the coarse space.

    interior_only restricts trial and test space to interior coarse hats
    (the projection used by the fine-scale kernel constraints); the default
    projects onto the full coarse space, so constants stay constants.
    """
    fine_vector = np.asarray(fine_vector)
    if fine_vector.shape[0] != refmap.fine_mesh.n_nodes:
        raise ValueError("fine vector length does not match the fine mesh")
    P = prolongation_matrix(refmap)
    Mh = assemble_mass(refmap.fine_mesh)
    MH = assemble_mass(refmap.coarse_mesh)
    rhs = P.T @ (Mh @ fine_vector)
    if not interior_only:
        return spla.spsolve(MH.tocsc(), rhs)
    idx = refmap.coarse_mesh.interior_nodes
    out = np.zeros(refmap.coarse_mesh.n_nodes, dtype=rhs.dtype)
    out[idx] = spla.spsolve(MH[idx][:, idx].tocsc(), rhs[idx])
    return out


def restrict_matrix(A, idx):
    """Square submatrix on the given index set (Dirichlet elimination)."""
    return A[idx][:, idx].tocsr()


class FineEvaluation:
    """Quadrature apparatus bound to one mesh and rule.

    Precomputes physical points, scaled weights and the scatter pattern so
    that weighted mass matrices (the nonlinear term) and integral
    functionals are cheap to rebuild every fixed-point iteration.
    """

    def __init__(self, mesh, quad=None):
        if quad is None:
            quad = QuadratureRule.degree4()
        self.mesh = mesh
        self.quad = quad
        v, area, g = _geometry(mesh)
        self.area = area
        self.grads = g
        self.x, self.y = quad_points(mesh, quad)
        self.wq = area[:, None] * quad.weights[None, :]  # (M, nq)
        self.lam = quad.points
        el = mesh.elements
        rows = np.repeat(el, 3, axis=1).ravel()
        cols = np.tile(el, (1, 3)).ravel()
        pattern = sp.coo_matrix((np.ones(rows.size), (rows, cols)),
                                shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
        pattern.sort_indices()
        # map each local entry to its slot in the deduplicated CSR data array
        order = np.lexsort((cols, rows))
        keys = rows[order].astype(np.int64) * mesh.n_nodes + cols[order]
        newgrp = np.empty(rows.size, dtype=bool)
        newgrp[0] = True
        newgrp[1:] = keys[1:] != keys[:-1]
        slot = np.empty(rows.size, dtype=np.int64)
        slot[order] = np.cumsum(newgrp) - 1
        self._slot = slot
        self._indptr = pattern.indptr.copy()
        self._indices = pattern.indices.copy()

    def evaluate(self, u_full):
        """Point values of a nodal function at all quadrature points, (M, nq)."""
        return np.einsum("qi,ei->eq", self.lam, u_full[self.mesh.elements])

    def evaluate_gradient(self, u_full):
        """Per-element constant gradient, (M, 2)."""
        return np.einsum("eid,ei->ed", self.grads, u_full[self.mesh.elements])

    def integrate(self, vals):
        """Integral of quadrature-point values over the domain."""
        return float(np.sum(self.wq * vals)) if not np.iscomplexobj(vals) \
            else complex(np.sum(self.wq * vals))

    def weighted_mass(self, vals):
        """CSR matrix of (w u, v) for w given by values at quadrature points."""
        local = np.einsum("eq,qi,qj->eij", self.wq * vals, self.lam, self.lam)
        local = 0.5 * (local + np.transpose(local, (0, 2, 1)))
        data = np.bincount(self._slot, weights=local.ravel(),
                           minlength=self._indices.size)
        return sp.csr_matrix((data, self._indices, self._indptr),
                             shape=(self.mesh.n_nodes, self.mesh.n_nodes))

    def load_vector(self, vals):
        """Nodal vector of (f, phi_i) for f given at quadrature points."""
        contrib = np.einsum("eq,qi->ei", self.wq * vals, self.lam)
        out = np.zeros(self.mesh.n_nodes, dtype=contrib.dtype)
        np.add.at(out, self.mesh.elements.ravel(), contrib.ravel())
        return out

    def gradient_load_vector(self, gx, gy):
        """Nodal vector of (g, grad phi_i) for a vector field g at quadrature points."""
        cx = np.einsum("eq,ei->ei", self.wq * gx, self.grads[:, :, 0])
        cy = np.einsum("eq,ei->ei", self.wq * gy, self.grads[:, :, 1])
        out = np.zeros(self.mesh.n_nodes, dtype=(cx + cy).dtype)
        np.add.at(out, self.mesh.elements.ravel(), (cx + cy).ravel())
        return out


def norm(u, kind, mesh, quad=None, exact=None, exact_grad=None):
    """Integral norms of a fine nodal function, or of its error against a field.

    kind: 'L2' | 'L4' | 'H1-semi' | 'H1'. With exact (callable of x, y)
    the integrand is the difference; H1 kinds then also need exact_grad
    returning (du/dx, du/dy) arrays.
    """
    if kind not in ("L2", "L4", "H1-semi", "H1"):
        raise ValueError(f"unknown norm kind: {kind}")
    if quad is None:
        quad = QuadratureRule.degree4()
    ev = FineEvaluation(mesh, quad)
    if u is None:
        u = np.zeros(mesh.n_nodes)
    u = np.asarray(u)
    d = ev.evaluate(u)
    if exact is not None:
        d = d - exact(ev.x, ev.y)
    if kind == "L2":
        return float(np.sqrt(np.sum(ev.wq * np.abs(d) ** 2)))
    if kind == "L4":
        return float(np.sum(ev.wq * np.abs(d) ** 4) ** 0.25)
    gd = ev.evaluate_gradient(u)  # (M, 2)
    if exact_grad is not None:
        gx, gy = exact_grad(ev.x, ev.y)
        semi2 = np.sum(ev.wq * (np.abs(gd[:, 0, None] - gx) ** 2
                                + np.abs(gd[:, 1, None] - gy) ** 2))
    elif exact is not None:
        raise ValueError("H1 error against a field needs exact_grad")
    else:
        semi2 = np.sum(ev.area * (np.abs(gd[:, 0]) ** 2 + np.abs(gd[:, 1]) ** 2))
    if kind == "H1-semi":
        return float(np.sqrt(semi2))
    l2 = np.sum(ev.wq * np.abs(d) ** 2)
    return float(np.sqrt(l2 + semi2))


def export_matrix_market(A, path, comment=""):
    mmwrite(str(path), sp.coo_matrix(A), comment=comment)
