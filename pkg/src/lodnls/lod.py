"""Localized orthogonal decomposition of the fine P1 space.

The coarse hats are corrected by fine-scale functions that cancel their
coupling, in the (possibly shifted) elliptic form, to the kernel of the
coarse L2-projection. Correctors solve patch-local saddle-point systems;
at saturation the corrected space is a-orthogonal to the whole kernel.
"""

import hashlib
import io
import json

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import QuadratureRule, prolongation_matrix, assemble_mass
from .mesh import element_patch

__all__ = [
    "BilinearFormSpec",
    "LodBasis",
    "PatchDegenerateError",
    "compute_corrector",
    "build_lod_basis",
    "ritz_project",
    "localization_decay_study",
    "basis_cache_key",
]


class PatchDegenerateError(Exception):
    """A patch saddle-point system was singular; check the coercivity shift."""


class BilinearFormSpec:
    """Elliptic form (b grad u, grad v) + ((V + sigma) u, v) on the fine mesh.

    sigma >= 0 shifts the form positive definite when V takes it indefinite;
    the shift changes the corrector space construction only, never the
    time-stepped equation. Keeps per-element local matrices so element
    loads a_K(hat, .) can be scattered without reassembly.
    """

    def __init__(self, b, V, sigma, refmap, quad=None):
        self.b = b
        self.V = V
        self.sigma = float(sigma)
        self.refmap = refmap
        if quad is None:
            quad = QuadratureRule.degree4()
        self.quad = quad
        fmesh = refmap.fine_mesh
        _, area, g = fem._geometry(fmesh)
        x, y = fem.quad_points(fmesh, quad)
        if b is None:
            beff = area
        else:
            bvals = np.broadcast_to(np.asarray(b(x, y), dtype=float), x.shape)
            if np.any(bvals <= 0.0):
                raise fem.CoefficientViolation("diffusion coefficient must be positive")
            beff = area * (quad.weights[None, :] * bvals).sum(axis=1)
        local = beff[:, None, None] * np.einsum("eid,ejd->eij", g, g)
        if V is not None or self.sigma != 0.0:
            if V is None:
                vvals = np.full_like(x, self.sigma)
            else:
                vvals = np.broadcast_to(np.asarray(V(x, y), dtype=float), x.shape) + self.sigma
            wq = area[:, None] * quad.weights[None, :] * vvals
            local = local + np.einsum("eq,qi,qj->eij", wq, quad.points, quad.points)
        self.local_matrices = 0.5 * (local + np.transpose(local, (0, 2, 1)))
        self.A_full = fem._scatter(fmesh, self.local_matrices)
        self.interior = fmesh.interior_nodes
        self.A_int = self.A_full[self.interior][:, self.interior].tocsr()
        self.P = prolongation_matrix(refmap)
        self._P_csc = self.P.tocsc()
        self.M_h = assemble_mass(fmesh)
        self.C_full = (self.P.T @ self.M_h).tocsr()

    def element_load(self, K, coarse_node):
        """a_K(hat_v, .) as a fine nodal vector supported on K's children."""
        children = self.refmap.element_children[K]
        fel = self.refmap.fine_mesh.elements[children]
        phat = self._P_csc[:, coarse_node].toarray().ravel()
        contrib = np.einsum("fij,fj->fi", self.local_matrices[children], phat[fel])
        out = np.zeros(self.refmap.fine_mesh.n_nodes)
        np.add.at(out, fel.ravel(), contrib.ravel())
        return out


def _constraint_nodes(form, patch):
    cmesh = form.refmap.coarse_mesh
    return np.intersect1d(patch.coarse_nodes_in_patch, cmesh.interior_nodes)


def _patch_solver(form, patch):
    """Factorized saddle system and index data for one patch element set."""
    pif = patch.interior_fine_nodes
    cn = _constraint_nodes(form, patch)
    if pif.size == 0:
        return pif, cn, None
    A_p = form.A_full[pif][:, pif]
    C_p = form.C_full[cn][:, pif]
    saddle = sp.bmat([[A_p, C_p.T], [C_p, None]], format="csc")
    try:
        lu = spla.splu(saddle)
    except RuntimeError as exc:
        raise PatchDegenerateError(
            f"singular saddle system on patch of element {patch.center_element}: {exc}"
        ) from exc
    return pif, cn, lu


def _solve_patch(lu, pif, cn, loads):
    """Solve for corrector columns given stacked element loads (npif, k)."""
    rhs = np.vstack([-loads, np.zeros((cn.size, loads.shape[1]))])
    sol = lu.solve(rhs)
    q = sol[: pif.size]
    if not np.all(np.isfinite(q)):
        raise PatchDegenerateError("saddle solve produced non-finite corrector values")
    return q


def compute_corrector(form, K, coarse_node, patch):
    """Corrector of one coarse hat, restricted to one element's load.

    Returns a full fine nodal vector, zero outside the patch interior. The
    result has vanishing coarse L2-projection and cancels a_K(hat, .)
    against every kernel test function supported in the patch.
    """
    verts = form.refmap.coarse_mesh.elements[K]
    if coarse_node not in verts:
        raise ValueError("coarse node is not a vertex of the element")
    pif, cn, lu = _patch_solver(form, patch)
    out = np.zeros(form.refmap.fine_mesh.n_nodes)
    load = form.element_load(K, coarse_node)
    if not np.any(load):
        return out
    if lu is None:
        return out
    q = _solve_patch(lu, pif, cn, load[pif][:, None])
    out[pif] = q[:, 0]
    return out


class LodBasis:
    """Corrected coarse basis and its Galerkin matrices.

    basis_matrix B is (fine interior) x (coarse interior); column j holds
    the fine representation of hat_j plus its correctors. A_lod and M_lod
    are the projected (shifted) elliptic form and mass. support_masks[j]
    lists the fine-interior row positions the column may populate.
    """

    def __init__(self, layers, basis_matrix, A_lod, M_lod, support_masks,
                 refmap, sigma, meta=None):
        self.layers = layers
        self.basis_matrix = basis_matrix
        self.A_lod = A_lod
        self.M_lod = M_lod
        self.support_masks = support_masks
        self.refmap = refmap
        self.sigma = sigma
        self.meta = meta or {}

    @property
    def n_columns(self):
        return self.basis_matrix.shape[1]

    def to_fine(self, coeffs):
        """Embed LOD coefficients as a full fine nodal vector."""
        out = np.zeros(self.refmap.fine_mesh.n_nodes, dtype=np.result_type(coeffs, float))
        out[self.refmap.fine_mesh.interior_nodes] = self.basis_matrix @ coeffs
        return out

    def save(self, path):
        B = self.basis_matrix.tocsr()
        A = self.A_lod.tocsr()
        M = self.M_lod.tocsr()
        offsets = np.cumsum([0] + [m.size for m in self.support_masks])
        buf = io.BytesIO()
        np.savez_compressed(
            buf,
            version=np.array([1]),
            layers=np.array([self.layers]),
            sigma=np.array([self.sigma]),
            shape=np.array(B.shape),
            B_data=B.data, B_indices=B.indices, B_indptr=B.indptr,
            A_data=A.data, A_indices=A.indices, A_indptr=A.indptr,
            M_data=M.data, M_indices=M.indices, M_indptr=M.indptr,
            mask_concat=np.concatenate(self.support_masks) if self.support_masks else np.array([], dtype=np.int64),
            mask_offsets=offsets,
            meta=np.frombuffer(json.dumps(self.meta).encode(), dtype=np.uint8),
        )
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @staticmethod
    def load(path, refmap):
        with np.load(path) as z:
            if int(z["version"][0]) != 1:
                raise ValueError("unknown basis cache version")
            shape = tuple(z["shape"])
            n = shape[1]
            B = sp.csr_matrix((z["B_data"], z["B_indices"], z["B_indptr"]), shape=shape)
            A = sp.csr_matrix((z["A_data"], z["A_indices"], z["A_indptr"]), shape=(n, n))
            M = sp.csr_matrix((z["M_data"], z["M_indices"], z["M_indptr"]), shape=(n, n))
            off = z["mask_offsets"]
            concat = z["mask_concat"]
            masks = [concat[off[i]:off[i + 1]] for i in range(len(off) - 1)]
            meta = json.loads(bytes(z["meta"]).decode()) if z["meta"].size else {}
            return LodBasis(int(z["layers"][0]), B, A, M, masks, refmap,
                            float(z["sigma"][0]), meta)


def basis_cache_key(refmap, form, layers):
    """Filename-safe key for one basis build configuration."""
    bh = form.b.content_hash() if form.b is not None else "unit"
    vh = form.V.content_hash() if form.V is not None else "zero"
    raw = (f"v1-n{refmap.coarse_mesh.n_side}-r{refmap.factor}"
           f"-b{bh}-V{vh}-l{layers}-s{form.sigma:.12g}")
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


def build_lod_basis(refmap, form, layers, threads=1):
    """Assemble the corrected basis: one saddle solve per (element, vertex).

    Patches sharing an element set share one factorization. Columns are
    accumulated in element order so the result is independent of the
    worker count, bit for bit.
    """
    if layers < 0:
        raise ValueError("layers must be nonnegative")
    cmesh = refmap.coarse_mesh
    fmesh = refmap.fine_mesh
    interior_coarse = cmesh.interior_nodes
    fine_interior = fmesh.interior_nodes
    col_of = {int(v): j for j, v in enumerate(interior_coarse)}
    npos = np.full(fmesh.n_nodes, -1, dtype=np.int64)
    npos[fine_interior] = np.arange(fine_interior.size)

    patches = [element_patch(cmesh, K, layers, refmap) for K in range(cmesh.n_elements)]
    groups = {}
    for K, p in enumerate(patches):
        groups.setdefault(p.elements.tobytes(), []).append(K)

    Q = np.zeros((fine_interior.size, interior_coarse.size))
    results = {}

    def handle_group(group):
        rep = patches[group[0]]
        pif, cn, lu = _patch_solver(form, rep)
        pos = npos[pif]
        out = []
        loads, meta = [], []
        for K in group:
            for v in cmesh.elements[K]:
                j = col_of.get(int(v))
                if j is None:
                    continue
                loads.append(form.element_load(K, int(v))[pif])
                meta.append((K, j))
        if lu is not None and loads:
            for s in range(0, len(loads), 48):
                chunk = np.column_stack(loads[s:s + 48])
                q = _solve_patch(lu, pif, cn, chunk)
                for c, (K, j) in enumerate(meta[s:s + 48]):
                    out.append((K, j, pos, q[:, c]))
        return out

    group_list = list(groups.values())
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(handle_group, group_list))
    else:
        chunks = [handle_group(g) for g in group_list]
    for chunk in chunks:
        for K, j, pos, q in chunk:
            results.setdefault(K, []).append((j, pos, q))
    for K in sorted(results):
        for j, pos, q in results[K]:
            Q[pos, j] += q

    P_int = prolongation_matrix(refmap)[fine_interior][:, interior_coarse]
    B = sp.csr_matrix(P_int.toarray() + Q)
    B.sort_indices()

    A_int = form.A_int
    M_int = form.M_h[fine_interior][:, fine_interior].tocsr()
    A_lod = (B.T @ (A_int @ B)).tocsr()
    M_lod = (B.T @ (M_int @ B)).tocsr()
    A_lod = ((A_lod + A_lod.T) * 0.5).tocsr()
    M_lod = ((M_lod + M_lod.T) * 0.5).tocsr()

    masks = []
    for v in interior_coarse:
        touching = np.nonzero((cmesh.elements == v).any(axis=1))[0]
        nodes = np.unique(np.concatenate(
            [fmesh.elements[patches[K].fine_elements].ravel() for K in touching]))
        pos = npos[nodes]
        masks.append(np.sort(pos[pos >= 0]))

    meta = {"n_side": cmesh.n_side, "factor": refmap.factor, "sigma": form.sigma}
    return LodBasis(layers, B, A_lod, M_lod, masks, refmap, form.sigma, meta)


def ritz_project(u_fine, basis, form):
    """Coefficients of the a-orthogonal projection into the corrected space."""
    u = np.asarray(u_fine)
    interior = form.interior
    if u.shape[0] == form.refmap.fine_mesh.n_nodes:
        u = u[interior]
    elif u.shape[0] != interior.size:
        raise ValueError("vector length matches neither fine mesh nor its interior")
    B = basis.basis_matrix
    rhs = B.T @ (form.A_int @ u)
    x = spla.spsolve(basis.A_lod.tocsc(), rhs)
    res = B.T @ (form.A_int @ (B @ x - u))
    scale = max(1.0, float(np.linalg.norm(rhs)))
    if not np.all(np.isfinite(x)) or np.linalg.norm(res) > 1e-8 * scale:
        raise RuntimeError(f"projection solve failed, residual {np.linalg.norm(res):.3e}")
    return x


def localization_decay_study(refmap, form, ell_range, u_fine=None, threads=1):
    """Distance of localized projections to the saturated one, per layer count."""
    fmesh = refmap.fine_mesh
    if u_fine is None:
        u_fine = np.sin(np.pi * fmesh.nodes[:, 0]) * np.sin(np.pi * fmesh.nodes[:, 1])
    ell_sat = 2 * refmap.coarse_mesh.n_side
    sat = build_lod_basis(refmap, form, ell_sat, threads=threads)
    ref = sat.to_fine(ritz_project(u_fine, sat, form))
    rows = []
    prev = None
    for ell in ell_range:
        bas = build_lod_basis(refmap, form, ell, threads=threads)
        approx = bas.to_fine(ritz_project(u_fine, bas, form))
        err = fem.norm(approx - ref, "L2", fmesh)
        rows.append({"ell": int(ell), "error": err,
                     "ratio": (prev / err) if (prev is not None and err > 0) else float("nan")})
        prev = err
    return rows
