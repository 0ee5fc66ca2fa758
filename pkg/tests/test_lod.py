import numpy as np
import pytest
import scipy.linalg as sla

from lodnls.fem import (assemble_mass, assemble_stiffness, prolongation_matrix,
                        l2_project, prolong, CoefficientField)
from lodnls.lod import (BilinearFormSpec, build_lod_basis, compute_corrector,
                        ritz_project, basis_cache_key, LodBasis,
                        localization_decay_study)
from lodnls.mesh import build_structured_mesh, refine, element_patch
from conftest import build_example_basis


def _dense_ideal_basis(rm, form):
    """Null-space corrector construction, no sparse solvers involved."""
    ifn = rm.fine_mesh.interior_nodes
    icn = rm.coarse_mesh.interior_nodes
    A = form.A_full[ifn][:, ifn].toarray()
    P = prolongation_matrix(rm)[ifn][:, icn].toarray()
    C = (prolongation_matrix(rm).T @ assemble_mass(rm.fine_mesh))[icn][:, ifn].toarray()
    _, _, Vt = sla.svd(C)
    Z = Vt[C.shape[0]:].T
    B = np.empty_like(P)
    for j in range(P.shape[1]):
        r = A @ P[:, j]
        B[:, j] = P[:, j] - Z @ np.linalg.solve(Z.T @ A @ Z, Z.T @ r)
    return B


def test_ideal_basis_matches_dense_oracle():
    rm = refine(build_structured_mesh(2), 2)
    form = BilinearFormSpec(None, None, 1.0, rm)
    basis = build_lod_basis(rm, form, layers=4)
    want = _dense_ideal_basis(rm, form)
    assert np.abs(basis.basis_matrix.toarray() - want).max() < 1e-9


def test_ideal_basis_with_coefficients_matches_dense_oracle():
    rm = refine(build_structured_mesh(2), 2)
    b = CoefficientField(lambda x, y: 1.0 + x + y ** 2, kind="smooth")
    V = CoefficientField(lambda x, y: np.cos(x) - 2.0, kind="smooth")
    form = BilinearFormSpec(b, V, 3.0, rm)
    basis = build_lod_basis(rm, form, layers=4)
    want = _dense_ideal_basis(rm, form)
    assert np.abs(basis.basis_matrix.toarray() - want).max() < 1e-9


def test_corrector_kernel_membership(small_pair, small_basis):
    rm, form = small_pair
    B = small_basis.basis_matrix.toarray()
    ifn = rm.fine_mesh.interior_nodes
    icn = rm.coarse_mesh.interior_nodes
    for j in range(small_basis.n_columns):
        full = np.zeros(rm.fine_mesh.n_nodes)
        full[ifn] = B[:, j]
        p = l2_project(full, rm, interior_only=True)
        e = np.zeros(rm.coarse_mesh.n_nodes)
        e[icn[j]] = 1.0
        assert np.abs(p - e).max() < 1e-10


def test_saturated_a_orthogonality(small_pair, small_basis):
    # corrected space is a-orthogonal to the projection kernel at saturation
    rm, form = small_pair
    ifn = rm.fine_mesh.interior_nodes
    A = form.A_full[ifn][:, ifn]
    B = small_basis.basis_matrix
    r = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        w = np.zeros(rm.fine_mesh.n_nodes)
        w[ifn] = r.standard_normal(len(ifn))
        w -= prolong(l2_project(w, rm, interior_only=True), rm)
        worst = max(worst, np.abs(B.T @ (A @ w[ifn])).max())
    assert worst < 1e-8


def test_dimension_and_decomposition(small_pair, small_basis):
    rm, _ = small_pair
    n_int_coarse = len(rm.coarse_mesh.interior_nodes)
    n_int_fine = len(rm.fine_mesh.interior_nodes)
    assert small_basis.n_columns == n_int_coarse
    assert small_basis.basis_matrix.shape == (n_int_fine, n_int_coarse)
    # corrected columns are linearly independent (gram matrix nonsingular)
    G = small_basis.A_lod.toarray()
    assert np.linalg.matrix_rank(G) == n_int_coarse
    w = np.linalg.eigvalsh(G)
    assert w.min() > 0


def test_corrector_well_defined_on_one_layer_patch(small_pair):
    rm, form = small_pair
    patch = element_patch(rm.coarse_mesh, 3, 1, refmap=rm)
    q = compute_corrector(form, 3, int(rm.coarse_mesh.elements[3][0]), patch)
    assert np.isfinite(q).all()
    # vanishes outside the patch closure
    outside = np.setdiff1d(np.arange(rm.fine_mesh.n_nodes), patch.interior_fine_nodes)
    assert np.abs(q[outside]).max() == 0.0


def test_corrector_rejects_foreign_vertex(small_pair):
    rm, form = small_pair
    patch = element_patch(rm.coarse_mesh, 0, 1, refmap=rm)
    far = int(rm.coarse_mesh.elements[-1][2])
    with pytest.raises(ValueError):
        compute_corrector(form, 0, far, patch)


def test_ritz_projection_matches_dense(small_pair, small_basis):
    rm, form = small_pair
    r = np.random.default_rng(1)
    u = np.zeros(rm.fine_mesh.n_nodes)
    ifn = rm.fine_mesh.interior_nodes
    u[ifn] = r.standard_normal(len(ifn))
    got = ritz_project(u, small_basis, form)
    B = small_basis.basis_matrix.toarray()
    A = form.A_full[ifn][:, ifn].toarray()
    want = np.linalg.solve(B.T @ A @ B, B.T @ (A @ u[ifn]))
    assert np.abs(got - want).max() < 1e-10


def test_ritz_projection_reproduces_members(small_pair, small_basis):
    rm, form = small_pair
    r = np.random.default_rng(2)
    c = r.standard_normal(small_basis.n_columns)
    u = np.zeros(rm.fine_mesh.n_nodes)
    u[rm.fine_mesh.interior_nodes] = small_basis.basis_matrix @ c
    got = ritz_project(u, small_basis, form)
    assert np.abs(got - c).max() < 1e-10


def test_support_masks_localize():
    rm = refine(build_structured_mesh(8), 2)
    form = BilinearFormSpec(None, None, 1.0, rm)
    basis = build_lod_basis(rm, form, layers=1)
    B = basis.basis_matrix.toarray()
    for j, mask in enumerate(basis.support_masks):
        outside = np.setdiff1d(np.arange(B.shape[0]), mask)
        assert np.abs(B[outside, j]).max() == 0.0
    # one layer does not cover the whole domain on an 8x8 grid
    assert min(len(m) for m in basis.support_masks) < B.shape[0]


def test_thread_count_bitwise_determinism():
    rm = refine(build_structured_mesh(4), 4)
    form = BilinearFormSpec(None, None, 1.0, rm)
    b1 = build_lod_basis(rm, form, layers=2, threads=1)
    b4 = build_lod_basis(rm, form, layers=2, threads=4)
    d1 = b1.basis_matrix.toarray()
    d4 = b4.basis_matrix.toarray()
    assert np.array_equal(d1, d4)  # bitwise, not approx


def test_localization_decay_monotone():
    rm = refine(build_structured_mesh(8), 4)
    form = BilinearFormSpec(None, None, 1.0, rm)
    rows = localization_decay_study(rm, form, range(0, 7))
    errs = [r["error"] for r in rows]
    for a, b in zip(errs, errs[1:]):
        assert b <= 1.1 * a  # monotone up to tiny noise
    for r in rows[3:]:
        if r["error"] > 1e-12:
            assert r["ratio"] > 2.0  # geometric decay once layers bite


def test_basis_cache_roundtrip(tmp_path, small_pair, small_basis):
    rm, form = small_pair
    p = tmp_path / "basis.npz"
    small_basis.save(p)
    back = LodBasis.load(p, rm)
    assert np.array_equal(back.basis_matrix.toarray(),
                          small_basis.basis_matrix.toarray())
    assert np.array_equal(back.A_lod.toarray(), small_basis.A_lod.toarray())
    assert back.layers == small_basis.layers
    assert all(np.array_equal(a, b) for a, b in
               zip(back.support_masks, small_basis.support_masks))


def test_cache_key_sensitivity(small_pair):
    rm, form = small_pair
    k1 = basis_cache_key(rm, form, 2)
    k2 = basis_cache_key(rm, form, 3)
    assert k1 != k2
    form2 = BilinearFormSpec(None, None, 2.0, rm)
    assert basis_cache_key(rm, form2, 2) != k1


def test_projected_forms_match_fine_forms(small_pair, small_basis):
    # B^T A B computed by the builder equals the direct triple product
    rm, form = small_pair
    ifn = rm.fine_mesh.interior_nodes
    B = small_basis.basis_matrix.toarray()
    A = form.A_full[ifn][:, ifn].toarray()
    M = assemble_mass(rm.fine_mesh)[ifn][:, ifn].toarray()
    assert np.abs(small_basis.A_lod.toarray() - B.T @ A @ B).max() < 1e-11
    assert np.abs(small_basis.M_lod.toarray() - B.T @ M @ B).max() < 1e-11


def test_example_coefficients_build(ex1):
    rm, form, basis = build_example_basis(ex1, 2, 4, layers=4)
    assert basis.n_columns == 1
    assert np.isfinite(basis.basis_matrix.toarray()).all()
