import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lodnls.mesh import build_structured_mesh, refine, element_patch, write_mesh_text


def test_counts_and_width():
    for n in (1, 2, 5, 16):
        m = build_structured_mesh(n)
        assert m.n_nodes == (n + 1) ** 2
        assert m.n_elements == 2 * n * n
        assert len(m.boundary_nodes) == 4 * n
        assert m.h == pytest.approx(1.0 / n)
        assert len(m.interior_nodes) == (n - 1) ** 2


def test_rejects_bad_size():
    with pytest.raises(ValueError):
        build_structured_mesh(0)


def test_areas_partition_unit_square():
    m = build_structured_mesh(7)
    areas = m.element_areas()
    assert np.all(areas > 0)
    assert areas.sum() == pytest.approx(1.0, abs=1e-12)
    # uniform triangulation: every element has the same area
    assert np.ptp(areas) < 1e-15


def test_euler_characteristic():
    # V - E + F = 1 for a triangulated disk (count F without the outer face)
    m = build_structured_mesh(6)
    edges = set()
    for tri in m.elements:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges.add(frozenset((tri[a], tri[b])))
    assert m.n_nodes - len(edges) + m.n_elements == 1


def test_edge_sharing():
    # interior edges belong to exactly two elements, boundary edges to one
    m = build_structured_mesh(5)
    count = {}
    for tri in m.elements:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = frozenset((tri[a], tri[b]))
            count[key] = count.get(key, 0) + 1
    assert set(count.values()) <= {1, 2}
    boundary = [k for k, v in count.items() if v == 1]
    assert len(boundary) == 4 * 5 + 0  # hypotenuses never lie on the boundary


def test_orientation_counterclockwise():
    m = build_structured_mesh(4)
    v = m.nodes[m.elements]
    cross = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) \
        - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    assert np.all(cross > 0)


def test_patch_layer_zero_is_single_element():
    m = build_structured_mesh(4)
    p = element_patch(m, 9, 0)
    assert list(p.elements) == [9]
    assert p.center_element == 9


def test_patch_growth_monotone_and_saturates():
    m = build_structured_mesh(4)
    prev = 0
    for ell in range(0, 12):
        p = element_patch(m, 0, ell)
        assert len(p.elements) >= prev
        prev = len(p.elements)
    assert prev == m.n_elements  # deep patch covers everything


@settings(max_examples=20, deadline=None)
@given(n=st.integers(min_value=1, max_value=8))
def test_patch_saturation_depth(n):
    m = build_structured_mesh(n)
    p = element_patch(m, 0, 2 * n)
    assert len(p.elements) == m.n_elements


def test_corner_patch_brute_force():
    # one vertex-adjacency layer around element 0 on a 4x4 grid
    m = build_structured_mesh(4)
    p = element_patch(m, 0, 1)
    verts = set(m.elements[0])
    expect = {k for k in range(m.n_elements) if verts & set(m.elements[k])}
    assert set(p.elements) == expect


def test_patch_coarse_nodes_cover_patch():
    m = build_structured_mesh(4)
    p = element_patch(m, 5, 1)
    assert set(np.unique(m.elements[p.elements])) == set(p.coarse_nodes_in_patch)


def test_refinement_children_partition_parent():
    rm = refine(build_structured_mesh(3), 4)
    fine_areas = rm.fine_mesh.element_areas()
    coarse_areas = rm.coarse_mesh.element_areas()
    for K in range(rm.coarse_mesh.n_elements):
        kids = rm.element_children[K]
        assert len(kids) == 16
        assert fine_areas[kids].sum() == pytest.approx(coarse_areas[K], rel=1e-13)
    # children sets are disjoint and exhaustive
    allkids = rm.element_children.ravel()
    assert len(np.unique(allkids)) == rm.fine_mesh.n_elements


def test_node_embedding_exact():
    rm = refine(build_structured_mesh(5), 3)
    assert np.allclose(rm.coarse_mesh.nodes,
                       rm.fine_mesh.nodes[rm.node_embedding], atol=0)


def test_refine_factor_one_is_identity_layout():
    rm = refine(build_structured_mesh(4), 1)
    assert rm.fine_mesh.n_nodes == rm.coarse_mesh.n_nodes
    assert np.array_equal(rm.node_embedding, np.arange(rm.coarse_mesh.n_nodes))


def test_patch_fine_quantities(small_pair):
    rm, _ = small_pair
    p = element_patch(rm.coarse_mesh, 6, 1, refmap=rm)
    assert p.fine_elements is not None
    assert len(p.fine_elements) == 16 * len(p.elements)
    # interior fine nodes all lie strictly inside the patch polygon support
    fn = set(np.unique(rm.fine_mesh.elements[p.fine_elements]))
    assert set(p.interior_fine_nodes) < fn


def test_write_mesh_text(tmp_path):
    m = build_structured_mesh(2)
    path = tmp_path / "m.txt"
    write_mesh_text(m, path)
    lines = path.read_text().splitlines()
    assert lines[0] == f"nodes {m.n_nodes} elements {m.n_elements}"
    assert len(lines) == 1 + m.n_nodes + m.n_elements
