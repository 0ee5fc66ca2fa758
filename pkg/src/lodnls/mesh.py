"""Structured triangulations of the unit square.

Uniform n x n grids of squares, each split along the bottom-left to
top-right diagonal. Provides nested uniform refinements with
coarse-to-fine element maps and vertex-adjacency element patches, the
geometric backbone for the corrector problems.
"""

import numpy as np

__all__ = [
    "Mesh",
    "RefinementMap",
    "Patch",
    "build_structured_mesh",
    "refine",
    "element_patch",
    "write_mesh_text",
]


class Mesh:
    """P1 triangulation of [0,1]^2 on a uniform grid.

    nodes: (N, 2) coordinates, node (i, j) -> index j*(n_side+1) + i.
    elements: (M, 3) node triples, counterclockwise. Cell (cx, cy) of the
    grid yields elements 2*c and 2*c+1 with c = cy*n_side + cx: the lower
    triangle (v00, v10, v11) and the upper triangle (v00, v11, v01).
    boundary_nodes: sorted indices of nodes on the boundary of the square.
    """

    def __init__(self, nodes, elements, boundary_nodes, n_side):
        self.nodes = nodes
        self.elements = elements
        self.boundary_nodes = boundary_nodes
        self.n_side = n_side
        self._interior = None

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def h(self):
        return 1.0 / self.n_side

    @property
    def interior_nodes(self):
        if self._interior is None:
            mask = np.ones(self.n_nodes, dtype=bool)
            mask[self.boundary_nodes] = False
            self._interior = np.nonzero(mask)[0]
        return self._interior

    def element_areas(self):
        v = self.nodes[self.elements]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


class RefinementMap:
    """Bookkeeping between a coarse mesh and its uniform refinement.

    element_children[K] lists the factor**2 fine elements covering coarse
    element K; node_embedding maps each coarse node to the fine node at
    the same coordinates.
    """

    def __init__(self, coarse_mesh, fine_mesh, factor, element_children, node_embedding):
        self.coarse_mesh = coarse_mesh
        self.fine_mesh = fine_mesh
        self.factor = factor
        self.element_children = element_children
        self.node_embedding = node_embedding


class Patch:
    """Element K plus `layers` rings of vertex-adjacent coarse elements.

    elements: sorted coarse element indices of the patch.
    coarse_nodes_in_patch: coarse nodes whose hat support meets the patch,
    i.e. the vertices of the patch elements.
    interior_fine_nodes: fine nodes strictly inside the patch (zero
    Dirichlet data on the patch boundary and on the outer boundary);
    present when the patch was built with a refinement map.
    """

    def __init__(self, center_element, layers, elements, coarse_nodes_in_patch,
                 interior_fine_nodes=None, fine_elements=None):
        self.center_element = center_element
        self.layers = layers
        self.elements = elements
        self.coarse_nodes_in_patch = coarse_nodes_in_patch
        self.interior_fine_nodes = interior_fine_nodes
        self.fine_elements = fine_elements


def build_structured_mesh(n_side):
    """Uniform mesh of n_side**2 squares, each split into 2 triangles."""
    if n_side < 1:
        raise ValueError("n_side must be a positive integer")
    n = int(n_side)
    k = n + 1
    ii, jj = np.meshgrid(np.arange(k), np.arange(k))  # ii varies fastest on ravel
    nodes = np.column_stack([ii.ravel(), jj.ravel()]).astype(float) / n

    cx, cy = np.meshgrid(np.arange(n), np.arange(n))
    cx = cx.ravel()
    cy = cy.ravel()
    v00 = cy * k + cx
    v10 = v00 + 1
    v01 = v00 + k
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    onb = (ii.ravel() == 0) | (ii.ravel() == n) | (jj.ravel() == 0) | (jj.ravel() == n)
    boundary_nodes = np.nonzero(onb)[0]
    return Mesh(nodes, elements, boundary_nodes, n)


def refine(coarse, factor):
    """Uniform refinement by an integer factor with full parent/child maps."""
    if factor < 1:
        raise ValueError("refinement factor must be a positive integer")
    r = int(factor)
    n = coarse.n_side
    nf = n * r
    fine = build_structured_mesh(nf)

    # local child-element offsets relative to 2*(first fine cell of the coarse cell)
    lower_off, upper_off = [], []
    for b in range(r):
        for a in range(r):
            base = 2 * (b * nf + a)
            if a > b:
                lower_off += [base, base + 1]
            elif a < b:
                upper_off += [base, base + 1]
            else:
                lower_off.append(base)
                upper_off.append(base + 1)
    lower_off = np.sort(np.array(lower_off, dtype=np.int64))
    upper_off = np.sort(np.array(upper_off, dtype=np.int64))

    cx, cy = np.meshgrid(np.arange(n), np.arange(n))
    cell_base = 2 * (cy.ravel() * r * nf + cx.ravel() * r)
    element_children = np.empty((2 * n * n, r * r), dtype=np.int64)
    element_children[0::2] = cell_base[:, None] + lower_off[None, :]
    element_children[1::2] = cell_base[:, None] + upper_off[None, :]

    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    node_embedding = (j.ravel() * r * (nf + 1) + i.ravel() * r).astype(np.int64)
    return RefinementMap(coarse, fine, r, element_children, node_embedding)


def element_patch(mesh, K, layers, refmap=None):
    """K plus `layers` rings of elements sharing at least a vertex.

    With a refinement map the patch also carries its fine elements and the
    fine nodes strictly interior to the patch.
    """
    if not 0 <= K < mesh.n_elements:
        raise ValueError(f"element index {K} out of range")
    if layers < 0:
        raise ValueError("layers must be nonnegative")
    elem_mask = np.zeros(mesh.n_elements, dtype=bool)
    elem_mask[K] = True
    for _ in range(layers):
        node_mask = np.zeros(mesh.n_nodes, dtype=bool)
        node_mask[mesh.elements[elem_mask].ravel()] = True
        new_mask = node_mask[mesh.elements].any(axis=1)
        if (new_mask == elem_mask).all():
            break
        elem_mask = new_mask
    elements = np.nonzero(elem_mask)[0]
    coarse_nodes = np.unique(mesh.elements[elements])

    interior_fine = None
    fine_elements = None
    if refmap is not None:
        fine_elements = np.sort(refmap.element_children[elements].ravel())
        fmesh = refmap.fine_mesh
        # a fine node is interior to the patch when every fine element
        # incident to it belongs to the patch and it is not on the outer boundary
        total = np.bincount(fmesh.elements.ravel(), minlength=fmesh.n_nodes)
        inside = np.bincount(fmesh.elements[fine_elements].ravel(), minlength=fmesh.n_nodes)
        mask = (inside == total) & (inside > 0)
        mask[fmesh.boundary_nodes] = False
        interior_fine = np.nonzero(mask)[0]
    return Patch(K, layers, elements, coarse_nodes, interior_fine, fine_elements)


def write_mesh_text(mesh, path):
    """Plain-text dump: header, coordinate rows, element index triples."""
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.n_nodes} elements {mesh.n_elements}\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.elements:
            fh.write(f"{a} {b} {c}\n")
