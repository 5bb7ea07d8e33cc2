from __future__ import annotations

import numpy as np
import pytest

from mhdfem.mesh import Mesh, MeshError, build_box_mesh, derive_topology, write_vtk

# entity counts for the unit cube split into 6 tets, worked out by hand:
# 8 corners, 12 cube edges + 6 face diagonals + 1 main diagonal = 19 edges,
# 2 triangles per cube face + 6 interior = 18 faces.
UNIT_CUBE_COUNTS = (8, 19, 18, 6)

SINGLE_TET = (
    np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
    np.array([[0, 1, 2, 3]]),
)


def test_unit_cube_counts():
    m = build_box_mesh(1, 1, 1)
    assert (m.num_vertices, m.num_edges, m.num_faces, m.num_tets) == UNIT_CUBE_COUNTS
    assert m.boundary_face.sum() == 12
    assert m.boundary_edge.sum() == 18
    assert m.boundary_vertex.sum() == 8
    # the one interior edge is the shared main diagonal
    assert m.edges[~m.boundary_edge].tolist() == [[0, 7]]


def test_unit_cube_geometry():
    m = build_box_mesh(1, 1, 1)
    assert m.volumes.sum() == pytest.approx(1.0, rel=1e-14)
    assert np.all(m.volumes > 0)
    # every Kuhn tet of the unit cube has circumdiameter sqrt(3)
    assert m.h == pytest.approx(np.sqrt(3.0), rel=1e-14)


@pytest.mark.parametrize("dims,box", [
    ((2, 1, 1), ((0.0, 2.0), (0.0, 1.0), (0.0, 1.0))),
    ((2, 3, 1), ((0.0, 1.0), (-1.0, 1.0), (0.5, 0.75))),
    ((3, 3, 3), ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))),
])
def test_box_volume_and_euler(dims, box):
    m = build_box_mesh(*dims, box=box)
    ext = np.diff(np.asarray(box), axis=1).ravel()
    assert m.volumes.sum() == pytest.approx(np.prod(ext), rel=1e-13)
    # a solid ball triangulation has Euler characteristic 1
    assert m.num_vertices - m.num_edges + m.num_faces - m.num_tets == 1
    assert m.num_tets == 6 * np.prod(dims)


def test_tets_are_cube_major():
    m = build_box_mesh(2, 2, 2)
    # all 6 tets of cube c contain its corner vertex and its main diagonal end
    for c in range(8):
        block = m.tets[6 * c:6 * c + 6]
        shared = set(block[0])
        for row in block[1:]:
            shared &= set(row)
        assert len(shared) == 2  # the cube diagonal


def test_entity_rows_are_ascending():
    m = build_box_mesh(2, 1, 2)
    assert np.all(m.edges[:, 0] < m.edges[:, 1])
    assert np.all(m.faces[:, :-1] < m.faces[:, 1:])


def test_grad_bary():
    m = build_box_mesh(2, 2, 1, box=((0, 2), (0, 1), (0, 3)))
    assert np.abs(m.grad_bary.sum(axis=1)).max() == 0.0
    x = m.vertices[m.tets]
    for i in range(4):
        for j in range(4):
            # lambda_i is affine: grad . (x_j - x_i) = delta_ij - 1
            val = np.einsum("tk,tk->t", m.grad_bary[:, i], x[:, j] - x[:, i])
            assert np.abs(val - (0.0 if i == j else -1.0)).max() < 1e-12


def test_face_edge_signs_chain_to_zero():
    # boundary-of-boundary: the signed edges of the signed faces of any tet cancel
    m = build_box_mesh(2, 2, 2)
    acc = np.zeros((m.num_tets, m.num_edges), dtype=np.int64)
    for lf in range(4):
        f = m.tet_faces[:, lf]
        sf = m.tet_face_sign[:, lf]
        for le in range(3):
            np.add.at(acc, (np.arange(m.num_tets), m.face_edges[f, le]),
                      sf * m.face_edge_sign[f, le])
    assert np.all(acc == 0)


def test_tet_face_sign_is_outward():
    m = build_box_mesh(1, 2, 1)
    x = m.vertices
    for t in range(m.num_tets):
        cen = x[m.tets[t]].mean(axis=0)
        for lf in range(4):
            a, b, c = m.faces[m.tet_faces[t, lf]]
            n = np.cross(x[b] - x[a], x[c] - x[a])
            outward = np.dot(n, x[[a, b, c]].mean(axis=0) - cen)
            assert np.sign(outward) == m.tet_face_sign[t, lf]


def test_single_tet_topology():
    m = derive_topology(*SINGLE_TET)
    assert (m.num_vertices, m.num_edges, m.num_faces, m.num_tets) == (4, 6, 4, 1)
    assert m.boundary_face.all() and m.boundary_edge.all() and m.boundary_vertex.all()
    assert m.volumes[0] == pytest.approx(1.0 / 6.0)


def test_two_tets_share_one_face():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], float)
    m = derive_topology(verts, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
    assert m.num_faces == 7
    assert (~m.boundary_face).sum() == 1
    assert m.faces[~m.boundary_face].tolist() == [[1, 2, 3]]


def test_negative_volume_is_reoriented():
    verts, tets = SINGLE_TET
    m = derive_topology(verts, tets[:, [0, 2, 1, 3]])
    assert m.volumes[0] > 0


@pytest.mark.parametrize("bad", [
    lambda v, t: (v, np.array([[0, 1, 2, 9]])),       # index out of range
    lambda v, t: (v, np.array([[0, 1, 2, 2]])),       # repeated vertex
    lambda v, t: (v, np.vstack([t, t[:, [0, 2, 1, 3]]])),  # duplicate tet
    lambda v, t: (np.vstack([v, [[1.0, 1.0, 0.0]]]),
                  np.array([[0, 1, 2, 4]])),          # coplanar points
])
def test_derive_topology_rejects_bad_input(bad):
    with pytest.raises(MeshError):
        derive_topology(*bad(*SINGLE_TET))


def test_nonmanifold_face_rejected():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [0, 0, 1], [0, 0, -1], [1, 1, 1]], float)
    tets = np.array([[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])
    with pytest.raises(MeshError, match="non-manifold"):
        derive_topology(verts, tets)


@pytest.mark.parametrize("dims", [(0, 1, 1), (1, -2, 1), (1, 1, 0)])
def test_build_box_mesh_rejects_bad_counts(dims):
    with pytest.raises(MeshError):
        build_box_mesh(*dims)


def test_build_box_mesh_rejects_empty_box():
    with pytest.raises(MeshError):
        build_box_mesh(1, 1, 1, box=((0, 1), (1, 1), (0, 1)))


def test_mesh_is_immutable():
    m = build_box_mesh(1, 1, 1)
    with pytest.raises(ValueError):
        m.tets[0, 0] = 3


def test_refinement_is_nested():
    coarse = build_box_mesh(2, 2, 2)
    fine = build_box_mesh(4, 4, 4)
    # every coarse vertex appears among the fine vertices
    fe = {tuple(np.round(p, 12)) for p in fine.vertices}
    assert all(tuple(np.round(p, 12)) in fe for p in coarse.vertices)


def test_write_vtk(tmp_path):
    m = build_box_mesh(1, 1, 1)
    out = tmp_path / "mesh.vtk"
    write_vtk(m, out, point_data={"u": np.ones((8, 3))},
              cell_data={"p": np.arange(6.0)})
    text = out.read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert "POINTS 8 double" in text
    assert "CELL_TYPES 6" in text
    assert "VECTORS u double" in text
    assert "SCALARS p double 1" in text
