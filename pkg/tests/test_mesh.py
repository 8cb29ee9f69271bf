import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnapost.mesh import (
    Mesh,
    make_boundary_layer_mesh,
    make_crisscross_unit_square,
    make_lshape_rotated,
    mesh_from_text,
    mesh_size,
    mesh_to_text,
    refine_nvb,
    refine_uniform,
)
from nnapost.oracles import conformity_violations, is_conforming


@pytest.mark.parametrize("n,nv,nt", [(1, 5, 4), (2, 13, 16), (4, 41, 64)])
def test_crisscross_counts(n, nv, nt):
    mesh = make_crisscross_unit_square(n)
    assert (mesh.n_vertices, mesh.n_elements) == (nv, nt)
    assert len(mesh.boundary_facets) == 4 * n
    assert mesh.domain_area() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("refinements,nt", [(0, 12), (1, 48), (2, 192)])
def test_lshape_counts_and_area(refinements, nt):
    mesh = make_lshape_rotated(refinements)
    assert mesh.n_elements == nt
    assert mesh.domain_area() == pytest.approx(3.0, abs=1e-13)
    assert is_conforming(mesh)


def test_lshape_reentrant_corner_at_origin_and_rotated():
    mesh = make_lshape_rotated(0)
    assert np.any(np.all(mesh.vertices == 0.0, axis=1))
    # the rotated L lies in |arg z| < 3 pi / 4: the closed cone around the negative axis is empty
    c = mesh.centroids()
    assert np.all(np.abs(np.arctan2(c[:, 1], c[:, 0])) < 0.75 * np.pi)


def test_boundary_layer_mesh_is_graded_towards_left_edge():
    mesh = make_boundary_layer_mesh()
    assert mesh.n_elements == 3164
    assert is_conforming(mesh)
    h = mesh.diameters()
    left = mesh.centroids()[:, 0] < 0.02
    assert h[left].max() < 0.2 * h[~left].max()


def test_boundary_normals_point_outward():
    for mesh in (make_crisscross_unit_square(2), make_lshape_rotated(1)):
        a, b = mesh.vertices[mesh.boundary_facets].transpose(1, 0, 2)
        mid = 0.5 * (a + b)
        probe = mid + 1e-6 * mesh.boundary_normals
        # probes just outside must not lie in any triangle
        for p in probe:
            assert not _inside_any(mesh, p)
        assert np.allclose(np.linalg.norm(mesh.boundary_normals, axis=1), 1.0)
        parents = mesh.centroids()[mesh.boundary_parents]
        assert np.all(np.einsum("fd,fd->f", mid - parents, mesh.boundary_normals) > 0)


def _inside_any(mesh, p):
    v = mesh.vertices[mesh.triangles]
    d = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        e = v[:, j] - v[:, i]
        q = p - v[:, i]
        d.append(e[:, 0] * q[:, 1] - e[:, 1] * q[:, 0])
    return bool(np.any(np.all(np.stack(d) > 0, axis=0)))


def test_refine_single_element_closure_example():
    """[DERIVED] hand count: the marked element becomes 4, its two diagonal neighbours 3 each, one stays."""
    mesh = make_crisscross_unit_square(1)
    fine = refine_nvb(mesh, [0])
    assert fine.n_elements == 11
    assert np.bincount(fine.parent).tolist() == [4, 3, 1, 3]
    assert is_conforming(fine)
    assert fine.domain_area() == pytest.approx(1.0, abs=1e-15)
    assert fine.diameters()[fine.parent == 0].max() < mesh.diameters()[0]


def test_refine_uniform_quadruples_and_halves_size():
    mesh = make_lshape_rotated(0)
    fine = refine_uniform(mesh)
    assert fine.n_elements == 4 * mesh.n_elements
    assert np.all(fine.generation == 2)
    assert mesh_size(fine).max() == pytest.approx(0.5 * mesh_size(mesh).max(), rel=1e-12)


def test_parent_map_points_to_containing_triangle():
    mesh = make_crisscross_unit_square(2)
    fine = refine_nvb(mesh, [0, 5, 9])
    assert fine.parent is not None
    for t, par in enumerate(fine.parent):
        assert _inside_any(Mesh.from_arrays(mesh.vertices, mesh.triangles[[par]]), fine.centroids()[t])


def test_mesh_is_immutable():
    mesh = make_crisscross_unit_square(1)
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 3.0


def test_from_arrays_fixes_orientation():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    mesh = Mesh.from_arrays(v, np.array([[0, 2, 1]]))
    assert mesh.areas()[0] == pytest.approx(0.5)
    assert not conformity_violations(mesh)


def test_text_round_trip_is_exact():
    mesh = refine_nvb(make_lshape_rotated(1), [0, 3, 17])
    back = mesh_from_text(mesh_to_text(mesh))
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.generation, mesh.generation)


def test_text_reader_rejects_bad_input():
    text = mesh_to_text(make_crisscross_unit_square(1))
    with pytest.raises(ValueError):
        mesh_from_text("nodes 3\n" + text)
    with pytest.raises(ValueError):
        mesh_from_text(text.rsplit("\n", 2)[0])


def test_oracle_accepts_and_rejects_hand_made_meshes():
    v = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]], dtype=float)
    good = Mesh.from_arrays(v[:4], np.array([[0, 1, 3], [1, 2, 3]]))
    assert is_conforming(good)
    # vertex 4 is the midpoint of the diagonal 1-3 of the first triangle
    hanging = Mesh.from_arrays(v, np.array([[0, 1, 3], [1, 2, 4], [2, 3, 4]]))
    assert any("hanging" in msg for msg in conformity_violations(hanging))
    overlap = Mesh.from_arrays(v[:4], np.array([[0, 1, 2], [0, 2, 3], [1, 2, 3]]))
    assert not is_conforming(overlap)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["square", "lshape"]))
def test_random_nvb_sequences_stay_conforming(seed, start):
    rng = np.random.default_rng(seed)
    mesh = make_crisscross_unit_square(1) if start == "square" else make_lshape_rotated(0)
    area = mesh.domain_area()
    for _ in range(4):
        marked = rng.choice(mesh.n_elements, size=int(rng.integers(1, mesh.n_elements + 1)), replace=False)
        new = refine_nvb(mesh, marked)
        assert not conformity_violations(new)
        assert abs(new.areas().sum() - area) <= 1e-12
        assert new.n_elements >= mesh.n_elements + len(marked)
        # generations grow by at most 2 per call only on marked ancestors
        assert new.generation.max() <= mesh.generation.max() + 2
        mesh = new


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_nvb_shape_regularity_bounded(seed):
    """Newest vertex bisection creates finitely many similarity classes: minimal angle stays bounded."""
    rng = np.random.default_rng(seed)
    mesh = make_crisscross_unit_square(1)

    def min_angle(m):
        p = m.vertices[m.triangles]
        ang = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            ang.append(np.arccos(np.einsum("td,td->t", a, b) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)))
        return np.min(ang)

    start = min_angle(mesh)
    for _ in range(8):
        mesh = refine_nvb(mesh, rng.choice(mesh.n_elements, size=max(1, mesh.n_elements // 4), replace=False))
    assert min_angle(mesh) >= start - 1e-12
