"""Mesh extraction and propagation, and the per-cell strain pipeline against continuum oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from aladdin import phantom as ph
from aladdin.registration import DisplacementField
from aladdin.surface import (DegenerateCellError, InconsistentTensorError, OutOfDomainError,
                             SurfaceMesh, TopologyError, affine_reference_strain,
                             cell_metric_tensor, cell_strains, check_closed_manifold,
                             covariant_basis, covariant_to_cartesian, green_lagrange_cell,
                             mesh_from_segmentation, principal_strains, propagate_mesh,
                             strain_series, voxelize_mesh)
from oracles import tangent_strain_eigenvalues


def _ellipsoid_mask(axes, spacing, pad=4.0):
    dims = tuple(int(np.ceil(2 * (a + pad) / s)) for a, s in zip(axes, spacing))
    c = np.array([(d - 1) * s / 2 for d, s in zip(dims, spacing)])
    x = np.moveaxis(np.indices(dims).astype(float), 0, -1) * spacing
    return (((x - c) / axes) ** 2).sum(-1) <= 1.0, c


@pytest.fixture(scope="module")
def ellipsoid_mesh():
    mask, c = _ellipsoid_mask((20.0, 15.0, 10.0), (1.0, 1.0, 1.0))
    return mesh_from_segmentation(mask, (1.0, 1.0, 1.0)), c


# ---- mesh extraction ---------------------------------------------------------------

def test_ball_area_and_volume():
    mask, _ = _ellipsoid_mask((10.0, 10.0, 10.0), (1.0, 1.0, 1.0))
    mesh = mesh_from_segmentation(mask)
    assert check_closed_manifold(mesh.triangles)
    assert mesh.area() == pytest.approx(4 * np.pi * 100, rel=0.05)
    assert mesh.volume() == pytest.approx(4 / 3 * np.pi * 1000, rel=0.05)


def test_ellipsoid_volume_anisotropic_spacing():
    spacing = (1.0, 1.25, 2.0)
    mask, _ = _ellipsoid_mask((20.0, 15.0, 10.0), spacing)
    mesh = mesh_from_segmentation(mask, spacing)
    assert mesh.volume() == pytest.approx(4 / 3 * np.pi * 20 * 15 * 10, rel=0.05)
    assert np.all(mesh.triangle_areas() > 1e-9)


def test_single_voxel_mesh_is_closed():
    seg = np.zeros((3, 3, 3), bool)
    seg[1, 1, 1] = True
    mesh = mesh_from_segmentation(seg, smoothing_iterations=0)
    assert len(mesh.vertices) >= 6
    assert check_closed_manifold(mesh.triangles)
    assert mesh.volume() > 0


def test_topology_errors():
    with pytest.raises(TopologyError):
        mesh_from_segmentation(np.zeros((4, 4, 4), bool))
    seg = np.zeros((7, 7, 7), bool)
    seg[1, 1, 1] = seg[5, 5, 5] = True
    with pytest.raises(TopologyError):
        mesh_from_segmentation(seg)


def test_manifold_check_rejects_open_surface():
    tris = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1]])
    assert not check_closed_manifold(tris)
    assert check_closed_manifold(np.vstack([tris, [[1, 3, 2]]]))


# ---- propagation -----------------------------------------------------------------------

def _box_mesh(dims, spacing):
    mask = np.zeros(dims, bool)
    mask[3:-3, 3:-3, 3:-3] = True
    return mesh_from_segmentation(mask, spacing)


def test_propagate_zero_and_constant_fields():
    dims, spacing = (14, 14, 12), (1.0, 1.5, 2.0)
    mesh = _box_mesh(dims, spacing)
    const = np.zeros(dims + (3,))
    const[..., 0] = 3.0
    out = propagate_mesh(mesh, [DisplacementField.zeros(dims, spacing),
                                DisplacementField(const, spacing)])
    np.testing.assert_array_equal(out.per_phase_vertices[0], mesh.vertices)
    np.testing.assert_allclose(out.per_phase_vertices[1] - mesh.vertices,
                               np.tile([3.0, 0, 0], (len(mesh.vertices), 1)), atol=1e-12)


def test_propagate_radial_inflation():
    dims, spacing = (16, 16, 14), (1.0, 1.0, 1.5)
    mesh = _box_mesh(dims, spacing)
    c = np.array([7.0, 7.5, 9.0])
    x = np.moveaxis(np.indices(dims).astype(float), 0, -1) * spacing
    out = propagate_mesh(mesh, [DisplacementField(0.1 * (x - c), spacing)])
    np.testing.assert_allclose(out.per_phase_vertices[0], c + 1.1 * (mesh.vertices - c), atol=1e-3)


def test_propagate_out_of_domain():
    mesh = SurfaceMesh(np.array([[0.0, 0, 0], [20.0, 0, 0], [0, 1.0, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(OutOfDomainError):
        propagate_mesh(mesh, [DisplacementField.zeros((5, 5, 5))])


# ---- metric and covariant strain -----------------------------------------------------------

def test_metric_right_triangle():
    g = cell_metric_tensor([0, 0, 0], [1, 0, 0], [0, 1, 0])
    np.testing.assert_allclose(g, np.eye(3), atol=1e-15)


def test_metric_equilateral():
    g = cell_metric_tensor([0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0])
    assert g[0, 1] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose([g[0, 0], g[1, 1]], 1.0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_metric_symmetric_unit_diagonal(seed):
    x = np.random.default_rng(seed).normal(size=(3, 3))
    g = cell_metric_tensor(*x)
    np.testing.assert_array_equal(g, g.T)
    np.testing.assert_allclose(np.diag(g), 1.0, atol=1e-14)


def test_collinear_triangle_is_degenerate():
    with pytest.raises(DegenerateCellError):
        covariant_basis([0, 0, 0], [1, 0, 0], [2, 0, 0])


def test_undeformed_gives_zero_strain():
    G = cell_metric_tensor([0, 0, 0], [1, 0, 0], [0, 1, 0])
    assert not green_lagrange_cell(G, G).any()
    assert not covariant_to_cartesian(np.zeros((3, 3)), covariant_basis([0, 0, 0], [1, 0, 0], [0, 1, 0])).any()


def test_uniaxial_edge_stretch():
    ref = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    E = cell_strains(ref, ref * [1.1, 1.0, 1.0], np.array([[0, 1, 2]]))[0]
    assert E[0, 0] == pytest.approx((1.1 ** 2 - 1) / 2, abs=1e-12)
    E = cell_strains(ref, ref * [1.2, 1.0, 1.0], np.array([[0, 1, 2]]))[0]
    lam1, lam2, _, _ = principal_strains(E, [0, 0, 1])
    assert (lam1, lam2) == pytest.approx((0.22, 0.0), abs=1e-12)


def test_orthonormal_reference_basis_passes_components_through():
    basis = np.eye(3)
    E = np.zeros((3, 3))
    E[:2, :2] = [[0.1, 0.03], [0.03, -0.02]]
    np.testing.assert_allclose(covariant_to_cartesian(E, basis, local=True), E, atol=1e-15)


def test_rigid_rotation_gives_zero_strain():
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(3, 3))
    R = Rotation.random(random_state=1).as_matrix()
    E = cell_strains(ref, ref @ R.T + 5.0, np.array([[0, 1, 2]]))
    assert np.abs(E).max() < 1e-12


# ---- principal strains --------------------------------------------------------------------------

def test_principal_zero_tensor():
    lam1, lam2, v1, v2 = principal_strains(np.zeros((3, 3)), [0, 0, 1])
    assert lam1 == lam2 == 0
    assert abs(v1 @ v2) < 1e-12 and abs(v1[2]) < 1e-12 and abs(v2[2]) < 1e-12


def test_principal_isotropic_expansion():
    E = np.diag([0.105, 0.105, 0.0])
    lam1, lam2, _, _ = principal_strains(E, [0, 0, 1])
    assert lam1 == pytest.approx(0.105) and lam2 == pytest.approx(0.105)


def test_principal_pure_shear():
    E = np.array([[0.0, 0.1, 0], [0.1, 0.0, 0], [0, 0, 0]])
    lam1, lam2, v1, v2 = principal_strains(E, [0, 0, 1])
    assert (lam1, lam2) == pytest.approx((0.1, -0.1), abs=1e-15)
    assert abs(abs(v1 @ [1, 0, 0]) - np.sqrt(0.5)) < 1e-12
    assert abs(abs(v2 @ [0, 1, 0]) - np.sqrt(0.5)) < 1e-12
    for v in (v1, v2):
        assert np.linalg.norm(v) == pytest.approx(1.0) and abs(v[2]) < 1e-6


def test_principal_rejects_normal_strain():
    with pytest.raises(InconsistentTensorError):
        principal_strains(np.diag([0.1, 0.0, 0.01]), [0, 0, 1])


# ---- whole-mesh series -----------------------------------------------------------------------------

def _with_phases(mesh, *positions):
    return SurfaceMesh(mesh.vertices, mesh.triangles, np.stack(positions))


def test_identity_motion_zero_strain(ellipsoid_mesh):
    mesh, _ = ellipsoid_mesh
    sf = strain_series(_with_phases(mesh, mesh.vertices, mesh.vertices))
    assert not sf.principal_values.any() and not sf.dvf_magnitude.any()


def test_global_scaling(ellipsoid_mesh):
    mesh, _ = ellipsoid_mesh
    c = mesh.vertices.mean(axis=0)
    scaled = c + 1.1 * (mesh.vertices - c)
    sf = strain_series(_with_phases(mesh, mesh.vertices, scaled))
    np.testing.assert_allclose(sf.principal_values[1], 0.105, atol=1e-6)
    np.testing.assert_allclose(sf.dvf_magnitude[1], 0.1 * np.linalg.norm(mesh.vertices - c, axis=1),
                               atol=1e-9)
    assert not sf.principal_values[0].any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_affine_oracle_and_invariants(seed):
    mask, c = _ellipsoid_mask((9.0, 7.0, 5.0), (1.0, 1.0, 1.0))
    mesh = _affine_mesh_cache.setdefault("m", mesh_from_segmentation(mask))
    rng = np.random.default_rng(seed)
    F = np.eye(3) + rng.uniform(-0.2, 0.2, (3, 3))
    sf = strain_series(_with_phases(mesh, mesh.vertices, mesh.vertices @ F.T + rng.normal(size=3)))
    normals = mesh.triangle_normals()
    expect = np.array([tangent_strain_eigenvalues(F, n) for n in normals])
    np.testing.assert_allclose(sf.principal_values[1], expect, atol=1e-6)
    E = sf.tensors[1]
    assert np.abs(E - np.swapaxes(E, 1, 2)).max() < 1e-10
    assert np.abs(sf.normal_eigenvalues).max() < 1e-8
    np.testing.assert_allclose(E, affine_reference_strain(np.broadcast_to(F, E.shape), normals),
                               atol=1e-10)


_affine_mesh_cache = {}


def test_rigid_motion_nullity(ellipsoid_mesh):
    mesh, _ = ellipsoid_mesh
    R = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    sf = strain_series(_with_phases(mesh, mesh.vertices, mesh.vertices @ R.T + [4.0, -2.0, 7.0]))
    assert np.abs(sf.tensors).max() < 1e-9


def test_phantom_equatorial_stretch():
    # stretch 1.15 in x and y, none in z: equatorial cells see the hoop stretch
    spec = ph.PhantomSpec(dims=(48, 48, 40), spacing=(1.0, 1.0, 1.0), semi_axes=(14.0, 14.0, 14.0),
                          affines=np.stack([np.eye(3), np.diag([1.15, 1.15, 1.0])]),
                          translations=np.zeros((2, 3)), bump_amplitudes=np.zeros(2))
    seg = ph.rasterize(spec, 0).segmentation
    mesh = mesh_from_segmentation(seg, spec.spacing)
    dvfs = [ph.ground_truth_dvf(spec, t) for t in range(2)]
    sf = strain_series(propagate_mesh(mesh, dvfs))
    n = mesh.triangle_normals()
    equator = np.abs(n[:, 2]) < 0.1
    assert equator.sum() > 20
    lam1 = sf.principal_values[1, equator, 0]
    assert np.median(lam1) == pytest.approx((1.15 ** 2 - 1) / 2, rel=0.10)


def test_propagated_mesh_matches_warped_segmentation():
    spec = ph.cycle_spec(dims=(48, 48, 24), spacing=(2.0, 2.0, 2.0), semi_axes=(18.0, 15.0, 12.0))
    seg0 = ph.rasterize(spec, 0).segmentation
    mesh = mesh_from_segmentation(seg0, spec.spacing)
    from aladdin.biomarkers import dice
    for t in (4, 8, 15):
        moved = propagate_mesh(mesh, [ph.ground_truth_dvf(spec, t)]).per_phase_vertices[0]
        vox = voxelize_mesh(moved, mesh.triangles, spec.dims, spec.spacing)
        assert dice(vox, ph.rasterize(spec, t).segmentation) > 0.9
