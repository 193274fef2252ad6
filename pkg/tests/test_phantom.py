"""Phantom maps, rasterization and the analytic strain oracle."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aladdin import phantom as ph
from aladdin.surface import mesh_from_segmentation, propagate_mesh, strain_series
from aladdin.volume import segmentation_centroid


def _small(**kw):
    base = dict(dims=(48, 44, 36), spacing=(1.0, 1.0, 1.0), semi_axes=(15.0, 12.0, 10.0))
    base.update(kw)
    return base


def _affine_spec(A, tau=(0.0, 0.0, 0.0), **kw):
    return ph.PhantomSpec(**_small(**kw), affines=np.stack([np.eye(3), A]),
                          translations=np.array([[0.0, 0, 0], tau]), bump_amplitudes=np.zeros(2))


def test_profile_shape():
    prof = ph.cycle_profile(20)
    assert prof[0] == 0 and np.argmax(prof) == ph.RESERVOIR_END and prof[8] == 1.0
    assert np.all(np.diff(prof[:9]) > 0) and np.all(np.diff(prof[8:]) < 0)
    assert len(ph.cycle_profile(6)) == 6


def test_phase_zero_must_be_identity():
    with pytest.raises(ph.InvalidPhantomError):
        ph.PhantomSpec(affines=np.stack([1.1 * np.eye(3)]))
    with pytest.raises(ph.InvalidPhantomError):
        ph.PhantomSpec(affines=np.stack([np.eye(3), -np.eye(3)]), translations=np.zeros((2, 3)),
                       bump_amplitudes=np.zeros(2))


def test_folding_bump_rejected():
    spec = ph.PhantomSpec(**_small(), affines=np.stack([np.eye(3)] * 2), translations=np.zeros((2, 3)),
                          bump_amplitudes=np.array([0.0, -40.0]))
    with pytest.raises(ph.InvalidPhantomError):
        ph.rasterize(spec, 1)


def test_presets_cover_cycle_segments():
    n = {name: ph.PRESETS[name](**_small()).n_phases for name in ph.PRESETS}
    assert n == {"cycle20": 20, "reservoir": 9, "conduit": 8, "booster": 5}
    full = ph.cycle_spec(**_small())
    booster = ph.PRESETS["booster"](**_small())
    np.testing.assert_array_equal(booster.affines[1:], full.affines[16:])


# ---- rasterization ------------------------------------------------------------------

def test_phase_zero_is_reference_shell():
    spec = ph.PhantomSpec(**_small(), include_cavity=False)
    vol = ph.rasterize(spec, 0)
    x = np.moveaxis(np.indices(spec.dims).astype(float), 0, -1) * spec.spacing
    r = np.sqrt((((x - spec.center) / spec.semi_axes) ** 2).sum(-1))
    r_in = np.sqrt((((x - spec.center) / (np.asarray(spec.semi_axes) - spec.thickness)) ** 2).sum(-1))
    np.testing.assert_array_equal(vol.segmentation, (r <= 1) & (r_in > 1))


def test_translation_moves_centroid():
    tau = (3.0, -2.0, 1.5)
    spec = _affine_spec(np.eye(3), tau)
    c0 = segmentation_centroid(ph.rasterize(spec, 0).segmentation)
    c1 = segmentation_centroid(ph.rasterize(spec, 1).segmentation)
    assert np.all(np.abs((c1 - c0) * spec.spacing - tau) <= 0.5)


def test_inflation_volume_ratio():
    spec = _affine_spec(1.1 * np.eye(3), dims=(56, 52, 44))
    v0 = ph.rasterize(spec, 0).segmentation.sum()
    v1 = ph.rasterize(spec, 1).segmentation.sum()
    assert v1 / v0 == pytest.approx(1.1 ** 3, rel=0.05)


@pytest.mark.parametrize("phase", [0, 5, 8, 17])
def test_rasterized_volume_matches_analytic(phase):
    spec = ph.cycle_spec(**_small())
    vox = ph.rasterize(spec, phase).segmentation.sum() * np.prod(spec.spacing)
    assert vox == pytest.approx(ph.analytic_shell_volume(spec, phase), rel=0.05)


def test_noise_is_seeded():
    spec = ph.cycle_spec(**_small(), noise_sigma=0.05, seed=3)
    a = ph.rasterize(spec, 2).intensities
    b = ph.rasterize(spec, 2).intensities
    np.testing.assert_array_equal(a, b)
    c = ph.rasterize(ph.cycle_spec(**_small(), noise_sigma=0.05, seed=4), 2).intensities
    assert not np.array_equal(a, c)


# ---- ground-truth fields ---------------------------------------------------------------

def test_dvf_identity_and_affine():
    spec = _affine_spec(np.array([[1.1, 0.05, 0], [0, 0.95, 0], [0.02, 0, 1.0]]), (1.0, 2.0, -1.0))
    assert not ph.ground_truth_dvf(spec, 0).vectors.any()
    u = ph.ground_truth_dvf(spec, 1).vectors
    x = np.moveaxis(np.indices(spec.dims).astype(float), 0, -1) * spec.spacing
    c = np.asarray(spec.center)
    # the map is affine about the centre: phi(x) = c + A (x - c) + tau
    expect = (x - c) @ (spec.affines[1] - np.eye(3)).T + spec.translations[1]
    np.testing.assert_allclose(u, expect, atol=1e-12)


def test_dvf_bump_closed_form():
    spec = ph.cycle_spec(**_small())
    t = 8
    u = ph.ground_truth_dvf(spec, t).vectors
    rng = np.random.default_rng(0)
    idx = rng.integers(0, spec.dims, size=(10, 3))
    A, k, w = spec.affines[t], spec.bump_amplitudes[t], spec.bump_width
    c, b = np.asarray(spec.center), np.asarray(spec.bump_center)
    for i in idx:
        X = i * np.asarray(spec.spacing)
        g = np.exp(-np.dot(X - b, X - b) / (2 * w * w))
        phi = c + A @ ((1 + k * g) * (X - c))
        np.testing.assert_allclose(u[tuple(i)], phi - X, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 19))
def test_jacobian_and_inverse(seed, phase):
    spec = _jacobian_spec
    rng = np.random.default_rng(seed)
    X = np.asarray(spec.center) + rng.uniform(-14, 14, (5, 3))
    J = spec.jacobian(X, phase)
    h = 1e-5
    fd = np.stack([(spec.forward(X + h * e, phase) - spec.forward(X - h * e, phase)) / (2 * h)
                   for e in np.eye(3)], axis=-1)
    np.testing.assert_allclose(J, fd, atol=1e-8)
    np.testing.assert_allclose(spec.inverse(spec.forward(X, phase), phase), X, atol=1e-9)


_jacobian_spec = ph.cycle_spec(**_small())


# ---- strain oracle ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def reference_mesh():
    spec = ph.cycle_spec(**_small())
    return spec, mesh_from_segmentation(ph.rasterize(spec, 0).segmentation, spec.spacing)


def test_oracle_rigid_and_uniform_scale(reference_mesh):
    _, mesh = reference_mesh
    th = 0.4
    R = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    _, lam, _ = ph.ground_truth_strain(_affine_spec(R, (1.0, 0, 0)), mesh, 1)
    assert np.abs(lam).max() < 1e-14
    _, lam, _ = ph.ground_truth_strain(_affine_spec(1.2 * np.eye(3)), mesh, 1)
    np.testing.assert_allclose(lam, (1.2 ** 2 - 1) / 2, atol=1e-12)


def test_oracle_uniaxial_on_equator():
    from aladdin.surface import SurfaceMesh
    spec = _affine_spec(np.diag([1.3, 1.0, 1.0]))
    c = np.asarray(spec.center)
    # an equatorial cell on the +y side: its tangent plane holds x and z
    p = c + [0.0, spec.semi_axes[1], 0.0]
    cell = SurfaceMesh(np.array([p, p + [1.0, 0, 0], p + [0, 0, 1.0]]), np.array([[0, 1, 2]]))
    _, lam, dirs = ph.ground_truth_strain(spec, cell, 1)
    assert lam[0, 0] == pytest.approx((1.3 ** 2 - 1) / 2, abs=1e-12)
    assert lam[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert abs(dirs[0, 0] @ [1.0, 0, 0]) == pytest.approx(1.0, abs=1e-12)


def test_oracle_matches_pipeline_for_affine_motion(reference_mesh):
    _, mesh = reference_mesh
    spec = _affine_spec(np.array([[1.12, 0.03, 0], [0.0, 1.05, -0.02], [0.01, 0, 0.97]]), (1.0, -1.0, 0.5))
    sf = strain_series(propagate_mesh(mesh, [ph.ground_truth_dvf(spec, t) for t in range(2)]))
    gt = ph.ground_truth_strain_field(spec, mesh)
    np.testing.assert_allclose(sf.principal_values, gt.principal_values, atol=1e-10)


def test_oracle_matches_pipeline_on_cycle(reference_mesh):
    spec, mesh = reference_mesh
    sf = strain_series(propagate_mesh(mesh, [ph.ground_truth_dvf(spec, t) for t in range(20)]))
    gt = ph.ground_truth_strain_field(spec, mesh)
    err = np.abs(sf.principal_values - gt.principal_values)
    # constant-strain triangles average F along their edges while the oracle
    # evaluates F at the centroid, so the bump region carries an O(h) gap
    assert err.mean() <= 1e-3
    assert err.max() <= 5e-3
