"""Cropping, normalization, stabilization and wall-band masking."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from aladdin.volume import (LabeledVolume, MissingSegmentationError, PhaseSeries, contour_mask,
                            crop_to_roi, dilate_spherical, extract_contour, mask_image,
                            minmax_normalize, segmentation_centroid, stabilize_centroid,
                            translate_volume)


def _blob(dims, center, radius):
    idx = np.indices(dims).reshape(3, -1).T
    return (np.linalg.norm(idx - np.asarray(center), axis=1) <= radius).reshape(dims)


def _brute_contour(seg):
    out = np.zeros_like(seg)
    for p in np.argwhere(seg):
        for axis, step in itertools.product(range(3), (-1, 1)):
            q = p.copy()
            q[axis] += step
            if q[axis] < 0 or q[axis] >= seg.shape[axis] or not seg[tuple(q)]:
                out[tuple(p)] = True
                break
    return out


def _brute_dilate(mask, r):
    out = np.zeros_like(mask)
    offs = [o for o in itertools.product(range(-r, r + 1), repeat=3) if sum(x * x for x in o) <= r * r]
    for p in np.argwhere(mask):
        for o in offs:
            q = p + o
            if np.all(q >= 0) and np.all(q < mask.shape):
                out[tuple(q)] = True
    return out


masks = hnp.arrays(bool, st.tuples(*[st.integers(3, 9)] * 3), elements=st.booleans())


# ---- construction -------------------------------------------------------------

def test_volume_rejects_bad_spacing_and_shape():
    with pytest.raises(ValueError):
        LabeledVolume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        LabeledVolume(np.zeros((2, 2, 2)), segmentation=np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        PhaseSeries([LabeledVolume(np.zeros((2, 2, 2))), LabeledVolume(np.zeros((3, 2, 2)))])


# ---- crop -----------------------------------------------------------------------

def test_crop_default_size_centered_on_segmentation():
    dims = (256, 256, 36)
    seg = _blob(dims, (120, 140, 18), 10)
    img = np.random.default_rng(0).random(dims)
    vol = LabeledVolume(img, (1.25, 1.25, 2.5), seg)
    c = np.rint(segmentation_centroid(seg)).astype(int)
    out = crop_to_roi(vol, c, (96, 96, 36))
    assert out.dims == (96, 96, 36)
    assert out.spacing == vol.spacing
    assert out.segmentation.sum() == seg.sum()
    np.testing.assert_array_equal(out.intensities, img[72:168, 92:188, :])


def test_crop_identity():
    img = np.random.default_rng(1).random((8, 6, 5))
    vol = LabeledVolume(img, segmentation=img > 0.5)
    out = crop_to_roi(vol, (4, 3, 2), (8, 6, 5))
    np.testing.assert_array_equal(out.intensities, img)
    np.testing.assert_array_equal(out.segmentation, vol.segmentation)


def test_crop_pads_outside_with_zeros():
    vol = LabeledVolume(np.ones((10, 10, 10)))
    out = crop_to_roi(vol, (9, 9, 9), (6, 6, 6))
    # window covers indices 6..11; 10 and 11 fall outside
    inside = np.zeros((6, 6, 6), bool)
    inside[:4, :4, :4] = True
    assert np.all(out.intensities[inside] == 1)
    assert np.all(out.intensities[~inside] == 0)


def test_crop_zero_size_raises():
    with pytest.raises(ValueError):
        crop_to_roi(LabeledVolume(np.ones((4, 4, 4))), (2, 2, 2), (4, 0, 4))


# ---- normalize --------------------------------------------------------------------

def test_normalize_affine_rescale():
    out = minmax_normalize(LabeledVolume(np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1)))
    np.testing.assert_array_equal(out.intensities.ravel(), [0.0, 0.5, 1.0])


def test_normalize_unit_range_unchanged_and_constant_to_zero():
    img = np.linspace(0, 1, 24).reshape(2, 3, 4)
    np.testing.assert_array_equal(minmax_normalize(LabeledVolume(img)).intensities, img)
    const = minmax_normalize(LabeledVolume(np.full((3, 3, 3), 7.5)))
    assert np.all(const.intensities == 0)
    assert np.all(minmax_normalize(const).intensities == 0)


@given(hnp.arrays(np.float64, (4, 3, 5), elements=st.floats(-1e3, 1e3)))
def test_normalize_idempotent(img):
    once = minmax_normalize(LabeledVolume(img))
    twice = minmax_normalize(once)
    np.testing.assert_array_equal(once.intensities, twice.intensities)
    if img.max() > img.min():
        assert once.intensities.min() == 0 and once.intensities.max() == 1


# ---- stabilization ------------------------------------------------------------------

def _series(offsets, dims=(24, 24, 16)):
    phases = []
    for t, off in enumerate(offsets):
        seg = _blob(dims, np.array((11, 12, 7)) + off, 4)
        phases.append(LabeledVolume(seg.astype(float), segmentation=seg, phase_index=t))
    return PhaseSeries(phases)


def test_stabilize_aligned_is_noop():
    series = _series([(0, 0, 0), (0, 0, 0)])
    out, shifts = stabilize_centroid(series)
    assert not shifts.any()
    for a, b in zip(series.phases, out.phases):
        np.testing.assert_array_equal(a.intensities, b.intensities)


def test_stabilize_reports_opposite_shift():
    _, shifts = stabilize_centroid(_series([(0, 0, 0), (3, 0, 0)]))
    np.testing.assert_array_equal(shifts[1], (-3, 0, 0))


def test_stabilize_centroids_coincide():
    out, _ = stabilize_centroid(_series([(0, 0, 0), (1, 2, 0), (-2, 1, 1)]))
    ref = segmentation_centroid(out[0].segmentation)
    for vol in out.phases[1:]:
        assert np.all(np.abs(segmentation_centroid(vol.segmentation) - ref) <= 0.5)


def test_stabilize_missing_segmentation():
    series = _series([(0, 0, 0), (0, 0, 0)])
    empty = series[1].replace(segmentation=np.zeros(series.dims, bool))
    with pytest.raises(MissingSegmentationError):
        stabilize_centroid(PhaseSeries([series[0], empty]))


def test_translate_moves_content():
    vol = LabeledVolume(np.arange(27.0).reshape(3, 3, 3))
    out = translate_volume(vol, (1, 0, -1))
    assert out.intensities[1, 0, 0] == vol.intensities[0, 0, 1]
    assert np.all(out.intensities[0] == 0)


# ---- contour --------------------------------------------------------------------------

def test_contour_of_cube_is_98_voxel_shell():
    seg = np.zeros((9, 9, 9), bool)
    seg[2:7, 2:7, 2:7] = True
    c = extract_contour(seg)
    assert c.sum() == 5 ** 3 - 3 ** 3 == 98
    assert not c[3:6, 3:6, 3:6].any()


def test_contour_single_voxel_and_empty():
    seg = np.zeros((3, 3, 3), bool)
    assert not extract_contour(seg).any()
    seg[1, 1, 1] = True
    np.testing.assert_array_equal(extract_contour(seg), seg)


@settings(max_examples=40, deadline=None)
@given(masks)
def test_contour_matches_brute_force(seg):
    np.testing.assert_array_equal(extract_contour(seg), _brute_contour(seg))


def test_contour_on_random_blob_32():
    rng = np.random.default_rng(5)
    seg = _blob((32, 32, 32), (16, 15, 17), 9) & (rng.random((32, 32, 32)) > 0.1)
    np.testing.assert_array_equal(extract_contour(seg), _brute_contour(seg))


# ---- dilation ---------------------------------------------------------------------------

def test_dilate_single_voxel_gives_cross():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    d = dilate_spherical(m, 1)
    assert d.sum() == 7
    for axis, step in itertools.product(range(3), (-1, 1)):
        p = [2, 2, 2]
        p[axis] += step
        assert d[tuple(p)]


def test_dilate_radius_zero_identity_and_cube_contour():
    seg = np.zeros((11, 11, 11), bool)
    seg[3:8, 3:8, 3:8] = True
    c = extract_contour(seg)
    np.testing.assert_array_equal(dilate_spherical(c, 0), c)
    d = dilate_spherical(c, 1)
    assert np.all(d[c])
    np.testing.assert_array_equal(d, _brute_dilate(c, 1))
    np.testing.assert_array_equal(contour_mask(seg, 1), d)


@settings(max_examples=30, deadline=None)
@given(masks, st.integers(0, 2), st.integers(0, 2))
def test_dilate_monotone_and_subadditive(m, r1, r2):
    d1 = dilate_spherical(m, r1)
    assert np.all(d1[m])
    np.testing.assert_array_equal(d1, _brute_dilate(m, r1))
    big = dilate_spherical(m, r1 + r2)
    nested = dilate_spherical(d1, r2)
    assert np.all(big[nested])


def test_dilate_negative_radius():
    with pytest.raises(ValueError):
        dilate_spherical(np.zeros((2, 2, 2), bool), -1)


# ---- masking -------------------------------------------------------------------------------

def test_mask_image_cases():
    img = np.indices((6, 6, 6)).sum(axis=0).astype(float) + 1.0
    vol = LabeledVolume(img)
    np.testing.assert_array_equal(mask_image(vol, np.ones(img.shape, bool)).intensities, img)
    assert not mask_image(vol, np.zeros(img.shape, bool)).intensities.any()
    cube = np.zeros(img.shape, bool)
    cube[1:5, 1:5, 1:5] = True
    shell = extract_contour(cube)
    out = mask_image(vol, shell).intensities
    np.testing.assert_array_equal(out != 0, shell)
    np.testing.assert_array_equal(out[shell], img[shell])


def test_mask_image_shape_mismatch():
    with pytest.raises(ValueError):
        mask_image(LabeledVolume(np.ones((3, 3, 3))), np.ones((3, 3, 4), bool))
