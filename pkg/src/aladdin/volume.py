"""Time-resolved labeled volumes and the preprocessing applied before registration.

Coordinates follow the array index order ``(i, j, k)``; physical positions are
``index * spacing`` in mm with the origin at voxel ``(0, 0, 0)``.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


class MissingSegmentationError(ValueError):
    """A phase lacks the (nonempty) segmentation an operation needs."""


@dataclasses.dataclass(frozen=True)
class LabeledVolume:
    """A 3D scalar image, optionally paired with a binary segmentation.

    Parameters
    ----------
    intensities : ndarray, shape (I, J, K)
    spacing : tuple of 3 floats
        Voxel size in mm, strictly positive.
    segmentation : ndarray of bool, shape (I, J, K), optional
    phase_index : int
    """

    intensities: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    segmentation: Optional[np.ndarray] = None
    phase_index: int = 0

    def __post_init__(self):
        img = np.asarray(self.intensities, dtype=np.float64)
        if img.ndim != 3:
            raise ValueError(f"intensities must be 3D, got shape {img.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        seg = self.segmentation
        if seg is not None:
            seg = np.asarray(seg).astype(bool)
            if seg.shape != img.shape:
                raise ValueError(
                    f"segmentation shape {seg.shape} != intensities shape {img.shape}")
            seg.flags.writeable = False
        img.flags.writeable = False
        object.__setattr__(self, "intensities", img)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "segmentation", seg)
        object.__setattr__(self, "phase_index", int(self.phase_index))

    @property
    def dims(self) -> tuple:
        return self.intensities.shape

    def replace(self, **changes) -> "LabeledVolume":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class PhaseSeries:
    """Ordered cardiac phases sharing one grid; phase ``reference_index`` is the undeformed state."""

    phases: tuple
    reference_index: int = 0

    def __post_init__(self):
        phases = tuple(self.phases)
        if not phases:
            raise ValueError("a phase series needs at least one phase")
        dims, spacing = phases[0].dims, phases[0].spacing
        for p in phases[1:]:
            if p.dims != dims or not np.allclose(p.spacing, spacing):
                raise ValueError("all phases must share dims and spacing")
        if not 0 <= self.reference_index < len(phases):
            raise ValueError(f"reference_index {self.reference_index} out of range")
        object.__setattr__(self, "phases", phases)

    def __len__(self):
        return len(self.phases)

    def __getitem__(self, idx) -> LabeledVolume:
        return self.phases[idx]

    @property
    def reference(self) -> LabeledVolume:
        return self.phases[self.reference_index]

    @property
    def dims(self) -> tuple:
        return self.phases[0].dims

    @property
    def spacing(self) -> tuple:
        return self.phases[0].spacing


def _window(array, center, size, fill=0):
    out = np.full(tuple(size), fill, dtype=array.dtype)
    src, dst = [], []
    for c, s, n in zip(center, size, array.shape):
        start = int(c) - s // 2
        lo, hi = max(start, 0), min(start + s, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = array[tuple(src)]
    return out


def crop_to_roi(vol: LabeledVolume, center: Sequence[int], size: Sequence[int]) -> LabeledVolume:
    """Crop a window of ``size`` voxels centred on ``center``, zero-padding outside the volume.

    The window starts at ``center - size // 2`` along each axis, so an even-sized
    window has ``center`` just right of its midpoint.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) <= 0:
        raise ValueError(f"crop size must be 3 positive integers, got {size}")
    center = tuple(int(round(c)) for c in center)
    img = _window(vol.intensities, center, size, 0.0)
    seg = None
    if vol.segmentation is not None:
        seg = _window(vol.segmentation, center, size, False)
    return vol.replace(intensities=img, segmentation=seg)


def minmax_normalize(vol: LabeledVolume) -> LabeledVolume:
    """Affinely rescale intensities to [0, 1]; a constant image maps to zeros."""
    img = vol.intensities
    lo, hi = img.min(), img.max()
    if hi > lo:
        out = (img - lo) / (hi - lo)
    else:
        out = np.zeros_like(img)
    return vol.replace(intensities=out)


def segmentation_centroid(seg: np.ndarray) -> np.ndarray:
    """Centroid of a binary mask in voxel coordinates."""
    idx = np.argwhere(seg)
    if idx.size == 0:
        raise MissingSegmentationError("empty segmentation has no centroid")
    return idx.mean(axis=0)


def _shift_array(array, shift, fill):
    out = np.full_like(array, fill)
    src, dst = [], []
    for d, n in zip(shift, array.shape):
        if d >= 0:
            src.append(slice(0, max(n - d, 0)))
            dst.append(slice(d, n))
        else:
            src.append(slice(-d, n))
            dst.append(slice(0, max(n + d, 0)))
    out[tuple(dst)] = array[tuple(src)]
    return out


def translate_volume(vol: LabeledVolume, shift: Sequence[int]) -> LabeledVolume:
    """Integer-voxel translation; content moves by ``shift`` and vacated voxels are zero."""
    shift = tuple(int(s) for s in shift)
    img = _shift_array(vol.intensities, shift, 0.0)
    seg = None if vol.segmentation is None else _shift_array(vol.segmentation, shift, False)
    return vol.replace(intensities=img, segmentation=seg)


def stabilize_centroid(series: PhaseSeries):
    """Translate every phase so its segmentation centroid sits on the reference centroid.

    Returns
    -------
    stabilized : PhaseSeries
    shifts : ndarray of int, shape (P, 3)
        Applied per-phase voxel shifts (content moved by this amount).
    """
    centroids = []
    for t, vol in enumerate(series.phases):
        if vol.segmentation is None or not vol.segmentation.any():
            raise MissingSegmentationError(f"phase {t} has no segmentation")
        centroids.append(segmentation_centroid(vol.segmentation))
    ref = centroids[series.reference_index]
    shifts = np.array([np.rint(ref - c).astype(int) for c in centroids])
    phases = [translate_volume(v, s) if s.any() else v for v, s in zip(series.phases, shifts)]
    logger.debug("centroid shifts: %s", shifts.tolist())
    return PhaseSeries(phases, series.reference_index), shifts


_CROSS = ndimage.generate_binary_structure(3, 1)


def extract_contour(seg: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour.

    Voxels outside the grid count as background.
    """
    seg = np.asarray(seg, dtype=bool)
    interior = ndimage.binary_erosion(seg, structure=_CROSS, border_value=0)
    return seg & ~interior


def ball(radius: int) -> np.ndarray:
    """Discrete ball: offsets with Euclidean norm <= radius (voxel units)."""
    r = int(radius)
    ax = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return x ** 2 + y ** 2 + z ** 2 <= r * r


def dilate_spherical(mask: np.ndarray, radius_voxels: int) -> np.ndarray:
    """Binary dilation with a Euclidean ball of ``radius_voxels``."""
    mask = np.asarray(mask, dtype=bool)
    if radius_voxels < 0:
        raise ValueError("radius must be >= 0")
    if radius_voxels == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=ball(radius_voxels))


def mask_image(vol: LabeledVolume, mask: np.ndarray) -> LabeledVolume:
    """Zero intensities outside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.dims:
        raise ValueError(f"mask shape {mask.shape} != volume shape {vol.dims}")
    return vol.replace(intensities=np.where(mask, vol.intensities, 0.0))


def contour_mask(seg: np.ndarray, radius_voxels: int = 1) -> np.ndarray:
    """Wall band used to mask registration inputs: the dilated segmentation contour."""
    return dilate_spherical(extract_contour(seg), radius_voxels)


def preprocess_series(series: PhaseSeries, crop_size=(96, 96, 36), center=None,
                      stabilize: bool = True):
    """Crop around the reference segmentation centroid, normalize, and stabilize.

    Returns the processed series and the per-phase stabilization shifts
    (zeros when ``stabilize`` is False).
    """
    if center is None:
        ref_seg = series.reference.segmentation
        if ref_seg is None or not ref_seg.any():
            raise MissingSegmentationError("crop centre needs a reference segmentation")
        center = np.rint(segmentation_centroid(ref_seg)).astype(int)
    phases = [minmax_normalize(crop_to_roi(v, center, crop_size)) for v in series.phases]
    out = PhaseSeries(phases, series.reference_index)
    shifts = np.zeros((len(out), 3), dtype=int)
    if stabilize:
        out, shifts = stabilize_centroid(out)
    return out, shifts
