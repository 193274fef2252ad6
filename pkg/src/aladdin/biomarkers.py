"""Global chamber-function markers and segmentation agreement metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .volume import PhaseSeries, extract_contour, MissingSegmentationError

logger = logging.getLogger(__name__)

MM3_PER_ML = 1000.0
AREA_LENGTH_COEF = 8.0 / (3.0 * math.pi)


@dataclasses.dataclass(frozen=True)
class VolumeCurve:
    """Chamber volume per phase (mL) with the phases used by the ejection fractions."""

    volumes: np.ndarray
    preactivation_phase: int = 15

    def __post_init__(self):
        v = np.asarray(self.volumes, dtype=np.float64)
        object.__setattr__(self, "volumes", v)
        if not 0 <= self.preactivation_phase < len(v):
            raise ValueError(f"pre-activation phase {self.preactivation_phase} outside 0..{len(v) - 1}")

    @property
    def max_phase(self) -> int:
        return int(np.argmax(self.volumes))

    @property
    def min_phase(self) -> int:
        return int(np.argmin(self.volumes))

    @property
    def max_volume(self) -> float:
        return float(self.volumes.max())

    @property
    def min_volume(self) -> float:
        return float(self.volumes.min())

    @property
    def preactivation_volume(self) -> float:
        return float(self.volumes[self.preactivation_phase])

    def physiological(self) -> bool:
        return self.max_volume >= self.preactivation_volume >= self.min_volume and self.min_volume > 0


@dataclasses.dataclass(frozen=True)
class LongAxisSlice:
    """Per-phase area (mm^2), long-axis length (mm) and endocardial contour for one view."""

    view: str
    areas: np.ndarray
    lengths: np.ndarray
    contours: Sequence[np.ndarray] = ()

    def __post_init__(self):
        if self.view not in ("2ch", "4ch"):
            raise ValueError(f"view must be '2ch' or '4ch', got {self.view!r}")
        object.__setattr__(self, "areas", np.asarray(self.areas, dtype=np.float64))
        object.__setattr__(self, "lengths", np.asarray(self.lengths, dtype=np.float64))


def volume_curve(series: PhaseSeries, preactivation_phase: int = 15) -> VolumeCurve:
    """Voxel-count chamber volumes."""
    voxel_ml = float(np.prod(series.spacing)) / MM3_PER_ML
    vols = []
    for t, vol in enumerate(series.phases):
        if vol.segmentation is None:
            raise MissingSegmentationError(f"phase {t} has no segmentation")
        vols.append(int(vol.segmentation.sum()) * voxel_ml)
    curve = VolumeCurve(np.array(vols), min(preactivation_phase, len(vols) - 1))
    if not curve.physiological():
        logger.warning("volume curve is not physiological: max %.2f, pre %.2f, min %.2f",
                       curve.max_volume, curve.preactivation_volume, curve.min_volume)
    return curve


def ejection_fractions(curve: VolumeCurve):
    """Total and active ejection fractions in percent: ``(LAEF, LAaEF)``."""
    vmax, vmin, vpre = curve.max_volume, curve.min_volume, curve.preactivation_volume
    if vmax <= 0 or vpre <= 0:
        raise ZeroDivisionError("max and pre-activation volumes must be positive")
    laef = (vmax - vmin) / vmax * 100.0
    laaef = (vpre - vmin) / vpre * 100.0
    for name, val in (("LAEF", laef), ("LAaEF", laaef)):
        if not 0.0 <= val <= 100.0:
            warnings.warn(f"{name} = {val:.1f}% outside the physiological range [0, 100]")
    return laef, laaef


def _positive(**values):
    for name, v in values.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


def area_length_volume(area: float, length: float) -> float:
    """Single-plane area-length volume in mL from area (mm^2) and length (mm)."""
    _positive(area=area, length=length)
    return AREA_LENGTH_COEF * (area * area) / length / MM3_PER_ML


def biplane_volume(area_2ch: float, area_4ch: float, length_2ch: float, length_4ch: float) -> float:
    """Biplane area-length volume in mL; the shorter of the two lengths is used."""
    _positive(area_2ch=area_2ch, area_4ch=area_4ch, length_2ch=length_2ch, length_4ch=length_4ch)
    return AREA_LENGTH_COEF * (area_2ch * area_4ch) / min(length_2ch, length_4ch) / MM3_PER_ML


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def gls_curve(slc: LongAxisSlice) -> np.ndarray:
    """Green-Lagrange perimeter strain ``((P_t / P_0)^2 - 1) / 2`` per phase."""
    lengths = []
    for t, c in enumerate(slc.contours):
        if len(c) < 3:
            raise ValueError(f"contour at phase {t} has fewer than 3 points")
        lengths.append(polyline_length(c))
    if not lengths:
        raise ValueError("slice has no contours")
    ratio = np.asarray(lengths) / lengths[0]
    return 0.5 * (ratio * ratio - 1.0)


def surface_points(mask, spacing) -> np.ndarray:
    return np.argwhere(extract_contour(mask)) * np.asarray(spacing, dtype=np.float64)


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance (mm) between the surface voxels of two masks."""
    pa, pb = surface_points(a, spacing), surface_points(b, spacing)
    if not len(pa) or not len(pb):
        raise ValueError("Hausdorff distance needs two nonempty masks")
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def dice(a, b) -> float:
    """Overlap ``2|a & b| / (|a| + |b|)``; two empty masks score 1 (with a warning)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        warnings.warn("dice of two empty masks defined as 1")
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def slice_plane(seg, spacing, axis: int = 2, index: Optional[int] = None):
    """Area (mm^2) and in-plane long-axis length (mm) of a segmentation cut.

    Helper for deriving long-axis inputs from a 3D mask: the cut is the plane
    ``axis = index`` (default: through the mask centroid); the length is the
    largest extent of the cut along either in-plane axis.
    """
    seg = np.asarray(seg, dtype=bool)
    if index is None:
        index = int(round(np.argwhere(seg)[:, axis].mean()))
    cut = np.take(seg, index, axis=axis)
    sp = [s for d, s in enumerate(spacing) if d != axis]
    area = float(cut.sum()) * sp[0] * sp[1]
    idx = np.argwhere(cut)
    if not len(idx):
        return 0.0, 0.0
    extents = (idx.max(axis=0) - idx.min(axis=0) + 1) * np.asarray(sp)
    return area, float(extents.max())
