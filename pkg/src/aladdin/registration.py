"""Dense displacement-field registration: negative mutual information plus bending energy.

The displacement field ``u`` lives on the fixed (target) grid and is stored in
mm. Warping pulls the moving image back: ``warped(x) = moving(x + u(x))``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize

from .volume import LabeledVolume, PhaseSeries

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors in mm, shape ``(I, J, K, 3)``.

    ``x + vectors[x]`` is where the material at reference position ``x`` sits
    in the target phase.
    """

    vectors: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    source_phase: int = 0
    target_phase: int = 0

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 4 or v.shape[-1] != 3:
            raise ValueError(f"vectors must have shape (I, J, K, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple:
        return self.vectors.shape[:3]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), source_phase=0, target_phase=0):
        return cls(np.zeros(tuple(dims) + (3,)), spacing, source_phase, target_phase)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)


@dataclasses.dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for :func:`register_pair`.

    Attributes
    ----------
    mi_bins : histogram bins at the finest level
    bending_weight : weight of the bending energy (mean over voxels, mm^-2).
        Physiological fields have energies around 1e-5 in these units, so the
        weight must be large for the term to matter against MI (order 1).
    pyramid_levels : coarse-to-fine levels, factor 2 each
    max_iterations : L-BFGS iterations per level
    convergence_tol : relative loss decrease that stops a level
    field_smoothing_sigma : width (mm) of the Gaussian parameterizing each
        level's update; equivalent to smoothing the gradient
    coarse_bins_min : floor for the halved bin count on coarse levels
    mask_radius : dilation (voxels) of the contour band used as MI support
    grid_coarsening : the finest control grid is the image grid downsampled
        by ``2 ** grid_coarsening``; the dense field is its trilinear upsampling
    """

    mi_bins: int = 128
    bending_weight: float = 1e4
    pyramid_levels: int = 3
    max_iterations: int = 200
    convergence_tol: float = 1e-5
    field_smoothing_sigma: float = 3.0
    coarse_bins_min: int = 32
    mask_radius: int = 1
    grid_coarsening: int = 1

    def __post_init__(self):
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be >= 2")
        if self.bending_weight < 0:
            raise ValueError("bending_weight must be >= 0")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.grid_coarsening < 0:
            raise ValueError("grid_coarsening must be >= 0")

    def bins_at_level(self, level: int) -> int:
        if level == 0:
            return self.mi_bins
        return max(min(self.coarse_bins_min, self.mi_bins), self.mi_bins >> level)


# ---------------------------------------------------------------------------
# trilinear sampling

_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def trilinear_sample(image, coords, gradient=False):
    """Sample ``image`` at voxel coordinates ``coords`` (shape (3, ...)).

    Samples falling outside the grid read zeros from an implicit zero border,
    so the interpolant is continuous everywhere. With ``gradient=True`` also
    returns the exact derivative of the interpolant w.r.t. the coordinates,
    shape (3, ...).
    """
    image = np.asarray(image, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    shape = coords.shape[1:]
    x = coords.reshape(3, -1)
    base = np.floor(x)
    frac = x - base
    base = base.astype(np.int64)
    dims = image.shape
    flat = image.ravel()
    strides = (dims[1] * dims[2], dims[2], 1)
    values = np.zeros(x.shape[1])
    grads = np.zeros((3, x.shape[1])) if gradient else None
    w = [(1.0 - frac[d], frac[d]) for d in range(3)]
    for corner in _CORNERS:
        idx = [base[d] + corner[d] for d in range(3)]
        valid = ((idx[0] >= 0) & (idx[0] < dims[0]) & (idx[1] >= 0) & (idx[1] < dims[1])
                 & (idx[2] >= 0) & (idx[2] < dims[2]))
        lin = sum(np.clip(idx[d], 0, dims[d] - 1) * strides[d] for d in range(3))
        val = np.where(valid, flat[lin], 0.0)
        wx, wy, wz = w[0][corner[0]], w[1][corner[1]], w[2][corner[2]]
        values += val * wx * wy * wz
        if gradient:
            sx, sy, sz = (1.0 if c else -1.0 for c in corner)
            grads[0] += val * sx * wy * wz
            grads[1] += val * wx * sy * wz
            grads[2] += val * wx * wy * sz
    values = values.reshape(shape)
    if gradient:
        return values, grads.reshape((3,) + shape)
    return values


def sample_field(vectors, points_mm, spacing, mode="edge"):
    """Trilinearly sample a vector field (I, J, K, 3) at physical points (..., 3).

    ``mode='edge'`` clamps coordinates to the grid; ``mode='zero'`` reads zeros
    outside it.
    """
    pts = np.asarray(points_mm, dtype=np.float64)
    shape = pts.shape
    coords = (pts.reshape(-1, 3) / np.asarray(spacing)).T
    dims = np.asarray(vectors.shape[:3])
    if mode == "edge":
        coords = np.clip(coords, 0, (dims - 1)[:, None])
    elif mode != "zero":
        raise ValueError(f"unknown mode {mode!r}")
    out = np.empty((coords.shape[1], 3))
    for c in range(3):
        out[:, c] = trilinear_sample(vectors[..., c], coords)
    return out.reshape(shape)


def identity_grid(dims):
    """Voxel indices (3, I, J, K)."""
    return np.indices(dims, dtype=np.float64)


def grid_points(dims, spacing):
    """Physical voxel positions (I, J, K, 3) in mm."""
    return np.moveaxis(np.indices(dims, dtype=np.float64), 0, -1) * np.asarray(spacing, dtype=np.float64)


def warp_array(image, vectors, spacing, gradient=False):
    """``image(x + u(x))`` on the grid of ``vectors``; ``u`` in mm."""
    dims = vectors.shape[:3]
    coords = identity_grid(dims) + np.moveaxis(vectors, -1, 0) / np.asarray(spacing)[:, None, None, None]
    return trilinear_sample(image, coords, gradient=gradient)


def warp_trilinear(moving: LabeledVolume, dvf: DisplacementField) -> LabeledVolume:
    """Pull ``moving`` back through ``dvf`` with trilinear interpolation (zeros outside)."""
    if moving.dims != dvf.dims:
        raise ValueError(f"image dims {moving.dims} != field dims {dvf.dims}")
    img = warp_array(moving.intensities, dvf.vectors, dvf.spacing)
    seg = None
    if moving.segmentation is not None:
        seg = warp_array(moving.segmentation.astype(np.float64), dvf.vectors, dvf.spacing) >= 0.5
    return moving.replace(intensities=img, segmentation=seg)


def warp_segmentation(seg, vectors, spacing):
    """Warp a binary mask (trilinear, threshold 0.5)."""
    return warp_array(np.asarray(seg, dtype=np.float64), vectors, spacing) >= 0.5


# ---------------------------------------------------------------------------
# mutual information

def _parzen(values, bins):
    pos = np.clip(values, 0.0, 1.0) * (bins - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), bins - 2)
    frac = pos - lo
    return lo, frac


def _joint_histogram(a, b, bins):
    ia, fa = _parzen(a, bins)
    ib, fb = _parzen(b, bins)
    n = a.size
    hist = np.zeros(bins * bins)
    for da, wa in ((0, 1.0 - fa), (1, fa)):
        for db, wb in ((0, 1.0 - fb), (1, fb)):
            hist += np.bincount((ia + da) * bins + ib + db, weights=wa * wb, minlength=bins * bins)
    pa = (np.bincount(ia, 1.0 - fa, minlength=bins) + np.bincount(ia + 1, fa, minlength=bins)) / n
    pb = (np.bincount(ib, 1.0 - fb, minlength=bins) + np.bincount(ib + 1, fb, minlength=bins)) / n
    return hist.reshape(bins, bins) / n, pa, pb, (ia, fa, ib, fb)


def _plogp_sum(p):
    p = p[p > 0]
    return math.fsum((p * np.log(p)).tolist())


def _mi_from_hist(pab, pa, pb):
    # exactly rounded sums make the estimate independent of summation order
    return math.fsum([_plogp_sum(pab.ravel()), -_plogp_sum(pa), -_plogp_sum(pb)])


def mutual_information_values(a, b, bins=128):
    """MI (nats) between paired samples ``a`` and ``b`` in [0, 1].

    Each sample is spread over its two nearest bin centres with a linear
    (triangular) Parzen window, which makes the estimate piecewise smooth in
    the sample values.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("mutual information needs a nonempty support")
    pab, pa, pb, _ = _joint_histogram(a, b, bins)
    return _mi_from_hist(pab, pa, pb)


def entropy_values(a, bins=128):
    """Parzen-binned marginal entropy (nats) of samples in [0, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    ia, fa = _parzen(a, bins)
    pa = (np.bincount(ia, 1.0 - fa, minlength=bins) + np.bincount(ia + 1, fa, minlength=bins)) / a.size
    return -_plogp_sum(pa)


def mutual_information_grad(a, b, bins=128):
    """MI between ``a`` and ``b`` and its gradient w.r.t. every sample of ``a``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("mutual information needs a nonempty support")
    pab, pa, pb, (ia, fa, ib, fb) = _joint_histogram(a, b, bins)
    mi = _mi_from_hist(pab, pa, pb)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(pab) - np.log(pa)[:, None] - np.log(pb)[None, :]
    log_ratio[pab <= 0] = 0.0
    # dMI/da = sum_ij log(p_ij / p_i p_j) * dp_ij/da; the +1 terms cancel because
    # Parzen weights sum to one
    row_lo = log_ratio[ia, ib] * (1.0 - fb) + log_ratio[ia, ib + 1] * fb
    row_hi = log_ratio[ia + 1, ib] * (1.0 - fb) + log_ratio[ia + 1, ib + 1] * fb
    # at a bin centre this is the right-hand derivative
    grad = (row_hi - row_lo) * (bins - 1) / a.size
    return mi, grad


def mutual_information(a: LabeledVolume, b: LabeledVolume, bins: int = 128, support=None) -> float:
    """MI between two images restricted to ``support`` (defaults to the whole grid)."""
    if a.dims != b.dims:
        raise ValueError(f"dims differ: {a.dims} vs {b.dims}")
    if support is None:
        support = np.ones(a.dims, dtype=bool)
    support = np.asarray(support, dtype=bool)
    if not support.any():
        raise ValueError("mutual information needs a nonempty support")
    return mutual_information_values(a.intensities[support], b.intensities[support], bins)


# ---------------------------------------------------------------------------
# bending energy

def _second_difference_stencils(spacing):
    hx, hy, hz = spacing
    h = (hx, hy, hz)
    ops = []
    for d in range(3):
        e = [0, 0, 0]
        e[d] = 1
        plus = tuple(e)
        minus = tuple(-v for v in e)
        ops.append((1.0, [(plus, 1.0 / h[d] ** 2), ((0, 0, 0), -2.0 / h[d] ** 2),
                          (minus, 1.0 / h[d] ** 2)]))
    for d1, d2 in ((0, 1), (0, 2), (1, 2)):
        c = 1.0 / (4.0 * h[d1] * h[d2])
        stencil = []
        for s1, s2, w in ((1, 1, c), (1, -1, -c), (-1, 1, -c), (-1, -1, c)):
            off = [0, 0, 0]
            off[d1], off[d2] = s1, s2
            stencil.append((tuple(off), w))
        ops.append((2.0, stencil))
    return ops


def _shifted(dims, off):
    return tuple(slice(1 + o, n - 1 + o) for o, n in zip(off, dims))


def bending_energy_array(vectors, spacing, gradient=False):
    """Bending energy of a field (I, J, K, 3) in mm, optionally with its gradient.

    Mean over interior voxels of the component-summed
    ``u_xx^2 + u_yy^2 + u_zz^2 + 2 (u_xy^2 + u_xz^2 + u_yz^2)``, with central
    differences in mm. Boundary voxels, where central differences are
    undefined, contribute nothing.
    """
    v = np.moveaxis(np.asarray(vectors, dtype=np.float64), -1, 0)
    dims = v.shape[1:]
    if min(dims) < 3:
        raise ValueError("bending energy needs at least 3 voxels per axis")
    n_interior = (dims[0] - 2) * (dims[1] - 2) * (dims[2] - 2)
    total = 0.0
    grad = np.zeros_like(v) if gradient else None
    for coef, stencil in _second_difference_stencils(spacing):
        d = sum(w * v[(slice(None),) + _shifted(dims, off)] for off, w in stencil)
        total += coef * float(np.sum(d * d))
        if gradient:
            r = (2.0 * coef / n_interior) * d
            for off, w in stencil:
                grad[(slice(None),) + _shifted(dims, off)] += w * r
    energy = total / n_interior
    if gradient:
        return energy, np.moveaxis(grad, 0, -1)
    return energy


def bending_energy(dvf: DisplacementField) -> float:
    return bending_energy_array(dvf.vectors, dvf.spacing)


# ---------------------------------------------------------------------------
# objective and optimizer

def registration_loss(moving, target, support, vectors, spacing, bins, bending_weight,
                      gradient=False):
    """``-MI(warp(moving, u), target) + bending_weight * bending(u)`` over ``support``.

    ``moving``/``target`` are arrays on the same grid; ``vectors`` has shape
    (I, J, K, 3) in mm.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    coords = identity_grid(support.shape)[:, support] + \
        np.moveaxis(vectors, -1, 0)[:, support] / spacing[:, None]
    if not gradient:
        warped = trilinear_sample(moving, coords)
        mi = mutual_information_values(warped, target[support], bins)
        be = bending_energy_array(vectors, spacing) if bending_weight else 0.0
        return -mi + bending_weight * be
    warped, dwarp = trilinear_sample(moving, coords, gradient=True)
    mi, dmi = mutual_information_grad(warped, target[support], bins)
    grad = np.zeros(vectors.shape)
    grad[support] = -(dmi[None, :] * dwarp / spacing[:, None]).T
    loss = -mi
    if bending_weight:
        be, dbe = bending_energy_array(vectors, spacing, gradient=True)
        loss += bending_weight * be
        grad += bending_weight * dbe
    return loss, grad


def _resize(array, shape, order=1):
    """Resample so the first and last voxels stay aligned."""
    array = np.asarray(array, dtype=np.float64)
    coords = np.meshgrid(*[np.linspace(0, n - 1, m) for n, m in zip(array.shape, shape)],
                         indexing="ij")
    return ndimage.map_coordinates(array, coords, order=order, mode="nearest")


def _resize_field(vectors, shape):
    return np.stack([_resize(vectors[..., c], shape) for c in range(3)], axis=-1)


def _pyramid_shapes(dims, levels):
    shapes = [tuple(dims)]
    for _ in range(levels - 1):
        prev = shapes[-1]
        shapes.append(tuple(max(3, (n + 1) // 2) for n in prev))
    return shapes


def _level_spacing(spacing, dims, shape):
    return tuple(s * (n - 1) / (m - 1) for s, n, m in zip(spacing, dims, shape))


def grid_interpolator(points_index, dims, shape):
    """Sparse trilinear map from a control grid of ``shape`` to full-grid points.

    ``points_index`` (3, N) are voxel indices on the full grid of ``dims``;
    the control grid spans the same extent with aligned corners.
    """
    n = points_index.shape[1]
    scale = np.array([(m - 1) / (d - 1) if d > 1 else 0.0 for d, m in zip(dims, shape)])
    pos = points_index * scale[:, None]
    base = np.minimum(np.floor(pos).astype(np.int64), (np.asarray(shape) - 2)[:, None])
    base = np.maximum(base, 0)
    frac = pos - base
    rows, cols, vals = [], [], []
    for corner in _CORNERS:
        w = np.ones(n)
        idx = np.zeros(n, dtype=np.int64)
        for d in range(3):
            f = frac[d] if corner[d] else 1.0 - frac[d]
            w = w * f
            idx = idx * shape[d] + np.minimum(base[d] + corner[d], shape[d] - 1)
        rows.append(np.arange(n))
        cols.append(idx)
        vals.append(w)
    from scipy import sparse
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, int(np.prod(shape))))


@dataclasses.dataclass
class LevelReport:
    level: int
    shape: tuple
    bins: int
    iterations: int
    loss_trace: list
    converged: bool
    message: str


@dataclasses.dataclass
class RegistrationResult:
    field: DisplacementField
    levels: list
    initial_loss: float
    final_loss: float
    seconds: float

    def to_json(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "levels": [dataclasses.asdict(lv) for lv in self.levels],
        }


class _LevelProblem:
    """Loss on a control grid: samples at full resolution, field interpolated from the grid."""

    def __init__(self, moving, target, support, spacing, shape, bins, cfg):
        self.moving = moving
        self.spacing = np.asarray(spacing, dtype=np.float64)
        self.shape = tuple(shape)
        self.grid_spacing = _level_spacing(spacing, moving.shape, shape)
        self.points = np.argwhere(support).T.astype(np.float64)
        self.target_values = target[support]
        self.bins = bins
        self.weight = cfg.bending_weight
        self.W = grid_interpolator(self.points, moving.shape, shape)
        self.WT = self.W.T.tocsr()
        self.sigma = [cfg.field_smoothing_sigma / s for s in self.grid_spacing]
        self.smoothing = cfg.field_smoothing_sigma > 0
        # grid corners sit in no interior bending stencil; without samples they get no gradient
        touched = np.asarray(abs(self.W).sum(axis=0)).ravel().reshape(self.shape) > 0
        self.free_corners = [c for c in _grid_corners(self.shape) if not touched[c]]

    def fill_corners(self, grid):
        """Set untouched corner nodes by trilinear extrapolation (exact for affine fields).

        The loss does not see these nodes, but a finer level or the dense field
        does; left at their initial value they become kinks after upsampling.
        """
        grid = grid.copy()
        for corner in self.free_corners:
            inward = [1 if c == 0 else -1 for c in corner]
            value = np.zeros(3)
            for bits in _CORNERS[1:]:
                node = tuple(c + b * d for c, b, d in zip(corner, bits, inward))
                value += (-1) ** (sum(bits) + 1) * grid[node]
            grid[corner] = value
        return grid

    def smooth(self, field):
        if not self.smoothing:
            return field
        out = np.empty_like(field)
        for c in range(3):
            out[..., c] = ndimage.gaussian_filter(field[..., c], self.sigma, mode="constant")
        return out

    def loss(self, grid, gradient=False):
        flat = grid.reshape(-1, 3)
        u = self.W @ flat
        coords = self.points + (u / self.spacing).T
        if not gradient:
            warped = trilinear_sample(self.moving, coords)
            mi = mutual_information_values(warped, self.target_values, self.bins)
            be = bending_energy_array(grid, self.grid_spacing) if self.weight else 0.0
            return -mi + self.weight * be
        warped, dwarp = trilinear_sample(self.moving, coords, gradient=True)
        mi, dmi = mutual_information_grad(warped, self.target_values, self.bins)
        g_points = -(dmi[None, :] * dwarp / self.spacing[:, None]).T
        grad = (self.WT @ g_points).reshape(grid.shape)
        loss = -mi
        if self.weight:
            be, dbe = bending_energy_array(grid, self.grid_spacing, gradient=True)
            loss += self.weight * be
            grad += self.weight * dbe
        return loss, grad


def _grid_corners(shape):
    return [tuple(0 if b == 0 else n - 1 for b, n in zip(bits, shape)) for bits in _CORNERS]


def _optimize_level(problem: _LevelProblem, init, cfg, level):
    shape = init.shape

    def fun(theta):
        grid = init + problem.smooth(theta.reshape(shape))
        loss, grad = problem.loss(grid, gradient=True)
        return loss, problem.smooth(grad).ravel()

    trace = [problem.loss(init)]
    if not np.isfinite(trace[0]):
        raise RegistrationError(f"non-finite initial loss at level {level}")

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    res = optimize.minimize(fun, np.zeros(init.size), jac=True, method="L-BFGS-B",
                            callback=record,
                            options={"maxiter": cfg.max_iterations, "ftol": cfg.convergence_tol,
                                     "gtol": 0.0, "maxcor": 10})
    grid = init + problem.smooth(res.x.reshape(shape))
    final = problem.loss(grid)
    if final > trace[0]:
        # never hand back a field worse than the starting point
        grid, final = init, trace[0]
    grid = problem.fill_corners(grid)
    report = LevelReport(level=level, shape=tuple(shape[:3]), bins=problem.bins,
                         iterations=int(res.nit), loss_trace=trace, converged=bool(res.success),
                         message=str(res.message))
    return grid, report


def register_arrays(moving, target, support, spacing, cfg: RegistrationConfig):
    """Coarse-to-fine registration on raw arrays.

    Returns ``(vectors, level reports, initial loss, final loss)``; both losses
    are the finest-level objective, at the zero field and at the result.

    Level ``l`` optimizes a displacement grid downsampled by ``2**l`` against
    images blurred by ``2**(l-1)`` voxels, always sampling the full-resolution
    support so the joint histogram keeps every sample.
    """
    moving = np.asarray(moving, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    support = np.asarray(support, dtype=bool)
    if moving.shape != target.shape or support.shape != moving.shape:
        raise ValueError("moving, target and support must share a shape")
    if not support.any():
        raise ValueError("registration support is empty")
    dims = moving.shape
    shapes = _pyramid_shapes(dims, cfg.pyramid_levels + cfg.grid_coarsening)[cfg.grid_coarsening:]
    grid = None
    reports = []
    for level in reversed(range(cfg.pyramid_levels)):
        shape = shapes[level]
        if level:
            blur = 2.0 ** (level - 1)
            mov_l = ndimage.gaussian_filter(moving, blur)
            tgt_l = ndimage.gaussian_filter(target, blur)
        else:
            mov_l, tgt_l = moving, target
        problem = _LevelProblem(mov_l, tgt_l, support, spacing, shape,
                                cfg.bins_at_level(level), cfg)
        init = np.zeros(shape + (3,)) if grid is None else _resize_field(grid, shape)
        grid, report = _optimize_level(problem, init, cfg, level)
        logger.info("level %d %s: loss %.5f -> %.5f in %d iterations", level, shape,
                    report.loss_trace[0], report.loss_trace[-1], report.iterations)
        reports.append(report)
    # the finest level is the objective that counts: never end worse than no motion
    zero = np.zeros_like(grid)
    initial, final = problem.loss(zero), problem.loss(grid)
    if final > initial:
        logger.info("registration did not beat the zero field (%.5f > %.5f)", final, initial)
        grid, final = zero, initial
    vectors = _resize_field(grid, dims) if grid.shape[:3] != dims else grid
    return vectors, reports, initial, final


def register_pair(moving: LabeledVolume, target: LabeledVolume,
                  cfg: Optional[RegistrationConfig] = None, support=None) -> RegistrationResult:
    """Register ``moving`` onto ``target``; the field lives on the target grid.

    ``support`` defaults to the union of the two images' wall bands (dilated
    segmentation contours) when both carry segmentations, else to the union of
    their nonzero voxels.
    """
    from .volume import contour_mask

    cfg = cfg or RegistrationConfig()
    if moving.dims != target.dims:
        raise ValueError(f"image dims differ: {moving.dims} vs {target.dims}")
    if support is None:
        if moving.segmentation is not None and target.segmentation is not None:
            support = contour_mask(moving.segmentation, cfg.mask_radius) | \
                contour_mask(target.segmentation, cfg.mask_radius)
        else:
            support = (moving.intensities > 0) | (target.intensities > 0)
    start = time.perf_counter()
    vectors, reports, initial, final = register_arrays(moving.intensities, target.intensities,
                                                       support, target.spacing, cfg)
    field = DisplacementField(vectors, target.spacing, target.phase_index, moving.phase_index)
    return RegistrationResult(field=field, levels=reports,
                              initial_loss=initial, final_loss=final,
                              seconds=time.perf_counter() - start)


def register_series(series: PhaseSeries, cfg: Optional[RegistrationConfig] = None,
                    masked: bool = True) -> List[RegistrationResult]:
    """One field per phase, each anchored on the reference grid.

    Phase ``t`` is registered as the moving image onto the reference phase, so
    ``x + u_t(x)`` is the phase-``t`` position of the reference point ``x``.
    With ``masked=True`` each image is first restricted to its own wall band.
    The reference phase gets the zero field.
    """
    from .volume import contour_mask, mask_image

    cfg = cfg or RegistrationConfig()
    ref_idx = series.reference_index
    ref = series.reference
    if masked:
        ref = mask_image(ref, contour_mask(ref.segmentation, cfg.mask_radius))
    results = []
    for t, vol in enumerate(series.phases):
        if t == ref_idx:
            zero = DisplacementField.zeros(series.dims, series.spacing, ref_idx, t)
            results.append(RegistrationResult(zero, [], 0.0, 0.0, 0.0))
            continue
        if masked:
            vol = mask_image(vol, contour_mask(vol.segmentation, cfg.mask_radius))
        res = register_pair(vol.replace(phase_index=t), ref.replace(phase_index=ref_idx), cfg)
        logger.info("phase %d registered in %.1fs (loss %.4f -> %.4f)", t, res.seconds,
                    res.initial_loss, res.final_loss)
        results.append(res)
    return results
