"""Population atlas: unbiased common space, per-vertex statistics, Mahalanobis maps.

Every subject's reference-phase segmentation is registered to one reference
subject with an affine stage followed by a stationary-velocity-field stage.
A transform ``T_i`` maps reference-grid points (mm) to subject points

    T_i(x) = c_s + A (phi(x) - c_r),   phi = exp(v),

so the subject image pulled back through ``T_i`` matches the reference. The
mean of the inverse displacement fields gives ``W = id + mean(T_i^-1 - id)``,
and ``M_i = T_i o W`` carries atlas points into subject ``i``.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize
from scipy.spatial import cKDTree

from .biomarkers import dice
from .registration import DisplacementField, grid_points, sample_field, trilinear_sample
from .surface import StrainField, SurfaceMesh, mesh_from_segmentation, vertex_adjacency
from .volume import segmentation_centroid

logger = logging.getLogger(__name__)

BIOMARKERS = ("dvf_magnitude", "lambda1", "lambda2")
SQUARING_STEPS = 6
DISTANCE_CAP_MM = 2.0
CV_EPS = 1e-3
COV_REL_REG = 1e-6
COV_ABS_FLOOR = 1e-12


class AtlasRegistrationError(RuntimeError):
    pass


class InversionError(RuntimeError):
    pass


# -- velocity fields ----------------------------------------------------------

def compose_displacements(u, w, spacing):
    """Displacement of ``(id + u) o (id + w)``: ``w(x) + u(x + w(x))``."""
    pts = grid_points(u.shape[:3], spacing) + w
    return w + sample_field(u, pts, spacing, mode="edge")


def exp_velocity(v, spacing, steps=SQUARING_STEPS):
    """Displacement of ``exp(v)`` by scaling and squaring."""
    u = np.asarray(v, dtype=np.float64) / 2.0 ** steps
    for _ in range(steps):
        u = compose_displacements(u, u, spacing)
    return u


def invert_displacement(u, spacing, init=None, iterations=30):
    """Fixed-point inverse ``w = -u(x + w)`` of ``id + u``; returns (w, rms residual mm)."""
    w = -u if init is None else init.copy()
    grid = grid_points(u.shape[:3], spacing)
    for _ in range(iterations):
        w = -sample_field(u, grid + w, spacing, mode="edge")
    resid = w + sample_field(u, grid + w, spacing, mode="edge")
    return w, float(np.sqrt(np.mean(np.sum(resid * resid, axis=-1))))


def inverse_consistency_rms(u, w, spacing):
    """RMS of ``(id+u)((id+w)(x)) - x`` in voxels (mean spacing)."""
    grid = grid_points(u.shape[:3], spacing)
    r = w + sample_field(u, grid + w, spacing, mode="edge")
    return float(np.sqrt(np.mean(np.sum(r * r, axis=-1)))) / float(np.mean(spacing))


# -- transforms ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SubjectTransform:
    """Reference-to-subject map ``T(x) = affine(x + u(x))``.

    ``affine`` is a 4x4 homogeneous matrix in mm, ``nonrigid`` holds
    ``u = exp(v) - id`` on the reference grid and ``velocity`` the field ``v``.
    """

    affine: np.ndarray
    nonrigid: DisplacementField
    velocity: Optional[np.ndarray] = None
    subject_id: str = ""
    dice: float = float("nan")

    def __post_init__(self):
        A = np.asarray(self.affine, dtype=np.float64)
        if A.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(A[:3, :3])) <= 1e-9:
            raise ValueError("affine is singular")
        object.__setattr__(self, "affine", A)

    @property
    def spacing(self):
        return self.nonrigid.spacing

    def apply_affine(self, x):
        return x @ self.affine[:3, :3].T + self.affine[:3, 3]

    def __call__(self, x):
        """Map reference points (..., 3) mm to subject space."""
        x = np.asarray(x, dtype=np.float64)
        u = sample_field(self.nonrigid.vectors, x, self.spacing, mode="edge")
        return self.apply_affine(x + u)

    def inverse_displacement(self):
        """Grid displacement ``d`` with ``T^-1(y) = y + d(y)``, plus the residual RMS (voxels)."""
        u = self.nonrigid.vectors
        sp = self.spacing
        init = None if self.velocity is None else exp_velocity(-self.velocity, sp)
        w, _ = invert_displacement(u, sp, init=init)
        rms = inverse_consistency_rms(u, w, sp)
        grid = grid_points(u.shape[:3], sp)
        Ainv = np.linalg.inv(self.affine)
        z = grid @ Ainv[:3, :3].T + Ainv[:3, 3]
        return z + sample_field(w, z, sp, mode="edge") - grid, rms


def _affine_matrix(params, c_ref, c_sub):
    A = params[:9].reshape(3, 3)
    t = params[9:]
    M = np.eye(4)
    M[:3, :3] = A
    M[:3, 3] = c_sub + t - A @ c_ref
    return M


def _smooth_label(seg, sigma_vox):
    return ndimage.gaussian_filter(np.asarray(seg, dtype=np.float64), sigma_vox, mode="constant")


def _affine_stage(sub, ref, spacing, sigmas=(2.0, 1.0), stride=2):
    spacing = np.asarray(spacing, dtype=np.float64)
    c_ref = segmentation_centroid(ref) * spacing
    c_sub = segmentation_centroid(sub) * spacing
    scale = (sub.sum() / ref.sum()) ** (1.0 / 3.0)
    params = np.concatenate([(np.eye(3) * scale).ravel(), np.zeros(3)])
    grid = grid_points(ref.shape, spacing)[::stride, ::stride, ::stride].reshape(-1, 3)
    rel = grid - c_ref
    for sigma in sigmas:
        S = _smooth_label(sub, sigma)
        R = _smooth_label(ref, sigma)[::stride, ::stride, ::stride].ravel()

        def fun(p):
            A = p[:9].reshape(3, 3)
            y = c_sub + p[9:] + rel @ A.T
            val, grad = trilinear_sample(S, (y / spacing).T, gradient=True)
            r = val - R
            g_y = (2.0 * r / r.size)[:, None] * (grad.T / spacing)
            gA = g_y.T @ rel
            return float(np.mean(r * r)), np.concatenate([gA.ravel(), g_y.sum(axis=0)])

        res = optimize.minimize(fun, params, jac=True, method="L-BFGS-B",
                                options={"maxiter": 300, "ftol": 1e-12, "gtol": 1e-10})
        params = res.x
    return _affine_matrix(params, c_ref, c_sub)


def _svf_stage(moving, target, spacing, iterations=60, sigma_fluid=1.0, sigma_diff=1.5,
               max_step=0.5, tol=1e-5):
    """Log-domain demons on smoothed labels; returns the velocity field (mm).

    Stops once an update fails to lower the SSD by a relative ``tol`` and
    returns the best field seen.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    v = np.zeros(target.shape + (3,))
    grid = grid_points(target.shape, spacing)
    step_mm = max_step * float(spacing.min())
    best_v, best = v, np.inf
    for it in range(iterations):
        u = exp_velocity(v, spacing)
        val, grad = trilinear_sample(moving, ((grid + u) / spacing).transpose(3, 0, 1, 2),
                                     gradient=True)
        grad = np.moveaxis(grad, 0, -1) / spacing
        diff = val - target
        ssd = float(np.mean(diff * diff))
        if ssd >= best * (1.0 - tol):
            # the last update did not pay off: keep the best field seen
            break
        best_v, best = v, ssd
        denom = np.sum(grad * grad, axis=-1) + diff * diff / step_mm ** 2
        upd = np.where(denom[..., None] > 1e-12, -diff[..., None] * grad / np.maximum(denom, 1e-12)[..., None], 0.0)
        for c in range(3):
            upd[..., c] = ndimage.gaussian_filter(upd[..., c], sigma_fluid, mode="constant")
        v = v + upd
        for c in range(3):
            v[..., c] = ndimage.gaussian_filter(v[..., c], sigma_diff, mode="constant")
    else:
        u = exp_velocity(v, spacing)
        val = trilinear_sample(moving, ((grid + u) / spacing).transpose(3, 0, 1, 2))
        if float(np.mean((val - target) ** 2)) < best:
            best_v = v
    return best_v


def register_to_reference(subject_seg, reference_seg, spacing=(1.0, 1.0, 1.0),
                          subject_id: str = "", svf_iterations: int = 60) -> SubjectTransform:
    """Affine then diffeomorphic registration of two binary segmentations.

    The returned transform maps reference points to subject points; pulling the
    subject back through it reproduces the reference.
    """
    sub = np.asarray(subject_seg, dtype=bool)
    ref = np.asarray(reference_seg, dtype=bool)
    if not sub.any() or not ref.any():
        raise ValueError("both segmentations must be nonempty")
    if sub.shape != ref.shape:
        raise ValueError("segmentations must share a grid")
    spacing = tuple(float(s) for s in spacing)
    sp = np.asarray(spacing)
    M = _affine_stage(sub, ref, spacing)
    grid = grid_points(ref.shape, sp)
    # subject resampled through the affine, on the reference grid
    aff_pts = grid @ M[:3, :3].T + M[:3, 3]
    moved = trilinear_sample(_smooth_label(sub, 1.0), (aff_pts / sp).transpose(3, 0, 1, 2))
    v = _svf_stage(moved, _smooth_label(ref, 1.0), spacing, iterations=svf_iterations)
    u = exp_velocity(v, spacing)
    T = SubjectTransform(M, DisplacementField(u, spacing), v, subject_id)
    warped = pull_back(sub, T) > 0.5
    score = dice(warped, ref)
    logger.info("subject %s registered: dice %.4f", subject_id, score)
    if score < 0.7:
        raise AtlasRegistrationError(f"subject {subject_id!r}: dice {score:.3f} after registration")
    return dataclasses.replace(T, dice=score)


def pull_back(image, transform, spacing=None, order=1, points=None):
    """Sample ``image`` (subject grid) at ``transform(points)``; default points = the grid."""
    sp = np.asarray(transform.spacing if spacing is None else spacing, dtype=np.float64)
    if points is None:
        points = grid_points(np.asarray(image).shape, sp)
    y = transform(points)
    return ndimage.map_coordinates(np.asarray(image, dtype=np.float64),
                                   np.moveaxis(y / sp, -1, 0), order=order, mode="constant")


def average_inverse(transforms: Sequence[SubjectTransform], tol_vox: float = 0.5) -> DisplacementField:
    """Mean of the inverse displacement fields ``T_i^-1 - id``."""
    if not transforms:
        raise ValueError("no transforms to average")
    total = None
    for T in transforms:
        d, rms = T.inverse_displacement()
        if rms > tol_vox:
            raise InversionError(f"subject {T.subject_id!r}: inverse residual {rms:.3f} voxel RMS")
        total = d if total is None else total + d
    mean = total / len(transforms)
    return DisplacementField(mean, transforms[0].spacing)


@dataclasses.dataclass(frozen=True)
class AtlasMap:
    """Atlas-to-subject map ``M = T o W`` with ``W = id + w``."""

    transform: SubjectTransform
    mean_inverse: DisplacementField

    def __call__(self, y):
        y = np.asarray(y, dtype=np.float64)
        w = sample_field(self.mean_inverse.vectors, y, self.mean_inverse.spacing, mode="edge")
        return self.transform(y + w)

    def jacobian(self, y, h=None):
        """Central-difference Jacobian (..., 3, 3) of the map at points ``y``."""
        h = 0.5 * float(np.min(self.mean_inverse.spacing)) if h is None else h
        y = np.asarray(y, dtype=np.float64)
        cols = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            cols.append((self(y + e) - self(y - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def inverse(self, p, iterations=50, tol=1e-8):
        """Atlas points mapping to subject points ``p`` (Newton on the map)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        A = self.transform.affine
        y = (p - A[:3, 3]) @ np.linalg.inv(A[:3, :3]).T
        for _ in range(iterations):
            r = self(y) - p
            if np.max(np.abs(r)) < tol:
                break
            J = self.jacobian(y)
            y = y - np.linalg.solve(J, r[..., None])[..., 0]
        return y


# -- per-vertex transfer --------------------------------------------------------

def closest_points_on_mesh(vertices, triangles, queries, k=8):
    """Nearest surface point for each query: (triangle index, barycentric (3,), distance)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    tree = cKDTree(vertices)
    _, near = tree.query(queries, k=min(k, len(vertices)))
    near = near.reshape(len(queries), -1)
    incident = [[] for _ in range(len(vertices))]
    for f, tri in enumerate(triangles):
        for v in tri:
            incident[v].append(f)
    best_d = np.full(len(queries), np.inf)
    best_f = np.zeros(len(queries), dtype=np.int64)
    best_b = np.zeros((len(queries), 3))
    for q in range(len(queries)):
        cand = np.unique(np.concatenate([incident[v] for v in near[q]]).astype(np.int64))
        tri = vertices[triangles[cand]]
        pts, bary = _closest_on_triangles(queries[q], tri)
        d = np.linalg.norm(pts - queries[q], axis=1)
        j = int(np.argmin(d))
        best_d[q], best_f[q], best_b[q] = d[j], cand[j], bary[j]
    return best_f, best_b, best_d


def _closest_on_triangles(p, tri):
    """Closest points of point ``p`` on triangles (T, 3, 3) with barycentric weights."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    n = np.cross(ab, ac)
    nn = np.maximum(np.sum(n * n, axis=1), 1e-300)
    # projection onto the plane, then barycentric coordinates
    ap = p - a
    w1 = np.sum(np.cross(ap, ac) * n, axis=1) / nn
    w2 = np.sum(np.cross(ab, ap) * n, axis=1) / nn
    bary = np.stack([1 - w1 - w2, w1, w2], axis=1)
    inside = np.all(bary >= 0, axis=1)
    best = np.where(inside[:, None], a + w1[:, None] * ab + w2[:, None] * ac, np.nan)
    best_bary = bary.copy()
    if not inside.all():
        dist = np.where(inside, np.linalg.norm(best - p, axis=1), np.inf)
        for i, j in ((0, 1), (1, 2), (2, 0)):
            s, e = tri[:, i], tri[:, j]
            d = e - s
            t = np.clip(np.sum((p - s) * d, axis=1) / np.maximum(np.sum(d * d, axis=1), 1e-300), 0, 1)
            q = s + t[:, None] * d
            dq = np.linalg.norm(q - p, axis=1)
            better = dq < dist
            dist = np.where(better, dq, dist)
            best[better] = q[better]
            bb = np.zeros((len(tri), 3))
            bb[:, i] = 1 - t
            bb[:, j] = t
            best_bary[better] = bb[better]
    return best, best_bary


def vertex_values_from_cells(mesh: SurfaceMesh, cell_values):
    """Area-weighted average of per-cell values onto vertices (first axis = cells)."""
    cell_values = np.asarray(cell_values, dtype=np.float64)
    w = mesh.triangle_areas()
    acc = np.zeros((len(mesh.vertices),) + cell_values.shape[1:])
    wsum = np.zeros(len(mesh.vertices))
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], cell_values * w.reshape((-1,) + (1,) * (cell_values.ndim - 1)))
        np.add.at(wsum, mesh.triangles[:, k], w)
    return acc / wsum.reshape((-1,) + (1,) * (cell_values.ndim - 1))


@dataclasses.dataclass(frozen=True)
class AtlasSubject:
    """One population member: reference segmentation, reference mesh and strain field."""

    subject_id: str
    segmentation: np.ndarray
    spacing: tuple
    mesh: SurfaceMesh
    strain: StrainField
    landmarks: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)


def transfer_to_atlas(subject: AtlasSubject, atlas_map: AtlasMap, atlas_vertices,
                      cap_mm: float = DISTANCE_CAP_MM):
    """Per-vertex biomarkers of ``subject`` on the atlas vertices.

    Returns ``values`` (P, N, 3) in the order of :data:`BIOMARKERS`,
    ``directions`` (P, N, 2, 3) and ``valid`` (N,). Atlas vertices whose image
    under the map lies farther than ``cap_mm`` from the subject surface are
    NaN and invalid. Strain values are read from the containing cell; DVF
    magnitudes are interpolated barycentrically.
    """
    y = np.asarray(atlas_vertices, dtype=np.float64)
    p = atlas_map(y)
    faces, bary, dist = closest_points_on_mesh(subject.mesh.vertices, subject.mesh.triangles, p)
    valid = dist <= cap_mm
    st = subject.strain
    tri = subject.mesh.triangles[faces]
    mag = np.einsum("pnk,nk->pn", st.dvf_magnitude[:, tri], bary)
    lam = st.principal_values[:, faces]
    values = np.concatenate([mag[..., None], lam], axis=-1)
    # directions are tangent vectors: pull back through the inverse Jacobian
    Jinv = np.linalg.inv(atlas_map.jacobian(y))
    dirs = np.einsum("nij,pnkj->pnki", Jinv, st.principal_directions[:, faces])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    values[:, ~valid] = np.nan
    dirs[:, ~valid] = np.nan
    return values, dirs, valid


# -- statistics -----------------------------------------------------------------

def shifted_moments(samples):
    """Mean and population std over axis 0, ignoring NaN.

    The first valid sample is subtracted before averaging, so identical samples
    give a mean equal to that sample and a std of exactly zero.
    """
    x = np.asarray(samples, dtype=np.float64)
    valid = ~np.isnan(x)
    count = valid.sum(axis=0)
    first = np.argmax(valid, axis=0)
    ref = np.take_along_axis(x, first[None], axis=0)[0]
    d = np.where(valid, x - ref, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        md = d.sum(axis=0) / count
        mean = ref + md
        var = np.where(valid, (d - md) ** 2, 0.0).sum(axis=0) / count
    mean = np.where(count > 0, mean, np.nan)
    return mean, np.sqrt(var), count


def coefficient_of_variation(mean, std, eps=CV_EPS):
    """``std / mean`` where ``|mean| > eps``; returns (cv, reliable) with NaN elsewhere."""
    mean = np.asarray(mean, dtype=np.float64)
    reliable = np.abs(mean) > eps
    with np.errstate(invalid="ignore", divide="ignore"):
        cv = np.where(reliable, np.asarray(std) / np.where(reliable, mean, 1.0), np.nan)
    return cv, reliable


def covariance(samples, mean):
    """Population covariance over axis 0 of (S, ..., B) samples, NaN rows excluded."""
    x = np.asarray(samples, dtype=np.float64)
    valid = ~np.any(np.isnan(x), axis=-1)
    d = np.where(valid[..., None], x - mean, 0.0)
    count = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.einsum("s...i,s...j->...ij", d, d) / count[..., None, None]


def axial_mean(directions):
    """Sign-invariant mean of unit vectors (S, ..., 3): top eigenvector of the mean outer product."""
    x = np.asarray(directions, dtype=np.float64)
    valid = ~np.any(np.isnan(x), axis=-1)
    d = np.where(valid[..., None], x, 0.0)
    T = np.einsum("s...i,s...j->...ij", d, d)
    w, V = np.linalg.eigh(T)
    out = V[..., :, -1]
    # canonical sign: largest-magnitude component positive
    idx = np.argmax(np.abs(out), axis=-1)
    sgn = np.sign(np.take_along_axis(out, idx[..., None], axis=-1))
    out = out * np.where(sgn == 0, 1.0, sgn)
    out[~valid.any(axis=0)] = np.nan
    return out


def regularized_covariance(cov):
    """``cov + delta I`` with ``delta = max(1e-6 trace / dim, 1e-12)``."""
    cov = np.asarray(cov, dtype=np.float64)
    dim = cov.shape[-1]
    delta = np.maximum(COV_REL_REG * np.trace(cov, axis1=-2, axis2=-1) / dim, COV_ABS_FLOOR)
    return cov + delta[..., None, None] * np.eye(dim)


def mahalanobis(s, mu, cov):
    """``sqrt((s - mu)^T cov^-1 (s - mu))`` over leading axes; ``cov`` used as given."""
    d = np.asarray(s, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if d.shape[-1] == 1:
        q = d[..., 0] ** 2 / cov[..., 0, 0]
    else:
        L = np.linalg.cholesky(cov)
        z = np.linalg.solve(L, d[..., None])[..., 0]
        q = np.sum(z * z, axis=-1)
    return np.sqrt(q)


@dataclasses.dataclass(frozen=True)
class AtlasModel:
    """Consensus geometry and per-vertex, per-phase biomarker statistics.

    ``mean``/``std``/``cv`` are (P, N, B) over :data:`BIOMARKERS`,
    ``cov`` (P, N, B, B) is the joint covariance, ``directions`` (P, N, 2, 3)
    the axial mean principal directions.
    """

    consensus_seg: np.ndarray
    spacing: tuple
    mesh: SurfaceMesh
    landmarks: Dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    cv: np.ndarray
    cv_reliable: np.ndarray
    cov: np.ndarray
    directions: np.ndarray
    counts: np.ndarray
    n_subjects: int
    subject_ids: tuple = ()
    biomarkers: tuple = BIOMARKERS

    @property
    def n_phases(self) -> int:
        return self.mean.shape[0]


def consensus(masks, fraction=0.5):
    """Voxels where at least ``ceil(fraction * n)`` masks agree."""
    masks = np.asarray(masks, dtype=bool)
    n = len(masks)
    need = int(np.ceil(fraction * n - 1e-12))
    return masks.sum(axis=0) >= need


@dataclasses.dataclass
class AtlasBuild:
    """Atlas plus the per-subject maps used to build it."""

    atlas: AtlasModel
    maps: Dict[str, AtlasMap]
    transforms: Dict[str, SubjectTransform]


def build_atlas(subjects: Sequence[AtlasSubject], reference_index: int = 0,
                exclude_failed: bool = False, smoothing_iterations: int = 20,
                cap_mm: float = DISTANCE_CAP_MM) -> AtlasBuild:
    """Register, average, vote and aggregate a population into an atlas."""
    if len(subjects) < 2:
        raise ValueError("an atlas needs at least two subjects")
    P = subjects[0].strain.n_phases
    if any(s.strain.n_phases != P for s in subjects):
        raise ValueError("all subjects must share the phase count")
    ids = [s.subject_id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    ref = subjects[reference_index]
    spacing = tuple(float(x) for x in ref.spacing)
    transforms = {}
    kept = []
    for s in subjects:
        try:
            transforms[s.subject_id] = register_to_reference(s.segmentation, ref.segmentation,
                                                             spacing, s.subject_id)
            kept.append(s)
        except AtlasRegistrationError as err:
            logger.error("%s", err)
            if not exclude_failed:
                raise
    if len(kept) < 2:
        raise AtlasRegistrationError("fewer than two subjects registered")
    W = average_inverse([transforms[s.subject_id] for s in kept])
    maps = {s.subject_id: AtlasMap(transforms[s.subject_id], W) for s in kept}
    grid = grid_points(ref.segmentation.shape, spacing)
    votes = [pull_back(s.segmentation, maps[s.subject_id].transform, spacing, order=1,
                       points=grid + W.vectors) > 0.5 for s in kept]
    cons = consensus(votes)
    mesh = mesh_from_segmentation(cons, spacing, smoothing_iterations)
    values, dirs = [], []
    for s in kept:
        val, d, valid = transfer_to_atlas(s, maps[s.subject_id], mesh.vertices, cap_mm)
        if not valid.all():
            logger.info("subject %s: %d atlas vertices beyond the %.1f mm cap",
                        s.subject_id, int((~valid).sum()), cap_mm)
        values.append(val)
        dirs.append(d)
    values = np.stack(values)
    dirs = np.stack(dirs)
    mean, std, count = shifted_moments(values)
    cv, reliable = coefficient_of_variation(mean, std)
    cov = covariance(values, mean)
    directions = np.stack([axial_mean(dirs[:, :, :, k]) for k in range(2)], axis=2)
    landmarks = _average_landmarks(kept, maps)
    atlas = AtlasModel(cons, spacing, mesh, landmarks, mean, std, cv, reliable, cov, directions,
                       count[..., 0], len(kept), tuple(s.subject_id for s in kept))
    return AtlasBuild(atlas, maps, transforms)


def _average_landmarks(subjects, maps):
    names = set()
    for s in subjects:
        names.update(s.landmarks)
    out = {}
    for name in sorted(names):
        pts = [maps[s.subject_id].inverse(np.asarray(s.landmarks[name], dtype=np.float64))[0]
               for s in subjects if name in s.landmarks]
        out[name] = np.mean(pts, axis=0)
    return out


def mahalanobis_map(atlas: AtlasModel, subject_values, biomarkers: Optional[Sequence[str]] = None):
    """Per-vertex, per-phase MD of subject values (P, N, B) in atlas space.

    The atlas covariance is regularized before inversion; vertices where the
    subject or the atlas has no value are NaN.
    """
    idx = list(range(len(atlas.biomarkers))) if biomarkers is None else \
        [atlas.biomarkers.index(b) for b in biomarkers]
    s = np.asarray(subject_values, dtype=np.float64)[..., idx]
    mu = atlas.mean[..., idx]
    cov = atlas.cov[..., idx, :][..., idx]
    bad = np.any(np.isnan(s), axis=-1) | np.any(np.isnan(mu), axis=-1) | \
        np.any(np.isnan(cov), axis=(-2, -1))
    cov = np.where(bad[..., None, None], np.eye(len(idx)), cov)
    reg = regularized_covariance(cov)
    try:
        np.linalg.cholesky(reg)
    except np.linalg.LinAlgError as err:
        raise FloatingPointError("regularized covariance is not positive definite") from err
    md = mahalanobis(np.where(bad[..., None], 0.0, s), np.where(bad[..., None], 0.0, mu), reg)
    return np.where(bad, np.nan, md)


def map_subject(atlas_build: AtlasBuild, subject: AtlasSubject, cap_mm: float = DISTANCE_CAP_MM):
    """Biomarkers of a population member resampled to the atlas vertices."""
    values, _, _ = transfer_to_atlas(subject, atlas_build.maps[subject.subject_id],
                                     atlas_build.atlas.mesh.vertices, cap_mm)
    return values


def register_new_subject(atlas: AtlasModel, subject: AtlasSubject) -> AtlasMap:
    """Map for a subject outside the population: registered straight to the consensus."""
    T = register_to_reference(subject.segmentation, atlas.consensus_seg, atlas.spacing,
                              subject.subject_id)
    zero = DisplacementField.zeros(atlas.consensus_seg.shape, atlas.spacing)
    return AtlasMap(T, zero)
