"""Reference-phase surface meshes and per-triangle Green-Lagrange membrane strains.

The wall is treated as an infinitely thin surface. For each triangle the
strain is built from convected covariant bases in the reference and deformed
configurations, compared through their metric tensors, and pushed to a
Cartesian frame with the reference contravariant basis.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import ndimage, sparse
from skimage import measure

from .registration import DisplacementField, trilinear_sample

logger = logging.getLogger(__name__)

NORMAL_EIGEN_TOL = 1e-8


class TopologyError(ValueError):
    pass


class DegenerateCellError(ValueError):
    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = tuple(int(c) for c in np.atleast_1d(cells))


class InconsistentTensorError(ValueError):
    pass


class OutOfDomainError(ValueError):
    pass


@dataclasses.dataclass
class SurfaceMesh:
    """Closed triangulated surface (mm) with optional per-phase vertex positions."""

    vertices: np.ndarray
    triangles: np.ndarray
    per_phase_vertices: Optional[np.ndarray] = None
    landmarks: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.per_phase_vertices is not None:
            self.per_phase_vertices = np.asarray(self.per_phase_vertices, dtype=np.float64)

    @property
    def n_phases(self) -> int:
        return 0 if self.per_phase_vertices is None else len(self.per_phase_vertices)

    def triangle_areas(self, vertices=None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        p = v[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def triangle_normals(self, vertices=None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        p = v[self.triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def centroids(self, vertices=None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        return v[self.triangles].mean(axis=1)

    def area(self, vertices=None) -> float:
        return float(self.triangle_areas(vertices).sum())

    def volume(self, vertices=None) -> float:
        """Signed enclosed volume (positive for outward-facing triangles)."""
        v = self.vertices if vertices is None else vertices
        p = v[self.triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


@dataclasses.dataclass
class StrainField:
    """Per-phase, per-triangle strains plus per-vertex displacement magnitudes.

    Attributes
    ----------
    tensors : (P, M, 3, 3) Cartesian Green-Lagrange tensors, reference frame
    principal_values : (P, M, 2) in-surface eigenvalues, descending
    principal_directions : (P, M, 2, 3) matching unit tangent eigenvectors
    normal_eigenvalues : (P, M) discarded eigenvalue along the surface normal
    dvf_magnitude : (P, N) displacement magnitude at each reference vertex (mm)
    """

    tensors: np.ndarray
    principal_values: np.ndarray
    principal_directions: np.ndarray
    normal_eigenvalues: np.ndarray
    dvf_magnitude: np.ndarray

    @property
    def n_phases(self) -> int:
        return self.principal_values.shape[0]


# ---------------------------------------------------------------------------
# mesh construction

def _edges(triangles):
    return np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])


def check_closed_manifold(triangles) -> bool:
    """True when every edge borders exactly two triangles with opposite orientation."""
    directed = _edges(np.asarray(triangles))
    if len(np.unique(directed, axis=0)) != len(directed):
        return False
    reverse = directed[:, ::-1]
    keys = lambda e: e[:, 0] * (directed.max() + 1) + e[:, 1]
    return bool(np.isin(keys(reverse), keys(directed)).all())


def vertex_adjacency(n_vertices, triangles):
    e = _edges(triangles)
    e = np.concatenate([e, e[:, ::-1]])
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_vertices, n_vertices))
    adj = adj.tocsr()
    adj.data[:] = 1.0
    return adj


def taubin_smooth(vertices, triangles, iterations=20, lam=0.5, mu=-0.53):
    """Taubin lambda/mu smoothing with uniform umbrella weights."""
    v = np.asarray(vertices, dtype=np.float64).copy()
    adj = vertex_adjacency(len(v), triangles)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    walk = sparse.diags(1.0 / np.maximum(deg, 1)) @ adj
    for _ in range(iterations):
        v += lam * (walk @ v - v)
        v += mu * (walk @ v - v)
    return v


def mesh_from_segmentation(seg, spacing=(1.0, 1.0, 1.0), smoothing_iterations=20) -> SurfaceMesh:
    """Marching cubes at level 0.5 on a single-component mask, then Taubin smoothing."""
    seg = np.asarray(seg, dtype=bool)
    if not seg.any():
        raise TopologyError("segmentation is empty")
    _, n_comp = ndimage.label(seg)
    if n_comp != 1:
        raise TopologyError(f"segmentation has {n_comp} connected components, expected 1")
    padded = np.pad(seg, 1).astype(np.float32)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, spacing=tuple(spacing),
                                                allow_degenerate=False)
    verts = verts.astype(np.float64) - np.asarray(spacing)
    faces = faces.astype(np.int64)
    mesh = SurfaceMesh(verts, faces)
    if mesh.volume() < 0:
        mesh.triangles = mesh.triangles[:, ::-1].copy()
    if not check_closed_manifold(mesh.triangles):
        raise TopologyError("marching cubes surface is not a closed 2-manifold")
    if smoothing_iterations:
        mesh.vertices = taubin_smooth(mesh.vertices, mesh.triangles, smoothing_iterations)
    areas = mesh.triangle_areas()
    bad = np.flatnonzero(areas <= 1e-9)
    if bad.size:
        raise DegenerateCellError(f"{bad.size} degenerate triangles after smoothing", bad)
    return mesh


def propagate_mesh(mesh: SurfaceMesh, dvfs: Sequence[DisplacementField]) -> SurfaceMesh:
    """Move the reference vertices through each phase's field (trilinear sampling)."""
    positions = []
    for t, dvf in enumerate(dvfs):
        coords = (mesh.vertices / np.asarray(dvf.spacing)).T
        upper = np.asarray(dvf.dims)[:, None] - 1
        outside = np.any((coords < 0) | (coords > upper), axis=0)
        if outside.any():
            raise OutOfDomainError(
                f"{int(outside.sum())} vertices fall outside the field domain (phase {t})")
        disp = np.stack([trilinear_sample(dvf.vectors[..., c], coords) for c in range(3)], axis=1)
        positions.append(mesh.vertices + disp)
    return dataclasses.replace(mesh, per_phase_vertices=np.stack(positions))


# ---------------------------------------------------------------------------
# per-cell strain

def covariant_basis(x0, x1, x2, edge_lengths=None):
    """Column-stacked basis ``[g1, g2, g3]`` of a triangle.

    ``g1`` and ``g2`` are the edges from ``x0`` divided by ``edge_lengths``
    (defaults to their own lengths, i.e. unit edges). ``g3`` is the unit
    normal ``g1 x g2 / |g1 x g2|``. Works on single triangles (3,) or stacks (M, 3).
    """
    x0, x1, x2 = (np.asarray(x, dtype=np.float64) for x in (x0, x1, x2))
    d1, d2 = x1 - x0, x2 - x0
    if edge_lengths is None:
        l1 = np.linalg.norm(d1, axis=-1)
        l2 = np.linalg.norm(d2, axis=-1)
    else:
        l1, l2 = (np.asarray(v, dtype=np.float64) for v in edge_lengths)
    g1 = d1 / np.expand_dims(l1, -1)
    g2 = d2 / np.expand_dims(l2, -1)
    n = np.cross(g1, g2)
    nn = np.linalg.norm(n, axis=-1)
    if np.any(nn <= 1e-12):
        bad = np.flatnonzero(np.atleast_1d(nn <= 1e-12))
        raise DegenerateCellError("collinear triangle vertices", bad)
    g3 = n / np.expand_dims(nn, -1)
    return np.stack([g1, g2, g3], axis=-1)


def cell_metric_tensor(x0, x1, x2, edge_lengths=None):
    """Metric ``g = v^T v`` of the covariant basis ``v`` (see :func:`covariant_basis`)."""
    v = covariant_basis(x0, x1, x2, edge_lengths)
    return np.swapaxes(v, -1, -2) @ v


def green_lagrange_cell(G_ref, g_def):
    """Covariant Green-Lagrange components ``E_ij = (g_ij - G_ij) / 2``."""
    return 0.5 * (np.asarray(g_def) - np.asarray(G_ref))


def orthonormal_frame(basis):
    """Gram-Schmidt frame ``(e1, e2, e3)`` from a covariant basis, column-stacked."""
    g1, g2 = basis[..., :, 0], basis[..., :, 1]
    e1 = g1 / np.linalg.norm(g1, axis=-1, keepdims=True)
    r = g2 - np.sum(g2 * e1, axis=-1, keepdims=True) * e1
    e2 = r / np.linalg.norm(r, axis=-1, keepdims=True)
    e3 = np.cross(e1, e2)
    e3 = e3 / np.linalg.norm(e3, axis=-1, keepdims=True)
    return np.stack([e1, e2, e3], axis=-1)


def covariant_to_cartesian(E_cov, basis, local=False):
    """Rewrite covariant strain components in Cartesian form.

    ``E_kl = E_ij (e_k . G^i)(G^j . e_l)`` with the contravariant basis
    ``G^i`` taken as the columns of ``inv(basis)^T``. Returns the tensor in the
    triangle frame ``(e1, e2, e3)`` when ``local`` is True, otherwise rotated
    back to global axes.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if np.any(np.abs(np.linalg.det(basis)) <= 1e-12):
        raise DegenerateCellError("singular covariant basis")
    contra = np.swapaxes(np.linalg.inv(basis), -1, -2)
    frame = orthonormal_frame(basis)
    # Q[k, i] = e_k . G^i
    Q = np.swapaxes(frame, -1, -2) @ contra
    E_local = Q @ np.asarray(E_cov) @ np.swapaxes(Q, -1, -2)
    E_local = 0.5 * (E_local + np.swapaxes(E_local, -1, -2))
    if local:
        return E_local
    E = frame @ E_local @ np.swapaxes(frame, -1, -2)
    return 0.5 * (E + np.swapaxes(E, -1, -2))


def _tangent_basis(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    helper = np.zeros_like(n)
    ax = np.argmin(np.abs(n), axis=-1)
    np.put_along_axis(helper, np.expand_dims(ax, -1), 1.0, axis=-1)
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return n, t1, t2


def _canonical_sign(v):
    # flip so the largest-magnitude component is positive
    idx = np.argmax(np.abs(v), axis=-1)
    s = np.sign(np.take_along_axis(v, np.expand_dims(idx, -1), axis=-1))
    s[s == 0] = 1.0
    return v * s


def principal_strains_batch(E, normals, tol=NORMAL_EIGEN_TOL, check=True):
    """Vectorized :func:`principal_strains` over stacks (M, 3, 3) and (M, 3).

    Returns values (M, 2), directions (M, 2, 3) and the discarded normal
    eigenvalue (M,).
    """
    E = np.asarray(E, dtype=np.float64)
    n, t1, t2 = _tangent_basis(normals)
    w_full, v_full = np.linalg.eigh(E)
    cos = np.abs(np.einsum("mij,mi->mj", v_full, n))
    k = np.argmax(cos, axis=-1)
    normal_eig = np.take_along_axis(w_full, k[:, None], axis=-1)[:, 0]
    if check:
        bad = np.flatnonzero(np.abs(normal_eig) > tol)
        if bad.size:
            raise InconsistentTensorError(
                f"normal-direction eigenvalue {normal_eig[bad[0]]:.3e} exceeds {tol:g} "
                f"at cell {bad[0]}")
    T = np.stack([t1, t2], axis=-1)
    E2 = np.swapaxes(T, -1, -2) @ E @ T
    w2, v2 = np.linalg.eigh(E2)
    values = w2[:, ::-1]
    dirs = np.einsum("mij,mjk->mik", T, v2[:, :, ::-1])
    dirs = _canonical_sign(np.swapaxes(dirs, -1, -2))
    return values, dirs, normal_eig


def principal_strains(E, surface_normal, tol=NORMAL_EIGEN_TOL):
    """In-surface principal strains of one Cartesian tensor.

    Returns ``(lambda1, lambda2, v1, v2)`` with ``lambda1 >= lambda2`` and unit
    tangent directions. The eigenvalue whose eigenvector is most parallel to
    the normal must vanish within ``tol``.
    """
    values, dirs, _ = principal_strains_batch(np.asarray(E)[None], np.asarray(surface_normal)[None],
                                              tol)
    return values[0, 0], values[0, 1], dirs[0, 0], dirs[0, 1]


def cell_strains(ref_vertices, def_vertices, triangles):
    """Cartesian Green-Lagrange tensor of every triangle, shape (M, 3, 3).

    Both configurations use edges divided by the reference edge lengths so the
    curvilinear coordinates are convected with the material.
    """
    P = ref_vertices[triangles]
    p = def_vertices[triangles]
    lengths = (np.linalg.norm(P[:, 1] - P[:, 0], axis=1), np.linalg.norm(P[:, 2] - P[:, 0], axis=1))
    try:
        V = covariant_basis(P[:, 0], P[:, 1], P[:, 2])
        v = covariant_basis(p[:, 0], p[:, 1], p[:, 2], lengths)
    except DegenerateCellError as exc:
        raise DegenerateCellError(f"degenerate triangle(s) {list(exc.cells)[:5]}", exc.cells)
    G = np.swapaxes(V, -1, -2) @ V
    g = np.swapaxes(v, -1, -2) @ v
    return covariant_to_cartesian(green_lagrange_cell(G, g), V)


def strain_series(mesh: SurfaceMesh, reference_phase: int = 0, check=True) -> StrainField:
    """Full per-phase strain pipeline on a propagated mesh."""
    if mesh.per_phase_vertices is None:
        raise ValueError("mesh has no per-phase vertex positions; call propagate_mesh first")
    ref = mesh.per_phase_vertices[reference_phase]
    normals = mesh.triangle_normals(ref)
    tensors, values, dirs, normal_eigs = [], [], [], []
    for t, verts in enumerate(mesh.per_phase_vertices):
        E = cell_strains(ref, verts, mesh.triangles)
        lam, vec, ne = principal_strains_batch(E, normals, check=check)
        tensors.append(E)
        values.append(lam)
        dirs.append(vec)
        normal_eigs.append(ne)
    mags = np.linalg.norm(mesh.per_phase_vertices - ref[None], axis=-1)
    return StrainField(np.stack(tensors), np.stack(values), np.stack(dirs),
                       np.stack(normal_eigs), mags)


def affine_reference_strain(F, normals):
    """Tangent-plane projection of ``(F^T F - I) / 2`` per cell (continuum oracle)."""
    F = np.asarray(F, dtype=np.float64)
    C = 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(3))
    n = np.asarray(normals, dtype=np.float64)
    P = np.eye(3) - n[..., :, None] * n[..., None, :]
    return P @ C @ P


def voxelize_mesh(vertices, triangles, dims, spacing):
    """Voxel centres enclosed by a closed mesh, by crossing parity along axis 2."""
    spacing = np.asarray(spacing, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    # tiny in-plane offset keeps rays off shared edges and vertices
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles)] / spacing
    tri[..., :2] -= np.array([1.3e-7, 2.9e-7])
    lo = np.ceil(tri[..., :2].min(axis=1)).astype(int)
    hi = np.floor(tri[..., :2].max(axis=1)).astype(int)
    ext = np.maximum(hi - lo + 1, 0)
    counts = np.zeros(dims, dtype=np.int64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    den = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
    for di in range(int(ext[:, 0].max(initial=0))):
        for dj in range(int(ext[:, 1].max(initial=0))):
            sel = np.flatnonzero((di < ext[:, 0]) & (dj < ext[:, 1]) & (den != 0))
            if not sel.size:
                continue
            px = (lo[sel, 0] + di).astype(np.float64)
            py = (lo[sel, 1] + dj).astype(np.float64)
            A, B, C, D = a[sel], b[sel], c[sel], den[sel]
            w0 = ((B[:, 1] - C[:, 1]) * (px - C[:, 0]) + (C[:, 0] - B[:, 0]) * (py - C[:, 1])) / D
            w1 = ((C[:, 1] - A[:, 1]) * (px - C[:, 0]) + (A[:, 0] - C[:, 0]) * (py - C[:, 1])) / D
            w2 = 1.0 - w0 - w1
            hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            if not hit.any():
                continue
            z = w0 * A[:, 2] + w1 * B[:, 2] + w2 * C[:, 2]
            i, j, z = px[hit].astype(int), py[hit].astype(int), z[hit]
            k = np.ceil(z).astype(int)
            ok = (i >= 0) & (i < dims[0]) & (j >= 0) & (j < dims[1]) & (k < dims[2])
            k = np.maximum(k, 0)
            np.add.at(counts, (i[ok], j[ok], k[ok]), 1)
    return (np.cumsum(counts, axis=2) % 2).astype(bool)
