"""Synthetic deforming ellipsoidal shells with closed-form motion.

Each phase ``t`` maps reference points ``X`` to

    phi_t(X) = c + A_t (Y - c) + tau_t,   Y = X + b_t g(X) (X - c),

where ``g`` is a Gaussian bump centred on the wall, so ``b_t`` is the extra
fractional radial stretch at the bump centre. The Jacobian is available in closed form and the inverse is found
by Newton iteration, so rasterized images, displacement fields and strains all
have exact ground truth.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .registration import DisplacementField
from .surface import StrainField, SurfaceMesh, affine_reference_strain, principal_strains_batch
from .volume import LabeledVolume, PhaseSeries


class InvalidPhantomError(ValueError):
    pass


RESERVOIR_END = 8
CONDUIT_END = 15


def cycle_profile(n_phases: int = 20) -> np.ndarray:
    """Normalized deformation amplitude per phase, peaking at the end of filling.

    Reservoir (0-8) rises quadratically to 1, conduit (9-15) drains to 0.45,
    booster (16-19) contracts linearly toward 0. For other phase counts the
    same curve is resampled over one cycle.
    """
    def amp(t):
        if t <= RESERVOIR_END:
            return (t / RESERVOIR_END) ** 2
        if t <= CONDUIT_END:
            return 0.45 + 0.55 * ((CONDUIT_END - t) / (CONDUIT_END - RESERVOIR_END)) ** 2
        return 0.45 * (19.5 - t) / 4.5

    ts = np.arange(n_phases) * 20.0 / n_phases
    out = np.array([amp(t) if t == int(t) else np.interp(t, np.arange(20), [amp(s) for s in range(20)])
                    for t in ts])
    out[0] = 0.0
    return out


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    """Ellipsoidal shell plus per-phase motion parameters.

    ``affines`` (P, 3, 3), ``translations`` (P, 3) mm and ``bump_amplitudes``
    (P,) define the phase maps; phase 0 must be the identity. Positions are mm
    with voxel ``(0, 0, 0)`` at the origin.
    """

    dims: tuple = (96, 96, 36)
    spacing: tuple = (1.72, 1.72, 2.0)
    semi_axes: tuple = (24.0, 20.0, 16.0)
    thickness: float = 3.0
    center: Optional[tuple] = None
    affines: Optional[np.ndarray] = None
    translations: Optional[np.ndarray] = None
    bump_amplitudes: Optional[np.ndarray] = None
    bump_center: Optional[tuple] = None
    bump_width: float = 12.0
    include_cavity: bool = True
    noise_sigma: float = 0.0
    texture_sigma: float = 3.0
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "semi_axes", tuple(float(a) for a in self.semi_axes))
        if self.center is None:
            c = tuple((d - 1) * s / 2.0 for d, s in zip(dims, spacing))
            object.__setattr__(self, "center", c)
        A = np.eye(3)[None] if self.affines is None else np.asarray(self.affines, dtype=np.float64)
        P = len(A)
        tau = np.zeros((P, 3)) if self.translations is None else np.asarray(self.translations, float)
        b = np.zeros(P) if self.bump_amplitudes is None else np.asarray(self.bump_amplitudes, float)
        if tau.shape != (P, 3) or b.shape != (P,):
            raise InvalidPhantomError("affines, translations and bump_amplitudes disagree on P")
        if not (np.allclose(A[0], np.eye(3)) and np.allclose(tau[0], 0) and b[0] == 0):
            raise InvalidPhantomError("phase 0 must be the identity map")
        if np.any(np.linalg.det(A) <= 0):
            raise InvalidPhantomError("affine parts must preserve orientation")
        object.__setattr__(self, "affines", A)
        object.__setattr__(self, "translations", tau)
        object.__setattr__(self, "bump_amplitudes", b)
        if self.bump_center is None:
            c = np.asarray(self.center)
            object.__setattr__(self, "bump_center", tuple(c + np.array([self.semi_axes[0], 0, 0])))

    @property
    def n_phases(self) -> int:
        return len(self.affines)

    @property
    def mean_radius(self) -> float:
        return float(np.mean(self.semi_axes))

    # -- analytic map -------------------------------------------------------

    def _bump(self, X):
        d = X - np.asarray(self.bump_center)
        return np.exp(-np.sum(d * d, axis=-1) / (2 * self.bump_width ** 2))

    def forward(self, X, phase):
        """``phi_t(X)`` for points (..., 3) in mm."""
        X = np.asarray(X, dtype=np.float64)
        c = np.asarray(self.center)
        k = self.bump_amplitudes[phase]
        Y = X + k * self._bump(X)[..., None] * (X - c)
        return c + (Y - c) @ self.affines[phase].T + self.translations[phase]

    def jacobian(self, X, phase):
        """Deformation gradient ``d phi_t / dX`` (..., 3, 3)."""
        X = np.asarray(X, dtype=np.float64)
        c = np.asarray(self.center)
        k = self.bump_amplitudes[phase]
        g = self._bump(X)
        grad_g = -g[..., None] * (X - np.asarray(self.bump_center)) / self.bump_width ** 2
        Jb = (1 + k * g)[..., None, None] * np.eye(3) + k * (X - c)[..., :, None] * grad_g[..., None, :]
        return self.affines[phase] @ Jb

    def inverse(self, x, phase, iterations=30, tol=1e-12):
        """``phi_t^{-1}(x)`` by Newton iteration on the bump part."""
        x = np.asarray(x, dtype=np.float64)
        c = np.asarray(self.center)
        Y = c + (x - c - self.translations[phase]) @ np.linalg.inv(self.affines[phase]).T
        k = self.bump_amplitudes[phase]
        if k == 0:
            return Y
        X = Y.copy()
        A_inv = np.linalg.inv(self.affines[phase])
        for _ in range(iterations):
            r = X + k * self._bump(X)[..., None] * (X - c) - Y
            if np.max(np.abs(r)) < tol:
                break
            J = A_inv @ self.jacobian(X, phase)
            X = X - np.linalg.solve(J, r[..., None])[..., 0]
        return X

    def check_bijective(self, phase, stride=2):
        """Minimum Jacobian determinant over a grid covering the domain."""
        pts = _grid_points(self.dims, self.spacing, stride)
        det = np.linalg.det(self.jacobian(pts, phase))
        return float(det.min())

    # -- geometry -----------------------------------------------------------

    def _level(self, X, shrink=0.0):
        a = np.asarray(self.semi_axes) - shrink
        return np.sqrt(np.sum(((X - np.asarray(self.center)) / a) ** 2, axis=-1))

    def inside_reference(self, X):
        outer = self._level(X) <= 1.0
        if self.include_cavity:
            return outer
        return outer & (self._level(X, self.thickness) > 1.0)

    def texture(self):
        rng = np.random.default_rng(self.seed)
        tex = ndimage.gaussian_filter(rng.standard_normal(self.dims), self.texture_sigma)
        tex -= tex.min()
        return tex / tex.max()

    def reference_intensity(self, X, texture=None):
        """Textured tissue classes at reference points: bright cavity, dark wall."""
        tex = self.texture() if texture is None else texture
        coords = np.moveaxis(X / np.asarray(self.spacing), -1, 0)
        t = ndimage.map_coordinates(tex, coords, order=3, mode="nearest")
        r = self.mean_radius
        soft = lambda lv: 1.0 / (1.0 + np.exp(np.clip(lv * r / 0.5, -50, 50)))
        outer = soft(self._level(X) - 1.0)
        inner = soft(self._level(X, self.thickness) - 1.0)
        wall = outer - inner
        background = 1.0 - outer
        return inner * (0.55 + 0.45 * t) + wall * (0.1 + 0.3 * t) + background * (0.25 + 0.5 * t)


def _grid_points(dims, spacing, stride=1):
    axes = [np.arange(0, d, stride) * s for d, s in zip(dims, spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def rasterize(spec: PhantomSpec, phase: int, texture=None) -> LabeledVolume:
    """Image and segmentation of the shell at ``phase`` (pushed through the phase map)."""
    if not 0 <= phase < spec.n_phases:
        raise ValueError(f"phase {phase} out of range for P={spec.n_phases}")
    if spec.check_bijective(phase) <= 0:
        raise InvalidPhantomError(f"phase {phase} map is not bijective")
    x = _grid_points(spec.dims, spec.spacing)
    X = spec.inverse(x, phase)
    seg = spec.inside_reference(X)
    img = spec.reference_intensity(X, texture)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, phase, 1])
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return LabeledVolume(img, spec.spacing, seg, phase)


def rasterize_series(spec: PhantomSpec) -> PhaseSeries:
    tex = spec.texture()
    return PhaseSeries([rasterize(spec, t, tex) for t in range(spec.n_phases)], 0)


def ground_truth_dvf(spec: PhantomSpec, phase: int) -> DisplacementField:
    """Exact ``u(X) = phi_t(X) - X`` on the voxel grid."""
    X = _grid_points(spec.dims, spec.spacing)
    return DisplacementField(spec.forward(X, phase) - X, spec.spacing, 0, phase)


def ground_truth_strain(spec: PhantomSpec, mesh: SurfaceMesh, phase: int):
    """Continuum strain at cell centroids, projected to each reference cell plane.

    Returns ``(tensors, values, directions)`` with shapes (M, 3, 3), (M, 2) and
    (M, 2, 3).
    """
    normals = mesh.triangle_normals()
    F = spec.jacobian(mesh.centroids(), phase)
    E = affine_reference_strain(F, normals)
    values, dirs, _ = principal_strains_batch(E, normals, check=False)
    return E, values, dirs


def ground_truth_strain_field(spec: PhantomSpec, mesh: SurfaceMesh) -> StrainField:
    """:class:`StrainField` built from the analytic map for every phase."""
    tensors, values, dirs, mags = [], [], [], []
    for t in range(spec.n_phases):
        E, lam, vec = ground_truth_strain(spec, mesh, t)
        tensors.append(E)
        values.append(lam)
        dirs.append(vec)
        mags.append(np.linalg.norm(spec.forward(mesh.vertices, t) - mesh.vertices, axis=1))
    P = spec.n_phases
    return StrainField(np.stack(tensors), np.stack(values), np.stack(dirs),
                       np.zeros((P, len(mesh.triangles))), np.stack(mags))


def analytic_shell_volume(spec: PhantomSpec, phase: int = 0, samples: int = 200_000,
                          seed: int = 0) -> float:
    """Enclosed volume (mm^3) at ``phase``: exact for affine maps, Monte Carlo otherwise."""
    a, b, c = spec.semi_axes
    outer = 4.0 / 3.0 * np.pi * a * b * c
    if not spec.include_cavity:
        ai, bi, ci = (s - spec.thickness for s in spec.semi_axes)
        outer -= 4.0 / 3.0 * np.pi * ai * bi * ci
    if spec.bump_amplitudes[phase] == 0:
        return outer * float(np.linalg.det(spec.affines[phase]))
    # integrate det J over the reference region
    rng = np.random.default_rng(seed)
    box = np.asarray(spec.semi_axes)
    X = np.asarray(spec.center) + rng.uniform(-1, 1, (samples, 3)) * box
    inside = spec.inside_reference(X)
    det = np.linalg.det(spec.jacobian(X[inside], phase))
    return float(det.sum() / samples * np.prod(2 * box))


def cycle_spec(dims=(96, 96, 36), spacing=(1.72, 1.72, 2.0), n_phases=20,
               stretch=(0.12, 0.10, 0.04), bump=0.08, translation=(0.0, 0.0, 0.0),
               **kwargs) -> PhantomSpec:
    """Twenty-phase cycle: anisotropic inflation plus a regional bump on the +x wall.

    ``stretch`` is the per-axis fractional elongation at peak filling; every
    phase scales it by :func:`cycle_profile`.
    """
    prof = cycle_profile(n_phases)
    A = np.array([np.diag(1.0 + np.asarray(stretch) * r) for r in prof])
    tau = np.outer(prof, translation)
    return PhantomSpec(dims=dims, spacing=spacing, affines=A, translations=tau,
                       bump_amplitudes=bump * prof, **kwargs)


def translation_spec(shifts_mm: Sequence, dims=(48, 48, 24), spacing=(1.0, 1.0, 1.0),
                     semi_axes=(12.0, 10.0, 7.0), **kwargs) -> PhantomSpec:
    """Rigidly translating shell; ``shifts_mm`` (P, 3) with the first row zero."""
    tau = np.asarray(shifts_mm, dtype=np.float64)
    return PhantomSpec(dims=dims, spacing=spacing, semi_axes=semi_axes,
                       affines=np.repeat(np.eye(3)[None], len(tau), axis=0),
                       translations=tau, bump_amplitudes=np.zeros(len(tau)), **kwargs)


def jittered_cycle_spec(rng: np.random.Generator, jitter: float = 0.05, shift_mm: float = 2.0,
                        **kwargs) -> PhantomSpec:
    """Cycle phantom with semi-axes scaled by ``1 + U(-jitter, jitter)`` and a shifted centre.

    The motion parameters (stretch, bump, profile) are shared, so a population
    drawn this way differs only in geometry.
    """
    base = PhantomSpec(**{k: kwargs[k] for k in ("dims", "spacing") if k in kwargs})
    axes = np.asarray(kwargs.pop("semi_axes", base.semi_axes)) * (1.0 + rng.uniform(-jitter, jitter, 3))
    center = np.asarray(base.center) + rng.uniform(-shift_mm, shift_mm, 3)
    return cycle_spec(semi_axes=tuple(axes), center=tuple(center), **kwargs)


def landmarks(spec: PhantomSpec) -> dict:
    """Named reference-phase points (mm): bump centre and two shell poles."""
    c = np.asarray(spec.center)
    a, _, cz = spec.semi_axes
    return {"bump": np.asarray(spec.bump_center), "pole_neg_x": c - np.array([a, 0.0, 0.0]),
            "pole_pos_z": c + np.array([0.0, 0.0, cz])}


SEGMENTS = {"reservoir": range(1, RESERVOIR_END + 1),
            "conduit": range(RESERVOIR_END + 1, CONDUIT_END + 1),
            "booster": range(CONDUIT_END + 1, 20)}


def segment_spec(segment: str, **kwargs) -> PhantomSpec:
    """One segment of the twenty-phase cycle (phase 0 kept as the reference).

    ``reservoir`` inflates (phases 1-8), ``conduit`` drains (9-15) and
    ``booster`` contracts (16-19); all maps stay relative to phase 0.
    """
    if segment not in SEGMENTS:
        raise InvalidPhantomError(f"unknown segment {segment!r}; choose from {sorted(SEGMENTS)}")
    kwargs.pop("n_phases", None)  # the segment fixes its own phases
    full = cycle_spec(n_phases=20, **kwargs)
    keep = [0] + list(SEGMENTS[segment])
    return dataclasses.replace(full, affines=full.affines[keep], translations=full.translations[keep],
                               bump_amplitudes=full.bump_amplitudes[keep])


PRESETS = {"cycle20": cycle_spec,
           "reservoir": lambda **kw: segment_spec("reservoir", **kw),
           "conduit": lambda **kw: segment_spec("conduit", **kw),
           "booster": lambda **kw: segment_spec("booster", **kw)}
