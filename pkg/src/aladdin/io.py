"""On-disk formats: NIfTI volumes and fields, PLY meshes, CSV tables, JSON reports.

A phase series directory holds ``phase_XX.nii.gz`` intensities and matching
``seg_XX.nii.gz`` masks. Displacement fields are 4D NIfTI vector volumes
(mm, pull-back convention) named ``dvf_00_to_XX.nii.gz`` with a JSON sidecar.
All text outputs use fixed float formatting and sorted keys so repeated runs
are byte-identical.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import nibabel as nib
import numpy as np
from plyfile import PlyData, PlyElement

from .registration import DisplacementField
from .surface import StrainField, SurfaceMesh
from .volume import LabeledVolume, PhaseSeries

PHASE_RE = re.compile(r"phase_(\d+)\.nii(\.gz)?$")


def fmt(x) -> str:
    """Shortest round-trip text for a float; ints stay ints."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    """Rows as dicts of strings."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- NIfTI ----------------------------------------------------------------------

def _affine(spacing):
    return np.diag(list(map(float, spacing)) + [1.0])


def save_volume(path, array, spacing, dtype=None) -> None:
    """Write a 3D (or 4D vector) array with a diagonal voxel-to-mm affine."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype == bool:
        arr = arr.astype(np.uint8)
    img = nib.Nifti1Image(arr, _affine(spacing))
    img.header.set_zooms(tuple(map(float, spacing)) + (1.0,) * (arr.ndim - 3))
    nib.save(img, str(path))


def load_volume(path):
    """``(array, spacing)`` with the spacing read from the header zooms."""
    img = nib.load(str(path))
    arr = np.asanyarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return np.array(arr), spacing


def save_series(series: PhaseSeries, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, vol in enumerate(series.phases):
        save_volume(d / f"phase_{t:02d}.nii.gz", vol.intensities, vol.spacing, np.float64)
        if vol.segmentation is not None:
            save_volume(d / f"seg_{t:02d}.nii.gz", vol.segmentation, vol.spacing)


def load_series(directory, reference_index: int = 0) -> PhaseSeries:
    """Read ``phase_XX`` volumes (and ``seg_XX`` masks when present) in phase order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"series directory {d} does not exist")
    found = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := PHASE_RE.match(p.name)))
    if not found:
        raise FileNotFoundError(f"no phase_XX.nii.gz files in {d}")
    phases = []
    for t, p in found:
        img, spacing = load_volume(p)
        seg_path = d / f"seg_{t:02d}.nii.gz"
        seg = load_volume(seg_path)[0].astype(bool) if seg_path.exists() else None
        phases.append(LabeledVolume(img.astype(np.float64), spacing, seg, t))
    return PhaseSeries(phases, reference_index)


def dvf_name(source: int, target: int) -> str:
    return f"dvf_{source:02d}_to_{target:02d}.nii.gz"


def save_dvf(directory, dvf: DisplacementField, sidecar: Optional[dict] = None) -> Path:
    d = Path(directory)
    path = d / dvf_name(dvf.source_phase, dvf.target_phase)
    save_volume(path, dvf.vectors, dvf.spacing, np.float64)
    meta = {"source_phase": dvf.source_phase, "target_phase": dvf.target_phase,
            "units": "mm", "convention": "pull-back: warped(x) = moving(x + u(x))",
            "spacing": list(dvf.spacing)}
    meta.update(sidecar or {})
    write_json(path.with_name(path.name.replace(".nii.gz", ".json")), meta)
    return path


def load_dvf(path) -> DisplacementField:
    vec, spacing = load_volume(path)
    meta_path = Path(str(path).replace(".nii.gz", ".json"))
    src, tgt = 0, 0
    if meta_path.exists():
        meta = read_json(meta_path)
        src, tgt = meta["source_phase"], meta["target_phase"]
    return DisplacementField(vec.astype(np.float64), spacing, src, tgt)


# -- PLY ------------------------------------------------------------------------

def save_mesh(path, vertices, triangles, vertex_properties: Optional[Dict[str, np.ndarray]] = None,
              face_properties: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Binary little-endian PLY with optional per-vertex and per-face float properties."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    vertices = np.asarray(vertices, dtype=np.float64)
    vprops = vertex_properties or {}
    fprops = face_properties or {}
    vdtype = [("x", "f8"), ("y", "f8"), ("z", "f8")] + [(k, "f8") for k in vprops]
    v = np.empty(len(vertices), dtype=vdtype)
    v["x"], v["y"], v["z"] = vertices.T
    for k, val in vprops.items():
        v[k] = val
    fdtype = [("vertex_indices", "i4", (3,))] + [(k, "f8") for k in fprops]
    f = np.empty(len(triangles), dtype=fdtype)
    f["vertex_indices"] = np.asarray(triangles, dtype=np.int32)
    for k, val in fprops.items():
        f[k] = val
    PlyData([PlyElement.describe(v, "vertex"), PlyElement.describe(f, "face")],
            byte_order="<").write(str(path))


def load_mesh(path):
    """``(vertices, triangles, vertex_properties, face_properties)``."""
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    f = ply["face"].data
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    tris = np.stack(f["vertex_indices"]).astype(np.int64)
    vprops = {n: np.asarray(v[n], dtype=np.float64) for n in v.dtype.names if n not in ("x", "y", "z")}
    fprops = {n: np.asarray(f[n], dtype=np.float64) for n in f.dtype.names if n != "vertex_indices"}
    return verts, tris, vprops, fprops


def save_surface(path, mesh: SurfaceMesh, **kwargs) -> None:
    save_mesh(path, mesh.vertices, mesh.triangles, **kwargs)


def load_surface(path) -> SurfaceMesh:
    verts, tris, _, _ = load_mesh(path)
    return SurfaceMesh(verts, tris)


STRAIN_HEADER = ("phase", "cell", "lambda1", "lambda2", "v1x", "v1y", "v1z", "v2x", "v2y", "v2z",
                 "normal_eigenvalue")


def save_strain_csv(path, strain: StrainField) -> None:
    def rows():
        for t in range(strain.n_phases):
            for m in range(strain.principal_values.shape[1]):
                d = strain.principal_directions[t, m]
                yield (t, m, *strain.principal_values[t, m], *d[0], *d[1],
                       strain.normal_eigenvalues[t, m])
    write_csv(path, STRAIN_HEADER, rows())


def save_dvf_magnitude_csv(path, strain: StrainField) -> None:
    P, N = strain.dvf_magnitude.shape
    write_csv(path, ("phase", "vertex", "dvf_magnitude"),
              ((t, n, strain.dvf_magnitude[t, n]) for t in range(P) for n in range(N)))


def load_strain_csv(path, dvf_magnitude=None) -> StrainField:
    rows = read_csv(path)
    P = max(int(r["phase"]) for r in rows) + 1
    M = max(int(r["cell"]) for r in rows) + 1
    vals = np.zeros((P, M, 2))
    dirs = np.zeros((P, M, 2, 3))
    normal = np.zeros((P, M))
    for r in rows:
        t, m = int(r["phase"]), int(r["cell"])
        vals[t, m] = float(r["lambda1"]), float(r["lambda2"])
        dirs[t, m, 0] = [float(r[k]) for k in ("v1x", "v1y", "v1z")]
        dirs[t, m, 1] = [float(r[k]) for k in ("v2x", "v2y", "v2z")]
        normal[t, m] = float(r["normal_eigenvalue"])
    tensors = np.einsum("pmk,pmki,pmkj->pmij", vals, dirs, dirs)
    mags = np.zeros((P, 0)) if dvf_magnitude is None else dvf_magnitude
    return StrainField(tensors, vals, dirs, normal, mags)


def load_dvf_magnitude_csv(path):
    rows = read_csv(path)
    P = max(int(r["phase"]) for r in rows) + 1
    N = max(int(r["vertex"]) for r in rows) + 1
    out = np.zeros((P, N))
    for r in rows:
        out[int(r["phase"]), int(r["vertex"])] = float(r["dvf_magnitude"])
    return out
