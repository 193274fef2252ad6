"""Manifest-driven batch pipeline with content-hash caching.

Stages run in dependency order::

    phantom -> preprocess -> register -> strain -> atlas
                         \\-> biomarkers ---------> eval

Each (stage, subject) step records a hash of its inputs and configuration
under ``<output_root>/.cache``; a rerun with identical inputs finds matching
records and output hashes and does nothing. Every JSON and CSV output is
written with deterministic formatting and without wall-clock data, so two
runs from the same manifest and seed are byte-identical. Timings go to the
plain-text ``run_timings.log``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import atlas as atlas_mod
from . import io
from . import phantom as ph
from .biomarkers import (biplane_volume, dice, ejection_fractions, hausdorff, slice_plane,
                         volume_curve)
from .registration import RegistrationConfig, register_series, warp_segmentation
from .surface import (StrainField, SurfaceMesh, mesh_from_segmentation, propagate_mesh,
                      strain_series)
from .volume import PhaseSeries, preprocess_series

logger = logging.getLogger(__name__)

STAGES = ("phantom", "preprocess", "register", "strain", "atlas", "biomarkers", "eval")
DEPENDS = {
    "phantom": (),
    "preprocess": ("phantom",),
    "register": ("preprocess",),
    "strain": ("register",),
    "atlas": ("strain",),
    "biomarkers": ("preprocess",),
    "eval": ("strain", "biomarkers"),
}
ROLES = ("atlas-subject", "test-subject")
CACHE_VERSION = "1"


class ManifestError(ValueError):
    pass


# -- manifest -------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SubjectEntry:
    """One subject: an existing series directory, or a phantom to generate."""

    id: str
    role: str = "atlas-subject"
    series: Optional[Path] = None
    phantom: Optional[dict] = None
    landmarks: Optional[Path] = None


@dataclasses.dataclass(frozen=True)
class PipelineManifest:
    subjects: tuple
    output_root: Path
    seed: int = 0
    config: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "PipelineManifest":
        base = Path(base_dir)
        if "subjects" not in data or not data["subjects"]:
            raise ManifestError("manifest lists no subjects")
        subjects = []
        for i, s in enumerate(data["subjects"]):
            if "id" not in s:
                raise ManifestError(f"subject #{i} has no id")
            series = base / s["series"] if s.get("series") else None
            lm = base / s["landmarks"] if s.get("landmarks") else None
            subjects.append(SubjectEntry(str(s["id"]), s.get("role", "atlas-subject"), series,
                                         s.get("phantom"), lm))
        out = base / data.get("output_root", "out")
        return cls(tuple(subjects), out, int(data.get("seed", 0)), dict(data.get("config", {})))

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest {path} does not exist")
        try:
            data = io.read_json(path)
        except json.JSONDecodeError as err:
            raise ManifestError(f"manifest {path} is not valid JSON: {err}") from err
        return cls.from_dict(data, path.parent)

    def validate(self) -> None:
        ids = [s.id for s in self.subjects]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate subject ids: {dupes}")
        for s in self.subjects:
            if s.role not in ROLES:
                raise ManifestError(f"subject {s.id}: role must be one of {ROLES}, got {s.role!r}")
            if s.phantom is None:
                if s.series is None:
                    raise ManifestError(f"subject {s.id}: needs a series directory or a phantom block")
                if not s.series.is_dir():
                    raise ManifestError(f"subject {s.id}: series directory {s.series} does not exist")
            elif s.phantom.get("preset", "cycle20") not in ph.PRESETS:
                raise ManifestError(f"subject {s.id}: unknown phantom preset {s.phantom.get('preset')!r}")
            if s.landmarks is not None and not s.landmarks.exists():
                raise ManifestError(f"subject {s.id}: landmarks file {s.landmarks} does not exist")
        unknown = set(self.config) - set(STAGES)
        if unknown:
            raise ManifestError(f"config for unknown stages: {sorted(unknown)}")
        RegistrationConfig(**self.config.get("register", {}))

    def with_seed(self, seed: Optional[int]) -> "PipelineManifest":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))


def parse_stages(text: Optional[str]) -> List[str]:
    """Comma-separated stage names; ``None`` or ``all`` selects every stage."""
    if text is None or text.strip() in ("", "all"):
        return list(STAGES)
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in STAGES]
    if bad:
        raise ManifestError(f"unknown stages {bad}; choose from {list(STAGES)}")
    return [s for s in STAGES if s in names]


# -- hashing & cache ----------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(paths):
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.exists():
            out.append(p)
    return out


def inputs_digest(stage: str, config, inputs: Sequence, root: Path) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"stage": stage, "version": CACHE_VERSION, "config": io._clean(config)},
                        sort_keys=True).encode())
    for f in _files(inputs):
        h.update(_rel(f, root).encode())
        h.update(file_digest(f).encode())
    return h.hexdigest()


def _rel(path, root) -> str:
    path, root = Path(path).resolve(), Path(root).resolve()
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()


class StepCache:
    """Per-step records of input digests and output hashes."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.dir = self.root / ".cache"

    def _record(self, stage, key):
        return self.dir / f"{stage}__{key}.json"

    def up_to_date(self, stage, key, digest) -> bool:
        rec = self._record(stage, key)
        if not rec.exists():
            return False
        data = io.read_json(rec)
        if data.get("inputs") != digest:
            return False
        for rel, h in data.get("outputs", {}).items():
            p = self.root / rel
            if not p.exists() or file_digest(p) != h:
                return False
        return True

    def store(self, stage, key, digest, outputs) -> None:
        files = _files(outputs)
        io.write_json(self._record(stage, key), {
            "inputs": digest,
            "outputs": {_rel(f, self.root): file_digest(f) for f in files},
        })


# -- stage bodies (directory in, directory out) -----------------------------------

def generate_phantom(out_dir, preset="cycle20", dims=None, spacing=None, seed=0,
                     noise_sigma=0.0, jitter=0.0, n_phases=20, index=0) -> Path:
    """Write a phantom series plus ``truth/`` (DVFs, mesh, strains, volumes) and landmarks."""
    out = Path(out_dir)
    kwargs = {"n_phases": int(n_phases), "noise_sigma": float(noise_sigma), "seed": int(seed)}
    if dims is not None:
        kwargs["dims"] = tuple(int(d) for d in dims)
    if spacing is not None:
        kwargs["spacing"] = tuple(float(s) for s in spacing)
    if preset not in ph.PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    if jitter > 0:
        if preset != "cycle20":
            raise ValueError("geometric jitter is only defined for the cycle20 preset")
        rng = np.random.default_rng([int(seed), int(index)])
        spec = ph.jittered_cycle_spec(rng, jitter, **kwargs)
    else:
        spec = ph.PRESETS[preset](**kwargs)
    series = ph.rasterize_series(spec)
    io.save_series(series, out)
    io.write_json(out / "landmarks.json", ph.landmarks(spec))
    truth = out / "truth"
    for t in range(spec.n_phases):
        io.save_dvf(truth, ph.ground_truth_dvf(spec, t))
    mesh = mesh_from_segmentation(series.reference.segmentation, spec.spacing)
    gt = ph.ground_truth_strain_field(spec, mesh)
    io.save_surface(truth / "mesh.ply", mesh)
    io.save_strain_csv(truth / "strain.csv", gt)
    io.save_dvf_magnitude_csv(truth / "dvf_magnitude.csv", gt)
    vols = [ph.analytic_shell_volume(spec, t) / 1000.0 for t in range(spec.n_phases)]
    io.write_json(truth / "volumes.json", {"volumes_ml": vols, "semi_axes": spec.semi_axes,
                                           "center": spec.center})
    return out


def preprocess_dir(series_dir, out_dir, crop_size=None, stabilize=True, landmarks=None) -> dict:
    """Crop, normalize and stabilize a series directory."""
    series = io.load_series(series_dir)
    crop = tuple(crop_size) if crop_size is not None else series.dims
    ref_seg = series.reference.segmentation
    center = np.rint(np.argwhere(ref_seg).mean(axis=0)).astype(int) if ref_seg is not None \
        and ref_seg.any() else np.asarray(series.dims) // 2
    out, shifts = preprocess_series(series, crop, center, stabilize)
    io.save_series(out, out_dir)
    offset = center - np.asarray(crop) // 2
    meta = {"crop_size": list(crop), "crop_offset": offset.tolist(), "shifts": shifts.tolist()}
    lm_path = Path(landmarks) if landmarks else Path(series_dir) / "landmarks.json"
    if lm_path.exists():
        moved = {k: (np.asarray(v) - offset * np.asarray(series.spacing)).tolist()
                 for k, v in io.read_json(lm_path).items()}
        io.write_json(Path(out_dir) / "landmarks.json", moved)
    io.write_json(Path(out_dir) / "preprocess.json", meta)
    return meta


def register_dir(series_dir, out_dir, cfg: Optional[RegistrationConfig] = None) -> dict:
    """Register every phase onto the reference and write the fields with sidecars."""
    cfg = cfg or RegistrationConfig()
    series = io.load_series(series_dir)
    results = register_series(series, cfg)
    summary = {}
    for res in results:
        side = {"config": dataclasses.asdict(cfg), **res.to_json()}
        io.save_dvf(out_dir, res.field, side)
        summary[res.field.target_phase] = res.final_loss
    return {"final_loss": summary}


def _load_fields(dvf_dir, n_phases):
    return [io.load_dvf(Path(dvf_dir) / io.dvf_name(0, t)) for t in range(n_phases)]


def strain_dir(series_dir, dvf_dir, out_dir, smoothing_iterations=20) -> dict:
    """Reference mesh, propagated vertices and per-cell strains."""
    series = io.load_series(series_dir)
    mesh = mesh_from_segmentation(series.reference.segmentation, series.spacing,
                                  smoothing_iterations)
    moved = propagate_mesh(mesh, _load_fields(dvf_dir, len(series)))
    field = strain_series(moved)
    out = Path(out_dir)
    io.save_surface(out / "mesh.ply", mesh)
    io.save_strain_csv(out / "strain.csv", field)
    io.save_dvf_magnitude_csv(out / "dvf_magnitude.csv", field)
    mean = mean_principal_strain(mesh, field)
    summary = {"mean_lambda1": mean[:, 0], "mean_lambda2": mean[:, 1],
               "peak_phase": int(np.argmax(mean[:, 0])),
               "max_normal_eigenvalue": float(np.abs(field.normal_eigenvalues).max())}
    io.write_json(out / "strain_summary.json", summary)
    return summary


def mean_principal_strain(mesh: SurfaceMesh, field: StrainField) -> np.ndarray:
    """Area-weighted mean of the two principal strains, (P, 2)."""
    w = mesh.triangle_areas()
    return np.einsum("pmk,m->pk", field.principal_values, w / w.sum())


def biomarkers_dir(series_dir, out_dir, preactivation_phase=15, json_path=None) -> dict:
    """Volume curve, ejection fractions and biplane area-length volumes.

    Writes ``volumes.csv`` and ``biomarkers.json`` into `out_dir`, or the
    summary alone to `json_path` when given.
    """
    series = io.load_series(series_dir)
    curve = volume_curve(series, min(preactivation_phase, len(series) - 1))
    laef, laaef = ejection_fractions(curve)
    biplane = []
    for vol in series.phases:
        a2, l2 = slice_plane(vol.segmentation, series.spacing, axis=0)
        a4, l4 = slice_plane(vol.segmentation, series.spacing, axis=1)
        biplane.append(biplane_volume(a2, a4, l2, l4) if min(a2, a4, l2, l4) > 0 else float("nan"))
    summary = {"LAEF": laef, "LAaEF": laaef, "max_phase": curve.max_phase,
               "min_phase": curve.min_phase, "preactivation_phase": curve.preactivation_phase,
               "physiological": curve.physiological(),
               "volumes_ml": [float(v) for v in curve.volumes], "biplane_ml": biplane}
    if json_path is not None:
        io.write_json(json_path, summary)
        return summary
    out = Path(out_dir)
    io.write_csv(out / "volumes.csv", ("phase", "volume_ml", "biplane_ml"),
                 ((t, v, b) for t, (v, b) in enumerate(zip(curve.volumes, biplane))))
    io.write_json(out / "biomarkers.json", summary)
    return summary


def _segmentations(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"segmentation directory {d} does not exist")
    found = sorted((int(p.name[4:6]), p) for p in d.glob("seg_[0-9][0-9].nii.gz"))
    if not found:
        raise FileNotFoundError(f"no seg_XX.nii.gz files in {d}")
    return {t: io.load_volume(p) for t, p in found}


def segmentation_eval(pred_dir, gt_dir, out_csv) -> list:
    """Per-phase Hausdorff distance (mm) and Dice between two ``seg_XX`` sets."""
    pred, gt = _segmentations(pred_dir), _segmentations(gt_dir)
    phases = sorted(set(pred) & set(gt))
    if not phases:
        raise ValueError("prediction and ground truth share no phases")
    rows = []
    for t in phases:
        (a, spacing), (b, _) = pred[t], gt[t]
        a, b = a.astype(bool), b.astype(bool)
        rows.append((t, hausdorff(a, b, spacing), dice(a, b)))
    io.write_csv(out_csv, ("phase", "hausdorff_mm", "dice"), rows)
    return rows


def load_subject(sid, series_dir, strain_dir_, landmarks=None) -> atlas_mod.AtlasSubject:
    series = io.load_series(series_dir)
    mesh = io.load_surface(Path(strain_dir_) / "mesh.ply")
    mags = io.load_dvf_magnitude_csv(Path(strain_dir_) / "dvf_magnitude.csv")
    field = io.load_strain_csv(Path(strain_dir_) / "strain.csv", mags)
    lm_path = Path(landmarks) if landmarks else Path(series_dir) / "landmarks.json"
    lms = {k: np.asarray(v) for k, v in io.read_json(lm_path).items()} if lm_path.exists() else {}
    return atlas_mod.AtlasSubject(sid, series.reference.segmentation, series.spacing, mesh, field, lms)


STAT_HEADER = ("vertex", "phase", "biomarker", "mean", "std", "cv", "cv_reliable", "count") + \
    tuple(f"cov_{b}" for b in atlas_mod.BIOMARKERS)


def save_atlas(model: atlas_mod.AtlasModel, out_dir) -> None:
    out = Path(out_dir)
    io.save_volume(out / "consensus.nii.gz", model.consensus_seg, model.spacing)
    io.save_surface(out / "mesh.ply", model.mesh)
    io.write_json(out / "landmarks.json", model.landmarks)
    io.write_json(out / "atlas.json", {"n_subjects": model.n_subjects,
                                       "subjects": list(model.subject_ids),
                                       "biomarkers": list(model.biomarkers),
                                       "spacing": list(model.spacing),
                                       "n_phases": model.n_phases})
    P, N, B = model.mean.shape

    def rows():
        for n in range(N):
            for t in range(P):
                for b in range(B):
                    yield (n, t, model.biomarkers[b], model.mean[t, n, b], model.std[t, n, b],
                           model.cv[t, n, b], model.cv_reliable[t, n, b], model.counts[t, n],
                           *model.cov[t, n, b])
    io.write_csv(out / "statistics.csv", STAT_HEADER, rows())
    io.write_csv(out / "directions.csv", ("vertex", "phase", "k", "x", "y", "z"),
                 ((n, t, k, *model.directions[t, n, k]) for n in range(N) for t in range(P)
                  for k in range(2)))


def load_atlas(atlas_dir) -> atlas_mod.AtlasModel:
    d = Path(atlas_dir)
    meta = io.read_json(d / "atlas.json")
    seg, spacing = io.load_volume(d / "consensus.nii.gz")
    mesh = io.load_surface(d / "mesh.ply")
    names = tuple(meta["biomarkers"])
    P, N, B = meta["n_phases"], len(mesh.vertices), len(names)
    mean, std, cv = (np.full((P, N, B), np.nan) for _ in range(3))
    rel = np.zeros((P, N, B), dtype=bool)
    counts = np.zeros((P, N), dtype=int)
    cov = np.full((P, N, B, B), np.nan)
    for r in io.read_csv(d / "statistics.csv"):
        n, t, b = int(r["vertex"]), int(r["phase"]), names.index(r["biomarker"])
        mean[t, n, b], std[t, n, b], cv[t, n, b] = float(r["mean"]), float(r["std"]), float(r["cv"])
        rel[t, n, b] = r["cv_reliable"] == "1"
        counts[t, n] = int(r["count"])
        cov[t, n, b] = [float(r[f"cov_{x}"]) for x in names]
    dirs = np.full((P, N, 2, 3), np.nan)
    for r in io.read_csv(d / "directions.csv"):
        dirs[int(r["phase"]), int(r["vertex"]), int(r["k"])] = [float(r[k]) for k in "xyz"]
    lms = {k: np.asarray(v) for k, v in io.read_json(d / "landmarks.json").items()}
    return atlas_mod.AtlasModel(seg.astype(bool), spacing, mesh, lms, mean, std, cv, rel, cov, dirs,
                                counts, meta["n_subjects"], tuple(meta["subjects"]), names)


def save_md(out_dir, mesh: SurfaceMesh, md: np.ndarray) -> None:
    out = Path(out_dir)
    P, N = md.shape
    io.write_csv(out / "md.csv", ("vertex", "phase", "md"),
                 ((n, t, md[t, n]) for n in range(N) for t in range(P)))
    io.save_surface(out / "md.ply", mesh,
                    vertex_properties={f"md_{t:02d}": md[t] for t in range(P)})


def atlas_build_dir(subjects: Sequence[dict], out_dir, cap_mm=atlas_mod.DISTANCE_CAP_MM):
    """Build and persist an atlas; ``subjects`` entries carry id, series, strain, landmarks."""
    members = [load_subject(s["id"], s["series"], s["strain"], s.get("landmarks")) for s in subjects]
    build = atlas_mod.build_atlas(members, cap_mm=cap_mm)
    save_atlas(build.atlas, out_dir)
    for m in members:
        md = atlas_mod.mahalanobis_map(build.atlas, atlas_mod.map_subject(build, m, cap_mm))
        save_md(Path(out_dir) / "md" / m.subject_id, build.atlas.mesh, md)
    dices = {sid: T.dice for sid, T in build.transforms.items()}
    return build, {"n_subjects": build.atlas.n_subjects, "registration_dice": dices,
                   "n_vertices": len(build.atlas.mesh.vertices)}


def atlas_map_dir(atlas_dir, subject: dict, out_dir, cap_mm=atlas_mod.DISTANCE_CAP_MM) -> dict:
    """MD map of a subject outside the atlas population."""
    model = load_atlas(atlas_dir)
    sub = load_subject(subject["id"], subject["series"], subject["strain"], subject.get("landmarks"))
    amap = atlas_mod.register_new_subject(model, sub)
    values, _, valid = atlas_mod.transfer_to_atlas(sub, amap, model.mesh.vertices, cap_mm)
    md = atlas_mod.mahalanobis_map(model, values)
    save_md(out_dir, model.mesh, md)
    return {"valid_vertices": int(valid.sum()), "max_md": float(np.nanmax(md))}


def eval_dir(series_dir, dvf_dir, strain_out, truth_dir, out_dir, biomarker_dir=None) -> dict:
    """Compare registration, strain and volumes against phantom truth."""
    series = io.load_series(series_dir)
    ref = series.reference.segmentation
    fields = _load_fields(dvf_dir, len(series))
    dices, hds = [], []
    for t in range(len(series)):
        w = warp_segmentation(series[t].segmentation, fields[t].vectors, series.spacing)
        dices.append(dice(w, ref))
        hds.append(hausdorff(w, ref, series.spacing))
    est = io.read_json(Path(strain_out) / "strain_summary.json")
    est = np.stack([est["mean_lambda1"], est["mean_lambda2"]], axis=1)
    truth = Path(truth_dir)
    tmesh = io.load_surface(truth / "mesh.ply")
    tfield = io.load_strain_csv(truth / "strain.csv")
    tru = mean_principal_strain(tmesh, tfield)
    peak = np.abs(tru).max(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel_mae = np.abs(est - tru).mean(axis=0) / peak
    out = {
        "dice": dices, "hausdorff_mm": hds,
        "min_dice": float(min(dices[1:] or dices)), "max_hausdorff_mm": float(max(hds[1:] or hds)),
        "strain_mae_over_peak": rel_mae.tolist(),
        "peak_phase_estimated": int(np.argmax(est[:, 0])),
        "peak_phase_truth": int(np.argmax(tru[:, 0])),
    }
    vols = truth / "volumes.json"
    if vols.exists():
        tv = np.asarray(io.read_json(vols)["volumes_ml"])
        from .biomarkers import VolumeCurve
        bm = None
        if biomarker_dir is not None and (Path(biomarker_dir) / "biomarkers.json").exists():
            bm = io.read_json(Path(biomarker_dir) / "biomarkers.json")
        # score the truth at the same pre-activation phase the estimate used
        pre = bm["preactivation_phase"] if bm else min(15, len(tv) - 1)
        laef, laaef = ejection_fractions(VolumeCurve(tv, pre))
        out.update({"LAEF_truth": laef, "LAaEF_truth": laaef})
        if bm:
            out.update({"LAEF_estimated": bm["LAEF"], "LAaEF_estimated": bm["LAaEF"]})
    io.write_json(Path(out_dir) / "eval.json", out)
    return out


# -- orchestration ----------------------------------------------------------------------

@dataclasses.dataclass
class RunReport:
    stages: Dict[str, dict] = dataclasses.field(default_factory=dict)
    metrics: Dict[str, dict] = dataclasses.field(default_factory=dict)
    timings: List[tuple] = dataclasses.field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(st["status"] in ("failed", "partial", "blocked") for st in self.stages.values())

    def to_json(self) -> dict:
        return {"stages": self.stages, "metrics": self.metrics}


class Pipeline:
    """Runs the requested stages of a manifest under its output root."""

    def __init__(self, manifest: PipelineManifest):
        self.m = manifest
        self.root = Path(manifest.output_root)
        self.cache = StepCache(self.root)

    # paths
    def subject_dir(self, s: SubjectEntry) -> Path:
        return self.root / s.id

    def series_dir(self, s: SubjectEntry) -> Path:
        return self.subject_dir(s) / "input" if s.phantom is not None else Path(s.series)

    def truth_dir(self, s: SubjectEntry) -> Path:
        return self.series_dir(s) / "truth"

    def landmarks(self, s: SubjectEntry):
        return str(s.landmarks) if s.landmarks else None

    def cfg(self, stage) -> dict:
        return dict(self.m.config.get(stage, {}))

    def _step(self, report, stage, key, inputs, config, outputs, fn: Callable[[], dict]):
        digest = inputs_digest(stage, config, inputs, self.root)
        if self.cache.up_to_date(stage, key, digest):
            return "skipped (up-to-date)", None
        start = time.perf_counter()
        metrics = fn()
        report.timings.append((stage, key, time.perf_counter() - start))
        self.cache.store(stage, key, digest, outputs)
        return "completed", metrics

    def run(self, stages: Sequence[str]) -> RunReport:
        self.m.validate()
        self.root.mkdir(parents=True, exist_ok=True)
        report = RunReport()
        wanted = [s for s in STAGES if s in stages]
        failed: Dict[str, set] = {s: set() for s in STAGES}
        for stage in wanted:
            statuses = {}
            subjects = self.m.subjects
            if stage == "atlas":
                statuses = self._run_atlas(report, failed)
            else:
                for idx, s in enumerate(subjects):
                    if any(s.id in failed[d] for d in DEPENDS[stage]):
                        statuses[s.id] = "blocked"
                        failed[stage].add(s.id)
                        continue
                    try:
                        status, metrics = self._run_subject(report, stage, idx, s)
                    except Exception as err:  # reported, dependents halted
                        logger.exception("stage %s failed for %s", stage, s.id)
                        status, metrics = f"failed: {type(err).__name__}: {err}", None
                        failed[stage].add(s.id)
                    statuses[s.id] = status
                    if metrics is not None and stage == "eval":
                        report.metrics[s.id] = metrics
            report.stages[stage] = {"status": _aggregate(statuses), "subjects": statuses}
        # metrics for up-to-date evals come from disk
        for s in self.m.subjects:
            ev = self.subject_dir(s) / "eval" / "eval.json"
            if "eval" in wanted and s.id not in report.metrics and ev.exists():
                report.metrics[s.id] = io.read_json(ev)
        io.write_json(self.root / "run_report.json", report.to_json())
        with open(self.root / "run_timings.log", "w") as fh:
            for stage, key, sec in report.timings:
                fh.write(f"{stage}\t{key}\t{sec:.3f}s\n")
        return report

    def _run_subject(self, report, stage, idx, s: SubjectEntry):
        sd = self.subject_dir(s)
        series = self.series_dir(s)
        pre = sd / "preprocessed"
        if stage == "phantom":
            if s.phantom is None:
                return "skipped (not a phantom)", None
            conf = {"seed": self.m.seed, "index": idx, **s.phantom}
            conf.setdefault("preset", "cycle20")
            return self._step(report, stage, s.id, [], conf, [series],
                              lambda: {"dir": _rel(generate_phantom(series, **conf), self.root)})
        if stage == "preprocess":
            conf = self.cfg("preprocess")
            return self._step(report, stage, s.id, [series] + ([s.landmarks] if s.landmarks else []),
                              conf, [pre], lambda: preprocess_dir(
                                  series, pre, conf.get("crop_size"), conf.get("stabilize", True),
                                  self.landmarks(s)))
        if stage == "register":
            conf = self.cfg("register")
            out = sd / "dvf"
            inputs = [p for p in _files([pre]) if p.name.startswith(("phase_", "seg_"))]
            return self._step(report, stage, s.id, inputs, conf, [out],
                              lambda: register_dir(pre, out, RegistrationConfig(**conf)))
        if stage == "strain":
            conf = self.cfg("strain")
            out = sd / "strain"
            return self._step(report, stage, s.id, [pre / "seg_00.nii.gz", sd / "dvf"], conf, [out],
                              lambda: strain_dir(pre, sd / "dvf", out,
                                                 conf.get("smoothing_iterations", 20)))
        if stage == "biomarkers":
            conf = self.cfg("biomarkers")
            out = sd / "biomarkers"
            inputs = [p for p in _files([pre]) if p.name.startswith("seg_")]
            return self._step(report, stage, s.id, inputs, conf, [out],
                              lambda: biomarkers_dir(pre, out, conf.get("preactivation_phase", 15)))
        if stage == "eval":
            truth = self.truth_dir(s)
            if not truth.is_dir():
                return "skipped (no ground truth)", None
            out = sd / "eval"
            inputs = [pre, sd / "dvf", sd / "strain", sd / "biomarkers", truth]
            return self._step(report, stage, s.id, inputs, {}, [out],
                              lambda: eval_dir(pre, sd / "dvf", sd / "strain", truth, out,
                                               sd / "biomarkers"))
        raise ValueError(stage)

    def _subject_record(self, s):
        sd = self.subject_dir(s)
        lm = sd / "preprocessed" / "landmarks.json"
        return {"id": s.id, "series": sd / "preprocessed", "strain": sd / "strain",
                "landmarks": lm if lm.exists() else None}

    def _run_atlas(self, report, failed):
        members = [s for s in self.m.subjects if s.role == "atlas-subject"]
        tests = [s for s in self.m.subjects if s.role == "test-subject"]
        statuses = {}
        blocked = [s.id for s in members if s.id in failed["strain"]]
        if blocked or len(members) < 2:
            why = f"blocked by {blocked}" if blocked else "needs >= 2 atlas subjects"
            for s in members + tests:
                statuses[s.id] = "blocked" if blocked else f"skipped ({why})"
            if blocked:
                failed["atlas"].update(s.id for s in members + tests)
            return statuses
        conf = self.cfg("atlas")
        cap = conf.get("cap_mm", atlas_mod.DISTANCE_CAP_MM)
        out = self.root / "atlas"
        recs = [self._subject_record(s) for s in members]
        inputs = [p for r in recs for p in (r["series"] / "seg_00.nii.gz", r["strain"],
                                            r["landmarks"]) if p]
        try:
            status, metrics = self._step(report, "atlas", "population", inputs, conf,
                                         [out / n for n in ("consensus.nii.gz", "mesh.ply",
                                                            "statistics.csv", "directions.csv",
                                                            "landmarks.json", "atlas.json", "md")],
                                         lambda: atlas_build_dir(recs, out, cap)[1])
        except Exception as err:
            logger.exception("atlas build failed")
            for s in members + tests:
                statuses[s.id] = f"failed: {type(err).__name__}: {err}"
                failed["atlas"].add(s.id)
            return statuses
        for s in members:
            statuses[s.id] = status
        if metrics is not None:
            report.metrics["atlas"] = metrics
        for s in tests:
            if s.id in failed["strain"]:
                statuses[s.id] = "blocked"
                failed["atlas"].add(s.id)
                continue
            rec = self._subject_record(s)
            md_out = out / "md" / s.id
            try:
                statuses[s.id], _ = self._step(
                    report, "atlas-map", s.id, [rec["series"] / "seg_00.nii.gz", rec["strain"],
                                                out / "statistics.csv"], conf, [md_out],
                    lambda: atlas_map_dir(out, rec, md_out, cap))
            except Exception as err:
                logger.exception("atlas map failed for %s", s.id)
                statuses[s.id] = f"failed: {type(err).__name__}: {err}"
                failed["atlas"].add(s.id)
        return statuses


def _aggregate(statuses: Dict[str, str]) -> str:
    vals = list(statuses.values())
    bad = [v for v in vals if v.startswith("failed") or v == "blocked"]
    if bad:
        return "failed" if len(bad) == len(vals) else "partial"
    if vals and all(v.startswith("skipped") for v in vals):
        return "skipped (up-to-date)" if any("up-to-date" in v for v in vals) else "skipped"
    return "completed"


def run_pipeline(manifest: PipelineManifest, stages: Optional[Sequence[str]] = None) -> RunReport:
    return Pipeline(manifest).run(list(stages) if stages else list(STAGES))
