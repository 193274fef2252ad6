"""Round trips through the on-disk formats."""

import numpy as np
import pytest

from aladdin import io
from aladdin.registration import DisplacementField
from aladdin.surface import StrainField, SurfaceMesh
from aladdin.volume import LabeledVolume, PhaseSeries


def test_volume_round_trip_keeps_spacing(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(5, 6, 7))
    io.save_volume(tmp_path / "v.nii.gz", arr, (1.5, 2.0, 0.75), np.float64)
    back, spacing = io.load_volume(tmp_path / "v.nii.gz")
    np.testing.assert_array_equal(back, arr)
    assert spacing == (1.5, 2.0, 0.75)


def test_bool_masks_stored_as_bytes(tmp_path):
    mask = np.zeros((4, 4, 4), bool)
    mask[1:3, 1:3, 1:3] = True
    io.save_volume(tmp_path / "m.nii.gz", mask, (1, 1, 1))
    back, _ = io.load_volume(tmp_path / "m.nii.gz")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back.astype(bool), mask)


def test_series_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    phases = []
    for t in range(3):
        seg = rng.random((6, 6, 5)) > 0.5
        phases.append(LabeledVolume(rng.random((6, 6, 5)), (2.0, 2.0, 3.0), seg, t))
    io.save_series(PhaseSeries(phases), tmp_path)
    back = io.load_series(tmp_path)
    assert len(back) == 3
    for a, b in zip(phases, back.phases):
        np.testing.assert_array_equal(a.intensities, b.intensities)
        np.testing.assert_array_equal(a.segmentation, b.segmentation)
        assert b.spacing == (2.0, 2.0, 3.0)


def test_series_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.load_series(tmp_path / "missing")
    with pytest.raises(FileNotFoundError, match="phase_XX"):
        io.load_series(tmp_path)


def test_dvf_and_sidecar(tmp_path):
    vec = np.random.default_rng(2).normal(size=(4, 5, 6, 3))
    path = io.save_dvf(tmp_path, DisplacementField(vec, (1.0, 2.0, 3.0), 0, 7), {"final_loss": -1.25})
    assert path.name == "dvf_00_to_07.nii.gz"
    meta = io.read_json(tmp_path / "dvf_00_to_07.json")
    assert meta["units"] == "mm" and meta["final_loss"] == -1.25
    back = io.load_dvf(path)
    np.testing.assert_array_equal(back.vectors, vec)
    assert (back.source_phase, back.target_phase, back.spacing) == (0, 7, (1.0, 2.0, 3.0))


def test_mesh_round_trip_with_properties(tmp_path):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float) + 0.1
    tris = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    io.save_mesh(tmp_path / "m.ply", verts, tris, {"mag": np.arange(4.0)}, {"lam": np.full(4, 0.5)})
    v, t, vp, fp = io.load_mesh(tmp_path / "m.ply")
    np.testing.assert_array_equal(v, verts)
    np.testing.assert_array_equal(t, tris)
    np.testing.assert_array_equal(vp["mag"], np.arange(4.0))
    np.testing.assert_array_equal(fp["lam"], np.full(4, 0.5))
    mesh = io.load_surface(tmp_path / "m.ply")
    assert isinstance(mesh, SurfaceMesh) and mesh.triangles.shape == (4, 3)


def test_strain_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    P, M = 2, 3
    vals = np.sort(rng.normal(size=(P, M, 2)), axis=-1)[..., ::-1]
    dirs = np.zeros((P, M, 2, 3))
    dirs[..., 0, 0] = 1.0
    dirs[..., 1, 1] = 1.0
    tensors = np.einsum("pmk,pmki,pmkj->pmij", vals, dirs, dirs)
    field = StrainField(tensors, vals, dirs, rng.normal(size=(P, M)) * 1e-12, rng.random((P, 5)))
    io.save_strain_csv(tmp_path / "s.csv", field)
    io.save_dvf_magnitude_csv(tmp_path / "d.csv", field)
    mags = io.load_dvf_magnitude_csv(tmp_path / "d.csv")
    back = io.load_strain_csv(tmp_path / "s.csv", mags)
    # repr formatting is a lossless float round trip
    np.testing.assert_array_equal(back.principal_values, vals)
    np.testing.assert_array_equal(back.principal_directions, dirs)
    np.testing.assert_array_equal(back.normal_eigenvalues, field.normal_eigenvalues)
    np.testing.assert_array_equal(back.dvf_magnitude, field.dvf_magnitude)
    np.testing.assert_allclose(back.tensors, tensors, atol=1e-15)


def test_json_is_canonical(tmp_path):
    data = {"b": np.float64(0.1), "a": [np.int64(3), np.nan, np.bool_(True)], "p": tmp_path}
    io.write_json(tmp_path / "x.json", data)
    io.write_json(tmp_path / "y.json", dict(reversed(list(data.items()))))
    assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()
    back = io.read_json(tmp_path / "x.json")
    assert back["a"] == [3, None, True] and back["b"] == 0.1


def test_csv_formatting(tmp_path):
    io.write_csv(tmp_path / "t.csv", ("k", "v"), [(1, 0.1), (True, 1 / 3), ("s", np.float32(2.5))])
    text = (tmp_path / "t.csv").read_text()
    assert text == "k,v\n1,0.1\n1,0.3333333333333333\ns,2.5\n"
    assert io.read_csv(tmp_path / "t.csv")[1] == {"k": "1", "v": "0.3333333333333333"}
