import numpy as np
import pytest

from archdiff.geometry import ToothLabel
from archdiff.meshio import MeshIOError, load_jaw, load_tooth, read_obj, save_jaw, write_obj
from archdiff.synth import ArchSpec, generate_jaw

from conftest import cube_mesh


def test_obj_roundtrip_bit_exact(tmp_path, rng):
    verts = rng.normal(size=(20, 3)) * 7.3
    faces = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8]], dtype=np.int64)
    path = tmp_path / "m.obj"
    write_obj(path, verts, faces)
    v2, f2 = read_obj(path)
    assert np.array_equal(verts, v2)
    assert np.array_equal(faces, f2)


def test_obj_face_slash_syntax(tmp_path):
    path = tmp_path / "m.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n")
    v, f = read_obj(path)
    assert v.shape == (3, 3)
    assert np.array_equal(f, [[0, 1, 2]])


def test_read_missing_file(tmp_path):
    with pytest.raises(MeshIOError):
        read_obj(tmp_path / "nope.obj")


def test_save_load_jaw_roundtrip(tmp_path):
    jaw = generate_jaw(ArchSpec(n_teeth_per_jaw=8), seed=1)
    jaw2, offset = load_jaw(save_jaw(jaw, tmp_path, normalization_offset=[1.0, 2.0, 3.0]))
    assert np.allclose(offset, [1, 2, 3])
    assert jaw2.labels == jaw.labels
    for k in jaw.labels:
        assert np.array_equal(jaw2.teeth[k].vertices, jaw.teeth[k].vertices)
        assert np.array_equal(jaw2.teeth[k].faces, jaw.teeth[k].faces)
        assert jaw2.teeth[k].n_patches == jaw.teeth[k].n_patches


def test_tooth_filenames_follow_pattern(tmp_path):
    jaw = generate_jaw(ArchSpec(n_teeth_per_jaw=8), seed=1)
    save_jaw(jaw, tmp_path)
    sample = jaw.metadata
    for label in jaw.labels:
        assert (tmp_path / f"{sample}_{label.code}.obj").exists()


def test_load_tooth_without_hierarchy(tmp_path):
    mesh = cube_mesh()
    path = tmp_path / "cube.obj"
    write_obj(path, mesh.vertices, mesh.faces)
    loaded = load_tooth(path, ToothLabel(11))
    assert loaded.patch_hierarchy is None  # 12 faces don't divide into 64
    assert np.array_equal(loaded.vertices, mesh.vertices)
