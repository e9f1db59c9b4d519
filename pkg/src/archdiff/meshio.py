"""Wavefront-style ASCII mesh persistence and jaw manifests.

Meshes are stored one file per tooth (`v x y z` / `f i j k` lines, 1-based
face indices) with a JSON manifest tying tooth files to FDI labels and
recording the normalization offset. Floats are written with 17 significant
digits so that re-reading reproduces the array bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import (
    PATCH_FACES,
    GeometryError,
    JawModel,
    ToothLabel,
    ToothMesh,
    contiguous_patches,
)


class MeshIOError(OSError):
    """Mesh or manifest file could not be read or written."""


def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = []
    for v in np.asarray(vertices, dtype=np.float64):
        lines.append("v %.17g %.17g %.17g" % (v[0], v[1], v[2]))
    for f in np.asarray(faces):
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MeshIOError(f"cannot read mesh file {path}: {exc}") from exc
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            # tolerate v/vt/vn face syntax; keep the vertex index only
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return verts, faces


def _tooth_filename(sample_id: str, label: ToothLabel) -> str:
    return f"{sample_id}_{label.code}.obj"


def save_jaw(
    jaw: JawModel,
    out_dir,
    normalization_offset: Optional[np.ndarray] = None,
) -> Path:
    """Write one OBJ per tooth plus the jaw manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MeshIOError(f"cannot create {out_dir}: {exc}") from exc
    sample_id = jaw.metadata or "jaw"
    entries = []
    for label in jaw.labels:
        mesh = jaw.teeth[label]
        fname = _tooth_filename(sample_id, label)
        write_obj(out_dir / fname, mesh.vertices, mesh.faces)
        entries.append(
            {
                "label": label.code,
                "file": fname,
                "patch_size": None
                if mesh.patch_hierarchy is None
                else int(mesh.patch_hierarchy.shape[1]),
            }
        )
    offset = (
        [0.0, 0.0, 0.0]
        if normalization_offset is None
        else [float(x) for x in normalization_offset]
    )
    manifest = {
        "sample_id": sample_id,
        "normalization_offset": offset,
        "teeth": entries,
    }
    manifest_path = out_dir / f"{sample_id}.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_jaw(manifest_path) -> Tuple[JawModel, np.ndarray]:
    """Read a jaw manifest and its tooth meshes; returns (jaw, offset)."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise MeshIOError(f"cannot read manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    teeth = {}
    for entry in manifest["teeth"]:
        label = ToothLabel(int(entry["label"]))
        verts, faces = read_obj(base / entry["file"])
        patch_size = entry.get("patch_size")
        hierarchy = None
        if patch_size:
            hierarchy = contiguous_patches(len(faces), int(patch_size))
        teeth[label] = ToothMesh(label, verts, faces, hierarchy)
    jaw = JawModel(teeth, metadata=manifest.get("sample_id", ""))
    return jaw, np.array(manifest.get("normalization_offset", [0.0, 0.0, 0.0]))


def load_tooth(path, label: ToothLabel, patch_size: Optional[int] = PATCH_FACES) -> ToothMesh:
    """Read a single tooth OBJ, rebuilding the contiguous patch hierarchy if possible."""
    verts, faces = read_obj(path)
    hierarchy = None
    if patch_size and len(faces) % patch_size == 0 and len(faces) > 0:
        hierarchy = contiguous_patches(len(faces), patch_size)
    return ToothMesh(label, verts, faces, hierarchy)
