"""Synthetic dental-arch generation and perturbed training-pair construction.

Ground-truth jaws are assembled from four canonical tooth templates placed
tangent-aligned along an elliptical arch curve. Templates are deformed
subdivided cubes with 1,024 faces grouped into 16 contiguous patches of 64,
giving every tooth a built-in patch hierarchy (no re-meshing needed).
"Pre-orthodontic" inputs are produced by per-tooth random rigid disturbances
whose exact inverses become the ground-truth transform parameters.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .geometry import (
    PATCH_FACES,
    GeometryError,
    JawModel,
    ToothLabel,
    ToothMesh,
    TransformParams,
    apply_transform,
    canonicalize_axis_angle,
    contiguous_patches,
    geometric_center,
    se3_exp,
)
from .meshio import MeshIOError, read_obj, write_obj

TEMPLATE_SUBDIV = 3  # 16 root triangles * 4**3 = 1,024 faces

# mesiodistal width, bucco-lingual depth, crown height (mm, full extents)
_SHAPES = {
    "incisor": dict(width=5.0, depth=3.5, height=9.0, taper_x=0.15, taper_y=0.55, rounding=0.35),
    "canine": dict(width=5.5, depth=4.5, height=10.0, taper_x=0.45, taper_y=0.45, rounding=0.5),
    "premolar": dict(width=6.5, depth=6.0, height=8.0, taper_x=0.25, taper_y=0.25, rounding=0.6),
    "molar": dict(width=9.0, depth=8.0, height=7.5, taper_x=0.15, taper_y=0.15, rounding=0.55),
}

_POSITION_KIND = {
    1: "incisor", 2: "incisor", 3: "canine", 4: "premolar",
    5: "premolar", 6: "molar", 7: "molar", 8: "molar",
}

_TOOTH_GAP = 1.0  # mm of clearance between adjacent crowns along the arch


@dataclass(frozen=True)
class ArchSpec:
    """Geometry of the synthetic dental arch."""

    arch_width: float = 60.0
    arch_depth: float = 48.0
    n_teeth_per_jaw: int = 14
    tooth_scale_range: Tuple[float, float] = (0.9, 1.1)
    jaw_separation: float = 2.0

    def __post_init__(self):
        if min(self.arch_width, self.arch_depth, self.jaw_separation) <= 0:
            raise GeometryError("arch dimensions must be positive")
        if not 8 <= self.n_teeth_per_jaw <= 16:
            raise GeometryError("n_teeth_per_jaw must lie in [8, 16]")
        lo, hi = self.tooth_scale_range
        if not 0 < lo <= hi:
            raise GeometryError("invalid tooth_scale_range")


@dataclass(frozen=True)
class PerturbSpec:
    """Random disturbance applied per tooth to simulate pre-orthodontic states."""

    trans_sigma: float = 1.0  # mm, per-axis Gaussian
    trans_clip: float = 2.5  # mm, per-axis clip
    rot_max: float = 15.0  # degrees, uniform angle
    pairs_per_model: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.trans_sigma, self.trans_clip, self.rot_max) < 0:
            raise GeometryError("perturbation magnitudes must be non-negative")
        if self.rot_max >= 180.0:
            raise GeometryError("rot_max must stay below 180 degrees")
        if self.pairs_per_model < 1:
            raise GeometryError("pairs_per_model must be at least 1")


@dataclass(frozen=True)
class DatasetRecord:
    """One training pair: perturbed input, aligned ground truth, and the
    transform z0 that carries the input back onto the ground truth."""

    record_id: str
    patient_id: str
    gt: JawModel
    input: JawModel
    z0: TransformParams


# ---------------------------------------------------------------------------
# Tooth templates


def _base_block() -> Tuple[np.ndarray, np.ndarray]:
    """Cube with fan-split top/bottom: 10 vertices, 16 outward triangles."""
    c = [
        (-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1),
        (-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1),
    ]
    top, bot = (0, 0, 1), (0, 0, -1)
    verts = np.array(c + [top, bot], dtype=np.float64)
    faces = [
        # four side walls, two triangles each
        (0, 1, 5), (0, 5, 4),
        (1, 2, 6), (1, 6, 5),
        (2, 3, 7), (2, 7, 6),
        (3, 0, 4), (3, 4, 7),
        # top fan around vertex 8
        (4, 5, 8), (5, 6, 8), (6, 7, 8), (7, 4, 8),
        # bottom fan around vertex 9
        (1, 0, 9), (2, 1, 9), (3, 2, 9), (0, 3, 9),
    ]
    return verts, np.array(faces, dtype=np.int64)


def _subdivide_welded(verts: np.ndarray, faces: np.ndarray, levels: int):
    """Midpoint-subdivide keeping each root triangle's descendants contiguous.

    Works on an integer lattice (coords scaled by 2**levels) so midpoints weld
    exactly and the construction is bit-deterministic.
    """
    scale = 2**levels
    index_of: Dict[Tuple[int, int, int], int] = {}
    points: List[Tuple[int, int, int]] = []

    def intern(p) -> int:
        key = (int(p[0]), int(p[1]), int(p[2]))
        if key not in index_of:
            index_of[key] = len(points)
            points.append(key)
        return index_of[key]

    out_faces: List[Tuple[int, int, int]] = []

    def recurse(a, b, c, level):
        if level == 0:
            out_faces.append((intern(a), intern(b), intern(c)))
            return
        ab = (a + b) // 2
        bc = (b + c) // 2
        ca = (c + a) // 2
        recurse(a, ab, ca, level - 1)
        recurse(ab, b, bc, level - 1)
        recurse(ca, bc, c, level - 1)
        recurse(ab, bc, ca, level - 1)

    int_verts = np.rint(verts * scale).astype(np.int64)
    for f in faces:
        recurse(int_verts[f[0]], int_verts[f[1]], int_verts[f[2]], levels)

    new_verts = np.array(points, dtype=np.float64) / scale
    return new_verts, np.array(out_faces, dtype=np.int64)


def _round_xy(xy: np.ndarray, amount: float) -> np.ndarray:
    """Blend the square cross-section toward a circle."""
    s = np.abs(xy).max(axis=1)
    norm = np.linalg.norm(xy, axis=1)
    factor = np.where(norm > 1e-12, s / np.where(norm > 1e-12, norm, 1.0), 1.0)
    return xy * ((1.0 - amount) + amount * factor)[:, None]


@functools.lru_cache(maxsize=None)
def tooth_template(kind: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(vertices, faces, patch_hierarchy) of a canonical tooth, crown toward +z."""
    if kind not in _SHAPES:
        raise GeometryError(f"unknown tooth kind {kind!r}")
    shape = _SHAPES[kind]
    verts, faces = _subdivide_welded(*_base_block(), levels=TEMPLATE_SUBDIV)
    xy = _round_xy(verts[:, :2].copy(), shape["rounding"])
    z = verts[:, 2]
    crown = (z + 1.0) / 2.0  # 0 at root, 1 at crown tip
    x = xy[:, 0] * (1.0 - shape["taper_x"] * crown)
    y = xy[:, 1] * (1.0 - shape["taper_y"] * crown)
    out = np.stack(
        [
            x * shape["width"] / 2.0,
            y * shape["depth"] / 2.0,
            z * shape["height"] / 2.0,
        ],
        axis=1,
    )
    hierarchy = contiguous_patches(len(faces), PATCH_FACES)
    out.flags.writeable = False
    faces.flags.writeable = False
    hierarchy.flags.writeable = False
    return out, faces, hierarchy


def kind_for_position(position: int) -> str:
    return _POSITION_KIND[position]


# ---------------------------------------------------------------------------
# Arch assembly


def _arch_points(width: float, depth: float, u: np.ndarray) -> np.ndarray:
    """Planar half-ellipse arch: u in [-pi/2, pi/2], front of the arch at u=0."""
    return np.stack(
        [0.5 * width * np.sin(u), depth * (np.cos(u) - 1.0)], axis=-1
    )


def _arc_length_table(width: float, depth: float, n: int = 4096):
    u = np.linspace(-np.pi / 2, np.pi / 2, n)
    pts = _arch_points(width, depth, u)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return u, s


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_FLIP_X = np.diag([1.0, -1.0, -1.0])  # pi rotation about local x (det +1)


def generate_jaw(spec: ArchSpec, seed: int) -> JawModel:
    """Procedurally build an aligned double-arch jaw model, centered at origin."""
    rng = np.random.default_rng(seed)
    n_side = spec.n_teeth_per_jaw // 2
    extra = spec.n_teeth_per_jaw - 2 * n_side  # odd counts give quadrant 1/3 one more
    u_tab, s_tab = _arc_length_table(spec.arch_width, spec.arch_depth)
    s_front = float(np.interp(0.0, u_tab, s_tab))
    s_max = s_tab[-1]

    teeth: Dict[ToothLabel, ToothMesh] = {}
    # fixed draw order: quadrants 1..4, positions ascending, so the layout is
    # a pure function of the seed
    for quadrant in (1, 2, 3, 4):
        upper = quadrant in (1, 2)
        n_pos = n_side + (extra if quadrant in (1, 3) else 0)
        side = -1.0 if quadrant in (1, 4) else 1.0
        cursor = _TOOTH_GAP / 2.0
        for position in range(1, n_pos + 1):
            kind = kind_for_position(position)
            scale = float(rng.uniform(*spec.tooth_scale_range))
            width = _SHAPES[kind]["width"] * scale
            height = _SHAPES[kind]["height"] * scale
            s_center = cursor + width / 2.0
            cursor += width + _TOOTH_GAP
            s_arc = s_front + side * s_center
            if not 0.0 <= s_arc <= s_max:
                raise GeometryError(
                    f"arch too small for {spec.n_teeth_per_jaw} teeth "
                    f"(ran out of arc length in quadrant {quadrant})"
                )
            u = float(np.interp(s_arc, s_tab, u_tab))
            xy = _arch_points(spec.arch_width, spec.arch_depth, np.array([u]))[0]
            # tangent of the arch curve at u
            tan = np.array(
                [0.5 * spec.arch_width * np.cos(u), -spec.arch_depth * np.sin(u)]
            )
            psi = float(np.arctan2(tan[1], tan[0]))
            R = _rot_z(psi)
            if upper:
                R = R @ _FLIP_X
                z_center = spec.jaw_separation / 2.0 + height / 2.0
            else:
                z_center = -spec.jaw_separation / 2.0 - height / 2.0
            center = np.array([xy[0], xy[1], z_center])

            label = ToothLabel(quadrant * 10 + position)
            tverts, tfaces, hierarchy = tooth_template(kind)
            verts = (tverts * scale) @ R.T + center
            teeth[label] = ToothMesh(label, verts, tfaces, hierarchy)

    jaw = JawModel(teeth, metadata=f"seed{seed}")
    centered, _ = jaw.centered()
    return centered


# ---------------------------------------------------------------------------
# Perturbation pairs


def perturb(gt: JawModel, spec: PerturbSpec, seed: int, record_id: str = "", patient_id: str = "") -> DatasetRecord:
    """Randomly disturb every tooth; z0 stores the exact inverse transform."""
    rng = np.random.default_rng(seed)
    rot_max_rad = np.deg2rad(spec.rot_max)
    moved: Dict[ToothLabel, ToothMesh] = {}
    z0: Dict[ToothLabel, np.ndarray] = {}
    for label in gt.labels:
        mesh = gt.teeth[label]
        dm = rng.normal(scale=spec.trans_sigma, size=3) if spec.trans_sigma > 0 else np.zeros(3)
        dm = np.clip(dm, -spec.trans_clip, spec.trans_clip)
        axis = rng.normal(size=3)
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        angle = rng.uniform(0.0, rot_max_rad) if rot_max_rad > 0 else 0.0
        r = axis * angle
        moved[label] = apply_transform(mesh, se3_exp(r, dm), geometric_center(mesh))
        z0[label] = np.concatenate([-dm, canonicalize_axis_angle(-r)])
    return DatasetRecord(
        record_id=record_id,
        patient_id=patient_id or gt.metadata,
        gt=gt,
        input=JawModel(moved, metadata=record_id or gt.metadata),
        z0=TransformParams(z0),
    )


def generate_records(
    n_patients: int,
    arch: ArchSpec,
    spec: PerturbSpec,
    test_fraction: float = 0.1,
) -> Iterator[Tuple[DatasetRecord, str]]:
    """Yield (record, split) pairs; all pairs of a held-out patient go to 'test'.

    Seeding is per record (base seed + record index) so that parallel and
    serial generation produce identical corpora.
    """
    n_test = int(round(n_patients * test_fraction)) if test_fraction > 0 else 0
    for p in range(n_patients):
        patient_id = f"p{p:03d}"
        gt = generate_jaw(arch, seed=spec.seed + 1_000_000 + p)
        gt = JawModel(gt.teeth, metadata=patient_id)
        split = "test" if p >= n_patients - n_test else "train"
        for j in range(spec.pairs_per_model):
            record_index = p * spec.pairs_per_model + j
            record_id = f"{patient_id}_r{j:02d}"
            yield (
                perturb(gt, spec, seed=spec.seed + record_index,
                        record_id=record_id, patient_id=patient_id),
                split,
            )


# ---------------------------------------------------------------------------
# Persistence


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    arch: ArchSpec
    perturb: PerturbSpec
    n_patients: int
    test_fraction: float
    records: List[dict] = field(default_factory=list)

    def ids(self, split: Optional[str] = None) -> List[str]:
        return [r["id"] for r in self.records if split is None or r["split"] == split]


def _manifest_payload(manifest: DatasetManifest) -> str:
    payload = {
        "format": "archdiff-dataset-v1",
        "arch": vars(manifest.arch) | {"tooth_scale_range": list(manifest.arch.tooth_scale_range)},
        "perturb": vars(manifest.perturb),
        "n_patients": manifest.n_patients,
        "test_fraction": manifest.test_fraction,
        "records": manifest.records,
    }
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def build_dataset(
    n_patients: int,
    arch: ArchSpec,
    spec: PerturbSpec,
    out_dir,
    test_fraction: float = 0.1,
) -> DatasetManifest:
    """Generate and persist a full corpus; returns the written manifest."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise MeshIOError(f"output directory {root} is not writable: {exc}") from exc

    entries = []
    for record, split in generate_records(n_patients, arch, spec, test_fraction):
        rec_dir = root / "records" / record.record_id
        for side, jaw in (("gt", record.gt), ("input", record.input)):
            side_dir = rec_dir / side
            side_dir.mkdir(parents=True, exist_ok=True)
            for label in jaw.labels:
                mesh = jaw.teeth[label]
                write_obj(side_dir / f"{label.code}.obj", mesh.vertices, mesh.faces)
        z = record.z0.stacked()
        lines = [" ".join("%.17g" % x for x in row) for row in z]
        (rec_dir / "z0.txt").write_text("\n".join(lines) + "\n")
        entries.append(
            {
                "id": record.record_id,
                "patient": record.patient_id,
                "split": split,
                "n_teeth": len(record.gt.teeth),
            }
        )

    manifest = DatasetManifest(
        root=root, arch=arch, perturb=spec, n_patients=n_patients,
        test_fraction=test_fraction, records=entries,
    )
    (root / "manifest.json").write_text(_manifest_payload(manifest))
    return manifest


def manifest_up_to_date(manifest: DatasetManifest) -> bool:
    """True if the manifest on disk matches what a rebuild would write."""
    path = Path(manifest.root) / "manifest.json"
    return path.exists() and path.read_text() == _manifest_payload(manifest)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    try:
        payload = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise MeshIOError(f"cannot read dataset manifest under {root}: {exc}") from exc
    arch_kw = dict(payload["arch"])
    arch_kw["tooth_scale_range"] = tuple(arch_kw["tooth_scale_range"])
    return DatasetManifest(
        root=root,
        arch=ArchSpec(**arch_kw),
        perturb=PerturbSpec(**payload["perturb"]),
        n_patients=payload["n_patients"],
        test_fraction=payload["test_fraction"],
        records=payload["records"],
    )


def _load_side(rec_dir: Path, side: str, sample_id: str) -> JawModel:
    side_dir = rec_dir / side
    teeth = {}
    for obj_path in sorted(side_dir.glob("*.obj")):
        label = ToothLabel(int(obj_path.stem))
        verts, faces = read_obj(obj_path)
        hierarchy = (
            contiguous_patches(len(faces), PATCH_FACES)
            if len(faces) % PATCH_FACES == 0 and len(faces)
            else None
        )
        teeth[label] = ToothMesh(label, verts, faces, hierarchy)
    return JawModel(teeth, metadata=sample_id)


def load_record(manifest: DatasetManifest, record_id: str) -> DatasetRecord:
    rec_dir = Path(manifest.root) / "records" / record_id
    entry = next(r for r in manifest.records if r["id"] == record_id)
    gt = _load_side(rec_dir, "gt", entry["patient"])
    inp = _load_side(rec_dir, "input", record_id)
    z = np.loadtxt(rec_dir / "z0.txt", dtype=np.float64).reshape(-1, 6)
    z0 = TransformParams.from_stacked(gt.labels, z)
    return DatasetRecord(
        record_id=record_id, patient_id=entry["patient"], gt=gt, input=inp, z0=z0
    )
