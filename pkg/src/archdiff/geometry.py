"""Core mesh/jaw types, SE(3) machinery and deterministic geometric primitives.

Coordinates are millimetres throughout; rotations are axis-angle vectors in
radians. All functions here are pure and operate on immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

# Patch size of the built-in template hierarchy (faces per patch).
PATCH_FACES = 64

# Above this many points per tooth the nearest-neighbour search switches from
# exact brute force to a KD-tree (still exact).
_BRUTE_FORCE_LIMIT = 2000

_SMALL_ANGLE = 1e-6


class GeometryError(ValueError):
    """Invalid or degenerate geometric input."""


@dataclass(frozen=True, order=True)
class ToothLabel:
    """FDI two-digit tooth label (11-48): quadrant digit then position digit."""

    code: int

    def __post_init__(self):
        q, p = divmod(self.code, 10)
        if q not in (1, 2, 3, 4) or p not in range(1, 9):
            raise GeometryError(f"invalid FDI code {self.code}")

    @property
    def quadrant(self) -> int:
        return self.code // 10

    @property
    def position(self) -> int:
        return self.code % 10

    @property
    def is_upper(self) -> bool:
        return self.quadrant in (1, 2)

    def __repr__(self):
        return f"ToothLabel({self.code})"


def contiguous_patches(n_faces: int, patch_size: int = PATCH_FACES) -> np.ndarray:
    """Group face indices 0..n_faces-1 into contiguous patches of patch_size."""
    if n_faces % patch_size != 0:
        raise GeometryError(
            f"face count {n_faces} not divisible by patch size {patch_size}"
        )
    return np.arange(n_faces, dtype=np.int64).reshape(-1, patch_size)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ToothMesh:
    """Labelled triangle mesh of a single tooth.

    ``patch_hierarchy`` groups face indices into equal-size non-overlapping
    patches (rows). It is None for ad-hoc meshes whose face count does not
    admit the fixed patch size; encoder operations require it.
    """

    label: ToothLabel
    vertices: np.ndarray  # (n_v, 3) float64, mm
    faces: np.ndarray  # (n_f, 3) int64
    patch_hierarchy: Optional[np.ndarray] = None  # (n_patches, P) int64

    def __post_init__(self):
        v = _freeze(np.asarray(self.vertices, dtype=np.float64))
        f = _freeze(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (n,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (m,3), got {f.shape}")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if len(f) and (
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ).any():
            raise GeometryError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.patch_hierarchy is not None:
            p = _freeze(np.asarray(self.patch_hierarchy, dtype=np.int64))
            if p.ndim != 2:
                raise GeometryError("patch hierarchy must be 2-D")
            flat = np.sort(p.ravel())
            if len(flat) != len(f) or not np.array_equal(flat, np.arange(len(f))):
                raise GeometryError("patches must partition the face set")
            object.__setattr__(self, "patch_hierarchy", p)

    @property
    def n_patches(self) -> int:
        return 0 if self.patch_hierarchy is None else len(self.patch_hierarchy)

    def with_vertices(self, vertices: np.ndarray) -> "ToothMesh":
        """Same topology and label with replaced vertex positions."""
        return ToothMesh(self.label, vertices, self.faces, self.patch_hierarchy)


@dataclass(frozen=True)
class JawModel:
    """A set of tooth meshes keyed by FDI label, plus a sample identifier."""

    teeth: Dict[ToothLabel, ToothMesh]
    metadata: str = ""

    def __post_init__(self):
        if not 1 <= len(self.teeth) <= 32:
            raise GeometryError(f"jaw must carry 1..32 teeth, got {len(self.teeth)}")
        for label, mesh in self.teeth.items():
            if mesh.label != label:
                raise GeometryError(f"mesh labelled {mesh.label} stored under {label}")

    @property
    def labels(self) -> List[ToothLabel]:
        """Labels in ascending FDI order (the canonical stacking order)."""
        return sorted(self.teeth)

    def meshes(self) -> List[ToothMesh]:
        return [self.teeth[k] for k in self.labels]

    def centers(self) -> np.ndarray:
        """(|K|, 3) per-tooth geometric centers in ascending-label order."""
        return np.array([geometric_center(m) for m in self.meshes()])

    def all_vertices(self) -> np.ndarray:
        return np.concatenate([m.vertices for m in self.meshes()], axis=0)

    def translated(self, offset: np.ndarray) -> "JawModel":
        offset = np.asarray(offset, dtype=np.float64)
        return JawModel(
            {k: m.with_vertices(m.vertices + offset) for k, m in self.teeth.items()},
            self.metadata,
        )

    def centered(self) -> Tuple["JawModel", np.ndarray]:
        """Relocate the geometric center of all vertices to the origin.

        Returns the normalized model and the offset that was subtracted.
        """
        offset = self.all_vertices().mean(axis=0)
        return self.translated(-offset), offset


@dataclass(frozen=True)
class TransformParams:
    """Per-tooth 6-DoF parameters (mx my mz | rx ry rz), translation first."""

    per_tooth: Dict[ToothLabel, np.ndarray]

    def __post_init__(self):
        clean = {}
        for label, vec in self.per_tooth.items():
            vec = _freeze(np.asarray(vec, dtype=np.float64).reshape(6))
            if np.linalg.norm(vec[3:]) >= np.pi + 1e-9:
                raise GeometryError(
                    f"rotation for {label} outside canonical range ||r|| < pi"
                )
            clean[label] = vec
        object.__setattr__(self, "per_tooth", clean)

    @property
    def labels(self) -> List[ToothLabel]:
        return sorted(self.per_tooth)

    def stacked(self) -> np.ndarray:
        """z in R^{|K| x 6}, rows in ascending-label order."""
        return np.array([self.per_tooth[k] for k in self.labels])

    @classmethod
    def from_stacked(cls, labels: Iterable[ToothLabel], z: np.ndarray) -> "TransformParams":
        labels = sorted(labels)
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (len(labels), 6):
            raise GeometryError(f"expected z of shape ({len(labels)}, 6), got {z.shape}")
        return cls({k: z[i] for i, k in enumerate(labels)})

    @classmethod
    def zeros(cls, labels: Iterable[ToothLabel]) -> "TransformParams":
        return cls({k: np.zeros(6) for k in labels})


@dataclass(frozen=True)
class PointCloudSample:
    """Per-tooth surface point clouds with a common per-tooth point count."""

    per_tooth: Dict[ToothLabel, np.ndarray]

    def __post_init__(self):
        counts = {len(p) for p in self.per_tooth.values()}
        if len(counts) > 1:
            raise GeometryError(f"per-tooth point counts differ: {sorted(counts)}")
        clean = {
            k: _freeze(np.asarray(p, dtype=np.float64).reshape(-1, 3))
            for k, p in self.per_tooth.items()
        }
        object.__setattr__(self, "per_tooth", clean)

    @property
    def labels(self) -> List[ToothLabel]:
        return sorted(self.per_tooth)

    def stacked(self) -> np.ndarray:
        """All points concatenated in ascending-label order."""
        return np.concatenate([self.per_tooth[k] for k in self.labels], axis=0)


# ---------------------------------------------------------------------------
# SE(3)


def _skew(r: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -r[2], r[1]],
            [r[2], 0.0, -r[0]],
            [-r[1], r[0], 0.0],
        ]
    )


def so3_exp(r: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix for an axis-angle vector.

    Uses the series limits sin(t)/t -> 1 - t^2/6 and (1-cos t)/t^2 -> 1/2 - t^2/24
    below t = 1e-6 to avoid the singularity at zero angle.
    """
    r = np.asarray(r, dtype=np.float64).reshape(3)
    sq = float(r @ r)
    if sq < _SMALL_ANGLE**2:
        a = 1.0 - sq / 6.0
        b = 0.5 - sq / 24.0
    else:
        theta = np.sqrt(sq)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / sq
    omega = _skew(r)
    return np.eye(3) + a * omega + b * (omega @ omega)


def se3_exp(r: np.ndarray, m: np.ndarray) -> np.ndarray:
    """4x4 homogeneous transform [[R, m], [0, 1]] with R = so3_exp(r)."""
    T = np.eye(4)
    T[:3, :3] = so3_exp(r)
    T[:3, 3] = np.asarray(m, dtype=np.float64).reshape(3)
    return T


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, with ||r|| in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        # sin(t)/t ~ 1 near zero; vee already equals r to O(t^3)
        return vee
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        # fix signs from the largest off-diagonal entries
        i = int(np.argmax(axis))
        for j in range(3):
            if j != i and axis[j] > 0 and B[i, j] < 0:
                axis[j] = -axis[j]
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, vee) < 0:
            axis = -axis
        return axis * theta
    return vee * (theta / np.sin(theta))


def canonicalize_axis_angle(r: np.ndarray) -> np.ndarray:
    """Wrap an axis-angle vector so that ||r|| < pi."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(r)
    if theta < np.pi:
        return r
    axis = r / theta
    theta = np.fmod(theta, 2.0 * np.pi)
    if theta > np.pi:
        theta -= 2.0 * np.pi  # negative: flips the axis below
    r = axis * theta
    if abs(theta) >= np.pi:  # exactly pi: nudge inside the open interval
        r = r * ((np.pi - 1e-12) / np.pi)
    return r


def apply_transform(mesh: ToothMesh, T: np.ndarray, pivot: np.ndarray) -> ToothMesh:
    """Rigidly transform a tooth: v -> R (v - pivot) + pivot + m."""
    T = np.asarray(T, dtype=np.float64)
    if np.array_equal(T, np.eye(4)):
        return mesh
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    R, m = T[:3, :3], T[:3, 3]
    verts = (mesh.vertices - pivot) @ R.T + pivot + m
    return mesh.with_vertices(verts)


def geometric_center(mesh: ToothMesh) -> np.ndarray:
    """Arithmetic mean of the mesh vertices."""
    if len(mesh.vertices) == 0:
        raise GeometryError(f"tooth {mesh.label} has no vertices")
    return mesh.vertices.mean(axis=0)


def align_jaw(jaw: JawModel, params: TransformParams) -> JawModel:
    """Apply per-tooth 6-DoF transforms, each about its own geometric center."""
    if set(params.per_tooth) != set(jaw.teeth):
        raise GeometryError("transform labels do not match jaw labels")
    moved = {}
    for label, mesh in jaw.teeth.items():
        vec = params.per_tooth[label]
        T = se3_exp(vec[3:], vec[:3])
        moved[label] = apply_transform(mesh, T, geometric_center(mesh))
    return JawModel(moved, jaw.metadata)


# ---------------------------------------------------------------------------
# Surface sampling


def face_areas(mesh: ToothMesh) -> np.ndarray:
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_points(mesh: ToothMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface sampling, deterministic for a fixed seed."""
    if n < 1:
        raise GeometryError("need at least one sample point")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise GeometryError(f"tooth {mesh.label} has zero surface area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(areas), size=n, p=areas / total)
    u, w = rng.random(n), rng.random(n)
    # uniform barycentric coordinates on each picked triangle
    r1 = np.sqrt(u)
    b0, b1 = 1.0 - r1, r1 * (1.0 - w)
    b2 = r1 * w
    v = mesh.vertices
    tri = mesh.faces[idx]
    return (
        b0[:, None] * v[tri[:, 0]]
        + b1[:, None] * v[tri[:, 1]]
        + b2[:, None] * v[tri[:, 2]]
    )


def sample_jaw_points(jaw: JawModel, n_per_tooth: int, seed: int) -> PointCloudSample:
    """Sample every tooth with a per-tooth seed derived from the base seed."""
    clouds = {}
    for i, label in enumerate(jaw.labels):
        clouds[label] = sample_points(jaw.teeth[label], n_per_tooth, seed + i)
    return PointCloudSample(clouds)


# ---------------------------------------------------------------------------
# Distances


def _nearest_sq_dist(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Squared distance from each query point to its nearest reference point."""
    if max(len(query), len(ref)) <= _BRUTE_FORCE_LIMIT:
        # direct differences (chunked) keep identical points at exactly zero
        out = np.empty(len(query))
        step = max(1, (1 << 22) // max(len(ref), 1))
        for i in range(0, len(query), step):
            diff = query[i : i + step, None, :] - ref[None, :, :]
            out[i : i + step] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
        return out
    dist, _ = cKDTree(ref).query(query, k=1)
    return dist**2


def chamfer_pair(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbour distance between two point sets."""
    return float(_nearest_sq_dist(a, b).mean() + _nearest_sq_dist(b, a).mean())


def chamfer_per_tooth(pred: JawModel, gt: JawModel) -> float:
    """Sum over teeth of the symmetric chamfer distance between vertex sets."""
    missing = set(pred.teeth) ^ set(gt.teeth)
    if missing:
        raise GeometryError(f"label sets differ: {sorted(l.code for l in missing)}")
    return sum(
        chamfer_pair(pred.teeth[k].vertices, gt.teeth[k].vertices) for k in pred.labels
    )


def distance_matrix(model: JawModel) -> np.ndarray:
    """|K| x |K| matrix of L1 distances between tooth centers (ascending labels)."""
    c = model.centers()
    return np.abs(c[:, None, :] - c[None, :, :]).sum(axis=2)
