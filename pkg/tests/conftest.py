import numpy as np
import pytest

from archdiff.geometry import JawModel, ToothLabel, ToothMesh

CUBE_VERTS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=np.float64,
)

CUBE_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],  # front
        [2, 3, 7], [2, 7, 6],  # back
        [1, 2, 6], [1, 6, 5],  # right
        [3, 0, 4], [3, 4, 7],  # left
    ],
    dtype=np.int64,
)


def cube_mesh(label=ToothLabel(11), scale=1.0, offset=(0.0, 0.0, 0.0)):
    return ToothMesh(label, CUBE_VERTS * scale + np.asarray(offset), CUBE_FACES)


def sphere_mesh(label=ToothLabel(11), subdiv=3):
    """Unit sphere built by subdividing an octahedron and renormalizing."""
    verts = [
        (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    ]
    faces = [
        (0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
        (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5),
    ]
    verts = [np.array(v, dtype=np.float64) for v in verts]
    for _ in range(subdiv):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return ToothMesh(label, np.array(verts), np.array(faces, dtype=np.int64))


def random_cloud_jaw(rng, labels=(11, 12), n_points=50, spread=5.0):
    """Jaw whose 'meshes' are random point sets with dummy faces (for metric tests)."""
    teeth = {}
    for code in labels:
        pts = rng.normal(scale=spread, size=(n_points, 3))
        faces = np.array([[0, 1, 2]], dtype=np.int64)
        teeth[ToothLabel(code)] = ToothMesh(ToothLabel(code), pts, faces)
    return JawModel(teeth, metadata="random")


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)
