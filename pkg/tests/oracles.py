"""Independent brute-force oracles used to cross-check the library.

Everything here is deliberately written from first principles (loops,
recursion, quaternions) and must stay independent of the implementations
under test.
"""

import numpy as np


def quat_from_axis_angle(r):
    """Unit quaternion (w, x, y, z) for an axis-angle vector."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = r / theta
    return np.concatenate([[np.cos(theta / 2.0)], np.sin(theta / 2.0) * axis])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_via_quaternion(r):
    """Axis-angle -> rotation matrix through the quaternion route."""
    return quat_to_matrix(quat_from_axis_angle(r))


def chamfer_brute(a, b):
    """Eq.-style symmetric chamfer by explicit O(n^2) loops."""
    fwd = 0.0
    for x in a:
        best = min(float(np.dot(x - y, x - y)) for y in b)
        fwd += best
    bwd = 0.0
    for y in b:
        best = min(float(np.dot(x - y, x - y)) for x in a)
        bwd += best
    return fwd / len(a) + bwd / len(b)


def mean_pair_distance(a, b):
    """Mean Euclidean distance over an explicit list of corresponding pairs."""
    dists = [float(np.linalg.norm(x - y)) for x, y in zip(a, b)]
    return sum(dists) / len(dists)


def frechet_recursive(p, q):
    """Discrete Frechet distance via the classical memoized recursion."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    memo = {}

    def d(i, j):
        return float(np.linalg.norm(p[i] - q[j]))

    def c(i, j):
        if (i, j) in memo:
            return memo[(i, j)]
        if i == 0 and j == 0:
            val = d(0, 0)
        elif j == 0:
            val = max(c(i - 1, 0), d(i, 0))
        elif i == 0:
            val = max(c(0, j - 1), d(0, j))
        else:
            val = max(min(c(i - 1, j), c(i - 1, j - 1), c(i, j - 1)), d(i, j))
        memo[(i, j)] = val
        return val

    import sys

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, len(p) * len(q) + 100))
    try:
        return c(len(p) - 1, len(q) - 1)
    finally:
        sys.setrecursionlimit(old)


def hausdorff(p, q):
    """Symmetric Hausdorff distance between two point sequences."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    return max(d.min(axis=1).max(), d.min(axis=0).max())
