"""Rigid-body math, pinhole camera model, depth backprojection and exact
nearest-neighbor queries shared by all pipeline stages.

Conventions used throughout the package:

* every frame's point cloud lives in that frame's camera coordinates
  (camera at the origin, x right / columns, y down / rows, z forward);
* quaternions are scalar-first ``(w, x, y, z)`` and kept unit-norm;
* a pose track stores per-frame poses ``T_f`` mapping a shared reference
  coordinate system into frame ``f``; the motion carrying frame ``i`` data
  into frame ``j`` is the relative transform ``T_j o inverse(T_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, InputError

# ---------------------------------------------------------------------------
# quaternion / rotation helpers


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise InputError("zero quaternion")
    q = q / n
    # canonical sign: nonnegative scalar part
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def skew(v):
    """Cross-product matrices for one vector (3,) or a batch (n, 3)."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out[0] if single else out


def rotvec_to_matrix(rv):
    """Rodrigues formula for one rotation vector (3,) or a batch (n, 3)."""
    rv = np.asarray(rv, dtype=float)
    single = rv.ndim == 1
    rv = np.atleast_2d(rv)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = np.where(small[..., None], 0.0, rv / np.where(theta == 0, 1.0, theta))
    K = skew(axis)
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    R = np.eye(3) + s * K + (1 - c) * (K @ K)
    R[small] = np.eye(3) + skew(rv[small])  # first order for tiny angles
    return R[0] if single else R


def rotation_angle_deg(R):
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


class RigidMotion:
    """An element of SE(3): unit quaternion plus translation in meters."""

    __slots__ = ("q", "t")

    def __init__(self, quaternion=None, translation=None):
        self.q = quat_normalize(quaternion) if quaternion is not None else np.array([1.0, 0, 0, 0])
        self.t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float).copy()

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, rv, t=None):
        return cls(matrix_to_quat(rotvec_to_matrix(rv)), t)

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """self after other: (self o other)(x) = self(other(x))."""
        q = quat_multiply(self.q, other.q)
        t = quat_to_matrix(self.q) @ other.t + self.t
        return RigidMotion(q, t)

    def inverse(self) -> "RigidMotion":
        qc = quat_conjugate(self.q)
        return RigidMotion(qc, -(quat_to_matrix(qc) @ self.t))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        R = self.rotation_matrix
        if points.ndim == 1:
            return R @ points + self.t
        return points @ R.T + self.t

    def rotate(self, vectors):
        vectors = np.asarray(vectors, dtype=float)
        R = self.rotation_matrix
        if vectors.ndim == 1:
            return R @ vectors
        return vectors @ R.T

    def angle_deg(self):
        return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0]))))

    def __repr__(self):
        return f"RigidMotion(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


# ---------------------------------------------------------------------------
# camera model and depth images


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("camera focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ConfigError("camera principal point must lie inside the image")

    def project(self, points):
        """Project camera-frame points; returns (u, v) pixel coords and z."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        z = points[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = points[:, 0] * self.fx / z + self.cx
            v = points[:, 1] * self.fy / z + self.cy
        return u, v, z

    def project_to_pixels(self, points):
        """Nearest-pixel projection: (rows, cols, z, valid) with frustum check."""
        u, v, z = self.project(points)
        cols = np.rint(u).astype(np.int64)
        rows = np.rint(v).astype(np.int64)
        valid = (z > 0) & (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)
        return rows, cols, z, valid

    def backproject_pixels(self, rows, cols, z):
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        z = np.asarray(z, dtype=float)
        return np.stack([(cols - self.cx) * z / self.fx, (rows - self.cy) * z / self.fy, z], axis=-1)

    def pixel_rays(self):
        """Unnormalized ray directions (h*w, 3) with dz = 1, row-major order."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones_like(cols, dtype=float)],
            axis=-1,
        )
        return d.reshape(-1, 3)


@dataclass
class DepthImage:
    """Row-major depth grid in meters; 0 encodes missing data."""

    frame: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InputError("depth image must be 2-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InputError("depth values must be finite and nonnegative")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


class OrientedPoint(NamedTuple):
    position: np.ndarray
    normal: np.ndarray
    pixel: tuple
    frame: int


# ---------------------------------------------------------------------------
# nearest neighbors


class NeighborIndex:
    """Exact Euclidean nearest-neighbor index over one frame's points.

    Queries are read-only and safe to issue concurrently. Ties are broken
    by lowest insertion order.
    """

    def __init__(self, positions, normals=None, pixels=None, frame=0):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.normals = None if normals is None else np.asarray(normals, dtype=float)
        self.pixels = None if pixels is None else np.asarray(pixels)
        self.frame = frame
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self):
        return len(self.positions)

    def query(self, points, k=1):
        """Batched raw query; returns (distances, indices)."""
        if self._tree is None:
            raise ValueError("nearest-neighbor query on an empty index")
        return self._tree.query(np.asarray(points, dtype=float), k=k)

    def nearest(self, q):
        """Single query returning (OrientedPoint, distance)."""
        if self._tree is None:
            raise ValueError("nearest-neighbor query on an empty index")
        k = min(4, len(self.positions))
        d, i = self._tree.query(np.asarray(q, dtype=float), k=k)
        d = np.atleast_1d(d)
        i = np.atleast_1d(i)
        best = int(i[d == d[0]].min())
        return self.point(best), float(d[0])

    def point(self, i) -> OrientedPoint:
        normal = self.normals[i] if self.normals is not None else np.zeros(3)
        pixel = tuple(self.pixels[i]) if self.pixels is not None else (-1, -1)
        return OrientedPoint(self.positions[i].copy(), np.asarray(normal, dtype=float).copy(), pixel, self.frame)


def estimate_normals(positions, k=12):
    """Unit normals from a local plane fit over the k nearest neighbors.

    The smallest-eigenvector of the neighborhood covariance gives the
    normal; orientation is flipped toward the camera at the origin.
    """
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if n < 3:
        out = np.zeros((n, 3))
        out[:, 2] = -1.0
        return out
    k = min(k, n)
    tree = cKDTree(positions)
    _, idx = tree.query(positions, k=k)
    nbrs = positions[idx]  # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # eigenvector of the smallest eigenvalue
    flip = np.einsum("ni,ni->n", normals, positions) > 0
    normals[flip] *= -1.0
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return normals / norms


class FrameCloud:
    """All valid scene points of one frame with normals and pixel origins."""

    def __init__(self, frame, positions, normals, pixels, index_map, depth: DepthImage, cam=None):
        self.frame = frame
        self.positions = positions
        self.normals = normals
        self.pixels = pixels  # (n, 2) int, (row, col)
        self.index_map = index_map  # (h, w) int, -1 where no point
        self.depth = depth
        self.cam = cam
        self._index = None

    def __len__(self):
        return len(self.positions)

    @property
    def index(self) -> NeighborIndex:
        if self._index is None:
            self._index = NeighborIndex(self.positions, self.normals, self.pixels, self.frame)
        return self._index

    def point(self, i) -> OrientedPoint:
        return OrientedPoint(
            self.positions[i].copy(), self.normals[i].copy(), tuple(self.pixels[i]), self.frame
        )


def backproject(depth: DepthImage, cam: CameraModel, k_normal=12) -> FrameCloud:
    """Backproject a depth image into an oriented point cloud.

    One point per pixel with depth > 0, in scanline (row-major) order;
    normals come from a plane fit over ``k_normal`` neighbors and face
    the camera.
    """
    if depth.values.shape != (cam.height, cam.width):
        raise ConfigError(
            f"depth size {depth.values.shape} does not match camera {(cam.height, cam.width)}"
        )
    rows, cols = np.nonzero(depth.values > 0)
    z = depth.values[rows, cols]
    positions = cam.backproject_pixels(rows, cols, z)
    normals = estimate_normals(positions, k=k_normal)
    pixels = np.stack([rows, cols], axis=1).astype(np.int64)
    index_map = np.full((cam.height, cam.width), -1, dtype=np.int64)
    index_map[rows, cols] = np.arange(len(rows))
    return FrameCloud(depth.frame, positions, normals, pixels, index_map, depth, cam)


def voxel_downsample_indices(positions, voxel_size):
    """Indices of at most one representative point per occupied voxel.

    The representative is the point closest to the centroid of its voxel's
    points; ties go to the lowest insertion index. Output indices ascend.
    """
    if voxel_size <= 0:
        raise ConfigError("voxel size must be positive")
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cells = np.floor(positions / voxel_size).astype(np.int64)
    _, inverse = np.unique(cells, axis=0, return_inverse=True)
    counts = np.bincount(inverse)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, positions)
    centroids = sums / counts[:, None]
    d2 = np.einsum("ni,ni->n", positions - centroids[inverse], positions - centroids[inverse])
    order = np.lexsort((np.arange(n), d2, inverse))
    starts = np.searchsorted(inverse[order], np.arange(len(counts)))
    return np.sort(order[starts])


# ---------------------------------------------------------------------------
# per-frame pose tracks


@dataclass
class PoseTrack:
    """Per-frame rigid poses of one motion over a contiguous support range.

    ``R[f], t[f]`` map reference coordinates into frame ``f``; the relative
    motion between two frames is derived so chained relatives compose
    exactly by construction.
    """

    num_frames: int
    R: np.ndarray = None
    t: np.ndarray = None
    support: tuple = None
    flags: set = field(default_factory=set)

    def __post_init__(self):
        if self.R is None:
            self.R = np.tile(np.eye(3), (self.num_frames, 1, 1))
        if self.t is None:
            self.t = np.zeros((self.num_frames, 3))
        if self.support is None:
            self.support = (0, self.num_frames - 1)

    def copy(self):
        return PoseTrack(self.num_frames, self.R.copy(), self.t.copy(), self.support, set(self.flags))

    def defined(self, f):
        return self.support[0] <= f <= self.support[1]

    def pose(self, f) -> RigidMotion:
        return RigidMotion.from_matrix(self.R[f], self.t[f])

    def relative_Rt(self, i, j):
        """Rotation and translation of the frame-i -> frame-j motion."""
        R = self.R[j] @ self.R[i].T
        t = self.t[j] - R @ self.t[i]
        return R, t

    def relative(self, i, j) -> RigidMotion:
        R, t = self.relative_Rt(i, j)
        return RigidMotion.from_matrix(R, t)

    def transform(self, i, j, points):
        """Map points (or one point) from frame i coordinates to frame j."""
        R, t = self.relative_Rt(i, j)
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return R @ points + t
        return points @ R.T + t

    def rotate(self, i, j, vectors):
        R, _ = self.relative_Rt(i, j)
        vectors = np.asarray(vectors, dtype=float)
        if vectors.ndim == 1:
            return R @ vectors
        return vectors @ R.T

    def set_pose(self, f, R, t):
        self.R[f] = R
        self.t[f] = t

    def fill_from_nearest(self, supported_mask):
        """Copy each unsupported frame's pose from its nearest supported one."""
        supported = np.nonzero(supported_mask)[0]
        if len(supported) == 0:
            return
        for f in range(self.num_frames):
            if not supported_mask[f]:
                nearest = supported[np.argmin(np.abs(supported - f))]
                self.R[f] = self.R[nearest]
                self.t[f] = self.t[nearest]
                self.flags.add(f"extrapolated:{f}")
