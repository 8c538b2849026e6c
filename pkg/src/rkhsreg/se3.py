"""SO(3)/SE(3) primitives: wedge operator, exponential/logarithm maps, and the
60-element icosahedral rotation group used to seed global rotation search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle exp/log switch to their series limits to avoid 0/0.
SMALL_ANGLE = 1e-8
# Width of the band around pi where the logarithm uses the symmetric-part axis
# extraction instead of the sin(theta) formula.
PI_BAND = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric 3x3 matrix of a 3-vector (hat operator on so(3))."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def skew_many(v: np.ndarray) -> np.ndarray:
    """Skew matrices for an (N, 3) array, returned as (N, 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class Rotation:
    """3x3 rotation matrix wrapper. Instances are immutable values."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float) -> "Rotation":
        """Rodrigues formula for a unit axis and angle in radians."""
        axis = np.asarray(axis, dtype=float).reshape(3)
        axis = axis / np.linalg.norm(axis)
        k = skew(axis)
        return cls(np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k))

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Rotate a (3,) vector or (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.matrix.T

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle between two rotations, in [0, pi]."""
        tr = np.trace(self.matrix.T @ other.matrix)
        return math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))

    def is_valid(self, tol: float = 1e-9) -> bool:
        m = self.matrix
        return bool(
            np.all(np.abs(m @ m.T - np.eye(3)) < tol)
            and abs(np.linalg.det(m) - 1.0) < tol
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: p -> R p + t. Immutable value."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_rt(cls, rotation_matrix: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(Rotation(np.asarray(rotation_matrix, dtype=float)), translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {matrix.shape}")
        return cls(Rotation(matrix[:3, :3].copy()), matrix[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a (3,) vector or (N, 3) array of points."""
        return self.rotation.apply(points) + self.translation

    @classmethod
    def from_translation(cls, t: np.ndarray) -> "Pose":
        return cls(Rotation.identity(), t)


@dataclass(frozen=True)
class Twist:
    """Element of se(3): translational part rho (meters), rotational part phi
    (radians)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(3))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))

    def __neg__(self) -> "Twist":
        return Twist(-self.rho, -self.phi)


def wedge(t: Twist) -> np.ndarray:
    """4x4 matrix form of a twist: skew(phi) top-left, rho top-right, zero
    bottom row."""
    out = np.zeros((4, 4))
    out[:3, :3] = skew(t.phi)
    out[:3, 3] = t.rho
    return out


def _so3_exp(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    k = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + k
    k = k / angle
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _v_matrix(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * skew(phi)
    k = skew(phi / angle)
    a2 = angle * angle
    return (
        np.eye(3)
        + ((1.0 - math.cos(angle)) / angle) * k
        + ((angle - math.sin(angle)) / angle) * (k @ k)
    )


def _v_inverse(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * skew(phi)
    k = skew(phi / angle)
    half = 0.5 * angle
    cot_term = 1.0 - half * math.cos(half) / math.sin(half)
    return np.eye(3) - 0.5 * angle * k + cot_term * (k @ k)


def exp_se3(t: Twist) -> Pose:
    """SE(3) exponential of wedge(t), via the closed-form Rodrigues expansion."""
    r = _so3_exp(t.phi)
    v = _v_matrix(t.phi)
    return Pose(Rotation(r), v @ t.rho)


def _so3_log(r: np.ndarray) -> np.ndarray:
    trace = float(np.trace(r))
    cos_angle = min(1.0, max(-1.0, (trace - 1.0) / 2.0))
    angle = math.acos(cos_angle)
    if angle < SMALL_ANGLE:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if math.pi - angle < PI_BAND:
        # Near pi, (R + I)/2 ~= u u^T. The axis sign is free; take the
        # lexicographically largest of the two representations.
        s = (r + np.eye(3)) / 2.0
        idx = int(np.argmax(np.diag(s)))
        axis = s[idx] / math.sqrt(max(s[idx, idx], 1e-30))
        axis = axis / np.linalg.norm(axis)
        for component in axis:
            if abs(component) > 1e-12:
                if component < 0.0:
                    axis = -axis
                break
        return axis * angle
    return (
        angle
        / (2.0 * math.sin(angle))
        * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    )


def log_se3(p: Pose) -> Twist:
    """SE(3) logarithm; inverse of exp_se3 for rotation angles below pi."""
    phi = _so3_log(p.rotation.matrix)
    rho = _v_inverse(phi) @ p.translation
    return Twist(rho, phi)


@dataclass(frozen=True)
class IcosahedralRotations:
    """The 60 rotational symmetries of the icosahedron, element 0 = identity."""

    rotations: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.rotations)

    def __getitem__(self, i: int) -> Rotation:
        return self.rotations[i]

    def __iter__(self):
        return iter(self.rotations)


def _canonical_axes(vectors: np.ndarray) -> list:
    """Normalize, identify antipodal pairs, and return lexicographically
    canonical unit axes sorted deterministically."""
    axes = []
    for v in vectors:
        u = v / np.linalg.norm(v)
        for component in u:
            if abs(component) > 1e-9:
                if component < 0.0:
                    u = -u
                break
        axes.append(tuple(np.round(u, 12)))
    unique = sorted(set(axes))
    return [np.array(a) for a in unique]


def icosahedral_group() -> IcosahedralRotations:
    """Build the 60-element rotation group of a canonical icosahedron.

    Vertices are the cyclic permutations of (0, +-1, +-tau) normalized, with
    tau the golden ratio. Ordering: identity, then 15 edge-axis half turns,
    then 20 face-axis third turns, then 24 vertex-axis fifth turns, each block
    sorted by axis then angle.
    """
    tau = (1.0 + math.sqrt(5.0)) / 2.0
    base = []
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            base.append((0.0, s1, s2 * tau))
    verts = []
    for (a, b, c) in base:
        verts.extend([(a, b, c), (b, c, a), (c, a, b)])
    verts = np.array(verts) / math.sqrt(1.0 + tau * tau)

    # Edges connect vertex pairs at the minimal nonzero distance.
    dists = np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=2)
    edge_len = np.min(dists[dists > 1e-9])
    edge_mids = []
    face_centers = []
    n = len(verts)
    adjacency = dists < edge_len + 1e-9
    np.fill_diagonal(adjacency, False)
    for i in range(n):
        for j in range(i + 1, n):
            if adjacency[i, j]:
                edge_mids.append((verts[i] + verts[j]) / 2.0)
                for k in range(j + 1, n):
                    if adjacency[i, k] and adjacency[j, k]:
                        face_centers.append((verts[i] + verts[j] + verts[k]) / 3.0)

    edge_axes = _canonical_axes(np.array(edge_mids))
    face_axes = _canonical_axes(np.array(face_centers))
    vertex_axes = _canonical_axes(verts)
    assert len(edge_axes) == 15 and len(face_axes) == 10 and len(vertex_axes) == 6

    rotations = [Rotation.identity()]
    for axis in edge_axes:
        rotations.append(Rotation.from_axis_angle(axis, math.pi))
    for axis in face_axes:
        for k in (1, 2):
            rotations.append(Rotation.from_axis_angle(axis, k * 2.0 * math.pi / 3.0))
    for axis in vertex_axes:
        for k in (1, 2, 3, 4):
            rotations.append(Rotation.from_axis_angle(axis, k * 2.0 * math.pi / 5.0))
    return IcosahedralRotations(tuple(rotations))
