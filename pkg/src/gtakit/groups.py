"""Group elements used as token geometry.

Four element types are supported: planar rotations (:class:`So2Angle`),
3D rotations (:class:`So3Rotation`), rigid poses (:class:`Se3Pose`) and the
product ``SE(3) x SO(2) x SO(2)`` (:class:`ProductElement`) that pairs a camera
pose with an image position. All math is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

TWO_PI = 2.0 * math.pi


class GroupMismatchError(TypeError):
    """Raised when composing elements of different groups."""


def _wrap(theta: float) -> float:
    t = math.fmod(float(theta), TWO_PI)
    if t < 0.0:
        t += TWO_PI
    # fmod can round up to exactly 2*pi for tiny negative inputs
    if t >= TWO_PI:
        t = 0.0
    return t


class So2Angle:
    """Planar rotation angle.

    ``theta`` is always in ``[0, 2pi)``. The unwrapped sum of all composed
    angles is kept in ``lift``: representations with fractional frequencies
    (``f = 1/2, 1/4, ...``) are only homomorphic on the unwrapped value.
    """

    __slots__ = ("lift", "theta")

    def __init__(self, theta: float = 0.0):
        object.__setattr__(self, "lift", float(theta))
        object.__setattr__(self, "theta", _wrap(theta))

    def __setattr__(self, name, value):
        raise AttributeError("So2Angle is immutable")

    def __repr__(self) -> str:
        return f"So2Angle({self.theta!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, So2Angle) and self.theta == other.theta

    def __hash__(self) -> int:
        return hash(self.theta)

    @classmethod
    def identity(cls) -> So2Angle:
        return cls(0.0)

    def compose(self, other: So2Angle) -> So2Angle:
        return So2Angle(self.lift + other.lift)

    def inverse(self) -> So2Angle:
        return So2Angle(-self.lift)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, eq=False)
class So3Rotation:
    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64).reshape(3, 3)
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls) -> So3Rotation:
        return cls(np.eye(3))

    def compose(self, other: So3Rotation) -> So3Rotation:
        return So3Rotation(self.r @ other.r)

    def inverse(self) -> So3Rotation:
        return So3Rotation(self.r.T)

    def matrix(self) -> np.ndarray:
        return self.r.copy()

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.abs(self.r @ self.r.T - np.eye(3)).max() < tol
        return bool(ortho and abs(np.linalg.det(self.r) - 1.0) < tol)


@dataclass(frozen=True, eq=False)
class Se3Pose:
    rotation: So3Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not isinstance(self.rotation, So3Rotation):
            object.__setattr__(self, "rotation", So3Rotation(self.rotation))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Se3Pose:
        return cls(So3Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Se3Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(So3Rotation(m[:3, :3]), m[:3, 3])

    def compose(self, other: Se3Pose) -> Se3Pose:
        r = self.rotation.r
        return Se3Pose(So3Rotation(r @ other.rotation.r),
                       r @ other.translation + self.translation)

    def inverse(self) -> Se3Pose:
        rt = self.rotation.r.T
        return Se3Pose(So3Rotation(rt), -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        """The 4x4 homogeneous matrix ``[[R, T], [0, 1]]``."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.r
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True, eq=False)
class ProductElement:
    """A token attribute ``(camera pose, row angle, column angle)``."""

    c: Se3Pose
    theta_h: So2Angle
    theta_w: So2Angle

    @classmethod
    def identity(cls) -> ProductElement:
        return cls(Se3Pose.identity(), So2Angle(), So2Angle())

    def compose(self, other: ProductElement) -> ProductElement:
        return ProductElement(self.c.compose(other.c),
                              self.theta_h.compose(other.theta_h),
                              self.theta_w.compose(other.theta_w))

    def inverse(self) -> ProductElement:
        return ProductElement(self.c.inverse(), self.theta_h.inverse(),
                              self.theta_w.inverse())


GroupElement = Union[So2Angle, So3Rotation, Se3Pose, ProductElement]


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    if type(a) is not type(b):
        raise GroupMismatchError(
            f"cannot compose {type(a).__name__} with {type(b).__name__}")
    return a.compose(b)


def inverse(g: GroupElement) -> GroupElement:
    return g.inverse()


def identity_like(g: GroupElement) -> GroupElement:
    return type(g).identity()


def distance(a: GroupElement, b: GroupElement) -> float:
    """Max-abs discrepancy between two elements; angles compared on the circle."""
    if type(a) is not type(b):
        raise GroupMismatchError(
            f"cannot compare {type(a).__name__} with {type(b).__name__}")
    if isinstance(a, So2Angle):
        d = abs(a.theta - b.theta)
        return min(d, TWO_PI - d)
    if isinstance(a, So3Rotation):
        return float(np.abs(a.r - b.r).max())
    if isinstance(a, Se3Pose):
        return float(np.abs(a.matrix() - b.matrix()).max())
    return max(distance(a.c, b.c), distance(a.theta_h, b.theta_h),
               distance(a.theta_w, b.theta_w))


def patch_angles(i: int, j: int, H: int, W: int) -> tuple[So2Angle, So2Angle]:
    """Angles of the patch at row ``i``, column ``j`` of an ``H x W`` grid.

    The top-left patch maps to ``(0, 0)`` and the bottom-right one to
    ``(2pi(H-1)/H, 2pi(W-1)/W)``, with linear spacing in between.
    """
    if not (0 <= i < H and 0 <= j < W):
        raise IndexError(f"patch ({i}, {j}) outside a {H}x{W} grid")
    return So2Angle(TWO_PI * i / H), So2Angle(TWO_PI * j / W)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sample_rotation(rng: np.random.Generator) -> So3Rotation:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    return So3Rotation(quaternion_to_matrix(q))


def sample_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` uniform rotations as an ``(n, 3, 3)`` array (same draw order as
    ``n`` calls of :func:`sample_rotation`)."""
    return np.stack([sample_rotation(rng).r for _ in range(n)]) if n else np.zeros((0, 3, 3))


def sample_angle(rng: np.random.Generator) -> So2Angle:
    return So2Angle(rng.uniform(0.0, TWO_PI))


def sample_pose(rng: np.random.Generator, scale: float = 1.0) -> Se3Pose:
    return Se3Pose(sample_rotation(rng), scale * rng.standard_normal(3))


def sample_product(rng: np.random.Generator, scale: float = 1.0) -> ProductElement:
    return ProductElement(sample_pose(rng, scale), sample_angle(rng), sample_angle(rng))


def sample_like(g: GroupElement, rng: np.random.Generator) -> GroupElement:
    if isinstance(g, So2Angle):
        return sample_angle(rng)
    if isinstance(g, So3Rotation):
        return sample_rotation(rng)
    if isinstance(g, Se3Pose):
        return sample_pose(rng)
    return sample_product(rng)
