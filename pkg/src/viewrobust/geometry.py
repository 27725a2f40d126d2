"""Viewpoint parameterization, camera poses, and pinhole ray generation.

A viewpoint is a 6-vector ``v = (psi, theta, phi, dx, dy, dz)``: three
rotation angles in degrees followed by a translation offset of the
camera in world units.  The world is z-up.  The camera starts from a
base position on the +y axis, is rotated about the world origin by the
intrinsic z-y-x rotation ``Rz(psi) @ Ry(theta) @ Rx(phi)``, translated
by ``(dx, dy, dz)``, and finally re-aimed so its optical axis points at
the world origin.
"""

from dataclasses import dataclass

import numpy as np

from .validation import DegeneratePoseError, ValidationError, as_float_array

AXIS_NAMES = ("psi", "theta", "phi", "dx", "dy", "dz")

DEFAULT_BASE_POSITION = (0.0, 4.0, 0.0)

_WORLD_UP = np.array([0.0, 0.0, 1.0])
_FALLBACK_UP = np.array([1.0, 0.0, 0.0])
_PARALLEL_EPS = 1e-9


@dataclass(frozen=True)
class Viewpoint:
    """Named wrapper around the 6-vector; converts freely to ndarray."""

    psi: float = 0.0
    theta: float = 0.0
    phi: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    @classmethod
    def from_array(cls, v):
        arr = as_float_array(v, "viewpoint", shape=(6,))
        return cls(*arr.tolist())

    def to_array(self):
        return np.array([self.psi, self.theta, self.phi, self.dx, self.dy, self.dz])

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr.astype(dtype) if dtype is not None else arr


def viewpoint_array(v):
    """Coerce a Viewpoint or any 6-element array-like to a (6,) float array."""
    return as_float_array(np.asarray(v, dtype=float), "viewpoint", shape=(6,))


@dataclass(frozen=True)
class ViewBounds:
    """Axis-aligned box of admissible viewpoints.

    Axes with ``v_min == v_max`` are frozen: they carry no probability
    mass and squash/density computations skip them.
    """

    v_min: np.ndarray
    v_max: np.ndarray

    def __post_init__(self):
        lo = as_float_array(self.v_min, "v_min", shape=(6,))
        hi = as_float_array(self.v_max, "v_max", shape=(6,))
        if np.any(lo > hi):
            raise ValidationError("bounds: v_min must be <= v_max on every axis")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "v_min", lo)
        object.__setattr__(self, "v_max", hi)

    @classmethod
    def default(cls):
        """Standard search box: psi +-180, theta +-30, phi in [20, 160],
        dx/dz +-0.5, dy +-1."""
        return cls(
            v_min=np.array([-180.0, -30.0, 20.0, -0.5, -1.0, -0.5]),
            v_max=np.array([180.0, 30.0, 160.0, 0.5, 1.0, 0.5]),
        )

    @property
    def half_width(self):
        return (self.v_max - self.v_min) / 2.0

    @property
    def center(self):
        return (self.v_max + self.v_min) / 2.0

    @property
    def active(self):
        """Boolean mask of axes with nonzero extent."""
        return self.half_width > 0.0

    def contains(self, v, atol=0.0):
        arr = viewpoint_array(v)
        return bool(np.all(arr >= self.v_min - atol) and np.all(arr <= self.v_max + atol))

    def clip(self, v):
        return np.clip(np.asarray(v, dtype=float), self.v_min, self.v_max)

    def to_dict(self):
        return {"v_min": self.v_min.tolist(), "v_max": self.v_max.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(v_min=d["v_min"], v_max=d["v_max"])


def rotation_from_tait_bryan(psi, theta, phi):
    """Rotation matrix for intrinsic z-y-x angles given in degrees.

    Composition order is Rz(psi) @ Ry(theta) @ Rx(phi).
    """
    a, b, c = np.radians([psi, theta, phi])
    if not np.all(np.isfinite([a, b, c])):
        raise ValidationError("angles: must be finite")
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world frame.  ``rotation`` columns are (right, up,
    forward); ``forward`` is the optical axis.  det(rotation) == +1."""

    rotation: np.ndarray
    position: np.ndarray

    @property
    def right(self):
        return self.rotation[:, 0]

    @property
    def up(self):
        return self.rotation[:, 1]

    @property
    def forward(self):
        return self.rotation[:, 2]


def look_at_rotation(position, target=(0.0, 0.0, 0.0)):
    """Orientation whose forward axis points from ``position`` to ``target``."""
    pos = as_float_array(position, "position", shape=(3,))
    tgt = as_float_array(target, "target", shape=(3,))
    offset = tgt - pos
    dist = float(np.linalg.norm(offset))
    if dist < 1e-12:
        raise DegeneratePoseError("camera position coincides with the look-at target")
    forward = offset / dist
    up_hint = _WORLD_UP
    if np.linalg.norm(np.cross(up_hint, forward)) < _PARALLEL_EPS:
        up_hint = _FALLBACK_UP
    right = np.cross(up_hint, forward)
    right /= np.linalg.norm(right)
    up = np.cross(forward, right)
    return np.column_stack([right, up, forward])


def camera_pose_from_viewpoint(v, base_position=DEFAULT_BASE_POSITION):
    """Place the camera for viewpoint ``v`` and aim it at the origin.

    The translation is applied after the rotation, in world coordinates.
    """
    arr = viewpoint_array(v)
    base = as_float_array(base_position, "base_position", shape=(3,))
    rot = rotation_from_tait_bryan(arr[0], arr[1], arr[2])
    position = rot @ base + arr[3:6]
    rotation = look_at_rotation(position)
    position.setflags(write=False)
    rotation.setflags(write=False)
    return CameraPose(rotation=rotation, position=position)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def _pixel_offsets(px, py, width, height, fov_deg):
    """Map pixel centers to tangent-plane offsets.

    Pixel (0, 0) is the top-left corner; centers span the full tangent
    range so corner pixels sit exactly on the frustum boundary.  A
    1-pixel-wide axis degenerates to the optical axis.
    """
    half_tan = np.tan(np.radians(fov_deg) / 2.0)
    x = (2.0 * px / (width - 1) - 1.0) * half_tan if width > 1 else 0.0 * px
    y = (1.0 - 2.0 * py / (height - 1)) * half_tan if height > 1 else 0.0 * py
    return x, y


def pixel_ray(pose, px, py, width, height, fov_deg):
    """Ray through the center of pixel (px, py) of a width x height image."""
    if not (0 <= px < width and 0 <= py < height):
        raise ValidationError(f"pixel ({px}, {py}) outside image {width}x{height}")
    x, y = _pixel_offsets(float(px), float(py), width, height, fov_deg)
    direction = pose.forward + x * pose.right + y * pose.up
    direction = direction / np.linalg.norm(direction)
    return Ray(origin=np.array(pose.position), direction=direction)


def camera_ray_directions(pose, width, height, fov_deg):
    """Unit directions for every pixel, row-major, shape (height*width, 3)."""
    px = np.arange(width, dtype=float)
    py = np.arange(height, dtype=float)
    xg, yg = np.meshgrid(*_pixel_offsets(px, py, width, height, fov_deg))
    dirs = (
        pose.forward[None, :]
        + xg.reshape(-1, 1) * pose.right[None, :]
        + yg.reshape(-1, 1) * pose.up[None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs
