"""Analytic scene model: density/color primitives plus the bundled toy suite.

A scene is a set of constant-density primitives (spheres and axis-aligned
boxes) over a background color.  Where primitives overlap, densities add
and colors mix proportionally to density.
"""

import json
from dataclasses import dataclass

import numpy as np

from .geometry import ViewBounds, Viewpoint
from .validation import ValidationError, as_float_array

_SHAPES = ("sphere", "box")


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: np.ndarray
    density: float
    color: np.ndarray
    radius: float = 0.0
    size: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "center", as_float_array(self.center, "center", shape=(3,)))
        object.__setattr__(self, "color", as_float_array(self.color, "color", shape=(3,)))
        if self.size is not None:
            object.__setattr__(self, "size", as_float_array(self.size, "size", shape=(3,)))

    def contains(self, points):
        """Boolean membership of each point, shape (n,)."""
        p = points - self.center
        if self.shape == "sphere":
            return np.einsum("ij,ij->i", p, p) <= self.radius * self.radius
        half = self.size / 2.0
        return np.all(np.abs(p) <= half, axis=1)


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    background: np.ndarray
    label: int
    near: float
    far: float
    name: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "background", as_float_array(self.background, "background", shape=(3,))
        )
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def fields_at(self, points):
        """Density and color at each query point.

        Overlaps accumulate density; the color is the density-weighted
        average of the member primitives.  Empty space has density 0 and
        color 0 (the color there never contributes to a render).
        """
        n = points.shape[0]
        tau = np.zeros(n)
        weighted = np.zeros((n, 3))
        for prim in self.primitives:
            mask = prim.contains(points)
            if not mask.any():
                continue
            tau[mask] += prim.density
            weighted[mask] += prim.density * prim.color
        rgb = np.zeros((n, 3))
        hit = tau > 0
        rgb[hit] = weighted[hit] / tau[hit, None]
        return tau, rgb


def _parse_primitive(d, where):
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected an object")
    shape = d.get("shape")
    if shape not in _SHAPES:
        raise ValidationError(f"{where}.shape: expected one of {_SHAPES}, got {shape!r}")
    center = as_float_array(d.get("center"), f"{where}.center", shape=(3,))
    density = d.get("density")
    try:
        density = float(density)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}.density: expected a number, got {density!r}")
    if not np.isfinite(density) or density < 0:
        raise ValidationError(f"{where}.density: must be >= 0, got {density}")
    color = as_float_array(d.get("color"), f"{where}.color", shape=(3,))
    if np.any(color < 0) or np.any(color > 1):
        raise ValidationError(f"{where}.color: channels must lie in [0, 1]")
    if shape == "sphere":
        radius = d.get("radius")
        try:
            radius = float(radius)
        except (TypeError, ValueError):
            raise ValidationError(f"{where}.radius: expected a number, got {radius!r}")
        if not np.isfinite(radius) or radius <= 0:
            raise ValidationError(f"{where}.radius: must be > 0, got {radius}")
        return Primitive(shape, center, density, color, radius=radius)
    size = as_float_array(d.get("size"), f"{where}.size", shape=(3,))
    if np.any(size <= 0):
        raise ValidationError(f"{where}.size: extents must be > 0")
    return Primitive(shape, center, density, color, size=size)


def scene_from_dict(d, name=""):
    if not isinstance(d, dict):
        raise ValidationError("scene: expected a JSON object")
    prims = d.get("primitives")
    if not isinstance(prims, list) or not prims:
        raise ValidationError("primitives: expected a non-empty list")
    parsed = tuple(
        _parse_primitive(p, f"primitives[{i}]") for i, p in enumerate(prims)
    )
    background = as_float_array(d.get("background"), "background", shape=(3,))
    if np.any(background < 0) or np.any(background > 1):
        raise ValidationError("background: channels must lie in [0, 1]")
    label = d.get("label")
    if not isinstance(label, int) or label < 0:
        raise ValidationError(f"label: expected a nonnegative integer, got {label!r}")
    try:
        near, far = float(d.get("near")), float(d.get("far"))
    except (TypeError, ValueError):
        raise ValidationError("near/far: expected numbers")
    if not (np.isfinite(near) and np.isfinite(far) and 0 <= near < far):
        raise ValidationError(f"near/far: need 0 <= near < far, got ({near}, {far})")
    return Scene(parsed, background, label, near, far, name=name or d.get("name", ""))


def _primitive_to_dict(p):
    d = {
        "shape": p.shape,
        "center": p.center.tolist(),
        "density": p.density,
        "color": p.color.tolist(),
    }
    if p.shape == "sphere":
        d["radius"] = p.radius
    else:
        d["size"] = p.size.tolist()
    return d


def scene_to_dict(scene):
    d = {
        "primitives": [_primitive_to_dict(p) for p in scene.primitives],
        "background": scene.background.tolist(),
        "label": scene.label,
        "near": scene.near,
        "far": scene.far,
    }
    if scene.name:
        d["name"] = scene.name
    return d


def load_scene(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scene file {path}: invalid JSON ({exc})")
    return scene_from_dict(d)


def save_scene(scene, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1)
        fh.write("\n")


# --------------------------------------------------------------------------
# Bundled toy suite
#
# Four classes, four objects each.  Every object is a gray body sphere
# carrying three kinds of class-coded cues:
#
#   * a strong front marker on the upper hemisphere facing the natural
#     (front, elevated) camera -- the cue a classifier trained on
#     natural views learns;
#   * a pale badge low on the rear face, hue-permuted relative to the
#     front palette, occluded from the whole natural-view region;
#   * a thin disk flush with the top, face-on only from overhead.
#
# From behind or from the side the front marker is occluded and only
# the badges/disk separate the classes, so a naturally trained model
# has large confusable regions for a viewpoint search to exploit while
# a model trained on adversarial views can still recover the class.
# --------------------------------------------------------------------------

N_CLASSES = 4
OBJECTS_PER_CLASS = 4

_BODY_COLOR = np.array([0.55, 0.55, 0.55])
_BACKGROUND = np.array([0.08, 0.08, 0.10])
_NEAR, _FAR = 1.0, 7.5
_DENSITY = 40.0

_CLASS_COLORS = (
    np.array([0.90, 0.12, 0.12]),  # red
    np.array([0.10, 0.85, 0.15]),  # green
    np.array([0.15, 0.25, 0.90]),  # blue
    np.array([0.92, 0.85, 0.10]),  # yellow
)

# per-object variation, fixed so the suite is deterministic
_BODY_RADII = (0.95, 1.0, 1.05, 0.98)
_MARKER_SCALES = (1.0, 0.9, 1.1, 0.95)
_HUE_SHIFTS = (0.0, 0.06, -0.06, 0.03)


def _shift(color, amount):
    return np.clip(np.asarray(color) + amount, 0.0, 1.0)


def _front_marker(label, body_r, mscale, hshift):
    color = _shift(_CLASS_COLORS[label], hshift)
    if label == 0:
        return [
            Primitive(
                "sphere", (0.0, 0.70 * body_r, 0.70 * body_r), _DENSITY, color,
                radius=0.42 * mscale,
            )
        ]
    if label == 1:
        s = 0.52 * mscale
        return [
            Primitive(
                "box", (0.0, 0.72 * body_r, 0.72 * body_r), _DENSITY, color,
                size=(s, s, s),
            )
        ]
    if label == 2:
        return [
            Primitive(
                "sphere", (sx * 0.60 * body_r, 0.55 * body_r, 0.55 * body_r),
                _DENSITY, color, radius=0.34 * mscale,
            )
            for sx in (-1.0, 1.0)
        ]
    return [
        Primitive(
            "sphere", (0.0, 0.95 * body_r, 0.10 * body_r), _DENSITY, color,
            radius=0.40 * mscale,
        )
    ]


def _rear_badge(label, body_r, mscale, hshift):
    # hue-permuted palette: the rear cue for class c borrows the front
    # color of class (c + 2) % 4, lightened, so nothing learned on the
    # front palette transfers.  Placement keeps the badge occluded, up
    # to the body's soft volumetric silhouette, from the whole
    # natural-view jitter region (the sphere hides a bump at center
    # fraction f, radius r from any camera at angular distance d when
    # f*sin(d) + r <= body radius).
    pale = 0.70 * _shift(_CLASS_COLORS[(label + 2) % N_CLASSES], hshift) + 0.30
    el = np.radians(-15.0)
    center = np.array([0.0, -np.cos(el), np.sin(el)]) * 0.92 * body_r
    return [
        Primitive("sphere", center, _DENSITY, np.clip(pale, 0, 1), radius=0.38 * mscale)
    ]


def _top_disk(label, body_r, mscale, hshift):
    color = _shift(_CLASS_COLORS[label], hshift)
    return [
        Primitive(
            "box", (0.0, 0.0, 0.98 * body_r), _DENSITY, color,
            size=(0.52 * mscale, 0.52 * mscale, 0.08),
        )
    ]


def _toy_object(label, index):
    body_r = _BODY_RADII[index]
    mscale = _MARKER_SCALES[index]
    hshift = _HUE_SHIFTS[index]
    prims = [Primitive("sphere", (0.0, 0.0, 0.0), _DENSITY, _BODY_COLOR, radius=body_r)]
    prims += _front_marker(label, body_r, mscale, hshift)
    prims += _rear_badge(label, body_r, mscale, hshift)
    prims += _top_disk(label, body_r, mscale, hshift)
    return Scene(
        tuple(prims),
        _BACKGROUND,
        label,
        _NEAR,
        _FAR,
        name=f"class{label}_obj{index}",
    )


def toy_suite():
    """All N_CLASSES x OBJECTS_PER_CLASS toy objects, class-major order."""
    return [
        _toy_object(c, j) for c in range(N_CLASSES) for j in range(OBJECTS_PER_CLASS)
    ]


def split_train_val(scenes, val_fraction=0.1):
    """Per-class object split; at least one validation object per class."""
    by_class = {}
    for s in scenes:
        by_class.setdefault(s.label, []).append(s)
    train, val = [], []
    for label in sorted(by_class):
        group = by_class[label]
        n_val = max(1, int(round(val_fraction * len(group))))
        if n_val >= len(group):
            raise ValidationError(f"class {label}: too few objects to split")
        train.extend(group[:-n_val])
        val.extend(group[-n_val:])
    return train, val


NATURAL_VIEWPOINT = Viewpoint(psi=0.0, theta=0.0, phi=65.0)


class NaturalViewpointSampler:
    """Natural views: a fixed per-class nominal viewpoint plus small
    uniform jitter (default +-10 degrees on angles, +-0.05 on offsets)."""

    def __init__(self, bounds=None, angle_jitter=10.0, offset_jitter=0.05):
        self.bounds = bounds if bounds is not None else ViewBounds.default()
        self.angle_jitter = float(angle_jitter)
        self.offset_jitter = float(offset_jitter)

    def nominal(self, label):
        return NATURAL_VIEWPOINT.to_array()

    def sample(self, label, n, rng):
        rng = np.random.default_rng(rng)
        jit = np.array([self.angle_jitter] * 3 + [self.offset_jitter] * 3)
        vs = self.nominal(label)[None, :] + rng.uniform(-jit, jit, size=(n, 6))
        return np.clip(vs, self.bounds.v_min, self.bounds.v_max)
