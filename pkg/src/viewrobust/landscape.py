"""Synthetic loss landscapes over the viewpoint box, plus grid sweeps.

A bump landscape is a sum of Gaussian bumps defined on a chosen subset
of viewpoint axes (normalized to [-1, 1] by the box geometry).  These
landscapes stand in for a classifier loss when exercising the
distribution optimizer: bump locations are known, so mode coverage and
argmax claims can be checked against ground truth.
"""

import json
from dataclasses import dataclass

import numpy as np

from .geometry import ViewBounds
from .validation import ValidationError, as_float_array


@dataclass(frozen=True)
class Bump:
    center: np.ndarray   # in viewpoint units, one entry per landscape axis
    width: float         # stddev in normalized [-1, 1] coordinates
    amplitude: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.width <= 0:
            raise ValidationError(f"bump width: must be > 0, got {self.width}")


class BumpLandscape:
    """Callable viewpoint-loss surface with known maxima.

    ``axes`` names the viewpoint components the surface depends on; all
    other components are ignored.
    """

    def __init__(self, bumps, bounds=None, axes=(0, 2), base=0.0):
        self.bounds = bounds if bounds is not None else ViewBounds.default()
        self.axes = tuple(int(a) for a in axes)
        if any(not 0 <= a < 6 for a in self.axes):
            raise ValidationError(f"axes: must index viewpoint components, got {axes}")
        if any(not self.bounds.active[a] for a in self.axes):
            raise ValidationError("axes: landscape axes must not be frozen in bounds")
        self.base = float(base)
        self.bumps = tuple(bumps)
        for i, bump in enumerate(self.bumps):
            if bump.center.shape != (len(self.axes),):
                raise ValidationError(
                    f"bumps[{i}].center: expected {len(self.axes)} entries"
                )

    def _normalize(self, v):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        idx = list(self.axes)
        a = self.bounds.half_width[idx]
        b = self.bounds.center[idx]
        return (v[:, idx] - b[None, :]) / a[None, :]

    def _normalized_centers(self):
        idx = list(self.axes)
        a = self.bounds.half_width[idx]
        b = self.bounds.center[idx]
        if not self.bumps:
            return np.zeros((0, len(idx)))
        return np.stack([(bump.center - b) / a for bump in self.bumps])

    def __call__(self, v):
        """Loss at each viewpoint, shape (n,)."""
        pos = self._normalize(v)
        centers = self._normalized_centers()
        out = np.full(pos.shape[0], self.base)
        for bump, c in zip(self.bumps, centers):
            d2 = np.sum((pos - c[None, :]) ** 2, axis=1)
            out += bump.amplitude * np.exp(-d2 / (2.0 * bump.width**2))
        return out

    def bump_mass(self, viewpoints, radius_mult=2.5):
        """Fraction of viewpoints within radius_mult * width of each bump
        (normalized distance over the landscape axes)."""
        pos = self._normalize(viewpoints)
        centers = self._normalized_centers()
        fractions = []
        for bump, c in zip(self.bumps, centers):
            d = np.sqrt(np.sum((pos - c[None, :]) ** 2, axis=1))
            fractions.append(float((d <= radius_mult * bump.width).mean()))
        return np.array(fractions)

    def to_dict(self):
        return {
            "kind": "bump_landscape",
            "axes": list(self.axes),
            "base": self.base,
            "bounds": self.bounds.to_dict(),
            "bumps": [
                {
                    "center": b.center.tolist(),
                    "width": b.width,
                    "amplitude": b.amplitude,
                }
                for b in self.bumps
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "bump_landscape":
            raise ValidationError("landscape dict: missing kind 'bump_landscape'")
        bumps = [
            Bump(
                center=as_float_array(b["center"], "bump.center"),
                width=float(b["width"]),
                amplitude=float(b["amplitude"]),
            )
            for b in d["bumps"]
        ]
        return cls(
            bumps,
            bounds=ViewBounds.from_dict(d["bounds"]),
            axes=tuple(d["axes"]),
            base=float(d.get("base", 0.0)),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def single_bump_landscape(bounds=None, center=(40.0, 110.0), width=0.18, amplitude=3.0):
    """One bump over (psi, phi); the smoke-test surface."""
    return BumpLandscape(
        [Bump(center=np.asarray(center, dtype=float), width=width, amplitude=amplitude)],
        bounds=bounds,
    )


def four_bump_landscape(bounds=None):
    """The standard four-mode fixture over (psi, phi).

    Amplitudes are deliberately unequal so a unimodal search has a
    well-defined best bump while a mixture can afford to cover several.
    """
    specs = [
        ((-90.0, 45.0), 3.0),
        ((90.0, 45.0), 2.7),
        ((-90.0, 135.0), 2.85),
        ((90.0, 135.0), 2.55),
    ]
    return BumpLandscape(
        [Bump(center=np.array(c), width=0.15, amplitude=a) for c, a in specs],
        bounds=bounds,
    )


def grid_sweep(loss_fn, bounds, axes=(0, 2), shape=(10, 10), fixed=None):
    """Evaluate a viewpoint loss on a regular grid over two axes.

    Returns (axis0_values, axis1_values, grid) with grid[i, j] the loss
    at axis0_values[i], axis1_values[j].  Remaining components come from
    ``fixed`` (default: the box center).
    """
    a0, a1 = axes
    vals0 = np.linspace(bounds.v_min[a0], bounds.v_max[a0], shape[0])
    vals1 = np.linspace(bounds.v_min[a1], bounds.v_max[a1], shape[1])
    base = bounds.center.copy() if fixed is None else np.asarray(fixed, dtype=float).copy()
    vs = np.tile(base, (shape[0] * shape[1], 1))
    g0, g1 = np.meshgrid(vals0, vals1, indexing="ij")
    vs[:, a0] = g0.reshape(-1)
    vs[:, a1] = g1.reshape(-1)
    losses = np.asarray(loss_fn(vs), dtype=float).reshape(shape)
    return vals0, vals1, losses
