"""Single-scattering volume renderer over analytic density fields.

A ray accumulates color front to back:

    C = sum_m T_m * (1 - exp(-tau_m * delta_m)) * c_m  +  T_end * background

where ``T_m`` is the transmittance surviving all earlier segments,
``delta_m = t_{m+1} - t_m`` and the final segment extends to the far
plane.  Sample depths come from stratified sampling: one sample per
equal-width stratum, either at the stratum midpoint (``rng=None``) or
uniformly jittered within it.
"""

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    DEFAULT_BASE_POSITION,
    camera_pose_from_viewpoint,
    camera_ray_directions,
    viewpoint_array,
)
from .validation import ValidationError, check_positive_int


@dataclass(frozen=True)
class RenderConfig:
    width: int = 32
    height: int = 32
    fov_deg: float = 50.0
    m_samples: int = 32
    jitter: bool = False
    seed: int = 0
    base_position: tuple = DEFAULT_BASE_POSITION

    def __post_init__(self):
        check_positive_int(self.width, "width")
        check_positive_int(self.height, "height")
        check_positive_int(self.m_samples, "m_samples")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValidationError(f"fov_deg: must lie in (0, 180), got {self.fov_deg}")

    def with_overrides(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class RenderedImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) float in [0, 1]

    def flat(self):
        return self.pixels.reshape(-1)


@dataclass(frozen=True)
class RayTrace:
    """Per-ray diagnostics kept for tests and analysis."""

    t: np.ndarray             # (n, m) sample depths
    delta: np.ndarray         # (n, m) segment lengths
    tau: np.ndarray           # (n, m) densities
    weights: np.ndarray       # (n, m) compositing weights
    transmittance: np.ndarray # (n, m + 1) survival before each sample and at exit


def sample_points_stratified(near, far, m, rng=None):
    """Depths of ``m`` stratified samples on [near, far), one per stratum.

    With ``rng=None`` each sample sits at its stratum midpoint, which
    makes the renderer a deterministic midpoint quadrature.  Otherwise
    samples are uniform within their stratum.  Output is strictly
    increasing either way.
    """
    return _stratified_depths(float(near), float(far), m, 1, rng)[0]


def _stratified_depths(near, far, m, n_rays, rng):
    m = check_positive_int(m, "m_samples")
    if not near < far:
        raise ValidationError(f"near/far: need near < far, got ({near}, {far})")
    width = (far - near) / m
    left = near + width * np.arange(m)
    if rng is None:
        return np.broadcast_to(left + 0.5 * width, (n_rays, m))
    rng = np.random.default_rng(rng)
    u = rng.random((n_rays, m))
    return left[None, :] + u * width


def render_rays(scene, origins, directions, m_samples, rng=None, return_trace=False):
    """Composite colors for a batch of rays, shape (n, 3).

    ``origins`` may be a single (3,) point shared by all rays or an
    (n, 3) array.  Directions must be unit length.
    """
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    n = dirs.shape[0]
    origins = np.asarray(origins, dtype=float)
    if origins.ndim == 1:
        origins = np.broadcast_to(origins, (n, 3))
    t = _stratified_depths(scene.near, scene.far, m_samples, n, rng)
    points = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    tau, color = scene.fields_at(points.reshape(-1, 3))
    tau = tau.reshape(n, m_samples)
    color = color.reshape(n, m_samples, 3)

    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = scene.far - t[:, -1]
    optical = tau * delta
    cumulative = np.cumsum(optical, axis=1)
    trans = np.exp(-(cumulative - optical))      # survival before each sample
    trans_end = np.exp(-cumulative[:, -1])
    weights = trans * -np.expm1(-optical)
    rgb = np.einsum("nm,nmc->nc", weights, color)
    rgb += trans_end[:, None] * scene.background[None, :]
    np.clip(rgb, 0.0, 1.0, out=rgb)
    if not return_trace:
        return rgb
    full_trans = np.concatenate([trans, trans_end[:, None]], axis=1)
    return rgb, RayTrace(t=t, delta=delta, tau=tau, weights=weights, transmittance=full_trans)


def render_pixel(scene, ray, m_samples, rng=None):
    """Color of a single ray, shape (3,)."""
    return render_rays(scene, ray.origin, ray.direction[None, :], m_samples, rng=rng)[0]


def render_view(scene, v, config):
    """Render the scene from viewpoint ``v``; returns RenderedImage."""
    return RenderedImage(
        width=config.width,
        height=config.height,
        pixels=render_views(scene, viewpoint_array(v)[None, :], config)[0],
    )


def render_views(scene, vs, config):
    """Render a batch of viewpoints in one pass, shape (n, h, w, 3)."""
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    if vs.shape[1] != 6:
        raise ValidationError(f"viewpoints: expected shape (n, 6), got {vs.shape}")
    n = vs.shape[0]
    n_pix = config.height * config.width
    dirs = np.empty((n * n_pix, 3))
    origins = np.empty((n * n_pix, 3))
    for i, v in enumerate(vs):
        pose = camera_pose_from_viewpoint(v, config.base_position)
        sl = slice(i * n_pix, (i + 1) * n_pix)
        dirs[sl] = camera_ray_directions(pose, config.width, config.height, config.fov_deg)
        origins[sl] = pose.position
    rng = [config.seed] if config.jitter else None
    rgb = render_rays(scene, origins, dirs, config.m_samples, rng=rng)
    return rgb.reshape(n, config.height, config.width, 3)


# --------------------------------------------------------------------------
# Image serialization: binary PPM for eyeballs, CSV for exact values.
# --------------------------------------------------------------------------


def ppm_bytes(image, comment=""):
    header = "P6\n"
    if comment:
        for line in str(comment).splitlines():
            header += f"# {line}\n"
    header += f"{image.width} {image.height}\n255\n"
    quantized = np.round(image.pixels * 255.0).astype(np.uint8)
    return header.encode("ascii") + quantized.tobytes()


def write_ppm(image, path, comment=""):
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image, comment))


def write_pixel_csv(image, path, comment=""):
    lines = []
    if comment:
        lines.extend(f"# {ln}" for ln in str(comment).splitlines())
    lines.append("py,px,r,g,b")
    for py in range(image.height):
        for px in range(image.width):
            r, g, b = image.pixels[py, px]
            lines.append(f"{py},{px},{r!r},{g!r},{b!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def tile_images(images, columns):
    """Tile equally sized images into one image, row-major."""
    if not images:
        raise ValidationError("tile_images: need at least one image")
    h, w = images[0].height, images[0].width
    rows = (len(images) + columns - 1) // columns
    canvas = np.zeros((rows * h, columns * w, 3))
    for idx, img in enumerate(images):
        r, c = divmod(idx, columns)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = img.pixels
    return RenderedImage(width=columns * w, height=rows * h, pixels=canvas)
