"""Global/local view sampling and bilinear resizing.

Crop rectangles are continuous (float coordinates), so the sampled
area fraction is exactly the drawn one, and resizing uses half-pixel
centers: target pixel i reads source coordinate y0 + (i + 0.5) * h/T - 0.5.
Resizing the full image to its own size is therefore the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_MAX_ASPECT_TRIES = 16


@dataclass(frozen=True)
class CropSpec:
    """View counts, area ranges and output sizes.

    Desk-scale sizes; the full-scale reference configuration uses 256px
    global and 96px local views with the same area ranges.
    """

    n_global: int = 2
    n_local: int = 8
    global_area: tuple[float, float] = (0.4, 1.0)
    local_area: tuple[float, float] = (0.05, 0.4)
    global_size: int = 32
    local_size: int = 16

    def __post_init__(self):
        for lo, hi in (self.global_area, self.local_area):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"area range ({lo}, {hi}) must lie within (0, 1]")
        if not self.local_size < self.global_size:
            raise ValueError(
                f"local_size {self.local_size} must be < global_size {self.global_size}"
            )


# uniform draws consumed per rect: area, aspect, y placement, x placement
RECT_DRAWS = 4


def _rect_from_units(units: np.ndarray, src: int, area_range: tuple[float, float]) -> tuple:
    """Map RECT_DRAWS unit-uniforms to a (y0, x0, h, w) float rect.

    The area fraction is exactly uniform in area_range.  The aspect ratio
    is log-uniform over [3/4, 4/3] intersected with the range that keeps
    both sides inside the source (w <= src needs aspect <= 1/frac, h <= src
    needs aspect >= frac), so no rejection is required and the area
    marginal stays uniform.
    """
    lo, hi = area_range
    frac = lo + float(units[0]) * (hi - lo)
    a_lo = max(ASPECT_RANGE[0], frac)
    a_hi = min(ASPECT_RANGE[1], 1.0 / frac)
    log_a = np.log(a_lo) + float(units[1]) * (np.log(a_hi) - np.log(a_lo))
    aspect = float(np.exp(log_a))
    w = min(src * float(np.sqrt(frac * aspect)), float(src))
    h = min(src * float(np.sqrt(frac / aspect)), float(src))
    y0 = float(units[2]) * (src - h)
    x0 = float(units[3]) * (src - w)
    return (y0, x0, h, w)


def sample_crop_rect(stream: Stream, src: int, area_range: tuple[float, float]) -> tuple:
    """One (y0, x0, h, w) float rect with area/src^2 uniform in area_range."""
    return _rect_from_units(stream.uniform(RECT_DRAWS), src, area_range)


def crop_resize_batch(images: np.ndarray, rects: np.ndarray, target: int) -> np.ndarray:
    """Bilinear-resample per-image float rects to (B, target, target, C).

    images: (B, S, S, C); rects: (B, 4) rows of (y0, x0, h, w).
    """
    b, s, _, c = images.shape
    t = target
    steps = (np.arange(t, dtype=np.float64) + 0.5) / t
    sy = rects[:, 0:1] + steps[None, :] * rects[:, 2:3] - 0.5  # (B, T)
    sx = rects[:, 1:2] + steps[None, :] * rects[:, 3:4] - 0.5
    sy = np.clip(sy, 0.0, s - 1)
    sx = np.clip(sx, 0.0, s - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, s - 1)
    x1 = np.minimum(x0 + 1, s - 1)
    wy = (sy - y0).astype(np.float32)[:, :, None, None]  # (B, T, 1, 1)
    wx = (sx - x0).astype(np.float32)[:, None, :, None]  # (B, 1, T, 1)

    # gather the four corners through flat linear indices (fast path)
    flat = images.reshape(b * s * s, c)
    row = (np.arange(b, dtype=np.int64) * s)[:, None, None]
    ya, yb = (row + y0[:, :, None]) * s, (row + y1[:, :, None])  # (B, T, 1)
    yb = yb * s
    xa, xb = x0[:, None, :], x1[:, None, :]  # (B, 1, T)
    top = flat[ya + xa] * (1 - wx) + flat[ya + xb] * wx
    bot = flat[yb + xa] * (1 - wx) + flat[yb + xb] * wx
    return top * (1 - wy) + bot * wy


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    """Resize one (H, W, C) image to (target, target, C)."""
    if target < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    h, w = image.shape[:2]
    if h != w:
        raise ValueError(f"expected a square image, got {image.shape}")
    rect = np.array([[0.0, 0.0, float(h), float(w)]])
    return crop_resize_batch(image[None], rect, target)[0]


def _rects_from_units(units: np.ndarray, src: int, area_range: tuple[float, float]) -> np.ndarray:
    """Vectorized _rect_from_units over (N, RECT_DRAWS) unit draws -> (N, 4)."""
    lo, hi = area_range
    frac = lo + units[:, 0] * (hi - lo)
    a_lo = np.maximum(ASPECT_RANGE[0], frac)
    a_hi = np.minimum(ASPECT_RANGE[1], 1.0 / frac)
    aspect = np.exp(np.log(a_lo) + units[:, 1] * (np.log(a_hi) - np.log(a_lo)))
    w = np.minimum(src * np.sqrt(frac * aspect), float(src))
    h = np.minimum(src * np.sqrt(frac / aspect), float(src))
    y0 = units[:, 2] * (src - h)
    x0 = units[:, 3] * (src - w)
    return np.stack([y0, x0, h, w], axis=1)


def sample_view_rects(spec: CropSpec, src: int, seed: int) -> np.ndarray:
    """All (n_global + n_local) crop rects for one image, in view order."""
    n = spec.n_global + spec.n_local
    units = Stream(seed).uniform(n * RECT_DRAWS).reshape(n, RECT_DRAWS)
    g = spec.n_global
    return np.concatenate(
        [
            _rects_from_units(units[:g], src, spec.global_area),
            _rects_from_units(units[g:], src, spec.local_area),
        ]
    )


def sample_views(image: np.ndarray, spec: CropSpec, seed: int) -> dict:
    """Sample all views of one image.

    Returns the full image resized to global_size (for the contrastive
    branch), n_global global crops and n_local local crops, each resized
    bilinearly to its configured size.
    """
    h, w = image.shape[:2]
    if min(h, w) < spec.local_size:
        raise ValueError(
            f"image {image.shape} smaller than minimum crop size {spec.local_size}"
        )
    rects = sample_view_rects(spec, h, seed)
    img = image[None]
    g = spec.n_global
    globals_ = [
        crop_resize_batch(img, rects[i : i + 1], spec.global_size)[0] for i in range(g)
    ]
    locals_ = [
        crop_resize_batch(img, rects[g + i : g + i + 1], spec.local_size)[0]
        for i in range(spec.n_local)
    ]
    return {
        "contrastive": resize_bilinear(image, spec.global_size),
        "global": globals_,
        "local": locals_,
    }
