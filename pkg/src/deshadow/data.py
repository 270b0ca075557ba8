"""Seeded synthetic shadow scenes.

Each sample is a clean image (layered gradients plus a few colored
shapes), a shadow mask (union of random convex polygons, 5-60% coverage),
and a degraded image where masked pixels go through a per-sample affine
darkening a*I + b with a two-pixel linear penumbra ramp just inside the
mask boundary. Off-mask pixels of the degraded image are bit-identical
to the clean image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

log = logging.getLogger(__name__)

MIN_COVERAGE = 0.05
MAX_COVERAGE = 0.60
_COVERAGE_RETRIES = 20


@dataclass
class ShadowSample:
    """(degraded image, binary mask, clean image) plus the generator seed."""

    image_in: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    image_gt: np.ndarray  # (3, H, W) in [0, 1]
    seed: int

    def __post_init__(self) -> None:
        off = self.mask == 0.0
        if not np.array_equal(self.image_in[:, off], self.image_gt[:, off]):
            raise ContractViolation("degradation leaked outside the mask")
        cov = float(self.mask.mean())
        if not MIN_COVERAGE <= cov <= MAX_COVERAGE:
            raise ContractViolation(f"mask coverage {cov:.3f} outside contract")


def _gradient_layer(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    grid = np.mgrid[0:h, 0:w]
    ys = grid[0] / max(h - 1, 1)
    xs = grid[1] / max(w - 1, 1)
    img = np.empty((3, h, w))
    for c in range(3):
        a, bx, by = rng.uniform(0.2, 0.8), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)
        img[c] = a + bx * xs + by * ys
    return img


def _draw_shapes(rng: np.random.Generator, img: np.ndarray) -> None:
    _, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.1, 0.3) * min(h, w)
            region = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        else:
            y0, x0 = rng.uniform(0, h * 0.7), rng.uniform(0, w * 0.7)
            y1, x1 = y0 + rng.uniform(0.15, 0.5) * h, x0 + rng.uniform(0.15, 0.5) * w
            region = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
        img[:, region] = color[:, None]


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counterclockwise, of (N, 2) points."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def cross2(a, b):
        return a[0] * b[1] - a[1] * b[0]

    def half(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and cross2(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _rasterize_convex(vertices: np.ndarray, h: int, w: int) -> np.ndarray:
    """Points inside a counterclockwise convex polygon (inclusive edges)."""
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= 0
    return inside


def _random_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray | None:
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        k = int(rng.integers(3, 7))
        center = np.array([rng.uniform(0, w), rng.uniform(0, h)])
        spread = rng.uniform(0.15, 0.45) * min(h, w)
        pts = center + rng.normal(scale=spread, size=(k, 2))
        hull = _convex_hull(pts)
        if len(hull) < 3:
            continue
        mask |= _rasterize_convex(hull, h, w)
    cov = mask.mean()
    if MIN_COVERAGE <= cov <= MAX_COVERAGE:
        return mask.astype(np.float64)
    return None


def _erode(mask: np.ndarray) -> np.ndarray:
    """Binary erosion with a 3x3 box; outside the image counts as empty."""
    padded = np.pad(mask.astype(bool), 1, constant_values=False)
    out = np.ones_like(mask, dtype=bool)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out &= padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out


def _penumbra_weight(mask: np.ndarray) -> np.ndarray:
    """Linear two-pixel ramp inside the mask: 0.5 on the rim, 1.0 deeper in."""
    inner1 = _erode(mask)
    weight = np.zeros_like(mask)
    weight[mask == 1.0] = 0.5
    weight[inner1] = 1.0
    return weight


def synth_shadow_sample(
    seed: int,
    h: int,
    w: int,
    shade_scale: np.ndarray | None = None,
    shade_offset: np.ndarray | None = None,
) -> ShadowSample:
    """Deterministic synthetic sample for one seed.

    ``shade_scale``/``shade_offset`` override the per-sample affine
    darkening (useful to build degenerate shadowless fixtures with
    scale 1, offset 0).
    """
    if h % 4 or w % 4 or h < 16 or w < 16:
        raise ContractViolation(f"extents must be >= 16 and divisible by 4, got {h}x{w}")
    rng = np.random.default_rng(seed)
    clean = np.clip(
        0.6 * _gradient_layer(rng, h, w) + 0.4 * _gradient_layer(rng, h, w), 0.0, 1.0
    )
    _draw_shapes(rng, clean)
    clean = np.clip(clean, 0.02, 0.98)

    mask = None
    for _ in range(_COVERAGE_RETRIES):
        mask = _random_mask(rng, h, w)
        if mask is not None:
            break
    if mask is None:
        log.warning("seed %d: coverage clamp failed; retrying with seed %d", seed, seed + 1)
        return synth_shadow_sample(seed + 1, h, w, shade_scale, shade_offset)

    scale = rng.uniform(0.2, 0.6, size=3) if shade_scale is None else np.asarray(shade_scale)
    offset = rng.uniform(0.0, 0.05, size=3) if shade_offset is None else np.asarray(shade_offset)
    shaded = np.clip(scale[:, None, None] * clean + offset[:, None, None], 0.0, 1.0)
    weight = _penumbra_weight(mask)[None]
    degraded = clean * (1.0 - weight) + shaded * weight
    return ShadowSample(image_in=degraded, mask=mask, image_gt=clean, seed=seed)


def synth_dataset(n: int, seed: int, size: int) -> list[ShadowSample]:
    """n samples from consecutive sub-seeds of one base seed."""
    return [synth_shadow_sample(seed + 1000 * i, size, size) for i in range(n)]
