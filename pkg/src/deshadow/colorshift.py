"""Color-shifted contrastive negatives and their weighted ratio loss.

Negatives are built from the ground truth alone: k-means dominant colors
define per-channel scaling ratios against the shadow region's mean color,
each ratio recolors the shadow region (non-shadow pixels are copied
verbatim), candidates are kept only when their LAB-space RMSE difficulty
falls strictly inside mean +/- std of the pool, and the survivors are
weighted by normalized reciprocal difficulty.

Images are float arrays in [0, 1] (channel-first 3xHxW). Color triplets
and the k-means working space use 8-bit units [0, 255] so the documented
constants (clamp range, movement tolerance) read naturally.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ConfigError, ContractViolation, NoShadowRegion
from .ops import conv2d

log = logging.getLogger(__name__)

_RATIO_GUARD = 1e-6  # floor for the shadow mean color in 8-bit units
_LOSS_GUARD = 1e-12

DEFAULT_CLUSTERS = 10


@dataclass(frozen=True)
class ColorTriplet:
    """One RGB color in 8-bit units."""

    r: float
    g: float
    b: float

    def __post_init__(self) -> None:
        for v in (self.r, self.g, self.b):
            if not 0.0 <= v <= 255.0:
                raise ContractViolation(f"color channel {v} outside [0, 255]")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b])


# ---------------------------------------------------------------------------
# Dominant colors and negative synthesis
# ---------------------------------------------------------------------------


def kmeans_rgb(image: np.ndarray, k: int, seed: int) -> list[ColorTriplet]:
    """K dominant colors of an image via seeded k-means++ and Lloyd steps.

    Iterates until the largest centroid movement drops below 1e-4 (8-bit
    units) or 100 rounds. If the image has fewer distinct colors than k,
    the distinct colors are cycled to fill the list and a warning is
    logged.
    """
    if k < 1:
        raise ContractViolation(f"cluster count must be >= 1, got {k}")
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ContractViolation("k-means input image is empty")
    pixels = image.reshape(3, -1).T * 255.0
    distinct = np.unique(pixels, axis=0)
    if len(distinct) < k:
        log.warning(
            "image has %d distinct colors < k=%d; duplicating centroids",
            len(distinct),
            k,
        )
        reps = [distinct[i % len(distinct)] for i in range(k)]
        return [ColorTriplet(*np.clip(c, 0.0, 255.0)) for c in reps]

    rng = np.random.default_rng(seed)
    n = len(pixels)
    centroids = np.empty((k, 3))
    centroids[0] = pixels[rng.integers(n)]
    d2 = ((pixels - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = pixels[rng.integers(n)]
        else:
            centroids[i] = pixels[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pixels - centroids[i]) ** 2).sum(axis=1))

    for _ in range(100):
        dists = ((pixels[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        moved = 0.0
        for i in range(k):
            members = pixels[labels == i]
            if len(members) == 0:
                continue  # empty cluster keeps its centroid
            new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - centroids[i])))
            centroids[i] = new
        if moved < 1e-4:
            break
    return [ColorTriplet(*np.clip(c, 0.0, 255.0)) for c in centroids]


def shadow_mean_color(image: np.ndarray, mask: np.ndarray) -> ColorTriplet:
    """Per-channel mean of the image over mask==1 pixels, in 8-bit units."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    count = float(mask.sum())
    if count == 0:
        raise NoShadowRegion("mask has no shadow pixels")
    mean = (image * mask[None]).sum(axis=(1, 2)) / count * 255.0
    return ColorTriplet(*np.clip(mean, 0.0, 255.0))


def synth_negative(
    image: np.ndarray,
    mask: np.ndarray,
    color: ColorTriplet,
    shadow_color: ColorTriplet,
) -> np.ndarray:
    """Scale the shadow region toward a dominant color; copy the rest.

    The per-channel ratio is color / max(shadow_color, 1e-6); scaled
    shadow pixels are clamped back into range, non-shadow pixels stay
    bit-identical to the input.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    ratio = color.as_array() / np.maximum(shadow_color.as_array(), _RATIO_GUARD)
    shifted = np.clip(image * ratio[:, None, None], 0.0, 1.0)
    m = mask[None]
    return shifted * m + image * (1.0 - m)


def color_ratio(color: ColorTriplet, shadow_color: ColorTriplet) -> np.ndarray:
    """The chromatic scaling factor used by :func:`synth_negative`."""
    return color.as_array() / np.maximum(shadow_color.as_array(), _RATIO_GUARD)


# ---------------------------------------------------------------------------
# CIELAB difficulty metric
# ---------------------------------------------------------------------------

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA = 6.0 / 29.0


def srgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB [0, 1] -> linear RGB -> XYZ (D65) -> CIELAB, channel-first."""
    srgb = np.asarray(image, dtype=np.float64)
    linear = np.where(
        srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4
    )
    xyz = np.einsum("ij,jhw->ihw", _SRGB_TO_XYZ, linear)
    t = xyz / _D65_WHITE[:, None, None]
    f = np.where(
        t > _LAB_DELTA**3, np.cbrt(t), t / (3.0 * _LAB_DELTA**2) + 4.0 / 29.0
    )
    lab = np.empty_like(xyz)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab


def lab_rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean square difference in LAB space over all pixels/channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    diff = srgb_to_lab(a) - srgb_to_lab(b)
    return float(np.sqrt(np.mean(diff * diff)))


# ---------------------------------------------------------------------------
# Difficulty filtering and weighting
# ---------------------------------------------------------------------------


@dataclass
class FilterResult:
    kept: list[int]
    r_mu: float
    r_sigma: float
    fallback: bool  # empty strict interval; closest-to-mean candidate kept


def filter_negatives(difficulties) -> FilterResult:
    """Keep candidates strictly inside (mean - std, mean + std).

    Statistics use the population standard deviation of the full
    candidate pool. When the strict interval is empty (clustered or
    degenerate difficulties) the single candidate closest to the mean is
    kept instead.
    """
    r = np.asarray(difficulties, dtype=np.float64)
    if r.size == 0:
        raise ContractViolation("need at least one candidate difficulty")
    mu = float(r.mean())
    sigma = float(r.std())
    kept = [
        i for i, v in enumerate(r) if (mu - sigma) < v < (mu + sigma)
    ]
    if kept:
        return FilterResult(kept, mu, sigma, fallback=False)
    closest = int(np.argmin(np.abs(r - mu)))
    return FilterResult([closest], mu, sigma, fallback=True)


def weight_negatives(difficulties) -> np.ndarray:
    """Normalized reciprocal difficulties; sums to one."""
    r = np.asarray(difficulties, dtype=np.float64)
    if r.size == 0:
        raise ContractViolation("cannot weight an empty negative set")
    if np.any(r <= 0.0):
        raise ContractViolation("difficulties must be positive (drop zeros first)")
    inv = 1.0 / r
    return inv / inv.sum()


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Deterministic conv stack standing in for a pretrained network.

    Three stride-2 3x3 convolutions with softplus between them; the
    default weights are seeded row-orthonormal Gaussians, so two
    extractors with the same name and seed are interchangeable. Weights
    can also be loaded from an .npz file (keys w0/b0/w1/b1/w2/b2).
    """

    WIDTHS = (8, 16, 16)

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], name: str):
        if len(weights) != len(biases):
            raise ConfigError("weight/bias layer counts differ")
        chain = 3
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
                raise ConfigError(f"layer {i} weight must be (out, in, k, k), k odd")
            if w.shape[1] != chain:
                raise ConfigError(
                    f"layer {i} expects {chain} input channels, file has {w.shape[1]}"
                )
            if b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i} bias shape {b.shape} != ({w.shape[0]},)")
            chain = w.shape[0]
        self.weights = [Tensor(np.asarray(w, dtype=np.float64)) for w in weights]
        self.biases = [Tensor(np.asarray(b, dtype=np.float64)) for b in biases]
        self.name = name

    @classmethod
    def default(cls, seed: int = 0) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        cin = 3
        for cout in cls.WIDTHS:
            flat = rng.normal(size=(cin * 9, max(cout, cin * 9)))
            q, _ = np.linalg.qr(flat)
            weights.append(np.ascontiguousarray(q[:, :cout].T).reshape(cout, cin, 3, 3))
            biases.append(np.zeros(cout))
            cin = cout
        return cls(weights, biases, name=f"default-seed{seed}")

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        path = Path(path)
        try:
            blob = np.load(path)
        except Exception as exc:
            raise ConfigError(f"cannot read extractor weights {path}: {exc}") from exc
        weights, biases = [], []
        i = 0
        while f"w{i}" in blob:
            if f"b{i}" not in blob:
                raise ConfigError(f"missing bias b{i} in {path}")
            weights.append(blob[f"w{i}"])
            biases.append(blob[f"b{i}"])
            i += 1
        if not weights:
            raise ConfigError(f"no w0/b0 arrays found in {path}")
        return cls(weights, biases, name=f"file:{path.name}")

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        for w, b in zip(self.weights, self.biases):
            k = w.shape[2]
            x = conv2d(x, w, b, stride=2, padding=k // 2)
            x = ad.softplus(x)
        return x


def feature_extract(image, mask: np.ndarray, extractor: FeatureExtractor) -> Tensor:
    """Features of the masked image: extractor(image * mask)."""
    masked = ad.mul(as_tensor(image), np.asarray(mask, dtype=np.float64)[None])
    return extractor(masked)


# ---------------------------------------------------------------------------
# Contrastive loss and the end-to-end builder
# ---------------------------------------------------------------------------


def _l1(a: Tensor, b) -> Tensor:
    return ad.tsum(ad.absolute(ad.sub(a, b)))


def colorshift_loss(f_anchor, f_pos, negatives) -> Tensor:
    """d(f, f+) / (d(f, f+) + sum_i gamma_i d(f, f_i-)), with L1 distances.

    Always in [0, 1); zero exactly when anchor and positive features
    coincide. ``negatives`` is a non-empty list of (feature, weight)
    pairs; the denominator carries a 1e-12 guard.
    """
    if not negatives:
        raise ContractViolation("contrastive loss needs at least one negative")
    f_anchor = as_tensor(f_anchor)
    f_pos = as_tensor(f_pos)
    for f_neg, _ in negatives:
        if as_tensor(f_neg).shape != f_anchor.shape:
            raise ContractViolation("all feature tensors must share one shape")
    if f_pos.shape != f_anchor.shape:
        raise ContractViolation("all feature tensors must share one shape")
    num = _l1(f_anchor, f_pos)
    den = ad.add(num, _LOSS_GUARD)
    for f_neg, gamma in negatives:
        den = ad.add(den, ad.mul(_l1(f_anchor, f_neg), float(gamma)))
    return ad.div(num, den)


@dataclass
class NegativeSet:
    """Filtered color-shifted negatives with difficulties and weights.

    ``negatives[i]`` is a (3, H, W) image whose difficulty is
    ``difficulties[i]`` and whose loss weight is ``weights[i]`` (weights
    sum to one). The remaining fields record how the set was built; when
    an extractor was supplied, ``features`` holds the per-negative
    feature arrays for caching.
    """

    negatives: list[np.ndarray]
    difficulties: np.ndarray
    weights: np.ndarray
    shadow_color: ColorTriplet
    candidate_colors: list[ColorTriplet]
    candidate_difficulties: np.ndarray
    kept_indices: list[int]
    r_mu: float
    r_sigma: float
    fallback: bool
    features: list[np.ndarray] = field(default_factory=list)

    def loss_pairs(self, extractor: FeatureExtractor, mask: np.ndarray):
        """(feature, weight) pairs for :func:`colorshift_loss`."""
        if self.features:
            feats = self.features
        else:
            feats = [
                feature_extract(n, mask, extractor).data for n in self.negatives
            ]
        return list(zip(feats, self.weights))


def build_negative_set(
    image: np.ndarray,
    mask: np.ndarray,
    k: int = DEFAULT_CLUSTERS,
    seed: int = 0,
    extractor: FeatureExtractor | None = None,
) -> NegativeSet:
    """Run the whole negative pipeline for one ground-truth image.

    k-means colors -> shadow mean -> K recolored candidates -> LAB-RMSE
    difficulties -> strict interval filter -> reciprocal weights.
    Deterministic for a fixed seed. Raises :class:`NoShadowRegion` when
    the mask is empty or when every usable candidate is identical to the
    ground truth (zero difficulty), in which case the caller must skip
    the regularizer.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    shadow_color = shadow_mean_color(image, mask)  # raises on empty mask
    colors = kmeans_rgb(image, k, seed)
    candidates = [synth_negative(image, mask, c, shadow_color) for c in colors]
    difficulties = np.array([lab_rmse(n, image) for n in candidates])
    result = filter_negatives(difficulties)
    usable = [i for i in result.kept if difficulties[i] > 0.0]
    if not usable:
        raise NoShadowRegion(
            "no usable negatives: kept candidates are identical to ground truth"
        )
    kept_r = difficulties[usable]
    weights = weight_negatives(kept_r)
    features = []
    if extractor is not None:
        features = [
            feature_extract(candidates[i], mask, extractor).data for i in usable
        ]
    return NegativeSet(
        negatives=[candidates[i] for i in usable],
        difficulties=kept_r,
        weights=weights,
        shadow_color=shadow_color,
        candidate_colors=colors,
        candidate_difficulties=difficulties,
        kept_indices=usable,
        r_mu=result.r_mu,
        r_sigma=result.r_sigma,
        fallback=result.fallback,
        features=features,
    )
