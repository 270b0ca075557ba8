"""Direction-aligned, shadow-aware gate maps.

Queries and keys are 1x1-conv projections of a feature map from the
coarse deshadow stage. A lightweight offset predictor warps the keys (and
the shadow mask, so gating stays aligned) by deformable sampling, then an
inner-product similarity is computed between each position and every
warped key in the *same row*. An XOR gate keeps only shadow/non-shadow
cross pairs, the filtered similarities are averaged over the key index,
and the result is zeroed on shadow pixels. The vertical map runs the same
pipeline on transposed axes.

The gate maps feed the pre-softplus step size of the image scan: large
values push a scan step to trust the current input over the carried
state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractViolation
from .ops import bilinear_sample_2d, bilinear_sample_2d_raw, conv2d, identity_grid


@dataclass
class GateMaps:
    """The (horizontal, vertical) modulation maps over the image plane."""

    g_h: Tensor
    g_v: Tensor


@dataclass
class DirectionWeights:
    """Projections for one scan direction: query/key 1x1 convs + offset conv."""

    q_w: Tensor  # (C', C, 1, 1)
    q_b: Tensor  # (C',)
    k_w: Tensor  # (C', C, 1, 1)
    k_b: Tensor  # (C',)
    off_w: Tensor  # (2, C', 3, 3)
    off_b: Tensor  # (2,)

    def tensors(self) -> list[Tensor]:
        return [self.q_w, self.q_b, self.k_w, self.k_b, self.off_w, self.off_b]


def init_direction_weights(
    channels: int, rng: np.random.Generator, qk_channels: int | None = None
) -> DirectionWeights:
    cq = qk_channels or channels
    s1 = 1.0 / np.sqrt(channels)
    s3 = 1.0 / np.sqrt(cq * 9)
    return DirectionWeights(
        q_w=Tensor(rng.normal(0.0, s1, size=(cq, channels, 1, 1))),
        q_b=Tensor(np.zeros(cq)),
        k_w=Tensor(rng.normal(0.0, s1, size=(cq, channels, 1, 1))),
        k_b=Tensor(np.zeros(cq)),
        off_w=Tensor(rng.normal(0.0, s3, size=(2, cq, 3, 3))),
        off_b=Tensor(np.zeros(2)),
    )


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractViolation(f"{name} must be binary 0/1")
    return mask


def project_qk(f, weights: DirectionWeights) -> tuple[Tensor, Tensor]:
    """Independent query/key embeddings via 1x1 convolutions."""
    f = as_tensor(f)
    q = conv2d(f, weights.q_w, weights.q_b)
    k = conv2d(f, weights.k_w, weights.k_b)
    return q, k


def predict_offsets(q, weights: DirectionWeights, max_disp=None) -> Tensor:
    """Bounded 2-D displacements: max_disp * tanh(conv3x3(Q)).

    Channel 0 is the x displacement (bounded by W/4 unless overridden),
    channel 1 the y displacement (bounded by H/4). The result is added to
    the identity sampling grid by the caller.
    """
    q = as_tensor(q)
    _, h, w = q.shape
    if max_disp is None:
        max_disp = (w / 4.0, h / 4.0)
    if max_disp[0] <= 0 or max_disp[1] <= 0:
        raise ContractViolation("max_disp must be positive")
    raw = ad.tanh(conv2d(q, weights.off_w, weights.off_b, padding=1))
    bound = np.array([max_disp[0], max_disp[1]])[:, None, None]
    return ad.mul(raw, bound)


def deform_sample(k, mask: np.ndarray, beta) -> tuple[Tensor, np.ndarray]:
    """Warp keys (differentiably) and the mask (binarized) by the offsets.

    The warped mask is sampled bilinearly and re-thresholded at 0.5, which
    restores the binarity the XOR gate needs; that path carries no
    gradient, matching the derivative of a step function almost
    everywhere.
    """
    k = as_tensor(k)
    beta = as_tensor(beta)
    _, h, w = k.shape
    grid = ad.add(beta, identity_grid(h, w))
    k_hat = bilinear_sample_2d(k, grid)
    m_soft = bilinear_sample_2d_raw(
        _check_binary(mask, "mask")[None], grid.data
    )[0]
    m_hat = (m_soft >= 0.5).astype(np.float64)
    return k_hat, m_hat


def rowwise_similarity(q, k_hat) -> Tensor:
    """sim[r, i, j] = <Q[:, i, j], K_hat[:, i, r]>; shape (W, H, W)."""
    q, k_hat = as_tensor(q), as_tensor(k_hat)
    if q.shape != k_hat.shape:
        raise ContractViolation(
            f"query {q.shape} and key {k_hat.shape} shapes differ"
        )
    out = Tensor(np.einsum("cij,cir->rij", q.data, k_hat.data, optimize=True))

    def vjp_q(g):
        return np.einsum("rij,cir->cij", g, k_hat.data, optimize=True)

    def vjp_k(g):
        return np.einsum("rij,cij->cir", g, q.data, optimize=True)

    return ad.record(out, (q, k_hat), (vjp_q, vjp_k))


def _xor_gate(mask: np.ndarray, warped_mask: np.ndarray) -> np.ndarray:
    """gate[r, i, j] = mask[i, j] XOR warped_mask[i, r], as 0/1 floats."""
    return np.logical_xor(
        mask[None, :, :] != 0.0, warped_mask.T[:, :, None] != 0.0
    ).astype(np.float64)


def cross_region_gate(sim, mask: np.ndarray, warped_mask: np.ndarray) -> Tensor:
    """Keep only shadow/non-shadow pairs: sim * (mask[i,j] XOR warped[i,r])."""
    mask = _check_binary(mask, "mask")
    warped_mask = _check_binary(warped_mask, "warped mask")
    return ad.mul(as_tensor(sim), _xor_gate(mask, warped_mask))


def aggregate_relevance(gated, normalize_by_pairs: bool = False, gate_counts=None) -> Tensor:
    """Collapse the key index: mean over r (divisor W as written).

    With ``normalize_by_pairs`` the divisor becomes the per-position count
    of surviving cross-region pairs instead of W (guarded at >= 1).
    """
    gated = as_tensor(gated)
    if normalize_by_pairs:
        if gate_counts is None:
            raise ContractViolation("pair normalization needs the gate counts")
        return ad.div(ad.tsum(gated, axis=0), np.maximum(gate_counts, 1.0))
    return ad.tmean(gated, axis=0)


def nonshadow_modulation(relevance, mask: np.ndarray) -> Tensor:
    """Zero the relevance map on shadow pixels: relevance * (1 - mask)."""
    mask = _check_binary(mask, "mask")
    return ad.mul(as_tensor(relevance), 1.0 - mask)


def _directional_map(
    f: Tensor,
    mask: np.ndarray,
    weights: DirectionWeights,
    use_offsets: bool,
    normalize_by_pairs: bool,
) -> Tensor:
    q, k = project_qk(f, weights)
    if use_offsets:
        beta = predict_offsets(q, weights)
        k_hat, m_hat = deform_sample(k, mask, beta)
    else:
        k_hat, m_hat = k, _check_binary(mask, "mask")
    sim = rowwise_similarity(q, k_hat)
    gate = _xor_gate(mask, m_hat)
    gated = ad.mul(sim, gate)
    rel = aggregate_relevance(
        gated,
        normalize_by_pairs=normalize_by_pairs,
        gate_counts=gate.sum(axis=0) if normalize_by_pairs else None,
    )
    return nonshadow_modulation(rel, mask)


def crossgate_maps(
    f,
    mask: np.ndarray,
    weights_h: DirectionWeights,
    weights_v: DirectionWeights,
    use_offsets: bool = True,
    normalize_by_pairs: bool = False,
) -> GateMaps:
    """Both directional maps from one feature map and its shadow mask.

    The vertical map is the horizontal pipeline applied to the transposed
    axes (column-wise keys) and transposed back, so the two directions are
    exact mirror images of each other.
    """
    f = as_tensor(f)
    mask = _check_binary(mask, "mask")
    if mask.shape != f.shape[1:]:
        raise ContractViolation(
            f"mask shape {mask.shape} != feature plane {f.shape[1:]}"
        )
    g_h = _directional_map(f, mask, weights_h, use_offsets, normalize_by_pairs)
    g_v_t = _directional_map(
        ad.transpose(f, (0, 2, 1)), mask.T, weights_v, use_offsets, normalize_by_pairs
    )
    return GateMaps(g_h=g_h, g_v=ad.transpose(g_v_t, (1, 0)))


def dump_gate_maps(gates: GateMaps, out_dir, prefix: str = "gate") -> list[str]:
    """Debug dump: write each map as a per-map-normalized grayscale PNG."""
    from pathlib import Path

    from .images import save_gray

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, g in (("h", gates.g_h), ("v", gates.g_v)):
        arr = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        path = out / f"{prefix}_{name}.png"
        save_gray(path, norm)
        paths.append(str(path))
    return paths
