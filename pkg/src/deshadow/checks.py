"""Finite-difference verification suites.

Each entry builds a small randomized scalar function of explicit
parameter arrays and compares analytic tape gradients against central
differences. Unit-level checks must land under 1e-4 relative error; the
end-to-end loss check (which crosses bilinear-sampling kinks and the
output clamp) gets 1e-3 on a spot-checked parameter subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, finite_diff_check
from .crossgate import DirectionWeights, crossgate_maps, init_direction_weights
from .colorshift import FeatureExtractor, colorshift_loss, feature_extract
from .errors import GradCheckError
from .model import ModelConfig, ShadowRemovalModel, charbonnier, total_loss
from .ops import bilinear_sample_2d, conv2d, layer_norm
from .ssm import ContinuousParams, init_continuous_params, selective_scan

UNIT_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _check_softplus(rng) -> float:
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    return finite_diff_check(
        lambda p: ad.tsum(ad.mul(ad.softplus(p[0]), w)), [x]
    )


def _check_conv2d(rng) -> float:
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    c = rng.normal(size=(3, 5, 5))
    return finite_diff_check(
        lambda p: ad.tsum(ad.mul(conv2d(p[0], p[1], p[2], padding=1), c)), [x, w, b]
    )


def _check_layer_norm(rng) -> float:
    x = rng.normal(size=(3, 2, 2))
    gain = rng.normal(size=3)
    shift = rng.normal(size=3)
    c = rng.normal(size=(3, 2, 2))
    return finite_diff_check(
        lambda p: ad.tsum(ad.mul(layer_norm(p[0], p[1], p[2]), c)), [x, gain, shift]
    )


def _check_bilinear(rng) -> float:
    src = rng.normal(size=(2, 4, 4))
    # Keep sampling positions away from integer-coordinate kinks.
    grid = rng.uniform(0.2, 2.8, size=(2, 3, 3))
    grid += np.where(np.abs(grid - np.rint(grid)) < 0.05, 0.1, 0.0)
    c = rng.normal(size=(2, 3, 3))
    return finite_diff_check(
        lambda p: ad.tsum(ad.mul(bilinear_sample_2d(p[0], p[1]), c)), [src, grid]
    )


def _check_selective_scan(rng) -> float:
    l, c, z = 10, 3, 3
    x = rng.normal(size=(l, c))
    gates = rng.normal(size=l)
    weight = rng.normal(size=(l, c))
    template = init_continuous_params(c, z, rng)

    def f(p):
        params = ContinuousParams(*p[:7])
        return ad.tsum(ad.mul(selective_scan(p[7], params, Tensor(gates)), weight))

    arrs = [t.data for t in template.tensors()] + [x]
    return finite_diff_check(f, arrs)


def _check_crossgate(rng) -> float:
    h = w = 4
    c, cq = 2, 2
    f = rng.normal(size=(c, h, w))
    mask = (rng.random((h, w)) < 0.5).astype(np.float64)
    mask[0, 0], mask[-1, -1] = 1.0, 0.0  # force a mixed mask
    template = init_direction_weights(c, rng, cq)
    wh = rng.normal(size=(h, w))
    wv = rng.normal(size=(h, w))

    def f_fn(p):
        weights_h = DirectionWeights(*p[0:6])
        weights_v = DirectionWeights(*p[6:12])
        gates = crossgate_maps(p[12], mask, weights_h, weights_v)
        return ad.add(
            ad.tsum(ad.mul(gates.g_h, wh)), ad.tsum(ad.mul(gates.g_v, wv))
        )

    rng2 = np.random.default_rng(rng.integers(2**32))
    arrs = [t.data for t in template.tensors()]
    arrs += [t.data for t in init_direction_weights(c, rng2, cq).tensors()]
    # Nonzero offset biases keep sampling positions off the integer grid.
    arrs[5] = rng.uniform(0.3, 0.7, size=2)
    arrs[11] = rng.uniform(0.3, 0.7, size=2)
    arrs.append(f)
    return finite_diff_check(f_fn, arrs)


def _check_charbonnier(rng) -> float:
    pred = rng.uniform(0.1, 0.9, size=(3, 4, 4))
    target = rng.uniform(0.1, 0.9, size=(3, 4, 4))
    return finite_diff_check(
        lambda p: charbonnier(p[0], Tensor(target)), [pred]
    )


def _check_colorshift_loss(rng) -> float:
    extractor = FeatureExtractor.default(seed=3)
    mask = (rng.random((8, 8)) < 0.5).astype(np.float64)
    mask[2:5, 2:5] = 1.0
    target = rng.uniform(0.1, 0.9, size=(3, 8, 8))
    neg1 = np.clip(target * rng.uniform(0.5, 1.5, size=(3, 1, 1)), 0, 1)
    neg2 = np.clip(target * rng.uniform(0.5, 1.5, size=(3, 1, 1)), 0, 1)
    f_pos = feature_extract(target, mask, extractor).data
    pairs = [
        (feature_extract(neg1, mask, extractor).data, 0.6),
        (feature_extract(neg2, mask, extractor).data, 0.4),
    ]
    pred = rng.uniform(0.1, 0.9, size=(3, 8, 8))

    def f(p):
        anchor = feature_extract(p[0], mask, extractor)
        return colorshift_loss(anchor, Tensor(f_pos), pairs)

    return finite_diff_check(f, [pred])


def unit_checks(seed: int = 0) -> list[CheckResult]:
    """The per-operation finite-difference suite."""
    rng = np.random.default_rng(seed)
    table = [
        ("softplus", _check_softplus),
        ("conv2d", _check_conv2d),
        ("layer_norm", _check_layer_norm),
        ("bilinear_sample_2d", _check_bilinear),
        ("selective_scan", _check_selective_scan),
        ("crossgate_pipeline", _check_crossgate),
        ("charbonnier", _check_charbonnier),
        ("colorshift_loss", _check_colorshift_loss),
    ]
    return [CheckResult(name, fn(rng), UNIT_TOL) for name, fn in table]


def _e2e_loss(model, image, target, mask, extractor, neg_feats) -> Tensor:
    """Full forward + Charbonnier + weighted contrastive term."""
    pred = model.forward(Tensor(image), mask)
    loss = total_loss(pred, Tensor(target), mask, None, extractor, 0.0)
    anchor = feature_extract(pred, mask, extractor)
    f_pos = feature_extract(Tensor(target), mask, extractor)
    pairs = [(fn, 1.0 / len(neg_feats)) for fn in neg_feats]
    return ad.add(loss, ad.mul(colorshift_loss(anchor, f_pos, pairs), 0.01))


def end_to_end_check(seed: int = 0, subset_fraction: float = 0.01) -> CheckResult:
    """Spot-check total-loss gradients on ~1% of model parameter entries.

    Runs the full forward at 8x8. Entries belonging to the offset
    predictor are excluded: they move bilinear sampling positions, whose
    kinks make central differences unreliable at any fixed step.
    """
    from .data import synth_shadow_sample

    rng = np.random.default_rng(seed)
    config = ModelConfig(channels=4, state_dim=2, expand=2, seed=seed)
    model = ShadowRemovalModel(config)
    # The output heads are zero-initialized (identity start), which makes
    # the whole model constant and the check vacuous; move off that point.
    for head in ("coarse.out.w", "main.out.w"):
        tensor = model.params[head]
        tensor.data[...] = rng.normal(0.0, 0.05, size=tensor.data.shape)
    sample = synth_shadow_sample(seed + 11, 16, 16)
    image = sample.image_in[:, :8, :8]
    target = sample.image_gt[:, :8, :8]
    mask = sample.mask[:8, :8].copy()
    if mask.sum() == 0 or mask.sum() == mask.size:
        mask[3:5, 3:5] = 1.0
        mask[0, 0] = 0.0
    extractor = FeatureExtractor.default(seed=1)
    neg_feats = [
        feature_extract(np.clip(target * s, 0, 1), mask, extractor).data
        for s in (0.7, 1.3)
    ]

    with Tape() as tape:
        for name in model.params:
            tape.watch(model.params[name])
        loss = _e2e_loss(model, image, target, mask, extractor, neg_feats)
    base = loss.item()
    if not np.isfinite(base):
        raise GradCheckError("non-finite end-to-end loss")
    grads = backward(tape, loss)

    entries = []
    for name, tensor in model.params.items():
        if ".off." in name:
            continue  # kink-adjacent: these move sampling coordinates
        for j in range(tensor.data.size):
            entries.append((name, j))
    rng.shuffle(entries)
    picked = entries[: max(8, int(len(entries) * subset_fraction))]

    h = 1e-5
    worst = 0.0
    for name, j in picked:
        tensor = model.params[name]
        flat = tensor.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        hi = _e2e_loss(model, image, target, mask, extractor, neg_feats).item()
        flat[j] = orig - h
        lo = _e2e_loss(model, image, target, mask, extractor, neg_feats).item()
        flat[j] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradCheckError(f"non-finite loss perturbing {name}[{j}]")
        numeric = (hi - lo) / (2 * h)
        ana = float(grads.get(tensor.id, np.zeros_like(tensor.data)).reshape(-1)[j])
        worst = max(worst, abs(ana - numeric) / max(1.0, abs(ana)))
    return CheckResult("total_loss_8x8", worst, END_TO_END_TOL)
