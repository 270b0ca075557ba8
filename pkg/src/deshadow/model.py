"""Miniature shadow-removal network and its two-stage trainer.

A coarse unit (two ungated scan blocks) produces shadow-suppressed
features; the gating module turns those features plus the mask into
directional gate maps; the main body is a one-level encoder-decoder of
gate-modulated scan blocks whose 3-channel residual is added to the
input. Stage 1 fits the coarse unit under a Charbonnier loss; stage 2
freezes it and trains the main body under Charbonnier plus a weighted
color-shift contrastive term.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, as_tensor, backward, clamp
from .colorshift import (
    FeatureExtractor,
    NegativeSet,
    build_negative_set,
    colorshift_loss,
    feature_extract,
)
from .crossgate import DirectionWeights, GateMaps, crossgate_maps, init_direction_weights
from .errors import ConfigError, ContractViolation, NoShadowRegion, TrainingError
from .ops import avg_pool2, conv2d, depthwise_conv2d, layer_norm, upsample_nearest2
from .ssm import ContinuousParams, init_continuous_params, scan_image_4dir

ABLATION_VARIANTS = ("baseline", "gh", "gv", "full", "no-offset")


@dataclass
class ModelConfig:
    """Architecture and training knobs; defaults are the desk-scale set."""

    channels: int = 16
    state_dim: int = 4
    expand: int = 2
    coarse_blocks: int = 2
    enc_blocks: int = 2
    dec_blocks: int = 2
    qk_channels: int | None = None
    lambda_cs: float = 0.01
    charb_eps: float = 1e-3
    charbonnier_form: str = "per_pixel"  # or "global"
    kmeans_k: int = 10
    lr: float = 2e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    stage1_steps: int = 200
    stage2_steps: int = 200
    seed: int = 0
    feature_seed: int = 0
    use_offsets: bool = True
    gate_h: bool = True
    gate_v: bool = True
    share_path_params: bool = False
    normalize_gate_by_pairs: bool = False

    def __post_init__(self) -> None:
        positive = {
            "channels": self.channels,
            "state_dim": self.state_dim,
            "expand": self.expand,
            "coarse_blocks": self.coarse_blocks,
            "enc_blocks": self.enc_blocks,
            "dec_blocks": self.dec_blocks,
            "charb_eps": self.charb_eps,
            "kmeans_k": self.kmeans_k,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.lambda_cs < 0:
            raise ConfigError("lambda_cs must be >= 0")
        if self.charbonnier_form not in ("per_pixel", "global"):
            raise ConfigError(f"unknown charbonnier_form {self.charbonnier_form!r}")

    def with_ablation(self, variant: str) -> "ModelConfig":
        """Preset gate flags for one ablation row."""
        presets = {
            "baseline": dict(gate_h=False, gate_v=False),
            "gh": dict(gate_h=True, gate_v=False),
            "gv": dict(gate_h=False, gate_v=True),
            "full": dict(gate_h=True, gate_v=True),
            "no-offset": dict(gate_h=True, gate_v=True, use_offsets=False),
        }
        if variant not in presets:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        return replace(self, **presets[variant])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class _BlockParams:
    norm_gain: Tensor
    norm_shift: Tensor
    expand_w: Tensor
    expand_b: Tensor
    dw_w: Tensor
    dw_b: Tensor
    paths: list[ContinuousParams]
    contract_w: Tensor
    contract_b: Tensor


class ShadowRemovalModel:
    """Parameter container plus the forward graph builders.

    Parameters are persistent leaf tensors registered under dotted names;
    names starting with ``coarse.`` belong to the stage-1 unit, the rest
    to the main body (including the gating projections).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        c = config.channels

        self._register_conv("coarse.in", 4, c, 3, rng)
        self.coarse_block_params = [
            self._register_block(f"coarse.block{i}", c, rng)
            for i in range(config.coarse_blocks)
        ]
        # Zero-initialized output heads start both stages at the identity map.
        self._register_conv("coarse.out", c, 3, 3, rng, zero_init=True)

        self.gate_weights_h = self._register_direction("main.gate.h", c, rng)
        self.gate_weights_v = self._register_direction("main.gate.v", c, rng)
        self._register_conv("main.in", 4, c, 3, rng)
        self.enc_block_params = [
            self._register_block(f"main.enc{i}", c, rng)
            for i in range(config.enc_blocks)
        ]
        self._register_conv("main.down", c, c, 3, rng)
        self.dec_block_params = [
            self._register_block(f"main.dec{i}", c, rng)
            for i in range(config.dec_blocks)
        ]
        self._register_conv("main.out", c, 3, 3, rng, zero_init=True)

    # -- parameter registration -------------------------------------------

    def _add(self, name: str, tensor: Tensor) -> Tensor:
        self.params[name] = tensor
        return tensor

    def _register_conv(
        self,
        name: str,
        cin: int,
        cout: int,
        k: int,
        rng,
        zero_init: bool = False,
        gain: float = 1.0,
    ) -> None:
        scale = 0.0 if zero_init else gain / np.sqrt(cin * k * k)
        self._add(f"{name}.w", Tensor(rng.normal(0.0, 1.0, size=(cout, cin, k, k)) * scale))
        self._add(f"{name}.b", Tensor(np.zeros(cout)))

    def _register_scan_paths(
        self, name: str, channels: int, rng
    ) -> list[ContinuousParams]:
        n_paths = 1 if self.config.share_path_params else 4
        sets = []
        for p in range(n_paths):
            cp = init_continuous_params(channels, self.config.state_dim, rng)
            for fname, tensor in zip(
                ("a", "wb", "wc", "wdelta", "theta", "wgate", "d"), cp.tensors()
            ):
                self._add(f"{name}.path{p}.{fname}", tensor)
            sets.append(cp)
        if self.config.share_path_params:
            sets = sets * 4
        return sets

    def _register_block(self, name: str, channels: int, rng) -> _BlockParams:
        e = channels * self.config.expand
        self._add(f"{name}.norm.gain", Tensor(np.ones(channels)))
        self._add(f"{name}.norm.shift", Tensor(np.zeros(channels)))
        self._register_conv(f"{name}.expand", channels, e, 1, rng)
        self._add(
            f"{name}.dw.w", Tensor(rng.normal(0.0, 1.0 / 3.0, size=(e, 3, 3)))
        )
        self._add(f"{name}.dw.b", Tensor(np.zeros(e)))
        paths = self._register_scan_paths(f"{name}.scan", e, rng)
        # Small contract gain keeps each residual branch near-identity at init.
        self._register_conv(f"{name}.contract", e, channels, 1, rng, gain=0.1)
        return _BlockParams(
            norm_gain=self.params[f"{name}.norm.gain"],
            norm_shift=self.params[f"{name}.norm.shift"],
            expand_w=self.params[f"{name}.expand.w"],
            expand_b=self.params[f"{name}.expand.b"],
            dw_w=self.params[f"{name}.dw.w"],
            dw_b=self.params[f"{name}.dw.b"],
            paths=paths,
            contract_w=self.params[f"{name}.contract.w"],
            contract_b=self.params[f"{name}.contract.b"],
        )

    def _register_direction(self, name: str, channels: int, rng) -> DirectionWeights:
        dw = init_direction_weights(channels, rng, self.config.qk_channels)
        for fname, tensor in zip(
            ("q.w", "q.b", "k.w", "k.b", "off.w", "off.b"), dw.tensors()
        ):
            self._add(f"{name}.{fname}", tensor)
        return dw

    def param_names(self, group: str | None = None) -> list[str]:
        if group is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(f"{group}.")]

    # -- forward graph ------------------------------------------------------

    def _conv(self, name: str, x, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.w"]
        return conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=w.shape[2] // 2)

    def coarse_forward(self, image, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Coarse unit: features for gating plus a 3-channel prediction."""
        image = as_tensor(image)
        x = self._stack_input(image, mask)
        x = self._conv("coarse.in", x)
        for bp in self.coarse_block_params:
            x = mamba_block(x, bp, gates=None)
        coarse = ad.add(image, self._conv("coarse.out", x))
        return x, coarse

    @staticmethod
    def _stack_input(image: Tensor, mask: np.ndarray) -> Tensor:
        data = np.concatenate([image.data, np.asarray(mask, dtype=np.float64)[None]])
        stacked = Tensor(data)

        def vjp(g):
            return g[:3]

        return ad.record(stacked, (image,), (vjp,))

    def compute_gates(self, features, mask: np.ndarray) -> GateMaps | None:
        """Gate maps per the configured ablation flags; None disables gating."""
        cfg = self.config
        if not cfg.gate_h and not cfg.gate_v:
            return None
        maps = crossgate_maps(
            features,
            mask,
            self.gate_weights_h,
            self.gate_weights_v,
            use_offsets=cfg.use_offsets,
            normalize_by_pairs=cfg.normalize_gate_by_pairs,
        )
        h, w = mask.shape
        zero = Tensor(np.zeros((h, w)))
        return GateMaps(
            g_h=maps.g_h if cfg.gate_h else zero,
            g_v=maps.g_v if cfg.gate_v else zero,
        )

    def main_forward(
        self, image, mask: np.ndarray, gates: GateMaps | None
    ) -> Tensor:
        image = as_tensor(image)
        h, w = mask.shape
        if h % 4 or w % 4:
            raise ContractViolation(f"spatial extents must be divisible by 4, got {h}x{w}")
        x = self._stack_input(image, mask)
        x = self._conv("main.in", x)
        for bp in self.enc_block_params:
            x = mamba_block(x, bp, gates)
        skip = x
        x = self._conv("main.down", x, stride=2)
        gates_lo = _pool_gates(gates, mask) if gates is not None else None
        for bp in self.dec_block_params:
            x = mamba_block(x, bp, gates_lo)
        x = upsample_nearest2(x)
        x = ad.add(x, skip)
        residual = self._conv("main.out", x)
        return clamp(ad.add(image, residual), 0.0, 1.0)

    def forward(self, image, mask: np.ndarray) -> Tensor:
        """Full pipeline: coarse -> gates (once) -> gated encoder-decoder."""
        h, w = mask.shape
        if h % 4 or w % 4:
            raise ContractViolation(
                f"spatial extents must be divisible by 4, got {h}x{w}"
            )
        features, _ = self.coarse_forward(image, mask)
        gates = self.compute_gates(features, mask)
        return self.main_forward(image, mask, gates)


def mamba_block(x, bp: _BlockParams, gates: GateMaps | None) -> Tensor:
    """Pre-normalized scan block with residual connection.

    norm -> pointwise expand -> depthwise 3x3 -> SiLU -> four-direction
    selective scan (gates feed the step size) -> pointwise contract ->
    residual add. With all inner weights zero the block is the identity.
    """
    x = as_tensor(x)
    y = layer_norm(x, bp.norm_gain, bp.norm_shift)
    y = conv2d(y, bp.expand_w, bp.expand_b)
    y = depthwise_conv2d(y, bp.dw_w, bp.dw_b)
    y = ad.silu(y)
    y = scan_image_4dir(y, bp.paths, gates)
    y = conv2d(y, bp.contract_w, bp.contract_b)
    return ad.add(x, y)


def _pool_gates(gates: GateMaps, mask: np.ndarray) -> GateMaps:
    """Average-pool gate values to the encoder's lower resolution.

    The mask is pooled and re-thresholded at 0.5, and the pooled gates
    are re-zeroed on the low-resolution shadow pixels so the
    zero-on-shadow property survives downsampling.
    """
    h, w = mask.shape
    mask_lo = (
        mask.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3)) >= 0.5
    ).astype(np.float64)
    keep = 1.0 - mask_lo

    def pool(g) -> Tensor:
        g = as_tensor(g)
        lo = avg_pool2(ad.reshape(g, (1,) + g.shape))
        return ad.mul(ad.reshape(lo, (h // 2, w // 2)), keep)

    return GateMaps(g_h=pool(gates.g_h), g_v=pool(gates.g_v))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def charbonnier(pred, target, eps: float = 1e-3, form: str = "per_pixel") -> Tensor:
    """Smooth L1 reconstruction penalty, differentiable at zero.

    ``per_pixel`` (default) averages sqrt(d^2 + eps^2) over entries;
    ``global`` is the whole-tensor norm form sqrt(|d|^2 + eps^2).
    """
    if eps <= 0:
        raise ContractViolation("charbonnier eps must be positive")
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target)
    sq = ad.mul(diff, diff)
    if form == "per_pixel":
        return ad.tmean(ad.sqrt(ad.add(sq, eps * eps)))
    if form == "global":
        return ad.sqrt(ad.add(ad.tsum(sq), eps * eps))
    raise ContractViolation(f"unknown charbonnier form {form!r}")


def total_loss(
    pred,
    target,
    mask: np.ndarray,
    negative_set: NegativeSet | None,
    extractor: FeatureExtractor | None,
    lambda_cs: float,
    eps: float = 1e-3,
    form: str = "per_pixel",
) -> Tensor:
    """Charbonnier plus lambda * contrastive term.

    The contrastive term is dropped when ``negative_set`` is None (the
    no-shadow skip signal), when lambda is zero, or when no extractor is
    configured.
    """
    if lambda_cs < 0:
        raise ContractViolation("lambda must be >= 0")
    loss = charbonnier(pred, target, eps=eps, form=form)
    if negative_set is None or lambda_cs == 0.0 or extractor is None:
        return loss
    f_anchor = feature_extract(pred, mask, extractor)
    f_pos = feature_extract(as_tensor(target), mask, extractor)
    cs = colorshift_loss(f_anchor, f_pos, negative_set.loss_pairs(extractor, mask))
    return ad.add(loss, ad.mul(cs, lambda_cs))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Model plus optimizer state and per-stage loss history."""

    model: ShadowRemovalModel
    stage: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    stage1_losses: list[float] = field(default_factory=list)
    stage2_losses: list[float] = field(default_factory=list)
    stage1_eval: dict[str, float] = field(default_factory=dict)
    stage2_eval: dict[str, float] = field(default_factory=dict)
    frozen: tuple[str, ...] = ()


def _cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    if total <= 1:
        return lr0
    t = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * t))


def _adamw_step(
    state: TrainState,
    names: list[str],
    grads: dict[int, np.ndarray],
    lr: float,
    cfg: ModelConfig,
) -> None:
    """Decoupled-weight-decay adaptive update over the named parameters."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name in names:
        p = state.model.params[name]
        g = grads.get(p.id)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / bias1) / (np.sqrt(v / bias2) + 1e-8)
        p.data -= lr * (update + cfg.weight_decay * p.data)


def _check_finite(loss: float, step: int, stage: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at stage {stage} step {step}")


def evaluate_coarse_loss(model: ShadowRemovalModel, dataset) -> float:
    """Mean Charbonnier of the coarse prediction over a dataset."""
    cfg = model.config
    vals = []
    for sample in dataset:
        _, coarse = model.coarse_forward(Tensor(sample.image_in), sample.mask)
        vals.append(
            charbonnier(coarse, sample.image_gt, cfg.charb_eps, cfg.charbonnier_form).item()
        )
    return float(np.mean(vals))


def train_stage1(dataset, config: ModelConfig) -> TrainState:
    """Fit the coarse unit alone under the Charbonnier loss.

    Steps cycle deterministically through the dataset (one sample per
    step); the learning rate follows a cosine decay down to lr_min.
    """
    if not dataset:
        raise ContractViolation("training dataset is empty")
    model = ShadowRemovalModel(config)
    state = TrainState(model=model, stage=1)
    names = model.param_names("coarse")
    state.stage1_eval["start"] = evaluate_coarse_loss(model, dataset)
    for step in range(config.stage1_steps):
        sample = dataset[step % len(dataset)]
        with Tape() as tape:
            for name in names:
                tape.watch(model.params[name])
            _, coarse = model.coarse_forward(Tensor(sample.image_in), sample.mask)
            loss = charbonnier(
                coarse, sample.image_gt, config.charb_eps, config.charbonnier_form
            )
        value = loss.item()
        _check_finite(value, step, stage=1)
        state.stage1_losses.append(value)
        grads = backward(tape, loss)
        lr = _cosine_lr(step, config.stage1_steps, config.lr, config.lr_min)
        _adamw_step(state, names, grads, lr, config)
    state.stage = 1
    state.stage1_eval["end"] = evaluate_coarse_loss(model, dataset)
    return state


def train_stage2(
    dataset,
    state: TrainState,
    config: ModelConfig,
    extractor: FeatureExtractor | None = None,
) -> TrainState:
    """Train the main body on the total loss with the coarse unit frozen.

    Coarse features and negative sets are computed once per sample up
    front (both depend only on frozen parameters and the ground truth),
    which keeps epochs deterministic and cheap.
    """
    if not dataset:
        raise ContractViolation("training dataset is empty")
    model = state.model
    if extractor is None and config.lambda_cs > 0:
        extractor = FeatureExtractor.default(config.feature_seed)
    coarse_names = model.param_names("coarse")
    frozen_before = {n: model.params[n].data.copy() for n in coarse_names}
    state.frozen = tuple(coarse_names)
    state.stage = 2
    state.step = 0  # fresh moment schedule for the main body
    state.m.clear()
    state.v.clear()

    cache = []
    for sample in dataset:
        features, _ = model.coarse_forward(Tensor(sample.image_in), sample.mask)
        try:
            negatives = (
                build_negative_set(
                    sample.image_gt,
                    sample.mask,
                    k=config.kmeans_k,
                    seed=sample.seed,
                    extractor=extractor,
                )
                if config.lambda_cs > 0
                else None
            )
        except NoShadowRegion:
            negatives = None
        cache.append((Tensor(features.data), negatives))

    def dataset_loss() -> float:
        vals = []
        for sample_, (feats_, negs_) in zip(dataset, cache):
            gates_ = model.compute_gates(feats_, sample_.mask)
            pred_ = model.main_forward(Tensor(sample_.image_in), sample_.mask, gates_)
            vals.append(
                total_loss(
                    pred_, sample_.image_gt, sample_.mask, negs_, extractor,
                    config.lambda_cs, eps=config.charb_eps,
                    form=config.charbonnier_form,
                ).item()
            )
        return float(np.mean(vals))

    state.stage2_eval["start"] = dataset_loss()
    names = model.param_names("main")
    for step in range(config.stage2_steps):
        idx = step % len(dataset)
        sample = dataset[idx]
        features_const, negatives = cache[idx]
        with Tape() as tape:
            for name in names:
                tape.watch(model.params[name])
            gates = model.compute_gates(features_const, sample.mask)
            pred = model.main_forward(Tensor(sample.image_in), sample.mask, gates)
            loss = total_loss(
                pred,
                sample.image_gt,
                sample.mask,
                negatives,
                extractor,
                config.lambda_cs,
                eps=config.charb_eps,
                form=config.charbonnier_form,
            )
        value = loss.item()
        _check_finite(value, step, stage=2)
        state.stage2_losses.append(value)
        grads = backward(tape, loss)
        lr = _cosine_lr(step, config.stage2_steps, config.lr, config.lr_min)
        _adamw_step(state, names, grads, lr, config)

    state.stage2_eval["end"] = dataset_loss()
    for name in coarse_names:
        if not np.array_equal(model.params[name].data, frozen_before[name]):
            raise TrainingError(f"frozen coarse parameter {name} changed in stage 2")
    return state


def train_two_stage(
    dataset, config: ModelConfig, extractor: FeatureExtractor | None = None
) -> TrainState:
    state = train_stage1(dataset, config)
    return train_stage2(dataset, state, config, extractor)


# ---------------------------------------------------------------------------
# Evaluation and the ablation harness
# ---------------------------------------------------------------------------


def evaluate_model(model: ShadowRemovalModel, samples) -> list:
    """Region metrics of the full forward pass on each sample."""
    from .metrics import region_metrics

    reports = []
    for sample in samples:
        pred = model.forward(Tensor(sample.image_in), sample.mask)
        reports.append(region_metrics(pred.data, sample.image_gt, sample.mask))
    return reports


def run_ablation_suite(
    config: ModelConfig,
    dataset,
    holdout,
    variants=("baseline", "gh", "gv", "full"),
) -> dict:
    """Train each gate-ablation variant under one shared seed.

    Returns variant -> MetricsReport on the held-out samples. No ordering
    between the variants is asserted anywhere; the harness only
    guarantees completion and metric emission.
    """
    from .metrics import region_metrics

    reports = {}
    for variant in variants:
        cfg = config.with_ablation(variant)
        state = train_two_stage(dataset, cfg)
        preds = [
            state.model.forward(Tensor(s.image_in), s.mask).data for s in holdout
        ]
        merged = [
            region_metrics(p, s.image_gt, s.mask) for p, s in zip(preds, holdout)
        ]
        reports[variant] = merged[0] if len(merged) == 1 else merged
    return reports


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"DSHW"
_VERSION = 1


def save_checkpoint(path, model: ShadowRemovalModel) -> None:
    """Versioned container: magic, config echo (JSON), named float64 blobs."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", tensor.data.ndim))
        for dim in tensor.data.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(tensor.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ShadowRemovalModel:
    """Rebuild the model from a checkpoint, validating every blob shape."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return _parse_checkpoint(raw, str(path))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(raw: bytes, path: str) -> ShadowRemovalModel:
    view = io.BytesIO(raw)
    if view.read(4) != _MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", view.read(4))
    if version != _VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", view.read(8))
    config = ModelConfig.from_dict(json.loads(view.read(cfg_len).decode()))
    model = ShadowRemovalModel(config)
    (count,) = struct.unpack("<I", view.read(4))
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", view.read(2))
        name = view.read(name_len).decode()
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = tuple(struct.unpack("<Q", view.read(8))[0] for _ in range(ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        data = np.frombuffer(view.read(nbytes), dtype="<f8").reshape(shape)
        if name not in model.params:
            raise ConfigError(f"{path}: unexpected parameter {name!r}")
        if model.params[name].data.shape != shape:
            raise ConfigError(
                f"{path}: parameter {name!r} shape {shape} != expected "
                f"{model.params[name].data.shape}"
            )
        model.params[name].data[...] = data
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise ConfigError(f"{path}: missing parameters {sorted(missing)}")
    return model
