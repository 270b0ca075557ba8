"""Network forward, losses, two-stage training, and checkpoints."""

from types import SimpleNamespace

import numpy as np
import pytest

from deshadow.autodiff import Tape, Tensor, backward
from deshadow.colorshift import FeatureExtractor, build_negative_set
from deshadow.crossgate import GateMaps
from deshadow.data import synth_dataset, synth_shadow_sample
from deshadow.errors import ConfigError, ContractViolation, TrainingError
from deshadow.model import (
    ModelConfig,
    ShadowRemovalModel,
    charbonnier,
    load_checkpoint,
    mamba_block,
    save_checkpoint,
    total_loss,
    train_stage1,
    train_stage2,
)

SMALL = dict(channels=4, state_dim=2, expand=2)


def _model(seed=0, **kw):
    return ShadowRemovalModel(ModelConfig(seed=seed, **{**SMALL, **kw}))


def _sample(seed=5, size=16):
    return synth_shadow_sample(seed, size, size)


class TestForward:
    def test_shapes_and_range(self):
        model = _model()
        s = _sample()
        out = model.forward(Tensor(s.image_in), s.mask)
        assert out.shape == (3, 16, 16)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_coarse_shapes(self):
        model = _model()
        s = _sample()
        features, coarse = model.coarse_forward(Tensor(s.image_in), s.mask)
        assert features.shape == (4, 16, 16)
        assert coarse.shape == (3, 16, 16)

    def test_deterministic_for_fixed_seed(self):
        s = _sample()
        a = _model(seed=3).forward(Tensor(s.image_in), s.mask).data
        b = _model(seed=3).forward(Tensor(s.image_in), s.mask).data
        np.testing.assert_array_equal(a, b)

    def test_zero_input_zero_bias_zero_output(self):
        # All biases are zero at init, so a zero image and empty mask
        # propagate exactly zero through convs, norms, and scans.
        model = _model()
        features, coarse = model.coarse_forward(
            Tensor(np.zeros((3, 16, 16))), np.zeros((16, 16))
        )
        np.testing.assert_array_equal(features.data, 0.0)
        np.testing.assert_array_equal(coarse.data, 0.0)

    def test_indivisible_shape_rejected(self):
        model = _model()
        with pytest.raises(ContractViolation):
            model.main_forward(Tensor(np.zeros((3, 18, 18))), np.zeros((18, 18)), None)

    def test_all_zero_mask_runs(self):
        model = _model()
        s = _sample()
        out = model.forward(Tensor(s.image_in), np.zeros_like(s.mask))
        assert out.shape == (3, 16, 16)

    def test_block_identity_with_zero_inner_weights(self):
        model = _model()
        bp = model.enc_block_params[0]
        bp.contract_w.data[...] = 0.0
        bp.contract_b.data[...] = 0.0
        x = np.random.default_rng(0).normal(size=(4, 8, 8))
        out = mamba_block(Tensor(x), bp, None)
        np.testing.assert_array_equal(out.data, x)

    def test_zero_gates_equal_absent_gates_bitwise(self):
        model = _model()
        bp = model.enc_block_params[0]
        x = np.random.default_rng(1).normal(size=(4, 8, 8))
        zero = GateMaps(g_h=Tensor(np.zeros((8, 8))), g_v=Tensor(np.zeros((8, 8))))
        a = mamba_block(Tensor(x), bp, None).data
        b = mamba_block(Tensor(x), bp, zero).data
        np.testing.assert_array_equal(a, b)

    def test_gate_injection_gradient_nonzero_for_mixed_mask(self):
        model = _model()
        s = _sample(seed=21)
        # Move off the zero-initialized output head, where every upstream
        # gradient (correctly) vanishes.
        rng = np.random.default_rng(7)
        model.params["main.out.w"].data[...] = rng.normal(
            0.0, 0.05, size=model.params["main.out.w"].shape
        )
        wgate = model.params["main.enc0.scan.path0.wgate"]
        with Tape() as tape:
            tape.watch(wgate)
            pred = model.forward(Tensor(s.image_in), s.mask)
            loss = charbonnier(pred, s.image_gt)
        grads = backward(tape, loss)
        assert wgate.id in grads
        assert float(np.abs(grads[wgate.id]).max()) > 0.0

    def test_ablation_presets(self):
        cfg = ModelConfig(**SMALL)
        assert not cfg.with_ablation("baseline").gate_h
        assert cfg.with_ablation("gh").gate_h and not cfg.with_ablation("gh").gate_v
        assert cfg.with_ablation("gv").gate_v and not cfg.with_ablation("gv").gate_h
        assert not cfg.with_ablation("no-offset").use_offsets
        with pytest.raises(ConfigError):
            cfg.with_ablation("bogus")

    def test_shared_path_params_flag(self):
        model = _model(share_path_params=True)
        bp = model.enc_block_params[0]
        assert bp.paths[0] is bp.paths[1] is bp.paths[2] is bp.paths[3]


class TestCharbonnier:
    def test_identical_inputs_give_eps(self):
        x = np.random.default_rng(2).random((3, 4, 4))
        assert charbonnier(x, x.copy(), eps=1e-3).item() == pytest.approx(1e-3, abs=0)

    def test_constant_difference_closed_form(self):
        a = np.zeros((3, 4, 4))
        b = np.full((3, 4, 4), 0.2)
        expect = np.sqrt(0.2**2 + 1e-6)
        assert charbonnier(a, b).item() == pytest.approx(expect, abs=1e-15)

    def test_lower_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a, b = rng.random((3, 3, 3)), rng.random((3, 3, 3))
            assert charbonnier(a, b, eps=1e-3).item() >= 1e-3

    def test_global_form(self):
        a = np.zeros((1, 2, 2))
        b = np.full((1, 2, 2), 0.5)
        expect = np.sqrt(4 * 0.25 + 1e-6)
        assert charbonnier(a, b, form="global").item() == pytest.approx(expect, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            charbonnier(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)))


class TestTotalLoss:
    def test_lambda_zero_is_charbonnier(self):
        s = _sample(seed=31)
        pred = np.clip(s.image_in + 0.01, 0, 1)
        extractor = FeatureExtractor.default(0)
        ns = build_negative_set(s.image_gt, s.mask, k=4, seed=0, extractor=extractor)
        total = total_loss(pred, s.image_gt, s.mask, ns, extractor, 0.0)
        base = charbonnier(pred, s.image_gt)
        assert total.item() == base.item()

    def test_skip_signal_drops_regularizer(self):
        s = _sample(seed=32)
        pred = np.clip(s.image_in + 0.01, 0, 1)
        total = total_loss(pred, s.image_gt, s.mask, None, FeatureExtractor.default(0), 0.5)
        assert total.item() == charbonnier(pred, s.image_gt).item()

    def test_componentwise_oracle(self):
        from deshadow.colorshift import colorshift_loss, feature_extract

        s = _sample(seed=33)
        pred = np.clip(s.image_in * 0.9 + 0.05, 0, 1)
        extractor = FeatureExtractor.default(0)
        ns = build_negative_set(s.image_gt, s.mask, k=6, seed=1, extractor=extractor)
        lam = 0.01
        total = total_loss(pred, s.image_gt, s.mask, ns, extractor, lam).item()
        l_c = charbonnier(pred, s.image_gt).item()
        anchor = feature_extract(pred, s.mask, extractor)
        pos = feature_extract(s.image_gt, s.mask, extractor)
        l_cs = colorshift_loss(anchor, pos, ns.loss_pairs(extractor, s.mask)).item()
        assert total == pytest.approx(l_c + lam * l_cs, abs=1e-12)

    def test_negative_lambda_rejected(self):
        s = _sample(seed=34)
        with pytest.raises(ContractViolation):
            total_loss(s.image_in, s.image_gt, s.mask, None, None, -0.1)


def _tiny_config(**kw):
    base = dict(stage1_steps=6, stage2_steps=6, kmeans_k=4, seed=0, **SMALL)
    base.update(kw)
    return ModelConfig(**base)


class TestTraining:
    def test_zero_learning_rate_leaves_parameters(self):
        dataset = synth_dataset(2, seed=11, size=16)
        cfg = _tiny_config(lr=0.0, lr_min=0.0, weight_decay=0.0)
        before = ShadowRemovalModel(cfg)
        snapshot = {n: t.data.copy() for n, t in before.params.items()}
        state = train_stage1(dataset, cfg)
        for name, tensor in state.model.params.items():
            np.testing.assert_array_equal(tensor.data, snapshot[name])

    def test_stage1_deterministic(self):
        dataset = synth_dataset(2, seed=12, size=16)
        cfg = _tiny_config()
        a = train_stage1(dataset, cfg).stage1_losses
        b = train_stage1(dataset, cfg).stage1_losses
        assert a == b

    def test_stage2_freezes_coarse_parameters(self):
        dataset = synth_dataset(2, seed=13, size=16)
        cfg = _tiny_config()
        state = train_stage1(dataset, cfg)
        frozen = {
            n: state.model.params[n].data.copy()
            for n in state.model.param_names("coarse")
        }
        state = train_stage2(dataset, state, cfg)
        for name, value in frozen.items():
            assert np.array_equal(state.model.params[name].data, value)
        # ... and the main body actually moved.
        assert state.stage2_losses

    def test_stage2_lambda_zero_matches_charbonnier_only_losses(self):
        dataset = synth_dataset(2, seed=14, size=16)
        cfg = _tiny_config(lambda_cs=0.0)
        state = train_stage1(dataset, cfg)
        state = train_stage2(dataset, state, cfg)
        model = state.model
        features, _ = model.coarse_forward(Tensor(dataset[0].image_in), dataset[0].mask)
        gates = model.compute_gates(Tensor(features.data), dataset[0].mask)
        pred = model.main_forward(Tensor(dataset[0].image_in), dataset[0].mask, gates)
        direct = charbonnier(pred, dataset[0].image_gt, cfg.charb_eps).item()
        recomputed = total_loss(
            pred, dataset[0].image_gt, dataset[0].mask, None, None, 0.0,
            eps=cfg.charb_eps,
        ).item()
        assert direct == recomputed

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractViolation):
            train_stage1([], _tiny_config())

    def test_nonfinite_loss_aborts(self):
        bad = SimpleNamespace(
            image_in=np.full((3, 16, 16), np.nan),
            mask=np.zeros((16, 16)),
            image_gt=np.zeros((3, 16, 16)),
            seed=0,
        )
        with pytest.raises(TrainingError):
            train_stage1([bad], _tiny_config())


def test_documented_defaults():
    from deshadow.colorshift import DEFAULT_CLUSTERS

    cfg = ModelConfig()
    assert DEFAULT_CLUSTERS == 10
    assert cfg.kmeans_k == 10
    assert cfg.lambda_cs == 0.01
    assert cfg.charb_eps == 1e-3
    assert cfg.lr_min == 1e-6
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
    assert cfg.channels == 16 and cfg.state_dim == 4
    assert cfg.coarse_blocks == 2 and cfg.enc_blocks == 2 and cfg.dec_blocks == 2


def test_ablation_suite_emits_reports():
    from deshadow.model import run_ablation_suite

    dataset = synth_dataset(2, seed=16, size=16)
    holdout = [synth_shadow_sample(777, 16, 16)]
    cfg = _tiny_config(stage1_steps=2, stage2_steps=2)
    reports = run_ablation_suite(cfg, dataset, holdout)
    assert set(reports) == {"baseline", "gh", "gv", "full"}
    for report in reports.values():
        assert report.lab_rmse_shadow is not None


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        dataset = synth_dataset(1, seed=15, size=16)
        cfg = _tiny_config(stage1_steps=2, stage2_steps=0)
        state = train_stage1(dataset, cfg)
        path = tmp_path / "model.bin"
        save_checkpoint(path, state.model)
        loaded = load_checkpoint(path)
        assert loaded.config == state.model.config
        for name, tensor in state.model.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, tensor.data)

    def test_truncated_file_rejected(self, tmp_path):
        model = _model()
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_blob_shape_mismatch_rejected(self, tmp_path):
        import struct

        model = _model()
        path = tmp_path / "model.bin"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        # Walk the header to the first parameter's first dimension and bump it.
        (cfg_len,) = struct.unpack_from("<Q", raw, 8)
        offset = 8 + 8 + cfg_len + 4
        (name_len,) = struct.unpack_from("<H", raw, offset)
        dim_offset = offset + 2 + name_len + 1
        (dim0,) = struct.unpack_from("<Q", raw, dim_offset)
        struct.pack_into("<Q", raw, dim_offset, dim0 + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_unknown_config_key_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"bogus_knob": 3})
