"""Gate maps: projections, offsets, deformable sampling, masked similarity."""

import numpy as np
import pytest

from deshadow import autodiff as ad
from deshadow.autodiff import Tensor, finite_diff_check
from deshadow.crossgate import (
    DirectionWeights,
    aggregate_relevance,
    cross_region_gate,
    crossgate_maps,
    deform_sample,
    dump_gate_maps,
    init_direction_weights,
    nonshadow_modulation,
    predict_offsets,
    project_qk,
    rowwise_similarity,
)
from deshadow.errors import ContractViolation


def _weights(channels, seed, qk=None):
    return init_direction_weights(channels, np.random.default_rng(seed), qk)


def _zero_offset_weights(weights):
    out = DirectionWeights(*[Tensor(t.data.copy()) for t in weights.tensors()])
    out.off_w.data[...] = 0.0
    out.off_b.data[...] = 0.0
    return out


# ---------------------------------------------------------------------------
# Straight-loop reference: the whole pipeline with explicit index nests.
# ---------------------------------------------------------------------------


def _loop_reference_map(f, mask, weights, use_offsets=True):
    cq = weights.q_w.data.shape[0]
    c, h, w = f.shape
    q = np.zeros((cq, h, w))
    k = np.zeros((cq, h, w))
    for co in range(cq):
        for i in range(h):
            for j in range(w):
                q[co, i, j] = (weights.q_w.data[co, :, 0, 0] * f[:, i, j]).sum() + weights.q_b.data[co]
                k[co, i, j] = (weights.k_w.data[co, :, 0, 0] * f[:, i, j]).sum() + weights.k_b.data[co]

    if use_offsets:
        beta = np.zeros((2, h, w))
        qp = np.pad(q, ((0, 0), (1, 1), (1, 1)))
        for ch in range(2):
            bound = w / 4.0 if ch == 0 else h / 4.0
            for i in range(h):
                for j in range(w):
                    acc = weights.off_b.data[ch]
                    for co in range(cq):
                        for dy in range(3):
                            for dx in range(3):
                                acc += weights.off_w.data[ch, co, dy, dx] * qp[co, i + dy, j + dx]
                    beta[ch, i, j] = bound * np.tanh(acc)

        def sample(plane, y, x):
            y = min(max(y, 0.0), h - 1.0)
            x = min(max(x, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            return (
                plane[y0, x0] * (1 - fy) * (1 - fx)
                + plane[y0, x1] * (1 - fy) * fx
                + plane[y1, x0] * fy * (1 - fx)
                + plane[y1, x1] * fy * fx
            )

        k_hat = np.zeros_like(k)
        m_hat = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                y = i + beta[1, i, j]
                x = j + beta[0, i, j]
                for co in range(cq):
                    k_hat[co, i, j] = sample(k[co], y, x)
                m_hat[i, j] = 1.0 if sample(mask, y, x) >= 0.5 else 0.0
    else:
        k_hat, m_hat = k, mask

    gate_map = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for r in range(w):
                xor = (mask[i, j] != 0) != (m_hat[i, r] != 0)
                if xor:
                    sim = 0.0
                    for co in range(cq):
                        sim += q[co, i, j] * k_hat[co, i, r]
                    acc += sim
            gate_map[i, j] = (acc / w) * (1.0 - mask[i, j])
    return gate_map


def _loop_reference(f, mask, weights_h, weights_v, use_offsets=True):
    g_h = _loop_reference_map(f, mask, weights_h, use_offsets)
    g_v = _loop_reference_map(
        f.transpose(0, 2, 1), mask.T, weights_v, use_offsets
    ).T
    return g_h, g_v


class TestProjectQK:
    def test_identity_weights(self):
        f = np.random.default_rng(0).normal(size=(3, 4, 4))
        weights = _weights(3, 0, qk=3)
        weights.q_w.data[...] = np.eye(3).reshape(3, 3, 1, 1)
        weights.k_w.data[...] = np.eye(3).reshape(3, 3, 1, 1)
        weights.q_b.data[...] = 0.0
        weights.k_b.data[...] = 0.0
        q, k = project_qk(f, weights)
        np.testing.assert_array_equal(q.data, f)
        np.testing.assert_array_equal(k.data, f)

    def test_zero_weights(self):
        f = np.random.default_rng(1).normal(size=(2, 3, 3))
        weights = _weights(2, 1)
        for t in (weights.q_w, weights.q_b, weights.k_w, weights.k_b):
            t.data[...] = 0.0
        q, k = project_qk(f, weights)
        np.testing.assert_array_equal(q.data, 0.0)
        np.testing.assert_array_equal(k.data, 0.0)

    def test_matches_per_pixel_matmul(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(3, 2, 5))
        weights = _weights(3, 2, qk=4)
        q, _ = project_qk(f, weights)
        wmat = weights.q_w.data[:, :, 0, 0]
        for i in range(2):
            for j in range(5):
                np.testing.assert_allclose(
                    q.data[:, i, j], wmat @ f[:, i, j] + weights.q_b.data, atol=1e-12
                )


class TestPredictOffsets:
    def test_zero_weights_identity_warp(self):
        q = np.random.default_rng(3).normal(size=(2, 4, 6))
        weights = _zero_offset_weights(_weights(2, 3, qk=2))
        beta = predict_offsets(q, weights)
        np.testing.assert_array_equal(beta.data, np.zeros((2, 4, 6)))

    def test_bound_respected(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(2, 4, 8)) * 100.0
        weights = _weights(2, 4, qk=2)
        beta = predict_offsets(q, weights)
        assert np.all(np.abs(beta.data[0]) <= 8 / 4.0)
        assert np.all(np.abs(beta.data[1]) <= 4 / 4.0)

    def test_rejects_nonpositive_bound(self):
        q = np.zeros((2, 4, 4))
        with pytest.raises(ContractViolation):
            predict_offsets(q, _weights(2, 5, qk=2), max_disp=(0.0, 1.0))


class TestDeformSample:
    def test_zero_offsets_are_identity(self):
        rng = np.random.default_rng(5)
        k = rng.normal(size=(2, 4, 4))
        mask = (rng.random((4, 4)) < 0.5).astype(float)
        k_hat, m_hat = deform_sample(k, mask, np.zeros((2, 4, 4)))
        np.testing.assert_array_equal(k_hat.data, k)
        np.testing.assert_array_equal(m_hat, mask)

    def test_constant_field_invariant_under_warp(self):
        k = np.full((2, 4, 4), 1.25)
        beta = np.random.default_rng(6).uniform(-2, 2, size=(2, 4, 4))
        k_hat, _ = deform_sample(k, np.zeros((4, 4)), beta)
        np.testing.assert_allclose(k_hat.data, 1.25, atol=1e-12)

    def test_integer_shift(self):
        rng = np.random.default_rng(7)
        k = rng.normal(size=(1, 3, 5))
        beta = np.zeros((2, 3, 5))
        beta[0] = 1.0  # shift +1 in x
        k_hat, _ = deform_sample(k, np.zeros((3, 5)), beta)
        np.testing.assert_allclose(k_hat.data[:, :, :-1], k[:, :, 1:], atol=1e-12)


class TestSimilarityAndGating:
    def test_hand_inner_products(self):
        q = np.array([[[1.0, 2.0]]])  # C'=1, H=1, W=2
        k_hat = np.array([[[3.0, 4.0]]])
        sim = rowwise_similarity(q, k_hat).data
        np.testing.assert_array_equal(sim[:, 0, 0], [3.0, 4.0])
        np.testing.assert_array_equal(sim[:, 0, 1], [6.0, 8.0])

    def test_zero_query(self):
        sim = rowwise_similarity(np.zeros((2, 3, 3)), np.ones((2, 3, 3)))
        np.testing.assert_array_equal(sim.data, 0.0)

    def test_equals_all_pairs_restricted_to_rows(self):
        rng = np.random.default_rng(8)
        q = rng.normal(size=(3, 4, 5))
        k_hat = rng.normal(size=(3, 4, 5))
        sim = rowwise_similarity(q, k_hat).data
        # O((HW)^2) all-pairs similarity, then keep equal-row pairs.
        qf = q.reshape(3, -1)
        kf = k_hat.reshape(3, -1)
        allpairs = qf.T @ kf  # (HW, HW)
        for i in range(4):
            for j in range(5):
                for r in range(5):
                    assert sim[r, i, j] == pytest.approx(
                        allpairs[i * 5 + j, i * 5 + r], abs=1e-12
                    )

    def test_shape_mismatch_raises(self):
        with pytest.raises(ContractViolation):
            rowwise_similarity(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))

    def test_gate_no_cross_pairs(self):
        sim = np.random.default_rng(9).normal(size=(3, 2, 3))
        gated = cross_region_gate(sim, np.zeros((2, 3)), np.zeros((2, 3)))
        np.testing.assert_array_equal(gated.data, 0.0)

    def test_gate_keeps_cross_pairs_verbatim(self):
        sim = np.random.default_rng(10).normal(size=(3, 2, 3))
        mask = np.ones((2, 3))
        warped = np.zeros((2, 3))
        gated = cross_region_gate(sim, mask, warped)
        np.testing.assert_array_equal(gated.data, sim)

    def test_gate_nonzero_exactly_where_masks_differ(self):
        rng = np.random.default_rng(11)
        sim = rng.normal(size=(4, 3, 4)) + 10.0  # keep entries away from 0
        mask = (rng.random((3, 4)) < 0.5).astype(float)
        warped = (rng.random((3, 4)) < 0.5).astype(float)
        gated = cross_region_gate(sim, mask, warped).data
        for r in range(4):
            for i in range(3):
                for j in range(4):
                    expect = mask[i, j] != warped[i, r]
                    assert (gated[r, i, j] != 0.0) == expect

    def test_gate_rejects_nonbinary(self):
        with pytest.raises(ContractViolation):
            cross_region_gate(np.zeros((2, 2, 2)), np.full((2, 2), 0.5), np.zeros((2, 2)))

    def test_aggregate_mean(self):
        gated = np.zeros((2, 1, 1))
        gated[0, 0, 0], gated[1, 0, 0] = 2.0, 4.0
        assert aggregate_relevance(gated).data[0, 0] == pytest.approx(3.0)

    def test_aggregate_constant(self):
        gated = np.full((5, 2, 5), 1.5)
        np.testing.assert_allclose(aggregate_relevance(gated).data, 1.5, atol=1e-15)

    def test_nonshadow_modulation(self):
        rel = np.random.default_rng(12).normal(size=(3, 3))
        np.testing.assert_array_equal(
            nonshadow_modulation(rel, np.ones((3, 3))).data, 0.0
        )
        np.testing.assert_array_equal(
            nonshadow_modulation(rel, np.zeros((3, 3))).data, rel
        )


class TestCrossgateMaps:
    def test_vertical_is_transposed_horizontal_exactly(self):
        rng = np.random.default_rng(13)
        f = rng.normal(size=(3, 4, 6))
        mask = (rng.random((4, 6)) < 0.4).astype(float)
        wh = _weights(3, 14)
        wv = _weights(3, 15)
        gates = crossgate_maps(f, mask, wh, wv)
        transposed = crossgate_maps(
            np.ascontiguousarray(f.transpose(0, 2, 1)), mask.T, wv, wh
        )
        np.testing.assert_array_equal(gates.g_v.data, transposed.g_h.data.T)

    def test_all_shadow_mask_gives_zero_maps(self):
        rng = np.random.default_rng(16)
        f = rng.normal(size=(2, 4, 4))
        gates = crossgate_maps(f, np.ones((4, 4)), _weights(2, 17), _weights(2, 18))
        np.testing.assert_array_equal(gates.g_h.data, 0.0)
        np.testing.assert_array_equal(gates.g_v.data, 0.0)

    def test_degenerate_masks_give_zero_maps(self):
        rng = np.random.default_rng(19)
        f = rng.normal(size=(2, 4, 4))
        for mask in (np.zeros((4, 4)), np.ones((4, 4))):
            gates = crossgate_maps(f, mask, _weights(2, 20), _weights(2, 21))
            np.testing.assert_array_equal(gates.g_h.data, 0.0)
            np.testing.assert_array_equal(gates.g_v.data, 0.0)

    def test_zero_on_shadow_always(self):
        rng = np.random.default_rng(22)
        for trial in range(5):
            f = rng.normal(size=(2, 5, 5))
            mask = (rng.random((5, 5)) < rng.uniform(0.2, 0.8)).astype(float)
            gates = crossgate_maps(f, mask, _weights(2, trial), _weights(2, 50 + trial))
            shadow = mask == 1.0
            np.testing.assert_array_equal(gates.g_h.data[shadow], 0.0)
            np.testing.assert_array_equal(gates.g_v.data[shadow], 0.0)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(23)
        f = rng.normal(size=(2, 6, 6))
        mask = (rng.random((6, 6)) < 0.5).astype(float)
        wh, wv = _weights(2, 24), _weights(2, 25)
        gates = crossgate_maps(f, mask, wh, wv)
        ref_h, ref_v = _loop_reference(f, mask, wh, wv)
        np.testing.assert_allclose(gates.g_h.data, ref_h, atol=1e-10)
        np.testing.assert_allclose(gates.g_v.data, ref_v, atol=1e-10)

    def test_identity_warp_equals_zero_offset_weights(self):
        rng = np.random.default_rng(26)
        f = rng.normal(size=(3, 5, 5))
        mask = (rng.random((5, 5)) < 0.5).astype(float)
        wh = _zero_offset_weights(_weights(3, 27))
        wv = _zero_offset_weights(_weights(3, 28))
        with_warp = crossgate_maps(f, mask, wh, wv, use_offsets=True)
        without = crossgate_maps(f, mask, wh, wv, use_offsets=False)
        np.testing.assert_array_equal(with_warp.g_h.data, without.g_h.data)
        np.testing.assert_array_equal(with_warp.g_v.data, without.g_v.data)

    def test_pair_count_normalization_flag(self):
        rng = np.random.default_rng(29)
        f = rng.normal(size=(2, 4, 4))
        mask = np.zeros((4, 4))
        mask[1, 1] = 1.0
        wh, wv = _zero_offset_weights(_weights(2, 30)), _zero_offset_weights(_weights(2, 31))
        plain = crossgate_maps(f, mask, wh, wv, use_offsets=False)
        normed = crossgate_maps(
            f, mask, wh, wv, use_offsets=False, normalize_by_pairs=True
        )
        # Row 1 off-shadow positions see exactly one cross pair out of W=4.
        i, j = 1, 2
        assert normed.g_h.data[i, j] == pytest.approx(plain.g_h.data[i, j] * 4.0)

    def test_gradients_through_pipeline(self):
        rng = np.random.default_rng(32)
        h = w = 4
        f = rng.normal(size=(2, h, w))
        mask = (rng.random((h, w)) < 0.5).astype(float)
        mask[0, 0], mask[-1, -1] = 1.0, 0.0
        template = _weights(2, 33)
        wsum_h = rng.normal(size=(h, w))
        wsum_v = rng.normal(size=(h, w))

        def f_fn(p):
            weights_h = DirectionWeights(*p[0:6])
            weights_v = DirectionWeights(*p[6:12])
            gates = crossgate_maps(p[12], mask, weights_h, weights_v)
            return ad.add(
                ad.tsum(ad.mul(gates.g_h, wsum_h)), ad.tsum(ad.mul(gates.g_v, wsum_v))
            )

        arrs = [t.data for t in template.tensors()]
        arrs += [t.data for t in _weights(2, 34).tensors()]
        arrs[5] = rng.uniform(0.3, 0.7, size=2)  # keep samples off integer coords
        arrs[11] = rng.uniform(0.3, 0.7, size=2)
        arrs.append(f)
        assert finite_diff_check(f_fn, arrs) < 1e-4

    def test_mask_shape_mismatch_raises(self):
        with pytest.raises(ContractViolation):
            crossgate_maps(
                np.zeros((2, 4, 4)), np.zeros((3, 3)), _weights(2, 35), _weights(2, 36)
            )


def test_dump_gate_maps(tmp_path):
    from deshadow.crossgate import GateMaps

    gates = GateMaps(
        g_h=Tensor(np.random.default_rng(37).random((8, 8))),
        g_v=Tensor(np.zeros((8, 8))),
    )
    paths = dump_gate_maps(gates, tmp_path)
    assert len(paths) == 2
    for p in paths:
        assert (tmp_path / p.split("/")[-1]).exists()
