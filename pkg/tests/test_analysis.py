import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import waterfill_grid
from stegolab.analysis import (binarize, capacity, encoder_power, low_variance_count, normalize, overlap_fraction,
                               quantized_similarity, residual_map, residual_map_from, shuffled_similarity,
                               variance_map, waterfill, waterfill_map, write_waterfill_csv)
from stegolab.codec import CodecConfig, CodecModel
from stegolab.corpus import SyntheticSpec, generate_synthetic_corpus


class TestMaps:
    def test_constant_variance_maps_to_zero(self):
        batch = np.stack([np.zeros((4, 4, 1)), np.ones((4, 4, 1))])
        vm = variance_map(batch)
        assert np.all(vm.values == 0)
        assert vm.vmin[0] == pytest.approx(0.5) and vm.vmax[0] == pytest.approx(0.5)

    def test_single_alternating_pixel(self):
        batch = np.full((6, 4, 4, 1), 0.3)
        batch[::2, 1, 2, 0] = 0.0
        batch[1::2, 1, 2, 0] = 1.0
        vm = variance_map(batch).values
        assert vm[1, 2, 0] == 1.0 and vm.sum() == 1.0

    def test_needs_two_images(self):
        with pytest.raises(ValueError):
            variance_map(np.zeros((1, 4, 4, 1)))

    def test_designed_corpus_low_region_lower(self):
        c = generate_synthetic_corpus(SyntheticSpec(seed=1), 256)
        vm = variance_map(c).values[:, :, 0]
        low = c.low_mask
        # pairs of horizontally adjacent pixels straddling the region boundary
        pairs = [(vm[y, x], vm[y, x + 1]) if low[y, x] else (vm[y, x + 1], vm[y, x])
                 for y in range(32) for x in range(31) if low[y, x] != low[y, x + 1]]
        assert len(pairs) > 10
        assert np.mean([a < b for a, b in pairs]) >= 0.95

    def test_identity_codec_residual_is_zero(self):
        c = generate_synthetic_corpus(SyntheticSpec(height=8, width=8), 4)
        rm = residual_map(c.images, CodecModel(CodecConfig(g_width=4, dec_width=4)), 0)
        assert np.all(rm.values == 0)

    def test_normalized_range(self):
        rng = np.random.default_rng(0)
        pm = residual_map_from(rng.uniform(size=(3, 5, 5, 2)), rng.uniform(size=(3, 5, 5, 2)))
        assert pm.values.min() == 0 and pm.values.max() == 1
        assert np.allclose(pm.values.max(axis=(0, 1)), 1)


class TestOverlap:
    def test_perfect_alignment(self):
        v = np.random.default_rng(0).uniform(size=(8, 8, 1))
        res = overlap_fraction(v, 1 - v)
        assert res.fraction == 1.0

    def test_independent_maps_match_chance(self):
        rng = np.random.default_rng(1)
        res = overlap_fraction(rng.uniform(size=(100, 100, 1)), rng.uniform(size=(100, 100, 1)))
        assert abs(res.fraction - res.chance) < 0.03

    def test_undefined_when_no_high_positions(self):
        res = overlap_fraction(np.zeros((4, 4, 1)), np.zeros((4, 4, 1)) + 0.1)
        assert not res.defined and math.isnan(res.fraction)

    def test_ties_go_high(self):
        assert binarize(np.array([[0.5, 0.4999]]))[0, :, 0].tolist() == [True, False]
        assert low_variance_count(np.array([[0.5, 0.2, 0.9]])) == 1

    def test_per_channel_and_pooled(self):
        v = np.zeros((2, 2, 2))
        r = np.zeros((2, 2, 2))
        v[:, :, 1] = 1.0
        r[0, 0, :] = 1.0
        res = overlap_fraction(v, r)
        assert res.per_channel == [1.0, 0.0]
        assert res.fraction == 0.5 and res.n_high == 2

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            overlap_fraction(np.zeros((2, 2)), np.zeros((2, 2)), threshold=1.0)


class TestWaterfill:
    def test_equal_noise(self):
        res = waterfill([1, 1, 1, 1], 4)
        np.testing.assert_allclose(res.gamma2, 1.0)
        assert res.capacity == pytest.approx(4.0)

    def test_worked_example(self):
        res = waterfill([1, 2, 3], 2)
        assert res.nu == pytest.approx(2.5, abs=1e-12)
        np.testing.assert_allclose(res.gamma2, [1.5, 0.5, 0.0], atol=1e-12)
        assert res.capacity == pytest.approx(math.log2(2.5) + math.log2(1.25), abs=1e-12)
        assert res.capacity == pytest.approx(1.6439, abs=1e-4)
        assert res.dual == pytest.approx(1 / (2.5 * math.log(2)))

    @pytest.mark.parametrize("sigma2,power", [([1, 0, 2], 1.0), ([1, -1], 1.0), ([1, 2], 0.0), ([1, 2], -1.0)])
    def test_rejects_bad_inputs(self, sigma2, power):
        with pytest.raises(ValueError):
            waterfill(sigma2, power)

    def test_grid_oracle_small_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(6):
            n = rng.integers(1, 5)
            s = rng.uniform(0.05, 2.0, n)
            p = rng.uniform(0.05, 1.5)
            g_oracle, _ = waterfill_grid(s, p)
            np.testing.assert_allclose(waterfill(s, p).gamma2, g_oracle, atol=1e-5)

    def test_map_and_csv(self, tmp_path):
        raw = np.array([[1.0, 2.0], [3.0, 0.0]])
        pm = waterfill_map(raw, 2.0)
        assert pm.values[1, 1, 0] == 1.0 and pm.values[1, 0, 0] == 0.0
        res = waterfill([1, 2, 3], 2)
        write_waterfill_csv(tmp_path / "wf.csv", [1, 2, 3], res)
        lines = (tmp_path / "wf.csv").read_text().splitlines()
        assert lines[0] == "index,sigma2,gamma2,nu,capacity" and len(lines) == 4

    def test_encoder_power(self):
        x = np.zeros((2, 2, 2, 1))
        s = x + np.array([0.1, 0.3])[:, None, None, None]
        assert encoder_power(x, s) == pytest.approx(4 * (0.01 + 0.09) / 2)


sigmas = st.lists(st.floats(1e-3, 10.0), min_size=1, max_size=12)
powers = st.floats(1e-3, 20.0)


@settings(max_examples=300, deadline=None)
@given(sigmas, powers)
def test_kkt_conditions(s, p):
    s = np.array(s)
    res = waterfill(s, p)
    g = res.gamma2
    assert np.all(g >= 0)
    assert abs(g.sum() - p) <= 1e-9 * p
    assert res.nu >= s.min()
    np.testing.assert_allclose(g, np.maximum(res.nu - s, 0), atol=1e-12 * max(1.0, res.nu))
    active = g > 0
    assert np.all(res.nu > s[active])
    np.testing.assert_allclose(g[active] + s[active], res.nu, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(sigmas, powers)
def test_beats_equal_allocation(s, p):
    s = np.array(s)
    c_wf = waterfill(s, p).capacity
    c_eq = capacity(s, np.full(len(s), p / len(s)))
    assert c_wf >= c_eq - 1e-12
    if np.ptp(s) == 0:
        assert c_wf == pytest.approx(c_eq, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(sigmas, powers, st.floats(1e-3, 5.0))
def test_monotone_in_power(s, p, extra):
    s = np.array(s)
    a, b = waterfill(s, p), waterfill(s, p + extra)
    assert np.all(b.gamma2 >= a.gamma2 - 1e-9 * (p + extra))
    assert b.capacity > a.capacity


class TestSimilarity:
    def test_identity_and_complement(self):
        a = np.random.default_rng(0).uniform(size=(6, 6, 3))
        np.testing.assert_array_equal(quantized_similarity(a, a), [100, 100, 100])
        np.testing.assert_array_equal(quantized_similarity(a, 1 - a + np.where(a == 0.5, 0.1, 0)), [0, 0, 0])

    def test_one_position_differs(self):
        a = np.zeros((4, 4, 1))
        b = a.copy()
        b[2, 3, 0] = 1.0
        assert quantized_similarity(a, b)[0] == pytest.approx(93.75)

    def test_shuffled_control_near_chance(self):
        rng = np.random.default_rng(3)
        a = np.zeros((20, 20, 1))
        a[:10] = 1.0
        sim = shuffled_similarity(a, a, seed=0)
        assert quantized_similarity(a, a)[0] == 100
        assert abs(sim[0] - 50) < 5
        np.testing.assert_array_equal(sim, shuffled_similarity(a, a, seed=0))


def test_normalize_rejects_bad_rank():
    with pytest.raises(ValueError):
        normalize(np.zeros(5))
