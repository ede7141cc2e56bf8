"""Tests for the interpolated signature manifold and the gain-shift transform."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gammaunmix.signatures import BACKGROUND, ChannelGrid, SignatureError, SignatureLibrary
from gammaunmix.variability import (
    ShiftModel,
    SignatureManifold,
    deformed_signature,
    energy_list_from_signature,
    histogram_energies,
    load_manifold,
    manifold_eval,
    save_manifold,
    scaled_counts,
    shift_signature,
    shift_signature_by_list,
    shifted_counts,
    steel_attenuation,
)


def _lib(grid, cols, names=None):
    cols = np.asarray(cols, dtype=float)
    names = names or (BACKGROUND,) + tuple(f"N{j}" for j in range(1, cols.shape[1]))
    return SignatureLibrary(grid, names, cols)


def _spike_library(grid, channel):
    bkg = np.ones(grid.n_channels)
    spike = np.zeros(grid.n_channels)
    spike[channel] = 1.0
    return _lib(grid, np.column_stack([bkg, spike]), (BACKGROUND, "S"))


@pytest.fixture(scope="module")
def two_point():
    rng = np.random.default_rng(3)
    g = ChannelGrid(12)
    a = _lib(g, rng.uniform(0.1, 1.0, (12, 3)))
    b = _lib(g, rng.uniform(0.1, 1.0, (12, 3)))
    return SignatureManifold((a, b), (0.5, 8.0))


@pytest.fixture(scope="module")
def five_point():
    rng = np.random.default_rng(4)
    g = ChannelGrid(10)
    snaps = tuple(_lib(g, rng.uniform(0.05, 1.0, (10, 2))) for _ in range(5))
    return SignatureManifold(snaps, (0.01, 0.1, 1.0, 3.0, 30.0))


class TestManifold:
    def test_knots_are_log_positions(self, five_point):
        lp = np.log(five_point.params)
        np.testing.assert_allclose(five_point.knots, (lp - lp[0]) / (lp[-1] - lp[0]))
        assert five_point.knots[0] == 0.0 and five_point.knots[-1] == 1.0

    def test_at_knot_equals_snapshot(self, five_point):
        for k, lam in enumerate(five_point.knots):
            col = five_point.snapshots[k].columns
            np.testing.assert_array_equal(manifold_eval(five_point, lam).columns, col / col.sum(axis=0))

    def test_midpoint(self, five_point):
        k = 2
        lam = 0.5 * (five_point.knots[k] + five_point.knots[k + 1])
        mid = 0.5 * (five_point.snapshots[k].columns + five_point.snapshots[k + 1].columns)
        np.testing.assert_allclose(five_point.matrix(lam), mid / mid.sum(axis=0), rtol=1e-12)

    def test_two_snapshots_quarter(self, two_point):
        a, b = (s.columns for s in two_point.snapshots)
        got = two_point.matrix(0.25)
        # per-channel scalar interpolation as the oracle
        oracle = np.empty_like(a)
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                oracle[i, j] = np.interp(0.25, [0.0, 1.0], [a[i, j], b[i, j]])
        oracle /= oracle.sum(axis=0)
        np.testing.assert_allclose(got, oracle, rtol=1e-12)
        np.testing.assert_allclose(got, 0.75 * a + 0.25 * b, rtol=1e-12)

    @pytest.mark.parametrize("lam", [-1e-9, 1.0 + 1e-9, 2.0])
    def test_outside_unit_interval(self, two_point, lam):
        with pytest.raises(ValueError):
            two_point.matrix(lam)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_evaluation_is_valid_library(self, five_point, lam):
        lib = manifold_eval(five_point, lam)
        np.testing.assert_allclose(lib.columns.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(lib.columns >= 0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(-0.05, 0.05))
    def test_continuity(self, five_point, lam, delta):
        lam2 = min(max(lam + delta, 0.0), 1.0)
        stack = np.stack([s.columns / s.columns.sum(axis=0) for s in five_point.snapshots])
        slopes = np.abs(np.diff(stack, axis=0)) / np.diff(five_point.knots)[:, None, None]
        # renormalization of a convex combination of normalized columns is the identity
        lipschitz = slopes.max()
        diff = np.abs(five_point.matrix(lam) - five_point.matrix(lam2)).max()
        assert diff <= lipschitz * abs(lam - lam2) + 1e-12

    def test_physical_latent_round_trip(self, five_point):
        for p in five_point.params:
            assert five_point.physical(five_point.latent(p)) == pytest.approx(p, rel=1e-12)

    def test_requires_two_snapshots(self, two_point):
        with pytest.raises(SignatureError):
            SignatureManifold(two_point.snapshots[:1], (1.0,))

    def test_increasing_params(self, two_point):
        with pytest.raises(SignatureError):
            SignatureManifold(two_point.snapshots, (2.0, 1.0))

    def test_shared_names(self, two_point):
        other = _lib(two_point.grid, two_point.snapshots[1].columns, (BACKGROUND, "X", "Y"))
        with pytest.raises(SignatureError):
            SignatureManifold((two_point.snapshots[0], other), (1.0, 2.0))

    def test_disk_round_trip(self, tmp_path, five_point):
        save_manifold(five_point, tmp_path / "m")
        back = load_manifold(tmp_path / "m")
        assert back.params == five_point.params
        for lam in (0.0, 0.37, 1.0):
            np.testing.assert_array_equal(back.matrix(lam), five_point.matrix(lam))


class TestSteelStandIn:
    def test_attenuation_decreases_with_thickness_and_increases_with_energy(self):
        e = np.array([60.0, 662.0, 1332.0])
        thin, thick = steel_attenuation(e, 1.0), steel_attenuation(e, 10.0)
        assert np.all(thick < thin) and np.all(np.diff(thin) > 0)

    def test_thick_shield_suppresses_low_energy_line(self):
        g = ChannelGrid()
        peaks = [(59.5, 1.0), (662.0, 1.0)]
        thin = deformed_signature(g, peaks, 0.001)
        thick = deformed_signature(g, peaks, 30.0)
        low, high = g.channel_of(59.5), g.channel_of(662.0)
        assert thick[low] / thick[high] < 1e-3 * thin[low] / thin[high]

    def test_synthetic_manifold(self, manifold):
        assert len(manifold.params) == 96
        assert manifold.params[0] == pytest.approx(0.001) and manifold.params[-1] == pytest.approx(30.0)
        assert "I-131" not in manifold.names


class TestEnergyList:
    def test_single_channel_amplification_four(self):
        g = ChannelGrid(3, 2.0, 20.0)
        e = energy_list_from_signature([0.0, 1.0, 0.0], g, 4)
        np.testing.assert_allclose(e, [22.0, 22.5, 23.0, 23.5])

    def test_uniform_two_channels_amplification_ten(self):
        g = ChannelGrid(2, 2.0, 20.0)
        e = energy_list_from_signature([0.5, 0.5], g, 10)
        assert e.size == 10
        hist, dropped = histogram_energies(e, g)
        np.testing.assert_array_equal(hist, [5, 5])
        assert dropped == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1000, 10**6))
    def test_length_bound(self, seed, amp):
        g = ChannelGrid(64)
        col = np.random.default_rng(seed).dirichlet(np.full(64, 0.3))
        e = energy_list_from_signature(col, g, amp)
        assert abs(e.size - amp) <= g.n_channels / 2

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 10**5))
    def test_largest_remainder_counts(self, seed, amp):
        col = np.random.default_rng(seed).dirichlet(np.full(40, 0.5))
        c = scaled_counts(col, amp)
        exact = col / col.sum() * amp
        assert c.sum() == amp
        assert np.all((c == np.floor(exact)) | (c == np.ceil(exact)))

    def test_energies_inside_own_channel(self, small_library):
        g = small_library.grid
        e = energy_list_from_signature(small_library.column("Cs-137"), g, 10**4)
        assert np.all(np.diff(e) > 0)
        hist, dropped = histogram_energies(e, g)
        np.testing.assert_array_equal(hist, scaled_counts(small_library.column("Cs-137"), 10**4))
        assert dropped == 0

    def test_non_integer_amplification(self):
        with pytest.raises(ValueError):
            energy_list_from_signature([1.0], ChannelGrid(1), 2.5)


class TestShift:
    def test_alpha_zero_identity(self, library, shift_model):
        for j in range(library.n_components):
            dev = np.abs(shift_signature(shift_model, j, 0.0) - library.columns[:, j]).max()
            assert dev <= 2.0 / shift_model.amplification

    def test_spike_at_662(self):
        g = ChannelGrid()
        model = ShiftModel(_spike_library(g, g.channel_of(662.0)))
        col = shift_signature(model, 1, 0.05)
        target = math.floor((662.0 * 0.95 - g.e_min) / g.bin_width)
        assert int(np.argmax(col)) == target
        assert col[target:target + 2].sum() == pytest.approx(1.0)
        assert g.edges[target] <= 662.0 * 0.95 < g.edges[target + 1]

    def test_negative_shift_off_the_top(self):
        g = ChannelGrid()
        model = ShiftModel(_spike_library(g, g.n_channels - 1))
        with pytest.raises(SignatureError, match="renormalization"):
            shift_signature(model, 1, -0.05)
        hist, dropped = model.column_counts(1, -0.05)
        assert hist.sum() == 0 and dropped == model.amplification

    def test_alpha_outside_range(self, shift_model):
        with pytest.raises(ValueError):
            shift_signature(shift_model, 1, 0.2)

    def test_background_unshifted_by_default(self, library, shift_model):
        np.testing.assert_array_equal(shift_model.matrix(0.08)[:, 0], library.columns[:, 0])
        bk = ShiftModel(library, shift_background=True)
        assert np.abs(bk.matrix(0.08)[:, 0] - library.columns[:, 0]).max() > 1e-4

    @pytest.mark.parametrize("alpha", [-0.1, -0.0731, -0.01, 0.0, 0.003, 0.05, 0.0999, 0.1])
    def test_fast_path_matches_literal_list(self, small_library, alpha):
        model = ShiftModel(small_library, amplification=10**5)
        for j in range(small_library.n_components):
            fast = shift_signature(ShiftModel(small_library, amplification=10**5, shift_background=True), j, alpha)
            slow = shift_signature_by_list(small_library.columns[:, j], small_library.grid, alpha, 10**5)
            np.testing.assert_array_equal(fast, slow)
        assert model.matrix(alpha).shape == small_library.columns.shape

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-0.1, 0.1), st.integers(1000, 50000))
    def test_count_conservation(self, seed, alpha, amp):
        g = ChannelGrid(48, 3.0, 5.0)
        col = np.random.default_rng(seed).dirichlet(np.full(48, 0.4))
        counts = scaled_counts(col, amp)
        energies = energy_list_from_signature(col, g, amp) * (1.0 - alpha)
        hist, dropped = histogram_energies(energies, g)
        assert hist.sum() == energies.size - dropped
        fast, fast_dropped = shifted_counts(counts, g, alpha)
        np.testing.assert_array_equal(fast, hist)
        assert fast_dropped == dropped

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 127), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
    def test_monotone_in_alpha(self, channel, a1, a2):
        g = ChannelGrid(128, 4.0, 20.0)
        lo_a, hi_a = sorted((a1, a2))
        counts = np.zeros(g.n_channels, dtype=np.int64)
        counts[channel] = 1000
        h_lo, _ = shifted_counts(counts, g, lo_a)
        h_hi, _ = shifted_counts(counts, g, hi_a)
        if h_lo.sum() and h_hi.sum():
            occ_lo, occ_hi = np.flatnonzero(h_lo), np.flatnonzero(h_hi)
            assert occ_hi.max() <= occ_lo.max() and occ_hi.min() <= occ_lo.min()

    def test_invalid_model(self, library):
        with pytest.raises(ValueError):
            ShiftModel(library, amplification=10)
        with pytest.raises(ValueError):
            ShiftModel(library, alpha_range=(-0.1, 1.0))
