"""Tests for channel grids, signature libraries, file I/O and stand-in signatures."""

import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from gammaunmix.signatures import (
    BACKGROUND,
    ChannelGrid,
    SignatureError,
    SignatureLibrary,
    fwhm,
    load_library,
    save_library,
    synth_background,
    synth_signature,
    synthetic_library,
)


def _write_csv(path, header, rows, grid):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    path.with_name(path.stem + ".grid.json").write_text(json.dumps(grid.to_dict()))


class TestChannelGrid:
    def test_channel_intervals(self):
        g = ChannelGrid(4, 2.0, 20.0)
        np.testing.assert_array_equal(g.edges, [20, 22, 24, 26, 28])
        assert g.e_max == 28.0
        np.testing.assert_array_equal(g.centers, [21, 23, 25, 27])

    def test_edge_goes_to_higher_bin(self):
        g = ChannelGrid(4, 2.0, 20.0)
        assert g.channel_of(22.0) == 1
        assert g.channel_of(21.999) == 0

    @pytest.mark.parametrize("kw", [dict(n_channels=0), dict(bin_width=0.0), dict(e_min=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(SignatureError):
            ChannelGrid(**kw)

    def test_dict_round_trip(self):
        g = ChannelGrid(16, 1.5, 3.0)
        d = g.to_dict()
        assert set(d) == {"n_channels", "bin_width_kev", "e_min_kev"}
        assert ChannelGrid.from_dict(d) == g


class TestSignatureLibrary:
    def test_background_first(self):
        g = ChannelGrid(2)
        with pytest.raises(SignatureError):
            SignatureLibrary(g, ("Cs-137", BACKGROUND), np.eye(2))

    def test_unique_names(self):
        with pytest.raises(SignatureError):
            SignatureLibrary(ChannelGrid(2), (BACKGROUND, BACKGROUND), np.eye(2))

    def test_immutable_columns(self, small_library):
        with pytest.raises(ValueError):
            small_library.columns[0, 0] = 1.0

    def test_subset_keeps_background(self, small_library):
        sub = small_library.subset(["Cs-137"])
        assert sub.names == (BACKGROUND, "Cs-137")
        np.testing.assert_array_equal(sub.column("Cs-137"), small_library.column("Cs-137"))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (8, 3), elements=st.floats(0.0, 1e6)))
    def test_columns_sum_to_one(self, raw):
        raw = raw.copy()
        raw[0] += 1.0
        lib = SignatureLibrary(ChannelGrid(8), (BACKGROUND, "A", "B"), raw)
        np.testing.assert_allclose(lib.columns.sum(axis=0), 1.0, atol=1e-9, rtol=0)
        assert np.all(lib.columns >= 0)


class TestLoadLibrary:
    def test_two_columns_four_channels(self, tmp_path):
        g = ChannelGrid(4)
        rows = [[0.25, 0.1], [0.25, 0.2], [0.25, 0.3], [0.25, 0.4]]
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], rows, g)
        lib = load_library(tmp_path / "lib.csv")
        assert (lib.n_channels, lib.n_components) == (4, 2)
        np.testing.assert_allclose(lib.columns, rows, rtol=0, atol=1e-15)

    def test_column_summing_to_two_is_halved(self, tmp_path, caplog):
        g = ChannelGrid(4)
        rows = [[0.25, 0.5], [0.25, 0.5], [0.25, 0.5], [0.25, 0.5]]
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], rows, g)
        with caplog.at_level(logging.INFO, logger="gammaunmix"):
            lib = load_library(tmp_path / "lib.csv")
        np.testing.assert_array_equal(lib.column("A"), [0.25] * 4)
        assert "renormaliz" in caplog.text

    def test_negative_entry(self, tmp_path):
        g = ChannelGrid(3)
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], [[1, 0.5], [1, -0.1], [1, 0.6]], g)
        with pytest.raises(SignatureError, match="negative entry") as err:
            load_library(tmp_path / "lib.csv")
        assert "row 1" in str(err.value) and "A" in str(err.value)

    def test_all_zero_column(self, tmp_path):
        g = ChannelGrid(2)
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], [[1, 0], [1, 0]], g)
        with pytest.raises(SignatureError, match="all-zero"):
            load_library(tmp_path / "lib.csv")

    def test_parse_failure_location(self, tmp_path):
        g = ChannelGrid(2)
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], [[1, 1], [1, "x"]], g)
        with pytest.raises(SignatureError, match=r"row 1, column 1"):
            load_library(tmp_path / "lib.csv")

    def test_dimension_mismatch_against_grid(self, tmp_path):
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], [[1, 1], [1, 1]], ChannelGrid(3))
        with pytest.raises(SignatureError, match="dimension mismatch"):
            load_library(tmp_path / "lib.csv")

    def test_ragged_row(self, tmp_path):
        _write_csv(tmp_path / "lib.csv", [BACKGROUND, "A"], [[1, 1], [1]], ChannelGrid(2))
        with pytest.raises(SignatureError, match="dimension mismatch at row 1"):
            load_library(tmp_path / "lib.csv")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "lib.csv").write_text("Bkg\n1\n")
        with pytest.raises(SignatureError, match="sidecar"):
            load_library(tmp_path / "lib.csv")

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_round_trip_is_bit_identical(self, tmp_path, small_library, fmt):
        p1 = save_library(small_library, tmp_path / f"a.{fmt}")
        lib1 = load_library(p1)
        p2 = save_library(lib1, tmp_path / f"b.{fmt}")
        lib2 = load_library(p2)
        np.testing.assert_array_equal(lib1.columns, small_library.columns)
        np.testing.assert_array_equal(lib2.columns, lib1.columns)
        assert lib2.names == small_library.names and lib2.grid == small_library.grid
        assert lib2.checksum() == small_library.checksum()

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (5, 2), elements=st.floats(1e-300, 1e300)))
    def test_csv_round_trip_random(self, tmp_path_factory, raw):
        lib = SignatureLibrary(ChannelGrid(5), (BACKGROUND, "A"), raw)
        path = save_library(lib, tmp_path_factory.mktemp("rt") / "lib.csv")
        np.testing.assert_array_equal(load_library(path).columns, lib.columns)


class TestSynthSignature:
    def test_662_peak_position_and_width(self):
        g = ChannelGrid()
        col = synth_signature(g, [(662.0, 1.0)], 0.065, 0.0)
        assert int(np.argmax(col)) == math.floor((662.0 - g.e_min) / g.bin_width)
        assert fwhm(662.0, 0.065) == pytest.approx(43.03)
        mean = np.dot(col, g.centers)
        sd = math.sqrt(np.dot(col, (g.centers - mean) ** 2) - g.bin_width**2 / 12.0)
        assert 2.0 * math.sqrt(2.0 * math.log(2.0)) * sd == pytest.approx(43.0, abs=0.5)

    def test_continuum_one_rejected(self):
        with pytest.raises(SignatureError):
            synth_signature(ChannelGrid(), [(662.0, 1.0)], 0.065, 1.0)

    def test_empty_peak_list(self):
        with pytest.raises(SignatureError, match="empty"):
            synth_signature(ChannelGrid(), [], 0.065, 0.0)

    @pytest.mark.parametrize("energy", [10.0, 5000.0])
    def test_peak_outside_grid(self, energy):
        with pytest.raises(SignatureError, match="outside"):
            synth_signature(ChannelGrid(), [(energy, 1.0)], 0.065, 0.0)

    def test_two_equal_peaks_split_mass_evenly(self):
        g = ChannelGrid()
        e1, e2 = 500.0, 1200.0
        col = synth_signature(g, [(e1, 1.0), (e2, 1.0)], 0.065, 0.0)
        split = g.channel_of(0.5 * (e1 + e2))
        left, right = col[:split].sum(), col[split:].sum()
        assert abs(left - right) < 1e-6

        # independent check: integrate each Gaussian over its half of the grid
        def mass(e, a, b):
            s = fwhm(e, 0.065) / (2.0 * math.sqrt(2.0 * math.log(2.0)))
            pdf = lambda x: math.exp(-0.5 * ((x - e) / s) ** 2) / (s * math.sqrt(2 * math.pi))
            return quad(pdf, a, b, points=[e], limit=200)[0]

        cut = g.edges[split]
        oracle_left = mass(e1, g.e_min, cut) + mass(e2, g.e_min, cut)
        oracle_right = mass(e1, cut, g.e_max) + mass(e2, cut, g.e_max)
        assert left == pytest.approx(oracle_left / (oracle_left + oracle_right), abs=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(
        st.lists(st.tuples(st.floats(25.0, 2000.0), st.floats(1e-3, 10.0)), min_size=1, max_size=5),
        st.floats(0.01, 0.2),
        st.floats(0.0, 0.99),
    )
    def test_output_normalized_and_non_negative(self, peaks, res, cont):
        col = synth_signature(ChannelGrid(), peaks, res, cont)
        assert np.all(col >= 0)
        assert abs(col.sum() - 1.0) < 1e-9

    def test_shelf_stops_at_highest_peak(self):
        g = ChannelGrid()
        col = synth_signature(g, [(300.0, 1.0)], 0.065, 0.5)
        assert col[g.channel_of(700.0):].max() < 1e-12


class TestSyntheticLibrary:
    def test_contents(self, library):
        assert library.names[0] == BACKGROUND
        assert library.n_components == 10
        assert library.n_channels == 1024
        np.testing.assert_allclose(library.columns.sum(axis=0), 1.0, atol=1e-9)

    def test_background_override(self):
        g = ChannelGrid(64, 32.0)
        bkg = np.linspace(2.0, 1.0, 64)
        lib = synthetic_library(g, background=bkg)
        np.testing.assert_allclose(lib.columns[:, 0], bkg / bkg.sum())

    def test_background_decays(self):
        col = synth_background(ChannelGrid())
        assert np.all(np.diff(col) < 0)
