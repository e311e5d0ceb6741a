import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlo_ptrl.metrics import (THETA_COLUMNS, convergence_curve, ecdf, export, gain_theta, theta_percent,
                              theta_table)
from mlo_ptrl.ptrl import LogRow, RunLog

BANDS = ["2.4", "5", "6"]


def area_oracle(x, y):
    """Integral of G_Y - G_X, evaluated exactly on the merged breakpoints."""
    gx, gy = ecdf(x), ecdf(y)
    pts = np.union1d(x, y).astype(float)
    widths = np.diff(pts)
    return float(np.sum(widths * (gy(pts[:-1]) - gx(pts[:-1]))))


def fake_log(variant, seed, n_aps=2, steps=100, shift=0, bands=BANDS):
    rng = np.random.default_rng(seed * 31 + shift)
    rl = RunLog(variant, seed, list(bands), n_aps)
    for b in bands:
        rl.mcs[b] = np.clip(rng.integers(0, 14, (steps, n_aps)) + shift, 0, 13).astype(np.int8)
    rl.steps_done = steps
    for t in range(10, steps + 1, 10):
        for b in bands:
            rl.rows.append(LogRow(t, b, float(rng.uniform(-1, 1)), 0.5, 0.1))
    return rl


class TestEcdf:
    def test_single(self):
        c = ecdf([5])
        assert c.values.tolist() == [5] and c.probs.tolist() == [1.0]
        assert c(4.999) == 0.0 and c(5) == 1.0

    def test_quartiles(self):
        assert ecdf([1, 2, 3, 4]).probs.tolist() == [0.25, 0.5, 0.75, 1.0]

    def test_duplicates(self):
        c = ecdf([2, 2, 4])
        assert c.probs[0] == pytest.approx(2 / 3) and c(3) == pytest.approx(2 / 3) and c(4) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            ecdf([])

    @given(st.lists(st.integers(0, 13), min_size=1, max_size=40), st.randoms())
    def test_permutation_and_monotone(self, xs, rnd):
        ys = list(xs)
        rnd.shuffle(ys)
        a, b = ecdf(xs), ecdf(ys)
        assert np.array_equal(a.probs, b.probs) and np.array_equal(a.values, b.values)
        assert a.probs[0] > 0 and a.probs[-1] == 1.0 and np.all(np.diff(a.probs) > 0)
        assert a.n == len(xs)


class TestTheta:
    def test_example(self):
        assert gain_theta(ecdf([10, 12]), ecdf([8, 10])) == 2.0
        assert area_oracle([10, 12], [8, 10]) == 2.0

    def test_identical(self):
        assert gain_theta(ecdf([1, 5, 5]), ecdf([5, 1, 5])) == 0.0

    @settings(max_examples=100)
    @given(st.lists(st.integers(0, 13), min_size=1, max_size=50), st.lists(st.integers(0, 13), min_size=1, max_size=50))
    def test_matches_area_and_antisymmetric(self, x, y):
        th = gain_theta(ecdf(x), ecdf(y))
        assert th == pytest.approx(np.mean(x) - np.mean(y), abs=1e-9)
        assert th == pytest.approx(area_oracle(x, y), abs=1e-9)
        assert gain_theta(ecdf(y), ecdf(x)) == -th
        assert -13 <= th <= 13

    def test_percent(self):
        assert theta_percent(1.3) == pytest.approx(10.0)


class TestConvergence:
    def test_identity(self):
        x = [0.1, -0.4, 0.9]
        assert convergence_curve(x, 1).tolist() == x

    def test_constant(self):
        assert np.allclose(convergence_curve([0.3] * 7, 4), 0.3)

    def test_example(self):
        assert convergence_curve([0, 0, 3, 0, 0], 3).tolist() == [0, 1, 1, 1, 0]

    @given(st.lists(st.floats(-1, 1), max_size=30), st.integers(1, 10))
    def test_length_and_bounds(self, xs, w):
        out = convergence_curve(xs, w)
        assert len(out) == len(xs)
        if xs:
            assert np.all(out >= min(xs) - 1e-12) and np.all(out <= max(xs) + 1e-12)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            convergence_curve([1.0], 0)


class TestThetaTable:
    def test_self_compare_zero(self):
        runs = {"a": [fake_log("a", s) for s in range(3)], "b": [fake_log("a", s) for s in range(3)]}
        assert all(r["theta"] == 0.0 for r in theta_table(runs))

    def test_rows_per_pair(self):
        runs = {v: [fake_log(v, s, shift=i) for s in range(2)] for i, v in enumerate(["x", "y"])}
        rows = theta_table(runs)
        agg = [r for r in rows if r["ap"] in ("pooled", "team")]
        assert len(agg) == 6 and len(rows) == 3 * (2 + 2)

    def test_three_variants_three_pairs(self):
        runs = {v: [fake_log(v, 0, shift=i)] for i, v in enumerate("abc")}
        pairs = {(r["variant_x"], r["variant_y"]) for r in theta_table(runs)}
        assert pairs == {("a", "b"), ("a", "c"), ("b", "c")}

    def test_uses_final_window(self):
        x, y = fake_log("x", 0), fake_log("y", 0)
        x.mcs["5"][-20:] = 13
        y.mcs["5"][-20:] = 3
        row = next(r for r in theta_table({"x": [x], "y": [y]}) if r["band"] == "5" and r["ap"] == "pooled")
        assert row["theta"] == 10.0 and row["n_pos"] == 1

    def test_mismatched_scenarios(self):
        with pytest.raises(ValueError):
            theta_table({"a": [fake_log("a", 0)], "b": [fake_log("b", 0, n_aps=3)]})


class TestExport:
    def test_files_and_rows(self, tmp_path):
        runs = {v: [fake_log(v, s, shift=i) for s in range(2)] for i, v in enumerate(["x", "y"])}
        files = export(runs, tmp_path)
        names = sorted(p.name for p in files)
        assert names == sorted([f"ecdf_{b}.csv" for b in BANDS] + [f"convergence_{b}.csv" for b in BANDS]
                               + ["theta.csv"])
        lines = (tmp_path / "theta.csv").read_text().splitlines()
        assert lines[0] == ",".join(THETA_COLUMNS)
        assert sum(1 for ln in lines[1:] if ",pooled," in ln or ",team," in ln) == 6

    def test_empty(self, tmp_path):
        export({}, tmp_path, band_ids=BANDS)
        for p in tmp_path.iterdir():
            assert len(p.read_text().splitlines()) == 1

    def test_byte_identical(self, tmp_path):
        runs = {"x": [fake_log("x", 0)], "y": [fake_log("y", 1)]}
        export(runs, tmp_path / "a")
        export(runs, tmp_path / "b")
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable(self, tmp_path):
        d = tmp_path / "ro"
        d.mkdir()
        d.chmod(0o500)
        try:
            with pytest.raises(OSError):
                export({"x": [fake_log("x", 0)]}, d)
        finally:
            d.chmod(0o700)

    def test_path_is_a_file(self, tmp_path):
        f = tmp_path / "file"
        f.write_text("")
        with pytest.raises(OSError):
            export({"x": [fake_log("x", 0)]}, f)
