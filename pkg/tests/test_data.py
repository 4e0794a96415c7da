import numpy as np
import pytest
from scipy import stats

from tsdistill.data import (
    DataFormatError,
    NormStats,
    SeriesSet,
    load_forecast_csv,
    load_labeled_tsv,
    make_forecast_windows,
    random_crop,
    split_bounds,
    synth_classification,
    synth_sine_forecast,
    write_forecast_csv,
    write_labeled_tsv,
    z_normalize,
)


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        p = tmp_path / name
        p.write_text(text)
        return p
    return _write


class TestLabeledLoader:
    def test_two_rows(self, write):
        d = load_labeled_tsv(write("a.csv", "1,0.5,0.5\n0,1.0,-1.0\n"))
        assert (d.num_series, d.num_channels, d.max_length) == (2, 1, 2)
        assert d.labels.tolist() == [1, 0]
        assert d.label_names == ["0", "1"]
        np.testing.assert_array_equal(d.values[1, 0], [1.0, -1.0])

    def test_tab_delimited(self, write):
        d = load_labeled_tsv(write("a.tsv", "b\t1\t2\t3\na\t4\t5\t6\n"))
        assert d.labels.tolist() == [1, 0]
        assert d.max_length == 3

    def test_numeric_label_order(self, write):
        d = load_labeled_tsv(write("a.tsv", "10\t1\n2\t1\n-1\t1\n"))
        assert d.label_names == ["-1", "2", "10"]
        assert d.labels.tolist() == [2, 1, 0]

    def test_trailing_nan_shortens(self, write):
        d = load_labeled_tsv(write("a.tsv", "0\t1\t2\t3\t4\n1\t5\t6\tNaN\tNaN\n"))
        assert d.lengths.tolist() == [4, 2]
        assert d.valid.tolist() == [[True] * 4, [True, True, False, False]]
        assert d.values[1, 0, 2:].tolist() == [0.0, 0.0]

    def test_interior_nan_rejected(self, write):
        with pytest.raises(DataFormatError, match=":1:"):
            load_labeled_tsv(write("a.tsv", "0\t1\tNaN\t3\n"))

    def test_ragged_row_is_located(self, write):
        with pytest.raises(DataFormatError, match=":2:"):
            load_labeled_tsv(write("a.tsv", "0\t1\t2\n1\t1\tx\n"))

    def test_empty_file(self, write):
        with pytest.raises(DataFormatError, match="empty"):
            load_labeled_tsv(write("a.tsv", "\n\n"))

    def test_label_map_from_train(self, write):
        train = load_labeled_tsv(write("t.tsv", "a\t1\nb\t2\n"))
        test = load_labeled_tsv(write("s.tsv", "b\t1\n"), {n: i for i, n in enumerate(train.label_names)})
        assert test.labels.tolist() == [1]
        with pytest.raises(DataFormatError):
            load_labeled_tsv(write("u.tsv", "c\t1\n"), {"a": 0, "b": 1})

    def test_round_trip(self, tmp_path, rng):
        values = rng.normal(size=(5, 1, 12))
        lengths = np.array([12, 7, 12, 1, 3])
        values *= np.arange(12)[None, None, :] < lengths[:, None, None]
        d = SeriesSet(values, lengths, np.array([0, 2, 1, 0, 2]), ["x", "y", "z"])
        write_labeled_tsv(tmp_path / "r.tsv", d)
        back = load_labeled_tsv(tmp_path / "r.tsv")
        np.testing.assert_array_equal(back.values, d.values)
        np.testing.assert_array_equal(back.lengths, d.lengths)
        assert [back.label_names[i] for i in back.labels] == [d.label_names[i] for i in d.labels]


class TestForecastLoader:
    def test_shape(self, write):
        d = load_forecast_csv(write("f.csv", "a,b\n1,2\n3,4\n5,6\n"))
        assert (d.num_channels, d.max_length) == (2, 3)
        np.testing.assert_array_equal(d.values[0], [[1, 3, 5], [2, 4, 6]])

    def test_date_column_skipped(self, write):
        d = load_forecast_csv(write("f.csv", "date,OT\n2020-01-01,1.5\n2020-01-02,2.5\n"))
        assert d.num_channels == 1

    def test_missing_column(self, write):
        with pytest.raises(DataFormatError, match="not found"):
            load_forecast_csv(write("f.csv", "a,b\n1,2\n"), columns=["c"])

    def test_non_numeric_cell_located(self, write):
        with pytest.raises(DataFormatError, match=r":3 column 'b'"):
            load_forecast_csv(write("f.csv", "a,b\n1,2\n3,oops\n"))

    def test_short_row(self, write):
        with pytest.raises(DataFormatError, match=":2:"):
            load_forecast_csv(write("f.csv", "a,b\n1\n"))

    def test_generated_ramp(self, tmp_path):
        ramp = np.stack([np.arange(50.0), 2.0 * np.arange(50.0) - 7.0])
        write_forecast_csv(tmp_path / "r.csv", ramp, ["u", "v"])
        d = load_forecast_csv(tmp_path / "r.csv")
        np.testing.assert_array_equal(d.values[0], ramp)


class TestNormalize:
    def test_constant_channel_flagged(self):
        d = SeriesSet(np.full((2, 1, 4), 3.0), [4, 4])
        out, st = z_normalize(d)
        assert st.constant_channels.tolist() == [True]
        assert not out.values.any()

    def test_standardized_unchanged(self, rng):
        x = rng.normal(size=(3, 2, 50))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        out, _ = z_normalize(SeriesSet(x, [50] * 3))
        np.testing.assert_allclose(out.values, x, atol=1e-6)

    def test_hand_four_points(self):
        out, st = z_normalize(SeriesSet(np.array([[[1.0, 2.0, 3.0, 6.0]]]), [4]))
        # mean 3, population variance (4 + 1 + 0 + 9) / 4 = 3.5
        assert st.mean[0] == 3.0 and st.std[0] == pytest.approx(np.sqrt(3.5))
        np.testing.assert_allclose(out.values[0, 0], np.array([-2.0, -1.0, 0.0, 3.0]) / np.sqrt(3.5))

    def test_test_split_uses_train_stats(self, rng):
        train = SeriesSet(rng.normal(5.0, 2.0, size=(4, 1, 30)), [30] * 4)
        test = SeriesSet(rng.normal(-9.0, 0.1, size=(2, 1, 30)), [30] * 2)
        _, st = z_normalize(train)
        out, st2 = z_normalize(test, st)
        assert st2 is st
        np.testing.assert_allclose(out.values, (test.values - st.mean[0]) / st.std[0])

    def test_padding_ignored(self):
        d = SeriesSet(np.array([[[1.0, 3.0, 0.0]], [[2.0, 2.0, 2.0]]]), [2, 3])
        out, st = z_normalize(d)
        assert st.mean[0] == 2.0
        assert out.values[0, 0, 2] == 0.0

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            NormStats(np.zeros(1), -np.ones(1))


class TestCrop:
    def test_short_series_whole(self, rng):
        values = rng.normal(size=(2, 3, 10))
        values[1, :, 6:] = 0.0
        d = SeriesSet(values, [10, 6])
        batch, valid = random_crop(d, 50, rng)
        np.testing.assert_array_equal(batch, d.values)
        assert valid.sum(axis=1).tolist() == [10, 6]

    def test_window_equal_length_is_full(self, rng):
        d = SeriesSet(rng.normal(size=(3, 2, 20)), [20] * 3)
        batch, valid = random_crop(d, 20, rng)
        np.testing.assert_array_equal(batch, d.values)
        assert valid.all()

    def test_pure_slice_preserves_channels(self, rng):
        d = SeriesSet(rng.normal(size=(1, 3, 100)), [100])
        batch, _ = random_crop(d, 10, rng)
        hits = [s for s in range(91) if np.array_equal(d.values[0, :, s:s + 10], batch[0])]
        assert len(hits) == 1

    def test_start_uniformity(self):
        ramp = SeriesSet(np.arange(100.0)[None, None, :], [100])
        rng = np.random.default_rng(0)
        starts = np.array([random_crop(ramp, 10, rng)[0][0, 0, 0] for _ in range(10_000)], dtype=int)
        counts = np.bincount(starts, minlength=91)
        assert counts.size == 91
        assert stats.chisquare(counts).pvalue > 0.001

    def test_bad_window(self, rng):
        with pytest.raises(ValueError):
            random_crop(SeriesSet(np.zeros((1, 1, 5)), [5]), 0, rng)


class TestWindows:
    def test_count(self):
        w = make_forecast_windows(10, 3, [2], {"all": (0, 10)})
        assert len(w.starts["all"]) == 10 - 3 - 2 + 1 == 6

    def test_zero_horizon(self):
        with pytest.raises(ValueError):
            make_forecast_windows(10, 3, [0], {"all": (0, 10)})

    def test_ramp_targets(self):
        ramp = np.arange(40.0)
        w = make_forecast_windows(40, 5, [3], split_bounds(40))
        for split in ("train", "val", "test"):
            ctx = ramp[w.context_indices(split)]
            tgt = ramp[w.target_indices(split, 3)]
            np.testing.assert_array_equal(tgt, ctx[:, -1:] + np.arange(1, 4))

    def test_no_leakage_and_no_crossing(self):
        bounds = split_bounds(300)
        w = make_forecast_windows(300, 20, [4, 9], bounds)
        for split, (a, b) in bounds.items():
            ctx = w.context_indices(split)
            for h in (4, 9):
                tgt = w.target_indices(split, h)
                assert np.all(ctx.max(axis=1) < tgt.min(axis=1))
                assert ctx.min() >= a and tgt.max() < b

    def test_short_split_flagged(self):
        w = make_forecast_windows(100, 30, [5], split_bounds(100))
        assert w.empty_splits == ["val", "test"]
        assert len(w.starts["test"]) == 0

    def test_split_bounds(self):
        assert split_bounds(4000) == {"train": (0, 2400), "val": (2400, 3200), "test": (3200, 4000)}


class TestSynthetic:
    def test_noise_free_separable_by_frequency(self, rng):
        d = synth_classification(3, 30, 256, 0.0, rng)
        peak = np.abs(np.fft.rfft(d.values[:, 0], axis=1)).argmax(axis=1)
        np.testing.assert_array_equal(peak, 4 * (d.labels + 1))

    def test_seeded_identical(self):
        a = synth_classification(3, 20, 64, 0.3, np.random.default_rng(5))
        b = synth_classification(3, 20, 64, 0.3, np.random.default_rng(5))
        assert a.values.tobytes() == b.values.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_balanced(self, rng):
        d = synth_classification(3, 150, 32, 0.3, rng)
        assert np.bincount(d.labels).tolist() == [50, 50, 50]

    def test_sine_periodic(self, rng):
        x = synth_sine_forecast(1000, 50, 0.0, rng).values[0, 0]
        np.testing.assert_allclose(x[50:], x[:-50], atol=1e-6)
        assert abs(x.mean()) < 1e-6

    def test_sine_autocorrelation_peak(self, rng):
        x = synth_sine_forecast(4000, 50, 0.1, rng).values[0, 0]
        x = x - x.mean()
        ac = np.array([np.dot(x[:-lag], x[lag:]) / (len(x) - lag) for lag in range(1, 76)])
        assert int(np.argmax(ac[25:])) + 26 == 50
