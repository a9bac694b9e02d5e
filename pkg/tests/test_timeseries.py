"""timeseries モジュールのテスト"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import (DataSourceError, EmptyInputError, OrderingError, ParameterError, ParseError,
                    RangeIndexError, SchemaError, ShapeError)
from timeseries import (EPS_STD, CsvSchema, TimeSeriesFrame, apply_scaler, fit_scaler,
                        fit_scaler_range, ingest_csv, invert_scaler, split_chunks)


class TestTimeSeriesFrame:
    def test_arrays_are_read_only(self):
        frame = TimeSeriesFrame.from_arrays(np.arange(10.0))
        with pytest.raises(ValueError):
            frame.target[0] = 5.0
        assert frame.n_covariates == 0
        assert frame.covariates.shape == (10, 0)

    def test_covariate_row_mismatch(self):
        with pytest.raises(ShapeError):
            TimeSeriesFrame.from_arrays(np.zeros(5), covariates=np.zeros((4, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(ParseError):
            TimeSeriesFrame.from_arrays([1.0, np.nan, 2.0])

    def test_future_known_columns(self):
        frame = TimeSeriesFrame.from_arrays(np.zeros(4), covariates=np.zeros((4, 2)),
                                            future_known=[True, False],
                                            covariate_names=['calendar', 'temp'])
        assert frame.future_known_columns() == [0]
        assert frame.past_only_columns() == [1]
        assert frame.feature_matrix().shape == (4, 3)

    def test_slice_keeps_start_index(self):
        frame = TimeSeriesFrame.from_arrays(np.arange(10.0))
        part = frame.slice(3, 7)
        assert part.start_index == 3
        assert_allclose(part.target, [3, 4, 5, 6])
        with pytest.raises(RangeIndexError):
            frame.slice(5, 11)


class TestSplitChunks:
    def test_exact_multiple(self):
        split = split_chunks(1000, 250)
        assert len(split) == 4
        assert split.incomplete is None
        assert [(c.start, c.end) for c in split] == [(0, 250), (250, 500), (500, 750), (750, 1000)]

    def test_remainder_is_incomplete(self):
        split = split_chunks(1001, 250)
        assert len(split) == 4
        assert split.incomplete == (1000, 1001)
        assert split.incomplete_length == 1
        assert split.chunk_of(1000) is None
        assert split.chunk_of(260).chunk_id == 1

    def test_chunks_are_disjoint_and_contiguous(self):
        split = split_chunks(TimeSeriesFrame.from_arrays(np.zeros(97)), 10)
        covered = []
        for chunk in split:
            assert chunk.length == 10
            covered.extend(range(chunk.start, chunk.end))
        assert covered == list(range(90))

    @pytest.mark.parametrize("l_c", [0, -3, 2.5, True])
    def test_invalid_chunk_length(self, l_c):
        with pytest.raises(ParameterError):
            split_chunks(100, l_c)


class TestScaler:
    def test_scaled_chunk_has_zero_mean_unit_std(self, rng):
        y = rng.normal(5.0, 3.0, size=200)
        x = rng.normal(-1.0, 0.5, size=(200, 2))
        frame = TimeSeriesFrame.from_arrays(y, covariates=x)
        chunk = split_chunks(frame, 100)[1]
        scaler = fit_scaler(frame, chunk)
        scaled = apply_scaler(scaler, frame.feature_matrix()[100:200])
        assert_allclose(scaled.mean(axis=0), 0.0, atol=1e-12)
        assert_allclose(scaled.std(axis=0), 1.0, atol=1e-12)

    @pytest.mark.parametrize("c", [-4.0, 0.25, 80.0])
    def test_scaling_data_scales_statistics(self, rng, c):
        y = rng.normal(5.0, 3.0, size=200)
        x = rng.normal(-1.0, 0.5, size=(200, 2))
        chunk = split_chunks(TimeSeriesFrame.from_arrays(y, covariates=x), 100)[1]
        base = fit_scaler(TimeSeriesFrame.from_arrays(y, covariates=x), chunk)
        scaled = fit_scaler(TimeSeriesFrame.from_arrays(c * y, covariates=c * x), chunk)
        assert np.all(base.stds > EPS_STD)
        assert_allclose(scaled.means, c * base.means, rtol=1e-12)
        assert_allclose(scaled.stds, abs(c) * base.stds, rtol=1e-12)

    def test_inverse_restores_rows(self, rng):
        frame = TimeSeriesFrame.from_arrays(rng.normal(size=50))
        scaler = fit_scaler_range(frame, 0, 50)
        rows = rng.normal(size=(7, 1))
        assert_allclose(invert_scaler(scaler, apply_scaler(scaler, rows)), rows, atol=1e-12)

    def test_constant_chunk_uses_floor(self):
        frame = TimeSeriesFrame.from_arrays(np.full(20, 3.0))
        scaler = fit_scaler_range(frame, 0, 20)
        assert scaler.stds[0] == EPS_STD
        assert np.all(np.isfinite(apply_scaler(scaler, np.array([[3.0], [4.0]]))))

    def test_column_mismatch(self, rng):
        frame = TimeSeriesFrame.from_arrays(rng.normal(size=20))
        scaler = fit_scaler_range(frame, 0, 20)
        with pytest.raises(ShapeError):
            apply_scaler(scaler, np.zeros((3, 2)))

    def test_dict_round_trip(self, rng):
        frame = TimeSeriesFrame.from_arrays(rng.normal(size=20))
        scaler = fit_scaler_range(frame, 0, 20)
        restored = type(scaler).from_dict(scaler.to_dict())
        assert_allclose(restored.means, scaler.means)
        assert_allclose(restored.stds, scaler.stds)


class TestIngestCsv:
    def test_reads_target_and_covariates(self, tmp_path):
        path = tmp_path / "plant.csv"
        path.write_text("t,y,temp,hour\n0,1.0,20,0\n1,2.0,21,1\n2,3.5,22,2\n")
        frame = ingest_csv(path, CsvSchema(target='y', covariates=('temp', 'hour'),
                                           future_known=('hour',), time_column='t'))
        assert_allclose(frame.target, [1.0, 2.0, 3.5])
        assert frame.covariate_names == ('temp', 'hour')
        assert frame.future_known == (False, True)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataSourceError) as info:
            ingest_csv(tmp_path / "nope.csv", CsvSchema(target='y'))
        assert info.value.to_dict()['category'] == 'io'

    def test_missing_column(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,value\n0,1\n")
        with pytest.raises(SchemaError):
            ingest_csv(path, CsvSchema(target='y', time_column='t'))

    def test_header_only_is_empty(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,y\n")
        with pytest.raises(EmptyInputError):
            ingest_csv(path, CsvSchema(target='y', time_column='t'))

    def test_unparseable_value_reports_row(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,y\n0,1\n1,abc\n2,3\n")
        with pytest.raises(ParseError) as info:
            ingest_csv(path, CsvSchema(target='y', time_column='t'))
        assert info.value.context['row'] == 2

    def test_lenient_interpolates(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,y\n0,1\n1,\n2,3\n")
        frame = ingest_csv(path, CsvSchema(target='y', time_column='t'), lenient=True)
        assert_allclose(frame.target, [1.0, 2.0, 3.0])

    def test_non_increasing_time(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,y\n0,1\n2,2\n1,3\n")
        with pytest.raises(OrderingError):
            ingest_csv(path, CsvSchema(target='y', time_column='t'))

    def test_numeric_resample_averages_windows(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,y\n0,1\n1,3\n2,5\n3,7\n")
        frame = ingest_csv(path, CsvSchema(target='y', time_column='t'), resample="2")
        assert_allclose(frame.target, [2.0, 6.0])
        assert frame.step == 2.0
