"""掃引と計測のテスト"""

import numpy as np
import pytest

from benchmark import RunSettings, run_global, run_rewts, stream_reports, sweep, sweep_trend, \
    timing_bench, SweepResult
from errors import InsufficientDataError, ParameterError
from evaluation import ComparisonReport
from forecasters import ElasticNetParams, LagSpec
from rewts_engine import MIN_CHUNKS
from synthetic import default_paper_spec, generate_sine_dataset
from conftest import regime_frame


@pytest.fixture
def settings(small_lags, small_params):
    return RunSettings(chunk_length=60, lookback=40, horizon=5, stride=5, h_fit=5,
                       lags=small_lags, params=small_params, normalization='none')


@pytest.fixture
def long_regime():
    return regime_frame(chunk_length=60, periods=(6.0, 15.0) * 4)


class TestRunSettings:
    def test_check(self, settings):
        settings.check(300)
        with pytest.raises(InsufficientDataError):
            settings.check(100)
        with pytest.raises(ParameterError):
            settings.replace(h_fit=10).check(300)
        with pytest.raises(ParameterError):
            settings.replace(lookback=3).check(300)

    def test_replace_keeps_other_fields(self, settings):
        changed = settings.replace(lookback=20)
        assert changed.lookback == 20
        assert changed.chunk_length == settings.chunk_length


class TestStreamReports:
    def test_reports_from_third_chunk(self, regime, settings):
        run = run_rewts(regime, settings)
        reports = stream_reports(run, regime, settings)
        assert [r.chunk_id for r in reports] == [2, 3, 4]
        global_run, state = run_global(regime, settings)
        global_reports = stream_reports(global_run, regime, settings)
        assert [r.anchor_count for r in global_reports] == [r.anchor_count for r in reports]


class TestSweep:
    def test_chunk_length_axis(self, long_regime, settings):
        results = sweep(long_regime, 'chunk_length', [60, 120], settings)
        assert [r.value for r in results] == [60, 120]
        assert all(r.ok for r in results)
        assert all(isinstance(r.comparison, ComparisonReport) for r in results)
        assert results[0].comparison.axis == {'axis': 'chunk_length', 'value': 60}

    def test_invalid_value_is_recorded(self, long_regime, settings):
        results = sweep(long_regime, 'chunk_length', [60, 400], settings)
        assert results[0].ok
        assert not results[1].ok
        assert results[1].error['category'] == 'insufficient-data'
        assert results[1].to_row()['status'] == 'error'

    def test_lookback_axis_shares_global(self, long_regime, settings):
        results = sweep(long_regime, 'lookback_length', [20, 40], settings)
        assert all(r.ok for r in results)
        assert results[0].global_reports == results[1].global_reports
        assert results[0].comparison.global_mean == results[1].comparison.global_mean

    def test_lookback_below_h_fit_is_error(self, long_regime, settings):
        results = sweep(long_regime, 'lookback_length', [2, 40], settings)
        assert not results[0].ok
        assert results[0].error['category'] == 'parameter'
        assert results[1].ok

    def test_parallel_matches_sequential(self, long_regime, settings):
        sequential = sweep(long_regime, 'chunk_length', [60, 120], settings, jobs=1)
        parallel = sweep(long_regime, 'chunk_length', [60, 120], settings, jobs=2)
        for a, b in zip(sequential, parallel):
            assert a.comparison.rewts_mean == pytest.approx(b.comparison.rewts_mean, rel=1e-12)
            assert a.comparison.global_mean == pytest.approx(b.comparison.global_mean, rel=1e-12)

    def test_unknown_axis(self, long_regime, settings):
        with pytest.raises(ParameterError):
            sweep(long_regime, 'horizon', [5], settings)


def fake_result(value, mean):
    comparison = ComparisonReport(chunk_ids=[2], rewts_mse=[mean], global_mse=[1.0],
                                  rewts_normalized=[mean], global_normalized=[1.0],
                                  rewts_mean=mean, global_mean=1.0, rewts_mean_normalized=mean,
                                  global_mean_normalized=1.0, percent_difference=0.0,
                                  symmetric_percent_difference=0.0)
    return SweepResult(axis='chunk_length', value=value, comparison=comparison)


class TestSweepTrend:
    @pytest.mark.parametrize("means, expected", [
        ([1.0, 2.0, 3.0], 'increasing'),
        ([3.0, 2.0, 1.0], 'decreasing'),
        ([1.0, 1.0, 1.0], 'flat'),
        ([1.0, 3.0, 2.0], 'mixed'),
    ])
    def test_trend(self, means, expected):
        results = [fake_result(v, m) for v, m in zip([10, 20, 30], means)]
        assert sweep_trend(results[::-1]) == expected


class TestTimingBench:
    def test_series_shapes(self, long_regime, settings):
        timing = timing_bench(long_regime, settings)
        chunks = len(long_regime) // settings.chunk_length
        assert timing.chunk_ids == list(range(chunks))
        assert np.all(np.diff(timing.rewts_cumulative_train) >= 0)
        assert np.all(np.diff(timing.global_cumulative_train) >= 0)
        assert timing.rewts_model_counts == sorted(timing.rewts_model_counts)
        assert len(timing.rewts_anchor_seconds) == len(timing.global_anchor_seconds)
        assert list(timing.training_frame().columns) == [
            'chunk_id', 'rewts_cumulative_train_s', 'global_cumulative_train_s']
        assert len(timing.forecast_frame()) == len(timing.rewts_anchor_seconds)

    def test_repeats_must_be_positive(self, long_regime, settings):
        with pytest.raises(ParameterError):
            timing_bench(long_regime, settings, repeats=0)


@pytest.mark.slow
class TestSineTrainTiming:
    # 予測はチャンク2から始まるので、予測済みチャンクが4つ揃うのはチャンク5
    SETTLED_FROM = MIN_CHUNKS + 3

    @pytest.fixture(scope="class")
    def timing(self):
        frame = generate_sine_dataset(default_paper_spec('train'))
        settings = RunSettings(chunk_length=500, lookback=160, horizon=30, stride=30, h_fit=30,
                               lags=LagSpec(input_length=80),
                               params=ElasticNetParams(lambda_=1e-3, alpha=0.5, max_iter=1000,
                                                       tol=1e-6))
        return timing_bench(frame, settings, repeats=3)

    def test_global_training_overtakes_chunk_models(self, timing):
        assert timing.chunk_ids == list(range(8))
        for chunk_id in timing.chunk_ids[self.SETTLED_FROM:]:
            assert timing.global_cumulative_train[chunk_id] > timing.rewts_cumulative_train[chunk_id]

    def test_forecast_time_grows_with_model_count(self, timing):
        assert timing.spearman_rho > 0
