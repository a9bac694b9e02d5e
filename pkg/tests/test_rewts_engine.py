"""ReWTS エンジンのテスト"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import InsufficientDataError, ParameterError
from forecasters import fit_chunk_model, forecast_batch
from rewts_engine import (EnsembleState, ReWTSEngine, contributions,
                          ensemble_forecast_onestep_variant, fit_weights, run_stream,
                          schedule_anchors)
from timeseries import split_chunks
from report_writer import write_stream_log
from conftest import regime_frame

L_C = 60


@pytest.fixture
def models(regime, small_lags, small_params):
    split = split_chunks(regime, L_C)
    return [fit_chunk_model(regime, c, small_lags, small_params) for c in split]


def make_engine(small_lags, small_params, lookback=40, h_fit=5, **kwargs):
    return ReWTSEngine(lags=small_lags, params=small_params, lookback=lookback, h_fit=h_fit,
                       **kwargs)


class TestSchedule:
    def test_anchors_start_at_third_chunk(self):
        split = split_chunks(300, L_C)
        anchors = schedule_anchors(split, horizon=10, stride=25)
        assert anchors[:3] == [(120, 2), (145, 2), (170, 2)]
        assert {c for _, c in anchors} == {2, 3, 4}
        assert all(a + 10 <= (c + 1) * L_C for a, c in anchors)

    def test_invalid_stride(self):
        with pytest.raises(ParameterError):
            schedule_anchors(split_chunks(300, L_C), horizon=10, stride=0)


class TestEnsembleState:
    def test_lookback_must_cover_h_fit(self, models):
        with pytest.raises(ParameterError):
            EnsembleState(models=models[:2], lookback=4, h_fit=5)

    def test_ids_increasing(self, models):
        state = EnsembleState(models=models[:2], lookback=20, h_fit=5)
        with pytest.raises(ParameterError):
            state.add_model(models[0])
        state.add_model(models[2])
        assert state.model_ids == (0, 1, 2)
        assert state.last_weights is None


class TestLookback:
    def test_full_window(self, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params, lookback=20, h_fit=5)
        anchors = engine.lookback_anchors(engine.new_state(models[:2]), 100)
        assert_allclose(anchors, np.arange(80, 96))

    def test_weight_fit_stride(self, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params, lookback=20, h_fit=5, weight_fit_stride=4)
        anchors = engine.lookback_anchors(engine.new_state(models[:2]), 100)
        assert_allclose(anchors, [80, 84, 88, 92])

    def test_truncated_near_start(self, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params, lookback=20, h_fit=5)
        state = engine.new_state(models[:2])
        anchors = engine.lookback_anchors(state, 20)
        assert anchors[0] == 8
        assert anchors[-1] == 15
        assert not engine.has_lookback(state, 13)
        with pytest.raises(InsufficientDataError):
            engine.lookback_anchors(state, 13)


class TestFitWeights:
    def test_weights_on_simplex(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        state = engine.new_state(models[:2])
        weights = engine.fit_weights(state, regime, 150)
        assert np.all(weights.w >= 0)
        assert weights.w.sum() == pytest.approx(1.0, abs=1e-12)
        assert state.weights_anchor == 150
        start, end, count = engine.last_fit_window
        assert (start, end, count) == (110, 145, 36)

    def test_matching_regime_dominates(self, regime, small_lags, small_params, models):
        # チャンク2はチャンク0と同じ周期
        engine = make_engine(small_lags, small_params)
        state = engine.new_state(models[:2])
        weights = engine.fit_weights(state, regime, 170)
        assert weights.w[0] >= 0.9

    def test_single_model_trivial(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        weights = engine.fit_weights(engine.new_state(models[:1]), regime, 100)
        assert_allclose(weights.w, [1.0])

    def test_rejects_models_from_the_future(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        with pytest.raises(ParameterError):
            engine.fit_weights(engine.new_state(models[:3]), regime, 150)

    def test_contributions_sum_to_objective(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        weights = engine.fit_weights(engine.new_state(models[:2]), regime, 170)
        assert contributions(engine.last_qp, weights.w).sum() == pytest.approx(weights.objective)

    def test_module_function(self, regime, small_lags, small_params, models):
        state = EnsembleState(models=models[:2], lookback=40, h_fit=5)
        weights = fit_weights(state, regime, 170)
        assert state.last_weights is weights

    def test_cache_does_not_change_weights(self, regime, small_lags, small_params, models):
        cached = make_engine(small_lags, small_params, use_cache=True)
        plain = make_engine(small_lags, small_params, use_cache=False)
        w_cached = cached.fit_weights(cached.new_state(models[:2]), regime, 170).w
        w_plain = plain.fit_weights(plain.new_state(models[:2]), regime, 170).w
        assert_allclose(w_cached, w_plain, atol=1e-12)


class TestEnsembleForecast:
    def test_direct_is_weighted_matrix(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        state = engine.new_state(models[:2])
        weights = engine.fit_weights(state, regime, 170)
        matrix = engine.forecast_matrix(state, regime, 170, 5)
        assert matrix.values.shape == (5, 2)
        assert_allclose(engine.ensemble_forecast(state, regime, 170, 5),
                        matrix.values @ weights.w)

    def test_recursive_single_block_equals_direct(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        state = engine.new_state(models[:2])
        engine.fit_weights(state, regime, 170)
        assert_allclose(engine.ensemble_forecast_recursive(state, regime, 170, 5),
                        engine.ensemble_forecast(state, regime, 170, 5), atol=1e-10)

    def test_onestep_variant(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params, h_fit=1)
        state = engine.new_state(models[:2])
        engine.fit_weights(state, regime, 170)
        forecast = ensemble_forecast_onestep_variant(state, regime, 170, 6)
        assert forecast.shape == (6,)
        assert np.mean((forecast - regime.target[170:176]) ** 2) < 1e-2

    def test_onestep_variant_needs_h_fit_one(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params, h_fit=5)
        state = engine.new_state(models[:2])
        engine.fit_weights(state, regime, 170)
        with pytest.raises(ParameterError):
            ensemble_forecast_onestep_variant(state, regime, 170, 6)

    def test_requires_fitted_weights(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        with pytest.raises(ParameterError):
            engine.ensemble_forecast(engine.new_state(models[:2]), regime, 170, 5)


class TestRunStream:
    def test_causal_and_growing(self, regime, small_lags, small_params):
        engine = make_engine(small_lags, small_params)
        run = engine.run_stream(regime, L_C, horizon=5, stride=5)
        assert len(run.models) == 5
        assert run.records
        for record in run.records:
            assert record.max_index_touched < record.anchor
            assert record.model_ids == list(range(record.chunk_id))
            assert record.weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert record.mode == "direct"
            assert record.forecast.shape == (5,)
            assert_allclose(record.forecast, record.matrix @ record.weights, atol=1e-12)

    def test_regime_switch_is_tracked(self, regime, small_lags, small_params):
        engine = make_engine(small_lags, small_params)
        run = engine.run_stream(regime, L_C, horizon=5, stride=5)
        # ルックバック全体がチャンク3（周期15）に入ったアンカー
        settled = [r for r in run.records if r.chunk_id == 3 and r.anchor - 40 - 8 >= 3 * L_C]
        assert settled
        for record in settled:
            assert int(np.argmax(record.weights)) == 1
            error = regime.target[record.anchor:record.anchor + 5] - record.forecast
            assert np.mean(error ** 2) < 1e-2

    def test_recursive_mode_when_h_fit_short(self, regime, small_lags, small_params, tmp_path):
        engine = make_engine(small_lags, small_params, h_fit=5)
        run = engine.run_stream(regime, L_C, horizon=10, stride=10)
        assert all(r.mode == "recursive" for r in run.records)
        assert all(r.forecast.shape == (10,) for r in run.records)
        # ログだけから予測を再計算できる
        path = write_stream_log(run.records, tmp_path / "log.jsonl")
        for line, record in zip(path.read_text().splitlines(), run.records):
            logged = json.loads(line)
            matrix = np.array(logged['matrix'])
            assert matrix.shape == (10, len(record.model_ids))
            assert_allclose(logged['forecast'], matrix @ np.array(logged['weights']), atol=1e-12)

    def test_onestep_records_keep_block_matrices(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params, h_fit=1)
        records = engine.run_fixed_ensemble(regime, models[:3], [(170, 2), (200, 3)], 4)
        for record in records:
            assert record.matrix.shape == (4, 3)
            # 先頭ブロックは実データからの1ステップ予測
            direct = engine.forecast_matrix(engine.new_state(models[:3]), regime, record.anchor, 1)
            assert_allclose(record.matrix[0], direct.values[0], atol=1e-12)
            assert_allclose(record.forecast, record.matrix @ record.weights, atol=1e-12)

    def test_refit_every(self, regime, small_lags, small_params):
        engine = make_engine(small_lags, small_params, refit_every=3)
        run = engine.run_stream(regime, L_C, horizon=5, stride=5)
        refits = [r for r in run.records if r.contributions is not None]
        assert len(refits) < len(run.records)
        # チャンクの先頭ではモデルが増えるので必ず解き直す
        firsts = {}
        for record in run.records:
            firsts.setdefault(record.chunk_id, record)
        assert all(r.contributions is not None for r in firsts.values())

    def test_resume_reproduces_forecasts(self, regime, small_lags, small_params):
        first = make_engine(small_lags, small_params).run_stream(regime, L_C, 5, 5)
        resumed = make_engine(small_lags, small_params).run_stream(regime, L_C, 5, 5,
                                                                    resume_models=first.models)
        assert resumed.train_seconds == {}
        for a, b in zip(first.records, resumed.records):
            assert_allclose(a.forecast, b.forecast)

    def test_too_short(self, small_lags, small_params):
        engine = make_engine(small_lags, small_params)
        with pytest.raises(InsufficientDataError):
            engine.run_stream(regime_frame(periods=(6.0,)), L_C, 5, 5)

    def test_h_fit_above_horizon(self, regime, small_lags, small_params):
        engine = make_engine(small_lags, small_params, h_fit=10)
        with pytest.raises(ParameterError):
            engine.run_stream(regime, L_C, horizon=5, stride=5)

    def test_module_wrapper(self, regime, small_lags, small_params):
        records = run_stream(regime, L_C, 40, 5, 5, small_lags, small_params)
        assert records[0].anchor == 2 * L_C

    def test_deterministic(self, regime, small_lags, small_params):
        a = make_engine(small_lags, small_params).run_stream(regime, L_C, 5, 5)
        b = make_engine(small_lags, small_params).run_stream(regime, L_C, 5, 5)
        for x, y in zip(a.records, b.records):
            assert x.to_dict(include_timing=False) == y.to_dict(include_timing=False)

    def test_identical_models_reduce_to_single_model(self, regime, small_lags, small_params):
        engine = make_engine(small_lags, small_params, kind='persistence')
        run = engine.run_stream(regime, L_C, horizon=5, stride=5)
        assert len({len(r.model_ids) for r in run.records}) > 1
        for record in run.records:
            assert_allclose(record.forecast, regime.target[record.anchor - 1], atol=1e-9)


class TestFixedEnsemble:
    def test_skips_anchors_without_lookback(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        records = engine.run_fixed_ensemble(regime, models[:2], [(10, 0), (150, 2), (200, 3)], 5)
        assert [r.anchor for r in records] == [150, 200]

    def test_models_may_come_after_anchor(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        records = engine.run_fixed_ensemble(regime, models, [(100, 1)], 5)
        assert len(records) == 1
        assert records[0].model_ids == [0, 1, 2, 3, 4]

    def test_single_model_equals_its_own_forecast(self, regime, small_lags, small_params, models):
        engine = make_engine(small_lags, small_params)
        anchors = [(150, 2), (200, 3), (250, 4)]
        records = engine.run_fixed_ensemble(regime, models[1:2], anchors, 5)
        assert len(records) == 3
        expected = forecast_batch(models[1], regime, [a for a, _ in anchors], 5)
        for record, row in zip(records, expected):
            assert_allclose(record.weights, [1.0])
            assert_allclose(record.forecast, row, atol=1e-12)
