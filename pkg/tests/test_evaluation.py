"""評価モジュールのテスト"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ComparisonError, CoverageError, ParameterError, ShapeError
from evaluation import (ChunkReport, LossConfig, argmax_accuracy, chunk_amplitudes, compare_runs,
                        edge_effect_report, per_chunk_report, percent_difference,
                        strided_loss, strided_loss_bruteforce, strided_loss_detail,
                        symmetric_percent_difference, weight_concentration, weight_relevance,
                        window_mse, within_chunk)
from rewts_engine import StreamLogRecord
from synthetic import ChunkTruth
from timeseries import TimeSeriesFrame, split_chunks


def record(anchor, chunk_id, forecast, model_ids=(0,), weights=None, method="rewts"):
    return StreamLogRecord(anchor=anchor, chunk_id=chunk_id, method=method,
                           model_ids=list(model_ids), forecast=np.asarray(forecast, dtype=float),
                           weights=None if weights is None else np.asarray(weights, dtype=float))


def truth_for(split, amplitudes, frequencies):
    return tuple(ChunkTruth(chunk_id=c.chunk_id, amplitude=a, frequency=f, phase=0.0,
                            start=c.start, end=c.end)
                 for c, a, f in zip(split, amplitudes, frequencies))


class TestStridedLoss:
    def test_anchor_layout(self):
        cfg = LossConfig(h=3, s=2, f=0, e=10)
        assert cfg.psi == 3
        assert_allclose(cfg.anchors(), [0, 2, 4, 6])

    def test_matches_bruteforce(self, rng):
        y = rng.normal(size=120)
        cfg = LossConfig(h=7, s=5, f=13, e=110)
        forecasts = {int(a): rng.normal(size=7) for a in cfg.anchors()}
        detail = strided_loss_detail(y, forecasts, cfg)
        assert detail.mean == pytest.approx(strided_loss_bruteforce(y, forecasts, cfg), rel=1e-12)
        assert detail.mean == pytest.approx(np.mean(detail.losses))
        assert detail.literal == pytest.approx(sum(detail.losses) / cfg.psi)

    def test_constant_offset(self):
        y = np.zeros(20)
        cfg = LossConfig(h=4, s=4, f=0, e=20)
        forecasts = {int(a): np.full(4, 2.0) for a in cfg.anchors()}
        assert strided_loss(y, forecasts, cfg) == pytest.approx(4.0)

    def test_perfect_forecast_is_zero(self, rng):
        y = rng.normal(size=50)
        cfg = LossConfig(h=5, s=3, f=2, e=50)
        forecasts = {int(a): y[a:a + 5].copy() for a in cfg.anchors()}
        assert strided_loss(TimeSeriesFrame.from_arrays(y), forecasts, cfg) == 0.0

    def test_single_anchor_has_no_literal(self):
        cfg = LossConfig(h=3, s=5, f=0, e=5)
        detail = strided_loss_detail(np.zeros(5), {0: np.ones(3)}, cfg)
        assert detail.psi == 0
        assert detail.literal is None
        assert detail.mean == pytest.approx(1.0)

    def test_missing_anchor(self):
        cfg = LossConfig(h=2, s=2, f=0, e=8)
        with pytest.raises(CoverageError):
            strided_loss(np.zeros(8), {0: np.zeros(2), 2: np.zeros(2)}, cfg)

    def test_window_outside_series(self):
        cfg = LossConfig(h=2, s=2, f=0, e=12)
        with pytest.raises(CoverageError):
            strided_loss(np.zeros(8), {}, cfg)

    def test_invalid_config(self):
        with pytest.raises(ParameterError):
            LossConfig(h=5, s=1, f=0, e=5)
        with pytest.raises(ParameterError):
            LossConfig(h=1, s=1, f=0, e=5, normalization='z-score')

    def test_window_mse_shape(self):
        with pytest.raises(ShapeError):
            window_mse(np.zeros(3), np.zeros(2))


class TestPercentDifference:
    def test_values(self):
        assert percent_difference(2.0, 4.0) == pytest.approx(50.0)
        assert percent_difference(3.0, 3.0) == 0.0
        assert percent_difference(0.0, 0.0) == 0.0

    def test_zero_global(self):
        with pytest.raises(ComparisonError):
            percent_difference(1.0, 0.0)

    def test_swap_flips_sign(self):
        assert percent_difference(2.0, 4.0) > 0 > percent_difference(4.0, 2.0)
        assert symmetric_percent_difference(2.0, 4.0) == -symmetric_percent_difference(4.0, 2.0)


class TestPerChunkReport:
    @pytest.fixture
    def setup(self):
        y = np.zeros(300)
        frame = TimeSeriesFrame.from_arrays(y)
        split = split_chunks(frame, 60)
        log = []
        for chunk in split.chunks[2:]:
            offset = float(chunk.chunk_id)
            for a in range(chunk.start, chunk.end - 5 + 1, 5):
                log.append(record(a, chunk.chunk_id, np.full(5, offset)))
        return frame, split, log

    def test_raw_mse_per_chunk(self, setup):
        frame, split, log = setup
        reports = per_chunk_report(log, split.chunks[2:], 'none', frame, 5)
        assert [r.chunk_id for r in reports] == [2, 3, 4]
        assert [r.mse for r in reports] == pytest.approx([4.0, 9.0, 16.0])
        assert reports[0].anchor_count == 12
        assert (reports[0].window_start, reports[0].window_end) == (120, 180)

    def test_normalizations_use_truth_amplitudes(self, setup):
        frame, split, log = setup
        truth = truth_for(split, [1.0, 1.0, 2.0, 1.0, 4.0], [1.0] * 5)
        per_chunk = per_chunk_report(log, split.chunks[2:], 'per-chunk-amplitude', frame, 5,
                                     truth=truth)
        assert [r.normalized_mse for r in per_chunk] == pytest.approx([1.0, 9.0, 1.0])
        shared = per_chunk_report(log, split.chunks[2:], 'max-amplitude', frame, 5, truth=truth)
        assert [r.normalized_mse for r in shared] == pytest.approx([4 / 16, 9 / 16, 1.0])

    def test_chunk_without_anchors_is_excluded(self, setup):
        frame, split, log = setup
        reports = per_chunk_report([r for r in log if r.chunk_id != 3], split.chunks[2:], 'none',
                                   frame, 5)
        assert [r.chunk_id for r in reports] == [2, 4]

    def test_mixed_horizons_rejected(self, setup):
        frame, split, log = setup
        log = log + [record(175, 2, np.zeros(3))]
        with pytest.raises(ShapeError):
            per_chunk_report(log, split.chunks[2:], 'none', frame, 5)

    def test_amplitude_estimate_without_truth(self):
        t = np.arange(200)
        frame = TimeSeriesFrame.from_arrays(3.0 * np.sin(2 * np.pi * t / 20))
        amplitudes = chunk_amplitudes(frame, split_chunks(frame, 100).chunks)
        assert amplitudes[0] == pytest.approx(3.0, rel=1e-6)

    def test_within_chunk_keeps_anchors_past_margin(self):
        split = split_chunks(TimeSeriesFrame.from_arrays(np.zeros(300)), 100)
        log = [record(a, a // 100, [0.0]) for a in (105, 130, 150, 199, 210, 260)]
        kept = within_chunk(log, list(split)[:2], margin=50)
        assert [r.anchor for r in kept] == [150, 199]
        assert [r.anchor for r in within_chunk(log, list(split), margin=0)] == [r.anchor for r in log]
        with pytest.raises(ParameterError):
            within_chunk(log, list(split), margin=-1)


def report(chunk_id, mse, normalized=None):
    return ChunkReport(chunk_id=chunk_id, mse=mse,
                       normalized_mse=mse if normalized is None else normalized, anchor_count=1)


class TestCompareRuns:
    def test_identical_runs(self):
        reports = [report(2, 1.0), report(3, 2.0)]
        comparison = compare_runs(reports, reports)
        assert comparison.percent_difference == 0.0
        assert comparison.chunk_ids == [2, 3]

    def test_percent_on_normalized_means(self):
        rewts = [report(2, 1.0, 0.1), report(3, 3.0, 0.3)]
        global_ = [report(2, 4.0, 0.4), report(3, 4.0, 0.4)]
        comparison = compare_runs(rewts, global_, 'max-amplitude')
        assert comparison.rewts_mean == pytest.approx(2.0)
        assert comparison.global_mean_normalized == pytest.approx(0.4)
        assert comparison.percent_difference == pytest.approx(50.0)

    def test_order_does_not_matter(self, rng):
        values = rng.lognormal(size=30)
        rewts = [report(i, v) for i, v in enumerate(values)]
        global_ = [report(i, 1.0) for i in range(30)]
        a = compare_runs(rewts, global_)
        b = compare_runs(rewts[::-1], global_)
        assert a.rewts_mean == b.rewts_mean
        assert a.rewts_mean == math.fsum(values) / 30

    def test_mismatched_chunks(self):
        with pytest.raises(ComparisonError):
            compare_runs([report(2, 1.0)], [report(3, 1.0)])

    def test_empty(self):
        with pytest.raises(ComparisonError):
            compare_runs([], [])


class TestWeightAnalysis:
    @pytest.fixture
    def split_truth(self):
        split = split_chunks(400, 100)
        truth = truth_for(split, [1.0] * 4, [1.0, 2.0, 1.0, 3.0])
        return split, truth

    def test_concentration_on_matching_frequency(self, split_truth):
        split, truth = split_truth
        log = [record(250, 2, np.zeros(2), model_ids=(0, 1), weights=[0.8, 0.2]),
               record(260, 2, np.zeros(2), model_ids=(0, 1), weights=[0.6, 0.4]),
               record(205, 2, np.zeros(2), model_ids=(0, 1), weights=[0.0, 1.0])]
        result = weight_concentration(log, split.chunks, truth, offset=20)
        assert result['anchors'] == 2
        assert result['mean'] == pytest.approx(0.7)

    def test_argmax_accuracy(self, split_truth):
        split, truth = split_truth
        log = [record(250, 2, np.zeros(2), model_ids=(0, 1), weights=[0.8, 0.2]),
               record(260, 2, np.zeros(2), model_ids=(0, 1), weights=[0.3, 0.7]),
               # 一致するモデルが無いチャンクは数えない
               record(350, 3, np.zeros(2), model_ids=(0, 1, 2), weights=[0.2, 0.3, 0.5])]
        assert argmax_accuracy(log, split.chunks, truth, offset=20) == pytest.approx(0.5)

    def test_edge_effect(self):
        frame = TimeSeriesFrame.from_arrays(np.zeros(400))
        split = split_chunks(frame, 100)
        log = [record(200, 2, np.full(5, 2.0)), record(210, 2, np.full(5, 2.0)),
               record(260, 2, np.full(5, 1.0)), record(280, 2, np.full(5, 1.0)),
               record(10, 0, np.full(5, 9.0)), record(60, 0, np.full(5, 9.0))]
        transitions = edge_effect_report(log, split.chunks, frame, lookback=50)
        assert len(transitions) == 1
        edge = transitions[0]
        assert (edge.chunk_id, edge.early_count, edge.late_count) == (2, 2, 2)
        assert edge.early_mse == pytest.approx(4.0)
        assert edge.degraded
        assert edge.to_dict()['degraded'] is True

    def test_relevance(self):
        log = [record(10, 2, np.zeros(1), model_ids=(0, 1), weights=[0.5, 0.5]),
               record(20, 3, np.zeros(1), model_ids=(0, 1, 2), weights=[0.1, 0.0, 0.9])]
        relevance = {r.model_id: r for r in weight_relevance(log)}
        assert relevance[0].mean_weight == pytest.approx(0.3)
        assert relevance[2].anchors_present == 1
        assert relevance[1].max_weight == pytest.approx(0.5)


class TestLossOracle:
    def test_random_frames_match_enumeration(self, rng):
        for _ in range(20):
            n = int(rng.integers(30, 120))
            h = int(rng.integers(1, 8))
            s = int(rng.integers(1, 6))
            f = int(rng.integers(0, n - h - 1))
            e = int(rng.integers(f + h + 1, n + 1))
            y = rng.normal(size=n)
            cfg = LossConfig(h=h, s=s, f=f, e=e)
            forecasts = {int(a): rng.normal(size=h) for a in cfg.anchors()}
            expected = strided_loss_bruteforce(y, forecasts, cfg)
            assert math.isclose(strided_loss(y, forecasts, cfg), expected, rel_tol=1e-12)
