"""
実行・掃引・計測モジュール
ReWTS とグローバルモデルを同じ設定で実行し、チャンク長・ルックバック長の掃引と計算時間の計測を行う
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from errors import InsufficientDataError, ParameterError, ReWTSError
from evaluation import ChunkReport, ComparisonReport, compare_runs, per_chunk_report
from forecasters import (ChunkModel, ElasticNetParams, LagSpec, fit_chunk_model,
                         forecast_batch)
from global_baseline import GlobalState, run_global_stream
from logger import get_logger
from rewts_engine import MIN_CHUNKS, ReWTSEngine, StreamRun
from timeseries import TimeSeriesFrame, split_chunks


SWEEP_AXES = {
    'chunk_length': 'chunk_length',
    'lookback_length': 'lookback',
}

logger = get_logger("benchmark")


@dataclass(frozen=True)
class RunSettings:
    """1回のストリーム実行に必要な設定（ワーカープロセスへ渡せる形）"""

    chunk_length: int
    lookback: int
    horizon: int
    stride: int
    h_fit: int
    lags: LagSpec = field(default_factory=LagSpec)
    params: ElasticNetParams = field(default_factory=ElasticNetParams)
    weight_fit_stride: int = 1
    refit_every: int = 1
    kind: str = 'elastic_net'
    normalization: str = 'max-amplitude'
    ridge_eps: Optional[float] = None
    qp_tol: float = 1e-9
    qp_max_iter: int = 5000
    verify_loss: bool = True

    @classmethod
    def from_config(cls, config) -> "RunSettings":
        return cls(chunk_length=int(config.chunk_length), lookback=int(config.lookback),
                   horizon=int(config.horizon), stride=int(config.stride),
                   h_fit=int(config.h_fit), lags=config.lag_spec(),
                   params=config.model_params(),
                   weight_fit_stride=int(config.weight_fit_stride),
                   refit_every=int(config.refit_every), kind=config.model_kind,
                   normalization=config.normalization, ridge_eps=config.qp_ridge_eps,
                   qp_tol=float(config.qp_tol), qp_max_iter=int(config.qp_max_iter),
                   verify_loss=config.verify_loss)

    def replace(self, **changes) -> "RunSettings":
        return dataclasses.replace(self, **changes)

    def check(self, length: int):
        """系列長に対して実行可能か確認"""
        for name in ('chunk_length', 'lookback', 'horizon', 'stride', 'h_fit'):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1", **{name: getattr(self, name)})
        if self.lookback < self.h_fit:
            raise ParameterError("lookback must be >= h_fit", lookback=self.lookback,
                                 h_fit=self.h_fit)
        if self.h_fit > self.horizon:
            raise ParameterError("h_fit must be <= horizon", h_fit=self.h_fit,
                                 horizon=self.horizon)
        if length < MIN_CHUNKS * self.chunk_length:
            raise InsufficientDataError("series shorter than two chunks", length=length,
                                        chunk_length=self.chunk_length)

    def engine(self, logger=None, use_cache: bool = True,
               model_cache: Optional[Dict[Tuple[int, int], ChunkModel]] = None,
               qp_debug_dir=None) -> ReWTSEngine:
        return ReWTSEngine(lags=self.lags, params=self.params, lookback=self.lookback,
                           h_fit=self.h_fit, weight_fit_stride=self.weight_fit_stride,
                           refit_every=self.refit_every, kind=self.kind,
                           ridge_eps=self.ridge_eps, qp_tol=self.qp_tol,
                           qp_max_iter=self.qp_max_iter, use_cache=use_cache, logger=logger,
                           qp_debug_dir=qp_debug_dir, model_cache=model_cache)


def run_rewts(frame: TimeSeriesFrame, settings: RunSettings, logger=None,
              use_cache: bool = True, model_cache=None, resume_models=None,
              qp_debug_dir=None) -> StreamRun:
    """ReWTS ストリームを実行"""
    settings.check(len(frame))
    engine = settings.engine(logger=logger, use_cache=use_cache, model_cache=model_cache,
                             qp_debug_dir=qp_debug_dir)
    return engine.run_stream(frame, settings.chunk_length, settings.horizon, settings.stride,
                             resume_models=resume_models)


def run_global(frame: TimeSeriesFrame, settings: RunSettings,
               logger=None) -> Tuple[StreamRun, GlobalState]:
    """グローバルモデルのストリームを実行"""
    settings.check(len(frame))
    return run_global_stream(frame, settings.chunk_length, settings.horizon, settings.stride,
                             settings.lags, settings.params, settings.kind, logger=logger)


def stream_reports(run: StreamRun, frame: TimeSeriesFrame, settings: RunSettings,
                   truth=None, normalization: Optional[str] = None,
                   log_to=None) -> List[ChunkReport]:
    """予測を行ったチャンク（先頭2チャンク以降）のレポート"""
    return per_chunk_report(run.records, run.split.chunks[MIN_CHUNKS:],
                            normalization or settings.normalization, frame, settings.stride,
                            truth=truth, verify=settings.verify_loss, log_to=log_to)


@dataclass
class SweepResult:
    """掃引の1点分の結果（失敗時は error に理由）"""

    axis: str
    value: int
    comparison: Optional[ComparisonReport] = None
    rewts_reports: List[ChunkReport] = field(default_factory=list)
    global_reports: List[ChunkReport] = field(default_factory=list)
    error: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_row(self) -> dict:
        row = {'axis': self.axis, 'value': self.value, 'status': 'ok' if self.ok else 'error'}
        if self.comparison is not None:
            row.update({
                'rewts_mean': self.comparison.rewts_mean,
                'global_mean': self.comparison.global_mean,
                'rewts_mean_normalized': self.comparison.rewts_mean_normalized,
                'global_mean_normalized': self.comparison.global_mean_normalized,
                'percent_difference': self.comparison.percent_difference,
                'chunks': len(self.comparison.chunk_ids),
            })
        if self.error is not None:
            row['error'] = f"{self.error['category']}: {self.error['message']}"
        return row


def _sweep_point(frame: TimeSeriesFrame, settings: RunSettings, truth, axis: str, value: int,
                 global_reports: Optional[List[ChunkReport]],
                 resume_models: Optional[List[ChunkModel]],
                 model_cache: Optional[dict]) -> SweepResult:
    """掃引の1点を実行（ワーカープロセスでも動く）"""
    try:
        if int(value) != value or value < 1:
            raise ParameterError(f"{axis} values must be positive integers", value=value)
        point = settings.replace(**{SWEEP_AXES[axis]: int(value)})
        point.check(len(frame))
        run = run_rewts(frame, point, model_cache=model_cache, resume_models=resume_models)
        rewts_reports = stream_reports(run, frame, point, truth)
        if global_reports is None:
            global_run, _ = run_global(frame, point)
            global_reports = stream_reports(global_run, frame, point, truth)
        comparison = compare_runs(rewts_reports, global_reports, point.normalization,
                                  axis={'axis': axis, 'value': int(value)})
        return SweepResult(axis=axis, value=int(value), comparison=comparison,
                           rewts_reports=rewts_reports, global_reports=global_reports)
    except ReWTSError as e:
        # 例外はプロセス境界を越えないので辞書で返す
        return SweepResult(axis=axis, value=value, error=e.to_dict())


def sweep(frame: TimeSeriesFrame, axis: str, values: Sequence[int], settings: RunSettings,
          truth=None, jobs: int = 1, log_to=None) -> List[SweepResult]:
    """
    チャンク長またはルックバック長の掃引

    各値で ReWTS を実行し、グローバルモデルと比較する。ルックバック長の掃引では
    グローバルモデルとチャンクモデルは値に依存しないので1度だけ学習する。
    実行できない値はエラーとして記録して続行する。

    Args:
        frame: 時系列フレーム
        axis: chunk_length または lookback_length
        values: 掃引する値
        settings: 固定する設定
        truth: ChunkTruth の列（正規化に使う）
        jobs: ワーカープロセス数
        log_to: ログ出力先

    Returns:
        値の順に並んだ SweepResult のリスト
    """
    out = log_to or logger
    if axis not in SWEEP_AXES:
        raise ParameterError(f"unknown sweep axis '{axis}'", axis=axis,
                             allowed=sorted(SWEEP_AXES))
    if jobs < 1:
        raise ParameterError("jobs must be >= 1", jobs=jobs)
    values = list(values)

    global_reports = None
    resume_models = None
    model_cache: Dict[Tuple[int, int], ChunkModel] = {}
    if axis == 'lookback_length':
        try:
            settings.replace(lookback=max(settings.h_fit, settings.lookback)).check(len(frame))
            global_run, _ = run_global(frame, settings)
            global_reports = stream_reports(global_run, frame, settings, truth)
            split = split_chunks(frame, settings.chunk_length)
            resume_models = [fit_chunk_model(frame, c, settings.lags, settings.params,
                                             settings.kind) for c in split.chunks]
        except ReWTSError as e:
            return [SweepResult(axis=axis, value=v, error=e.to_dict()) for v in values]

    out.info(f"Sweep over {axis}: {values} (jobs={jobs})")
    if jobs == 1:
        results = [_sweep_point(frame, settings, truth, axis, v, global_reports, resume_models,
                                model_cache) for v in values]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_point, frame, settings, truth, axis, v, global_reports,
                                   resume_models, None) for v in values]
            results = [f.result() for f in futures]

    for result in results:
        if result.ok:
            out.info(f"  {axis}={result.value}: rewts={result.comparison.rewts_mean_normalized:.4e} "
                     f"global={result.comparison.global_mean_normalized:.4e}")
        else:
            out.warning(f"  {axis}={result.value}: {result.error['message']}")
    return results


def sweep_trend(results: Sequence[SweepResult]) -> str:
    """軸に沿った ReWTS 正規化MSEの傾向（increasing / decreasing / flat / mixed）"""
    points = sorted((r.value, r.comparison.rewts_mean_normalized) for r in results if r.ok)
    if len(points) < 2:
        return 'flat'
    diffs = np.diff([p[1] for p in points])
    if np.all(diffs == 0):
        return 'flat'
    if np.all(diffs >= 0):
        return 'increasing'
    if np.all(diffs <= 0):
        return 'decreasing'
    return 'mixed'


@dataclass
class TimingSeries:
    """学習時間の累積（チャンク毎）とアンカー毎の予測時間"""

    chunk_ids: List[int]
    rewts_cumulative_train: List[float]
    global_cumulative_train: List[float]
    rewts_anchor_seconds: List[float]
    rewts_model_counts: List[int]
    global_anchor_seconds: List[float]
    anchor_chunk_ids: List[int]
    spearman_rho: float
    global_time_ratio: float

    def training_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'chunk_id': self.chunk_ids,
                             'rewts_cumulative_train_s': self.rewts_cumulative_train,
                             'global_cumulative_train_s': self.global_cumulative_train})

    def forecast_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'chunk_id': self.anchor_chunk_ids,
                             'model_count': self.rewts_model_counts,
                             'rewts_anchor_s': self.rewts_anchor_seconds,
                             'global_anchor_s': self.global_anchor_seconds})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _warm_up(frame: TimeSeriesFrame, settings: RunSettings):
    split = split_chunks(frame, settings.chunk_length)
    model = fit_chunk_model(frame, split.chunks[0], settings.lags, settings.params, settings.kind)
    anchor = split.chunks[1].start
    forecast_batch(model, frame, [anchor], settings.horizon)


def timing_bench(frame: TimeSeriesFrame, settings: RunSettings, repeats: int = 1,
                 log_to=None) -> TimingSeries:
    """
    学習時間と予測時間の計測

    逐次実行で、予測キャッシュは使わない。最初に1回分の学習・予測を捨てる。
    repeats > 1 なら同じ実行を繰り返し、チャンク毎・アンカー毎に最小の時間を使う。

    Returns:
        TimingSeries
    """
    out = log_to or logger
    if repeats < 1:
        raise ParameterError("repeats must be >= 1", repeats=repeats)
    settings.check(len(frame))
    _warm_up(frame, settings)

    rewts_train = global_train = rewts_seconds = global_seconds = None
    for _ in range(repeats):
        rewts = run_rewts(frame, settings, use_cache=False)
        global_run, _ = run_global(frame, settings)
        chunk_ids = list(range(len(rewts.split)))
        r_train = np.array([rewts.train_seconds.get(c, 0.0) for c in chunk_ids])
        g_train = np.array([global_run.train_seconds.get(c, 0.0) for c in chunk_ids])
        r_seconds = np.array([r.fit_seconds + r.forecast_seconds for r in rewts.records])
        g_seconds = np.array([r.forecast_seconds for r in global_run.records])
        if rewts_train is None:
            rewts_train, global_train = r_train, g_train
            rewts_seconds, global_seconds = r_seconds, g_seconds
        else:
            rewts_train = np.minimum(rewts_train, r_train)
            global_train = np.minimum(global_train, g_train)
            rewts_seconds = np.minimum(rewts_seconds, r_seconds)
            global_seconds = np.minimum(global_seconds, g_seconds)

    rewts_cum = np.cumsum(rewts_train)
    global_cum = np.cumsum(global_train)
    rewts_seconds = rewts_seconds.tolist()
    global_seconds = global_seconds.tolist()
    counts = [len(r.model_ids) for r in rewts.records]

    if len(set(counts)) > 1:
        rho = float(spearmanr(counts, rewts_seconds).correlation)
    else:
        rho = float('nan')
    ratio = max(global_seconds) / min(global_seconds) if global_seconds and min(global_seconds) > 0 \
        else float('nan')
    out.info(f"Timing: cumulative train rewts={rewts_cum[-1]:.3f}s global={global_cum[-1]:.3f}s "
             f"spearman={rho:.3f} global_ratio={ratio:.2f} repeats={repeats}")
    return TimingSeries(chunk_ids=chunk_ids, rewts_cumulative_train=rewts_cum.tolist(),
                        global_cumulative_train=global_cum.tolist(),
                        rewts_anchor_seconds=rewts_seconds, rewts_model_counts=counts,
                        global_anchor_seconds=global_seconds,
                        anchor_chunk_ids=[r.chunk_id for r in rewts.records],
                        spearman_rho=rho, global_time_ratio=ratio)
