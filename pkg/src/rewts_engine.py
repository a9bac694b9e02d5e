"""
ReWTS ストリーミングエンジン
ルックバック区間の予測行列から重みを求め、チャンク毎にモデルを追加しながら予測する
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import InsufficientDataError, ParameterError, QPConvergenceError
from forecasters import (ChunkModel, ElasticNetParams, LagSpec, fit_chunk_model,
                         forecast_batch, forecast_from_arrays)
from logger import get_logger
from simplex_qp import (SimplexQP, WeightVector, assemble_qp, dump_qp_debug, objective,
                        solve_simplex_qp)
from timeseries import ChunkSplit, TimeSeriesFrame, split_chunks


MIN_CHUNKS = 2


@dataclass(frozen=True, eq=False)
class ForecastMatrix:
    """アンカー共通の予測行列 (h, m)。列 j はモデル j の予測"""

    anchor: int
    values: np.ndarray
    model_ids: Tuple[int, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ParameterError("forecast matrix has non-finite entries", anchor=self.anchor)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)


@dataclass
class EnsembleState:
    """アンサンブルの状態（学習済みチャンクモデルの列と重み学習の設定）"""

    models: List[ChunkModel]
    lookback: int
    h_fit: int
    weight_fit_stride: int = 1
    last_weights: Optional[WeightVector] = None
    weights_anchor: Optional[int] = None

    def __post_init__(self):
        if self.h_fit < 1:
            raise ParameterError("h_fit must be >= 1", h_fit=self.h_fit)
        if self.lookback < self.h_fit:
            raise ParameterError("lookback must be >= h_fit", lookback=self.lookback,
                                 h_fit=self.h_fit)
        if self.weight_fit_stride < 1:
            raise ParameterError("weight_fit_stride must be >= 1",
                                 weight_fit_stride=self.weight_fit_stride)
        ids = [m.chunk_id for m in self.models]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ParameterError("chunk ids must be strictly increasing", chunk_ids=ids)

    @property
    def model_ids(self) -> Tuple[int, ...]:
        return tuple(m.chunk_id for m in self.models)

    def add_model(self, model: ChunkModel):
        if self.models and model.chunk_id <= self.models[-1].chunk_id:
            raise ParameterError("chunk ids must be strictly increasing",
                                 last=self.models[-1].chunk_id, new=model.chunk_id)
        self.models.append(model)
        self.last_weights = None
        self.weights_anchor = None


@dataclass
class StreamLogRecord:
    """1アンカー分の予測ログ"""

    anchor: int
    chunk_id: int
    method: str
    model_ids: List[int]
    forecast: np.ndarray
    weights: Optional[np.ndarray] = None
    # (h, m) のモデル予測。recursive では各ブロックの予測行列を縦に積んだもの
    matrix: Optional[np.ndarray] = None
    contributions: Optional[np.ndarray] = None
    mode: str = "direct"
    lookback_start: Optional[int] = None
    lookback_end: Optional[int] = None
    n_fit_anchors: int = 0
    max_index_touched: int = -1
    qp_iterations: int = 0
    kkt_residual: float = 0.0
    qp_converged: bool = True
    fit_seconds: float = 0.0
    forecast_seconds: float = 0.0

    @property
    def horizon(self) -> int:
        return int(self.forecast.shape[0])

    def to_dict(self, include_timing: bool = True) -> dict:
        data = {
            'anchor': int(self.anchor),
            'chunk_id': int(self.chunk_id),
            'method': self.method,
            'mode': self.mode,
            'model_ids': [int(i) for i in self.model_ids],
            'forecast': self.forecast.tolist(),
        }
        if self.weights is not None:
            data.update({
                'weights': self.weights.tolist(),
                'contributions': None if self.contributions is None else self.contributions.tolist(),
                'lookback_start': self.lookback_start,
                'lookback_end': self.lookback_end,
                'n_fit_anchors': self.n_fit_anchors,
                'qp_iterations': self.qp_iterations,
                'kkt_residual': self.kkt_residual,
                'qp_converged': self.qp_converged,
            })
        if self.matrix is not None:
            data['matrix'] = self.matrix.tolist()
        if include_timing:
            data['fit_seconds'] = self.fit_seconds
            data['forecast_seconds'] = self.forecast_seconds
        return data


@dataclass
class StreamRun:
    """ストリーム実行の結果"""

    records: List[StreamLogRecord]
    models: List[ChunkModel]
    split: ChunkSplit
    train_seconds: Dict[int, float] = field(default_factory=dict)
    method: str = "rewts"


def schedule_anchors(split: ChunkSplit, horizon: int, stride: int,
                     first_chunk: int = MIN_CHUNKS) -> List[Tuple[int, int]]:
    """
    評価アンカーの時刻表（ReWTS とグローバルモデルで共通）

    チャンク first_chunk 以降の各完全チャンク内で、start から stride 毎に
    a + horizon ≤ end となるアンカー a を並べる。

    Returns:
        (アンカー, チャンク番号) のリスト
    """
    if stride < 1 or horizon < 1:
        raise ParameterError("stride and horizon must be >= 1", stride=stride, horizon=horizon)
    anchors = []
    for chunk in split.chunks[first_chunk:]:
        for a in range(chunk.start, chunk.end - horizon + 1, stride):
            anchors.append((a, chunk.chunk_id))
    return anchors


def contributions(qp: SimplexQP, w: np.ndarray) -> np.ndarray:
    """目的関数へのモデル別寄与 w_j(½(Qw)_j − c_j)（総和は目的関数値）"""
    return w * (0.5 * (qp.Q @ w) - qp.c)


class ReWTSEngine:
    """ReWTS アンサンブルの重み学習・予測・ストリーム駆動"""

    def __init__(self,
                 lags: LagSpec,
                 params: ElasticNetParams,
                 lookback: int,
                 h_fit: int,
                 weight_fit_stride: int = 1,
                 refit_every: int = 1,
                 kind: str = 'elastic_net',
                 ridge_eps: Optional[float] = None,
                 qp_tol: float = 1e-9,
                 qp_max_iter: int = 5000,
                 use_cache: bool = True,
                 logger=None,
                 qp_debug_dir: Optional[Path] = None,
                 model_cache: Optional[Dict[Tuple[int, int], ChunkModel]] = None):
        """
        初期化

        Args:
            lags: ラグ指定
            params: Elastic Net パラメータ
            lookback: ルックバック長 l_b
            h_fit: 重み学習に使うホライズン
            weight_fit_stride: ルックバック内のアンカー間隔
            refit_every: N アンカー毎に重みを再学習（1 なら毎回）
            kind: モデル種別
            ridge_eps: QP の対角正則化（None なら trace 基準の既定値）
            qp_tol: KKT 許容誤差
            qp_max_iter: QP の最大反復回数
            use_cache: (チャンク, アンカー, h) 単位の予測キャッシュを使う
            logger: EngineLogger または logging.Logger
            qp_debug_dir: 指定時はアンカー毎の QP をJSON出力
            model_cache: (start, end) → 学習済みチャンクモデル（掃引で共有する）
        """
        if refit_every < 1:
            raise ParameterError("refit_every must be >= 1", refit_every=refit_every)
        self.lags = lags
        self.params = params
        self.lookback = int(lookback)
        self.h_fit = int(h_fit)
        self.weight_fit_stride = int(weight_fit_stride)
        self.refit_every = int(refit_every)
        self.kind = kind
        self.ridge_eps = ridge_eps
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        self.use_cache = use_cache
        self.logger = logger or get_logger("engine")
        self.qp_debug_dir = Path(qp_debug_dir) if qp_debug_dir else None
        self.model_cache = model_cache
        self._cache: Dict[Tuple[int, int, int], np.ndarray] = {}
        self._cache_frame: Optional[TimeSeriesFrame] = None
        self.last_qp: Optional[SimplexQP] = None
        self.last_fit_window: Tuple[int, int, int] = (0, 0, 0)

    @classmethod
    def from_config(cls, config, logger=None, h_fit: Optional[int] = None) -> "ReWTSEngine":
        """Config から構築"""
        debug_dir = Path(config.output_dir) / "qp_debug" if config.qp_debug else None
        return cls(lags=config.lag_spec(),
                   params=config.model_params(),
                   lookback=config.lookback,
                   h_fit=config.h_fit if h_fit is None else h_fit,
                   weight_fit_stride=config.weight_fit_stride,
                   refit_every=config.refit_every,
                   kind=config.model_kind,
                   ridge_eps=config.qp_ridge_eps,
                   qp_tol=config.qp_tol,
                   qp_max_iter=config.qp_max_iter,
                   use_cache=config.forecast_cache,
                   logger=logger,
                   qp_debug_dir=debug_dir)

    def new_state(self, models: Sequence[ChunkModel]) -> EnsembleState:
        return EnsembleState(models=list(models), lookback=self.lookback, h_fit=self.h_fit,
                             weight_fit_stride=self.weight_fit_stride)

    def clear_cache(self):
        self._cache.clear()
        self._cache_frame = None

    def _model_forecasts(self, model: ChunkModel, frame: TimeSeriesFrame,
                         anchors: np.ndarray, h: int) -> np.ndarray:
        """モデル1つの (アンカー数, h) 予測（キャッシュ経由）"""
        if not self.use_cache:
            return forecast_batch(model, frame, anchors, h)
        if self._cache_frame is not frame:
            self._cache.clear()
            self._cache_frame = frame
        missing = [int(a) for a in anchors if (model.chunk_id, int(a), h) not in self._cache]
        if missing:
            preds = forecast_batch(model, frame, missing, h)
            for a, row in zip(missing, preds):
                self._cache[(model.chunk_id, a, h)] = row
        return np.stack([self._cache[(model.chunk_id, int(a), h)] for a in anchors])

    def forecast_matrix(self, state: EnsembleState, frame: TimeSeriesFrame, anchor: int,
                        h: int) -> ForecastMatrix:
        """アンカーでの全モデルの h ステップ予測"""
        columns = [self._model_forecasts(m, frame, np.array([anchor]), h)[0] for m in state.models]
        return ForecastMatrix(anchor=int(anchor), values=np.column_stack(columns),
                              model_ids=state.model_ids)

    def lookback_anchors(self, state: EnsembleState, now: int) -> np.ndarray:
        """
        重み学習用アンカー k = now−l_b, …, now−h_fit

        t=0 をまたぐ場合は利用可能な部分に切り詰める。切り詰め後に
        min(h_fit+1, 本来の数) 個未満しか残らなければ InsufficientDataError。
        """
        full = np.arange(now - state.lookback, now - state.h_fit + 1, state.weight_fit_stride)
        earliest = max(m.history_needed for m in state.models)
        anchors = full[full >= earliest]
        required = min(state.h_fit + 1, full.shape[0])
        if anchors.shape[0] < required or anchors.shape[0] == 0:
            raise InsufficientDataError("not enough look-back anchors for weight fitting",
                                        now=now, available=int(anchors.shape[0]),
                                        required=int(required), earliest=int(earliest))
        return anchors

    def has_lookback(self, state: EnsembleState, now: int) -> bool:
        """now で重み学習に足りるルックバックがあるか"""
        try:
            self.lookback_anchors(state, now)
        except InsufficientDataError:
            return False
        return True

    def fit_weights(self, state: EnsembleState, frame: TimeSeriesFrame, now: int,
                    causal: bool = True) -> WeightVector:
        """
        時刻 now の重みを学習

        ルックバック内の各アンカーで全モデルの h_fit ステップ予測を作り、
        SimplexQP を組み立てて解く。QP が収束しない場合は警告して最良の反復解を使う。

        Args:
            state: アンサンブル状態（last_weights を更新する）
            frame: 時系列フレーム
            now: 現在時刻 t_n
            causal: True なら now より後に学習を終えるモデルを拒否する

        Returns:
            WeightVector
        """
        if not state.models:
            raise ParameterError("ensemble has no models")
        if causal:
            late = [m.chunk_id for m in state.models if m.end > now]
            if late:
                raise ParameterError("models trained on data after now", now=now, chunk_ids=late)
        if now > len(frame):
            raise InsufficientDataError("now is beyond the end of the frame", now=now,
                                        length=len(frame))

        if len(state.models) == 1:
            weights = WeightVector(w=np.ones(1), method="trivial")
            self.last_qp = None
            self.last_fit_window = (now - state.lookback, now - state.h_fit, 0)
            state.last_weights, state.weights_anchor = weights, now
            return weights

        anchors = self.lookback_anchors(state, now)
        h = state.h_fit
        per_model = [self._model_forecasts(m, frame, anchors, h) for m in state.models]
        mats = np.stack(per_model, axis=2)
        targets = frame.target[anchors[:, None] + np.arange(h)]
        qp = assemble_qp(list(mats), list(targets), ridge_eps=self.ridge_eps)
        try:
            weights = solve_simplex_qp(qp, tol=self.qp_tol, max_iter=self.qp_max_iter)
        except QPConvergenceError as e:
            if hasattr(self.logger, 'log_convergence_alert'):
                self.logger.log_convergence_alert(now, str(e))
            else:
                self.logger.warning(f"QP did not converge at anchor {now}: {e}")
            weights = WeightVector(w=e.weights, iterations=e.diagnostics['iterations'],
                                   kkt_residual=e.diagnostics['kkt_residual'],
                                   objective=objective(qp, e.weights), converged=False,
                                   method="best-iterate", diagnostics=e.diagnostics)

        if self.qp_debug_dir is not None:
            dump_qp_debug(self.qp_debug_dir / f"qp_{now:07d}.json", qp, weights)
        self.last_qp = qp
        self.last_fit_window = (int(anchors[0]), int(anchors[-1]), int(anchors.shape[0]))
        state.last_weights, state.weights_anchor = weights, now
        return weights

    def ensemble_forecast(self, state: EnsembleState, frame: TimeSeriesFrame, now: int,
                          h: int) -> np.ndarray:
        """M_h(X_{:now}, y_{:now}) · w"""
        forecast, _ = self._direct(state, frame, now, h)
        return forecast

    def _direct(self, state: EnsembleState, frame: TimeSeriesFrame, now: int,
                h: int) -> Tuple[np.ndarray, ForecastMatrix]:
        if state.last_weights is None:
            raise ParameterError("weights have not been fitted", now=now)
        matrix = self.forecast_matrix(state, frame, now, h)
        return matrix.values @ state.last_weights.w, matrix

    def ensemble_forecast_recursive(self, state: EnsembleState, frame: TimeSeriesFrame,
                                    now: int, h: int) -> np.ndarray:
        """
        h_fit ステップ毎に重み付き予測を履歴へ戻しながら h ステップ先まで予測

        h_fit = 1 のとき1ステップ重みを h 回再適用する形になる。
        """
        forecast, _ = self._recursive(state, frame, now, h)
        return forecast

    def _recursive(self, state: EnsembleState, frame: TimeSeriesFrame, now: int,
                   h: int) -> Tuple[np.ndarray, np.ndarray]:
        # 各ブロックのモデル予測を縦に積んだ (h, m) 行列も返す。予測 = 行列 @ w
        if state.last_weights is None:
            raise ParameterError("weights have not been fitted", now=now)
        w = state.last_weights.w
        block = state.h_fit
        target = np.array(frame.target, dtype=float)
        covariates = frame.covariates
        out = np.empty(h)
        stacked = np.empty((h, len(state.models)))
        done = 0
        while done < h:
            steps = min(block, h - done)
            anchor = now + done
            if anchor > target.shape[0]:
                target = np.concatenate([target, np.zeros(anchor - target.shape[0])])
            preds = np.column_stack([
                forecast_from_arrays(m, target, covariates, frame.future_known, [anchor], steps)[0]
                for m in state.models
            ])
            combined = preds @ w
            out[done:done + steps] = combined
            stacked[done:done + steps] = preds
            # 結合予測を履歴として書き戻す
            end = anchor + steps
            if end > target.shape[0]:
                target = np.concatenate([target, np.zeros(end - target.shape[0])])
            target[anchor:end] = combined
            done += steps
        return out, stacked

    def _forecast_record(self, state: EnsembleState, frame: TimeSeriesFrame, anchor: int,
                         chunk_id: int, h: int, fit_seconds: float,
                         refit: bool) -> StreamLogRecord:
        started = time.perf_counter()
        weights = state.last_weights
        if state.h_fit >= h:
            forecast, matrix = self._direct(state, frame, anchor, h)
            values, mode = matrix.values, "direct"
        else:
            forecast, values = self._recursive(state, frame, anchor, h)
            mode = "recursive"
        forecast_seconds = time.perf_counter() - started

        w = weights.w
        qp = self.last_qp if refit else None
        start, end, count = self.last_fit_window
        return StreamLogRecord(
            anchor=int(anchor), chunk_id=int(chunk_id), method="rewts",
            model_ids=list(state.model_ids), forecast=forecast,
            weights=np.array(w), matrix=None if values is None else np.array(values),
            contributions=None if qp is None else contributions(qp, w),
            mode=mode, lookback_start=start, lookback_end=end, n_fit_anchors=count,
            max_index_touched=end + state.h_fit - 1 if count else anchor - 1,
            qp_iterations=weights.iterations, kkt_residual=weights.kkt_residual,
            qp_converged=weights.converged, fit_seconds=fit_seconds,
            forecast_seconds=forecast_seconds)

    def run_stream(self, frame: TimeSeriesFrame, chunk_length: int, horizon: int, stride: int,
                   resume_models: Optional[Sequence[ChunkModel]] = None) -> StreamRun:
        """
        ReWTS のストリーム実行

        最初の2チャンクでモデルを作り、以降は各チャンク内のアンカーで重みを学習して予測し、
        チャンクが埋まるたびに新しいチャンクモデルを追加する。

        Args:
            frame: 時系列フレーム
            chunk_length: チャンク長 l_c
            horizon: 予測ホライズン h
            stride: 予測アンカー間隔 s
            resume_models: 保存済みのチャンクモデル（先頭から連続した chunk_id）

        Returns:
            StreamRun
        """
        split = split_chunks(frame, chunk_length)
        if len(split) < MIN_CHUNKS:
            raise InsufficientDataError("stream needs at least two complete chunks",
                                        length=len(frame), chunk_length=chunk_length)
        if self.h_fit > horizon:
            raise ParameterError("h_fit must be <= horizon", h_fit=self.h_fit, horizon=horizon)
        self.clear_cache()

        resumed = {m.chunk_id: m for m in (resume_models or [])}
        train_seconds: Dict[int, float] = {}

        def model_for(chunk) -> ChunkModel:
            if chunk.chunk_id in resumed:
                return resumed[chunk.chunk_id]
            key = (chunk.start, chunk.end)
            if self.model_cache is not None and key in self.model_cache:
                model = self.model_cache[key]
            else:
                model = fit_chunk_model(frame, chunk, self.lags, self.params, self.kind)
                if self.model_cache is not None:
                    self.model_cache[key] = model
            train_seconds[chunk.chunk_id] = model.train_seconds
            return model

        state = self.new_state([model_for(c) for c in split.chunks[:MIN_CHUNKS]])
        self.logger.info(f"ReWTS stream: {len(split)} chunks of {chunk_length}, "
                         f"l_b={self.lookback}, h={horizon}, h_fit={self.h_fit}, s={stride}")

        records: List[StreamLogRecord] = []
        schedule = schedule_anchors(split, horizon, stride)
        by_chunk: Dict[int, List[int]] = {}
        for anchor, chunk_id in schedule:
            by_chunk.setdefault(chunk_id, []).append(anchor)

        counter = 0
        for chunk in split.chunks[MIN_CHUNKS:]:
            for anchor in by_chunk.get(chunk.chunk_id, []):
                refit = state.last_weights is None or counter % self.refit_every == 0
                fit_seconds = 0.0
                if refit:
                    started = time.perf_counter()
                    self.fit_weights(state, frame, anchor, causal=True)
                    fit_seconds = time.perf_counter() - started
                record = self._forecast_record(state, frame, anchor, chunk.chunk_id, horizon,
                                               fit_seconds, refit)
                if record.max_index_touched >= anchor:
                    raise ParameterError("weight fitting touched data after the anchor",
                                         anchor=anchor, touched=record.max_index_touched)
                records.append(record)
                if hasattr(self.logger, 'log_stream_record'):
                    self.logger.log_stream_record(record)
                counter += 1
            # チャンク完了: 新しいモデルを追加
            state.add_model(model_for(chunk))

        self.logger.info(f"ReWTS stream finished: {len(records)} forecasts, "
                         f"{len(state.models)} models")
        return StreamRun(records=records, models=list(state.models), split=split,
                         train_seconds=train_seconds, method="rewts")

    def run_fixed_ensemble(self, frame: TimeSeriesFrame, models: Sequence[ChunkModel],
                           anchors: Sequence[Tuple[int, int]], horizon: int) -> List[StreamLogRecord]:
        """
        学習済みアンサンブルを与えられたアンカー列で評価

        モデル集合は固定で、学習区間とアンカーの前後関係は問わない。
        ルックバックが足りないアンカーは飛ばす。

        Args:
            frame: 時系列フレーム
            models: チャンクモデル
            anchors: (アンカー, チャンク番号) のリスト
            horizon: 予測ホライズン

        Returns:
            StreamLogRecord のリスト
        """
        if self.h_fit > horizon:
            raise ParameterError("h_fit must be <= horizon", h_fit=self.h_fit, horizon=horizon)
        self.clear_cache()
        state = self.new_state(models)
        records = []
        skipped = 0
        for counter, (anchor, chunk_id) in enumerate(anchors):
            refit = state.last_weights is None or counter % self.refit_every == 0
            fit_seconds = 0.0
            if refit:
                started = time.perf_counter()
                try:
                    self.fit_weights(state, frame, anchor, causal=False)
                except InsufficientDataError:
                    skipped += 1
                    state.last_weights = None
                    continue
                fit_seconds = time.perf_counter() - started
            records.append(self._forecast_record(state, frame, anchor, chunk_id, horizon,
                                                 fit_seconds, refit))
        if skipped:
            self.logger.info(f"Skipped {skipped} anchors without enough look-back data")
        return records


def fit_weights(state: EnsembleState, frame: TimeSeriesFrame, now: int,
                ridge_eps: Optional[float] = None, tol: float = 1e-9,
                max_iter: int = 5000) -> WeightVector:
    """状態のモデルで時刻 now の重みを学習（エンジンを作らずに使う簡易版）"""
    engine = ReWTSEngine(lags=state.models[0].lags if state.models else LagSpec(),
                         params=ElasticNetParams(), lookback=state.lookback, h_fit=state.h_fit,
                         weight_fit_stride=state.weight_fit_stride, ridge_eps=ridge_eps,
                         qp_tol=tol, qp_max_iter=max_iter, use_cache=False)
    return engine.fit_weights(state, frame, now)


def ensemble_forecast(state: EnsembleState, frame: TimeSeriesFrame, now: int, h: int) -> np.ndarray:
    """直近に学習した重みでの h ステップ予測"""
    engine = ReWTSEngine(lags=LagSpec(), params=ElasticNetParams(), lookback=state.lookback,
                         h_fit=state.h_fit, use_cache=False)
    return engine.ensemble_forecast(state, frame, now, h)


def ensemble_forecast_onestep_variant(state: EnsembleState, frame: TimeSeriesFrame, now: int,
                                      h: int) -> np.ndarray:
    """1ステップ重み（h_fit=1）を h 回再帰的に適用した予測"""
    if state.h_fit != 1:
        raise ParameterError("one-step variant needs weights fitted with h_fit = 1",
                             h_fit=state.h_fit)
    engine = ReWTSEngine(lags=LagSpec(), params=ElasticNetParams(), lookback=state.lookback,
                         h_fit=1, use_cache=False)
    return engine.ensemble_forecast_recursive(state, frame, now, h)


def run_stream(frame: TimeSeriesFrame, l_c: int, l_b: int, h: int, s: int, lags: LagSpec,
               params: ElasticNetParams, h_fit: Optional[int] = None,
               **engine_options) -> List[StreamLogRecord]:
    """ReWTS ストリーム実行のログだけを返す簡易版"""
    engine = ReWTSEngine(lags=lags, params=params, lookback=l_b,
                         h_fit=h if h_fit is None else h_fit, **engine_options)
    return engine.run_stream(frame, l_c, h, s).records
