"""
グローバルモデル（比較用ベースライン）
チャンク境界毎に t=0 からの全履歴で1つのモデルを作り直す
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from errors import InsufficientDataError, ParameterError
from forecasters import (GLOBAL_MODEL_ID, ChunkModel, ElasticNetParams, LagSpec, forecast_batch,
                         fit_range_model)
from logger import get_logger
from rewts_engine import MIN_CHUNKS, StreamLogRecord, StreamRun, schedule_anchors
from timeseries import TimeSeriesFrame, fit_scaler_range, split_chunks


@dataclass
class GlobalState:
    """
    グローバルモデルの状態

    retrain_count は初回学習後の再学習回数、fit_count は初回を含む学習回数。
    """

    model: ChunkModel
    trained_through: int
    chunk_length: int
    retrain_count: int = 0
    fit_seconds: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.trained_through % self.chunk_length != 0:
            raise ParameterError("trained_through must be a chunk boundary",
                                 trained_through=self.trained_through,
                                 chunk_length=self.chunk_length)

    @property
    def scaler(self):
        return self.model.scaler

    @property
    def fit_count(self) -> int:
        return self.retrain_count + 1


def fit_global(frame: TimeSeriesFrame, end: int, lags: LagSpec, params: ElasticNetParams,
               kind: str = 'elastic_net') -> ChunkModel:
    """[0, end) の全履歴でスケーラーとモデルを学習"""
    scaler = fit_scaler_range(frame, 0, end)
    return fit_range_model(frame, 0, end, lags, params, GLOBAL_MODEL_ID, kind, scaler=scaler)


def _global_records(model: ChunkModel, frame: TimeSeriesFrame,
                    anchors: Sequence[Tuple[int, int]], horizon: int) -> List[StreamLogRecord]:
    records = []
    for anchor, chunk_id in anchors:
        started = time.perf_counter()
        forecast = forecast_batch(model, frame, [anchor], horizon)[0]
        elapsed = time.perf_counter() - started
        records.append(StreamLogRecord(anchor=int(anchor), chunk_id=int(chunk_id),
                                       method="global", model_ids=[GLOBAL_MODEL_ID],
                                       forecast=forecast, max_index_touched=int(anchor) - 1,
                                       forecast_seconds=elapsed))
    return records


def run_global_stream(frame: TimeSeriesFrame, l_c: int, h: int, s: int, lags: LagSpec,
                      params: ElasticNetParams, kind: str = 'elastic_net',
                      logger=None) -> Tuple[StreamRun, GlobalState]:
    """
    グローバルモデルのストリーム実行

    最初の2チャンク [0, 2·l_c) で学習し、ReWTS と同じアンカーで予測する。
    チャンクが埋まる毎に全履歴で学習し直す。

    Args:
        frame: 時系列フレーム
        l_c: チャンク長
        h: 予測ホライズン
        s: 予測アンカー間隔
        lags: ラグ指定
        params: Elastic Net パラメータ
        kind: モデル種別
        logger: EngineLogger または logging.Logger

    Returns:
        (StreamRun, GlobalState)
    """
    logger = logger or get_logger("global")
    split = split_chunks(frame, l_c)
    if len(split) < MIN_CHUNKS:
        raise InsufficientDataError("stream needs at least two complete chunks",
                                    length=len(frame), chunk_length=l_c)

    through = MIN_CHUNKS * l_c
    model = fit_global(frame, through, lags, params, kind)
    state = GlobalState(model=model, trained_through=through, chunk_length=l_c,
                        fit_seconds=[model.train_seconds])
    logger.info(f"Global stream: initial fit on [0, {through}) "
                f"params={model.param_count}")

    # 学習時間は学習のきっかけになったチャンク番号で記録する
    train_seconds: Dict[int, float] = {MIN_CHUNKS - 1: model.train_seconds}
    schedule = schedule_anchors(split, h, s)
    records: List[StreamLogRecord] = []
    for chunk in split.chunks[MIN_CHUNKS:]:
        anchors = [(a, c) for a, c in schedule if c == chunk.chunk_id]
        records.extend(_global_records(state.model, frame, anchors, h))
        # チャンク完了: 全履歴で作り直す
        model = fit_global(frame, chunk.end, lags, params, kind)
        if model.param_count != state.model.param_count:
            raise ParameterError("global model parameter count changed",
                                 before=state.model.param_count, after=model.param_count)
        state.model = model
        state.trained_through = chunk.end
        state.fit_seconds.append(model.train_seconds)
        train_seconds[chunk.chunk_id] = model.train_seconds
        state.retrain_count += 1
        logger.debug(f"Global refit on [0, {chunk.end}) in {model.train_seconds * 1e3:.1f}ms")

    logger.info(f"Global stream finished: {len(records)} forecasts, "
                f"retrain_count={state.retrain_count}")

    run = StreamRun(records=records, models=[state.model], split=split,
                    train_seconds=train_seconds, method="global")
    return run, state


def run_fixed_global(frame: TimeSeriesFrame, model: ChunkModel,
                     anchors: Sequence[Tuple[int, int]], h: int) -> List[StreamLogRecord]:
    """学習済みグローバルモデルを与えられたアンカー列で評価"""
    return _global_records(model, frame, anchors, h)
