"""
評価モジュール
ストライド付き多段予測損失、チャンク別レポート、手法比較、重みの分析
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from errors import ComparisonError, CoverageError, NumericError, ParameterError, ShapeError
from logger import get_logger
from timeseries import ChunkIndex, ChunkSplit, TimeSeriesFrame


NORMALIZATIONS = ('none', 'per-chunk-amplitude', 'max-amplitude')

logger = get_logger("evaluation")


@dataclass(frozen=True)
class LossConfig:
    """
    ストライド付き損失の窓

    アンカー f, f+s, …, f+ψs（ψ = ⌊(e−h−f)/s⌋）から h ステップ先を評価する。
    """

    h: int
    s: int
    f: int
    e: int
    normalization: str = 'none'

    def __post_init__(self):
        if self.h < 1:
            raise ParameterError("h must be >= 1", h=self.h)
        if self.s < 1:
            raise ParameterError("s must be >= 1", s=self.s)
        if self.e - self.f <= self.h:
            raise ParameterError("window must be longer than the horizon", f=self.f, e=self.e,
                                 h=self.h)
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"unknown normalization '{self.normalization}'",
                                 normalization=self.normalization)

    @property
    def psi(self) -> int:
        return (self.e - self.h - self.f) // self.s

    def anchors(self) -> np.ndarray:
        return self.f + self.s * np.arange(self.psi + 1)


@dataclass(frozen=True)
class LossDetail:
    """strided_loss の監査用の内訳"""

    anchors: List[int]
    losses: List[float]
    psi: int
    mean: float
    # 1/ψ をそのまま掛けた値（ψ = 0 では定義されない）
    literal: Optional[float]


@dataclass
class ChunkReport:
    """チャンク別の損失"""

    chunk_id: int
    mse: float
    normalized_mse: float
    anchor_count: int
    anchors: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    amplitude: float = 1.0
    window_start: int = 0
    window_end: int = 0
    literal_mse: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ComparisonReport:
    """ReWTS とグローバルモデルのチャンク別比較"""

    chunk_ids: List[int]
    rewts_mse: List[float]
    global_mse: List[float]
    rewts_normalized: List[float]
    global_normalized: List[float]
    rewts_mean: float
    global_mean: float
    rewts_mean_normalized: float
    global_mean_normalized: float
    percent_difference: float
    symmetric_percent_difference: float
    normalization: str = 'none'
    axis: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EdgeTransition:
    """チャンク境界直後 l_b ティックとそれ以降の予測誤差"""

    chunk_id: int
    early_mse: float
    late_mse: float
    early_count: int
    late_count: int

    @property
    def degraded(self) -> bool:
        return self.early_mse >= self.late_mse

    def to_dict(self) -> dict:
        data = asdict(self)
        data['degraded'] = self.degraded
        return data


@dataclass(frozen=True)
class ModelRelevance:
    model_id: int
    mean_weight: float
    max_weight: float
    anchors_present: int


def window_mse(y: np.ndarray, yhat: np.ndarray) -> float:
    """(1/h)Σ(y_i − ŷ_i)²"""
    y = np.asarray(y, dtype=float).reshape(-1)
    yhat = np.asarray(yhat, dtype=float).reshape(-1)
    if y.shape != yhat.shape:
        raise ShapeError("target and forecast lengths differ", y=y.shape[0], yhat=yhat.shape[0])
    if y.shape[0] < 1:
        raise ShapeError("window must have at least one value")
    diff = y - yhat
    return float(np.mean(diff * diff))


def _lookup(forecasts: Mapping[int, np.ndarray], anchor: int, h: int) -> np.ndarray:
    if anchor not in forecasts:
        raise CoverageError("missing forecast for anchor", anchor=int(anchor))
    forecast = np.asarray(forecasts[anchor], dtype=float).reshape(-1)
    if forecast.shape[0] < h:
        raise ShapeError("forecast shorter than horizon", anchor=int(anchor),
                         length=forecast.shape[0], h=h)
    return forecast[:h]


def strided_loss_detail(frame: Union[TimeSeriesFrame, np.ndarray], forecasts: Mapping[int, np.ndarray],
                        cfg: LossConfig) -> LossDetail:
    """
    ストライド付き損失を計算し、アンカー毎の損失と両方の割り方の値を返す

    Args:
        frame: 時系列フレーム（または目的変数の配列）
        forecasts: アンカー → h ステップ予測
        cfg: 損失の窓

    Returns:
        LossDetail（mean は ψ+1 個の平均、literal は 1/ψ 倍）
    """
    y = frame.target if isinstance(frame, TimeSeriesFrame) else np.asarray(frame, dtype=float)
    if cfg.f < 0 or cfg.e > y.shape[0]:
        raise CoverageError("loss window outside the series", f=cfg.f, e=cfg.e,
                            length=y.shape[0])
    anchors = cfg.anchors()
    losses = [window_mse(y[a:a + cfg.h], _lookup(forecasts, int(a), cfg.h)) for a in anchors]
    total = float(np.sum(losses))
    psi = cfg.psi
    return LossDetail(anchors=[int(a) for a in anchors], losses=losses, psi=psi,
                      mean=total / (psi + 1), literal=total / psi if psi > 0 else None)


def strided_loss(frame: Union[TimeSeriesFrame, np.ndarray], forecasts: Mapping[int, np.ndarray],
                 cfg: LossConfig) -> float:
    """ψ+1 個のアンカーの窓MSEの算術平均"""
    return strided_loss_detail(frame, forecasts, cfg).mean


def strided_loss_bruteforce(frame: Union[TimeSeriesFrame, np.ndarray],
                            forecasts: Mapping[int, np.ndarray], cfg: LossConfig) -> float:
    """窓の全時刻を走査して数え直す検算用の実装"""
    y = frame.target if isinstance(frame, TimeSeriesFrame) else np.asarray(frame, dtype=float)
    total = 0.0
    count = 0
    for t in range(cfg.f, cfg.e):
        if (t - cfg.f) % cfg.s != 0 or t + cfg.h > cfg.e:
            continue
        if t not in forecasts:
            raise CoverageError("missing forecast for anchor", anchor=t)
        forecast = forecasts[t]
        squared = 0.0
        for i in range(cfg.h):
            squared += (float(y[t + i]) - float(forecast[i])) ** 2
        total += squared / cfg.h
        count += 1
    return total / count


def percent_difference(rewts: float, global_: float) -> float:
    """100·(global − rewts)/global（ReWTS が良いほど正）"""
    if rewts == global_:
        return 0.0
    if global_ == 0:
        raise ComparisonError("global mean is zero; percent difference undefined",
                              rewts=rewts, global_=global_)
    return 100.0 * (global_ - rewts) / global_


def symmetric_percent_difference(rewts: float, global_: float) -> float:
    """200·(global − rewts)/(global + rewts)"""
    if rewts == global_:
        return 0.0
    return 200.0 * (global_ - rewts) / (global_ + rewts)


def chunk_amplitudes(frame: TimeSeriesFrame, chunks: Sequence[ChunkIndex],
                     truth=None) -> Dict[int, float]:
    """
    チャンク毎の振幅

    真のパラメータがあればその振幅、無ければ √2·標準偏差（正弦波なら振幅に一致）
    """
    known = {int(t.chunk_id): float(t.amplitude) for t in (truth or [])}
    amplitudes = {}
    for chunk in chunks:
        if chunk.chunk_id in known:
            amplitudes[chunk.chunk_id] = known[chunk.chunk_id]
        else:
            amplitudes[chunk.chunk_id] = math.sqrt(2.0) * float(
                np.std(frame.target[chunk.start:chunk.end]))
    return amplitudes


def per_chunk_report(log, chunks: Union[ChunkSplit, Sequence[ChunkIndex]],
                     normalization: str, frame: TimeSeriesFrame, stride: int,
                     truth=None, verify: bool = True, log_to=None) -> List[ChunkReport]:
    """
    ストリームログからチャンク別の損失を計算

    各チャンクの窓はログ中で最初のアンカーからチャンク終端まで。
    アンカーが1つも無いチャンクは警告して除外する。

    Args:
        log: StreamLogRecord のリスト
        chunks: 評価するチャンク
        normalization: none / per-chunk-amplitude / max-amplitude
        frame: 時系列フレーム
        stride: 予測アンカー間隔
        truth: ChunkTruth の列（振幅の取得に使う）
        verify: True なら全走査版の損失と突き合わせる
        log_to: 警告の出力先（EngineLogger または logging.Logger）

    Returns:
        ChunkReport のリスト（chunk_id 順）
    """
    out = log_to or logger
    if normalization not in NORMALIZATIONS:
        raise ParameterError(f"unknown normalization '{normalization}'",
                             normalization=normalization)
    chunk_list = list(chunks.chunks if isinstance(chunks, ChunkSplit) else chunks)
    by_chunk: Dict[int, Dict[int, np.ndarray]] = {}
    horizon = None
    for record in log:
        by_chunk.setdefault(record.chunk_id, {})[int(record.anchor)] = record.forecast
        if horizon is None:
            horizon = record.horizon
        elif record.horizon != horizon:
            raise ShapeError("log mixes forecast horizons", horizons=[horizon, record.horizon])

    evaluated = []
    for chunk in chunk_list:
        if not by_chunk.get(chunk.chunk_id):
            out.warning(f"Chunk {chunk.chunk_id} has no forecast anchors; excluded")
            continue
        evaluated.append(chunk)
    if not evaluated:
        return []

    amplitudes = chunk_amplitudes(frame, evaluated, truth)
    max_amplitude = max(amplitudes.values())

    reports = []
    for chunk in evaluated:
        forecasts = by_chunk[chunk.chunk_id]
        cfg = LossConfig(h=horizon, s=stride, f=min(forecasts), e=chunk.end)
        detail = strided_loss_detail(frame, forecasts, cfg)
        if verify:
            check = strided_loss_bruteforce(frame, forecasts, cfg)
            if not math.isclose(check, detail.mean, rel_tol=1e-12, abs_tol=1e-300):
                raise NumericError("strided loss disagrees with brute-force enumeration",
                                   chunk_id=chunk.chunk_id, loss=detail.mean, check=check)
        amplitude = amplitudes[chunk.chunk_id]
        if normalization == 'none':
            scale = 1.0
        elif normalization == 'per-chunk-amplitude':
            scale = amplitude ** 2
        else:
            scale = max_amplitude ** 2
        if scale <= 0:
            raise NumericError("amplitude is zero; cannot normalize", chunk_id=chunk.chunk_id)
        reports.append(ChunkReport(chunk_id=chunk.chunk_id, mse=detail.mean,
                                   normalized_mse=detail.mean / scale,
                                   anchor_count=len(detail.anchors), anchors=detail.anchors,
                                   losses=detail.losses, amplitude=amplitude,
                                   window_start=cfg.f, window_end=cfg.e,
                                   literal_mse=detail.literal))
    return reports


def _mean(values: Sequence[float]) -> float:
    # 並び順に依存しない和
    return math.fsum(values) / len(values)


def compare_runs(rewts_report: Sequence[ChunkReport], global_report: Sequence[ChunkReport],
                 normalization: str = 'none',
                 axis: Optional[Dict[str, object]] = None) -> ComparisonReport:
    """
    チャンク別レポートを比較

    percent_difference は正規化済み平均（normalization=none なら生のMSE平均）で計算する。
    """
    rewts = {r.chunk_id: r for r in rewts_report}
    global_ = {r.chunk_id: r for r in global_report}
    if set(rewts) != set(global_):
        raise ComparisonError("reports cover different chunks",
                              rewts_only=sorted(set(rewts) - set(global_)),
                              global_only=sorted(set(global_) - set(rewts)))
    if not rewts:
        raise ComparisonError("reports are empty")
    ids = sorted(rewts)
    r_mse = [rewts[i].mse for i in ids]
    g_mse = [global_[i].mse for i in ids]
    r_norm = [rewts[i].normalized_mse for i in ids]
    g_norm = [global_[i].normalized_mse for i in ids]
    r_mean_norm, g_mean_norm = _mean(r_norm), _mean(g_norm)
    return ComparisonReport(
        chunk_ids=ids, rewts_mse=r_mse, global_mse=g_mse,
        rewts_normalized=r_norm, global_normalized=g_norm,
        rewts_mean=_mean(r_mse), global_mean=_mean(g_mse),
        rewts_mean_normalized=r_mean_norm, global_mean_normalized=g_mean_norm,
        percent_difference=percent_difference(r_mean_norm, g_mean_norm),
        symmetric_percent_difference=symmetric_percent_difference(r_mean_norm, g_mean_norm),
        normalization=normalization, axis=dict(axis or {}))


def _truth_frequencies(truth) -> Dict[int, float]:
    return {int(t.chunk_id): float(t.frequency) for t in truth}


def _interior(log, chunks: Sequence[ChunkIndex], offset: int):
    starts = {c.chunk_id: c.start for c in chunks}
    for record in log:
        if record.weights is None or record.chunk_id not in starts:
            continue
        if record.anchor - starts[record.chunk_id] >= offset:
            yield record


def within_chunk(log, chunks: Sequence[ChunkIndex], margin: int) -> list:
    """
    チャンク単独で評価できるアンカーの記録だけを返す

    anchor − margin がアンカーの属するチャンクの先頭以上であるもの。margin に
    「ルックバック長 + 入力長」を渡すと、重み学習と予測が触れるデータが
    すべて同じチャンクに収まる（チャンク境界の影響を受けない）。

    Args:
        log: StreamLogRecord のリスト
        chunks: 対象チャンク
        margin: チャンク先頭からの最小距離

    Returns:
        条件を満たす記録（元の順序）
    """
    if margin < 0:
        raise ParameterError("margin must be >= 0", margin=margin)
    starts = {c.chunk_id: c.start for c in chunks}
    return [r for r in log
            if r.chunk_id in starts and r.anchor - margin >= starts[r.chunk_id]]


def weight_concentration(log, chunks: Sequence[ChunkIndex], truth, offset: int) -> Dict[str, object]:
    """
    境界から offset ティック以上離れたアンカーで、稼働チャンクと同じ周波数で
    学習したモデルに乗った重みの合計の平均

    Returns:
        {'mean': 全体平均, 'per_chunk': チャンク別平均, 'anchors': 対象アンカー数}
    """
    freq = _truth_frequencies(truth)
    per_chunk: Dict[int, List[float]] = {}
    for record in _interior(log, list(chunks), offset):
        active = freq[record.chunk_id]
        mask = np.array([np.isclose(freq.get(m, np.nan), active) for m in record.model_ids])
        if not mask.any():
            continue
        per_chunk.setdefault(record.chunk_id, []).append(float(np.sum(record.weights[mask])))
    values = [v for vs in per_chunk.values() for v in vs]
    return {
        'mean': _mean(values) if values else float('nan'),
        'per_chunk': {k: _mean(v) for k, v in sorted(per_chunk.items())},
        'anchors': len(values),
    }


def argmax_accuracy(log, chunks: Sequence[ChunkIndex], truth, offset: int) -> float:
    """境界から offset 以上離れたアンカーで、最大重みのモデルの周波数が稼働チャンクと一致する割合"""
    freq = _truth_frequencies(truth)
    hits = []
    for record in _interior(log, list(chunks), offset):
        active = freq[record.chunk_id]
        if not any(np.isclose(freq.get(m, np.nan), active) for m in record.model_ids):
            continue
        top = record.model_ids[int(np.argmax(record.weights))]
        hits.append(bool(np.isclose(freq.get(top, np.nan), active)))
    if not hits:
        return float('nan')
    return sum(hits) / len(hits)


def edge_effect_report(log, chunks: Sequence[ChunkIndex], frame: TimeSeriesFrame,
                       lookback: int) -> List[EdgeTransition]:
    """
    各チャンクの先頭 lookback ティックと残りの平均予測誤差

    先頭チャンク（直前の境界が無い t=0 始まり）は除く。
    """
    by_chunk: Dict[int, List] = {}
    for record in log:
        by_chunk.setdefault(record.chunk_id, []).append(record)
    transitions = []
    for chunk in chunks:
        if chunk.start == 0 or chunk.chunk_id not in by_chunk:
            continue
        early, late = [], []
        for record in by_chunk[chunk.chunk_id]:
            y = frame.target[record.anchor:record.anchor + record.horizon]
            loss = window_mse(y, record.forecast)
            (early if record.anchor < chunk.start + lookback else late).append(loss)
        if not early or not late:
            continue
        transitions.append(EdgeTransition(chunk_id=chunk.chunk_id, early_mse=_mean(early),
                                          late_mse=_mean(late), early_count=len(early),
                                          late_count=len(late)))
    return transitions


def weight_relevance(log) -> List[ModelRelevance]:
    """モデル毎の平均・最大重み（モデルが存在したアンカーのみで平均）"""
    weights: Dict[int, List[float]] = {}
    for record in log:
        if record.weights is None:
            continue
        for model_id, w in zip(record.model_ids, record.weights):
            weights.setdefault(int(model_id), []).append(float(w))
    return [ModelRelevance(model_id=k, mean_weight=_mean(v), max_weight=max(v),
                           anchors_present=len(v))
            for k, v in sorted(weights.items())]
