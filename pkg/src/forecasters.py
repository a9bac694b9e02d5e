"""
予測モデルモジュール
Elastic Net 自己回帰線形モデルと素朴なベースライン、再帰的多段予測、モデル保存
"""

from __future__ import annotations

import json
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (InsufficientDataError, NumericError, ParameterError, RangeIndexError,
                    SchemaError, ShapeError)
from logger import get_logger
from timeseries import ChunkIndex, Scaler, TimeSeriesFrame, fit_scaler_range


FORMAT_VERSION = 1
GLOBAL_MODEL_ID = -1

logger = get_logger("forecasters")


@dataclass(frozen=True)
class LagSpec:
    """
    ラグ埋め込みの指定

    Args:
        input_length: 目的変数のラグ数 L
        covariate_lags: 共変量名 → ラグ集合（0 は予測時点の値で、将来既知の共変量のみ可）
        use_future_covariates: 将来既知の共変量の予測時点の値を特徴量に加える
    """

    input_length: int = 80
    covariate_lags: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    use_future_covariates: bool = True

    def __post_init__(self):
        if isinstance(self.input_length, bool) or int(self.input_length) != self.input_length \
                or self.input_length < 1:
            raise ParameterError("input_length must be an integer >= 1",
                                 input_length=self.input_length)
        for name, lags in self.covariate_lags.items():
            if any(int(l) != l or l < 0 for l in lags):
                raise ParameterError("covariate lags must be integers >= 0", covariate=name,
                                     lags=list(lags))

    def to_dict(self) -> dict:
        return {'input_length': int(self.input_length),
                'covariate_lags': {k: [int(l) for l in v] for k, v in self.covariate_lags.items()},
                'use_future_covariates': self.use_future_covariates}

    @classmethod
    def from_dict(cls, data: dict) -> "LagSpec":
        return cls(input_length=int(data['input_length']),
                   covariate_lags={k: tuple(v) for k, v in data.get('covariate_lags', {}).items()},
                   use_future_covariates=bool(data.get('use_future_covariates', True)))


@dataclass(frozen=True)
class ElasticNetParams:
    """Elastic Net の学習パラメータ（alpha=1 で Lasso, alpha=0 で Ridge）"""

    lambda_: float = 1e-3
    alpha: float = 0.5
    max_iter: int = 1000
    tol: float = 1e-6
    fit_intercept: bool = True

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ParameterError("lambda must be >= 0", lambda_=self.lambda_)
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must be in [0, 1]", alpha=self.alpha)
        if self.max_iter < 1:
            raise ParameterError("max_iter must be >= 1", max_iter=self.max_iter)
        if not self.tol > 0:
            raise ParameterError("tol must be > 0", tol=self.tol)


@dataclass(frozen=True, eq=False)
class ElasticNetResult:
    coef: np.ndarray
    intercept: float
    n_iter: int
    converged: bool
    dual_gap: Optional[float] = None


def fit_elastic_net(X: np.ndarray, y: np.ndarray, params: ElasticNetParams) -> ElasticNetResult:
    """
    座標降下法による Elastic Net 回帰

    (1/2n)||y − Xβ − b||² + λ(α||β||₁ + ((1−α)/2)||β||₂²) を最小化する。
    残差ベクトルを保持して各座標の更新を O(n) で行う。

    Args:
        X: 特徴量行列 (n, p)
        y: 目的変数 (n,)
        params: 学習パラメータ

    Returns:
        ElasticNetResult（未収束なら converged=False、例外にはしない）
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ShapeError("X rows must match y length", X=X.shape, y=y.shape)
    if X.shape[0] < 1:
        raise InsufficientDataError("elastic net needs at least one row")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericError("non-finite values in elastic net inputs")

    n, p = X.shape
    if params.fit_intercept:
        x_mean = X.mean(axis=0)
        y_mean = float(y.mean())
    else:
        x_mean = np.zeros(p)
        y_mean = 0.0
    Xc = np.asfortranarray(X - x_mean)
    yc = y - y_mean

    l1 = params.lambda_ * params.alpha
    l2 = params.lambda_ * (1.0 - params.alpha)
    col_sq = np.einsum('ij,ij->j', Xc, Xc) / n
    denom = col_sq + l2

    beta = np.zeros(p)
    residual = yc.copy()
    converged = False
    n_iter = 0
    for n_iter in range(1, params.max_iter + 1):
        max_delta = 0.0
        for j in range(p):
            if denom[j] <= 0.0:
                continue
            x_j = Xc[:, j]
            old = beta[j]
            rho = x_j @ residual / n + col_sq[j] * old
            # ソフト閾値処理
            new = np.sign(rho) * max(abs(rho) - l1, 0.0) / denom[j]
            if new != old:
                residual -= x_j * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= params.tol * max(1.0, float(np.max(np.abs(beta)))):
            converged = True
            break

    if not converged:
        logger.warning(f"Elastic net did not converge in {params.max_iter} sweeps "
                       f"(n={n}, p={p}, lambda={params.lambda_}, alpha={params.alpha})")

    gap = _duality_gap(Xc, yc, beta, l1, l2) if l1 > 0 else None
    intercept = y_mean - float(x_mean @ beta)
    return ElasticNetResult(coef=beta, intercept=intercept, n_iter=n_iter,
                            converged=converged, dual_gap=gap)


def _duality_gap(X: np.ndarray, y: np.ndarray, beta: np.ndarray, l1: float, l2: float) -> float:
    """目的関数の 1/n スケールでの双対ギャップ（診断用）"""
    n = X.shape[0]
    a, b = l1 * n, l2 * n
    r = y - X @ beta
    xta = X.T @ r - b * beta
    dual_norm = float(np.max(np.abs(xta))) if xta.size else 0.0
    r_norm2 = float(r @ r)
    if dual_norm > a:
        const = a / dual_norm
        gap = 0.5 * (r_norm2 + r_norm2 * const ** 2)
    else:
        const = 1.0
        gap = r_norm2
    gap += a * float(np.sum(np.abs(beta))) - const * float(r @ y) \
        + 0.5 * b * (1.0 + const ** 2) * float(beta @ beta)
    return gap / n


class Forecaster(ABC):
    """
    1ステップ予測器の契約

    スケール済み特徴量行列 (n, p) から次の1ステップ (n,) を返す。
    新しいモデル族はこのクラスを実装し FORECASTER_FITTERS に登録する。
    """

    kind: str = "abstract"

    @abstractmethod
    def predict(self, features: np.ndarray) -> np.ndarray:
        ...

    @property
    @abstractmethod
    def param_count(self) -> int:
        ...

    @abstractmethod
    def to_dict(self) -> dict:
        ...


@dataclass(frozen=True, eq=False)
class LinearForecaster(Forecaster):
    """係数ベクトル + 切片の線形1ステップ予測器"""

    coef: np.ndarray
    intercept: float
    kind: str = "elastic_net"
    free_params: int = 0
    n_iter: int = 0
    converged: bool = True
    dual_gap: Optional[float] = None

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float)
        coef.setflags(write=False)
        object.__setattr__(self, 'coef', coef)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return features @ self.coef + self.intercept

    @property
    def param_count(self) -> int:
        return int(self.free_params)

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'coef': self.coef.tolist(), 'intercept': self.intercept,
                'free_params': int(self.free_params), 'n_iter': int(self.n_iter),
                'converged': bool(self.converged), 'dual_gap': self.dual_gap}

    @classmethod
    def from_dict(cls, data: dict) -> "LinearForecaster":
        return cls(coef=np.asarray(data['coef'], dtype=float), intercept=float(data['intercept']),
                   kind=data['kind'], free_params=int(data.get('free_params', 0)),
                   n_iter=int(data.get('n_iter', 0)), converged=bool(data.get('converged', True)),
                   dual_gap=data.get('dual_gap'))


def _fit_elastic_net_forecaster(X: np.ndarray, y: np.ndarray, params: ElasticNetParams) -> LinearForecaster:
    result = fit_elastic_net(X, y, params)
    return LinearForecaster(coef=result.coef, intercept=result.intercept, kind='elastic_net',
                            free_params=X.shape[1] + (1 if params.fit_intercept else 0),
                            n_iter=result.n_iter, converged=result.converged,
                            dual_gap=result.dual_gap)


def _fit_persistence(X: np.ndarray, y: np.ndarray, params: ElasticNetParams) -> LinearForecaster:
    # ŷ_{t+1} = y_t（スケール空間でも同じ）
    coef = np.zeros(X.shape[1])
    coef[0] = 1.0
    return LinearForecaster(coef=coef, intercept=0.0, kind='persistence')


def _fit_mean(X: np.ndarray, y: np.ndarray, params: ElasticNetParams) -> LinearForecaster:
    # スケール空間の 0 = チャンク平均
    return LinearForecaster(coef=np.zeros(X.shape[1]), intercept=0.0, kind='mean')


FORECASTER_FITTERS = {
    'elastic_net': _fit_elastic_net_forecaster,
    'persistence': _fit_persistence,
    'mean': _fit_mean,
}


@dataclass(frozen=True, eq=False)
class ChunkModel:
    """
    学習済みのチャンクモデル

    学習チャンクで作ったスケーラーと一緒に保持し、予測時は必ずこのスケーラーを使う。
    chunk_id = -1 はグローバルモデル。
    """

    forecaster: Forecaster
    scaler: Scaler
    chunk_id: int
    lags: LagSpec
    covariate_layout: Tuple[Tuple[int, int], ...] = ()
    covariate_names: Tuple[str, ...] = ()
    start: int = 0
    end: int = 0
    train_seconds: float = 0.0

    @property
    def param_count(self) -> int:
        return self.forecaster.param_count

    @property
    def history_needed(self) -> int:
        lags = [lag for _, lag in self.covariate_layout]
        return max([self.lags.input_length] + lags)


def _covariate_layout(frame: TimeSeriesFrame, lags: LagSpec) -> Tuple[Tuple[int, int], ...]:
    """共変量特徴量の並び (列番号, ラグ) を決める"""
    names = list(frame.covariate_names)
    layout: List[Tuple[int, int]] = []
    for name, lag_set in lags.covariate_lags.items():
        if name not in names:
            raise SchemaError(f"covariate '{name}' not in frame", covariate=name, available=names)
        col = names.index(name)
        for lag in sorted(int(l) for l in lag_set):
            if lag == 0 and not frame.future_known[col]:
                raise ParameterError("lag 0 is only allowed for future-known covariates",
                                     covariate=name)
            layout.append((col, lag))
    if lags.use_future_covariates:
        for col in frame.future_known_columns():
            if (col, 0) not in layout:
                layout.append((col, 0))
    return tuple(layout)


def _gather_features(y: np.ndarray, cov: np.ndarray, times: np.ndarray, input_length: int,
                     layout: Sequence[Tuple[int, int]]) -> np.ndarray:
    """予測時刻 times の特徴量 [y_{t−1..t−L}, 共変量ラグ] を並べる"""
    lag_idx = times[:, None] - np.arange(1, input_length + 1)
    parts = [y[lag_idx]]
    if layout:
        cols = np.array([c for c, _ in layout])
        cov_lags = np.array([l for _, l in layout])
        parts.append(cov[times[:, None] - cov_lags, cols])
    return np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]


def _scale_window(scaler: Optional[Scaler], target: np.ndarray, covariates: np.ndarray,
                  start: int, end: int) -> Tuple[np.ndarray, np.ndarray]:
    y = target[start:end]
    cov = covariates[start:end]
    if scaler is None:
        return np.asarray(y), np.asarray(cov)
    if scaler.n_features != 1 + covariates.shape[1]:
        raise ShapeError("scaler does not match frame features",
                         scaler=scaler.n_features, frame=1 + covariates.shape[1])
    y_s = (y - scaler.means[0]) / scaler.stds[0]
    cov_s = (cov - scaler.means[1:]) / scaler.stds[1:]
    return y_s, cov_s


def build_design(frame: TimeSeriesFrame,
                 rng: Union[ChunkIndex, Tuple[int, int]],
                 lags: LagSpec,
                 scaler: Optional[Scaler] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    ラグ埋め込みによる1ステップ先の学習用データを作成

    Args:
        frame: 時系列フレーム
        rng: 範囲（ChunkIndex または (start, end)）
        lags: ラグ指定
        scaler: 指定時はスケール済みの値で作成

    Returns:
        (特徴量行列, 1ステップ先の目的変数)。範囲開始より前のデータが必要な行は除く
    """
    start, end = (rng.start, rng.end) if isinstance(rng, ChunkIndex) else rng
    if not (0 <= start < end <= len(frame)):
        raise RangeIndexError("design range out of bounds", start=start, end=end,
                              length=len(frame))
    layout = _covariate_layout(frame, lags)
    needed = max([lags.input_length] + [l for _, l in layout])
    if end - start < needed + 1:
        raise InsufficientDataError("range shorter than input_length + 1",
                                    range_length=end - start, needed=needed + 1)
    y, cov = _scale_window(scaler, frame.target, frame.covariates, start, end)
    times = np.arange(needed, end - start)
    X = _gather_features(y, cov, times, lags.input_length, layout)
    return X, np.array(y[times])


def fit_range_model(frame: TimeSeriesFrame, start: int, end: int, lags: LagSpec,
                    params: ElasticNetParams, chunk_id: int, kind: str = 'elastic_net',
                    scaler: Optional[Scaler] = None) -> ChunkModel:
    """
    任意の範囲 [start, end) でモデルを学習

    スケーラーは指定がなければ同じ範囲で作成する。
    """
    if kind not in FORECASTER_FITTERS:
        raise ParameterError(f"unknown forecaster kind '{kind}'", kind=kind)
    started = time.perf_counter()
    if scaler is None:
        scaler = fit_scaler_range(frame, start, end)
    X, y = build_design(frame, (start, end), lags, scaler)
    forecaster = FORECASTER_FITTERS[kind](X, y, params)
    elapsed = time.perf_counter() - started
    logger.debug(f"Fitted {kind} model {chunk_id} on [{start}, {end}) rows={X.shape[0]} "
                 f"in {elapsed * 1e3:.1f}ms")
    return ChunkModel(forecaster=forecaster, scaler=scaler, chunk_id=int(chunk_id), lags=lags,
                      covariate_layout=_covariate_layout(frame, lags),
                      covariate_names=tuple(frame.covariate_names),
                      start=int(start), end=int(end), train_seconds=elapsed)


def fit_chunk_model(frame: TimeSeriesFrame, chunk: ChunkIndex, lags: LagSpec,
                    params: ElasticNetParams, kind: str = 'elastic_net') -> ChunkModel:
    """チャンク内のデータだけでスケーラーとモデルを学習"""
    if chunk.end > len(frame):
        raise InsufficientDataError("chunk is not complete", chunk_id=chunk.chunk_id,
                                    end=chunk.end, length=len(frame))
    return fit_range_model(frame, chunk.start, chunk.end, lags, params, chunk.chunk_id, kind)


def _recursive(model: ChunkModel, y_s: np.ndarray, cov_s: np.ndarray, anchors: np.ndarray,
               h: int) -> np.ndarray:
    """スケール空間で h 回の再帰予測（アンカー方向にまとめて計算）"""
    L = model.lags.input_length
    layout = model.covariate_layout
    buf = np.empty((anchors.shape[0], L + h))
    buf[:, :L] = y_s[anchors[:, None] + np.arange(-L, 0)]
    for j in range(h):
        parts = [buf[:, j:L + j][:, ::-1]]
        if layout:
            cols = np.array([c for c, _ in layout])
            cov_lags = np.array([l for _, l in layout])
            parts.append(cov_s[(anchors + j)[:, None] - cov_lags, cols])
        features = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
        buf[:, L + j] = model.forecaster.predict(features)
    return buf[:, L:]


def _check_covariate_horizon(model: ChunkModel, frame_known: Sequence[bool], h: int):
    for col, lag in model.covariate_layout:
        if not frame_known[col] and lag < h:
            raise ParameterError("past-only covariate lag must be >= horizon for recursion",
                                 covariate=model.covariate_names[col], lag=lag, horizon=h)


def forecast_batch(model: ChunkModel, frame: TimeSeriesFrame, anchors: Sequence[int],
                   h: int) -> np.ndarray:
    """
    複数アンカーからの h ステップ再帰予測

    アンカー a では y[:a] と X[:a]（将来既知の共変量は a 以降も）だけを使う。

    Args:
        model: チャンクモデル
        frame: 時系列フレーム
        anchors: 予測起点の時刻インデックス
        h: 予測ホライズン

    Returns:
        (アンカー数, h) の予測（元のスケール）
    """
    return forecast_from_arrays(model, frame.target, frame.covariates, frame.future_known,
                                anchors, h)


def forecast_from_arrays(model: ChunkModel, target: np.ndarray, covariates: np.ndarray,
                         future_known: Sequence[bool], anchors: Sequence[int],
                         h: int) -> np.ndarray:
    """forecast_batch の配列版（再帰的アンサンブルで履歴を書き換えながら使う）"""
    if h < 1:
        raise ParameterError("horizon must be >= 1", h=h)
    anchors = np.asarray(anchors, dtype=int).reshape(-1)
    if anchors.size == 0:
        return np.zeros((0, h))
    n = target.shape[0]
    needed = model.history_needed
    if anchors.min() < needed:
        raise InsufficientDataError("history shorter than the model input length",
                                    anchor=int(anchors.min()), needed=needed)
    if anchors.max() > n:
        raise RangeIndexError("anchor beyond end of frame", anchor=int(anchors.max()), length=n)
    _check_covariate_horizon(model, future_known, h)

    lo = int(anchors.min()) - needed
    hi = n
    if model.covariate_layout:
        if any(lag == 0 or future_known[c] for c, lag in model.covariate_layout) \
                and anchors.max() + h > n:
            raise InsufficientDataError("future covariates not available for the horizon",
                                        anchor=int(anchors.max()), horizon=h, length=n)
    else:
        hi = int(anchors.max())
    y_s, cov_s = _scale_window(model.scaler, target, covariates, lo, hi)
    preds = _recursive(model, y_s, cov_s, anchors - lo, h)
    return preds * model.scaler.stds[0] + model.scaler.means[0]


def forecast_recursive(model: ChunkModel, history: TimeSeriesFrame,
                       future_cov: Optional[np.ndarray], h: int) -> np.ndarray:
    """
    履歴の末尾から h ステップ先までを再帰的に予測

    Args:
        model: チャンクモデル（自身のスケーラーで入力を変換する）
        history: t_n で終わる履歴
        future_cov: 将来既知の共変量の値 (h, K_known)。K_known=0 なら None 可
        h: 予測ホライズン

    Returns:
        長さ h の予測（元のスケール）
    """
    if len(history) < model.history_needed:
        raise InsufficientDataError("history shorter than the model input length",
                                    history=len(history), needed=model.history_needed)
    known = history.future_known_columns()
    n = len(history)
    covariates = np.asarray(history.covariates)
    if known:
        if future_cov is None:
            raise ShapeError("future covariates required", expected=(h, len(known)))
        future_cov = np.asarray(future_cov, dtype=float).reshape(h, -1)
        if future_cov.shape != (h, len(known)):
            raise ShapeError("future covariate block has wrong shape",
                             shape=future_cov.shape, expected=(h, len(known)))
        extension = np.zeros((h, history.n_covariates))
        extension[:, known] = future_cov
        covariates = np.vstack([covariates, extension])
        target = np.concatenate([history.target, np.zeros(h)])
        extended = TimeSeriesFrame(target=target, covariates=covariates,
                                   future_known=history.future_known,
                                   covariate_names=history.covariate_names)
        return forecast_batch(model, extended, [n], h)[0]
    return forecast_batch(model, history, [n], h)[0]


def model_to_dict(model: ChunkModel) -> dict:
    """バージョン付きJSON文書"""
    return {
        'format_version': FORMAT_VERSION,
        'chunk_id': model.chunk_id,
        'start': model.start,
        'end': model.end,
        'param_count': model.param_count,
        'forecaster': model.forecaster.to_dict(),
        'scaler': model.scaler.to_dict(),
        'lags': model.lags.to_dict(),
        'covariate_layout': [list(p) for p in model.covariate_layout],
        'covariate_names': list(model.covariate_names),
    }


def model_from_dict(data: dict) -> ChunkModel:
    version = data.get('format_version')
    if version != FORMAT_VERSION:
        raise ParameterError("unsupported model format version", format_version=version)
    return ChunkModel(forecaster=LinearForecaster.from_dict(data['forecaster']),
                      scaler=Scaler.from_dict(data['scaler']),
                      chunk_id=int(data['chunk_id']),
                      lags=LagSpec.from_dict(data['lags']),
                      covariate_layout=tuple(tuple(p) for p in data.get('covariate_layout', [])),
                      covariate_names=tuple(data.get('covariate_names', [])),
                      start=int(data.get('start', 0)), end=int(data.get('end', 0)))


def save_models(directory: Path, models: Sequence[ChunkModel]) -> List[Path]:
    """モデルを1ファイル1モデルで保存"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for model in models:
        name = "model_global.json" if model.chunk_id == GLOBAL_MODEL_ID \
            else f"model_{model.chunk_id:04d}.json"
        path = directory / name
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(model_to_dict(model), f, indent=2, sort_keys=True)
        paths.append(path)
    return paths


def load_models(directory: Path) -> List[ChunkModel]:
    """save_models で保存したチャンクモデルを chunk_id 順に読み込む"""
    directory = Path(directory)
    models = []
    for path in sorted(directory.glob("model_*.json")):
        with open(path, 'r', encoding='utf-8') as f:
            models.append(model_from_dict(json.load(f)))
    return sorted(models, key=lambda m: m.chunk_id)
