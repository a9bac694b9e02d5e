"""
時系列データモデル
等間隔多変量系列・チャンク分割・チャンク別スケーリング・CSV読み込み
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import (DataSourceError, EmptyInputError, OrderingError, ParameterError,
                    ParseError, RangeIndexError, SchemaError, ShapeError)
from logger import get_logger


EPS_STD = 1e-8

logger = get_logger("timeseries")


def _readonly(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeSeriesFrame:
    """
    等間隔の目的変数ベクトルと共変量行列

    target は (n,)、covariates は (n, K)。K=0 の単変量系列も可。
    構築後は配列を書き込み不可にする。
    """

    target: np.ndarray
    covariates: np.ndarray
    future_known: Tuple[bool, ...] = ()
    covariate_names: Tuple[str, ...] = ()
    start_index: int = 0
    step: float = 1.0

    def __post_init__(self):
        target = _readonly(self.target)
        if target.ndim != 1:
            raise ShapeError("target must be one-dimensional", shape=target.shape)
        covariates = np.asarray(self.covariates, dtype=float)
        if covariates.size == 0:
            covariates = np.zeros((target.shape[0], 0))
        if covariates.ndim == 1:
            covariates = covariates.reshape(-1, 1)
        covariates = _readonly(covariates)
        if covariates.shape[0] != target.shape[0]:
            raise ShapeError("target length must equal covariate row count",
                             target=target.shape[0], covariates=covariates.shape[0])
        n_cov = covariates.shape[1]
        future_known = tuple(bool(f) for f in self.future_known) or (False,) * n_cov
        if len(future_known) != n_cov:
            raise ShapeError("future_known needs one flag per covariate",
                             flags=len(future_known), covariates=n_cov)
        names = tuple(self.covariate_names) or tuple(f"x{i}" for i in range(n_cov))
        if len(names) != n_cov:
            raise ShapeError("covariate_names needs one name per covariate",
                             names=len(names), covariates=n_cov)
        if not (np.all(np.isfinite(target)) and np.all(np.isfinite(covariates))):
            raise ParseError("frame contains non-finite values")
        if self.step <= 0:
            raise ParameterError("step must be positive", step=self.step)

        object.__setattr__(self, 'target', target)
        object.__setattr__(self, 'covariates', covariates)
        object.__setattr__(self, 'future_known', future_known)
        object.__setattr__(self, 'covariate_names', names)

    @classmethod
    def from_arrays(cls,
                    target: Sequence[float],
                    covariates: Optional[np.ndarray] = None,
                    future_known: Optional[Sequence[bool]] = None,
                    covariate_names: Optional[Sequence[str]] = None,
                    step: float = 1.0) -> "TimeSeriesFrame":
        """配列から構築"""
        target = np.asarray(target, dtype=float)
        if covariates is None:
            covariates = np.zeros((target.shape[0], 0))
        return cls(target=target,
                   covariates=np.asarray(covariates, dtype=float),
                   future_known=tuple(future_known or ()),
                   covariate_names=tuple(covariate_names or ()),
                   step=step)

    def __len__(self) -> int:
        return int(self.target.shape[0])

    @property
    def length(self) -> int:
        return len(self)

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    def future_known_columns(self) -> List[int]:
        return [i for i, flag in enumerate(self.future_known) if flag]

    def past_only_columns(self) -> List[int]:
        return [i for i, flag in enumerate(self.future_known) if not flag]

    def feature_matrix(self) -> np.ndarray:
        """(目的変数, 共変量...) の順に並べた (n, 1+K) 行列"""
        return np.column_stack([self.target, self.covariates])

    def slice(self, start: int, end: int) -> "TimeSeriesFrame":
        """[start, end) の部分系列（start_index は元の時刻を引き継ぐ）"""
        if not (0 <= start < end <= len(self)):
            raise RangeIndexError("slice out of bounds", start=start, end=end, length=len(self))
        return TimeSeriesFrame(target=self.target[start:end],
                               covariates=self.covariates[start:end],
                               future_known=self.future_known,
                               covariate_names=self.covariate_names,
                               start_index=self.start_index + start,
                               step=self.step)


@dataclass(frozen=True)
class ChunkIndex:
    """チャンク範囲 [start, end)"""

    chunk_id: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ChunkSplit:
    """
    split_chunks の結果

    完全なチャンクの列と、まだ埋まっていない末尾区間（incomplete）を保持する。
    """

    chunks: Tuple[ChunkIndex, ...]
    chunk_length: int
    incomplete: Optional[Tuple[int, int]] = None

    def __iter__(self) -> Iterator[ChunkIndex]:
        return iter(self.chunks)

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, i: int) -> ChunkIndex:
        return self.chunks[i]

    @property
    def incomplete_length(self) -> int:
        if self.incomplete is None:
            return 0
        return self.incomplete[1] - self.incomplete[0]

    def chunk_of(self, t: int) -> Optional[ChunkIndex]:
        """時刻 t を含む完全チャンク（末尾の未完了区間なら None）"""
        i = t // self.chunk_length
        if 0 <= i < len(self.chunks):
            return self.chunks[i]
        return None


@dataclass(frozen=True)
class Scaler:
    """
    特徴量ごとの z-score スケーラー

    特徴量の順序は (目的変数, 共変量...)。stds は EPS_STD で下限処理済み。
    """

    means: np.ndarray
    stds: np.ndarray
    feature_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        means = _readonly(np.atleast_1d(self.means))
        stds = _readonly(np.atleast_1d(self.stds))
        if means.shape != stds.shape or means.ndim != 1:
            raise ShapeError("means and stds must be vectors of equal length",
                             means=means.shape, stds=stds.shape)
        if np.any(stds <= 0):
            raise ParameterError("scaler stds must be strictly positive")
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'stds', stds)

    @property
    def n_features(self) -> int:
        return int(self.means.shape[0])

    def to_dict(self) -> dict:
        return {'means': self.means.tolist(), 'stds': self.stds.tolist(),
                'feature_names': list(self.feature_names)}

    @classmethod
    def from_dict(cls, data: dict) -> "Scaler":
        return cls(means=np.asarray(data['means'], dtype=float),
                   stds=np.asarray(data['stds'], dtype=float),
                   feature_names=tuple(data.get('feature_names', ())))


def split_chunks(frame: Union[TimeSeriesFrame, int], l_c: int) -> ChunkSplit:
    """
    系列を長さ l_c の互いに素な連続チャンクに分割

    Args:
        frame: 時系列フレーム（または系列長）
        l_c: チャンク長

    Returns:
        floor(len/l_c) 個の完全チャンクと末尾の未完了区間
    """
    if isinstance(l_c, bool) or not isinstance(l_c, (int, np.integer)) or l_c <= 0:
        raise ParameterError("chunk length must be a positive integer", l_c=l_c)
    n = frame if isinstance(frame, (int, np.integer)) else len(frame)
    n_complete = n // l_c
    chunks = tuple(ChunkIndex(i, i * l_c, (i + 1) * l_c) for i in range(n_complete))
    remainder = n - n_complete * l_c
    incomplete = (n_complete * l_c, n) if remainder > 0 else None
    return ChunkSplit(chunks=chunks, chunk_length=int(l_c), incomplete=incomplete)


def fit_scaler_range(frame: TimeSeriesFrame, start: int, end: int) -> Scaler:
    """[start, end) 区間の平均と母標準偏差でスケーラーを作成"""
    if not (0 <= start < end <= len(frame)):
        raise RangeIndexError("scaler range out of bounds", start=start, end=end,
                              length=len(frame))
    if end - start < 2:
        raise RangeIndexError("scaler range needs at least two ticks", start=start, end=end)
    data = frame.feature_matrix()[start:end]
    means = data.mean(axis=0)
    stds = np.maximum(data.std(axis=0), EPS_STD)
    return Scaler(means=means, stds=stds,
                  feature_names=('target',) + tuple(frame.covariate_names))


def fit_scaler(frame: TimeSeriesFrame, chunk: ChunkIndex) -> Scaler:
    """チャンク内のデータだけでスケーラーを作成"""
    return fit_scaler_range(frame, chunk.start, chunk.end)


def _check_columns(scaler: Scaler, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    if rows.ndim != 2 or rows.shape[1] != scaler.n_features:
        raise ShapeError("column count does not match scaler",
                         columns=rows.shape[-1], expected=scaler.n_features)
    return rows


def apply_scaler(scaler: Scaler, rows: np.ndarray) -> np.ndarray:
    """(x − mean) / std を特徴量ごとに適用"""
    rows = _check_columns(scaler, rows)
    return (rows - scaler.means) / scaler.stds


def invert_scaler(scaler: Scaler, rows: np.ndarray) -> np.ndarray:
    """apply_scaler の逆変換"""
    rows = _check_columns(scaler, rows)
    return rows * scaler.stds + scaler.means


@dataclass(frozen=True)
class CsvSchema:
    """CSV列の対応付け"""

    target: str
    covariates: Tuple[str, ...] = ()
    future_known: Tuple[str, ...] = ()
    time_column: Optional[str] = None
    delimiter: str = ","
    step: float = 1.0


def ingest_csv(path: Union[str, Path],
               schema: CsvSchema,
               lenient: bool = False,
               resample: Optional[str] = None) -> TimeSeriesFrame:
    """
    CSVファイルから TimeSeriesFrame を読み込む

    Args:
        path: CSVファイルのパス（ヘッダー行必須）
        schema: 列の対応付け
        lenient: True なら数値化できないセルを線形補間、False ならエラー
        resample: 時刻列のウィンドウ幅（"10min" や数値）。ウィンドウ内平均で集約

    Returns:
        TimeSeriesFrame
    """
    path = Path(path)
    if not path.exists():
        raise DataSourceError(f"Data file not found: {path}", path=path)

    try:
        raw = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyInputError(f"Data file is empty: {path}", path=str(path))
    if raw.empty:
        raise EmptyInputError(f"Data file has no rows: {path}", path=str(path))

    raw.columns = [c.strip() for c in raw.columns]
    wanted = [schema.target] + list(schema.covariates)
    if schema.time_column:
        wanted.append(schema.time_column)
    missing = [c for c in wanted if c not in raw.columns]
    if missing:
        raise SchemaError(f"Missing columns in {path.name}: {missing}",
                          path=str(path), missing=missing, available=list(raw.columns))
    unknown = [c for c in schema.future_known if c not in schema.covariates]
    if unknown:
        raise SchemaError("future_known names columns that are not covariates", unknown=unknown)

    value_columns = [schema.target] + list(schema.covariates)
    values = raw[value_columns].apply(lambda col: pd.to_numeric(col.str.strip(), errors='coerce'))

    bad = values.isna()
    if bad.values.any():
        rows, cols = np.nonzero(bad.values)
        if not lenient:
            raise ParseError(f"Unparseable value in {path.name}",
                             path=str(path), row=int(rows[0]) + 1,
                             column=value_columns[int(cols[0])], count=int(bad.values.sum()))
        logger.warning(f"Interpolating {int(bad.values.sum())} unparseable cells in {path.name}")
        values = values.interpolate(method='linear', limit_direction='both')
        if values.isna().values.any():
            raise ParseError(f"Column without any numeric value in {path.name}", path=str(path))

    step = schema.step
    if schema.time_column:
        times = _parse_time_column(raw[schema.time_column], path)
        diffs = np.diff(times.astype('int64') if np.issubdtype(times.dtype, np.datetime64)
                        else times.astype(float))
        if np.any(diffs <= 0):
            position = int(np.argmax(diffs <= 0)) + 1
            raise OrderingError(f"Timestamps are not strictly increasing in {path.name}",
                                path=str(path), row=position + 1)
        if resample:
            values, step = _resample(values, times, resample, lenient, path)
    elif resample:
        raise SchemaError("resampling requires a time column", resample=resample)

    target = values[schema.target].to_numpy(dtype=float)
    covariates = values[list(schema.covariates)].to_numpy(dtype=float).reshape(len(target), -1)
    flags = tuple(c in schema.future_known for c in schema.covariates)
    logger.info(f"Loaded {len(target)} rows from {path.name} ({len(schema.covariates)} covariates)")
    return TimeSeriesFrame(target=target, covariates=covariates, future_known=flags,
                           covariate_names=tuple(schema.covariates), step=step)


def _parse_time_column(column: pd.Series, path: Path) -> np.ndarray:
    """時刻列を数値または datetime64 に変換"""
    numeric = pd.to_numeric(column.str.strip(), errors='coerce')
    if not numeric.isna().any():
        return numeric.to_numpy(dtype=float)
    try:
        return pd.to_datetime(column.str.strip()).to_numpy()
    except (ValueError, TypeError) as e:
        raise ParseError(f"Unparseable time column in {path.name}: {e}", path=str(path))


def _resample(values: pd.DataFrame, times: np.ndarray, rule: str, lenient: bool,
              path: Path) -> Tuple[pd.DataFrame, float]:
    """時刻ウィンドウ内の平均で集約（空ウィンドウは補間またはエラー）"""
    if np.issubdtype(times.dtype, np.datetime64):
        indexed = values.set_index(pd.DatetimeIndex(times))
        out = indexed.resample(rule).mean()
        step = pd.Timedelta(rule).total_seconds()
    else:
        width = float(rule)
        if width <= 0:
            raise ParameterError("resample width must be positive", resample=rule)
        bins = np.floor((times - times[0]) / width).astype(int)
        grouped = values.groupby(bins).mean()
        out = grouped.reindex(np.arange(bins.max() + 1))
        step = width
    if out.isna().values.any():
        if not lenient:
            raise ParseError(f"Empty resampling window in {path.name}", path=str(path),
                             resample=str(rule))
        out = out.interpolate(method='linear', limit_direction='both')
    return out.reset_index(drop=True), step
