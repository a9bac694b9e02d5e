"""
合成データ生成モジュール
チャンク毎に振幅・周波数が変わる区分正弦波系列（境界で値が連続）
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ConfigError, ParameterError
from timeseries import TimeSeriesFrame


# 学習用・評価用チャンクのパラメータ（振幅, 角周波数）
TRAIN_CHUNKS = (
    (0.5, 10.0), (2.0, 2.0), (20.0, 5.0), (2.0, 1.0),
    (2.0, 0.5), (0.5, 8.0), (2.0, 3.0), (5.0, 1.0),
)
TEST_CHUNKS = (
    (0.75, 8.0), (10.0, 0.75), (3.0, 7.0), (0.5, 11.0),
    (5.0, 0.65), (1.25, 4.0), (3.0, 2.0), (4.0, 5.0),
)
SINE_CHUNK_POINTS = 500
DEFAULT_DT = 0.1


@dataclass(frozen=True)
class SineChunkSpec:
    """1チャンク分の正弦波パラメータ"""

    amplitude: float
    frequency: float
    n_points: int = SINE_CHUNK_POINTS

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ParameterError("amplitude must be positive", amplitude=self.amplitude)
        if not self.frequency > 0:
            raise ParameterError("frequency must be positive", frequency=self.frequency)
        if self.n_points < 2:
            raise ParameterError("n_points must be at least 2", n_points=self.n_points)


@dataclass(frozen=True)
class SineDatasetSpec:
    """
    区分正弦波データセットの仕様

    dt は正弦波の引数の刻み幅。noise_std > 0 のときのみ seed の乱数でノイズを加える。
    """

    chunks: Tuple[SineChunkSpec, ...]
    dt: float = DEFAULT_DT
    seed: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'chunks', tuple(self.chunks))
        if not self.chunks:
            raise ParameterError("dataset spec needs at least one chunk")
        if not self.dt > 0:
            raise ParameterError("dt must be positive", dt=self.dt)
        if self.noise_std < 0:
            raise ParameterError("noise_std must be >= 0", noise_std=self.noise_std)

    @property
    def total_points(self) -> int:
        return sum(c.n_points for c in self.chunks)


@dataclass(frozen=True)
class ChunkTruth:
    """生成に使った真のパラメータ（サイドカーに保存）"""

    chunk_id: int
    amplitude: float
    frequency: float
    phase: float
    start: int
    end: int
    clamped: bool = False
    boundary_jump: float = 0.0


@dataclass(frozen=True)
class SineDataset:
    frame: TimeSeriesFrame
    truth: Tuple[ChunkTruth, ...]
    spec: SineDatasetSpec


def default_paper_spec(split: str = "train", dt: float = DEFAULT_DT, seed: int = 0,
                       noise_std: float = 0.0) -> SineDatasetSpec:
    """
    標準の8チャンク仕様を返す

    Args:
        split: "train"・"test"、または両者を連結した16チャンクの "full"
        dt: 刻み幅
        seed: ノイズ用シード
        noise_std: 観測ノイズの標準偏差

    Returns:
        SineDatasetSpec
    """
    tables = {
        'train': TRAIN_CHUNKS,
        'test': TEST_CHUNKS,
        'full': TRAIN_CHUNKS + TEST_CHUNKS,
    }
    if split not in tables:
        raise ParameterError(f"unknown split '{split}'", split=split)
    chunks = tuple(SineChunkSpec(a, w, SINE_CHUNK_POINTS) for a, w in tables[split])
    return SineDatasetSpec(chunks=chunks, dt=dt, seed=seed, noise_std=noise_std)


def _phases(spec: SineDatasetSpec) -> List[ChunkTruth]:
    """各チャンクの位相を決める（前チャンク末尾の値に接続）"""
    truths: List[ChunkTruth] = []
    start = 0
    for i, chunk in enumerate(spec.chunks):
        t_start = start * spec.dt
        clamped = False
        jump = 0.0
        if i == 0:
            phase = 0.0
        else:
            prev = truths[-1]
            t_prev = (start - 1) * spec.dt
            y_prev = prev.amplitude * np.sin(prev.frequency * t_prev + prev.phase)
            slope_prev = np.cos(prev.frequency * t_prev + prev.phase)
            ratio = y_prev / chunk.amplitude
            if abs(ratio) > 1.0:
                # 到達不能な値は ±A に丸める（不連続）
                clamped = True
                jump = abs(y_prev) - chunk.amplitude
                theta = np.arcsin(np.sign(ratio))
            else:
                theta = np.arcsin(ratio)
                # 傾きの符号が前チャンクと揃う分岐を選ぶ
                if slope_prev < 0:
                    theta = np.pi - theta
            phase = float(theta - chunk.frequency * t_start)
        truths.append(ChunkTruth(chunk_id=i, amplitude=float(chunk.amplitude),
                                 frequency=float(chunk.frequency), phase=phase,
                                 start=start, end=start + chunk.n_points,
                                 clamped=clamped, boundary_jump=float(jump)))
        start += chunk.n_points
    return truths


def _evaluate(truths: Sequence[ChunkTruth], dt: float) -> np.ndarray:
    y = np.empty(truths[-1].end)
    for truth in truths:
        t = np.arange(truth.start, truth.end) * dt
        y[truth.start:truth.end] = truth.amplitude * np.sin(truth.frequency * t + truth.phase)
    return y


def generate_sine_dataset(spec: SineDatasetSpec) -> TimeSeriesFrame:
    """区分正弦波系列を生成（単変量, K=0）"""
    return generate_sine_with_truth(spec).frame


def generate_sine_with_truth(spec: SineDatasetSpec) -> SineDataset:
    """系列と真のチャンクパラメータを同時に生成"""
    truths = _phases(spec)
    y = _evaluate(truths, spec.dt)
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        y = y + spec.noise_std * rng.standard_normal(y.shape[0])
    frame = TimeSeriesFrame.from_arrays(y, step=1.0)
    return SineDataset(frame=frame, truth=tuple(truths), spec=spec)


def save_dataset(dataset: SineDataset, csv_path: Path) -> Tuple[Path, Path]:
    """
    データセットをCSV（t, y）とJSONサイドカーに保存

    Returns:
        (CSVパス, サイドカーパス)
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    y = dataset.frame.target
    pd.DataFrame({'t': np.arange(len(y)), 'y': y}).to_csv(csv_path, index=False,
                                                          float_format='%.17g')
    sidecar = truth_path(csv_path)
    payload = {
        'format_version': 1,
        'dt': dataset.spec.dt,
        'seed': dataset.spec.seed,
        'noise_std': dataset.spec.noise_std,
        'phase_rule': ('first sample of chunk i equals last sample of chunk i-1; '
                       'arcsin branch keeps the slope sign; unattainable values are '
                       'clamped to sign(y_prev)*A_i'),
        'time_grid': 't_k = k * dt over global tick index k',
        'chunks': [asdict(t) for t in dataset.truth],
    }
    with open(sidecar, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return csv_path, sidecar


def truth_path(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".truth.json")


def load_truth(path: Path) -> Optional[Tuple[ChunkTruth, ...]]:
    """サイドカーを読み込む（CSVパスを渡した場合は対応するサイドカー）。無ければ None"""
    path = Path(path)
    if path.suffix != '.json':
        path = truth_path(path)
    if not path.exists():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    return tuple(ChunkTruth(**c) for c in payload['chunks'])


def spec_from_dict(data: dict) -> SineDatasetSpec:
    """
    辞書（YAML/JSON）から SineDatasetSpec を作る

    不正な値は ConfigError（field にフィールドパス）として送出する。

    Args:
        data: {"dt", "seed", "noise_std", "chunks": [{"amplitude", "frequency", "n_points"}]}

    Returns:
        SineDatasetSpec
    """
    if not isinstance(data, dict):
        raise ConfigError("sine spec must be a mapping", field="<root>")
    chunks = data.get('chunks')
    if not isinstance(chunks, list) or not chunks:
        raise ConfigError("sine spec needs a non-empty 'chunks' list", field="chunks")
    parsed = []
    for i, chunk in enumerate(chunks):
        if not isinstance(chunk, dict):
            raise ConfigError("chunk entry must be a mapping", field=f"chunks[{i}]")
        for key in ('amplitude', 'frequency'):
            if key not in chunk:
                raise ConfigError(f"missing '{key}'", field=f"chunks[{i}].{key}")
        try:
            parsed.append(SineChunkSpec(float(chunk['amplitude']), float(chunk['frequency']),
                                        int(chunk.get('n_points', SINE_CHUNK_POINTS))))
        except (TypeError, ValueError) as e:
            field = getattr(e, 'context', {})
            name = next((k for k in ('amplitude', 'frequency', 'n_points') if k in field),
                        'amplitude')
            raise ConfigError(f"invalid chunk parameter: {e}", field=f"chunks[{i}].{name}")
    try:
        return SineDatasetSpec(chunks=tuple(parsed), dt=float(data.get('dt', DEFAULT_DT)),
                               seed=int(data.get('seed', 0)),
                               noise_std=float(data.get('noise_std', 0.0)))
    except (TypeError, ValueError) as e:
        field = next((k for k in ('dt', 'noise_std', 'seed') if k in getattr(e, 'context', {})),
                     'dt')
        raise ConfigError(f"invalid sine spec: {e}", field=field)
