"""テスト共通設定"""

import sys
from pathlib import Path

import numpy as np
import pytest

# src をインポートパスに追加（main.py と同じフラットなインポート）
SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from forecasters import ElasticNetParams, LagSpec  # noqa: E402
from timeseries import TimeSeriesFrame  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_lags():
    return LagSpec(input_length=8)


@pytest.fixture
def small_params():
    return ElasticNetParams(lambda_=1e-4, alpha=0.5, max_iter=500, tol=1e-7)


def regime_frame(chunk_length=60, periods=(6.0, 15.0, 6.0, 15.0, 6.0), noise=0.0, seed=0):
    """周期の異なる正弦波を連結した単変量系列"""
    rng = np.random.default_rng(seed)
    pieces = []
    for period in periods:
        t = np.arange(chunk_length)
        pieces.append(np.sin(2 * np.pi * t / period))
    y = np.concatenate(pieces)
    if noise:
        y = y + rng.normal(0.0, noise, size=y.shape)
    return TimeSeriesFrame.from_arrays(y)


@pytest.fixture
def regime():
    return regime_frame()
