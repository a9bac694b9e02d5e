"""
レポート出力モジュール
ストリームログ（JSON Lines / CSV）、レポート（report.json / report.csv）、SVG図を書き出す
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from logger import get_logger  # noqa: E402


# SVG の id とメタデータを固定して同じ入力から同じファイルを作る
plt.rcParams['svg.hashsalt'] = 'rewts'
SVG_METADATA = {'Date': None}

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
FIGURES_DIR = "figures"

logger = get_logger("report")


def _clean(value):
    """JSON に書ける値へ変換（NaN/inf は null）"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_clean(payload), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    return path


def write_stream_log(records, path: Path) -> Path:
    """
    1行1レコードの JSON Lines

    計測時間は含めない（同じ設定なら同じファイルになる）。時間は CSV に書く。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(_clean(record.to_dict(include_timing=False)), sort_keys=True,
                               allow_nan=False))
            f.write("\n")
    return path


def stream_frame(records) -> pd.DataFrame:
    """コンパクトな表（アンカー, 予測値, 最大重みのモデル, 最大重み, 計測時間）"""
    rows = []
    for record in records:
        row = {'anchor': record.anchor, 'chunk_id': record.chunk_id, 'method': record.method,
               'models': len(record.model_ids)}
        for i, value in enumerate(record.forecast):
            row[f"h{i + 1}"] = float(value)
        if record.weights is not None:
            top = int(np.argmax(record.weights))
            row['argmax_model'] = record.model_ids[top]
            row['max_weight'] = float(record.weights[top])
        else:
            row['argmax_model'] = record.model_ids[0]
            row['max_weight'] = 1.0
        row['fit_seconds'] = record.fit_seconds
        row['forecast_seconds'] = record.forecast_seconds
        rows.append(row)
    return pd.DataFrame(rows)


def write_stream_csv(records, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stream_frame(records).to_csv(path, index=False, float_format='%.10g')
    return path


def reports_frame(reports_by_method: Dict[str, Sequence]) -> pd.DataFrame:
    rows = []
    for method, reports in reports_by_method.items():
        for report in reports:
            rows.append({'method': method, 'chunk_id': report.chunk_id, 'mse': report.mse,
                         'normalized_mse': report.normalized_mse,
                         'anchor_count': report.anchor_count, 'amplitude': report.amplitude})
    return pd.DataFrame(rows, columns=['method', 'chunk_id', 'mse', 'normalized_mse',
                                       'anchor_count', 'amplitude'])


def write_report(out_dir: Path, reports_by_method: Dict[str, Sequence],
                 comparison=None, extra: Optional[dict] = None) -> List[Path]:
    """
    report.json と report.csv を書き出す

    Args:
        out_dir: 出力ディレクトリ
        reports_by_method: 手法名 → ChunkReport のリスト
        comparison: ComparisonReport（任意）
        extra: report.json に加える項目

    Returns:
        書き出したパス
    """
    out_dir = Path(out_dir)
    payload = {
        'chunks': {m: [r.to_dict() for r in reports] for m, reports in reports_by_method.items()},
    }
    if comparison is not None:
        payload['comparison'] = comparison.to_dict()
    payload.update(extra or {})
    json_path = write_json(out_dir / REPORT_JSON, payload)
    csv_path = out_dir / REPORT_CSV
    reports_frame(reports_by_method).to_csv(csv_path, index=False, float_format='%.10g')
    return [json_path, csv_path]


def write_table(out_dir: Path, rows: Sequence[dict], payload: dict) -> List[Path]:
    """掃引など行単位の結果を report.csv / report.json に書き出す"""
    out_dir = Path(out_dir)
    json_path = write_json(out_dir / REPORT_JSON, payload)
    csv_path = out_dir / REPORT_CSV
    pd.DataFrame(list(rows)).to_csv(csv_path, index=False, float_format='%.10g')
    return [json_path, csv_path]


def read_report(run_dir: Path) -> dict:
    path = Path(run_dir) / REPORT_JSON
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_chunk_losses(path: Path, comparison, title: str = "Normalized MSE per chunk") -> Path:
    """チャンク別の正規化MSE（ReWTS とグローバル）"""
    fig, ax = plt.subplots(figsize=(8, 4))
    ids = comparison.chunk_ids
    ax.plot(ids, comparison.rewts_normalized, marker='o', label='ReWTS')
    ax.plot(ids, comparison.global_normalized, marker='s', label='Global')
    ax.set_yscale('log')
    ax.set_xlabel('chunk')
    ax.set_ylabel('normalized MSE')
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_weights(path: Path, records, title: str = "Ensemble weights") -> Path:
    """アンカー毎のモデル重み（積み上げ）"""
    records = [r for r in records if r.weights is not None]
    model_ids = sorted({m for r in records for m in r.model_ids})
    anchors = np.array([r.anchor for r in records])
    grid = np.zeros((len(model_ids), len(records)))
    index = {m: i for i, m in enumerate(model_ids)}
    for k, record in enumerate(records):
        for m, w in zip(record.model_ids, record.weights):
            grid[index[m], k] = w
    fig, ax = plt.subplots(figsize=(10, 4))
    if len(records):
        ax.stackplot(anchors, grid, labels=[f"model {m}" for m in model_ids])
        ax.legend(loc='upper left', fontsize='small', ncol=4)
    ax.set_xlabel('anchor')
    ax.set_ylabel('weight')
    ax.set_ylim(0, 1)
    ax.set_title(title)
    return _save(fig, path)


def plot_timing(path: Path, timing) -> Path:
    """累積学習時間とアンカー毎の予測時間"""
    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    left.plot(timing.chunk_ids, timing.rewts_cumulative_train, marker='o', label='ReWTS')
    left.plot(timing.chunk_ids, timing.global_cumulative_train, marker='s', label='Global')
    left.set_xlabel('chunk')
    left.set_ylabel('cumulative training time [s]')
    left.legend()
    right.plot(timing.rewts_anchor_seconds, label='ReWTS')
    right.plot(timing.global_anchor_seconds, label='Global')
    right.set_xlabel('forecast anchor')
    right.set_ylabel('forecast time [s]')
    right.legend()
    return _save(fig, path)


def plot_sweep(path: Path, results, axis: str) -> Path:
    ok = [r for r in results if r.ok]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.value for r in ok], [r.comparison.rewts_mean_normalized for r in ok],
            marker='o', label='ReWTS')
    ax.plot([r.value for r in ok], [r.comparison.global_mean_normalized for r in ok],
            marker='s', label='Global')
    ax.set_xlabel(axis)
    ax.set_ylabel('mean normalized MSE')
    ax.legend()
    return _save(fig, path)
