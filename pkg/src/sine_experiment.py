"""
区分正弦波での比較実験
学習用8チャンクでチャンクモデルとグローバルモデルを作り、学習用・評価用の両区間で比較する

チャンク別の損失は各チャンクを単独で評価する（重み学習と予測に使うデータが
すべてそのチャンクに収まるアンカーだけを使う）。チャンク境界をまたぐ連結系列での
評価は別に stream_comparison として残し、境界効果の分析にも使う。
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from benchmark import RunSettings
from errors import ParameterError
from evaluation import (ChunkReport, ComparisonReport, EdgeTransition, argmax_accuracy,
                        compare_runs, edge_effect_report, per_chunk_report, weight_concentration,
                        weight_relevance, within_chunk)
from forecasters import ChunkModel, fit_chunk_model
from global_baseline import fit_global, run_fixed_global
from logger import get_logger
from report_writer import (FIGURES_DIR, plot_chunk_losses, plot_weights, write_json,
                           write_report, write_stream_csv, write_stream_log)
from rewts_engine import StreamLogRecord, schedule_anchors
from synthetic import SINE_CHUNK_POINTS, SineDataset, default_paper_spec, generate_sine_with_truth
from timeseries import split_chunks


TRAIN_CHUNK_COUNT = 8
ONESTEP_H_FIT = 1
HALF_RATIO = 0.5
# チャンク毎に自身の振幅の二乗で割る
PRIMARY_NORMALIZATION = 'per-chunk-amplitude'
NORMALIZATION_ORDER = ('per-chunk-amplitude', 'max-amplitude')
METHODS = ('rewts', 'rewts_onestep', 'global')

logger = get_logger("experiment")


@dataclass
class SplitResult:
    """1区間（train / test）の評価結果"""

    name: str
    rewts_records: List[StreamLogRecord]
    onestep_records: List[StreamLogRecord]
    global_records: List[StreamLogRecord]
    # reports[評価方法][正規化][手法]。評価方法は 'chunk'（チャンク単独）と 'stream'（連結系列）
    reports: Dict[str, Dict[str, Dict[str, List[ChunkReport]]]] = field(default_factory=dict)
    comparison: Optional[ComparisonReport] = None
    onestep_comparison: Optional[ComparisonReport] = None
    max_amplitude_comparison: Optional[ComparisonReport] = None
    stream_comparison: Optional[ComparisonReport] = None


@dataclass
class ExperimentResult:
    dataset: SineDataset
    settings: RunSettings
    models: List[ChunkModel]
    global_model: ChunkModel
    train: SplitResult
    test: SplitResult
    concentration: dict
    accuracy_hstep: float
    accuracy_onestep: float
    edge_effects: List[EdgeTransition]

    @staticmethod
    def _ratio(comparison: ComparisonReport) -> float:
        return comparison.rewts_mean_normalized / comparison.global_mean_normalized

    @property
    def train_ratio(self) -> float:
        return self._ratio(self.train.comparison)

    def summary(self) -> dict:
        degraded = sum(1 for t in self.edge_effects if t.degraded)
        return {
            'normalization': PRIMARY_NORMALIZATION,
            'train_rewts_mean_normalized': self.train.comparison.rewts_mean_normalized,
            'train_global_mean_normalized': self.train.comparison.global_mean_normalized,
            'test_rewts_mean_normalized': self.test.comparison.rewts_mean_normalized,
            'test_global_mean_normalized': self.test.comparison.global_mean_normalized,
            'train_ratio': self.train_ratio,
            'meets_half_ratio': self.train_ratio <= HALF_RATIO,
            'test_rewts_lower': (self.test.comparison.rewts_mean_normalized
                                 < self.test.comparison.global_mean_normalized),
            'train_ratio_max_amplitude': self._ratio(self.train.max_amplitude_comparison),
            'train_stream_ratio': self._ratio(self.train.stream_comparison),
            'test_stream_ratio': self._ratio(self.test.stream_comparison),
            'weight_concentration': self.concentration['mean'],
            'argmax_accuracy_hstep': self.accuracy_hstep,
            'argmax_accuracy_onestep': self.accuracy_onestep,
            'hstep_beats_onestep': self.accuracy_hstep >= self.accuracy_onestep,
            'edge_transitions_degraded': degraded,
            'edge_transitions': len(self.edge_effects),
        }


def _chunk_reports(records: Dict[str, List[StreamLogRecord]], frame, chunks,
                   settings: RunSettings, truth) -> Dict[str, Dict[str, List[ChunkReport]]]:
    reports = {}
    for normalization in NORMALIZATION_ORDER:
        by_method = {method: per_chunk_report(log, chunks, normalization, frame, settings.stride,
                                              truth=truth, verify=settings.verify_loss)
                     for method, log in records.items()}
        # 予測の無いチャンクは全手法から外す
        common = set.intersection(*({r.chunk_id for r in reps} for reps in by_method.values()))
        reports[normalization] = {m: [r for r in reps if r.chunk_id in common]
                                  for m, reps in by_method.items()}
    return reports


def _evaluate_split(name: str, frame, chunks, models, global_model, settings: RunSettings,
                    truth) -> SplitResult:
    split = split_chunks(frame, settings.chunk_length)
    ids = {c.chunk_id for c in chunks}
    engine = settings.engine()
    onestep_engine = settings.replace(h_fit=ONESTEP_H_FIT).engine()
    # 3手法で同じアンカーを使う（重み学習のルックバックが足りないアンカーは除く）
    state = engine.new_state(models)
    onestep_state = onestep_engine.new_state(models)
    anchors = [(a, c) for a, c in schedule_anchors(split, settings.horizon, settings.stride,
                                                   first_chunk=0)
               if c in ids and engine.has_lookback(state, a)
               and onestep_engine.has_lookback(onestep_state, a)]

    hstep = engine.run_fixed_ensemble(frame, models, anchors, settings.horizon)
    onestep = onestep_engine.run_fixed_ensemble(frame, models, anchors, settings.horizon)
    global_records = run_fixed_global(frame, global_model, anchors, settings.horizon)

    result = SplitResult(name=name, rewts_records=hstep, onestep_records=onestep,
                         global_records=global_records)
    stream = dict(zip(METHODS, (hstep, onestep, global_records)))
    margin = settings.lookback + max(m.history_needed for m in list(models) + [global_model])
    isolated = {m: within_chunk(log, chunks, margin) for m, log in stream.items()}
    result.reports['chunk'] = _chunk_reports(isolated, frame, chunks, settings, truth)
    result.reports['stream'] = _chunk_reports(stream, frame, chunks, settings, truth)

    def compare(scope: str, normalization: str, method: str = 'rewts', **axis):
        picked = result.reports[scope][normalization]
        return compare_runs(picked[method], picked['global'], normalization,
                            axis={'split': name, 'scope': scope, **axis})

    result.comparison = compare('chunk', PRIMARY_NORMALIZATION)
    result.onestep_comparison = compare('chunk', PRIMARY_NORMALIZATION, 'rewts_onestep',
                                        h_fit=ONESTEP_H_FIT)
    result.max_amplitude_comparison = compare('chunk', 'max-amplitude')
    result.stream_comparison = compare('stream', 'max-amplitude')
    return result


def run_sine_experiment(settings: RunSettings, dt: float = 0.1, seed: int = 0,
                        noise_std: float = 0.0, log_to=None) -> ExperimentResult:
    """
    区分正弦波実験を実行

    16チャンクの連続系列を作り、先頭8チャンクで1チャンク1モデルとグローバルモデルを学習する。
    同じモデル集合を学習区間と評価区間の両方のアンカーで評価し、
    h_fit = settings.h_fit と h_fit = 1 の両方で重みを求める。

    Args:
        settings: 実行設定（chunk_length は 500 であること）
        dt: 正弦波の刻み幅
        seed: ノイズ用シード
        noise_std: 観測ノイズ

    Returns:
        ExperimentResult
    """
    out = log_to or logger
    if settings.chunk_length != SINE_CHUNK_POINTS:
        raise ParameterError(f"sine experiment uses chunk_length={SINE_CHUNK_POINTS}",
                             chunk_length=settings.chunk_length)
    dataset = generate_sine_with_truth(default_paper_spec('full', dt=dt, seed=seed,
                                                          noise_std=noise_std))
    frame = dataset.frame
    split = split_chunks(frame, settings.chunk_length)
    train_chunks = split.chunks[:TRAIN_CHUNK_COUNT]
    test_chunks = split.chunks[TRAIN_CHUNK_COUNT:]

    out.info(f"Sine experiment: {len(split)} chunks, training {len(train_chunks)} chunk models")
    models = [fit_chunk_model(frame, c, settings.lags, settings.params, settings.kind)
              for c in train_chunks]
    global_model = fit_global(frame, train_chunks[-1].end, settings.lags, settings.params,
                              settings.kind)

    train = _evaluate_split('train', frame, train_chunks, models, global_model, settings,
                            dataset.truth)
    test = _evaluate_split('test', frame, test_chunks, models, global_model, settings,
                           dataset.truth)

    concentration = weight_concentration(train.rewts_records, train_chunks, dataset.truth,
                                         settings.lookback)
    accuracy_hstep = argmax_accuracy(train.rewts_records, train_chunks, dataset.truth,
                                     settings.lookback)
    accuracy_onestep = argmax_accuracy(train.onestep_records, train_chunks, dataset.truth,
                                       settings.lookback)
    edges = edge_effect_report(test.rewts_records, test_chunks, frame, settings.lookback)

    result = ExperimentResult(dataset=dataset, settings=settings, models=models,
                              global_model=global_model, train=train, test=test,
                              concentration=concentration, accuracy_hstep=accuracy_hstep,
                              accuracy_onestep=accuracy_onestep, edge_effects=edges)
    for key, value in result.summary().items():
        out.info(f"  {key}: {value}")
    return result


def save_experiment(result: ExperimentResult, out_dir: Path, figures: bool = True) -> List[Path]:
    """実験結果を1つの実行ディレクトリに書き出す"""
    out_dir = Path(out_dir)
    paths = []
    for split in (result.train, result.test):
        target = out_dir / split.name
        paths.append(write_stream_log(split.rewts_records, target / "rewts_log.jsonl"))
        paths.append(write_stream_log(split.onestep_records, target / "rewts_onestep_log.jsonl"))
        paths.append(write_stream_log(split.global_records, target / "global_log.jsonl"))
        paths.append(write_stream_csv(split.rewts_records + split.global_records,
                                      target / "stream.csv"))
        extra = {
            'max_amplitude': {m: [r.to_dict() for r in reports] for m, reports
                              in split.reports['chunk']['max-amplitude'].items()},
            'stream': {m: [r.to_dict() for r in reports] for m, reports
                       in split.reports['stream']['max-amplitude'].items()},
            'onestep_comparison': split.onestep_comparison.to_dict(),
            'max_amplitude_comparison': split.max_amplitude_comparison.to_dict(),
            'stream_comparison': split.stream_comparison.to_dict(),
        }
        paths.extend(write_report(target, split.reports['chunk'][PRIMARY_NORMALIZATION],
                                  split.comparison, extra=extra))
        if figures:
            paths.append(plot_chunk_losses(target / FIGURES_DIR / "chunk_losses.svg",
                                           split.comparison,
                                           title=f"Normalized MSE per chunk ({split.name})"))
            paths.append(plot_weights(target / FIGURES_DIR / "weights.svg", split.rewts_records,
                                      title=f"Ensemble weights ({split.name})"))

    relevance = [asdict(r) for r in weight_relevance(result.train.rewts_records)]
    paths.append(write_json(out_dir / "summary.json", {
        'summary': result.summary(),
        'weight_concentration': result.concentration,
        'edge_effects': [t.to_dict() for t in result.edge_effects],
        'weight_relevance': relevance,
        'truth': [asdict(t) for t in result.dataset.truth],
    }))
    return paths
