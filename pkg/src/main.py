"""
メインコントローラー
データ生成・ストリーム実行・比較・掃引・計測をコマンドラインから実行する
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

# 親ディレクトリをパスに追加
sys.path.append(str(Path(__file__).parent))

import yaml  # noqa: E402

from benchmark import (RunSettings, run_global, run_rewts, stream_reports, sweep,  # noqa: E402
                       sweep_trend, timing_bench)
from config import Config  # noqa: E402
from errors import ComparisonError, ConfigError, ReWTSError  # noqa: E402
from evaluation import ChunkReport, compare_runs  # noqa: E402
from forecasters import load_models, save_models  # noqa: E402
from logger import EngineLogger  # noqa: E402
from presets import PresetManager  # noqa: E402
from report_writer import (FIGURES_DIR, plot_chunk_losses, plot_sweep,  # noqa: E402
                           plot_timing, plot_weights, read_report, write_json, write_report,
                           write_stream_csv, write_stream_log, write_table)
from sine_experiment import run_sine_experiment, save_experiment  # noqa: E402
from synthetic import (default_paper_spec, generate_sine_with_truth,  # noqa: E402
                       load_truth, save_dataset, spec_from_dict)
from timeseries import CsvSchema, ingest_csv  # noqa: E402


__version__ = "1.0.0"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_ERROR = 2

# コマンドラインフラグ → 設定キー
FLAG_OVERRIDES = {
    'chunk_length': 'stream.chunk_length',
    'lookback': 'stream.lookback',
    'horizon': 'stream.horizon',
    'stride': 'stream.stride',
    'h_fit': 'stream.h_fit',
    'weight_fit_stride': 'stream.weight_fit_stride',
    'refit_every': 'stream.refit_every',
    'normalization': 'evaluation.normalization',
    'split': 'synthetic.split',
    'seed': 'execution.seed',
    'jobs': 'execution.jobs',
    'log_level': 'logging.level',
}


def build_parser() -> argparse.ArgumentParser:
    """引数パーサーを構築"""
    parser = argparse.ArgumentParser(
        prog="rewts",
        description="ReWTS chunk-ensemble forecasting: streaming runs, baselines and benchmarks")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('--config', help="config file (YAML or JSON)")
    parser.add_argument('--preset', help="named preset applied over the config file")
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help="override a config value by dotted key (repeatable)")
    parser.add_argument('--log-level', help="log level (also REWTS_LOG)")

    stream_flags = argparse.ArgumentParser(add_help=False)
    stream_flags.add_argument('--data', help="CSV file (sets data.source=csv)")
    stream_flags.add_argument('--split', choices=['train', 'test', 'full'],
                              help="synthetic split when no CSV is given")
    stream_flags.add_argument('--chunk-length', type=int)
    stream_flags.add_argument('--lookback', type=int)
    stream_flags.add_argument('--horizon', type=int)
    stream_flags.add_argument('--stride', type=int)
    stream_flags.add_argument('--h-fit', type=int)
    stream_flags.add_argument('--weight-fit-stride', type=int)
    stream_flags.add_argument('--refit-every', type=int)
    stream_flags.add_argument('--normalization',
                              choices=['none', 'per-chunk-amplitude', 'max-amplitude'])
    stream_flags.add_argument('--seed', type=int)
    stream_flags.add_argument('--no-figures', action='store_true')
    stream_flags.add_argument('--out', help="output directory")

    sub = parser.add_subparsers(dest='command', required=True)

    generate = sub.add_parser('generate', help="write a piecewise-sine dataset and its truth sidecar")
    group = generate.add_mutually_exclusive_group(required=True)
    group.add_argument('--paper-train', action='store_true', help="8 training chunks")
    group.add_argument('--paper-test', action='store_true', help="8 test chunks")
    group.add_argument('--paper-full', action='store_true', help="train followed by test")
    group.add_argument('--spec', help="YAML/JSON chunk specification")
    generate.add_argument('--out', required=True, help="CSV path")
    generate.add_argument('--dt', type=float)
    generate.add_argument('--seed', type=int)
    generate.add_argument('--noise-std', type=float)

    run = sub.add_parser('run', parents=[stream_flags], help="stream run of one method")
    run.add_argument('--method', choices=['rewts', 'global'], default='rewts')
    run.add_argument('--resume', help="directory of saved chunk models (rewts only)")

    compare = sub.add_parser('compare', help="compare two run directories")
    compare.add_argument('rewts_dir')
    compare.add_argument('global_dir')
    compare.add_argument('--out', help="output directory")
    compare.add_argument('--no-figures', action='store_true')

    sweep_cmd = sub.add_parser('sweep', parents=[stream_flags], help="sweep chunk or look-back length")
    sweep_cmd.add_argument('--axis', choices=['chunk_length', 'lookback_length'], required=True)
    sweep_cmd.add_argument('--values', required=True, help="comma separated integers")
    sweep_cmd.add_argument('--jobs', type=int)

    sub.add_parser('bench', parents=[stream_flags], help="training and forecast timing")
    sub.add_parser('experiment', parents=[stream_flags],
                   help="piecewise-sine train/test comparison")
    return parser


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def collect_overrides(args: argparse.Namespace,
                      presets: Optional[PresetManager] = None) -> Dict[str, Any]:
    """プリセット < --set < 個別フラグ の順に上書き辞書を作る"""
    overrides: Dict[str, Any] = {}
    if args.preset:
        overrides.update((presets or PresetManager()).get_overrides(args.preset))
    for item in args.set:
        if '=' not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'", field="--set")
        key, value = item.split('=', 1)
        overrides[key.strip()] = _parse_value(value)
    for name, key in FLAG_OVERRIDES.items():
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, 'data', None):
        overrides['data.source'] = 'csv'
        overrides['data.csv_path'] = args.data
    if getattr(args, 'no_figures', False):
        overrides['output.figures'] = False
    return overrides


class ReWTSApp:
    """コマンドの実行を受け持つコントローラー"""

    def __init__(self, args: argparse.Namespace):
        """
        初期化

        Args:
            args: 解析済みのコマンドライン引数
        """
        self.args = args
        self.out_dir: Optional[Path] = None
        self.presets = PresetManager()
        self.config = Config(args.config, overrides=collect_overrides(args, self.presets))
        self.logger = EngineLogger(self.config)

    def run(self) -> int:
        """サブコマンドを実行"""
        command = self.args.command
        self.config.raise_for_errors()
        self.logger.log_run_header(f"ReWTS {command}", self.config)
        if self.presets.current:
            self.logger.info(self.presets.get_preset_info())
        handler = getattr(self, f"cmd_{command}")
        handler()
        self.logger.info(f"Finished {command}: {self.out_dir}")
        return EXIT_OK

    def _prepare_out(self, default_name: str) -> Path:
        out = getattr(self.args, 'out', None)
        self.out_dir = Path(out) if out else Path(self.config.output_dir) / default_name
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config.save(self.out_dir / "config.yaml")
        return self.out_dir

    def _load_data(self):
        """設定に従って系列と（あれば）真のパラメータを読み込む"""
        cfg = self.config
        if cfg.data_source == 'csv':
            schema = CsvSchema(target=cfg.target_column, covariates=tuple(cfg.covariate_columns),
                               future_known=tuple(cfg.future_known),
                               time_column=cfg.time_column or None, delimiter=cfg.delimiter,
                               step=float(cfg.step))
            frame = ingest_csv(cfg.csv_path, schema, lenient=cfg.lenient,
                               resample=cfg.resample or None)
            return frame, load_truth(cfg.csv_path)
        dataset = generate_sine_with_truth(default_paper_spec(
            cfg.synthetic_split, dt=float(cfg.dt), seed=int(cfg.seed),
            noise_std=float(cfg.noise_std)))
        return dataset.frame, dataset.truth

    def cmd_generate(self):
        """区分正弦波データセットを書き出す"""
        args = self.args
        if args.spec:
            with open(args.spec, 'r', encoding='utf-8') as f:
                spec = spec_from_dict(yaml.safe_load(f))
        else:
            split = 'train' if args.paper_train else 'test' if args.paper_test else 'full'
            spec = default_paper_spec(
                split,
                dt=args.dt if args.dt is not None else float(self.config.dt),
                seed=args.seed if args.seed is not None else int(self.config.seed),
                noise_std=args.noise_std if args.noise_std is not None
                else float(self.config.noise_std))
        dataset = generate_sine_with_truth(spec)
        csv_path, sidecar = save_dataset(dataset, Path(args.out))
        self.out_dir = csv_path.parent
        self.logger.info(f"Wrote {len(dataset.frame)} rows ({len(dataset.truth)} chunks) "
                         f"to {csv_path} and {sidecar}")

    def cmd_run(self):
        """1手法のストリーム実行"""
        method = self.args.method
        out = self._prepare_out(f"run_{method}")
        frame, truth = self._load_data()
        settings = RunSettings.from_config(self.config)

        if method == 'rewts':
            resume = None
            if self.args.resume:
                resume_dir = Path(self.args.resume)
                # 実行ディレクトリを渡された場合は models/ を読む
                if (resume_dir / "models").is_dir():
                    resume_dir = resume_dir / "models"
                resume = load_models(resume_dir)
                self.logger.info(f"Resuming with {len(resume)} saved chunk models")
            qp_debug = out / "qp_debug" if self.config.qp_debug else None
            run = run_rewts(frame, settings, logger=self.logger,
                            use_cache=self.config.forecast_cache, resume_models=resume,
                            qp_debug_dir=qp_debug)
            extra = {'model_count': len(run.models)}
        else:
            run, state = run_global(frame, settings, logger=self.logger)
            extra = {'retrain_count': state.retrain_count, 'fit_count': state.fit_count,
                     'trained_through': state.trained_through}

        reports = stream_reports(run, frame, settings, truth, log_to=self.logger)
        self.logger.log_chunk_report(method, reports)
        write_stream_log(run.records, out / f"{method}_log.jsonl")
        write_stream_csv(run.records, out / "stream.csv")
        save_models(out / "models", run.models)
        extra.update({'method': method, 'normalization': settings.normalization,
                      'anchors': len(run.records)})
        write_report(out, {method: reports}, extra=extra)
        if self.config.figures and method == 'rewts':
            plot_weights(out / FIGURES_DIR / "weights.svg", run.records)

    def _load_run(self, run_dir: str):
        report = read_report(Path(run_dir))
        method = report.get('method')
        chunks = report.get('chunks', {})
        if method not in chunks:
            raise ComparisonError("run directory has no chunk report", path=str(run_dir))
        reports = [ChunkReport(**r) for r in chunks[method]]
        return reports, report.get('normalization', 'none')

    def cmd_compare(self):
        """2つの実行結果を比較"""
        out = self._prepare_out("compare")
        rewts, rewts_norm = self._load_run(self.args.rewts_dir)
        global_, global_norm = self._load_run(self.args.global_dir)
        if rewts_norm != global_norm:
            raise ComparisonError("runs use different normalizations", rewts=rewts_norm,
                                  global_=global_norm)
        comparison = compare_runs(rewts, global_, rewts_norm)
        self.logger.log_comparison(comparison)
        write_report(out, {'rewts': rewts, 'global': global_}, comparison,
                     extra={'normalization': rewts_norm,
                            'sources': [str(self.args.rewts_dir), str(self.args.global_dir)]})
        if self.config.figures:
            plot_chunk_losses(out / FIGURES_DIR / "chunk_losses.svg", comparison)

    def cmd_sweep(self):
        """チャンク長・ルックバック長の掃引"""
        out = self._prepare_out(f"sweep_{self.args.axis}")
        try:
            values = [int(v) for v in self.args.values.split(',') if v.strip()]
        except ValueError:
            raise ConfigError(f"--values must be comma separated integers: {self.args.values}",
                              field="--values")
        frame, truth = self._load_data()
        settings = RunSettings.from_config(self.config)
        results = sweep(frame, self.args.axis, values, settings, truth=truth,
                        jobs=int(self.config.jobs), log_to=self.logger)
        rows = [r.to_row() for r in results]
        payload = {'axis': self.args.axis, 'values': values, 'rows': rows,
                   'trend': sweep_trend(results),
                   'comparisons': [r.comparison.to_dict() if r.ok else None for r in results],
                   'errors': [r.error for r in results]}
        write_table(out, rows, payload)
        if self.config.figures:
            plot_sweep(out / FIGURES_DIR / "sweep.svg", results, self.args.axis)

    def cmd_bench(self):
        """学習時間・予測時間の計測"""
        out = self._prepare_out("bench")
        frame, _ = self._load_data()
        settings = RunSettings.from_config(self.config)
        timing = timing_bench(frame, settings, log_to=self.logger)
        training = timing.training_frame()
        forecast = timing.forecast_frame()
        training.to_csv(out / "report.csv", index=False, float_format='%.6g')
        forecast.to_csv(out / "timing_forecast.csv", index=False, float_format='%.6g')
        write_json(out / "report.json", {
            'spearman_rho': timing.spearman_rho,
            'global_time_ratio': timing.global_time_ratio,
            'rewts_total_train_s': timing.rewts_cumulative_train[-1],
            'global_total_train_s': timing.global_cumulative_train[-1],
            'series': timing.to_dict(),
        })
        if self.config.figures:
            plot_timing(out / FIGURES_DIR / "timing.svg", timing)

    def cmd_experiment(self):
        """区分正弦波での学習区間・評価区間の比較実験"""
        out = self._prepare_out("experiment")
        settings = RunSettings.from_config(self.config)
        result = run_sine_experiment(settings, dt=float(self.config.dt),
                                     seed=int(self.config.seed),
                                     noise_std=float(self.config.noise_std),
                                     log_to=self.logger)
        self.logger.log_comparison(result.train.comparison)
        self.logger.log_comparison(result.test.comparison)
        save_experiment(result, out, figures=self.config.figures)


def _emit_error(payload: Dict[str, Any], out_dir: Optional[Path]):
    """エラーJSONを標準エラーと出力ディレクトリに書く"""
    text = json.dumps({'error': payload}, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(text + "\n", encoding='utf-8')
        except OSError:
            pass


def main(argv: Optional[List[str]] = None) -> int:
    """エントリーポイント"""
    args = build_parser().parse_args(argv)
    app = None
    out_dir = Path(args.out) if getattr(args, 'out', None) and args.command != 'generate' else None
    try:
        app = ReWTSApp(args)
        return app.run()
    except ReWTSError as e:
        if app is not None:
            app.logger.log_error_with_context(e, args.command)
            out_dir = app.out_dir or out_dir
        _emit_error(e.to_dict(), out_dir)
        return EXIT_ERROR
    except Exception as e:
        if app is not None:
            app.logger.critical(f"Fatal error: {type(e).__name__}: {e}")
            out_dir = app.out_dir or out_dir
        _emit_error({'category': 'internal', 'message': f"{type(e).__name__}: {e}",
                     'context': {}}, out_dir)
        return EXIT_UNEXPECTED
    finally:
        if app is not None:
            app.logger.close()


if __name__ == "__main__":
    sys.exit(main())
