"""
設定管理モジュール
YAMLファイル・環境変数・コマンドライン上書きから実行設定を読み込む
"""

import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from errors import ConfigError


NORMALIZATIONS = ('none', 'per-chunk-amplitude', 'max-amplitude')
MODEL_KINDS = ('elastic_net', 'persistence', 'mean')
DATA_SOURCES = ('synthetic', 'csv')
SYNTHETIC_SPLITS = ('train', 'test', 'full')


class Config:
    """実行設定クラス（RunConfig）"""

    def __init__(self,
                 config_path: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None,
                 data: Optional[Dict[str, Any]] = None):
        """
        初期化

        Args:
            config_path: 設定ファイルのパス（デフォルト: config/config.yaml）
            overrides: ドット区切りキーによる上書き（例: {"stream.lookback": 80}）
            data: ファイルの代わりに直接渡す設定辞書
        """
        # プロジェクトルートディレクトリを取得
        self.project_root = Path(__file__).parent.parent

        # 環境変数を読み込み
        env_path = self.project_root / "config" / ".env"
        load_dotenv(env_path)

        if data is not None:
            self.config_path = None
            raw = copy.deepcopy(data)
        else:
            if config_path is None:
                config_path = self.project_root / "config" / "config.yaml"
            self.config_path = Path(config_path)
            if not self.config_path.exists():
                raise ConfigError(f"Config file not found: {self.config_path}",
                                  field="config_path", path=str(self.config_path))
            # JSON もYAMLとして読める
            with open(self.config_path, 'r', encoding='utf-8') as f:
                raw = yaml.safe_load(f) or {}

        if not isinstance(raw, dict):
            raise ConfigError("Config root must be a mapping", field="<root>")

        for key, value in (overrides or {}).items():
            _set_dotted(raw, key, value)

        env_level = os.getenv('REWTS_LOG')
        if env_level and 'logging.level' not in (overrides or {}):
            raw.setdefault('logging', {})['level'] = env_level.upper()

        self._config = raw
        self.errors: List[Tuple[str, str]] = []

        # 設定を属性として展開
        self._load_config()

    def _load_config(self):
        """設定をクラス属性として読み込む"""

        # データ設定
        data_config = self._section('data')
        self.data_source = data_config.get('source', 'synthetic')
        self.csv_path = data_config.get('csv_path', '') or ''
        self.time_column = data_config.get('time_column', 't')
        self.target_column = data_config.get('target_column', 'y')
        self.covariate_columns = list(data_config.get('covariate_columns', []) or [])
        self.future_known = list(data_config.get('future_known', []) or [])
        self.delimiter = data_config.get('delimiter', ',')
        self.lenient = bool(data_config.get('lenient', False))
        self.resample = data_config.get('resample', '') or ''
        self.step = data_config.get('step', 1)

        # 合成データ設定
        synthetic_config = self._section('synthetic')
        self.synthetic_split = synthetic_config.get('split', 'train')
        self.dt = synthetic_config.get('dt', 0.1)
        self.noise_std = synthetic_config.get('noise_std', 0.0)

        # ストリーム設定
        stream_config = self._section('stream')
        self.chunk_length = stream_config.get('chunk_length', 500)
        self.lookback = stream_config.get('lookback', 160)
        self.horizon = stream_config.get('horizon', 30)
        self.stride = stream_config.get('stride', 30)
        self.h_fit = stream_config.get('h_fit', self.horizon)
        self.weight_fit_stride = stream_config.get('weight_fit_stride', 1)
        self.refit_every = stream_config.get('refit_every', 1)
        self.forecast_cache = bool(stream_config.get('forecast_cache', True))

        # モデル設定
        model_config = self._section('model')
        self.model_kind = model_config.get('kind', 'elastic_net')
        self.input_length = model_config.get('input_length', 80)
        self.covariate_lags = dict(model_config.get('covariate_lags', {}) or {})
        self.use_future_covariates = bool(model_config.get('use_future_covariates', True))
        self.lambda_ = model_config.get('lambda', 1e-3)
        self.alpha = model_config.get('alpha', 0.5)
        self.max_iter = model_config.get('max_iter', 1000)
        self.tol = model_config.get('tol', 1e-6)
        self.fit_intercept = bool(model_config.get('fit_intercept', True))

        # 重みQP設定
        qp_config = self._section('qp')
        self.qp_ridge_eps = qp_config.get('ridge_eps', None)
        self.qp_tol = qp_config.get('tol', 1e-9)
        self.qp_max_iter = qp_config.get('max_iter', 5000)
        self.qp_debug = bool(qp_config.get('debug_dump', False))

        # 評価設定
        evaluation_config = self._section('evaluation')
        self.normalization = evaluation_config.get('normalization', 'max-amplitude')
        self.verify_loss = bool(evaluation_config.get('verify_loss', True))

        # 出力設定
        output_config = self._section('output')
        self.output_dir = self._resolve(output_config.get('dir', 'runs'))
        self.figures = bool(output_config.get('figures', True))

        # ログ設定
        logging_config = self._section('logging')
        self.log_level = str(logging_config.get('level', 'INFO')).upper()
        self.log_console = bool(logging_config.get('console', True))
        self.log_file = bool(logging_config.get('file', True))
        self.log_dir = self._resolve(logging_config.get('log_dir', 'logs'))

        # 実行設定
        execution_config = self._section('execution')
        self.seed = execution_config.get('seed', 0)
        self.jobs = execution_config.get('jobs', 1)

    def _section(self, name: str) -> Dict[str, Any]:
        section = self._config.get(name, {}) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"Section '{name}' must be a mapping", field=name)
        return section

    def _resolve(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.project_root / path

    def validate(self) -> bool:
        """
        設定の妥当性をチェック

        Returns:
            妥当ならTrue（エラーは self.errors に (フィールド, 理由) で蓄積）
        """
        errors = []

        def check(condition: bool, field: str, message: str):
            if not condition:
                errors.append((field, message))

        check(self.data_source in DATA_SOURCES, 'data.source',
              f"must be one of {DATA_SOURCES}")
        if self.data_source == 'csv':
            check(bool(self.csv_path), 'data.csv_path', "required when data.source is csv")
            unknown = [c for c in self.future_known if c not in self.covariate_columns]
            check(not unknown, 'data.future_known',
                  f"columns not listed in covariate_columns: {unknown}")
        check(self.synthetic_split in SYNTHETIC_SPLITS, 'synthetic.split',
              f"must be one of {SYNTHETIC_SPLITS}")
        check(_is_number(self.dt) and self.dt > 0, 'synthetic.dt', "must be > 0")
        check(_is_number(self.noise_std) and self.noise_std >= 0, 'synthetic.noise_std',
              "must be >= 0")

        for field, value in (('stream.chunk_length', self.chunk_length),
                             ('stream.lookback', self.lookback),
                             ('stream.horizon', self.horizon),
                             ('stream.stride', self.stride),
                             ('stream.h_fit', self.h_fit),
                             ('stream.weight_fit_stride', self.weight_fit_stride),
                             ('stream.refit_every', self.refit_every),
                             ('model.input_length', self.input_length),
                             ('model.max_iter', self.max_iter),
                             ('qp.max_iter', self.qp_max_iter),
                             ('execution.jobs', self.jobs)):
            check(_is_int(value) and value >= 1, field, "must be an integer >= 1")

        if _is_int(self.lookback) and _is_int(self.h_fit):
            check(self.lookback >= self.h_fit, 'stream.lookback',
                  f"lookback ({self.lookback}) must be >= h_fit ({self.h_fit})")
        if _is_int(self.h_fit) and _is_int(self.horizon):
            check(self.h_fit <= self.horizon, 'stream.h_fit',
                  f"h_fit ({self.h_fit}) must be <= horizon ({self.horizon})")

        check(self.model_kind in MODEL_KINDS, 'model.kind', f"must be one of {MODEL_KINDS}")
        check(_is_number(self.lambda_) and self.lambda_ >= 0, 'model.lambda', "must be >= 0")
        check(_is_number(self.alpha) and 0.0 <= self.alpha <= 1.0, 'model.alpha',
              "must be in [0, 1]")
        check(_is_number(self.tol) and self.tol > 0, 'model.tol', "must be > 0")
        for name, lags in self.covariate_lags.items():
            check(isinstance(lags, list) and all(_is_int(l) and l >= 0 for l in lags),
                  f'model.covariate_lags.{name}', "must be a list of integers >= 0")

        check(self.qp_ridge_eps is None or (_is_number(self.qp_ridge_eps) and self.qp_ridge_eps >= 0),
              'qp.ridge_eps', "must be null or >= 0")
        check(_is_number(self.qp_tol) and self.qp_tol > 0, 'qp.tol', "must be > 0")
        check(self.normalization in NORMALIZATIONS, 'evaluation.normalization',
              f"must be one of {NORMALIZATIONS}")
        check(_writable(self.output_dir), 'output.dir', f"not writable: {self.output_dir}")

        self.errors = errors
        return not errors

    def raise_for_errors(self):
        """validate() 失敗時に最初のエラーを ConfigError として送出"""
        if not self.validate():
            field, message = self.errors[0]
            raise ConfigError(f"Invalid config value for {field}: {message}",
                              field=field, errors=[f"{f}: {m}" for f, m in self.errors])

    def lag_spec(self):
        """LagSpec を構築"""
        from forecasters import LagSpec
        return LagSpec(
            input_length=int(self.input_length),
            covariate_lags={k: tuple(v) for k, v in self.covariate_lags.items()},
            use_future_covariates=self.use_future_covariates,
        )

    def model_params(self):
        """ElasticNetParams を構築"""
        from forecasters import ElasticNetParams
        return ElasticNetParams(
            lambda_=float(self.lambda_),
            alpha=float(self.alpha),
            max_iter=int(self.max_iter),
            tol=float(self.tol),
            fit_intercept=self.fit_intercept,
        )

    def to_dict(self) -> Dict[str, Any]:
        """解決済みの設定を辞書で返す（プロベナンス用）"""
        return {
            'data': {
                'source': self.data_source,
                'csv_path': str(self.csv_path),
                'time_column': self.time_column,
                'target_column': self.target_column,
                'covariate_columns': list(self.covariate_columns),
                'future_known': list(self.future_known),
                'delimiter': self.delimiter,
                'lenient': self.lenient,
                'resample': self.resample,
                'step': self.step,
            },
            'synthetic': {
                'split': self.synthetic_split,
                'dt': self.dt,
                'noise_std': self.noise_std,
            },
            'stream': {
                'chunk_length': self.chunk_length,
                'lookback': self.lookback,
                'horizon': self.horizon,
                'stride': self.stride,
                'h_fit': self.h_fit,
                'weight_fit_stride': self.weight_fit_stride,
                'refit_every': self.refit_every,
                'forecast_cache': self.forecast_cache,
            },
            'model': {
                'kind': self.model_kind,
                'input_length': self.input_length,
                'covariate_lags': {k: list(v) for k, v in self.covariate_lags.items()},
                'use_future_covariates': self.use_future_covariates,
                'lambda': self.lambda_,
                'alpha': self.alpha,
                'max_iter': self.max_iter,
                'tol': self.tol,
                'fit_intercept': self.fit_intercept,
            },
            'qp': {
                'ridge_eps': self.qp_ridge_eps,
                'tol': self.qp_tol,
                'max_iter': self.qp_max_iter,
                'debug_dump': self.qp_debug,
            },
            'evaluation': {
                'normalization': self.normalization,
                'verify_loss': self.verify_loss,
            },
            'output': {
                'dir': str(self.output_dir),
                'figures': self.figures,
            },
            'logging': {
                'level': self.log_level,
                'console': self.log_console,
                'file': self.log_file,
                'log_dir': str(self.log_dir),
            },
            'execution': {
                'seed': self.seed,
                'jobs': self.jobs,
            },
        }

    def save(self, path: Path) -> Path:
        """解決済み設定をYAMLで保存"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True, allow_unicode=True)
        return path

    def __str__(self) -> str:
        """設定の文字列表現"""
        source = self.csv_path if self.data_source == 'csv' else f"synthetic ({self.synthetic_split}, dt={self.dt})"
        return f"""
ReWTS Forecasting Engine Configuration
======================================
Data:
  Source: {source}

Stream:
  Chunk Length (l_c): {self.chunk_length}
  Look-back (l_b): {self.lookback}
  Horizon (h): {self.horizon}  Stride (s): {self.stride}
  Weight-fit Horizon: {self.h_fit}  Weight-fit Stride: {self.weight_fit_stride}

Model:
  Kind: {self.model_kind}
  Input Length: {self.input_length}
  Lambda: {self.lambda_}  Alpha: {self.alpha}

Evaluation:
  Normalization: {self.normalization}
"""


def _set_dotted(raw: Dict[str, Any], dotted: str, value: Any):
    """"a.b.c" 形式のキーで入れ子の辞書に値を設定"""
    parts = dotted.split('.')
    node = raw
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _writable(path: Path) -> bool:
    """存在するか作成可能な最上位の親ディレクトリが書き込み可能か"""
    probe = Path(path)
    while not probe.exists():
        if probe.parent == probe:
            return False
        probe = probe.parent
    return probe.is_dir() and os.access(probe, os.W_OK)


if __name__ == "__main__":
    # テスト
    config = Config()
    print(config)
    print(f"Configuration valid: {config.validate()}")
