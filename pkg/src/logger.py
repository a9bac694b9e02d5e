"""
ログ管理モジュール
実行ログ、チャンク別レポート、比較サマリーを記録
"""

import logging
import sys
from datetime import datetime
from pathlib import Path

import colorlog


ROOT_LOGGER_NAME = "rewts"


def get_logger(module: str) -> logging.Logger:
    """
    ライブラリモジュール用のロガーを取得

    EngineLogger が設定した "rewts" ロガーのハンドラーを共有する。
    """
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{module}")


class EngineLogger:
    """予測エンジン用ロガークラス"""

    def __init__(self, config, name: str = ROOT_LOGGER_NAME):
        """
        初期化

        Args:
            config: 設定オブジェクト
            name: ロガー名
        """
        self.config = config
        self.name = name
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, config.log_level, logging.INFO))

        # 同一プロセスで再初期化された場合の重複出力を防ぐ
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()

        # ログディレクトリを作成
        self.log_dir = Path(config.log_dir)
        if config.log_file:
            self.log_dir.mkdir(parents=True, exist_ok=True)

        # ハンドラーを設定
        self._setup_handlers()

    def _setup_handlers(self):
        """ログハンドラーを設定"""

        # フォーマッター
        log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        date_format = '%Y-%m-%d %H:%M:%S'

        # コンソールハンドラー（カラー付き）
        if self.config.log_console:
            console_handler = colorlog.StreamHandler(sys.stderr)
            console_handler.setLevel(logging.DEBUG)

            color_formatter = colorlog.ColoredFormatter(
                '%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                datefmt=date_format,
                log_colors={
                    'DEBUG': 'cyan',
                    'INFO': 'green',
                    'WARNING': 'yellow',
                    'ERROR': 'red',
                    'CRITICAL': 'red,bg_white',
                }
            )
            console_handler.setFormatter(color_formatter)
            self.logger.addHandler(console_handler)

        # ファイルハンドラー
        if self.config.log_file:
            file_handler = logging.FileHandler(self._get_log_file(), encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(log_format, datefmt=date_format))
            self.logger.addHandler(file_handler)

    def _get_log_file(self) -> Path:
        """ログファイルパスを取得"""
        today = datetime.now().strftime('%Y-%m-%d')
        return self.log_dir / f"rewts_{today}.log"

    def close(self):
        """ハンドラーを閉じる"""
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()

    def debug(self, message: str):
        """DEBUGレベルのログ"""
        self.logger.debug(message)

    def info(self, message: str):
        """INFOレベルのログ"""
        self.logger.info(message)

    def warning(self, message: str):
        """WARNINGレベルのログ"""
        self.logger.warning(message)

    def error(self, message: str):
        """ERRORレベルのログ"""
        self.logger.error(message)

    def critical(self, message: str):
        """CRITICALレベルのログ"""
        self.logger.critical(message)

    def log_run_header(self, title: str, config=None):
        """
        実行開始バナーを出力

        Args:
            title: 実行内容（例: "ReWTS stream run"）
            config: 設定オブジェクト（指定時は要約も出力）
        """
        self.info("=" * 60)
        self.info(title)
        self.info("=" * 60)
        if config is not None:
            self.info(str(config))

    def log_stream_record(self, record):
        """アンカー毎の予測結果（DEBUG）"""
        if record.weights is not None:
            top = int(max(range(len(record.weights)), key=lambda j: record.weights[j]))
            self.debug(
                f"Anchor {record.anchor} [chunk {record.chunk_id}] models={len(record.model_ids)} "
                f"argmax={record.model_ids[top]} w_max={record.weights[top]:.4f} "
                f"kkt={record.kkt_residual:.2e} fit={record.fit_seconds * 1e3:.2f}ms"
            )
        else:
            self.debug(f"Anchor {record.anchor} [chunk {record.chunk_id}] method={record.method} "
                       f"forecast={record.forecast_seconds * 1e3:.2f}ms")

    def log_chunk_report(self, method: str, reports):
        """
        チャンク別損失を出力

        Args:
            method: "rewts" または "global"
            reports: ChunkReport のリスト
        """
        self.info("=" * 60)
        self.info(f"Per-chunk loss ({method})")
        for report in reports:
            self.info(
                f"Chunk {report.chunk_id:>3}: MSE={report.mse:.4e} "
                f"normalized={report.normalized_mse:.4e} anchors={report.anchor_count}"
            )
        self.info("=" * 60)

    def log_comparison(self, comparison):
        """
        比較サマリーを出力

        Args:
            comparison: ComparisonReport
        """
        self.info("=" * 60)
        self.info("Comparison Summary")
        self.info(f"ReWTS mean MSE: {comparison.rewts_mean:.4e}")
        self.info(f"Global mean MSE: {comparison.global_mean:.4e}")
        self.info(f"ReWTS mean normalized MSE: {comparison.rewts_mean_normalized:.4e}")
        self.info(f"Global mean normalized MSE: {comparison.global_mean_normalized:.4e}")
        self.info(f"Percent difference: {comparison.percent_difference:.2f}%")
        self.info("=" * 60)

    def log_convergence_alert(self, anchor: int, message: str):
        """QP未収束の警告"""
        self.warning(f"QP ALERT [anchor {anchor}]: {message}")

    def log_error_with_context(self, error: Exception, context: str):
        """
        コンテキスト付きでエラーをログに記録

        Args:
            error: 例外オブジェクト
            context: コンテキスト情報
        """
        self.error(f"Error in {context}: {type(error).__name__}: {str(error)}")
