"""
設定プリセットモジュール
よく使う実験設定を名前で呼び出し、Config の上書きとして適用する
"""

import logging
from typing import Any, Dict, List, Optional

from errors import ConfigError


class PresetManager:
    """名前付き実行設定の管理"""

    # 実験別の推奨設定（値は Config のドット区切りキー）
    EXPERIMENT_PRESETS = [
        {
            'name': 'sine-hstep',
            'overrides': {
                'data.source': 'synthetic',
                'stream.chunk_length': 500,
                'stream.lookback': 160,
                'stream.horizon': 30,
                'stream.h_fit': 30,
                'stream.stride': 30,
                'model.input_length': 80,
            },
            'description': '区分正弦波: 500点チャンク, 30ステップ先を30点毎に予測'
        },
        {
            'name': 'sine-onestep',
            'overrides': {
                'data.source': 'synthetic',
                'stream.chunk_length': 500,
                'stream.lookback': 160,
                'stream.horizon': 30,
                'stream.h_fit': 1,
                'stream.stride': 30,
                'model.input_length': 80,
            },
            'description': '区分正弦波: 1ステップ先で重みを学習し30回再帰適用'
        },
        {
            'name': 'plant-default',
            'overrides': {
                'data.source': 'csv',
                'stream.chunk_length': 2016,
                'stream.lookback': 300,
                'stream.horizon': 6,
                'stream.h_fit': 6,
                'stream.stride': 6,
                'model.input_length': 48,
            },
            'description': '10分間隔の設備データ: 14日チャンク, 1時間先を予測'
        },
    ]

    def __init__(self, logger: Optional[logging.Logger] = None):
        """
        初期化

        Args:
            logger: ロガーオブジェクト
        """
        self.logger = logger or logging.getLogger("rewts.presets")
        self.current = None

    def names(self) -> List[str]:
        return [p['name'] for p in self.EXPERIMENT_PRESETS]

    def get_overrides(self, name: str) -> Dict[str, Any]:
        """
        プリセットの上書き辞書を取得

        Args:
            name: プリセット名

        Returns:
            Config に渡すドット区切りキーの辞書
        """
        for preset in self.EXPERIMENT_PRESETS:
            if preset['name'] == name:
                self.current = preset
                self.logger.info(f"Preset: {name} ({preset['description']})")
                return dict(preset['overrides'])
        raise ConfigError(f"Unknown preset '{name}'", field="preset", available=self.names())

    def get_preset_info(self) -> str:
        """
        選択中のプリセット情報を取得

        Returns:
            プリセット情報の文字列
        """
        if not self.current:
            return "No preset selected"
        lines = [f"{'=' * 60}", f"Preset: {self.current['name']}",
                 f"{self.current['description']}"]
        lines += [f"  {k}: {v}" for k, v in self.current['overrides'].items()]
        lines.append('=' * 60)
        return "\n".join(lines)
