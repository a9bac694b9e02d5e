"""
エラー定義モジュール
予測エンジン全体で使う例外クラスとカテゴリ
"""

from typing import Any, Dict, Optional


class ReWTSError(Exception):
    """エンジン共通の基底例外

    category は CLI のエラーJSONにそのまま出力される。
    """

    category = "error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        """機械可読な辞書表現"""
        return {
            'category': self.category,
            'message': self.message,
            'context': {k: _plain(v) for k, v in self.context.items()},
        }

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={_plain(v)}" for k, v in self.context.items())
        return f"{self.message} ({details})"


class SchemaError(ReWTSError):
    category = "schema"


class OrderingError(ReWTSError):
    category = "ordering"


class EmptyInputError(ReWTSError):
    category = "empty-input"


class DataSourceError(ReWTSError):
    """入力ファイルが存在しない・読めない"""

    category = "io"

    def __init__(self, message: str, path: str, **context: Any):
        super().__init__(message, path=str(path), **context)
        self.path = str(path)


class ParseError(ReWTSError):
    category = "parse"


class ParameterError(ReWTSError, ValueError):
    category = "parameter"


class ShapeError(ReWTSError, ValueError):
    category = "shape"


class RangeIndexError(ReWTSError, IndexError):
    category = "index"


class InsufficientDataError(ReWTSError):
    category = "insufficient-data"


class NumericError(ReWTSError, ArithmeticError):
    category = "numeric"


class CoverageError(ReWTSError):
    category = "coverage"


class ComparisonError(ReWTSError):
    category = "comparison"


class ConfigError(ReWTSError):
    """設定値エラー（フィールドパス付き）"""

    category = "config"

    def __init__(self, message: str, field: Optional[str] = None, **context: Any):
        super().__init__(message, field=field, **context)
        self.field = field


class QPConvergenceError(ReWTSError):
    """
    重みQPが max_iter 以内に収束しなかった

    Args:
        message: メッセージ
        weights: 最良の実行可能解（単体上）
        diagnostics: 反復回数・KKT残差などの診断情報
    """

    category = "convergence"

    def __init__(self, message: str, weights, diagnostics: Dict[str, Any]):
        super().__init__(message, **diagnostics)
        self.weights = weights
        self.diagnostics = diagnostics


def _plain(value: Any) -> Any:
    """JSON化できる値に変換"""
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    return str(value)
