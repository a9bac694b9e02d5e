"""
ReWTS Forecasting Engine
チャンク単位の時系列モデルを重み付きアンサンブルで合成するストリーミング予測エンジン
"""

__version__ = "1.0.0"
