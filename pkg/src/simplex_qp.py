"""
単体制約付き二次計画モジュール
ルックバック予測から (Q, c) を組み立て、確率単体上で重みを求める
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from errors import ParameterError, QPConvergenceError, ShapeError


WEIGHT_FLOOR = 1e-12
SUPPORT_TOL = 1e-10
POLISH_EVERY = 10


@dataclass(frozen=True, eq=False)
class SimplexQP:
    """
    min ½ wᵀQw − cᵀw  s.t. w ≥ 0, Σw = 1

    Q = Σ_k M_kᵀM_k + ridge_eps·I, c = Σ_k M_kᵀy_k。
    target_energy = Σ_k ||y_k||² は目的関数の定数項の復元に使う。
    """

    Q: np.ndarray
    c: np.ndarray
    ridge_eps: float = 0.0
    target_energy: float = 0.0
    n_anchors: int = 0

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        c = np.array(self.c, dtype=float).reshape(-1)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] != c.shape[0]:
            raise ShapeError("Q must be m x m and c length m", Q=Q.shape, c=c.shape)
        if Q.shape[0] < 1:
            raise ParameterError("QP needs at least one model")
        scale = max(1.0, float(np.max(np.abs(Q))))
        if np.max(np.abs(Q - Q.T)) > 1e-10 * scale:
            raise ShapeError("Q is not symmetric")
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(c))):
            raise ParameterError("QP contains non-finite entries")
        Q.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 'c', c)

    @property
    def m(self) -> int:
        return int(self.c.shape[0])

    @property
    def scale(self) -> float:
        """許容誤差を相対化するためのスケール"""
        return max(1.0, float(np.max(np.abs(np.diag(self.Q)))), float(np.max(np.abs(self.c))))


@dataclass(frozen=True, eq=False)
class WeightVector:
    """単体上の重みと求解診断"""

    w: np.ndarray
    iterations: int = 0
    kkt_residual: float = 0.0
    objective: float = 0.0
    converged: bool = True
    method: str = "trivial"
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, 'w', w)

    @property
    def m(self) -> int:
        return int(self.w.shape[0])

    def argmax(self) -> int:
        return int(np.argmax(self.w))

    def active(self) -> np.ndarray:
        """重みが正のモデル番号"""
        return np.flatnonzero(self.w > 0)


def assemble_qp(forecast_mats: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                ridge_eps: Optional[float] = None) -> SimplexQP:
    """
    アンカー毎の予測行列 (h, m) と実績 (h,) から QP を組み立てる

    Args:
        forecast_mats: 予測行列のリスト（ForecastMatrix も可）
        targets: 実績ベクトルのリスト
        ridge_eps: 対角に加える正則化（None なら 1e-8·trace(Q)/m）

    Returns:
        SimplexQP
    """
    if len(forecast_mats) == 0:
        raise ParameterError("at least one forecast matrix is required")
    if len(forecast_mats) != len(targets):
        raise ShapeError("forecast and target lists differ in length",
                         forecasts=len(forecast_mats), targets=len(targets))
    mats = [np.asarray(getattr(M, 'values', M), dtype=float) for M in forecast_mats]
    shape = mats[0].shape
    if len(shape) != 2 or any(M.shape != shape for M in mats):
        raise ShapeError("forecast matrices must share shape (h, m)",
                         shapes=sorted({M.shape for M in mats}))
    ys = [np.asarray(y, dtype=float).reshape(-1) for y in targets]
    if any(y.shape[0] != shape[0] for y in ys):
        raise ShapeError("target length must equal forecast horizon", h=shape[0])

    M = np.stack(mats)
    Y = np.stack(ys)
    Q = np.einsum('khi,khj->ij', M, M)
    Q = 0.5 * (Q + Q.T)
    c = np.einsum('khi,kh->i', M, Y)
    m = shape[1]
    if ridge_eps is None:
        ridge_eps = 1e-8 * float(np.trace(Q)) / m
    if ridge_eps < 0:
        raise ParameterError("ridge_eps must be >= 0", ridge_eps=ridge_eps)
    Q = Q + ridge_eps * np.eye(m)
    return SimplexQP(Q=Q, c=c, ridge_eps=float(ridge_eps),
                     target_energy=float(np.sum(Y * Y)), n_anchors=len(mats))


def objective(qp: SimplexQP, w: np.ndarray) -> float:
    """½ wᵀQw − cᵀw"""
    w = np.asarray(w, dtype=float)
    return float(0.5 * w @ qp.Q @ w - qp.c @ w)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """ソートによる確率単体へのユークリッド射影"""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.shape[0] + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def largest_eigenvalue(Q: np.ndarray, max_iter: int = 200, tol: float = 1e-10) -> float:
    """べき乗法による最大固有値の推定（Q は半正定値）"""
    m = Q.shape[0]
    v = np.random.default_rng(0).standard_normal(m)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        Qv = Q @ v
        norm = np.linalg.norm(Qv)
        if norm == 0.0:
            return 0.0
        v = Qv / norm
        new = float(v @ Q @ v)
        if abs(new - estimate) <= tol * max(1.0, abs(new)):
            estimate = new
            break
        estimate = new
    return estimate


def kkt_residual(qp: SimplexQP, w: np.ndarray, support_tol: float = SUPPORT_TOL) -> float:
    """
    KKT条件の最大違反量

    μ は台（w_j > support_tol）上の勾配の中点。台の上では |g_j − μ|、
    台の外では max(0, μ − g_j) を違反とみなす。
    """
    w = np.asarray(w, dtype=float)
    if qp.m == 1:
        return 0.0
    g = qp.Q @ w - qp.c
    support = w > support_tol
    if not np.any(support):
        support = w >= np.max(w)
    g_s = g[support]
    mu = 0.5 * (float(np.max(g_s)) + float(np.min(g_s)))
    residual = float(np.max(np.abs(g_s - mu)))
    if np.any(~support):
        residual = max(residual, float(np.max(np.maximum(mu - g[~support], 0.0))))
    return residual


def clamp_weights(w: np.ndarray) -> np.ndarray:
    """WEIGHT_FLOOR 未満を 0 にして正規化"""
    w = np.where(np.asarray(w, dtype=float) < WEIGHT_FLOOR, 0.0, w)
    total = w.sum()
    if total <= 0:
        raise ParameterError("weight vector has no positive entry")
    return w / total


def _polish(qp: SimplexQP, w: np.ndarray) -> Optional[np.ndarray]:
    """台を固定した等式制約付き問題を KKT 連立方程式で解く"""
    support = np.flatnonzero(w > 0)
    k = support.shape[0]
    if k == 0:
        return None
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = qp.Q[np.ix_(support, support)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([qp.c[support], [1.0]])
    solution = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    w_s = solution[:k]
    if not np.all(np.isfinite(w_s)) or np.min(w_s) < -SUPPORT_TOL:
        return None
    candidate = np.zeros(qp.m)
    candidate[support] = np.maximum(w_s, 0.0)
    total = candidate.sum()
    if total <= 0:
        return None
    return candidate / total


def solve_simplex_qp(qp: SimplexQP, tol: float = 1e-9, max_iter: int = 5000,
                     w0: Optional[np.ndarray] = None) -> WeightVector:
    """
    射影勾配法 + 台固定の仕上げで単体上の QP を解く

    ステップ幅は 1/λ_max(Q)。POLISH_EVERY 反復毎に現在の台で KKT 連立方程式を解き、
    KKT 残差が tol·scale 以下になった時点で終了する。

    Args:
        qp: SimplexQP
        tol: KKT 許容誤差（qp.scale で相対化）
        max_iter: 最大反復回数
        w0: 初期値（単体に射影して使う）

    Returns:
        WeightVector（WEIGHT_FLOOR 未満は 0 にして正規化済み）
    """
    m = qp.m
    if m == 1:
        return WeightVector(w=np.ones(1), objective=objective(qp, np.ones(1)), method="trivial")

    tol_eff = tol * qp.scale
    lam = largest_eigenvalue(qp.Q)
    step = 1.0 / lam if lam > 0 else 1.0 / qp.scale

    if w0 is None or np.asarray(w0).shape != (m,):
        w = np.full(m, 1.0 / m)
    else:
        w = project_simplex(np.asarray(w0, dtype=float))

    best_w = w
    best_obj = objective(qp, w)
    residual = kkt_residual(qp, w)

    for iteration in range(1, max_iter + 1):
        if residual <= tol_eff:
            return _finish(qp, w, iteration - 1, "pgd", tol_eff)

        w = project_simplex(w - step * (qp.Q @ w - qp.c))
        obj = objective(qp, w)
        if obj < best_obj:
            best_w, best_obj = w, obj

        if iteration == 1 or iteration % POLISH_EVERY == 0:
            candidate = _polish(qp, w)
            if candidate is not None and kkt_residual(qp, candidate) <= tol_eff:
                return _finish(qp, candidate, iteration, "polish", tol_eff)

        residual = kkt_residual(qp, w)

    if residual <= tol_eff:
        return _finish(qp, w, max_iter, "pgd", tol_eff)

    best = clamp_weights(best_w)
    diagnostics = {
        'iterations': max_iter,
        'kkt_residual': kkt_residual(qp, best),
        'tolerance': tol_eff,
        'scale': qp.scale,
        'objective': objective(qp, best),
        'm': m,
    }
    raise QPConvergenceError("simplex QP did not reach KKT tolerance", weights=best,
                             diagnostics=diagnostics)


def _finish(qp: SimplexQP, w: np.ndarray, iterations: int, method: str,
            tol_eff: float) -> WeightVector:
    w = clamp_weights(w)
    residual = kkt_residual(qp, w)
    return WeightVector(w=w, iterations=iterations, kkt_residual=residual,
                        objective=objective(qp, w), converged=True, method=method,
                        diagnostics={'tolerance': tol_eff, 'scale': qp.scale,
                                     'scaled_residual': residual / qp.scale,
                                     'ridge_eps': qp.ridge_eps})


def dump_qp_debug(path: Path, qp: SimplexQP, weights: WeightVector) -> Path:
    """(Q, c, w, 残差) をJSONで保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'Q': qp.Q.tolist(),
        'c': qp.c.tolist(),
        'ridge_eps': qp.ridge_eps,
        'n_anchors': qp.n_anchors,
        'w': weights.w.tolist(),
        'kkt_residual': weights.kkt_residual,
        'objective': weights.objective,
        'iterations': weights.iterations,
        'method': weights.method,
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path
