"""
多 shell 多组织约束球面反卷积（MSMT CSD）
================================================================================

功能说明:
    1. fit_mt_csd: 单体素非负约束最小二乘
           min ‖F c − b‖²
           s.t. WM FOD 在约束网格上的幅值 >= −ε，GM >= 0，CSF >= 0
    2. fit_voxelwise: 在 mask 内逐体素拟合（线程池并行 + tqdm 进度条）

求解方法:
    1. 最小距离问题（Lawson–Hanson）
       H = RᵀR，x = R c + R⁻ᵀ g，问题变为 min ‖x‖ s.t. (A R⁻¹) x >= h'
       用 scipy.optimize.nnls 求对偶 NNLS，得到近似解与乘子
    2. 工作集修正（外层迭代）
       取乘子为正的约束中线性无关的一组，在其上精确求解 KKT 方程组；
       违反的约束加入、负乘子的约束删除，直到 KKT 条件成立
    3. 修正失败时退回最小距离解，并按 KKT 条件标记是否收敛

欠定系统（rank(F) < n_total，例如 30 个体积拟合 47 个系数）:
    加 Tikhonov 阻尼 1e-6·‖F‖²_F·I，并在结果中报告阻尼值
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from tqdm import tqdm

from .errors import InternalError, InvalidInputError
from .forward_model import ConvolutionOperator
from .settings import get_setting
from .sh_basis import ShScheme, SphereMesh, constraint_mesh, sh_basis_matrix

logger = logging.getLogger(__name__)

# 欠定系统的相对阻尼
DAMPING_SCALE = 1e-6

# 工作集线性无关判定（投影残差 / 行范数）
INDEPENDENCE_TOL = 1e-9


# ==================== 选项与结果 ====================

@dataclass
class CsdOptions:
    """
    CSD 选项

    mesh: 约束网格（默认 300 个对称方向，只使用其半球）
    epsilon: 非负容差 ε（幅值单位）
    max_iter: 工作集修正的外层迭代上限
    tol: 相对容差（乘子符号判断，相对 ‖Fᵀb‖）
    """

    mesh: Optional[SphereMesh] = None
    epsilon: float = 0.0
    max_iter: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon < 0 or self.tol < 0:
            raise InvalidInputError("CSD 容差不能为负")
        if self.max_iter < 1:
            raise InvalidInputError(f"max_iter 必须为正，收到 {self.max_iter}")
        if self.mesh is not None and len(self.mesh) == 0:
            raise InvalidInputError("约束网格不能为空")

    def resolved_mesh(self) -> SphereMesh:
        return self.mesh if self.mesh is not None else constraint_mesh()


@dataclass
class CsdResult:
    """单体素拟合结果"""

    coeffs: np.ndarray
    converged: bool
    iterations: int
    objective_history: List[float] = field(default_factory=list)
    damping: float = 0.0
    kkt_residual: float = 0.0
    # 起作用约束（A 的行号）及其乘子
    active_set: List[int] = field(default_factory=list)
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ==================== 求解器 ====================

class CsdSolver:
    """
    针对一个算子预先计算 H、Cholesky 因子、约束矩阵等，供多个体素复用（只读，线程安全）
    """

    def __init__(self, op: ConvolutionOperator, opts: Optional[CsdOptions] = None):
        self.op = op
        self.opts = opts or CsdOptions()
        F = op.matrix
        n = op.n_total

        rank = np.linalg.matrix_rank(F)
        self.damping = DAMPING_SCALE * float(np.sum(F * F)) if rank < n else 0.0
        self.H = F.T @ F + self.damping * np.eye(n)
        self.R = scipy.linalg.cholesky(self.H, lower=False)

        # 约束: A c >= h
        directions = self.opts.resolved_mesh().hemisphere
        wm_rows = sh_basis_matrix(directions, ShScheme(op.l_max_wm))
        A = np.zeros((wm_rows.shape[0] + n - op.n_wm, n))
        A[: wm_rows.shape[0], : op.n_wm] = wm_rows
        for k, col in enumerate(range(op.n_wm, n)):
            A[wm_rows.shape[0] + k, col] = 1.0
        self.A = A
        self.h = np.zeros(A.shape[0])
        self.h[: wm_rows.shape[0]] = -self.opts.epsilon
        # 最小距离问题的约束矩阵 G = A R⁻¹
        self.G = scipy.linalg.solve_triangular(self.R, A.T, trans="T").T

        # 严格可行的各向同性起点方向
        start = np.zeros(n)
        start[0] = 1.0
        start[op.n_wm:] = 1.0
        self.start_direction = start

        if self.damping:
            logger.info("[CSD] rank(F)=%d < %d，加阻尼 %.3g", rank, n, self.damping)

    def objective(self, c: np.ndarray, g: np.ndarray) -> float:
        return float(0.5 * c @ self.H @ c + g @ c)

    def _start_point(self, g: np.ndarray, g_norm: float) -> np.ndarray:
        """各向同性方向上的最优正倍数"""
        e = self.start_direction
        curvature = float(e @ self.H @ e)
        return max(-float(g @ e) / curvature, 1e-3 * g_norm / curvature) * e

    def _least_distance(self, g: np.ndarray):
        """最小距离问题的 NNLS 解，返回 (c, 全部约束的乘子)"""
        d = scipy.linalg.solve_triangular(self.R, g, trans="T")
        E = np.vstack([self.G.T, self.h + self.G @ d])
        f = np.zeros(E.shape[0])
        f[-1] = 1.0
        u, _ = scipy.optimize.nnls(E, f)
        r = E @ u - f
        if r[-1] > -1e-12:
            raise InternalError("最小距离问题不可行")
        x = -r[:-1] / r[-1]
        return scipy.linalg.solve_triangular(self.R, x - d), u / -r[-1]

    def _is_independent(self, working: Sequence[int], row: int) -> bool:
        a = self.A[row]
        if not working:
            return True
        AW = self.A[list(working)]
        coef = np.linalg.lstsq(AW.T, a, rcond=None)[0]
        return float(np.linalg.norm(a - AW.T @ coef)) > INDEPENDENCE_TOL * float(np.linalg.norm(a))

    def _independent_subset(self, rows: np.ndarray, priority: np.ndarray) -> List[int]:
        """按优先级从大到小贪心挑出线性无关的行"""
        working: List[int] = []
        for row in rows[np.argsort(-priority[rows], kind="stable")]:
            if len(working) >= self.A.shape[1]:
                break
            if self._is_independent(working, int(row)):
                working.append(int(row))
        return working

    def _solve_on(self, g: np.ndarray, working: List[int]):
        """工作集上的等式约束子问题，返回 (c, 乘子)；KKT 矩阵奇异时返回 None"""
        n = self.H.shape[0]
        if not working:
            return scipy.linalg.cho_solve((self.R, False), -g), np.zeros(0)
        AW = self.A[working]
        k = len(working)
        kkt = np.block([[self.H, -AW.T], [AW, np.zeros((k, k))]])
        try:
            sol = np.linalg.solve(kkt, np.r_[-g, self.h[working]])
        except np.linalg.LinAlgError:
            return None
        return sol[:n], sol[n:]

    def _feasibility_tol(self, c: np.ndarray) -> float:
        return 1e-10 * (1.0 + float(np.abs(c).max()))

    def fit(self, signals) -> CsdResult:
        b = np.asarray(signals, dtype=float)
        if b.shape != (self.op.m,):
            raise InvalidInputError(f"信号长度 {b.shape} 与算子行数 {self.op.m} 不一致")

        F = self.op.matrix
        g = -(F.T @ b)
        g_norm = float(np.linalg.norm(g))
        if g_norm == 0.0:
            return CsdResult(coeffs=np.zeros(self.op.n_total), converged=True, iterations=0,
                             objective_history=[0.0], damping=self.damping)

        start = self._start_point(g, g_norm)
        history = [self.objective(start, g)]
        try:
            c_ld, mu_ld = self._least_distance(g)
        except (RuntimeError, InternalError) as exc:
            logger.warning("[CSD] 最小距离问题求解失败（%s），返回各向同性起点", exc)
            return CsdResult(coeffs=start, converged=False, iterations=0, objective_history=history,
                             damping=self.damping, kkt_residual=float(np.linalg.norm(self.H @ start + g)))
        history.append(self.objective(c_ld, g))

        lam_tol = self.opts.tol * g_norm
        working = self._independent_subset(np.flatnonzero(mu_ld > 0), mu_ld)
        outer = 0
        while outer < self.opts.max_iter:
            outer += 1
            solved = self._solve_on(g, working)
            if solved is None:
                break
            c, mu = solved
            slack = self.A @ c - self.h
            worst = int(np.argmin(slack))
            if slack[worst] < -self._feasibility_tol(c):
                if worst in working or not self._is_independent(working, worst):
                    break
                working.append(worst)
                continue
            if mu.size and mu.min() < -lam_tol:
                working.pop(int(np.argmin(mu)))
                continue
            kkt = float(np.linalg.norm(self.H @ c + g - self.A[working].T @ mu)) if working \
                else float(np.linalg.norm(self.H @ c + g))
            history.append(self.objective(c, g))
            return CsdResult(coeffs=c, converged=True, iterations=outer, objective_history=history,
                             damping=self.damping, kkt_residual=kkt, active_set=list(working),
                             multipliers=np.asarray(mu))

        # 工作集修正失败: 退回最小距离解
        kkt = float(np.linalg.norm(self.H @ c_ld + g - self.A.T @ mu_ld))
        slack = self.A @ c_ld - self.h
        complementarity = float(np.abs(mu_ld * np.minimum(slack, 1.0)).max())
        converged = (kkt <= 1e-6 * g_norm and slack.min() >= -self._feasibility_tol(c_ld)
                     and complementarity <= 1e-6 * g_norm)
        if not converged:
            logger.warning("[CSD] %d 次外层迭代内未收敛（工作集大小 %d）", outer, len(working))
        active = np.flatnonzero(mu_ld > 0)
        return CsdResult(coeffs=c_ld, converged=converged, iterations=outer, objective_history=history,
                         damping=self.damping, kkt_residual=kkt, active_set=[int(i) for i in active],
                         multipliers=mu_ld[active])


def fit_mt_csd(signals, op: ConvolutionOperator, opts: Optional[CsdOptions] = None,
               return_result: bool = False):
    """
    单体素多组织约束拟合

    Args:
        signals: 长度 m 的信号向量
        op: 卷积算子
        opts: 选项
        return_result: True 时返回 CsdResult，否则只返回系数

    Returns:
        (n_total,) 系数向量或 CsdResult
    """
    result = CsdSolver(op, opts).fit(signals)
    return result if return_result else result.coeffs


def fit_voxelwise(volume, op: ConvolutionOperator, mask, opts: Optional[CsdOptions] = None,
                  threads: Optional[int] = None, return_convergence: bool = False):
    """
    逐体素拟合

    Args:
        volume: (X, Y, Z, m) DWI 体积
        mask: (X, Y, Z) 布尔 mask
        threads: 线程数（默认 FODFORGE_THREADS）
        return_convergence: True 时额外返回每个体素是否收敛

    Returns:
        (X, Y, Z, n_total) FOD 体积（mask 外为零）
    """
    data = np.asarray(volume, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if data.ndim != 4 or data.shape[:3] != mask.shape:
        raise InvalidInputError(f"DWI 形状 {data.shape} 与 mask 形状 {mask.shape} 不匹配")
    if data.shape[3] != op.m:
        raise InvalidInputError(f"DWI 有 {data.shape[3]} 个体积，算子需要 {op.m} 个")

    if threads is None:
        threads = get_setting("FODFORGE_THREADS", cast=int)
    solver = CsdSolver(op, opts)
    fod = np.zeros(mask.shape + (op.n_total,))
    converged = np.ones(mask.shape, dtype=bool)
    voxels = np.argwhere(mask)

    def work(index):
        x, y, z = voxels[index]
        return index, solver.fit(data[x, y, z])

    show = logger.isEnabledFor(logging.INFO)
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        results = pool.map(work, range(len(voxels)))
        for index, result in tqdm(results, total=len(voxels), desc="CSD", disable=not show or len(voxels) == 0):
            x, y, z = voxels[index]
            fod[x, y, z] = result.coeffs
            converged[x, y, z] = result.converged

    failed = int(np.count_nonzero(~converged))
    logger.info("[CSD] 拟合 %d 个体素，未收敛 %d 个", len(voxels), failed)
    if return_convergence:
        return fod, converged
    return fod
