"""
扩散采集方案（b-vector / b-value）
================================================================================

功能说明:
    1. 解析 FSL 风格 bvec / bval 文本（3 行 × m 列 / 1 行 × m 列）
    2. 按 ±75 s/mm² 容差聚类 shell，b <= 75 视为 b0
    3. 每个非零 shell 取前 k 个方向 + 前 n_b0 个 b0（欠采样）
    4. 生成 HCP 风格的 288 体积合成方案（3 个 shell × 90 方向 + 18 个 b0）

数据流程:
    bvec/bval 文本 -> parse_scheme -> AcquisitionScheme
                   -> subsample_first_k -> (子方案, 保留的原始体积索引)
                   -> serialize_scheme -> bvec/bval 文本

使用方法:
    scheme = load_scheme("dwi.bvec", "dwi.bval")
    sub, kept = subsample_first_k(scheme, k_per_shell=9, n_b0=3)
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import CapacityError, InvalidInputError, ParseError, VolumeIOError
from .sh_basis import electrostatic_directions

logger = logging.getLogger(__name__)


# ==================== 配置 ====================

# shell 聚类容差（s/mm²）
SHELL_TOLERANCE = 75.0

# 不超过该值的体积视为 b0
B0_THRESHOLD = 75.0

# 非 b0 方向的单位范数容差
BVEC_NORM_TOLERANCE = 1e-3


# ==================== 数据类型 ====================

@dataclass(frozen=True)
class Shell:
    """一个 shell：编号、名义 b 值、成员体积索引（按采集顺序）"""

    shell_id: int
    nominal: float
    indices: Tuple[int, ...]

    @property
    def is_b0(self) -> bool:
        return self.nominal <= B0_THRESHOLD

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class AcquisitionScheme:
    """
    采集方案

    bvecs: (m, 3)，b0 体积允许零向量
    bvals: (m,)，单位 s/mm²
    shells: 按名义 b 值升序的 shell 表，划分全部体积
    """

    bvecs: np.ndarray
    bvals: np.ndarray
    shells: Tuple[Shell, ...]

    @classmethod
    def from_arrays(cls, bvecs, bvals) -> "AcquisitionScheme":
        """从数组构造方案并聚类 shell"""
        bvecs = np.array(bvecs, dtype=float).reshape(-1, 3)
        bvals = np.array(bvals, dtype=float).reshape(-1)
        if bvecs.shape[0] != bvals.shape[0]:
            raise InvalidInputError(f"bvec 数量 {bvecs.shape[0]} 与 bval 数量 {bvals.shape[0]} 不一致")
        if bvals.size == 0:
            raise InvalidInputError("采集方案不能为空")
        if np.any(bvals < 0) or not np.all(np.isfinite(bvals)):
            raise InvalidInputError("b 值必须是非负有限数")

        norms = np.linalg.norm(bvecs, axis=1)
        diffusion = bvals > B0_THRESHOLD
        bad = diffusion & (np.abs(norms - 1.0) > BVEC_NORM_TOLERANCE)
        if np.any(bad):
            first = int(np.flatnonzero(bad)[0])
            raise InvalidInputError(f"体积 {first} 的 b-vector 范数为 {norms[first]:.4f}，不是单位向量")
        bvecs[diffusion] /= norms[diffusion, None]
        bvecs.setflags(write=False)
        bvals.setflags(write=False)
        return cls(bvecs=bvecs, bvals=bvals, shells=_cluster_shells(bvals))

    def __len__(self) -> int:
        return self.bvals.shape[0]

    @property
    def m(self) -> int:
        return len(self)

    @property
    def b0_shell(self):
        """b0 shell（不存在时为 None）"""
        for shell in self.shells:
            if shell.is_b0:
                return shell
        return None

    @property
    def diffusion_shells(self) -> List[Shell]:
        return [s for s in self.shells if not s.is_b0]

    @property
    def nominal_bvals(self) -> np.ndarray:
        return np.array([s.nominal for s in self.shells])

    def shell_index(self) -> np.ndarray:
        """每个体积所在 shell 在 shells 中的位置"""
        out = np.empty(len(self), dtype=int)
        for pos, shell in enumerate(self.shells):
            out[list(shell.indices)] = pos
        return out

    def select(self, indices: Sequence[int]) -> "AcquisitionScheme":
        """按给定顺序取体积子集，重新聚类 shell"""
        idx = np.asarray(indices, dtype=int)
        if idx.size == 0:
            raise InvalidInputError("体积子集不能为空")
        if np.any(idx < 0) or np.any(idx >= len(self)):
            raise InvalidInputError("体积索引超出范围")
        return AcquisitionScheme.from_arrays(self.bvecs[idx], self.bvals[idx])

    def describe(self) -> str:
        parts = [f"b={s.nominal:g}×{len(s)}" for s in self.shells]
        return f"{len(self)} 个体积: " + ", ".join(parts)


def _nominal(values: np.ndarray) -> float:
    """shell 的名义 b 值：能取整到 100 时取整"""
    centre = float(np.median(values))
    rounded = round(centre / 100.0) * 100.0
    if np.all(np.abs(values - rounded) <= SHELL_TOLERANCE):
        return rounded
    return centre


def _cluster_shells(bvals: np.ndarray) -> Tuple[Shell, ...]:
    groups = []
    b0 = np.flatnonzero(bvals <= B0_THRESHOLD)
    if b0.size:
        groups.append((0.0, b0))

    diffusion = np.flatnonzero(bvals > B0_THRESHOLD)
    if diffusion.size:
        order = diffusion[np.argsort(bvals[diffusion], kind="stable")]
        start = 0
        for i in range(1, order.size + 1):
            # 同一 shell 的成员相差不超过 2 倍容差
            if i == order.size or bvals[order[i]] - bvals[order[start]] > 2 * SHELL_TOLERANCE:
                members = np.sort(order[start:i])
                groups.append((_nominal(bvals[members]), members))
                start = i

    groups.sort(key=lambda g: g[0])
    return tuple(Shell(shell_id=i, nominal=nom, indices=tuple(int(v) for v in idx)) for i, (nom, idx) in enumerate(groups))


# ==================== 解析 / 序列化 ====================

def _parse_rows(text: str, what: str) -> List[List[float]]:
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        row = []
        for col, token in enumerate(tokens, start=1):
            try:
                row.append(float(token))
            except ValueError:
                raise ParseError(f"{what} 第 {line_no} 行第 {col} 列不是数字: {token!r}") from None
        rows.append(row)
    return rows


def parse_scheme(bvec_text: str, bval_text: str) -> AcquisitionScheme:
    """
    解析 FSL 风格的 bvec / bval 文本

    Args:
        bvec_text: 3 行（x / y / z 分量），每列一个体积
        bval_text: 1 行 b 值

    Returns:
        AcquisitionScheme
    """
    vec_rows = _parse_rows(bvec_text, "bvec")
    val_rows = _parse_rows(bval_text, "bval")

    if len(vec_rows) != 3:
        raise ParseError(f"bvec 应为 3 行，实际 {len(vec_rows)} 行")
    if len(val_rows) != 1:
        raise ParseError(f"bval 应为 1 行，实际 {len(val_rows)} 行")
    widths = {len(r) for r in vec_rows}
    if len(widths) != 1:
        raise ParseError(f"bvec 各行列数不一致: {[len(r) for r in vec_rows]}")
    m = widths.pop()
    if len(val_rows[0]) != m:
        raise ParseError(f"bvec 有 {m} 列而 bval 有 {len(val_rows[0])} 列")

    return AcquisitionScheme.from_arrays(np.array(vec_rows).T, np.array(val_rows[0]))


def _fmt(value: float) -> str:
    text = f"{value:.6g}"
    return "0" if text == "-0" else text


def serialize_scheme(scheme: AcquisitionScheme) -> Tuple[str, str]:
    """序列化为 (bvec 文本, bval 文本)，6 位有效数字"""
    bvec_lines = [" ".join(_fmt(v) for v in scheme.bvecs[:, axis]) for axis in range(3)]
    bval_line = " ".join(_fmt(v) for v in scheme.bvals)
    return "\n".join(bvec_lines) + "\n", bval_line + "\n"


def load_scheme(bvec_path, bval_path) -> AcquisitionScheme:
    try:
        bvec_text = Path(bvec_path).read_text(encoding="utf-8")
        bval_text = Path(bval_path).read_text(encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法读取采集方案: {e}") from e
    scheme = parse_scheme(bvec_text, bval_text)
    logger.info("[IO] 读取采集方案 %s", scheme.describe())
    return scheme


def save_scheme(scheme: AcquisitionScheme, bvec_path, bval_path) -> None:
    bvec_text, bval_text = serialize_scheme(scheme)
    try:
        Path(bvec_path).write_text(bvec_text, encoding="utf-8")
        Path(bval_path).write_text(bval_text, encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法写入采集方案: {e}") from e


# ==================== 欠采样 ====================

def subsample_first_k(scheme: AcquisitionScheme, k_per_shell: int, n_b0: int) -> Tuple[AcquisitionScheme, List[int]]:
    """
    每个非零 shell 保留前 k 个体积（采集顺序），另保留前 n_b0 个 b0 体积

    Returns:
        (子方案, 升序的原始体积索引)
    """
    if k_per_shell < 1:
        raise InvalidInputError(f"k_per_shell 必须为正，收到 {k_per_shell}")
    if n_b0 < 0:
        raise InvalidInputError(f"n_b0 不能为负，收到 {n_b0}")

    kept: List[int] = []
    b0 = scheme.b0_shell
    available_b0 = len(b0) if b0 is not None else 0
    if n_b0 > available_b0:
        raise CapacityError(f"b0 shell 只有 {available_b0} 个体积，无法选取 {n_b0} 个")
    if n_b0:
        kept.extend(b0.indices[:n_b0])

    for shell in scheme.diffusion_shells:
        if len(shell) < k_per_shell:
            raise CapacityError(f"shell b={shell.nominal:g} 只有 {len(shell)} 个体积，无法选取 {k_per_shell} 个")
        kept.extend(shell.indices[:k_per_shell])

    kept.sort()
    sub = scheme.select(kept)
    logger.debug("[IO] 欠采样 %d -> %d 个体积", len(scheme), len(sub))
    return sub, kept


# ==================== 合成方案 ====================

def farthest_point_order(directions: np.ndarray) -> np.ndarray:
    """
    贪心最远点排序（按轴距离，±v 视为同一方向），使任意前缀都均匀分布
    """
    dirs = np.asarray(directions, dtype=float)
    n = dirs.shape[0]
    order = [0]
    # 与已选集合的最小角距离（用 1 - |cos| 表示）
    gap = 1.0 - np.abs(dirs @ dirs[0])
    gap[0] = -np.inf
    for _ in range(1, n):
        nxt = int(np.argmax(gap))
        order.append(nxt)
        gap = np.minimum(gap, 1.0 - np.abs(dirs @ dirs[nxt]))
        gap[order] = -np.inf
    return np.array(order)


def hcp_like_scheme(n_b0: int = 18, n_dirs: int = 90, bvals: Sequence[float] = (1000.0, 2000.0, 3000.0),
                    n_blocks: int = 6, seed: int = 0) -> AcquisitionScheme:
    """
    HCP 风格的多 shell 方案

    体积分成 n_blocks 段，每段: n_b0/n_blocks 个 b0，然后每个 shell n_dirs/n_blocks 个方向。
    每个 shell 的方向按最远点顺序排列，因此“前 k 个”均匀覆盖球面。
    """
    if n_b0 % n_blocks or n_dirs % n_blocks:
        raise InvalidInputError(f"n_b0={n_b0} 和 n_dirs={n_dirs} 必须能被 n_blocks={n_blocks} 整除")

    per_shell = []
    for s, _ in enumerate(bvals):
        dirs = electrostatic_directions(n_dirs, seed=seed + 17 * (s + 1))
        per_shell.append(dirs[farthest_point_order(dirs)])

    b0_per_block = n_b0 // n_blocks
    dirs_per_block = n_dirs // n_blocks
    vecs, vals = [], []
    for block in range(n_blocks):
        for _ in range(b0_per_block):
            vecs.append(np.zeros(3))
            vals.append(0.0)
        for s, b in enumerate(bvals):
            chunk = per_shell[s][block * dirs_per_block:(block + 1) * dirs_per_block]
            vecs.extend(chunk)
            vals.extend([float(b)] * len(chunk))

    return AcquisitionScheme.from_arrays(np.array(vecs), np.array(vals))


def angular_coverage(directions: np.ndarray) -> float:
    """方向集合中最近两个轴之间的最小夹角（度）"""
    dirs = np.asarray(directions, dtype=float)
    if dirs.shape[0] < 2:
        return 90.0
    cos = np.abs(dirs @ dirs.T)
    np.fill_diagonal(cos, 0.0)
    return math.degrees(math.acos(min(1.0, float(cos.max()))))
