"""
多组织球面卷积前向模型
================================================================================

功能说明:
    1. ResponseFunction: 每个组织（WM / GM / CSF）每个 shell 的 zonal 响应系数
    2. build_operator: 由采集方案和响应函数构造信号矩阵 F（m × n_total）
    3. restrict_operator: 只保留 l <= l_max_active 的 WM 列（初始 DC 块用）
    4. tissue_responses: 由组织参数预设生成响应函数（WM 张量 / GM、CSF 单指数）
    5. load_response / save_response: 响应函数文本文件（每行一个 shell）

列布局:
    [ WM n(l_max_wm) 列 | GM 1 列 | CSF 1 列 ]

矩阵元素:
    F[v, j] = Y_{l,m}(g_v) · √(4π/(2l+1)) · ρ_{t,s(v),l}
    其中 √(4π/(2l+1)) · ρ_l = 2π ∫ K(x) P_l(x) dx（Funk–Hecke）

响应约定:
    - WM: 行内为 l = 0, 2, ..., l_max 的 zonal 系数；单位积分 FOD 在方向 g 上
      产生信号 K(g·v)
    - GM / CSF: 行内只有 ρ_0，即单位组织系数产生的各向同性信号
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .acquisition import SHELL_TOLERANCE, AcquisitionScheme
from .errors import ConfigError, InvalidInputError, ParseError, VolumeIOError
from .sh_basis import ShScheme, n_coeffs, project_axisymmetric, sh_basis_matrix

logger = logging.getLogger(__name__)

TISSUES = ("WM", "GM", "CSF")

# 组织参数预设文件
PRESET_PATH = Path(__file__).resolve().parent / "presets" / "tissue_responses.json"


# ==================== 响应函数 ====================

@dataclass(frozen=True, eq=False)
class ResponseFunction:
    """
    组织响应函数

    coeffs: (n_shells, n_l) zonal 系数，行按 b 值升序（b0 在前）
    bvals: 每行对应的名义 b 值（可选，用于按 b 值匹配 shell）
    """

    tissue: str
    coeffs: np.ndarray
    bvals: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tissue not in TISSUES:
            raise ConfigError(f"未知组织类型 {self.tissue!r}，应为 {TISSUES}")
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "coeffs", coeffs)
        if self.tissue != "WM" and coeffs.shape[1] != 1:
            raise ConfigError(f"{self.tissue} 响应每行只能有 1 个系数，实际 {coeffs.shape[1]}")
        if np.any(coeffs[:, 0] <= 0):
            raise ConfigError(f"{self.tissue} 响应的 l=0 系数必须为正")
        if self.bvals is not None:
            bvals = np.asarray(self.bvals, dtype=float).reshape(-1)
            if bvals.size != coeffs.shape[0]:
                raise ConfigError(f"{self.tissue} 响应有 {coeffs.shape[0]} 行但给出了 {bvals.size} 个 b 值")
            object.__setattr__(self, "bvals", bvals)

    @property
    def n_shells(self) -> int:
        return self.coeffs.shape[0]

    @property
    def l_max(self) -> int:
        return 2 * (self.coeffs.shape[1] - 1)


def _tensor_kernel(b: float, s0: float, lambda_par: float, lambda_perp: float):
    def kernel(x):
        return s0 * np.exp(-b * (lambda_perp + (lambda_par - lambda_perp) * x * x))
    return kernel


def tensor_response(bvals: Sequence[float], l_max: int = 8, s0: float = 1.0,
                    lambda_par: float = 1.7e-3, lambda_perp: float = 0.2e-3) -> ResponseFunction:
    """轴对称张量 WM 响应：S(b, x) = S0 · exp(−b(λ⊥ + (λ∥ − λ⊥)x²))"""
    rows = [project_axisymmetric(_tensor_kernel(b, s0, lambda_par, lambda_perp), l_max) for b in bvals]
    return ResponseFunction("WM", np.array(rows), bvals=np.asarray(bvals, dtype=float))


def isotropic_response(tissue: str, bvals: Sequence[float], s0: float = 1.0, diffusivity: float = 3e-3) -> ResponseFunction:
    """各向同性响应：每个 shell 的信号 S0 · exp(−b·D)"""
    values = [[s0 * math.exp(-b * diffusivity)] for b in bvals]
    return ResponseFunction(tissue, np.array(values), bvals=np.asarray(bvals, dtype=float))


def load_preset(path=None) -> Dict[str, dict]:
    """读取组织参数预设（JSON）"""
    path = Path(path) if path is not None else PRESET_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            preset = json.load(f)
    except OSError as e:
        raise VolumeIOError(f"无法读取响应预设 {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: 第 {e.lineno} 行第 {e.colno} 列 JSON 格式错误: {e.msg}") from e
    missing = [t for t in TISSUES if t not in preset]
    if missing:
        raise ConfigError(f"响应预设缺少组织: {missing}")
    return preset


def tissue_responses(bvals: Sequence[float], l_max_wm: int = 8, preset=None) -> List[ResponseFunction]:
    """
    由预设生成三组织响应函数

    Args:
        bvals: 各 shell 的名义 b 值（升序，含 b0）
        l_max_wm: WM 响应的 l_max
        preset: 预设字典或路径；None 时使用内置预设
    """
    if preset is None or isinstance(preset, (str, Path)):
        preset = load_preset(preset)
    wm, gm, csf = preset["WM"], preset["GM"], preset["CSF"]
    return [
        tensor_response(bvals, l_max_wm, s0=wm.get("s0", 1.0),
                        lambda_par=wm["lambda_par"], lambda_perp=wm["lambda_perp"]),
        isotropic_response("GM", bvals, s0=gm.get("s0", 1.0), diffusivity=gm["diffusivity"]),
        isotropic_response("CSF", bvals, s0=csf.get("s0", 1.0), diffusivity=csf["diffusivity"]),
    ]


def save_response(response: ResponseFunction, path) -> None:
    """写响应文件：首行注释列出 shell b 值，之后每行一个 shell"""
    lines = []
    if response.bvals is not None:
        lines.append("# Shells: " + ",".join(f"{b:g}" for b in response.bvals))
    for row in response.coeffs:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法写入响应文件 {path}: {e}") from e


def load_response(path, tissue: str) -> ResponseFunction:
    """读响应文件（'#' 开头为注释；'# Shells:' 注释给出各行的 b 值）"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法读取响应文件 {path}: {e}") from e

    rows, bvals = [], None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if body.lower().startswith("shells:"):
                try:
                    bvals = [float(v) for v in body.split(":", 1)[1].replace(",", " ").split()]
                except ValueError:
                    raise ParseError(f"{path} 第 {line_no} 行: shell 列表无法解析") from None
            continue
        try:
            rows.append([float(v) for v in stripped.split()])
        except ValueError:
            raise ParseError(f"{path} 第 {line_no} 行包含非数字内容") from None

    if not rows:
        raise ParseError(f"{path} 中没有响应数据")
    width = max(len(r) for r in rows)
    coeffs = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        coeffs[i, : len(r)] = r
    return ResponseFunction(tissue, coeffs, bvals=None if bvals is None else np.array(bvals))


# ==================== 卷积算子 ====================

@dataclass(frozen=True, eq=False)
class ConvolutionOperator:
    """
    信号矩阵 F 及其列布局

    matrix: (m, n_total)；列为 [WM n(l_max_wm) | GM | CSF]
    """

    matrix: np.ndarray
    l_max_wm: int
    scheme: AcquisitionScheme
    iso_tissues: tuple = ("GM", "CSF")
    tissue_lmax: Dict[str, int] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_total(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_wm(self) -> int:
        return n_coeffs(self.l_max_wm)

    @property
    def wm_slice(self) -> slice:
        return slice(0, self.n_wm)

    def column(self, tissue: str) -> int:
        """各向同性组织的列号"""
        if tissue not in self.iso_tissues:
            raise InvalidInputError(f"算子中没有组织 {tissue!r} 的单独列")
        return self.n_wm + self.iso_tissues.index(tissue)

    def apply(self, coeffs) -> np.ndarray:
        """预测信号；coeffs 可为 (n_total,) 或 (..., n_total)"""
        c = np.asarray(coeffs, dtype=float)
        if c.shape[-1] != self.n_total:
            raise InvalidInputError(f"系数长度 {c.shape[-1]} 与算子列数 {self.n_total} 不一致")
        return c @ self.matrix.T


def _match_rows(response: ResponseFunction, scheme: AcquisitionScheme, response_bvals) -> np.ndarray:
    """为方案的每个 shell 找到响应函数中对应的行号"""
    row_bvals = response_bvals if response_bvals is not None else response.bvals
    nominal = scheme.nominal_bvals
    if row_bvals is None:
        if response.n_shells != len(nominal):
            raise ConfigError(
                f"{response.tissue} 响应有 {response.n_shells} 行，而方案有 {len(nominal)} 个 shell")
        return np.arange(len(nominal))

    row_bvals = np.asarray(row_bvals, dtype=float)
    if row_bvals.size != response.n_shells:
        raise ConfigError(f"{response.tissue} 响应行数与给定 b 值个数不一致")
    rows = []
    for b in nominal:
        diff = np.abs(row_bvals - b)
        best = int(np.argmin(diff))
        if diff[best] > SHELL_TOLERANCE:
            raise ConfigError(f"{response.tissue} 响应中找不到 b={b:g} 的 shell")
        rows.append(best)
    return np.array(rows)


def build_operator(scheme: AcquisitionScheme, responses: Sequence[ResponseFunction], l_max_wm: int,
                   response_bvals: Optional[Sequence[float]] = None) -> ConvolutionOperator:
    """
    构造多组织卷积矩阵

    Args:
        scheme: 采集方案
        responses: WM / GM / CSF 三个响应函数
        l_max_wm: WM FOD 的球谐阶数
        response_bvals: 响应行对应的 b 值（覆盖响应自身的 bvals）；
                        给定时按 b 值匹配 shell，否则行数必须等于 shell 数

    Returns:
        ConvolutionOperator
    """
    by_tissue = {r.tissue: r for r in responses}
    missing = [t for t in TISSUES if t not in by_tissue]
    if missing:
        raise ConfigError(f"缺少组织响应: {missing}")

    sh = ShScheme(l_max_wm)
    degrees = sh.degrees
    shell_pos = scheme.shell_index()

    # WM 块
    wm = by_tissue["WM"]
    wm_rows = _match_rows(wm, scheme, response_bvals)
    n_l = l_max_wm // 2 + 1
    if wm.coeffs.shape[1] < n_l:
        raise ConfigError(f"WM 响应只有 {wm.coeffs.shape[1]} 个 zonal 系数，l_max_wm={l_max_wm} 需要 {n_l} 个")
    rho = wm.coeffs[:, :n_l]
    scale = np.sqrt(4.0 * math.pi / (2 * degrees + 1))
    rho_per_volume = rho[wm_rows[shell_pos]][:, degrees // 2]

    bvec_norms = np.linalg.norm(scheme.bvecs, axis=1)
    has_direction = bvec_norms > 0.5
    basis = np.zeros((scheme.m, sh.size))
    if np.any(has_direction):
        basis[has_direction] = sh_basis_matrix(scheme.bvecs[has_direction], sh)
    # 零向量 b0 只有 l=0 分量
    basis[~has_direction, 0] = 1.0 / math.sqrt(4.0 * math.pi)
    wm_block = basis * scale[None, :] * rho_per_volume

    # 各向同性组织块
    iso_cols = []
    for tissue in ("GM", "CSF"):
        resp = by_tissue[tissue]
        rows = _match_rows(resp, scheme, response_bvals)
        iso_cols.append(resp.coeffs[rows[shell_pos], 0])

    matrix = np.hstack([wm_block, np.stack(iso_cols, axis=1)])
    matrix.setflags(write=False)
    logger.debug("[Model] 构造算子 %d × %d（l_max_wm=%d）", matrix.shape[0], matrix.shape[1], l_max_wm)
    return ConvolutionOperator(matrix=matrix, l_max_wm=l_max_wm, scheme=scheme,
                               tissue_lmax={"WM": l_max_wm, "GM": 0, "CSF": 0})


def restrict_operator(op: ConvolutionOperator, l_max_wm_active: int) -> ConvolutionOperator:
    """
    只保留 l <= l_max_wm_active 的 WM 列和全部各向同性列（列顺序不变）
    """
    if (isinstance(l_max_wm_active, bool) or int(l_max_wm_active) != l_max_wm_active
            or l_max_wm_active < 0 or l_max_wm_active % 2 or l_max_wm_active > op.l_max_wm):
        raise InvalidInputError(f"l_max_wm_active={l_max_wm_active!r} 必须是不超过 {op.l_max_wm} 的非负偶数")
    keep = np.r_[np.arange(n_coeffs(l_max_wm_active)), np.arange(op.n_wm, op.n_total)]
    matrix = np.ascontiguousarray(op.matrix[:, keep])
    matrix.setflags(write=False)
    return ConvolutionOperator(matrix=matrix, l_max_wm=l_max_wm_active, scheme=op.scheme,
                               iso_tissues=op.iso_tissues,
                               tissue_lmax={**op.tissue_lmax, "WM": l_max_wm_active})


def zero_pad(coeffs, l_low: int, l_high: int, n_extra: int = 0) -> np.ndarray:
    """
    把 l_max=l_low 的系数补零到 l_high（最后一维）

    n_extra: 末尾的各向同性组织系数个数，原样保留在最后
    """
    c = np.asarray(coeffs, dtype=float)
    lo, hi = n_coeffs(l_low), n_coeffs(l_high)
    if l_low > l_high:
        raise InvalidInputError(f"l_low={l_low} 大于 l_high={l_high}")
    if c.shape[-1] != lo + n_extra:
        raise InvalidInputError(f"系数长度 {c.shape[-1]} 与 n({l_low}) + {n_extra} 不一致")
    out = np.zeros(c.shape[:-1] + (hi + n_extra,))
    out[..., :lo] = c[..., :lo]
    if n_extra:
        out[..., hi:] = c[..., lo:]
    return out
