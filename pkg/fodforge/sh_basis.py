"""
实对称球谐基（偶数阶）
================================================================================

功能说明:
    1. ShScheme: 系数索引表 j <-> (l, m)，按 l 升序、m 升序排列
    2. sh_basis_matrix / eval_amplitude: 在给定方向上计算球谐基与 FOD 幅值
    3. delta_sh: 方向 ±v 上的带限对称 delta（单纤维 ground truth）
    4. SphereMesh: 对称球面网格（静电排斥方向 + Voronoi 立体角权重）
    5. project_axisymmetric: 轴对称核的 zonal 系数（响应函数用）

基的约定:
    - m = 0: Y_l0（实数）
    - m > 0: √2 · Re(Y_l^m) = √2 · P̄_l^m(cosθ) · cos(mφ)
    - m < 0: √2 · Im(Y_l^|m|) = √2 · P̄_l^|m|(cosθ) · sin(|m|φ)
    - 包含 Condon–Shortley 相位，在 ∫S² dΩ 下正交归一
    - 连带 Legendre 函数用稳定的向上递推计算，不依赖外部特殊函数库
"""

import functools
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import legendre
from scipy.spatial import ConvexHull, SphericalVoronoi

from .errors import InvalidInputError
from .settings import get_setting

logger = logging.getLogger(__name__)

# 方向向量单位范数容差
UNIT_TOLERANCE = 1e-6

FOUR_PI = 4.0 * math.pi


# ==================== 系数索引 ====================

def n_coeffs(l_max: int) -> int:
    """偶数阶球谐系数个数 (l_max+1)(l_max+2)/2"""
    _check_lmax(l_max)
    return (l_max + 1) * (l_max + 2) // 2


def _check_lmax(l_max) -> None:
    if isinstance(l_max, bool) or int(l_max) != l_max or l_max < 0 or l_max % 2:
        raise InvalidInputError(f"l_max 必须是非负偶数，收到 {l_max!r}")


@dataclass(frozen=True)
class ShScheme:
    """偶数阶实球谐的系数布局"""

    l_max: int

    def __post_init__(self):
        _check_lmax(self.l_max)

    @property
    def size(self) -> int:
        return n_coeffs(self.l_max)

    @cached_property
    def index_table(self) -> Tuple[Tuple[int, int], ...]:
        return tuple((l, m) for l in range(0, self.l_max + 1, 2) for m in range(-l, l + 1))

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([l for l, _ in self.index_table], dtype=int)

    @cached_property
    def orders(self) -> np.ndarray:
        return np.array([m for _, m in self.index_table], dtype=int)

    def index(self, l: int, m: int) -> int:
        """(l, m) -> 平铺索引 j"""
        if l % 2 or l < 0 or l > self.l_max or abs(m) > l:
            raise InvalidInputError(f"(l={l}, m={m}) 不在 l_max={self.l_max} 的偶数阶基中")
        # 前面所有偶数阶的系数个数 + 本阶内偏移
        return n_coeffs(l - 2) + (m + l) if l > 0 else 0

    def lm(self, j: int) -> Tuple[int, int]:
        """平铺索引 j -> (l, m)"""
        if j < 0 or j >= self.size:
            raise InvalidInputError(f"索引 {j} 超出范围 [0, {self.size})")
        return self.index_table[j]


# ==================== 球谐基计算 ====================

def _as_unit_directions(directions) -> np.ndarray:
    """检查并返回 (D, 3) 单位方向数组"""
    arr = np.asarray(directions, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"方向数组形状应为 (D, 3)，收到 {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise InvalidInputError(f"方向不是单位向量（最大范数偏差 {worst:.3g}）")
    return arr / norms[:, None]


def _normalised_legendre(cos_t: np.ndarray, sin_t: np.ndarray, l_max: int) -> np.ndarray:
    """
    全归一化连带 Legendre 函数 P̄_l^m（含 Condon–Shortley 相位）

    Y_l^m(θ, φ) = P̄_l^m(cosθ) · e^{imφ} 在单位球面上正交归一

    Returns:
        数组 p[l, m, d]
    """
    p = np.zeros((l_max + 1, l_max + 1, cos_t.size))
    p[0, 0] = 1.0 / math.sqrt(FOUR_PI)
    for m in range(1, l_max + 1):
        p[m, m] = -math.sqrt((2 * m + 1) / (2.0 * m)) * sin_t * p[m - 1, m - 1]
    for m in range(0, l_max):
        p[m + 1, m] = math.sqrt(2 * m + 3) * cos_t * p[m, m]
    for m in range(0, l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            p[l, m] = a * (cos_t * p[l - 1, m] - b * p[l - 2, m])
    return p


def sh_basis_matrix(directions, scheme: ShScheme) -> np.ndarray:
    """
    在给定方向上计算实球谐基矩阵

    Args:
        directions: (D, 3) 单位方向
        scheme: 系数布局

    Returns:
        (D, n(l_max)) 矩阵，第 (d, j) 项为 Y_{l,m}(direction_d)
    """
    dirs = _as_unit_directions(directions)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cos_t = np.clip(z, -1.0, 1.0)
    sin_t = np.hypot(x, y)
    phi = np.arctan2(y, x)

    p = _normalised_legendre(cos_t, sin_t, scheme.l_max)
    out = np.empty((dirs.shape[0], scheme.size))
    for j, (l, m) in enumerate(scheme.index_table):
        if m == 0:
            out[:, j] = p[l, 0]
        elif m > 0:
            out[:, j] = math.sqrt(2.0) * p[l, m] * np.cos(m * phi)
        else:
            out[:, j] = math.sqrt(2.0) * p[l, -m] * np.sin(-m * phi)
    return out


def eval_amplitude(coeffs, directions, scheme: ShScheme) -> np.ndarray:
    """
    计算 FOD 在给定方向上的幅值

    coeffs 可以是单个系数向量 (n,)，也可以是批量 (N, n)，对应返回 (D,) 或 (N, D)
    """
    c = np.asarray(coeffs, dtype=float)
    if c.shape[-1] != scheme.size:
        raise InvalidInputError(f"系数长度 {c.shape[-1]} 与 l_max={scheme.l_max} 的 {scheme.size} 不一致")
    basis = sh_basis_matrix(directions, scheme)
    return c @ basis.T


@functools.lru_cache(maxsize=None)
def apodisation_weights(l_max: int) -> np.ndarray:
    """
    非负轴对称核 (L+1)/(4π)·(u·v)^L 相对 delta 的逐阶权重 a_l (l = 0..L)

    a_0 = 1，因此积分保持为 1
    """
    power = np.zeros(l_max + 1)
    power[l_max] = 1.0
    leg = legendre.poly2leg(power)
    degrees = np.arange(l_max + 1)
    weights = (l_max + 1) * leg / (2 * degrees + 1)
    weights.setflags(write=False)
    return weights


def delta_sh(direction, scheme: ShScheme, apodise: bool = True) -> np.ndarray:
    """
    方向 ±v 上带限对称 delta 的球谐系数，积分为 1

    Args:
        direction: 单位方向 v
        scheme: 系数布局
        apodise: True 时使用无振铃的非负 (u·v)^L 波瓣；False 时为直接截断的 Dirac 对

    Returns:
        (n(l_max),) 系数向量
    """
    coeffs = sh_basis_matrix([direction], scheme)[0]
    if apodise:
        coeffs = coeffs * apodisation_weights(scheme.l_max)[scheme.degrees]
    return coeffs


def project_axisymmetric(kernel: Callable[[np.ndarray], np.ndarray], l_max: int, n_points: int = 64) -> np.ndarray:
    """
    轴对称核 K(cosθ) 的 zonal 球谐系数 ρ_l = 2π ∫ K(x) Y_l0(x) dx（l 为偶数）

    Returns:
        长度 l_max/2 + 1 的数组
    """
    _check_lmax(l_max)
    nodes, gauss_weights = legendre.leggauss(n_points)
    values = np.asarray(kernel(nodes), dtype=float)
    rho = []
    for l in range(0, l_max + 1, 2):
        unit = np.zeros(l + 1)
        unit[l] = 1.0
        y_l0 = math.sqrt((2 * l + 1) / FOUR_PI) * legendre.legval(nodes, unit)
        rho.append(2.0 * math.pi * float(np.sum(gauss_weights * values * y_l0)))
    return np.array(rho)


# ==================== 球面网格 ====================

@functools.lru_cache(maxsize=None)
def _cached_repulsion(n: int, seed: int, iterations: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    spacing = math.sqrt(FOUR_PI / (2 * n))

    for it in range(iterations):
        diff = pts[:, None, :] - pts[None, :, :]
        summ = pts[:, None, :] + pts[None, :, :]
        d1 = np.linalg.norm(diff, axis=2)
        d2 = np.linalg.norm(summ, axis=2)
        np.fill_diagonal(d1, np.inf)
        # 对称电荷：每个点同时被 ±p_j 排斥
        force = (diff / d1[..., None] ** 3).sum(axis=1) + (summ / d2[..., None] ** 3).sum(axis=1)
        force -= np.sum(force * pts, axis=1, keepdims=True) * pts
        fmax = np.max(np.linalg.norm(force, axis=1))
        if fmax == 0:
            break
        step = 0.2 * spacing * (1.0 - it / iterations) + 0.01 * spacing
        pts = pts + step * force / fmax
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)

    pts[pts[:, 2] < 0] *= -1.0
    pts.setflags(write=False)
    return pts


def electrostatic_directions(n: int, seed: int = 0, iterations: int = 300) -> np.ndarray:
    """
    静电排斥（含对径电荷）得到的 n 个半球方向

    Returns:
        (n, 3) 单位向量，z >= 0；结果由 (n, seed) 唯一确定
    """
    if n < 1:
        raise InvalidInputError(f"方向数必须为正，收到 {n}")
    return np.array(_cached_repulsion(int(n), int(seed), int(iterations)))


@dataclass(frozen=True, eq=False)
class SphereMesh:
    """
    对称球面网格

    vertices 的前一半为半球方向，后一半为其对径点；weights 为 Voronoi 立体角
    """

    vertices: np.ndarray
    weights: np.ndarray
    symmetric: bool = True

    def __post_init__(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or self.vertices.shape[0] == 0:
            raise InvalidInputError(f"网格顶点形状应为 (V, 3)，收到 {self.vertices.shape}")
        if self.weights.shape != (self.vertices.shape[0],):
            raise InvalidInputError("网格权重数量与顶点数量不一致")
        norms = np.linalg.norm(self.vertices, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise InvalidInputError("网格顶点必须是单位向量")
        if np.any(self.weights <= 0):
            raise InvalidInputError("网格权重必须为正")

    def __len__(self) -> int:
        return self.vertices.shape[0]

    @classmethod
    def from_hemisphere(cls, half: np.ndarray, exact_degree: Optional[int] = None) -> "SphereMesh":
        """
        由半球方向构造对称网格

        Args:
            half: (n, 3) 半球单位方向
            exact_degree: 若给定，修正权重使所有 l <= exact_degree 的偶数阶球谐积分精确
        """
        half = np.asarray(half, dtype=float)
        half = half / np.linalg.norm(half, axis=1, keepdims=True)
        vertices = np.vstack([half, -half])
        vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)

        voronoi = SphericalVoronoi(vertices, radius=1.0, center=np.zeros(3))
        weights = voronoi.calculate_areas()
        weights *= FOUR_PI / weights.sum()

        if exact_degree is not None:
            basis = sh_basis_matrix(vertices, ShScheme(exact_degree)).T
            target = np.zeros(basis.shape[0])
            target[0] = math.sqrt(FOUR_PI)
            correction = np.linalg.lstsq(basis, target - basis @ weights, rcond=None)[0]
            refined = weights + correction
            if np.all(refined > 0):
                weights = refined
            else:
                logger.warning("[Mesh] 精确积分修正后出现非正权重，保留 Voronoi 权重")

        return cls(vertices=vertices, weights=weights, symmetric=True)

    @classmethod
    def build(cls, n_vertices: int, exact_degree: Optional[int] = None, seed: int = 0) -> "SphereMesh":
        """构造 n_vertices 个顶点（偶数）的对称网格"""
        if n_vertices < 8 or n_vertices % 2:
            raise InvalidInputError(f"对称网格顶点数必须为 >= 8 的偶数，收到 {n_vertices}")
        half = electrostatic_directions(n_vertices // 2, seed=seed)
        return cls.from_hemisphere(half, exact_degree=exact_degree)

    @property
    def hemisphere(self) -> np.ndarray:
        """半球方向（对称网格的前一半）"""
        return self.vertices[: len(self) // 2]

    @cached_property
    def antipodes(self) -> np.ndarray:
        """每个顶点的对径顶点索引"""
        n = len(self)
        if self.symmetric:
            return (np.arange(n) + n // 2) % n
        return np.argmin(self.vertices @ self.vertices.T, axis=1)

    @cached_property
    def neighbours(self) -> np.ndarray:
        """
        凸包邻接表，形状 (V, max_degree)，不足处填 -1
        """
        hull = ConvexHull(self.vertices)
        n = len(self)
        adjacency = [set() for _ in range(n)]
        for a, b, c in hull.simplices:
            adjacency[a].update((b, c))
            adjacency[b].update((a, c))
            adjacency[c].update((a, b))
        width = max(len(s) for s in adjacency)
        table = np.full((n, width), -1, dtype=int)
        for i, s in enumerate(adjacency):
            table[i, : len(s)] = sorted(s)
        return table

    def basis(self, scheme: ShScheme) -> np.ndarray:
        """网格顶点上的球谐基矩阵（按 l_max 缓存）"""
        cache = self.__dict__.setdefault("_basis_cache", {})
        if scheme.l_max not in cache:
            cache[scheme.l_max] = sh_basis_matrix(self.vertices, scheme)
        return cache[scheme.l_max]


@functools.lru_cache(maxsize=None)
def default_mesh(n_vertices: Optional[int] = None) -> SphereMesh:
    """稠密积分 / 分割网格（默认 724 顶点，l <= 16 积分精确）"""
    if n_vertices is None:
        n_vertices = get_setting("FODFORGE_MESH_SIZE", cast=int)
    return SphereMesh.build(n_vertices, exact_degree=16)


@functools.lru_cache(maxsize=None)
def constraint_mesh(n_vertices: Optional[int] = None) -> SphereMesh:
    """CSD 非负约束网格（默认 300 个对称方向）"""
    if n_vertices is None:
        n_vertices = get_setting("FODFORGE_CONSTRAINT_MESH_SIZE", cast=int)
    return SphereMesh.build(n_vertices, seed=1)


def rotation_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """绕 axis 旋转 angle（弧度）的旋转矩阵"""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])
