"""
合成多组织扩散幻影
================================================================================

功能说明:
    1. PhantomSpec: 网格尺寸、区域列表（单纤维 / 弯曲纤维场 / 两纤维交叉 / 三纤维交叉 /
       GM / CSF）、噪声模型、采集方案、种子（JSON 文档）
    2. build_phantom: 生成真值 FOD（带限 delta 之和）、组织 mask、区域 mask、fixel 数
    3. simulate_dwi: s = F·c，加高斯或 Rician 噪声
    4. synthetic_fod_dataset: 0~4 根纤维的随机 FOD 与分割标签（分类器训练用）

随机数:
    每个体素每个用途一个计数器型生成器 Philox(key=[seed, (stream << 40) | voxel])，
    输出与线程数、遍历顺序无关

数据流程:
    default_phantom.json -> PhantomSpec -> build_phantom -> Phantom
                         -> simulate_dwi(F) -> DWI 体积
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .acquisition import AcquisitionScheme, hcp_like_scheme, load_scheme
from .errors import InvalidInputError, ParseError, SpecError, VolumeIOError
from .forward_model import ConvolutionOperator
from .fixel_tools import label_from_count, segment_fixels
from .sh_basis import ShScheme, delta_sh, n_coeffs, rotation_matrix

logger = logging.getLogger(__name__)

PRESET_PATH = Path(__file__).resolve().parent / "presets" / "default_phantom.json"

GEOMETRIES = ("single", "curved", "crossing2", "crossing3", "gm", "csf")
NOISE_MODELS = ("none", "gaussian", "rician")

# 随机数流编号
STREAM_ORIENTATION = 0
STREAM_FRACTION = 1
STREAM_NOISE = 2
STREAM_DATASET = 3

# WM / GM mask 的组织比例阈值
MASK_FRACTION = 0.5

FRACTION_TOLERANCE = 1e-9


def voxel_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """(seed, stream, index) 对应的独立生成器"""
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, (int(stream) << 40) | int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ==================== 规格 ====================

@dataclass
class RegionSpec:
    """一个长方体区域（box 为半开区间 [[x0, x1], [y0, y1], [z0, z1]]）"""

    name: str
    geometry: str
    box: Tuple[Tuple[int, int], ...]
    fractions: Dict[str, float]
    direction: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    angle: float = 90.0
    center: Tuple[float, float] = (0.0, 0.0)
    jitter_deg: float = 0.0
    fraction_jitter: float = 0.0

    @property
    def n_fibres(self) -> int:
        return {"single": 1, "curved": 1, "crossing2": 2, "crossing3": 3}.get(self.geometry, 0)


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 32, 8)
    voxel_size: float = 2.0
    l_max_wm: int = 8
    seed: int = 0
    scheme: Dict = field(default_factory=lambda: {"kind": "hcp_like"})
    noise: Dict = field(default_factory=lambda: {"model": "rician", "sigma": 0.05})
    background: Dict[str, float] = field(default_factory=lambda: {"WM": 0.0, "GM": 0.0, "CSF": 1.0})
    regions: List[RegionSpec] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        known = {"dims", "voxel_size", "l_max_wm", "seed", "scheme", "noise", "background", "regions"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SpecError(f"PhantomSpec 中有未知字段: {unknown}")
        data = dict(data)
        regions = []
        region_fields = set(RegionSpec.__dataclass_fields__)
        for i, raw in enumerate(data.pop("regions", [])):
            bad = sorted(set(raw) - region_fields)
            if bad:
                raise SpecError(f"区域 {i} 中有未知字段: {bad}")
            try:
                region = RegionSpec(**raw)
            except TypeError as e:
                raise SpecError(f"区域 {i} 缺少字段: {e}") from None
            region.box = tuple(tuple(int(v) for v in pair) for pair in region.box)
            region.direction = tuple(float(v) for v in region.direction)
            region.center = tuple(float(v) for v in region.center)
            regions.append(region)
        if "dims" in data:
            data["dims"] = tuple(int(v) for v in data["dims"])
        spec = cls(regions=regions, **data)
        spec.validate()
        return spec

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"dims 必须是 3 个正整数，收到 {self.dims}")
        if self.l_max_wm < 0 or self.l_max_wm % 2:
            raise SpecError(f"l_max_wm 必须是非负偶数，收到 {self.l_max_wm}")
        model = self.noise.get("model", "none")
        if model not in NOISE_MODELS:
            raise SpecError(f"未知噪声模型 {model!r}，应为 {NOISE_MODELS}")
        if float(self.noise.get("sigma", 0.0)) < 0:
            raise SpecError("噪声 sigma 不能为负")
        _check_fractions(self.background, "background")

        occupied = np.full(self.dims, -1, dtype=int)
        for i, region in enumerate(self.regions):
            if region.geometry not in GEOMETRIES:
                raise SpecError(f"区域 {region.name!r} 的几何类型 {region.geometry!r} 未知，应为 {GEOMETRIES}")
            if len(region.box) != 3 or any(lo < 0 or hi > d or lo >= hi for (lo, hi), d in zip(region.box, self.dims)):
                raise SpecError(f"区域 {region.name!r} 的 box {region.box} 超出网格 {self.dims}")
            _check_fractions(region.fractions, region.name)
            if region.n_fibres and region.fractions.get("WM", 0.0) <= 0:
                raise SpecError(f"纤维区域 {region.name!r} 的 WM 比例必须为正")
            if region.geometry == "crossing2" and not 0.0 < region.angle <= 90.0:
                raise SpecError(f"区域 {region.name!r} 的交叉角 {region.angle} 不在 (0°, 90°]")
            if region.jitter_deg < 0 or region.fraction_jitter < 0:
                raise SpecError(f"区域 {region.name!r} 的抖动参数不能为负")
            sl = tuple(slice(lo, hi) for lo, hi in region.box)
            clash = occupied[sl]
            if np.any(clash >= 0):
                other = self.regions[int(clash[clash >= 0][0])].name
                raise SpecError(f"区域 {region.name!r} 与 {other!r} 重叠")
            occupied[sl] = i

    def build_scheme(self) -> AcquisitionScheme:
        """由 scheme 字段构造采集方案"""
        kind = self.scheme.get("kind", "hcp_like")
        if kind == "hcp_like":
            return hcp_like_scheme(n_b0=int(self.scheme.get("n_b0", 18)), n_dirs=int(self.scheme.get("n_dirs", 90)),
                                   bvals=tuple(float(b) for b in self.scheme.get("bvals", (1000, 2000, 3000))))
        if kind == "files":
            return load_scheme(self.scheme["bvec"], self.scheme["bval"])
        raise SpecError(f"未知采集方案类型 {kind!r}")


def _check_fractions(fractions: Dict[str, float], where: str) -> None:
    unknown = sorted(set(fractions) - {"WM", "GM", "CSF"})
    if unknown:
        raise SpecError(f"{where}: 未知组织 {unknown}")
    values = [float(fractions.get(t, 0.0)) for t in ("WM", "GM", "CSF")]
    if min(values) < 0 or abs(sum(values) - 1.0) > FRACTION_TOLERANCE:
        raise SpecError(f"{where}: 组织比例 {values} 必须非负且和为 1")


def load_spec(path=None) -> PhantomSpec:
    """读取 PhantomSpec JSON；格式错误时报告行列号"""
    path = Path(path) if path is not None else PRESET_PATH
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法读取幻影配置 {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: 第 {e.lineno} 行第 {e.colno} 列 JSON 格式错误: {e.msg}") from e
    if not isinstance(data, dict):
        raise SpecError(f"{path}: 顶层必须是 JSON 对象")
    return PhantomSpec.from_dict(data)


def default_spec() -> PhantomSpec:
    return load_spec(PRESET_PATH)


# ==================== 幻影生成 ====================

@dataclass
class Phantom:
    """
    生成结果

    fod: (X, Y, Z, n_wm + 2) 真值系数
    fractions: (X, Y, Z, 3) WM / GM / CSF 比例
    counts: (X, Y, Z) fixel 数
    """

    spec: PhantomSpec
    scheme: AcquisitionScheme
    fod: np.ndarray
    fractions: np.ndarray
    counts: np.ndarray
    region_masks: Dict[str, np.ndarray]

    @property
    def wm_mask(self) -> np.ndarray:
        return self.fractions[..., 0] >= MASK_FRACTION

    @property
    def gm_mask(self) -> np.ndarray:
        return self.fractions[..., 1] >= MASK_FRACTION

    @property
    def csf_mask(self) -> np.ndarray:
        return self.fractions[..., 2] >= MASK_FRACTION

    @property
    def n_wm(self) -> int:
        return n_coeffs(self.spec.l_max_wm)


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    if max_deg <= 0:
        return np.eye(3)
    axis = rng.standard_normal(3)
    angle = math.radians(max_deg) * rng.uniform(0.0, 1.0)
    return rotation_matrix(axis, angle)


def _jitter_fractions(fractions: Dict[str, float], amount: float, rng: np.random.Generator) -> np.ndarray:
    base = np.array([float(fractions.get(t, 0.0)) for t in ("WM", "GM", "CSF")])
    if amount <= 0:
        return base
    primary = int(np.argmax(base))
    rest = base.sum() - base[primary]
    if rest <= 0:
        return base
    new_primary = float(np.clip(base[primary] + amount * rng.uniform(-1.0, 1.0), 0.0, 1.0))
    out = base * (1.0 - new_primary) / rest
    out[primary] = new_primary
    return out


def _fibre_directions(region: RegionSpec, voxel: Sequence[int]) -> np.ndarray:
    """区域局部坐标系中的纤维方向（未抖动）"""
    if region.geometry == "single":
        d = np.asarray(region.direction, dtype=float)
        return (d / np.linalg.norm(d))[None, :]
    if region.geometry == "curved":
        # 绕 center（相对 box 起点）的同心圆切线
        dx = voxel[0] - region.box[0][0] - region.center[0]
        dy = voxel[1] - region.box[1][0] - region.center[1]
        t = np.array([-dy, dx, 0.0])
        norm = np.linalg.norm(t)
        if norm < 1e-12:
            # 圆心所在体素没有切线，取面内 x 轴
            return np.array([[1.0, 0.0, 0.0]])
        return (t / norm)[None, :]
    if region.geometry == "crossing2":
        a = math.radians(region.angle)
        return np.array([[1.0, 0.0, 0.0], [math.cos(a), math.sin(a), 0.0]])
    return np.eye(3)


def build_phantom(spec: Optional[PhantomSpec] = None, scheme: Optional[AcquisitionScheme] = None) -> Phantom:
    """
    生成真值 FOD、组织比例、fixel 数与区域 mask

    WM 系数 = Σ_i WM 比例 · w_i · delta_sh(d_i)，w_i 之和为 1，因此 WM AFD 等于 WM 比例
    """
    spec = spec if spec is not None else default_spec()
    spec.validate()
    scheme = scheme if scheme is not None else spec.build_scheme()
    sh = ShScheme(spec.l_max_wm)
    n_wm = sh.size
    dims = tuple(spec.dims)

    fod = np.zeros(dims + (n_wm + 2,))
    fractions = np.zeros(dims + (3,))
    counts = np.zeros(dims, dtype=int)
    fractions[...] = [float(spec.background.get(t, 0.0)) for t in ("WM", "GM", "CSF")]
    region_masks = {}

    for region in spec.regions:
        sl = tuple(slice(lo, hi) for lo, hi in region.box)
        mask = np.zeros(dims, dtype=bool)
        mask[sl] = True
        region_masks[region.name] = mask
        for voxel in np.argwhere(mask):
            index = int(np.ravel_multi_index(tuple(voxel), dims))
            frac = _jitter_fractions(region.fractions, region.fraction_jitter,
                                     voxel_rng(spec.seed, STREAM_FRACTION, index))
            fractions[tuple(voxel)] = frac
            if region.n_fibres == 0:
                continue
            rng = voxel_rng(spec.seed, STREAM_ORIENTATION, index)
            dirs = _fibre_directions(region, voxel) @ _random_rotation(rng, region.jitter_deg).T
            weights = 1.0 + 0.1 * rng.uniform(-1.0, 1.0, size=len(dirs))
            weights /= weights.sum()
            wm = np.zeros(n_wm)
            for d, w in zip(dirs, weights):
                wm += frac[0] * w * delta_sh(d, sh)
            fod[voxel[0], voxel[1], voxel[2], :n_wm] = wm
            counts[tuple(voxel)] = len(dirs)

    fod[..., n_wm] = fractions[..., 1]
    fod[..., n_wm + 1] = fractions[..., 2]
    logger.info("[Phantom] 生成 %s 幻影：%d 个 WM 体素，%d 个 GM 体素",
                "×".join(str(d) for d in dims), int(np.count_nonzero(fractions[..., 0] >= MASK_FRACTION)),
                int(np.count_nonzero(fractions[..., 1] >= MASK_FRACTION)))
    return Phantom(spec=spec, scheme=scheme, fod=fod, fractions=fractions, counts=counts, region_masks=region_masks)


def simulate_dwi(phantom: Phantom, op: ConvolutionOperator, noise: Optional[str] = None,
                 sigma: Optional[float] = None, seed: Optional[int] = None) -> np.ndarray:
    """
    模拟 DWI

    Args:
        noise: none / gaussian / rician（默认取 spec.noise）
        sigma: 相对 b0 信号（S0 = 1）的噪声标准差
        seed: 噪声种子（默认 spec.seed）

    Returns:
        (X, Y, Z, m)
    """
    noise = noise if noise is not None else phantom.spec.noise.get("model", "none")
    sigma = float(sigma if sigma is not None else phantom.spec.noise.get("sigma", 0.0))
    seed = phantom.spec.seed if seed is None else seed
    if noise not in NOISE_MODELS:
        raise InvalidInputError(f"未知噪声模型 {noise!r}")
    if sigma < 0:
        raise InvalidInputError(f"sigma 不能为负，收到 {sigma}")
    if op.n_total != phantom.fod.shape[-1]:
        raise InvalidInputError(f"算子列数 {op.n_total} 与幻影系数个数 {phantom.fod.shape[-1]} 不一致")

    clean = phantom.fod @ op.matrix.T
    if noise == "none" or sigma == 0.0:
        return clean

    dims = clean.shape[:3]
    m = clean.shape[3]
    noisy = np.empty_like(clean)
    for index in range(int(np.prod(dims))):
        voxel = np.unravel_index(index, dims)
        draws = voxel_rng(seed, STREAM_NOISE, index).standard_normal((2, m)) * sigma
        s = clean[voxel]
        if noise == "gaussian":
            noisy[voxel] = s + draws[0]
        else:
            noisy[voxel] = np.sqrt((s + draws[0]) ** 2 + draws[1] ** 2)
    return noisy


# ==================== 分类器训练数据 ====================

def _template_directions(count: int, rng: np.random.Generator) -> np.ndarray:
    if count == 1:
        return np.array([[0.0, 0.0, 1.0]])
    if count == 2:
        a = math.radians(rng.uniform(60.0, 90.0))
        return np.array([[1.0, 0.0, 0.0], [math.cos(a), math.sin(a), 0.0]])
    if count == 3:
        return np.eye(3)
    # 正四面体的 4 根轴（立方体对角线）
    return np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3.0)


def synthetic_fod_dataset(n: int, seed: int = 0, l_max: int = 8, mesh=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    随机 0~4 根纤维的 WM FOD 与分割标签

    标签由 segment_fixels 计数得到（截断到 4）；0 类为低于峰值阈值的各向同性成分

    Returns:
        (coeffs (n, n(l_max)), labels (n,))
    """
    sh = ShScheme(l_max)
    coeffs = np.zeros((n, sh.size))
    labels = np.zeros(n, dtype=int)
    for i in range(n):
        rng = voxel_rng(seed, STREAM_DATASET, i)
        count = int(rng.integers(0, 5))
        c = np.zeros(sh.size)
        if count == 0:
            c[0] = rng.uniform(0.0, 0.08) * math.sqrt(4.0 * math.pi)
        else:
            dirs = _template_directions(count, rng) @ _random_rotation(rng, 180.0).T
            weights = rng.uniform(0.8, 1.0, size=count)
            weights *= rng.uniform(0.7, 1.0) / weights.sum()
            for d, w in zip(dirs, weights):
                c += w * delta_sh(d / np.linalg.norm(d), sh)
        coeffs[i] = c
        labels[i] = label_from_count(len(segment_fixels(c, mesh)))
    return coeffs, labels
