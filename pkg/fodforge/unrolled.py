"""
SDNet 展开级联网络（torch）
================================================================================

功能说明:
    1. DWI 一致性块（DC）: 逐体素闭式求解
           (FᵀF/m + λI) c = Fᵀb/m + λ w
       所有体素共享一个 Cholesky 分解；反向传播用伴随规则（自定义 autograd.Function）
    2. 深度正则化块: 3D 卷积 + BN + PReLU 逐步升通道，无填充卷积使空间尺寸减 2，
       1×1×1 卷积 + GLU 输出 n_sh 通道，再加上中心裁剪的上一个 DC 输出（残差）
    3. SDNet: 初始 DC（l_max=4）→ K 次（正则化块, DC 块 l_max=8）→ 中心体素
    4. 检查点: 版本化二进制容器（JSON 头 + 命名 float32 张量）
    5. reconstruct_volume: 对 mask 内每个体素做 patch 推理

张量布局:
    通道在前 (B, C, X, Y, Z)；DWI 通道数 = 体积数 m，FOD 通道数 = n_sh（47）

使用方法:
    cfg = CascadeConfig.preset("desk", n_volumes=30)
    model = SDNet(cfg, op.matrix)
    pred = model(dwi_patches)            # (B, 47)
"""

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InternalError, InvalidInputError, InvalidStateError, VolumeIOError
from .sh_basis import n_coeffs

logger = logging.getLogger(__name__)

# 各向同性组织（GM、CSF）的系数个数
N_ISO = 2

CHECKPOINT_MAGIC = b"FODCKPT1"
CHECKPOINT_VERSION = 1


# ==================== 配置 ====================

PRESETS = {
    "full": {"hidden_channels": (128, 192, 256, 320, 384, 448), "penultimate_channels": 512},
    "desk": {"hidden_channels": (32, 64), "penultimate_channels": 64},
    "toy": {"hidden_channels": (8, 16), "penultimate_channels": 16, "patch_size": 5,
            "n_cascades": 2, "l_max_wm": 2, "l_max_initial": 0},
}


@dataclass
class CascadeConfig:
    """级联结构配置"""

    patch_size: int = 9
    n_volumes: int = 30
    n_cascades: int = 4
    l_max_initial: int = 4
    l_max_wm: int = 8
    hidden_channels: Tuple[int, ...] = (128, 192, 256, 320, 384, 448)
    penultimate_channels: int = 512
    dc_enabled: bool = True
    lambda_init: float = 1e-3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    verify_solves: bool = False

    def __post_init__(self):
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        self.validate()

    @property
    def n_sh(self) -> int:
        """每个体素的输出系数个数（WM + GM + CSF）"""
        return n_coeffs(self.l_max_wm) + N_ISO

    @property
    def glu_channels(self) -> int:
        return 2 * self.n_sh

    def validate(self) -> None:
        p, k = self.patch_size, self.n_cascades
        if p < 1 or p % 2 == 0:
            raise ConfigError(f"patch_size 必须是正奇数，收到 {p}")
        if k < 0 or p - 2 * k < 1:
            raise ConfigError(f"patch_size={p} 经过 {k} 个正则化块后空间尺寸 {p - 2 * k} < 1")
        if k == 0 and not self.dc_enabled:
            raise ConfigError("n_cascades=0 且关闭 DC 的配置没有意义")
        for name in ("l_max_initial", "l_max_wm"):
            value = getattr(self, name)
            if value < 0 or value % 2:
                raise ConfigError(f"{name} 必须是非负偶数，收到 {value}")
        if self.l_max_initial > self.l_max_wm:
            raise ConfigError("l_max_initial 不能大于 l_max_wm")
        if self.n_volumes < 1:
            raise ConfigError(f"n_volumes 必须为正，收到 {self.n_volumes}")
        if not self.hidden_channels or min(self.hidden_channels) < 1 or self.penultimate_channels < 1:
            raise ConfigError("通道数必须为正")
        if self.lambda_init <= 0:
            raise ConfigError("lambda_init 必须为正")

    @classmethod
    def preset(cls, name: str, **overrides) -> "CascadeConfig":
        if name not in PRESETS:
            raise ConfigError(f"未知预设 {name!r}，可选 {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["hidden_channels"] = list(self.hidden_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CascadeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        data = dict(data)
        preset = data.pop("preset", None)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"CascadeConfig 中有未知字段: {unknown}")
        if preset is not None:
            return cls.preset(preset, **data)
        return cls(**data)


def active_columns(l_max_active: int, l_max_wm: int) -> torch.Tensor:
    """l <= l_max_active 的 WM 列加上各向同性列"""
    n_wm = n_coeffs(l_max_wm)
    return torch.cat([torch.arange(n_coeffs(l_max_active)), torch.arange(n_wm, n_wm + N_ISO)])


def center_crop(x: torch.Tensor, size: int) -> torch.Tensor:
    """把 (B, C, X, Y, Z) 的空间维度中心裁剪到 size"""
    extent = x.shape[-1]
    if size > extent or (extent - size) % 2:
        raise InvalidInputError(f"无法把空间尺寸 {extent} 居中裁剪到 {size}")
    r = (extent - size) // 2
    if r == 0:
        return x
    return x[..., r:extent - r, r:extent - r, r:extent - r]


# ==================== DWI 一致性块 ====================

class _NormalSolve(torch.autograd.Function):
    """
    c = M⁻¹ (Fᵀb/m + λ w)，M = FᵀF/m + λI

    b_rows: (N, m)，w_rows: (N, n_a)，lam: 标量张量，F_a: (m, n_a)
    """

    @staticmethod
    def forward(ctx, b_rows, w_rows, lam, F_a, verify):
        m = F_a.shape[0]
        M = F_a.T @ F_a / m + lam * torch.eye(F_a.shape[1], dtype=F_a.dtype, device=F_a.device)
        L, info = torch.linalg.cholesky_ex(M)
        if int(info) != 0:
            raise InternalError(f"DC 法方程矩阵不正定（λ={float(lam):.3g}）")
        rhs = b_rows @ F_a / m + lam * w_rows
        c = torch.cholesky_solve(rhs.T, L).T
        if verify:
            _check_residual(M, c, rhs)
        ctx.save_for_backward(L, F_a, w_rows, c, lam)
        return c

    @staticmethod
    def backward(ctx, grad_c):
        L, F_a, w_rows, c, lam = ctx.saved_tensors
        m = F_a.shape[0]
        y = torch.cholesky_solve(grad_c.T, L).T
        grad_b = y @ F_a.T / m if ctx.needs_input_grad[0] else None
        grad_w = lam * y if ctx.needs_input_grad[1] else None
        grad_lam = torch.sum(y * (w_rows - c)).reshape(lam.shape) if ctx.needs_input_grad[2] else None
        return grad_b, grad_w, grad_lam, None, None


def _check_residual(M: torch.Tensor, c: torch.Tensor, rhs: torch.Tensor, samples: int = 8) -> None:
    """抽查若干体素的法方程残差"""
    tol = 1e-8 if c.dtype == torch.float64 else 1e-4
    step = max(1, c.shape[0] // samples)
    rows = torch.arange(0, c.shape[0], step)
    resid = torch.linalg.norm(c[rows] @ M - rhs[rows], dim=1)
    scale = torch.linalg.norm(rhs[rows], dim=1).clamp_min(torch.finfo(c.dtype).tiny)
    worst = float(torch.max(resid / scale))
    if worst > tol:
        raise InternalError(f"DC 求解残差 {worst:.3g} 超过 {tol:g}")


def dc_block(b_patch: torch.Tensor, F_full: torch.Tensor, w_patch: Optional[torch.Tensor], lam: torch.Tensor,
             l_max_active: int, l_max_wm: int, verify: bool = False) -> torch.Tensor:
    """
    DWI 一致性块

    Args:
        b_patch: (B, m, X, Y, Z) DWI
        F_full: (m, n_sh) 完整信号矩阵
        w_patch: (B, n_sh, X, Y, Z) 正则化块输出；初始块为 None
        lam: 正标量张量 λ
        l_max_active: 求解使用的 WM 阶数，更高阶系数从 w 复制（无 w 时为零）

    Returns:
        (B, n_sh, X, Y, Z)
    """
    lam = torch.as_tensor(lam, dtype=b_patch.dtype, device=b_patch.device)
    if float(lam.detach()) <= 0 or not math.isfinite(float(lam.detach())):
        raise InvalidInputError(f"λ 必须为正，收到 {float(lam.detach())}")
    batch, m = b_patch.shape[:2]
    spatial = b_patch.shape[2:]
    n_sh = F_full.shape[1]
    if F_full.shape[0] != m:
        raise InvalidInputError(f"DWI 通道数 {m} 与算子行数 {F_full.shape[0]} 不一致")
    if w_patch is not None and (w_patch.shape[1] != n_sh or w_patch.shape[2:] != spatial):
        raise InvalidInputError(f"w 形状 {tuple(w_patch.shape)} 与 DWI 形状 {tuple(b_patch.shape)} 不匹配")

    cols = active_columns(l_max_active, l_max_wm).to(b_patch.device)
    F_a = F_full.to(b_patch.dtype)[:, cols]
    b_rows = b_patch.permute(0, 2, 3, 4, 1).reshape(-1, m)
    if w_patch is None:
        w_rows = torch.zeros(b_rows.shape[0], n_sh, dtype=b_patch.dtype, device=b_patch.device)
    else:
        w_rows = w_patch.permute(0, 2, 3, 4, 1).reshape(-1, n_sh)

    c_active = _NormalSolve.apply(b_rows, w_rows[:, cols], lam, F_a, verify)
    c_rows = w_rows.index_copy(1, cols, c_active)
    return c_rows.reshape(batch, *spatial, n_sh).permute(0, 4, 1, 2, 3)


class DCBlock(nn.Module):
    """带可学习 λ = exp(θ) 的 DC 块"""

    def __init__(self, l_max_active: int, l_max_wm: int, lambda_init: float = 1e-3, verify: bool = False):
        super().__init__()
        self.l_max_active = l_max_active
        self.l_max_wm = l_max_wm
        self.verify = verify
        self.theta = nn.Parameter(torch.tensor(math.log(lambda_init)))

    @property
    def lam(self) -> torch.Tensor:
        return torch.exp(self.theta)

    def forward(self, b, F_full, w=None):
        return dc_block(b, F_full, w, self.lam, self.l_max_active, self.l_max_wm, verify=self.verify)


# ==================== 正则化块 ====================

class RegBlock(nn.Module):
    """
    深度正则化块

    concat(c_prev, c_prev2) → [Conv3d(3, pad 1) → BN → PReLU]×len(hidden)
    → Conv3d(3, 无填充) → PReLU → Conv3d(1) → GLU → + 中心裁剪的 c_prev
    """

    def __init__(self, cfg: CascadeConfig):
        super().__init__()
        layers: List[nn.Module] = []
        width = 2 * cfg.n_sh
        for out in cfg.hidden_channels:
            layers += [
                nn.Conv3d(width, out, kernel_size=3, padding=1),
                nn.BatchNorm3d(out, eps=cfg.bn_eps, momentum=cfg.bn_momentum),
                nn.PReLU(out),
            ]
            width = out
        layers += [
            nn.Conv3d(width, cfg.penultimate_channels, kernel_size=3, padding=0),
            nn.PReLU(cfg.penultimate_channels),
            nn.Conv3d(cfg.penultimate_channels, cfg.glu_channels, kernel_size=1),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, c_prev: torch.Tensor, c_prev2: torch.Tensor) -> torch.Tensor:
        q = c_prev.shape[-1]
        if q < 3:
            raise InvalidInputError(f"正则化块输入空间尺寸 {q} < 3")
        x = torch.cat([c_prev, c_prev2], dim=1)
        # 前一半为值，后一半为门
        w = F.glu(self.body(x), dim=1)
        return w + center_crop(c_prev, q - 2)


# ==================== SDNet ====================

class SDNet(nn.Module):
    """
    展开级联

    operator: (m, n_sh) 信号矩阵（作为 buffer 存入检查点）
    input_scale: 输入 DWI 的全局缩放
    retained_indices: 欠采样时保留的原始体积索引
    """

    def __init__(self, cfg: CascadeConfig, operator, input_scale: float = 1.0,
                 retained_indices: Optional[Sequence[int]] = None):
        super().__init__()
        cfg.validate()
        operator = torch.as_tensor(np.asarray(operator), dtype=torch.float32)
        if tuple(operator.shape) != (cfg.n_volumes, cfg.n_sh):
            raise InvalidInputError(
                f"算子形状 {tuple(operator.shape)} 与配置 ({cfg.n_volumes}, {cfg.n_sh}) 不一致")
        self.cfg = cfg
        self.input_scale = float(input_scale)
        self.retained_indices = None if retained_indices is None else [int(i) for i in retained_indices]
        self.register_buffer("operator", operator)

        n_dc = cfg.n_cascades + 1 if cfg.dc_enabled else 1
        self.dc_blocks = nn.ModuleList(
            DCBlock(cfg.l_max_initial if i == 0 else cfg.l_max_wm, cfg.l_max_wm, cfg.lambda_init, cfg.verify_solves)
            for i in range(n_dc))
        self.reg_blocks = nn.ModuleList(RegBlock(cfg) for _ in range(cfg.n_cascades))

    def lambdas(self) -> List[float]:
        return [float(block.lam.detach()) for block in self.dc_blocks]

    def trace(self, dwi: torch.Tensor) -> List[torch.Tensor]:
        """返回每个块的输出（初始 DC、每次迭代的正则化/DC 输出）"""
        p = self.cfg.patch_size
        if dwi.dim() != 5 or dwi.shape[1] != self.cfg.n_volumes or tuple(dwi.shape[2:]) != (p, p, p):
            raise InvalidInputError(
                f"输入形状 {tuple(dwi.shape)} 应为 (B, {self.cfg.n_volumes}, {p}, {p}, {p})")
        F_full = self.operator.to(dwi.dtype)
        b = dwi * self.input_scale

        c_prev = self.dc_blocks[0](b, F_full)
        c_prev2 = c_prev
        outputs = [c_prev]
        for k, reg in enumerate(self.reg_blocks):
            w = reg(c_prev, center_crop(c_prev2, c_prev.shape[-1]))
            b = center_crop(b, w.shape[-1])
            c_new = self.dc_blocks[k + 1](b, F_full, w) if self.cfg.dc_enabled else w
            c_prev2, c_prev = c_prev, c_new
            outputs.append(c_new)
        return outputs

    def forward(self, dwi: torch.Tensor) -> torch.Tensor:
        """(B, m, p, p, p) → 中心体素的 (B, n_sh)"""
        c = self.trace(dwi)[-1]
        r = c.shape[-1] // 2
        return c[:, :, r, r, r]

    def initial_estimate(self, dwi: torch.Tensor) -> torch.Tensor:
        """初始 DC 块（l_max_initial）的中心体素输出"""
        c = self.trace(dwi)[0]
        r = c.shape[-1] // 2
        return c[:, :, r, r, r]


def cascade_gradients(model: SDNet, dwi, cotangent) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    反向传播：给定输出余切向量，返回 (参数梯度, 输入梯度)

    模型必须处于 train 模式（BN 使用 batch 统计量）
    """
    if not model.training:
        raise InvalidStateError("cascade_gradients 需要 train 模式")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(dwi), dtype=dtype).clone().requires_grad_(True)
    cot = torch.as_tensor(np.asarray(cotangent), dtype=dtype)
    model.zero_grad(set_to_none=True)
    out = model(x)
    if cot.shape != out.shape:
        raise InvalidInputError(f"余切向量形状 {tuple(cot.shape)} 与输出 {tuple(out.shape)} 不一致")
    out.backward(cot)
    grads = {}
    for name, param in model.named_parameters():
        grad = param.grad if param.grad is not None else torch.zeros_like(param)
        grads[name] = grad.detach().cpu().numpy().copy()
    return grads, x.grad.detach().cpu().numpy().copy()


# ==================== 推理 ====================

def extract_patches(dwi: np.ndarray, centers: np.ndarray, patch_size: int) -> np.ndarray:
    """
    从 (X, Y, Z, m) 体积中取以 centers 为中心的 patch，体积外补零

    Returns:
        (N, m, p, p, p) float32
    """
    r = patch_size // 2
    padded = np.pad(np.asarray(dwi, dtype=np.float32), ((r, r), (r, r), (r, r), (0, 0)))
    offsets = np.arange(patch_size)
    centers = np.asarray(centers, dtype=int).reshape(-1, 3)
    xs = centers[:, 0, None] + offsets
    ys = centers[:, 1, None] + offsets
    zs = centers[:, 2, None] + offsets
    patches = padded[xs[:, :, None, None], ys[:, None, :, None], zs[:, None, None, :]]
    return np.ascontiguousarray(patches.transpose(0, 4, 1, 2, 3))


def reconstruct_volume(model: SDNet, dwi, mask, batch_size: int = 256) -> np.ndarray:
    """
    对 mask 内每个体素做推理（eval 模式）

    Args:
        dwi: (X, Y, Z, m) 欠采样 DWI
        mask: (X, Y, Z) 布尔 mask

    Returns:
        (X, Y, Z, n_sh) FOD 体积（mask 外为零）
    """
    dwi = np.asarray(dwi, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if dwi.ndim != 4 or dwi.shape[:3] != mask.shape:
        raise InvalidInputError(f"DWI 形状 {dwi.shape} 与 mask 形状 {mask.shape} 不匹配")
    if dwi.shape[3] != model.cfg.n_volumes:
        raise InvalidInputError(f"DWI 有 {dwi.shape[3]} 个体积，模型需要 {model.cfg.n_volumes} 个")

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    centers = np.argwhere(mask)
    out = np.zeros(mask.shape + (model.cfg.n_sh,), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(centers), batch_size):
            chunk = centers[start:start + batch_size]
            patches = torch.as_tensor(extract_patches(dwi, chunk, model.cfg.patch_size), dtype=dtype)
            pred = model(patches).cpu().numpy()
            out[chunk[:, 0], chunk[:, 1], chunk[:, 2]] = pred
    model.train(was_training)
    logger.info("[SDNet] 重建 %d 个体素", len(centers))
    return out


# ==================== 检查点 ====================

def _canonical_json(data) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_container(path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    """
    写二进制容器

    布局: magic(8) | version(u32) | header_len(u32) | header JSON | 张量数据（float32 LE，行主序）
    """
    names = list(tensors)
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names]
    blob = _canonical_json(header)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    except OSError as e:
        raise VolumeIOError(f"无法写入检查点 {path}: {e}") from e


def read_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """读二进制容器，返回 (header, 张量字典)"""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(f"无法读取检查点 {path}: {e}") from e
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise VolumeIOError(f"{path} 不是 fodforge 检查点")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise VolumeIOError(f"不支持的检查点版本 {version}")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"检查点头损坏: {e}") from e

    offset = 16 + header_len
    tensors = {}
    for entry in header.get("tensors", []):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise VolumeIOError(f"检查点数据截断（张量 {entry['name']}）")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise VolumeIOError("检查点末尾有多余数据")
    return header, tensors


def state_arrays(module: nn.Module) -> Dict[str, np.ndarray]:
    """state_dict 中的浮点张量（跳过 BN 的 num_batches_tracked）"""
    return {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()
            if not name.endswith("num_batches_tracked")}


def load_state_arrays(module: nn.Module, tensors: Dict[str, np.ndarray]) -> None:
    expected = {name: t for name, t in module.state_dict().items() if not name.endswith("num_batches_tracked")}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise VolumeIOError(f"检查点张量不匹配: 缺少 {missing}，多余 {extra}")
    state = {}
    for name, t in expected.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise VolumeIOError(f"张量 {name} 形状 {arr.shape} 与配置期望 {tuple(t.shape)} 不一致")
        state[name] = torch.as_tensor(np.array(arr), dtype=t.dtype)
    module.load_state_dict(state, strict=False)


def save_checkpoint(model: SDNet, path, extra: Optional[dict] = None) -> None:
    header = {
        "kind": "sdnet",
        "config": model.cfg.to_dict(),
        "input_scale": model.input_scale,
        "retained_indices": model.retained_indices,
    }
    if extra:
        header["extra"] = extra
    write_container(path, header, state_arrays(model))
    logger.info("[SDNet] 保存检查点 %s", path)


def load_checkpoint(path) -> SDNet:
    header, tensors = read_container(path)
    if header.get("kind") != "sdnet":
        raise VolumeIOError(f"{path} 不是 SDNet 检查点（kind={header.get('kind')!r}）")
    cfg = CascadeConfig.from_dict(header["config"])
    if "operator" not in tensors:
        raise VolumeIOError("检查点中缺少信号矩阵")
    model = SDNet(cfg, tensors["operator"], input_scale=header.get("input_scale", 1.0),
                  retained_indices=header.get("retained_indices"))
    load_state_arrays(model, tensors)
    model.eval()
    return model
