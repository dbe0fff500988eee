"""
SDNet 端到端训练
================================================================================

功能说明:
    1. 损失: mean(‖ĉ − c‖² + κ · CE(classifier(ĉ), label))，只用 WM 系数；
       κ = 0 时不调用分类器；分类器冻结
    2. 优化: torch.optim.Adam，学习率线性预热 1e-6 → 1e-4（前 10,000 次迭代）
    3. 两阶段: 阶段 1 κ = 0 训练到收敛，阶段 2 κ = 1.6e-4 训练到收敛
       收敛 = 连续 5 次验证 SSE 改善不超过 0.1%
    4. patch 采样: 在 WM ∪ GM 中均匀采样中心体素，体积外补零
    5. 训练日志: JSON-lines（迭代、lr、κ、λ、损失、验证指标）

数据流程:
    phantom 目录 -> prepare_training_data -> TrainingData
                -> train_classifier（冻结）-> train_sdnet -> 阶段检查点 + 日志
"""

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .acquisition import subsample_first_k
from .csd_solver import fit_voxelwise
from .errors import ConfigError, DivergenceError, InvalidInputError
from .forward_model import build_operator
from .fixel_tools import (MAX_LABEL, ClassifierConfig, FixelClassifier, acc, label_from_count, segment_fixels,
                          train_classifier)
from .phantom import synthetic_fod_dataset
from .sh_basis import n_coeffs
from .unrolled import CascadeConfig, SDNet, extract_patches

logger = logging.getLogger(__name__)


# ==================== 配置 ====================

@dataclass
class TrainConfig:
    """训练配置（JSON 文档中的 "train" 部分）"""

    kappa: float = 1.6e-4
    batch_size: int = 32
    lr_start: float = 1e-6
    lr_end: float = 1e-4
    warmup_iterations: int = 10_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    min_improvement: float = 1e-3
    eval_every: int = 500
    max_iterations_per_stage: int = 20_000
    validation_fraction: float = 0.1
    target_source: str = "truth"
    k_per_shell: int = 9
    n_b0: int = 3
    input_scale: float = 1.0
    seed: int = 0
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.kappa < 0:
            raise ConfigError(f"kappa 不能为负，收到 {self.kappa}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("学习率必须为正")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 >= 1，收到 {self.batch_size}")
        if self.target_source not in ("truth", "csd"):
            raise ConfigError(f"target_source 必须是 truth 或 csd，收到 {self.target_source!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction 必须在 (0, 1) 之间")
        if self.eval_every < 1 or self.patience < 1 or self.max_iterations_per_stage < 1:
            raise ConfigError("eval_every / patience / max_iterations_per_stage 必须为正")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"TrainConfig 中有未知字段: {unknown}")
        return cls(**data)


def warmup_lr(iteration: int, cfg: TrainConfig) -> float:
    """线性预热：iteration = 0 时为 lr_start，>= warmup_iterations 时为 lr_end"""
    if cfg.warmup_iterations <= 0 or iteration >= cfg.warmup_iterations:
        return cfg.lr_end
    t = max(iteration, 0) / cfg.warmup_iterations
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * t


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=warmup_lr(0, cfg), betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def adam_step(optimizer: torch.optim.Optimizer, iteration: int, cfg: TrainConfig) -> float:
    """
    按预热计划设置学习率后执行一步 Adam；梯度出现 NaN/Inf 时抛出 DivergenceError

    Returns:
        本步使用的学习率
    """
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise DivergenceError(f"第 {iteration} 次迭代梯度出现 NaN/Inf")
    lr = warmup_lr(iteration, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return lr


# ==================== 损失 ====================

def sdnet_loss(pred: torch.Tensor, target: torch.Tensor, labels: torch.Tensor,
               classifier: Optional[FixelClassifier], kappa: float, n_wm: Optional[int] = None) -> torch.Tensor:
    """
    mean(‖ĉ − c‖² + κ · CE)

    pred / target 可以包含各向同性系数，只取前 n_wm 个 WM 系数
    """
    n_wm = n_wm if n_wm is not None else (classifier.cfg.widths[0] if classifier is not None else pred.shape[1] - 2)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) > MAX_LABEL):
        raise InvalidInputError("标签必须在 0..4 之间")
    pred_wm = pred[:, :n_wm]
    per_sample = torch.sum((pred_wm - target[:, :n_wm]) ** 2, dim=1)
    if kappa > 0:
        if classifier is None:
            raise ConfigError("kappa > 0 需要分类器")
        logits = classifier(pred_wm.to(next(classifier.parameters()).dtype))
        per_sample = per_sample + kappa * F.cross_entropy(logits, labels, reduction="none").to(per_sample.dtype)
    return per_sample.mean()


def loss_and_gradient(pred, target, labels, classifier: Optional[FixelClassifier], kappa: float):
    """
    numpy 接口：返回 (损失, 对 pred 的梯度)
    """
    dtype = next(classifier.parameters()).dtype if classifier is not None else torch.float64
    x = torch.as_tensor(np.asarray(pred), dtype=dtype).clone().requires_grad_(True)
    t = torch.as_tensor(np.asarray(target), dtype=dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    n_wm = x.shape[1] if classifier is None else classifier.cfg.widths[0]
    loss = sdnet_loss(x, t, y, classifier, kappa, n_wm=n_wm)
    loss.backward()
    return float(loss.detach()), x.grad.detach().cpu().numpy()


# ==================== 训练数据 ====================

@dataclass
class TrainingData:
    """
    对齐的训练体积

    dwi: (X, Y, Z, m) 欠采样 DWI
    targets: (X, Y, Z, n_sh) 目标系数
    labels: (X, Y, Z) fixel 数标签（0..4）
    operator: (m, n_sh) 欠采样方案上的信号矩阵
    """

    dwi: np.ndarray
    targets: np.ndarray
    wm_mask: np.ndarray
    gm_mask: np.ndarray
    labels: np.ndarray
    operator: np.ndarray
    l_max_wm: int = 8
    retained_indices: Optional[List[int]] = None

    def __post_init__(self):
        dims = self.dwi.shape[:3]
        for name in ("targets", "wm_mask", "gm_mask", "labels"):
            if getattr(self, name).shape[:3] != dims:
                raise InvalidInputError(f"{name} 形状 {getattr(self, name).shape} 与 DWI 形状 {self.dwi.shape} 不一致")
        if self.operator.shape != (self.dwi.shape[3], self.targets.shape[3]):
            raise InvalidInputError(f"算子形状 {self.operator.shape} 与数据不一致")

    @property
    def sample_mask(self) -> np.ndarray:
        return np.asarray(self.wm_mask, dtype=bool) | np.asarray(self.gm_mask, dtype=bool)

    @property
    def n_wm(self) -> int:
        return n_coeffs(self.l_max_wm)


def label_volume(fod, mask, n_wm: int, mesh=None) -> np.ndarray:
    """真值 WM 系数分割得到的标签体积（截断到 4）"""
    labels = np.zeros(mask.shape, dtype=int)
    for x, y, z in np.argwhere(mask):
        labels[x, y, z] = label_from_count(len(segment_fixels(fod[x, y, z, :n_wm], mesh)))
    return labels


@dataclass
class PatchBatch:
    dwi: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    centers: np.ndarray


def sample_patches(data: TrainingData, patch_size: int, batch_size: int, seed: int = 0,
                   centers: Optional[np.ndarray] = None) -> Iterator[PatchBatch]:
    """
    无限的 patch 批次流：中心体素在 centers（默认 WM ∪ GM）中均匀采样，顺序由 seed 决定
    """
    pool = np.argwhere(data.sample_mask) if centers is None else np.asarray(centers, dtype=int).reshape(-1, 3)
    if len(pool) == 0:
        raise ConfigError("采样 mask 为空")
    rng = np.random.default_rng(seed)
    while True:
        chosen = pool[rng.integers(0, len(pool), size=batch_size)]
        x, y, z = chosen[:, 0], chosen[:, 1], chosen[:, 2]
        yield PatchBatch(dwi=extract_patches(data.dwi, chosen, patch_size),
                         targets=data.targets[x, y, z].astype(np.float32),
                         labels=data.labels[x, y, z].astype(np.int64),
                         centers=chosen)


def split_centers(data: TrainingData, fraction: float, seed: int):
    """确定性地划分训练 / 验证中心体素"""
    pool = np.argwhere(data.sample_mask)
    if len(pool) < 2:
        raise ConfigError("采样 mask 中至少需要 2 个体素")
    order = np.random.default_rng(seed + 1).permutation(len(pool))
    n_val = min(len(pool) - 1, max(1, int(round(fraction * len(pool)))))
    return pool[np.sort(order[n_val:])], pool[np.sort(order[:n_val])]


# ==================== 验证 ====================

def validate_model(model: SDNet, data: TrainingData, centers: np.ndarray, batch_size: int = 256,
                   mesh=None) -> Dict[str, Optional[float]]:
    """eval 模式下的验证 SSE / ACC / fixel 准确率"""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    with torch.no_grad():
        for start in range(0, len(centers), batch_size):
            chunk = centers[start:start + batch_size]
            patches = torch.as_tensor(extract_patches(data.dwi, chunk, model.cfg.patch_size), dtype=dtype)
            preds.append(model(patches).double().cpu().numpy())
    model.train(was_training)

    pred = np.concatenate(preds, axis=0)[:, :data.n_wm]
    x, y, z = centers[:, 0], centers[:, 1], centers[:, 2]
    truth = data.targets[x, y, z, :data.n_wm]
    labels = data.labels[x, y, z]
    sse_values = np.sum((pred - truth) ** 2, axis=1)
    acc_values = [v for v in (acc(t, p) for t, p in zip(truth, pred)) if v is not None]
    counts = np.array([label_from_count(len(segment_fixels(p, mesh))) for p in pred])
    return {
        "sse": float(np.mean(sse_values)),
        "acc": float(np.mean(acc_values) * 100.0) if acc_values else None,
        "fixel_accuracy": float(np.mean(counts == labels)),
    }


# ==================== 训练循环 ====================

@dataclass
class TrainResult:
    model: SDNet
    stage_states: Dict[int, dict] = field(default_factory=dict)
    log: List[dict] = field(default_factory=list)


class _JsonLinesLog:
    """追加写入的 JSON-lines 日志（同时保存在内存里）"""

    def __init__(self, path: Optional[str]):
        self.entries: List[dict] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, entry: dict) -> None:
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")


def train_sdnet(data: TrainingData, cfg: TrainConfig, cascade_cfg: CascadeConfig,
                classifier: Optional[FixelClassifier] = None, mesh=None) -> TrainResult:
    """
    两阶段训练

    阶段 1: κ = 0；阶段 2: κ = cfg.kappa（需要冻结的分类器）。
    每个阶段结束时载入该阶段验证 SSE 最好的参数作为阶段检查点。
    """
    if cascade_cfg.n_volumes != data.dwi.shape[3] or cascade_cfg.n_sh != data.targets.shape[3]:
        raise ConfigError(f"级联配置 (m={cascade_cfg.n_volumes}, n_sh={cascade_cfg.n_sh}) "
                          f"与数据 (m={data.dwi.shape[3]}, n_sh={data.targets.shape[3]}) 不一致")
    if cfg.kappa > 0 and classifier is None:
        raise ConfigError("阶段 2（kappa > 0）需要预训练的分类器")
    if classifier is not None:
        classifier.freeze()

    train_centers, val_centers = split_centers(data, cfg.validation_fraction, cfg.seed)
    log = _JsonLinesLog(cfg.log_path)
    stages = [(1, 0.0)] + ([(2, cfg.kappa)] if cfg.kappa > 0 else [])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = SDNet(cascade_cfg, data.operator, input_scale=cfg.input_scale,
                      retained_indices=data.retained_indices)
        optimizer = make_optimizer(model.parameters(), cfg)
        stream = sample_patches(data, cascade_cfg.patch_size, cfg.batch_size, seed=cfg.seed, centers=train_centers)
        result = TrainResult(model=model)
        iteration = 0
        last_good = copy.deepcopy(model.state_dict())

        for stage, kappa in stages:
            logger.info("[Train] 阶段 %d 开始（κ=%g，迭代 %d）", stage, kappa, iteration)
            log.write({"event": "stage_start", "stage": stage, "kappa": kappa, "iteration": iteration})
            best_sse, best_state, stale = math.inf, copy.deepcopy(model.state_dict()), 0
            show = logger.isEnabledFor(logging.INFO)
            progress = tqdm(total=cfg.max_iterations_per_stage, desc=f"阶段 {stage}", disable=not show)

            for stage_iter in range(1, cfg.max_iterations_per_stage + 1):
                batch = next(stream)
                model.train()
                optimizer.zero_grad()
                pred = model(torch.as_tensor(batch.dwi))
                loss = sdnet_loss(pred, torch.as_tensor(batch.targets), torch.as_tensor(batch.labels),
                                  classifier if kappa > 0 else None, kappa, n_wm=data.n_wm)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"第 {iteration} 次迭代损失为 {float(loss)}", last_good_state=last_good)
                loss.backward()
                try:
                    lr = adam_step(optimizer, iteration, cfg)
                except DivergenceError as e:
                    raise DivergenceError(str(e), last_good_state=last_good) from None
                iteration += 1
                progress.update(1)

                if iteration % cfg.eval_every == 0 or stage_iter == cfg.max_iterations_per_stage:
                    metrics = validate_model(model, data, val_centers, mesh=mesh)
                    lambdas = model.lambdas()
                    if not all(math.isfinite(v) and v > 0 for v in lambdas):
                        raise DivergenceError(f"λ 非法: {lambdas}", last_good_state=last_good)
                    entry = {"event": "eval", "stage": stage, "iteration": iteration, "lr": lr, "kappa": kappa,
                             "lambdas": lambdas, "train_loss": float(loss.detach()), **{f"val_{k}": v for k, v in metrics.items()}}
                    log.write(entry)
                    logger.info("[Train] it=%d 阶段=%d loss=%.5f 验证 SSE=%.5f ACC=%s 准确率=%.3f", iteration, stage,
                                entry["train_loss"], metrics["sse"], metrics["acc"], metrics["fixel_accuracy"])
                    last_good = copy.deepcopy(model.state_dict())
                    if metrics["sse"] < best_sse * (1.0 - cfg.min_improvement):
                        best_sse, best_state, stale = metrics["sse"], copy.deepcopy(model.state_dict()), 0
                    else:
                        stale += 1
                        if stale >= cfg.patience:
                            break
            progress.close()

            model.load_state_dict(best_state)
            result.stage_states[stage] = copy.deepcopy(best_state)
            log.write({"event": "stage_end", "stage": stage, "iteration": iteration, "best_val_sse": best_sse})
            logger.info("[Train] 阶段 %d 结束（迭代 %d，最佳验证 SSE %.5f）", stage, iteration, best_sse)

    result.log = log.entries
    model.eval()
    return result


def pretrain_classifier(data: TrainingData, cfg: Optional[ClassifierConfig] = None,
                        n_synthetic: int = 2000, seed: int = 0, mesh=None) -> FixelClassifier:
    """
    在训练体素的目标 WM 系数（加合成 FOD 补充稀有类别）上训练分类器并冻结
    """
    cfg = cfg or ClassifierConfig(l_max=data.l_max_wm, seed=seed)
    mask = data.sample_mask
    coeffs = [data.targets[mask][:, :data.n_wm]]
    labels = [data.labels[mask]]
    if n_synthetic:
        syn_c, syn_l = synthetic_fod_dataset(n_synthetic, seed=seed, l_max=data.l_max_wm, mesh=mesh)
        coeffs.append(syn_c)
        labels.append(syn_l)
    model = train_classifier(np.concatenate(coeffs), np.concatenate(labels), cfg)
    return model.freeze()


def prepare_training_data(fod_truth, dwi_full, scheme_full, responses, wm_mask, gm_mask, cfg: TrainConfig,
                          l_max_wm: int = 8, threads: Optional[int] = None, mesh=None) -> TrainingData:
    """
    由全采样数据构造训练数据

    - 输入: 每个非零 shell 的前 k 个体积 + 前 n_b0 个 b0
    - 目标: 幻影真值（truth）或全采样约束拟合（csd）
    - 标签: 目标 WM 系数分割得到的 fixel 数（截断到 4）
    """
    sub, kept = subsample_first_k(scheme_full, cfg.k_per_shell, cfg.n_b0)
    op = build_operator(sub, responses, l_max_wm)
    sample_mask = np.asarray(wm_mask, dtype=bool) | np.asarray(gm_mask, dtype=bool)

    if cfg.target_source == "truth":
        targets = np.asarray(fod_truth, dtype=float)
    else:
        full_op = build_operator(scheme_full, responses, l_max_wm)
        logger.info("[Train] 用全采样约束拟合生成目标（%d 个体素）", int(np.count_nonzero(sample_mask)))
        targets = fit_voxelwise(dwi_full, full_op, sample_mask, threads=threads)

    n_wm = n_coeffs(l_max_wm)
    labels = label_volume(targets, sample_mask, n_wm, mesh)
    return TrainingData(dwi=np.asarray(dwi_full)[..., kept].astype(np.float32), targets=targets,
                        wm_mask=np.asarray(wm_mask, dtype=bool), gm_mask=np.asarray(gm_mask, dtype=bool),
                        labels=labels, operator=op.matrix, l_max_wm=l_max_wm, retained_indices=list(kept))
