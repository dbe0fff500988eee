"""
Fixel 分割、fixel 数量分类器与评估指标
================================================================================

功能说明:
    1. segment_fixels: 在稠密对称网格上做最陡上升的波瓣分割，
       每个 fixel 给出方向、峰值幅值 f^P、表观纤维密度 f^A（波瓣积分）
    2. FixelClassifier: 全连接分类器 [45, 1000, 800, 600, 400, 200, 100, 5]，
       预测体素的 fixel 数（阈值截断到 4）
    3. 指标: sse / acc / pae / afde / fixel_accuracy
    4. evaluate_fods: 按 ROI 汇总的均值 ± 标准误报告；percentage_change 对比两份报告

分割流程:
    网格幅值 -> 每个顶点指向幅值更高的最佳邻居 -> 指针跳跃找到根（局部极大）
    -> 根幅值 > 阈值的作为种子 -> 正幅值顶点归入其种子的波瓣 -> 合并对径波瓣
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .errors import ConfigError, InvalidInputError, VolumeIOError
from .sh_basis import ShScheme, SphereMesh, default_mesh, n_coeffs
from .unrolled import load_state_arrays, read_container, state_arrays, write_container

logger = logging.getLogger(__name__)

# 分类器类别数（0..4 个 fixel）
N_CLASSES = 5
MAX_LABEL = N_CLASSES - 1

# 默认峰值阈值（幅值单位）
PEAK_THRESHOLD = 0.10

METRIC_KEYS = ("sse", "acc", "fixel_accuracy", "pae", "afde")


# ==================== Fixel 分割 ====================

@dataclass
class FixelSet:
    """按 f^P 降序排列的 fixel 集合"""

    directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    peak: np.ndarray = field(default_factory=lambda: np.zeros(0))
    afd: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.peak.shape[0]


def lmax_from_length(n: int) -> int:
    """由系数个数反推偶数阶 l_max"""
    l = 0
    while n_coeffs(l) < n:
        l += 2
    if n_coeffs(l) != n:
        raise InvalidInputError(f"系数个数 {n} 不对应任何偶数 l_max")
    return l


def _ascent_roots(amp: np.ndarray, neighbours: np.ndarray) -> np.ndarray:
    """每个顶点沿最陡上升到达的局部极大顶点"""
    padded = np.append(amp, -np.inf)
    nbr_amp = padded[neighbours]
    best = neighbours[np.arange(len(amp)), np.argmax(nbr_amp, axis=1)]
    pointer = np.where(padded[best] > amp, best, np.arange(len(amp)))
    while True:
        jumped = pointer[pointer]
        if np.array_equal(jumped, pointer):
            return pointer
        pointer = jumped


def segment_fixels(wm_coeffs, mesh: Optional[SphereMesh] = None, peak_threshold: float = PEAK_THRESHOLD) -> FixelSet:
    """
    FOD 波瓣分割

    Args:
        wm_coeffs: WM 球谐系数（长度 n(l_max)）
        mesh: 稠密对称网格（默认 724 顶点）
        peak_threshold: 种子局部极大的最小幅值

    Returns:
        FixelSet
    """
    mesh = mesh if mesh is not None else default_mesh()
    if len(mesh) == 0:
        raise InvalidInputError("分割网格不能为空")
    coeffs = np.asarray(wm_coeffs, dtype=float)
    scheme = ShScheme(lmax_from_length(coeffs.shape[-1]))
    amp = mesh.basis(scheme) @ coeffs

    roots = _ascent_roots(amp, mesh.neighbours)
    antipodes = mesh.antipodes
    lobe_of_root = np.minimum(roots, antipodes[roots])
    members = (amp > 0) & (amp[roots] > peak_threshold)
    if not np.any(members):
        return FixelSet()

    weighted = amp * mesh.weights
    dirs, peaks, afds = [], [], []
    for lobe in np.unique(lobe_of_root[members]):
        idx = np.flatnonzero(members & (lobe_of_root == lobe))
        axis = mesh.vertices[lobe]
        signs = np.sign(mesh.vertices[idx] @ axis)
        signs[signs == 0] = 1.0
        mean = (weighted[idx] * signs) @ mesh.vertices[idx]
        dirs.append(mean / np.linalg.norm(mean))
        peaks.append(amp[idx].max())
        afds.append(weighted[idx].sum())

    order = np.argsort(-np.array(peaks), kind="stable")
    return FixelSet(directions=np.array(dirs)[order], peak=np.array(peaks)[order], afd=np.array(afds)[order])


def fixel_vectors(fs: FixelSet, pad_len: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """f^P / f^A 按 f^P 降序补零到 pad_len；超长时截断并记录警告"""
    if len(fs) > pad_len:
        logger.warning("[Fixel] %d 个 fixel 超过 pad_len=%d，已截断", len(fs), pad_len)
    order = np.argsort(-fs.peak, kind="stable")[:pad_len]
    peak = np.zeros(pad_len)
    afd = np.zeros(pad_len)
    peak[: order.size] = fs.peak[order]
    afd[: order.size] = fs.afd[order]
    return peak, afd


def label_from_count(count: int) -> int:
    """fixel 数截断到 4 作为类别标签"""
    return min(int(count), MAX_LABEL)


def fixel_count_volume(fod, mask, mesh: Optional[SphereMesh] = None, peak_threshold: float = PEAK_THRESHOLD,
                       n_wm: Optional[int] = None) -> np.ndarray:
    """逐体素 fixel 数（mask 外为 0）；n_wm 为 WM 系数个数，默认取 FOD 去掉两个各向同性通道"""
    fod = np.asarray(fod, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if fod.shape[:3] != mask.shape:
        raise InvalidInputError(f"FOD 形状 {fod.shape} 与 mask 形状 {mask.shape} 不匹配")
    n_wm = n_wm if n_wm is not None else fod.shape[3] - 2
    mesh = mesh if mesh is not None else default_mesh()
    counts = np.zeros(mask.shape, dtype=int)
    for x, y, z in np.argwhere(mask):
        counts[x, y, z] = len(segment_fixels(fod[x, y, z, :n_wm], mesh, peak_threshold))
    return counts


# ==================== 指标 ====================

def _pair(a, b, what: str) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: 长度不一致 {a.shape} vs {b.shape}")
    return a, b


def sse(c, c_hat) -> float:
    """‖c − ĉ‖²"""
    a, b = _pair(c, c_hat, "sse")
    diff = a - b
    return float(diff @ diff)


def acc(c, c_hat) -> Optional[float]:
    """
    角相关系数，只用 l >= 2 的系数；任一方 l >= 2 部分全零时返回 None
    """
    a, b = _pair(c, c_hat, "acc")
    a, b = a[1:], b[1:]
    aa = float(a @ a)
    bb = float(b @ b)
    if aa == 0.0 or bb == 0.0:
        return None
    value = float(a @ b) / math.sqrt(aa * bb)
    return max(-1.0, min(1.0, value))


def pae(fp, fp_hat) -> float:
    """峰值幅值误差（L1）"""
    a, b = _pair(fp, fp_hat, "pae")
    return float(np.sum(np.abs(a - b)))


def afde(fa, fa_hat) -> float:
    """表观纤维密度误差（L1）"""
    a, b = _pair(fa, fa_hat, "afde")
    return float(np.sum(np.abs(a - b)))


def fixel_accuracy(pred_counts, true_counts, roi) -> Optional[float]:
    """ROI 内 fixel 数预测正确的比例；ROI 为空时返回 None"""
    pred = np.asarray(pred_counts)
    true = np.asarray(true_counts)
    roi = np.asarray(roi, dtype=bool)
    if pred.shape != true.shape or pred.shape != roi.shape:
        raise InvalidInputError(f"fixel_accuracy: 形状不一致 {pred.shape} / {true.shape} / {roi.shape}")
    if not np.any(roi):
        return None
    return float(np.mean(pred[roi] == true[roi]))


def count_rois(truth_counts, mask) -> Dict[str, np.ndarray]:
    """按真实 fixel 数划分 ROI: roi-1 / roi-2 / roi-3（3 个及以上）"""
    counts = np.asarray(truth_counts)
    mask = np.asarray(mask, dtype=bool)
    return {
        "roi-1": mask & (counts == 1),
        "roi-2": mask & (counts == 2),
        "roi-3": mask & (counts >= 3),
    }


def _summary(values: Sequence[float]) -> Dict[str, Optional[float]]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return {"mean": None, "sem": None}
    sem = float(np.std(arr, ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return {"mean": float(np.mean(arr)), "sem": sem}


def evaluate_fods(pred, truth, mask, rois: Optional[Dict[str, np.ndarray]] = None,
                  mesh: Optional[SphereMesh] = None, n_wm: Optional[int] = None,
                  pad_len: int = 5, peak_threshold: float = PEAK_THRESHOLD) -> dict:
    """
    逐体素计算五项指标后按 ROI 求均值 ± 标准误

    Args:
        pred / truth: (X, Y, Z, n) FOD 体积（WM 系数在前）
        mask: 评估 mask（报告中的 "wm" ROI）
        rois: 额外 ROI（默认按真实 fixel 数划分）

    Returns:
        {"rois": {name: {指标: {"mean", "sem"}, "n_voxels", "acc_excluded"}}}；ACC 以百分比表示
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"预测形状 {pred.shape} 与真值形状 {truth.shape} 不一致")
    if pred.shape[:3] != mask.shape:
        raise InvalidInputError(f"FOD 形状 {pred.shape} 与 mask 形状 {mask.shape} 不一致")
    n_wm = n_wm if n_wm is not None else pred.shape[3] - 2
    mesh = mesh if mesh is not None else default_mesh()

    shape = mask.shape
    sse_map = np.zeros(shape)
    acc_map = np.full(shape, np.nan)
    pae_map = np.zeros(shape)
    afde_map = np.zeros(shape)
    pred_counts = np.zeros(shape, dtype=int)
    true_counts = np.zeros(shape, dtype=int)

    voxels = np.argwhere(mask)
    show = logger.isEnabledFor(logging.INFO)
    for x, y, z in tqdm(voxels, desc="评估", disable=not show or len(voxels) == 0):
        c, c_hat = truth[x, y, z, :n_wm], pred[x, y, z, :n_wm]
        sse_map[x, y, z] = sse(c, c_hat)
        value = acc(c, c_hat)
        if value is not None:
            acc_map[x, y, z] = value
        fs_true = segment_fixels(c, mesh, peak_threshold)
        fs_pred = segment_fixels(c_hat, mesh, peak_threshold)
        true_counts[x, y, z] = len(fs_true)
        pred_counts[x, y, z] = len(fs_pred)
        fp, fa = fixel_vectors(fs_true, pad_len)
        fp_hat, fa_hat = fixel_vectors(fs_pred, pad_len)
        pae_map[x, y, z] = pae(fp, fp_hat)
        afde_map[x, y, z] = afde(fa, fa_hat)

    all_rois = {"wm": mask}
    all_rois.update(rois if rois is not None else count_rois(true_counts, mask))

    report = {"rois": {}}
    for name, roi in all_rois.items():
        roi = np.asarray(roi, dtype=bool) & mask
        acc_values = acc_map[roi]
        defined = acc_values[~np.isnan(acc_values)]
        report["rois"][name] = {
            "n_voxels": int(np.count_nonzero(roi)),
            "sse": _summary(sse_map[roi]),
            "acc": _summary(defined * 100.0),
            "acc_excluded": int(np.count_nonzero(np.isnan(acc_values))),
            "fixel_accuracy": _summary((pred_counts[roi] == true_counts[roi]).astype(float)),
            "pae": _summary(pae_map[roi]),
            "afde": _summary(afde_map[roi]),
        }
    return report


def percentage_change(report_a: dict, report_b: dict) -> dict:
    """每个 ROI 每个指标从 a 到 b 的相对变化（%）；a 的均值为 0 或缺失时为 None"""
    table = {}
    for name, row_a in report_a["rois"].items():
        row_b = report_b["rois"].get(name)
        if row_b is None:
            continue
        table[name] = {}
        for key in METRIC_KEYS:
            a, b = row_a[key]["mean"], row_b[key]["mean"]
            if a is None or b is None or a == 0:
                table[name][key] = None
            else:
                table[name][key] = 100.0 * (b - a) / abs(a)
    return table


def average_reports(reports: Sequence[dict]) -> dict:
    """
    多次运行（不同种子）的报告合并

    每个指标的均值取各次均值的平均，标准误取各次均值之间的标准误；体素数与 ACC 排除数累加
    """
    if not reports:
        raise InvalidInputError("没有可合并的报告")
    merged = {"rois": {}, "n_runs": len(reports)}
    for name in reports[0]["rois"]:
        rows = [r["rois"][name] for r in reports if name in r["rois"]]
        row = {"n_voxels": sum(r["n_voxels"] for r in rows), "acc_excluded": sum(r["acc_excluded"] for r in rows)}
        for key in METRIC_KEYS:
            row[key] = _summary([r[key]["mean"] for r in rows if r[key]["mean"] is not None])
        merged["rois"][name] = row
    return merged


def format_report_table(report: dict, title: str = "") -> str:
    """固定宽度的文字表格（每行一个 ROI）"""
    header = f"{'ROI':<8}{'N':>6}" + "".join(f"{k.upper():>22}" for k in METRIC_KEYS)
    lines = [title] if title else []
    lines += [header, "-" * len(header)]
    for name, row in report["rois"].items():
        cells = []
        for key in METRIC_KEYS:
            s = row[key]
            cells.append(f"{'n/a':>22}" if s["mean"] is None else f"{s['mean']:>12.4f} ± {s['sem']:<7.4f}")
        lines.append(f"{name:<8}{row['n_voxels']:>6}" + "".join(cells))
    return "\n".join(lines)


# ==================== Fixel 数量分类器 ====================

@dataclass
class ClassifierConfig:
    """分类器结构与训练参数"""

    l_max: int = 8
    hidden: Tuple[int, ...] = (1000, 800, 600, 400, 200, 100)
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0

    @property
    def widths(self) -> List[int]:
        return [n_coeffs(self.l_max), *self.hidden, N_CLASSES]


class FixelClassifier(nn.Module):
    """Linear → BN → ReLU 重复，最后一层 Linear 不接 BN"""

    def __init__(self, cfg: Optional[ClassifierConfig] = None):
        super().__init__()
        self.cfg = cfg or ClassifierConfig()
        widths = self.cfg.widths
        layers: List[nn.Module] = []
        for a, b in zip(widths[:-2], widths[1:-1]):
            layers += [nn.Linear(a, b), nn.BatchNorm1d(b), nn.ReLU()]
        layers.append(nn.Linear(widths[-2], widths[-1]))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def freeze(self) -> "FixelClassifier":
        """eval 模式并关闭参数梯度"""
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def classify_fixels(wm_coeffs, model: FixelClassifier) -> np.ndarray:
    """返回 logits；单个向量 (45,) -> (5,)，批量 (N, 45) -> (N, 5)"""
    x = np.asarray(wm_coeffs, dtype=np.float32)
    single = x.ndim == 1
    was_training = model.training
    model.eval()
    with torch.no_grad():
        dtype = next(model.parameters()).dtype
        logits = model(torch.as_tensor(np.atleast_2d(x), dtype=dtype)).cpu().numpy()
    model.train(was_training)
    return logits[0] if single else logits


def train_classifier(coeffs, labels, cfg: Optional[ClassifierConfig] = None) -> FixelClassifier:
    """
    交叉熵训练分类器（Adam），固定种子下结果逐位确定

    Args:
        coeffs: (N, n_wm) 真值 WM 系数
        labels: (N,) 类别 0..4
    """
    cfg = cfg or ClassifierConfig()
    x = torch.as_tensor(np.asarray(coeffs, dtype=np.float32))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if x.ndim != 2 or x.shape[1] != n_coeffs(cfg.l_max) or x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"分类器训练数据形状不一致: {tuple(x.shape)} / {tuple(y.shape)}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) > MAX_LABEL):
        raise InvalidInputError("标签必须在 0..4 之间")
    if len(torch.unique(y)) < 2:
        raise ConfigError("分类器训练集至少需要两个类别")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = FixelClassifier(cfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        generator = torch.Generator().manual_seed(cfg.seed)
        model.train()
        for epoch in range(cfg.epochs):
            order = torch.randperm(x.shape[0], generator=generator)
            total = 0.0
            for start in range(0, x.shape[0], cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if idx.numel() < 2:
                    continue
                optimizer.zero_grad()
                loss = F.cross_entropy(model(x[idx]), y[idx])
                loss.backward()
                optimizer.step()
                total += float(loss) * idx.numel()
            logger.debug("[Fixel] 分类器 epoch %d loss %.4f", epoch + 1, total / x.shape[0])
    model.eval()
    return model


def classifier_accuracy(model: FixelClassifier, coeffs, labels) -> float:
    logits = classify_fixels(np.asarray(coeffs), model)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def save_classifier(model: FixelClassifier, path) -> None:
    cfg = model.cfg
    header = {"kind": "classifier",
              "config": {"l_max": cfg.l_max, "hidden": list(cfg.hidden), "epochs": cfg.epochs,
                         "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate, "seed": cfg.seed}}
    write_container(path, header, state_arrays(model))
    logger.info("[Fixel] 保存分类器 %s", path)


def load_classifier(path) -> FixelClassifier:
    header, tensors = read_container(path)
    if header.get("kind") != "classifier":
        raise VolumeIOError(f"{path} 不是分类器检查点（kind={header.get('kind')!r}）")
    data = dict(header["config"])
    data["hidden"] = tuple(data["hidden"])
    model = FixelClassifier(ClassifierConfig(**data))
    load_state_arrays(model, tensors)
    return model.freeze()
