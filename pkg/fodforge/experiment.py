"""
端到端幻影实验

数据流程（每个种子一遍）:
    1. 训练幻影（seed）与测试幻影（seed + 1000），同一采集方案
    2. 欠采样（每个 shell 前 9 个 + 前 3 个 b0）并准备训练数据
    3. 预训练 fixel 分类器
    4. 两阶段 SDNet（阶段 1: κ = 0，阶段 2: κ > 0）与去掉 DC 块的对照，两者训练流程完全相同
    5. 测试幻影上：欠采样约束拟合（基线）、各模型重建、逐 ROI 评估
    6. 写出每个方法的报告；多个种子时再写出跨种子平均的报告与变化表
"""

import copy
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .acquisition import subsample_first_k
from .csd_solver import fit_voxelwise
from .errors import InvalidInputError
from .fixel_tools import (ClassifierConfig, average_reports, count_rois, evaluate_fods, format_report_table,
                          percentage_change, save_classifier)
from .forward_model import build_operator, tissue_responses
from .phantom import Phantom, PhantomSpec, build_phantom, default_spec, simulate_dwi
from .training import TrainConfig, TrainingData, prepare_training_data, pretrain_classifier, train_sdnet
from .unrolled import CascadeConfig, SDNet, reconstruct_volume, save_checkpoint

logger = logging.getLogger(__name__)

HELD_OUT_OFFSET = 1000


def experiment_configs(quick: bool, seed: int):
    """完整（desk）与快速两档配置"""
    if quick:
        train = TrainConfig(warmup_iterations=100, eval_every=50, max_iterations_per_stage=300, patience=3, seed=seed)
        cascade = {"preset": "desk", "n_cascades": 2, "patch_size": 5}
        classifier = ClassifierConfig(hidden=(256, 128, 64), epochs=10, seed=seed)
        n_synthetic = 500
    else:
        train = TrainConfig(warmup_iterations=1000, eval_every=250, max_iterations_per_stage=4000, seed=seed)
        cascade = {"preset": "desk"}
        classifier = ClassifierConfig(seed=seed)
        n_synthetic = 2000
    return train, cascade, classifier, n_synthetic


def phantom_pair(seed: int, spec: Optional[PhantomSpec] = None) -> Tuple[Phantom, Phantom]:
    """训练幻影（seed）与测试幻影（seed + HELD_OUT_OFFSET），测试幻影沿用训练幻影的采集方案"""
    base = spec if spec is not None else default_spec()
    spec_train = copy.deepcopy(base)
    spec_train.seed = seed
    spec_test = copy.deepcopy(base)
    spec_test.seed = seed + HELD_OUT_OFFSET
    train_ph = build_phantom(spec_train)
    return train_ph, build_phantom(spec_test, scheme=train_ph.scheme)


def _evaluation_mask(wm_mask: np.ndarray, quick: bool) -> np.ndarray:
    """快速模式只评估中间两层"""
    if not quick:
        return wm_mask
    mask = np.zeros_like(wm_mask)
    mid = wm_mask.shape[2] // 2
    mask[:, :, max(0, mid - 1):mid + 1] = wm_mask[:, :, max(0, mid - 1):mid + 1]
    return mask


def _stage_models(result, cascade_cfg: CascadeConfig, data: TrainingData, train_cfg: TrainConfig,
                  prefix: str, models_dir: Path) -> Dict[str, SDNet]:
    """每个阶段的检查点：阶段 1 记为 prefix，阶段 2 记为 prefix_kappa"""
    models = {}
    for stage, state in result.stage_states.items():
        name = prefix if stage == 1 else f"{prefix}_kappa"
        model = SDNet(cascade_cfg, data.operator, train_cfg.input_scale, data.retained_indices)
        model.load_state_dict(state)
        model.eval()
        save_checkpoint(model, models_dir / f"{name}.ckpt")
        models[name] = model
    return models


def compare_methods(reports: Dict[str, dict]) -> dict:
    """相对基线的变化，以及同阶段的无 DC 对照、κ 对照"""
    comparison = {
        "vs_baseline": {name: percentage_change(reports["baseline"], r) for name, r in reports.items() if name != "baseline"},
        "no_dc_vs_sdnet": percentage_change(reports["sdnet"], reports["sdnet_no_dc"]),
        "no_dc_vs_sdnet_kappa": None,
        "kappa_vs_sdnet": None,
    }
    if "sdnet_kappa" in reports:
        comparison["kappa_vs_sdnet"] = percentage_change(reports["sdnet"], reports["sdnet_kappa"])
        if "sdnet_no_dc_kappa" in reports:
            comparison["no_dc_vs_sdnet_kappa"] = percentage_change(reports["sdnet_kappa"], reports["sdnet_no_dc_kappa"])
    return comparison


def _run_seed(out: Path, seed: int, quick: bool, threads: Optional[int]) -> Dict[str, dict]:
    from .cli_io import _write_json, write_phantom_dir

    train_cfg, cascade_dict, cls_cfg, n_synthetic = experiment_configs(quick, seed)

    # ==================== 幻影 ====================
    logger.info("[1/6] 生成训练 / 测试幻影（seed=%d）...", seed)
    train_ph, test_ph = phantom_pair(seed)
    scheme = train_ph.scheme
    l_max = train_ph.spec.l_max_wm
    responses = tissue_responses(scheme.nominal_bvals, l_max)
    full_op = build_operator(scheme, responses, l_max)
    noisy = {}
    for name, ph in (("train", train_ph), ("test", test_ph)):
        clean = simulate_dwi(ph, full_op, noise="none")
        noisy[name] = simulate_dwi(ph, full_op)
        write_phantom_dir(out / name, ph, clean, noisy[name], responses)

    # ==================== 训练 ====================
    logger.info("[2/6] 准备训练数据...")
    data = prepare_training_data(train_ph.fod, noisy["train"], scheme, responses, train_ph.wm_mask, train_ph.gm_mask,
                                 train_cfg, l_max, threads=threads)
    cascade_cfg = CascadeConfig.from_dict({"n_volumes": data.dwi.shape[3], "l_max_wm": l_max, **cascade_dict})

    logger.info("[3/6] 训练 fixel 分类器...")
    cls_cfg.l_max = l_max
    classifier = pretrain_classifier(data, cls_cfg, n_synthetic=n_synthetic, seed=seed)
    save_classifier(classifier, out / "models" / "classifier.ckpt")

    logger.info("[4/6] 训练 SDNet 与无 DC 对照（相同阶段安排）...")
    models = {}
    no_dc_cfg = CascadeConfig.from_dict({**cascade_cfg.to_dict(), "dc_enabled": False})
    for prefix, cfg in (("sdnet", cascade_cfg), ("sdnet_no_dc", no_dc_cfg)):
        run_cfg = copy.deepcopy(train_cfg)
        run_cfg.log_path = str(out / "models" / f"{prefix}.log.jsonl")
        result = train_sdnet(data, run_cfg, cfg, classifier)
        models.update(_stage_models(result, cfg, data, run_cfg, prefix, out / "models"))

    # ==================== 评估 ====================
    sub_scheme, kept = subsample_first_k(scheme, train_cfg.k_per_shell, train_cfg.n_b0)
    test_sub = noisy["test"][..., kept]
    mask = _evaluation_mask(test_ph.wm_mask, quick)
    rois = dict(count_rois(test_ph.counts, mask))
    rois.update({name: m for name, m in test_ph.region_masks.items() if name.startswith("crossing")})

    logger.info("[5/6] 基线约束拟合（%s）...", sub_scheme.describe())
    sub_op = build_operator(sub_scheme, responses, l_max)
    predictions = {"baseline": fit_voxelwise(test_sub, sub_op, mask, threads=threads)}
    for name, model in models.items():
        predictions[name] = reconstruct_volume(model, test_sub, mask)

    logger.info("[6/6] 评估 %d 个体素...", int(mask.sum()))
    reports = {}
    for name, pred in predictions.items():
        reports[name] = evaluate_fods(pred, test_ph.fod, mask, rois=rois, n_wm=data.n_wm)
        _write_json(out / "reports" / f"{name}.json", reports[name])
        print(format_report_table(reports[name], title=f"{name} (seed {seed})"))
        print()
    return reports


def run_experiment(out_dir, seed: int = 0, quick: bool = False, threads: Optional[int] = None,
                   n_seeds: int = 1) -> Dict[str, dict]:
    """
    运行完整实验并写出报告

    Args:
        seed: 第一个种子；n_seeds > 1 时依次使用 seed, seed + 1, ...，每个种子写到 out_dir/seed<S>/
        n_seeds: 重复次数，报告取跨种子平均

    Returns:
        {方法名: 评估报告}（n_seeds > 1 时为平均报告）
    """
    from .cli_io import _write_json

    if n_seeds < 1:
        raise InvalidInputError(f"n_seeds 必须为正，收到 {n_seeds}")
    out = Path(out_dir)
    seeds = [seed + i for i in range(n_seeds)]
    per_seed = {s: _run_seed(out if n_seeds == 1 else out / f"seed{s}", s, quick, threads) for s in seeds}

    if n_seeds == 1:
        reports = per_seed[seed]
    else:
        reports = {name: average_reports([per_seed[s][name] for s in seeds]) for name in per_seed[seed]}
        for name, report in reports.items():
            _write_json(out / "reports" / f"{name}.json", report)
            print(format_report_table(report, title=f"{name} ({n_seeds} 个种子平均)"))
            print()

    comparison = compare_methods(reports)
    comparison.update({"seeds": seeds, "quick": quick,
                       "per_seed": {str(s): compare_methods(per_seed[s]) for s in seeds} if n_seeds > 1 else None})
    _write_json(out / "reports" / "comparison.json", comparison)
    wm = {name: r["rois"]["wm"]["sse"]["mean"] for name, r in reports.items()}
    logger.info("[Train] WM SSE: %s", ", ".join(f"{k}={v:.5f}" for k, v in wm.items() if v is not None))
    return reports
