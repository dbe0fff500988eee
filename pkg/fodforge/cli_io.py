"""
体积文件格式与命令行
================================================================================

功能说明:
    1. VolumeFile: 4 字节 LE 头长度 + JSON 头（magic "FODV1"、dims、kind、voxel_size）
       + float32 LE 数据（x 最快变化）
    2. NIfTI 导出（nibabel）
    3. 命令行: phantom / fit-csd / reconstruct / train / segment / evaluate / convert / experiment

退出码:
    0 成功；2 配置 / 输入错误；3 文件读写错误

使用方法:
    python main.py phantom --out data/train --seed 0
    python main.py train --data data/train --config train.json --out model.ckpt
    python main.py evaluate --pred pred.fodv --truth data/test/fod_truth.fodv \\
        --mask data/test/wm_mask.fodv --report report.json
"""

import argparse
import json
import logging
import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .acquisition import load_scheme, save_scheme, subsample_first_k
from .csd_solver import CsdOptions, fit_voxelwise
from .errors import ConfigError, DivergenceError, FodForgeError, InvalidInputError, ParseError, VolumeIOError
from .fixel_tools import (ClassifierConfig, count_rois, evaluate_fods, fixel_count_volume, format_report_table,
                          percentage_change, save_classifier, segment_fixels)
from .forward_model import build_operator, load_response, save_response, tissue_responses
from .phantom import PhantomSpec, build_phantom, default_spec, load_spec, simulate_dwi
from .settings import get_setting
from .sh_basis import default_mesh, n_coeffs
from .training import TrainConfig, prepare_training_data, pretrain_classifier, train_sdnet
from .unrolled import CascadeConfig, SDNet, load_checkpoint, reconstruct_volume, save_checkpoint

logger = logging.getLogger(__name__)

VOLUME_MAGIC = "FODV1"
VOLUME_KINDS = ("dwi", "fod", "mask", "counts", "fixels")

PHANTOM_FILES = ("fod_truth", "wm_mask", "gm_mask", "counts", "dwi_clean", "dwi_noisy")
RESPONSE_FILES = {"WM": "response_wm.txt", "GM": "response_gm.txt", "CSF": "response_csf.txt"}


# ==================== 体积文件 ====================

@dataclass
class Volume:
    """data 形状 (X, Y, Z, C)，header 为完整 JSON 头"""

    data: np.ndarray
    header: dict

    @property
    def kind(self) -> str:
        return self.header["kind"]

    @property
    def voxel_size(self) -> List[float]:
        return self.header.get("voxel_size", [1.0, 1.0, 1.0])

    def spatial(self) -> np.ndarray:
        """mask / counts 体积去掉通道维"""
        return self.data[..., 0] if self.data.shape[3] == 1 else self.data


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_volume(path, data, kind: str, voxel_size: Sequence[float] = (1.0, 1.0, 1.0),
                 extra: Optional[dict] = None) -> None:
    """写 VolumeFile；3 维数据按单通道保存，mask 保存为 0.0 / 1.0"""
    if kind not in VOLUME_KINDS:
        raise InvalidInputError(f"未知体积类型 {kind!r}，应为 {VOLUME_KINDS}")
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise InvalidInputError(f"体积必须是 3 维或 4 维，收到形状 {arr.shape}")
    if kind != "fixels" and min(arr.shape) < 1:
        raise InvalidInputError(f"体积维度必须为正，收到 {arr.shape}")
    header = dict(extra or {})
    header.update({"magic": VOLUME_MAGIC, "dims": [int(d) for d in arr.shape], "kind": kind,
                   "voxel_size": [float(v) for v in np.broadcast_to(voxel_size, (3,))]})
    _write_raw(path, header, arr.astype("<f4"))


def _write_raw(path, header: dict, arr: np.ndarray) -> None:
    blob = _canonical(header)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(np.asarray(arr, dtype="<f4").tobytes(order="F"))
    except OSError as e:
        raise VolumeIOError(f"无法写入 {path}: {e}") from e


def read_volume(path, expect: Optional[Sequence[str]] = None) -> Volume:
    """
    读 VolumeFile

    Args:
        expect: 允许的 kind；不匹配时报 InvalidInputError
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(f"无法读取 {path}: {e}") from e
    if len(raw) < 4:
        raise VolumeIOError(f"{path}: 文件过短")
    (header_len,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"{path}: 文件头损坏 ({e})") from e
    if header.get("magic") != VOLUME_MAGIC:
        raise VolumeIOError(f"{path}: 不是 {VOLUME_MAGIC} 文件")
    dims = [int(d) for d in header.get("dims", [])]
    if len(dims) != 4 or (header.get("kind") != "fixels" and min(dims) < 1):
        raise VolumeIOError(f"{path}: dims {dims} 非法")
    payload = raw[4 + header_len:]
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise VolumeIOError(f"{path}: 数据长度 {len(payload)} 字节，应为 {expected}")
    if expect is not None and header.get("kind") not in expect:
        raise InvalidInputError(f"{path}: 体积类型为 {header.get('kind')!r}，此处需要 {list(expect)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return Volume(data=data, header=header)


def rewrite_volume(volume: Volume, path) -> None:
    """原样写回（头与数据逐字节一致）"""
    _write_raw(path, volume.header, volume.data)


def export_nifti(volume: Volume, path) -> None:
    """导出 NIfTI（仿射为按体素尺寸缩放的单位矩阵）"""
    import nibabel as nib

    affine = np.diag([*volume.voxel_size, 1.0])
    data = volume.spatial() if volume.kind in ("mask", "counts") else volume.data
    image = nib.Nifti1Image(np.asarray(data, dtype=np.float32), affine)
    image.header.set_xyzt_units("mm")
    image.header["descrip"] = f"fodforge {volume.kind}".encode("ascii")[:79]
    try:
        nib.save(image, str(path))
    except OSError as e:
        raise VolumeIOError(f"无法写入 {path}: {e}") from e


# ==================== 数据目录 ====================

def write_phantom_dir(out_dir, phantom, dwi_clean, dwi_noisy, responses) -> None:
    """幻影目录：6 个体积、bvec/bval、三个响应文件、rois/ 子目录"""
    out = Path(out_dir)
    vs = phantom.spec.voxel_size
    lmax = {"l_max_wm": phantom.spec.l_max_wm}
    write_volume(out / "fod_truth.fodv", phantom.fod, "fod", vs, extra=lmax)
    write_volume(out / "wm_mask.fodv", phantom.wm_mask, "mask", vs)
    write_volume(out / "gm_mask.fodv", phantom.gm_mask, "mask", vs)
    write_volume(out / "counts.fodv", phantom.counts, "counts", vs)
    write_volume(out / "dwi_clean.fodv", dwi_clean, "dwi", vs)
    write_volume(out / "dwi_noisy.fodv", dwi_noisy, "dwi", vs)
    save_scheme(phantom.scheme, out / "dwi.bvec", out / "dwi.bval")
    for response in responses:
        save_response(response, out / RESPONSE_FILES[response.tissue])
    for name, mask in phantom.region_masks.items():
        write_volume(out / "rois" / f"{name}.fodv", mask, "mask", vs)
    for name, mask in count_rois(phantom.counts, phantom.wm_mask).items():
        write_volume(out / "rois" / f"{name}.fodv", mask, "mask", vs)


def load_responses(paths: Sequence) -> list:
    if len(paths) != 3:
        raise ConfigError(f"需要 WM、GM、CSF 三个响应文件，收到 {len(paths)} 个")
    return [load_response(p, t) for p, t in zip(paths, ("WM", "GM", "CSF"))]


def load_data_dir(data_dir):
    """读取幻影目录，返回 (fod, dwi_noisy, scheme, responses, wm_mask, gm_mask, voxel_size, l_max_wm)"""
    d = Path(data_dir)
    fod = read_volume(d / "fod_truth.fodv", expect=["fod"])
    dwi = read_volume(d / "dwi_noisy.fodv", expect=["dwi"])
    wm = read_volume(d / "wm_mask.fodv", expect=["mask"]).spatial() > 0.5
    gm = read_volume(d / "gm_mask.fodv", expect=["mask"]).spatial() > 0.5
    scheme = load_scheme(d / "dwi.bvec", d / "dwi.bval")
    responses = load_responses([d / RESPONSE_FILES[t] for t in ("WM", "GM", "CSF")])
    if dwi.data.shape[3] != scheme.m:
        raise InvalidInputError(f"DWI 有 {dwi.data.shape[3]} 个体积，方案有 {scheme.m} 个")
    return (fod.data.astype(float), dwi.data.astype(float), scheme, responses, wm, gm, fod.voxel_size,
            int(fod.header.get("l_max_wm", 8)))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what_a: str, what_b: str) -> None:
    if a.shape[:3] != b.shape[:3]:
        raise InvalidInputError(f"{what_a} 形状 {a.shape[:3]} 与 {what_b} 形状 {b.shape[:3]} 不一致")


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法读取 {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: 第 {e.lineno} 行第 {e.colno} 列 JSON 格式错误: {e.msg}") from e


def _write_json(path, data) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    except OSError as e:
        raise VolumeIOError(f"无法写入 {path}: {e}") from e


def parse_run_config(data: dict, seed: Optional[int] = None, no_dc: bool = False):
    """运行配置 {"train": {...}, "cascade": {...}, "classifier": {...}}"""
    unknown = sorted(set(data) - {"train", "cascade", "classifier"})
    if unknown:
        raise ConfigError(f"运行配置中有未知字段: {unknown}")
    train = dict(data.get("train", {}))
    cascade = dict(data.get("cascade", {"preset": "desk"}))
    classifier = dict(data.get("classifier", {}))
    if seed is not None:
        train["seed"] = seed
        classifier["seed"] = seed
    if no_dc:
        cascade["dc_enabled"] = False
    if "hidden" in classifier:
        classifier["hidden"] = tuple(classifier["hidden"])
    try:
        return TrainConfig.from_dict(train), cascade, ClassifierConfig(**classifier)
    except TypeError as e:
        raise ConfigError(f"classifier 配置错误: {e}") from None


# ==================== 命令实现 ====================

def cmd_phantom(args) -> int:
    spec = load_spec(args.spec) if args.spec else default_spec()
    if args.seed is not None:
        spec.seed = args.seed
    logger.info("[1/3] 生成幻影几何（seed=%d）...", spec.seed)
    phantom = build_phantom(spec)
    responses = tissue_responses(phantom.scheme.nominal_bvals, spec.l_max_wm)
    op = build_operator(phantom.scheme, responses, spec.l_max_wm)
    logger.info("[2/3] 模拟 DWI（%s）...", phantom.scheme.describe())
    clean = simulate_dwi(phantom, op, noise="none")
    noisy = simulate_dwi(phantom, op)
    logger.info("[3/3] 写入 %s", args.out)
    write_phantom_dir(args.out, phantom, clean, noisy, responses)
    return 0


def cmd_fit_csd(args) -> int:
    dwi = read_volume(args.dwi, expect=["dwi"])
    bvec, bval = _split_pair(args.scheme, "--scheme")
    scheme = load_scheme(bvec, bval)
    data = dwi.data.astype(float)
    if data.shape[3] != scheme.m:
        raise InvalidInputError(f"DWI 有 {data.shape[3]} 个体积，方案有 {scheme.m} 个")
    if args.subsample:
        k, n_b0 = (int(v) for v in _split_pair(args.subsample, "--subsample"))
        scheme, kept = subsample_first_k(scheme, k, n_b0)
        data = data[..., kept]
    responses = load_responses(args.response.split(","))
    mask = _read_mask(args.mask, data)
    op = build_operator(scheme, responses, args.lmax)
    fod = fit_voxelwise(data, op, mask, CsdOptions(epsilon=args.epsilon), threads=args.threads)
    write_volume(args.out, fod, "fod", dwi.voxel_size, extra={"l_max_wm": args.lmax})
    return 0


def cmd_reconstruct(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dwi = read_volume(args.dwi, expect=["dwi"])
    data = dwi.data
    if data.shape[3] != model.cfg.n_volumes:
        if model.retained_indices and data.shape[3] > max(model.retained_indices):
            data = data[..., model.retained_indices]
        else:
            raise InvalidInputError(f"DWI 有 {data.shape[3]} 个体积，模型需要 {model.cfg.n_volumes} 个")
    if args.no_dc:
        model.cfg.dc_enabled = False
    mask = _read_mask(args.mask, data)
    fod = reconstruct_volume(model, data, mask, batch_size=args.batch_size)
    write_volume(args.out, fod, "fod", dwi.voxel_size, extra={"l_max_wm": model.cfg.l_max_wm})
    return 0


def cmd_train(args) -> int:
    train_cfg, cascade_dict, cls_cfg = parse_run_config(_read_json(args.config) if args.config else {},
                                                        seed=args.seed, no_dc=args.no_dc)
    out = Path(args.out)
    if train_cfg.log_path is None:
        train_cfg.log_path = str(out.with_suffix(".log.jsonl"))
    fod, dwi, scheme, responses, wm, gm, _, l_max = load_data_dir(args.data)
    logger.info("[1/3] 准备训练数据...")
    data = prepare_training_data(fod, dwi, scheme, responses, wm, gm, train_cfg, l_max, threads=args.threads)
    cascade_cfg = CascadeConfig.from_dict({"n_volumes": data.dwi.shape[3], "l_max_wm": l_max, **cascade_dict})
    classifier = None
    if train_cfg.kappa > 0:
        logger.info("[2/3] 训练 fixel 分类器...")
        cls_cfg.l_max = l_max
        classifier = pretrain_classifier(data, cls_cfg, seed=train_cfg.seed)
        save_classifier(classifier, out.with_suffix(".classifier"))
    logger.info("[3/3] 训练 SDNet...")
    try:
        result = train_sdnet(data, train_cfg, cascade_cfg, classifier)
    except DivergenceError as e:
        if e.last_good_state is not None:
            rescue = SDNet(cascade_cfg, data.operator, train_cfg.input_scale, data.retained_indices)
            rescue.load_state_dict(e.last_good_state)
            path = out.with_suffix(".last_good.ckpt")
            save_checkpoint(rescue, path)
            logger.error("[Train] 训练发散，已保存最后一个正常检查点: %s", path)
        raise
    for stage, state in result.stage_states.items():
        stage_model = SDNet(cascade_cfg, data.operator, train_cfg.input_scale, data.retained_indices)
        stage_model.load_state_dict(state)
        save_checkpoint(stage_model, out.with_suffix(f".stage{stage}.ckpt"))
    save_checkpoint(result.model, out)
    return 0


def cmd_segment(args) -> int:
    vol = read_volume(args.fod, expect=["fod"])
    n_wm = n_coeffs(int(vol.header.get("l_max_wm", 8)))
    mask = _read_mask(args.mask, vol.data)
    mesh = default_mesh()
    out = Path(args.out)
    counts = np.zeros(mask.shape, dtype=int)
    rows = []
    dims = mask.shape
    for x, y, z in np.argwhere(mask):
        fs = segment_fixels(vol.data[x, y, z, :n_wm].astype(float), mesh, args.threshold)
        counts[x, y, z] = len(fs)
        index = int(np.ravel_multi_index((x, y, z), dims, order="F"))
        for d, p, a in zip(fs.directions, fs.peak, fs.afd):
            rows.append([d[0], d[1], d[2], p, a, index])
    table = np.array(rows, dtype=float).reshape(-1, 6)
    write_volume(out / "counts.fodv", counts, "counts", vol.voxel_size)
    write_volume(out / "fixels.fodv", table.reshape(-1, 1, 1, 6), "fixels", vol.voxel_size,
                 extra={"columns": ["dir_x", "dir_y", "dir_z", "peak", "afd", "voxel_index"]})
    logger.info("[Fixel] %d 个体素，%d 个 fixel -> %s", int(mask.sum()), len(rows), out)
    return 0


def cmd_evaluate(args) -> int:
    pred = read_volume(args.pred, expect=["fod"])
    truth = read_volume(args.truth, expect=["fod"])
    if pred.data.shape != truth.data.shape:
        raise InvalidInputError(f"预测形状 {pred.data.shape} 与真值形状 {truth.data.shape} 不一致")
    mask = _read_mask(args.mask, truth.data)
    rois = None
    if args.roi:
        rois = {}
        for item in args.roi:
            name, _, path = item.partition("=")
            if not path:
                name, path = Path(item).stem, item
            roi = read_volume(path, expect=["mask"]).spatial() > 0.5
            _check_same_shape(roi[..., None], truth.data, f"ROI {name}", "真值")
            rois[name] = roi
    n_wm = n_coeffs(int(truth.header.get("l_max_wm", 8)))
    report = evaluate_fods(pred.data.astype(float), truth.data.astype(float), mask, rois=rois, n_wm=n_wm)
    _write_json(args.report, report)
    if args.table:
        print(format_report_table(report, title=str(args.pred)))
    return 0


def cmd_convert(args) -> int:
    export_nifti(read_volume(args.input), args.out)
    logger.info("[IO] 导出 %s", args.out)
    return 0


def cmd_experiment(args) -> int:
    from .experiment import run_experiment

    run_experiment(args.out, seed=args.seed if args.seed is not None else get_setting("FODFORGE_SEED", cast=int),
                   quick=args.quick, threads=args.threads, n_seeds=args.seeds)
    return 0


def _split_pair(text: str, flag: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise InvalidInputError(f"{flag} 需要两个逗号分隔的值，收到 {text!r}")
    return parts


def _read_mask(path, data: np.ndarray) -> np.ndarray:
    if not path:
        return np.ones(data.shape[:3], dtype=bool)
    mask = read_volume(path, expect=["mask"]).spatial() > 0.5
    _check_same_shape(mask[..., None], data, "mask", "数据")
    return mask


# ==================== 命令行入口 ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fodforge", description="欠采样多 shell DWI 的 FOD 重建")
    parser.add_argument("--threads", type=int, default=None, help="线程数（默认 FODFORGE_THREADS）")
    parser.add_argument("--log-level", default=None, help="日志级别（默认 FODFORGE_LOG_LEVEL）")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="生成合成幻影")
    p.add_argument("--spec", default=None, help="PhantomSpec JSON（默认使用内置配置）")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit-csd", help="多组织约束球面反卷积")
    p.add_argument("--dwi", required=True)
    p.add_argument("--scheme", required=True, help="bvec,bval")
    p.add_argument("--response", required=True, help="wm,gm,csf")
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--lmax", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--subsample", default=None, help="k,n_b0：只用每个 shell 的前 k 个体积")
    p.set_defaults(func=cmd_fit_csd)

    p = sub.add_parser("reconstruct", help="用 SDNet 检查点重建 FOD")
    p.add_argument("--dwi", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-dc", action="store_true", help="跳过初始块之后的 DC 块")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="训练 SDNet")
    p.add_argument("--data", required=True, help="phantom 命令的输出目录")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-dc", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="FOD 分割为 fixel")
    p.add_argument("--fod", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="计算评估指标")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--roi", action="append", default=None, help="name=path，可重复")
    p.add_argument("--report", required=True)
    p.add_argument("--table", action="store_true", help="同时打印文字表格")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("convert", help="导出 NIfTI")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("experiment", help="端到端幻影实验")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seeds", type=int, default=1, help="重复的种子数，报告取平均")
    p.set_defaults(func=cmd_experiment)
    return parser


def configure_logging(level: Optional[str]) -> None:
    level = (level or get_setting("FODFORGE_LOG_LEVEL")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="[%(asctime)s] %(message)s", datefmt="%Y-%m-%d %H:%M:%S", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if args.threads is None:
        args.threads = get_setting("FODFORGE_THREADS", cast=int)
    torch.set_num_threads(max(1, int(args.threads)))
    started = time.time()
    try:
        code = args.func(args)
    except FodForgeError as e:
        logger.error("✗ %s", e)
        return e.exit_code
    except OSError as e:
        logger.error("✗ 文件错误: %s", e)
        return 3
    logger.info("✓ %s 完成（%.1f 秒）", args.command, time.time() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
