"""
fodforge - 主程序
欠采样多 shell DWI 的纤维方向分布（FOD）重建：约束球面反卷积 + 展开式网络

功能：
1. 生成合成幻影（真值 FOD、mask、DWI）
2. 约束球面反卷积基线拟合
3. 训练 / 推理 SDNet 展开式网络
4. FOD 分割为 fixel，并按 ROI 计算评估指标

使用方法：
    python main.py phantom --out data/train --seed 0
    python main.py train --data data/train --config train.json --out models/sdnet.ckpt
    python main.py reconstruct --dwi data/test/dwi_noisy.fodv --checkpoint models/sdnet.ckpt --out pred.fodv
    python main.py evaluate --pred pred.fodv --truth data/test/fod_truth.fodv \\
        --mask data/test/wm_mask.fodv --report report.json --table
    python main.py experiment --out runs/quick --quick
"""

import os
import sys
from datetime import datetime

# 获取脚本所在目录
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))

# 将脚本目录添加到 sys.path，以便导入 fodforge
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

# 检查配置
if not os.path.exists(os.path.join(SCRIPT_DIR, "config.py")):
    print("提示: 未找到 config.py，使用环境变量或默认配置")

from fodforge import __version__
from fodforge.cli_io import main as cli_main


# ==================== 主函数 ====================

def main():
    """打印横幅后交给命令行入口"""
    if len(sys.argv) > 1 and sys.argv[1] not in ("-h", "--help"):
        print("=" * 60)
        print(f"fodforge v{__version__} - FOD 重建")
        print(f"启动时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        print("=" * 60)
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
