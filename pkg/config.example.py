"""
配置文件示例
复制此文件为 config.py 并按需修改

优先级：环境变量 > config.py > 内置默认值
"""

# 默认线程数（--threads 未指定时使用；1 = 逐位可复现）
FODFORGE_THREADS = 1

# 默认随机种子（experiment 未指定 --seed 时使用）
FODFORGE_SEED = 0

# 日志级别：DEBUG / INFO / WARNING / ERROR
# WARNING 及以上会关闭进度条
FODFORGE_LOG_LEVEL = "INFO"

# fixel 分割与球面积分使用的网格顶点数
FODFORGE_MESH_SIZE = 724

# 约束拟合中非负约束的方向数
FODFORGE_CONSTRAINT_MESH_SIZE = 300
