# fodforge
# 欠采样多壳层扩散 MRI 的纤维方向分布（FOD）重建：展开式网络 + 约束球面反卷积

__version__ = "0.1.0"
