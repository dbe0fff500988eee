"""共享测试夹具"""

import os
import sys

import numpy as np
import pytest

# 将项目根目录添加到 sys.path，以便导入 fodforge
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from fodforge.acquisition import hcp_like_scheme, subsample_first_k  # noqa: E402
from fodforge.forward_model import build_operator, tissue_responses  # noqa: E402
from fodforge.phantom import PhantomSpec  # noqa: E402
from fodforge.sh_basis import default_mesh  # noqa: E402


@pytest.fixture(scope="session")
def mesh():
    return default_mesh()


@pytest.fixture(scope="session")
def hcp_scheme():
    return hcp_like_scheme()


@pytest.fixture(scope="session")
def responses(hcp_scheme):
    return tissue_responses(hcp_scheme.nominal_bvals, 8)


@pytest.fixture(scope="session")
def full_operator(hcp_scheme, responses):
    return build_operator(hcp_scheme, responses, 8)


@pytest.fixture(scope="session")
def sub_operator(hcp_scheme, responses):
    sub, _ = subsample_first_k(hcp_scheme, 9, 3)
    return build_operator(sub, responses, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec_dict(seed: int = 0) -> dict:
    """8×8×2 的小幻影：单纤维 / 90° 交叉 / 三交叉 / GM / CSF 各一块"""
    return {
        "dims": [8, 8, 2],
        "voxel_size": 2.0,
        "l_max_wm": 8,
        "seed": seed,
        "scheme": {"kind": "hcp_like", "n_b0": 6, "n_dirs": 30, "bvals": [1000, 2000, 3000]},
        "noise": {"model": "rician", "sigma": 0.05},
        "background": {"WM": 0.0, "GM": 0.0, "CSF": 1.0},
        "regions": [
            {"name": "single", "geometry": "single", "box": [[0, 4], [0, 4], [0, 2]],
             "direction": [1.0, 0.0, 0.0], "fractions": {"WM": 0.8, "GM": 0.15, "CSF": 0.05}},
            {"name": "crossing-90", "geometry": "crossing2", "box": [[4, 8], [0, 4], [0, 2]], "angle": 90.0,
             "fractions": {"WM": 0.8, "GM": 0.15, "CSF": 0.05}},
            {"name": "crossing-3", "geometry": "crossing3", "box": [[0, 4], [4, 8], [0, 2]],
             "fractions": {"WM": 0.85, "GM": 0.1, "CSF": 0.05}},
            {"name": "grey-matter", "geometry": "gm", "box": [[4, 6], [4, 8], [0, 2]],
             "fractions": {"WM": 0.0, "GM": 0.9, "CSF": 0.1}},
        ],
    }


@pytest.fixture
def tiny_spec():
    return PhantomSpec.from_dict(tiny_spec_dict())
