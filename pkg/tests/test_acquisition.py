import numpy as np
import pytest

from fodforge.acquisition import (AcquisitionScheme, angular_coverage, farthest_point_order, hcp_like_scheme, load_scheme,
                                  parse_scheme, save_scheme, serialize_scheme, subsample_first_k)
from fodforge.errors import CapacityError, InvalidInputError, ParseError, VolumeIOError
from fodforge.sh_basis import electrostatic_directions


def _shell_table(scheme):
    return [(s.nominal, s.indices) for s in scheme.shells]


# ==================== 解析 ====================

def test_hcp_like_scheme_layout(hcp_scheme):
    assert hcp_scheme.m == 288
    assert list(hcp_scheme.nominal_bvals) == [0.0, 1000.0, 2000.0, 3000.0]
    assert [len(s) for s in hcp_scheme.shells] == [18, 90, 90, 90]
    assert hcp_scheme.b0_shell.is_b0
    assert len(hcp_scheme.diffusion_shells) == 3


def test_parse_single_b0_volume():
    scheme = parse_scheme("0\n0\n0\n", "0\n")
    assert scheme.m == 1
    assert len(scheme.shells) == 1
    assert scheme.shells[0].is_b0


def test_parse_single_shell_without_b0():
    dirs = electrostatic_directions(12, seed=5)
    bvec = "\n".join(" ".join(f"{v:.8f}" for v in dirs[:, axis]) for axis in range(3))
    scheme = parse_scheme(bvec, " ".join(["1000"] * 12))
    assert len(scheme.shells) == 1
    assert scheme.b0_shell is None
    assert len(scheme.shells[0]) == 12


def test_nearby_bvals_cluster_into_one_shell():
    bvals = [0, 5, 995, 1005, 1040, 1990, 2010]
    vecs = [[0, 0, 0], [0, 0, 0]] + [[1.0, 0, 0]] * 5
    scheme = AcquisitionScheme.from_arrays(vecs, bvals)
    assert list(scheme.nominal_bvals) == [0.0, 1000.0, 2000.0]
    assert scheme.shells[1].indices == (2, 3, 4)
    np.testing.assert_array_equal(scheme.shell_index(), [0, 0, 1, 1, 1, 2, 2])


def test_parse_errors_name_the_position():
    with pytest.raises(ParseError, match="第 2 行第 3 列"):
        parse_scheme("1 0 0\n0 1 abc\n0 0 1\n", "1000 1000 1000\n")
    with pytest.raises(ParseError):
        parse_scheme("1 0\n0 1\n", "1000 1000\n")
    with pytest.raises(ParseError):
        parse_scheme("1 0\n0 1\n0 0\n", "1000 1000 1000\n")


def test_non_unit_diffusion_vector_rejected():
    with pytest.raises(InvalidInputError):
        parse_scheme("0.5\n0\n0\n", "1000\n")


def test_serialize_round_trip_keeps_shells(hcp_scheme):
    bvec, bval = serialize_scheme(hcp_scheme)
    again = parse_scheme(bvec, bval)
    assert _shell_table(again) == _shell_table(hcp_scheme)
    np.testing.assert_allclose(again.bvecs, hcp_scheme.bvecs, atol=1e-5)


def test_save_and_load(tmp_path, hcp_scheme):
    save_scheme(hcp_scheme, tmp_path / "dwi.bvec", tmp_path / "dwi.bval")
    loaded = load_scheme(tmp_path / "dwi.bvec", tmp_path / "dwi.bval")
    assert _shell_table(loaded) == _shell_table(hcp_scheme)
    with pytest.raises(VolumeIOError):
        load_scheme(tmp_path / "missing.bvec", tmp_path / "dwi.bval")


# ==================== 欠采样 ====================

def test_subsample_nine_per_shell_three_b0(hcp_scheme):
    sub, kept = subsample_first_k(hcp_scheme, 9, 3)
    assert sub.m == 30
    assert len(kept) == 30
    assert kept == sorted(kept) and len(set(kept)) == 30
    assert [len(s) for s in sub.shells] == [3, 9, 9, 9]
    # 保留的是各 shell 按采集顺序的前 k 个
    assert set(kept) >= set(hcp_scheme.shells[1].indices[:9])
    assert set(kept) >= set(hcp_scheme.b0_shell.indices[:3])


def test_subsample_identity(hcp_scheme):
    sub, kept = subsample_first_k(hcp_scheme, 90, 18)
    assert kept == list(range(288))
    assert _shell_table(sub) == _shell_table(hcp_scheme)


def test_subsample_one_per_shell(hcp_scheme):
    sub, kept = subsample_first_k(hcp_scheme, 1, 0)
    assert sub.m == 3
    assert sub.b0_shell is None


def test_subsample_is_idempotent(hcp_scheme):
    once, _ = subsample_first_k(hcp_scheme, 9, 3)
    twice, kept = subsample_first_k(once, 9, 3)
    assert kept == list(range(30))
    assert _shell_table(twice) == _shell_table(once)


def test_subsample_capacity_errors(hcp_scheme):
    with pytest.raises(CapacityError, match="b=1000"):
        subsample_first_k(hcp_scheme, 91, 3)
    with pytest.raises(CapacityError):
        subsample_first_k(hcp_scheme, 9, 19)


# ==================== 方向顺序 ====================

def test_farthest_point_prefix_is_spread():
    dirs = electrostatic_directions(90, seed=17)
    ordered = dirs[farthest_point_order(dirs)]
    assert sorted(farthest_point_order(dirs)) == list(range(90))
    # 前 9 个轴两两至少相隔 25°
    assert angular_coverage(ordered[:9]) > 25.0
