import numpy as np
import pytest
import torch

from fodforge.acquisition import AcquisitionScheme
from fodforge.errors import ConfigError, InternalError, InvalidInputError, InvalidStateError, VolumeIOError
from fodforge.forward_model import build_operator, tissue_responses
from fodforge.sh_basis import electrostatic_directions
from fodforge.unrolled import (CascadeConfig, DCBlock, RegBlock, SDNet, active_columns, cascade_gradients, center_crop,
                               dc_block, extract_patches, load_checkpoint, reconstruct_volume, save_checkpoint)


@pytest.fixture(scope="module")
def toy_operator():
    """10 个体积、l_max_wm=2 的算子（n_sh = 8）"""
    dirs = electrostatic_directions(9, seed=11)
    scheme = AcquisitionScheme.from_arrays(np.vstack([np.zeros(3), dirs]), np.r_[0.0, [1000.0] * 5, [2500.0] * 4])
    return build_operator(scheme, tissue_responses(scheme.nominal_bvals, 2), 2).matrix


def _toy_model(toy_operator, **overrides):
    torch.manual_seed(0)
    cfg = CascadeConfig.preset("toy", n_volumes=10, **overrides)
    return SDNet(cfg, toy_operator)


def _patches(rng, batch, m, p):
    return torch.as_tensor(rng.uniform(0.1, 1.0, size=(batch, m, p, p, p)))


# ==================== 配置 ====================

def test_default_config_and_presets():
    cfg = CascadeConfig()
    assert cfg.n_sh == 47
    assert cfg.glu_channels == 94
    assert cfg.patch_size - 2 * cfg.n_cascades == 1
    desk = CascadeConfig.preset("desk", n_volumes=30)
    assert desk.hidden_channels == (32, 64)
    assert CascadeConfig.from_dict(desk.to_dict()) == desk


@pytest.mark.parametrize("overrides", [
    {"patch_size": 4},
    {"patch_size": 5, "n_cascades": 3},
    {"n_cascades": 0, "dc_enabled": False},
    {"l_max_initial": 10},
    {"lambda_init": 0.0},
])
def test_invalid_configs_rejected(overrides):
    with pytest.raises(ConfigError):
        CascadeConfig(**overrides)


def test_config_unknown_key_and_preset():
    with pytest.raises(ConfigError, match="depth"):
        CascadeConfig.from_dict({"depth": 3})
    with pytest.raises(ConfigError):
        CascadeConfig.preset("huge")


# ==================== DC 块 ====================

def _random_dc_instance(rng, m, n_sh=47):
    F = torch.as_tensor(rng.standard_normal((m, n_sh)))
    b = torch.as_tensor(rng.standard_normal((2, m, 3, 3, 3)))
    w = torch.as_tensor(rng.standard_normal((2, n_sh, 3, 3, 3)))
    return F, b, w


def _rows(x):
    return x.permute(0, 2, 3, 4, 1).reshape(-1, x.shape[1]).numpy()


def test_dc_block_matches_dense_solve(rng):
    for _ in range(100):
        m = int(rng.integers(10, 61))
        lam = float(10 ** rng.uniform(-6, 3))
        F, b, w = _random_dc_instance(rng, m)
        c = dc_block(b, F, w, torch.tensor(lam, dtype=torch.float64), 8, 8)
        Fn = F.numpy()
        M = Fn.T @ Fn / m + lam * np.eye(47)
        rhs = _rows(b) @ Fn / m + lam * _rows(w)
        got = _rows(c)
        # 法方程残差
        resid = np.linalg.norm(got @ M - rhs, axis=1)
        assert np.all(resid <= 1e-8 * np.linalg.norm(rhs, axis=1))
        # 与 LU 解对照（容差随条件数放宽）
        dense = np.linalg.solve(M, rhs.T).T
        tol = max(1e-10, 1e-13 * np.linalg.cond(M))
        assert np.linalg.norm(got - dense) <= tol * np.linalg.norm(dense)


def test_dc_block_large_lambda_returns_w(rng):
    for _ in range(20):
        F, b, w = _random_dc_instance(rng, int(rng.integers(10, 61)))
        c = dc_block(b, F, w, torch.tensor(1e9, dtype=torch.float64), 8, 8)
        assert float((c - w).abs().max()) <= 1e-5 * (1.0 + float(w.abs().max()))


def test_dc_block_consistent_fixed_point(sub_operator, rng):
    F = torch.as_tensor(np.array(sub_operator.matrix))
    c_star = rng.standard_normal((1, 47, 3, 3, 3))
    b = torch.einsum("mn,bnxyz->bmxyz", F, torch.as_tensor(c_star))
    for lam in (1e-4, 1.0, 50.0):
        c = dc_block(b, F, torch.as_tensor(c_star), torch.tensor(lam, dtype=torch.float64), 8, 8)
        np.testing.assert_allclose(c.numpy(), c_star, atol=1e-8)


def test_initial_block_zero_pads_high_orders(sub_operator, rng):
    F = torch.as_tensor(np.array(sub_operator.matrix))
    b = torch.as_tensor(rng.uniform(0.1, 1.0, size=(1, 30, 3, 3, 3)))
    c = dc_block(b, F, None, torch.tensor(1e-3, dtype=torch.float64), 4, 8)
    assert c.shape == (1, 47, 3, 3, 3)
    assert torch.all(c[:, 15:45] == 0)
    cols = active_columns(4, 8)
    assert cols.tolist() == list(range(15)) + [45, 46]


def test_dc_block_rejects_bad_input(rng):
    F, b, w = _random_dc_instance(rng, 12)
    with pytest.raises(InvalidInputError):
        dc_block(b, F, w, torch.tensor(-1.0, dtype=torch.float64), 8, 8)
    with pytest.raises(InvalidInputError):
        dc_block(b[:, :5], F, w, torch.tensor(1.0, dtype=torch.float64), 8, 8)
    with pytest.raises(InvalidInputError):
        dc_block(b, F, w[..., :2], torch.tensor(1.0, dtype=torch.float64), 8, 8)


def test_dc_block_verify_passes_for_exact_solve(rng):
    F, b, w = _random_dc_instance(rng, 40)
    block = DCBlock(8, 8, lambda_init=0.5, verify=True).double()
    block(b, F, w)


def test_dc_lambda_is_exp_theta():
    block = DCBlock(4, 8, lambda_init=1e-3)
    assert float(block.lam) == pytest.approx(1e-3)
    assert float(block.theta) == pytest.approx(np.log(1e-3))


# ==================== 正则化块 ====================

def test_zero_network_is_identity(rng):
    cfg = CascadeConfig.preset("desk", n_volumes=30)
    block = RegBlock(cfg).double()
    for module in block.modules():
        if isinstance(module, torch.nn.Conv3d):
            torch.nn.init.zeros_(module.weight)
            torch.nn.init.zeros_(module.bias)
    c_prev = torch.as_tensor(rng.standard_normal((2, 47, 5, 5, 5)))
    c_prev2 = torch.as_tensor(rng.standard_normal((2, 47, 5, 5, 5)))
    for mode in (True, False):
        block.train(mode)
        out = block(c_prev, c_prev2)
        assert torch.equal(out, center_crop(c_prev, 3))


def test_channel_schedule_full_config():
    block = RegBlock(CascadeConfig())
    convs = [m for m in block.modules() if isinstance(m, torch.nn.Conv3d)]
    trace = [convs[0].in_channels] + [c.out_channels for c in convs]
    assert trace == [94, 128, 192, 256, 320, 384, 448, 512, 94]


def test_reg_block_shrinks_by_two(rng):
    cfg = CascadeConfig.preset("toy", n_volumes=10)
    block = RegBlock(cfg).double()
    c = torch.as_tensor(rng.standard_normal((1, cfg.n_sh, 5, 5, 5)))
    assert block(c, c).shape == (1, cfg.n_sh, 3, 3, 3)
    with pytest.raises(InvalidInputError):
        block(c[..., :2, :2, :2], c[..., :2, :2, :2])


# ==================== SDNet ====================

def test_spatial_trace_default_depth(sub_operator, rng):
    cfg = CascadeConfig.preset("desk", n_volumes=30)
    model = SDNet(cfg, sub_operator.matrix).double().eval()
    outputs = model.trace(_patches(rng, 2, 30, 9))
    assert [o.shape[-1] for o in outputs] == [9, 7, 5, 3, 1]
    assert all(o.shape[1] == 47 for o in outputs)
    assert len(model.dc_blocks) == 5
    assert model(_patches(rng, 2, 30, 9)).shape == (2, 47)


def test_without_dc_blocks(toy_operator, rng):
    model = _toy_model(toy_operator, dc_enabled=False).double().eval()
    assert len(model.dc_blocks) == 1
    assert model(_patches(rng, 2, 10, 5)).shape == (2, 8)


def test_forward_rejects_wrong_shape(toy_operator, rng):
    model = _toy_model(toy_operator).double()
    with pytest.raises(InvalidInputError):
        model(_patches(rng, 1, 10, 7))
    with pytest.raises(InvalidInputError):
        SDNet(CascadeConfig.preset("toy", n_volumes=11), toy_operator)


def test_eval_mode_is_deterministic(toy_operator, rng):
    model = _toy_model(toy_operator).double().eval()
    x = _patches(rng, 3, 10, 5)
    assert torch.equal(model(x), model(x))


# ==================== 反向传播 ====================

def test_gradients_match_finite_differences(toy_operator, rng):
    model = _toy_model(toy_operator).double().train()
    x = _patches(rng, 3, 10, 5).numpy()
    cot = rng.standard_normal((3, 8))
    grads, _ = cascade_gradients(model, x, cot)

    def loss():
        with torch.no_grad():
            return float(torch.sum(model(torch.as_tensor(x)) * torch.as_tensor(cot)))

    params = dict(model.named_parameters())
    entries = [(name, ()) for name in params if name.endswith("theta")]
    names = [n for n in params if not n.endswith("theta")]
    for _ in range(200):
        name = names[int(rng.integers(len(names)))]
        shape = params[name].shape
        entries.append((name, tuple(int(rng.integers(s)) for s in shape)))

    scale = max(float(np.abs(g).max()) for g in grads.values())
    step = 1e-4
    for name, index in entries:
        p = params[name]
        with torch.no_grad():
            original = float(p[index])
            p[index] = original + step
            up = loss()
            p[index] = original - step
            down = loss()
            p[index] = original
        fd = (up - down) / (2 * step)
        assert abs(grads[name][index] - fd) <= 1e-3 * scale + 1e-7, name


def test_input_gradient_matches_finite_differences(toy_operator, rng):
    model = _toy_model(toy_operator).double().train()
    x = _patches(rng, 2, 10, 5).numpy()
    cot = rng.standard_normal((2, 8))
    _, grad_x = cascade_gradients(model, x, cot)
    step = 1e-5
    for _ in range(10):
        index = tuple(int(rng.integers(s)) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[index] += step
        xm[index] -= step
        with torch.no_grad():
            up = float(torch.sum(model(torch.as_tensor(xp)) * torch.as_tensor(cot)))
            down = float(torch.sum(model(torch.as_tensor(xm)) * torch.as_tensor(cot)))
        fd = (up - down) / (2 * step)
        assert abs(grad_x[index] - fd) <= 1e-3 * np.abs(grad_x).max() + 1e-7


def test_zero_cotangent_gives_zero_gradients(toy_operator, rng):
    model = _toy_model(toy_operator).double().train()
    grads, grad_x = cascade_gradients(model, _patches(rng, 2, 10, 5).numpy(), np.zeros((2, 8)))
    assert all(not np.any(g) for g in grads.values())
    assert not np.any(grad_x)


def test_gradients_require_train_mode(toy_operator, rng):
    model = _toy_model(toy_operator).double().eval()
    with pytest.raises(InvalidStateError):
        cascade_gradients(model, _patches(rng, 1, 10, 5).numpy(), np.zeros((1, 8)))


# ==================== patch 与推理 ====================

def test_extract_patches_zero_pads_edges():
    dwi = np.arange(4 * 4 * 4 * 2, dtype=np.float32).reshape(4, 4, 4, 2) + 1.0
    patches = extract_patches(dwi, np.array([[0, 0, 0], [2, 2, 2]]), 3)
    assert patches.shape == (2, 2, 3, 3, 3)
    assert patches.dtype == np.float32
    assert np.all(patches[0, :, 0, :, :] == 0)
    np.testing.assert_array_equal(patches[0, :, 1, 1, 1], dwi[0, 0, 0])
    np.testing.assert_array_equal(patches[1, :, 1, 1, 1], dwi[2, 2, 2])
    np.testing.assert_array_equal(patches[1, :, 2, 0, 1], dwi[3, 1, 2])


def test_reconstruct_volume_fills_mask_only(toy_operator, rng):
    model = _toy_model(toy_operator)
    dwi = rng.uniform(0.1, 1.0, size=(4, 3, 2, 10)).astype(np.float32)
    mask = np.zeros((4, 3, 2), dtype=bool)
    mask[1, 1, 0] = mask[3, 2, 1] = True
    out = reconstruct_volume(model, dwi, mask, batch_size=1)
    assert out.shape == (4, 3, 2, 8)
    assert not out[~mask].any()
    expected = model.eval()(torch.as_tensor(extract_patches(dwi, np.array([[1, 1, 0]]), 5))).detach().numpy()
    np.testing.assert_allclose(out[1, 1, 0], expected[0], atol=1e-6)
    with pytest.raises(InvalidInputError):
        reconstruct_volume(model, dwi[..., :9], mask)


# ==================== 检查点 ====================

def test_checkpoint_round_trip_is_byte_identical(toy_operator, tmp_path, rng):
    model = _toy_model(toy_operator)
    model.retained_indices = list(range(10))
    model.train()
    model(_patches(rng, 2, 10, 5).float())  # 更新 BN 运行统计量
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(model, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    assert loaded.cfg == model.cfg
    assert loaded.retained_indices == list(range(10))
    assert not loaded.training
    x = _patches(rng, 2, 10, 5).float()
    model.eval()
    assert torch.equal(model(x), loaded(x))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(VolumeIOError):
        load_checkpoint(path)


def test_verify_solves_flags_inconsistent_solve(monkeypatch, rng):
    import fodforge.unrolled as unrolled

    F, b, w = _random_dc_instance(rng, 20)

    def broken_solve(A, L):
        return torch.zeros_like(A)

    monkeypatch.setattr(unrolled.torch, "cholesky_solve", broken_solve)
    with pytest.raises(InternalError):
        dc_block(b, F, w, torch.tensor(1.0, dtype=torch.float64), 8, 8, verify=True)
