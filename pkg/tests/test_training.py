import json

import numpy as np
import pytest
import torch

import fodforge.training as training
from conftest import tiny_spec_dict
from fodforge.errors import ConfigError, DivergenceError, InvalidInputError
from fodforge.fixel_tools import ClassifierConfig, FixelClassifier
from fodforge.forward_model import build_operator, tissue_responses
from fodforge.phantom import PhantomSpec, build_phantom, simulate_dwi
from fodforge.training import (TrainConfig, TrainingData, adam_step, loss_and_gradient, make_optimizer,
                               prepare_training_data, pretrain_classifier, sample_patches, sdnet_loss, split_centers,
                               train_sdnet, warmup_lr)
from fodforge.unrolled import CascadeConfig, extract_patches, state_arrays

SMALL_CASCADE = dict(patch_size=3, n_volumes=30, n_cascades=1, hidden_channels=(8,), penultimate_channels=8)


@pytest.fixture(scope="module")
def tiny_data():
    phantom = build_phantom(PhantomSpec.from_dict(tiny_spec_dict()))
    responses = tissue_responses(phantom.scheme.nominal_bvals, 8)
    op = build_operator(phantom.scheme, responses, 8)
    dwi = simulate_dwi(phantom, op)
    cfg = TrainConfig()
    data = prepare_training_data(phantom.fod, dwi, phantom.scheme, responses, phantom.wm_mask, phantom.gm_mask, cfg)
    return phantom, dwi, responses, data


def _fast_cfg(**overrides):
    base = dict(batch_size=4, warmup_iterations=4, eval_every=3, max_iterations_per_stage=6, patience=5)
    base.update(overrides)
    return TrainConfig(**base)


def _tiny_classifier():
    torch.manual_seed(0)
    return FixelClassifier(ClassifierConfig(hidden=(8,))).freeze()


# ==================== 配置与优化器 ====================

@pytest.mark.parametrize("overrides", [
    {"kappa": -1.0},
    {"lr_start": 0.0},
    {"batch_size": 0},
    {"target_source": "atlas"},
    {"validation_fraction": 1.0},
    {"patience": 0},
])
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_train_config_unknown_key():
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig.from_dict({"epochs": 3})
    assert TrainConfig.from_dict({"kappa": 0.0}).kappa == 0.0


def test_warmup_schedule():
    cfg = TrainConfig()
    assert warmup_lr(0, cfg) == pytest.approx(1e-6)
    assert warmup_lr(5_000, cfg) == pytest.approx(0.5 * (1e-6 + 1e-4))
    assert warmup_lr(10_000, cfg) == pytest.approx(1e-4)
    assert warmup_lr(50_000, cfg) == pytest.approx(1e-4)
    no_warmup = TrainConfig(warmup_iterations=0)
    assert warmup_lr(0, no_warmup) == pytest.approx(1e-4)


def test_adam_converges_on_quadratic():
    cfg = TrainConfig(warmup_iterations=1000)
    x = torch.nn.Parameter(torch.tensor(0.5, dtype=torch.float64))
    optimizer = make_optimizer([x], cfg)
    for it in range(5000):
        optimizer.zero_grad()
        loss = (x - 0.52) ** 2
        loss.backward()
        lr = adam_step(optimizer, it, cfg)
    assert lr == pytest.approx(1e-4)
    assert abs(float(x) - 0.52) < 1e-4


def test_adam_step_rejects_nan_gradient():
    cfg = TrainConfig()
    x = torch.nn.Parameter(torch.tensor(1.0))
    optimizer = make_optimizer([x], cfg)
    x.grad = torch.tensor(float("nan"))
    with pytest.raises(DivergenceError):
        adam_step(optimizer, 7, cfg)
    assert float(x) == 1.0


# ==================== 损失 ====================

def test_loss_without_classifier_is_wm_sse(rng):
    pred = torch.as_tensor(rng.standard_normal((4, 47)))
    target = torch.as_tensor(rng.standard_normal((4, 47)))
    labels = torch.zeros(4, dtype=torch.int64)
    loss = sdnet_loss(pred, target, labels, None, 0.0, n_wm=45)
    expected = np.mean(np.sum((pred.numpy()[:, :45] - target.numpy()[:, :45]) ** 2, axis=1))
    assert float(loss) == pytest.approx(expected)
    with pytest.raises(ConfigError):
        sdnet_loss(pred, target, labels, None, 0.1, n_wm=45)
    with pytest.raises(InvalidInputError):
        sdnet_loss(pred, target, torch.full((4,), 5), None, 0.0, n_wm=45)


def test_loss_with_classifier(rng):
    classifier = _tiny_classifier().double()
    pred = torch.as_tensor(rng.standard_normal((3, 47)))
    target = torch.zeros(3, 47, dtype=torch.float64)
    labels = torch.tensor([0, 2, 4])
    kappa = 0.3
    loss = sdnet_loss(pred, target, labels, classifier, kappa)
    ce = torch.nn.functional.cross_entropy(classifier(pred[:, :45]), labels, reduction="none")
    expected = torch.mean(torch.sum(pred[:, :45] ** 2, dim=1) + kappa * ce)
    assert float(loss) == pytest.approx(float(expected))


def test_loss_gradient_matches_finite_differences(rng):
    classifier = _tiny_classifier().double()
    pred = rng.standard_normal((3, 45))
    target = rng.standard_normal((3, 45))
    labels = np.array([1, 2, 3])
    _, grad = loss_and_gradient(pred, target, labels, classifier, 0.5)
    step = 1e-6
    for _ in range(15):
        i, j = int(rng.integers(3)), int(rng.integers(45))
        up, down = pred.copy(), pred.copy()
        up[i, j] += step
        down[i, j] -= step
        fd = (loss_and_gradient(up, target, labels, classifier, 0.5)[0]
              - loss_and_gradient(down, target, labels, classifier, 0.5)[0]) / (2 * step)
        assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)
    # κ = 0 时梯度就是 2(ĉ − c)/N
    _, plain = loss_and_gradient(pred, target, labels, None, 0.0)
    np.testing.assert_allclose(plain, 2.0 * (pred - target) / 3, atol=1e-12)


# ==================== 训练数据 ====================

def test_prepare_training_data_from_truth(tiny_data):
    phantom, _, _, data = tiny_data
    assert data.dwi.shape == (8, 8, 2, 30)
    assert data.dwi.dtype == np.float32
    assert data.operator.shape == (30, 47)
    assert len(data.retained_indices) == 30
    np.testing.assert_array_equal(data.targets, phantom.fod)
    fibres = phantom.wm_mask
    np.testing.assert_array_equal(data.labels[fibres], phantom.counts[fibres])
    assert np.all(data.labels[phantom.gm_mask] == 0)


def test_prepare_training_data_from_constrained_fit(tiny_data):
    phantom, _, responses, _ = tiny_data
    clean = simulate_dwi(phantom, build_operator(phantom.scheme, responses, 8), noise="none")
    wm = np.zeros(phantom.wm_mask.shape, dtype=bool)
    wm[1, 1, 0] = True
    data = prepare_training_data(phantom.fod, clean, phantom.scheme, responses, wm, np.zeros_like(wm),
                                 TrainConfig(target_source="csd"))
    assert data.targets.shape == (8, 8, 2, 47)
    assert np.count_nonzero(np.any(data.targets != 0, axis=-1)) == 1
    assert data.labels[1, 1, 0] == 1


def test_training_data_shape_checks(tiny_data):
    _, _, _, data = tiny_data
    with pytest.raises(InvalidInputError):
        TrainingData(dwi=data.dwi, targets=data.targets[:4], wm_mask=data.wm_mask, gm_mask=data.gm_mask,
                     labels=data.labels, operator=data.operator)
    with pytest.raises(InvalidInputError):
        TrainingData(dwi=data.dwi, targets=data.targets, wm_mask=data.wm_mask, gm_mask=data.gm_mask,
                     labels=data.labels, operator=data.operator[:20])


def test_sample_patches_is_deterministic(tiny_data):
    _, _, _, data = tiny_data
    a = next(sample_patches(data, 3, 5, seed=9))
    b = next(sample_patches(data, 3, 5, seed=9))
    np.testing.assert_array_equal(a.centers, b.centers)
    np.testing.assert_array_equal(a.dwi, b.dwi)
    assert a.dwi.shape == (5, 30, 3, 3, 3)
    assert a.targets.shape == (5, 47)
    assert np.all(data.sample_mask[tuple(a.centers.T)])
    x, y, z = a.centers[0]
    np.testing.assert_array_equal(a.dwi[0, :, 1, 1, 1], data.dwi[x, y, z])


def test_split_centers(tiny_data):
    _, _, _, data = tiny_data
    train, val = split_centers(data, 0.1, seed=0)
    pool = {tuple(v) for v in np.argwhere(data.sample_mask)}
    assert {tuple(v) for v in train} | {tuple(v) for v in val} == pool
    assert not {tuple(v) for v in train} & {tuple(v) for v in val}
    assert len(val) == round(0.1 * len(pool))
    again, _ = split_centers(data, 0.1, seed=0)
    np.testing.assert_array_equal(train, again)


# ==================== 训练循环 ====================

def test_two_stage_training(tiny_data, tmp_path):
    _, _, _, data = tiny_data
    log_path = tmp_path / "logs" / "train.jsonl"
    cfg = _fast_cfg(log_path=str(log_path))
    result = train_sdnet(data, cfg, CascadeConfig(**SMALL_CASCADE), classifier=_tiny_classifier())
    assert set(result.stage_states) == {1, 2}
    assert not result.model.training
    assert result.model.retained_indices == data.retained_indices
    events = [e["event"] for e in result.log]
    assert events == ["stage_start", "eval", "eval", "stage_end"] * 2
    evals = [e for e in result.log if e["event"] == "eval"]
    assert [e["kappa"] for e in evals] == [0.0, 0.0, cfg.kappa, cfg.kappa]
    assert all(len(e["lambdas"]) == 2 and min(e["lambdas"]) > 0 for e in evals)
    lines = log_path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(line) for line in lines] == result.log


def test_training_is_deterministic(tiny_data):
    _, _, _, data = tiny_data
    cfg = _fast_cfg(kappa=0.0)
    a = train_sdnet(data, cfg, CascadeConfig(**SMALL_CASCADE))
    b = train_sdnet(data, cfg, CascadeConfig(**SMALL_CASCADE))
    assert set(a.stage_states) == {1}
    for name, tensor in a.model.state_dict().items():
        assert torch.equal(tensor, b.model.state_dict()[name]), name


def test_patience_stops_stage_early(tiny_data):
    _, _, _, data = tiny_data
    cfg = _fast_cfg(eval_every=2, max_iterations_per_stage=100, patience=1, min_improvement=0.999)
    result = train_sdnet(data, cfg, CascadeConfig(**SMALL_CASCADE), classifier=_tiny_classifier())
    ends = [e["iteration"] for e in result.log if e["event"] == "stage_end"]
    assert ends == [4, 8]


def test_training_config_errors(tiny_data):
    _, _, _, data = tiny_data
    with pytest.raises(ConfigError):
        train_sdnet(data, _fast_cfg(), CascadeConfig(**SMALL_CASCADE))
    with pytest.raises(ConfigError):
        train_sdnet(data, _fast_cfg(kappa=0.0), CascadeConfig(**{**SMALL_CASCADE, "n_volumes": 31}))


def test_divergence_keeps_last_good_state(tiny_data, monkeypatch):
    _, _, _, data = tiny_data
    monkeypatch.setattr(training, "sdnet_loss", lambda *args, **kwargs: torch.tensor(float("nan")))
    with pytest.raises(DivergenceError) as info:
        train_sdnet(data, _fast_cfg(kappa=0.0), CascadeConfig(**SMALL_CASCADE))
    assert info.value.last_good_state is not None
    assert "dc_blocks.0.theta" in info.value.last_good_state


def test_stage_one_never_calls_classifier(tiny_data, monkeypatch):
    _, _, _, data = tiny_data
    classifier = _tiny_classifier()
    calls = []
    classifier.register_forward_hook(lambda module, inputs, output: calls.append(1))
    seen = []
    original = training.sdnet_loss

    def counting_loss(pred, target, labels, model, kappa, n_wm=None):
        before = len(calls)
        loss = original(pred, target, labels, model, kappa, n_wm=n_wm)
        seen.append((kappa, len(calls) - before))
        return loss

    monkeypatch.setattr(training, "sdnet_loss", counting_loss)
    cfg = _fast_cfg()
    train_sdnet(data, cfg, CascadeConfig(**SMALL_CASCADE), classifier=classifier)
    stage_one = [n for kappa, n in seen if kappa == 0.0]
    stage_two = [n for kappa, n in seen if kappa > 0.0]
    assert len(stage_one) == len(stage_two) == cfg.max_iterations_per_stage
    assert sum(stage_one) == 0
    assert stage_two == [1] * len(stage_two)


def test_classifier_unchanged_by_training(tiny_data):
    _, _, _, data = tiny_data
    classifier = _tiny_classifier()
    before = state_arrays(classifier)
    train_sdnet(data, _fast_cfg(), CascadeConfig(**SMALL_CASCADE), classifier=classifier)
    after = state_arrays(classifier)
    assert before.keys() == after.keys()
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])
    assert not classifier.training


def test_training_beats_initial_estimate(tiny_data):
    _, _, _, data = tiny_data
    cfg = _fast_cfg(kappa=0.0, batch_size=16, lr_start=1e-3, lr_end=1e-3, warmup_iterations=0,
                    eval_every=50, max_iterations_per_stage=400, patience=8)
    cascade = CascadeConfig(**{**SMALL_CASCADE, "hidden_channels": (16,), "penultimate_channels": 16})
    model = train_sdnet(data, cfg, cascade).model
    centers = np.argwhere(data.sample_mask)
    patches = torch.as_tensor(extract_patches(data.dwi, centers, cascade.patch_size))
    x, y, z = centers.T
    truth = data.targets[x, y, z, :data.n_wm]
    with torch.no_grad():
        final = model(patches).double().numpy()[:, :data.n_wm]
        initial = model.initial_estimate(patches).double().numpy()[:, :data.n_wm]
    assert np.mean(np.sum((final - truth) ** 2, axis=1)) < np.mean(np.sum((initial - truth) ** 2, axis=1))


def test_pretrain_classifier(tiny_data):
    _, _, _, data = tiny_data
    model = pretrain_classifier(data, ClassifierConfig(hidden=(16,), epochs=2, batch_size=32), n_synthetic=40)
    assert not model.training
    assert not any(p.requires_grad for p in model.parameters())
