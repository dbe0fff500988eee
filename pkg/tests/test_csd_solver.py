import itertools

import numpy as np
import pytest
import scipy.optimize

from conftest import tiny_spec_dict
from fodforge.acquisition import AcquisitionScheme
from fodforge.csd_solver import CsdOptions, CsdSolver, fit_mt_csd, fit_voxelwise
from fodforge.errors import InvalidInputError
from fodforge.forward_model import build_operator, tissue_responses
from fodforge.phantom import PhantomSpec, build_phantom, simulate_dwi
from fodforge.sh_basis import ShScheme, SphereMesh, constraint_mesh, delta_sh, electrostatic_directions


def _truth(direction, wm=0.7, gm=0.2, csf=0.1):
    d = np.asarray(direction, dtype=float)
    return np.r_[wm * delta_sh(d / np.linalg.norm(d), ShScheme(8)), gm, csf]


# ==================== 小规模穷举对照 ====================

@pytest.fixture(scope="module")
def tiny_problem():
    """l_max=2，6 个约束方向（+ GM / CSF 非负），10 个体积"""
    dirs = electrostatic_directions(9, seed=11)
    bvecs = np.vstack([np.zeros(3), dirs])
    bvals = np.r_[0.0, [1000.0] * 5, [2500.0] * 4]
    scheme = AcquisitionScheme.from_arrays(bvecs, bvals)
    op = build_operator(scheme, tissue_responses(scheme.nominal_bvals, 2), 2)
    opts = CsdOptions(mesh=SphereMesh.build(12))
    return op, opts


def _enumerate_kkt(solver, b):
    """遍历所有约束子集，返回满足 KKT 条件的解"""
    F = solver.op.matrix
    g = -(F.T @ b)
    H, A, h = solver.H, solver.A, solver.h
    n, k = H.shape[0], A.shape[0]
    best = None
    for size in range(k + 1):
        for subset in itertools.combinations(range(k), size):
            S = list(subset)
            AS = A[S]
            kkt = np.block([[H, -AS.T], [AS, np.zeros((size, size))]])
            rhs = np.r_[-g, h[S]]
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            c, mu = sol[:n], sol[n:]
            if np.all(A @ c - h >= -1e-10) and np.all(mu >= -1e-10):
                if best is None or 0.5 * c @ H @ c + g @ c < 0.5 * best @ H @ best + g @ best:
                    best = c
    return best


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_matches_exhaustive_active_set(tiny_problem, seed):
    op, opts = tiny_problem
    rng = np.random.default_rng(seed)
    # 大的 l=2 分量使部分方向的 WM 幅值为负，约束必然起作用
    c_true = np.r_[rng.uniform(0.2, 0.4), 0.6 * rng.standard_normal(5), rng.uniform(0, 0.3, 2)]
    b = op.apply(c_true) + 0.01 * rng.standard_normal(op.m)
    solver = CsdSolver(op, opts)
    assert solver.A.shape[0] == 8
    result = solver.fit(b)
    oracle = _enumerate_kkt(solver, b)
    assert result.converged
    assert oracle is not None
    np.testing.assert_allclose(result.coeffs, oracle, atol=1e-8)


# ==================== 性质 ====================

def test_zero_signal_gives_zero(full_operator):
    c = fit_mt_csd(np.zeros(full_operator.m), full_operator)
    np.testing.assert_array_equal(c, np.zeros(47))


def test_feasible_optimum_is_recovered(full_operator):
    c_true = _truth([0.3, -0.5, 0.8])
    c = fit_mt_csd(full_operator.apply(c_true), full_operator)
    assert np.linalg.norm(c - c_true) <= 1e-6 * np.linalg.norm(c_true)


def _two_fibre_signal(op, seed, sigma=0.05):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 3))
    c_true = _truth(u, wm=0.5, gm=0.1, csf=0.1) + _truth(v, wm=0.3, gm=0.0, csf=0.0)
    return op.apply(c_true) + sigma * rng.standard_normal(op.m)


@pytest.mark.parametrize("seed", range(8))
def test_noisy_crossing_reaches_kkt_point(full_operator, seed):
    b = _two_fibre_signal(full_operator, seed)
    solver = CsdSolver(full_operator)
    result = solver.fit(b)
    assert result.converged

    g = -(full_operator.matrix.T @ b)
    c = result.coeffs
    slack = solver.A @ c - solver.h
    assert slack.min() >= -1e-9
    # KKT: 驻点、对偶可行、互补松弛
    active = result.active_set
    stationarity = solver.H @ c + g - solver.A[active].T @ result.multipliers
    assert np.linalg.norm(stationarity) <= 1e-6 * np.linalg.norm(g)
    assert result.kkt_residual <= 1e-6 * np.linalg.norm(g)
    assert result.multipliers.min(initial=0.0) >= -1e-6 * np.linalg.norm(g)
    np.testing.assert_allclose(slack[active], 0.0, atol=1e-9)

    history = np.array(result.objective_history)
    assert np.all(np.diff(history) <= 1e-9 * np.abs(history).max())


@pytest.mark.parametrize("seed", [0, 1])
def test_noisy_crossing_not_worse_than_slsqp(full_operator, seed):
    b = _two_fibre_signal(full_operator, seed)
    solver = CsdSolver(full_operator)
    g = -(full_operator.matrix.T @ b)
    result = solver.fit(b)
    ref = scipy.optimize.minimize(
        lambda c: solver.objective(c, g), np.r_[0.3, np.zeros(44), 0.3, 0.3],
        jac=lambda c: solver.H @ c + g, method="SLSQP",
        constraints=[{"type": "ineq", "fun": lambda c: solver.A @ c - solver.h, "jac": lambda c: solver.A}],
        options={"ftol": 1e-12, "maxiter": 1000})
    assert solver.objective(result.coeffs, g) <= solver.objective(ref.x, g) + 1e-8 * abs(solver.objective(ref.x, g))


def test_noisy_fit_is_feasible_and_monotone(full_operator, rng):
    c_true = _truth([1.0, 0.0, 0.0], wm=0.5) + _truth([0.0, 1.0, 0.0], wm=0.3, gm=0.0, csf=0.0)
    b = full_operator.apply(c_true) + 0.05 * rng.standard_normal(full_operator.m)
    result = fit_mt_csd(b, full_operator, return_result=True)
    assert result.converged
    solver = CsdSolver(full_operator)
    slack = solver.A @ result.coeffs - solver.h
    assert slack.min() >= -1e-9
    history = np.array(result.objective_history)
    assert np.all(np.diff(history) <= 1e-9 * np.abs(history[:-1]).max())


def test_scale_equivariance(full_operator, rng):
    c_true = _truth([0.0, 0.6, 0.8])
    b = full_operator.apply(c_true) + 0.03 * rng.standard_normal(full_operator.m)
    c1 = fit_mt_csd(b, full_operator)
    c3 = fit_mt_csd(3.0 * b, full_operator)
    np.testing.assert_allclose(c3, 3.0 * c1, rtol=0, atol=1e-9 * np.abs(c3).max())


def test_underdetermined_system_is_damped(sub_operator):
    solver = CsdSolver(sub_operator)
    assert solver.damping > 0
    c_true = _truth([0.0, 0.0, 1.0])
    result = solver.fit(sub_operator.apply(c_true))
    assert result.damping == solver.damping
    assert result.converged
    b = sub_operator.apply(c_true)
    assert np.linalg.norm(sub_operator.apply(result.coeffs) - b) <= 1e-3 * np.linalg.norm(b)
    slack = solver.A @ result.coeffs - solver.h
    assert slack.min() >= -1e-9


def test_signal_length_checked(full_operator):
    with pytest.raises(InvalidInputError):
        fit_mt_csd(np.zeros(5), full_operator)
    with pytest.raises(InvalidInputError):
        CsdOptions(max_iter=0)


def test_constraint_mesh_size():
    mesh = constraint_mesh()
    assert len(mesh) == 300
    assert mesh.hemisphere.shape == (150, 3)


# ==================== 逐体素 ====================

def test_fit_voxelwise_empty_mask(full_operator):
    volume = np.ones((2, 2, 1, full_operator.m))
    out = fit_voxelwise(volume, full_operator, np.zeros((2, 2, 1), dtype=bool))
    assert out.shape == (2, 2, 1, 47)
    assert not out.any()


def test_fit_voxelwise_single_voxel_matches_direct_fit(full_operator, rng):
    volume = np.zeros((2, 1, 1, full_operator.m))
    volume[1, 0, 0] = full_operator.apply(_truth([1.0, 1.0, 0.0])) + 0.02 * rng.standard_normal(full_operator.m)
    mask = np.array([False, True]).reshape(2, 1, 1)
    out, converged = fit_voxelwise(volume, full_operator, mask, threads=2, return_convergence=True)
    np.testing.assert_allclose(out[1, 0, 0], fit_mt_csd(volume[1, 0, 0], full_operator), atol=1e-12)
    assert not out[0].any()
    assert converged.all()


def test_fit_voxelwise_shape_mismatch(full_operator):
    with pytest.raises(InvalidInputError, match="形状"):
        fit_voxelwise(np.zeros((2, 2, 1, full_operator.m)), full_operator, np.ones((2, 1, 1), dtype=bool))


def test_noiseless_phantom_round_trip():
    phantom = build_phantom(PhantomSpec.from_dict(tiny_spec_dict()))
    op = build_operator(phantom.scheme, tissue_responses(phantom.scheme.nominal_bvals, 8), 8)
    clean = simulate_dwi(phantom, op, noise="none")
    mask = np.ones(phantom.fod.shape[:3], dtype=bool)
    out, converged = fit_voxelwise(clean, op, mask, threads=2, return_convergence=True)
    assert converged.all()
    scale = np.max(np.abs(phantom.fod), axis=-1, keepdims=True)
    assert np.max(np.abs(out - phantom.fod) / scale) <= 1e-4
