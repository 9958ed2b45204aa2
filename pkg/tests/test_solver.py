from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wcslam.backend import BackendConfig, build_wcme
from wcslam.factors import H, BetweenFactor, NoiseModel, PriorFactor, VectorPriorFactor, X
from wcslam.frontend import run_frontend
from wcslam.graph_solver import (
    FactorGraph,
    GraphError,
    SingularSystem,
    SolverConfig,
    linearize,
    optimize,
    robust_cost,
    robust_weight,
)
from wcslam.liegroup import Pose3, se3_exp, se3_log
from wcslam.scenegen import NoiseSpec, SceneConfig, generate_scene, simulate_measurements


def pose_chain(rng, n: int, noisy: bool = True, loops: int = 5) -> tuple[FactorGraph, list[Pose3]]:
    """Pose graph with a prior on the first pose, odometry and a few loop closures."""
    truth = [Pose3.identity()]
    for _ in range(n - 1):
        truth.append(truth[-1].compose(se3_exp(np.concatenate([rng.normal(0, 0.1, 3), rng.normal(0, 1, 3)]))))
    g = FactorGraph()
    g.add(PriorFactor(X(0), truth[0], NoiseModel.isotropic(6, 1e-3)))
    nm = NoiseModel.twist(0.01, 0.05)
    edges = [(k - 1, k) for k in range(1, n)]
    edges += [tuple(sorted(rng.choice(n, 2, replace=False))) for _ in range(loops)]
    for a, b in edges:
        z = truth[a].between(truth[b])
        if noisy:
            z = z.compose(se3_exp(np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.05, 3)])))
        g.add(BetweenFactor(X(a), X(b), z, nm))
    for k, T in enumerate(truth):
        g.insert(X(k), T)
    return g, truth


def test_robust_weight_examples():
    assert robust_weight(1.345, 0.0) == 1.0
    assert robust_weight(1.345, 1.345) == 1.0
    assert robust_weight(1.345, 2 * 1.345) == pytest.approx(0.5, abs=1e-15)
    assert robust_weight(None, 100.0) == 1.0
    s = np.linspace(0, 50, 101)
    w = robust_weight(2.0, s)
    assert np.all((w > 0) & (w <= 1))
    with pytest.raises(ValueError):
        robust_weight(1.0, -1.0)


def test_robust_cost_is_continuous_and_linear_in_tail():
    k = 1.345
    eps = 1e-9
    assert float(robust_cost(k, k - eps)) == pytest.approx(float(robust_cost(k, k + eps)), abs=1e-8)
    assert float(robust_cost(k, 3.0)) == pytest.approx(2 * k * 3.0 - k * k)
    assert float(robust_cost(np.nan, 3.0)) == 9.0


def test_linearize_prior_at_its_value():
    P = Pose3.from_list([1, 2, 3, 0, 0, 0.6, 0.8])
    g = FactorGraph()
    g.add(PriorFactor(X(0), P, NoiseModel.isotropic(6, 1.0)))
    g.insert(X(0), P)
    ls = linearize(g)
    np.testing.assert_allclose(ls.r, 0.0, atol=1e-12)
    np.testing.assert_allclose(ls.J.toarray(), np.eye(6), atol=1e-12)
    assert ls.cost == pytest.approx(0.0, abs=1e-20)


def test_linearize_cost_and_shape():
    rng = np.random.default_rng(0)
    g, truth = pose_chain(rng, 12)
    g.add(VectorPriorFactor(("p", 0), [1.0, 2.0, 3.0], NoiseModel.isotropic(3, 0.5, huber=1.0)))
    g.insert(("p", 0), [1.5, 0.0, 3.0])
    for k in range(12):
        g.insert(X(k), se3_exp(rng.normal(0, 0.05, 6)).compose(truth[k]))
    ls = linearize(g)
    assert ls.cost == pytest.approx(g.cost(), rel=1e-10)
    rows = sum(f.dim for f in g.factors)
    cols = 6 * 12 + 3
    assert ls.J.shape == (rows, cols)
    # sparsity pattern follows factor-variable incidence
    assert ls.J.nnz <= sum(f.dim * sum(f.dims) for f in g.factors)


def test_optimum_is_left_alone():
    rng = np.random.default_rng(1)
    g, truth = pose_chain(rng, 8, noisy=False)
    values, stats = optimize(g)
    assert stats.iterations <= 1
    assert stats.final_cost == pytest.approx(stats.initial_cost, abs=1e-20)
    for k in range(8):
        np.testing.assert_allclose(se3_log(values[X(k)].between(truth[k])), 0.0, atol=1e-9)


def test_one_dimensional_quadratic():
    g = FactorGraph()
    g.add(VectorPriorFactor(("x",), [3.0], NoiseModel.isotropic(1, 0.5)))
    g.insert(("x",), [0.0])
    values, stats = optimize(g)
    assert abs(values[("x",)][0] - 3.0) < 1e-12
    # first step is the Gauss-Newton step shrunk by the initial damping only
    cfg = SolverConfig()
    first = 3.0 - np.sqrt(stats.cost_trace[1]) * 0.5
    assert first == pytest.approx(3.0 / (1 + cfg.initial_lambda), rel=1e-12)
    assert stats.converged


def test_cost_trace_monotone_on_noisy_chain():
    rng = np.random.default_rng(2)
    g, truth = pose_chain(rng, 30)
    for k in range(30):
        g.insert(X(k), se3_exp(rng.normal(0, 0.1, 6)).compose(truth[k]))
    _, stats = optimize(g)
    assert np.all(np.diff(stats.cost_trace) < 0)
    assert stats.converged


@pytest.mark.parametrize("solver", ["superlu", "dense"])
def test_sparse_and_alternative_solvers_agree(solver):
    rng = np.random.default_rng(3)
    g, truth = pose_chain(rng, 40)
    for k in range(40):
        g.insert(X(k), se3_exp(rng.normal(0, 0.05, 6)).compose(truth[k]))
    assert g.num_variables <= 50
    tight = dict(relative_tolerance=1e-14, max_iterations=50)
    a, _ = optimize(g, cfg=SolverConfig(**tight))
    b, _ = optimize(g, cfg=SolverConfig(linear_solver=solver, **tight))
    for k in range(40):
        np.testing.assert_allclose(a[X(k)].matrix(), b[X(k)].matrix(), atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_single_prior_fixes_the_gauge(seed):
    rng = np.random.default_rng(seed)
    g, truth = pose_chain(rng, 6, noisy=False, loops=2)
    for k in range(6):
        xi = rng.normal(size=6)
        xi *= rng.uniform(0, 0.1) / np.linalg.norm(xi)
        g.insert(X(k), se3_exp(xi).compose(truth[k]))
    values, stats = optimize(g)
    assert stats.final_cost < 1e-16
    for k in range(6):
        np.testing.assert_allclose(se3_log(values[X(k)].between(truth[k])), 0.0, atol=1e-7)


def test_noise_free_wcme_from_perturbed_start():
    scene = generate_scene(SceneConfig(num_frames=10, num_objects=2, points_per_object=40, num_static_points=40, seed=3))
    ms = simulate_measurements(scene, noise=NoiseSpec(sigma_pixel=0.0, sigma_depth=0.0), seed=3)
    fo = run_frontend(ms)
    g = build_wcme(fo, BackendConfig())
    rng = np.random.default_rng(4)
    init = dict(g.values)
    for key, v in init.items():
        if isinstance(v, Pose3):
            w = rng.uniform(-1, 1, 3) * 0.1 / np.sqrt(3)
            t = rng.uniform(-1, 1, 3) * 0.1 / np.sqrt(3)
            init[key] = se3_exp(np.concatenate([w, t])).compose(v)
    # the first-pose prior holds the front-end value, which is exact here
    init[X(0)] = g.values[X(0)]
    values, stats = optimize(g, init)
    assert stats.final_cost < 1e-16
    for k in range(10):
        np.testing.assert_allclose(values[X(k)].matrix(), scene.camera_poses[k].matrix(), atol=1e-6)
    n_motion = 0
    for key, v in values.items():
        if key.kind == "H":
            np.testing.assert_allclose(v.matrix(), scene.object_motion(key.obj, key.frame).matrix(), atol=1e-6)
            n_motion += 1
    assert n_motion >= 2 * 8


def test_unsolvable_system_raises():
    g = FactorGraph()
    g.add(VectorPriorFactor(("x",), [np.inf], NoiseModel.isotropic(1, 1.0)))
    g.insert(("x",), [0.0])
    with pytest.raises(SingularSystem):
        optimize(g)


def test_validate_rejects_bad_graphs():
    g = FactorGraph()
    g.add(PriorFactor(X(0), Pose3.identity(), NoiseModel.isotropic(6, 1.0)))
    with pytest.raises(GraphError, match="missing"):
        g.validate()
    g.insert(X(0), np.zeros(3))
    with pytest.raises(GraphError, match="wrong type"):
        g.validate()
    g.insert(X(0), Pose3.identity())
    g.insert(X(1), Pose3.identity())
    with pytest.raises(GraphError, match="unconstrained"):
        g.validate()


def test_dump_lists_whitened_residuals():
    g = FactorGraph()
    g.add(VectorPriorFactor(("x",), [1.0, 2.0], NoiseModel.isotropic(2, 0.5)))
    g.insert(("x",), [0.0, 0.0])
    g.add(PriorFactor(H(1, 2), Pose3.identity(), NoiseModel.isotropic(6, 1.0)))
    g.insert(H(1, 2), Pose3.identity())
    lines = g.dump().splitlines()
    assert len(lines) == 2
    name, rest = lines[0].split(" ", 1)
    assert name == "VectorPriorFactor"
    vals = [float(x) for x in rest.split("] ")[1].split()]
    assert sorted(abs(v) for v in vals) == [2.0, 4.0]
    assert lines[1].startswith("PriorFactor [H_j1_k2]")


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(relative_tolerance=1.5)
    with pytest.raises(ValueError):
        SolverConfig(initial_lambda=0.0)
    with pytest.raises(ValueError):
        SolverConfig(linear_solver="qr")
