"""Graph and spectral operators: closed forms, eigensolver oracles, gradients."""

import math

import numpy as np
import pytest

from gacan.errors import ConvergenceError, DimensionError, ValidationError
from gacan.graph import (
    TrafficGraph,
    build_adjacency,
    cheb_conv,
    lambda_max,
    load_distances,
    normalized_laplacian,
    scaled_laplacian,
    spectral_oracle,
)
from gacan.params import ParameterStore, grad_check
from gacan.tensor import Tensor, backward, tsum


def random_distances(rng, n, scale=4.0):
    pts = rng.uniform(0, scale, size=(n, 2))
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, 0.0)
    return d


# -- adjacency ---------------------------------------------------------------

def test_adjacency_zero_distance_gives_weight_one():
    d = np.array([[0.0, 0.0], [0.0, 0.0]])
    w = build_adjacency(d)
    assert w[0, 1] == 1.0 and w[1, 0] == 1.0
    assert w[0, 0] == 0.0 and w[1, 1] == 0.0


def test_adjacency_kept_and_dropped_weights():
    d = np.array([[0.0, 2.0, 5.0], [2.0, 0.0, 9.0], [5.0, 9.0, 0.0]])
    w = build_adjacency(d, sigma2=10.0, eps_threshold=0.5)
    assert w[0, 1] == pytest.approx(math.exp(-0.4), abs=1e-12)
    # exp(-2.5) ~ 0.0821 sits below the sparsity threshold.
    assert w[0, 2] == 0.0
    assert w[1, 2] == 0.0


def test_adjacency_symmetric_zero_diag_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = build_adjacency(random_distances(rng, 7))
        assert np.array_equal(w, w.T)
        assert np.all(np.diagonal(w) == 0)
        vals = w[w > 0]
        assert np.all(vals >= 0.5) and np.all(vals <= 1.0)


def test_adjacency_inf_distance_means_no_edge():
    d = np.array([[0.0, np.inf], [np.inf, 0.0]])
    assert np.all(build_adjacency(d) == 0)


def test_adjacency_validation():
    with pytest.raises(ValidationError):
        build_adjacency(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ValidationError):
        build_adjacency(np.array([[0.0, -1.0], [-1.0, 0.0]]))
    with pytest.raises(ValidationError):
        build_adjacency(np.zeros((2, 2)), sigma2=0.0)
    with pytest.raises(ValidationError):
        build_adjacency(np.zeros((2, 2)), eps_threshold=1.0)


# -- laplacian ---------------------------------------------------------------

def test_laplacian_two_node_closed_form():
    w = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(normalized_laplacian(w), [[1.0, -1.0], [-1.0, 1.0]])


def test_laplacian_edgeless_graph_is_identity():
    assert np.array_equal(normalized_laplacian(np.zeros((4, 4))), np.eye(4))


def test_laplacian_annihilates_sqrt_degree_vector():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w = build_adjacency(random_distances(rng, 8, scale=2.0))
        lap = normalized_laplacian(w)
        null = np.sqrt(w.sum(axis=1))
        deg = w.sum(axis=1)
        # Restrict to the connected part: isolated nodes contribute L_ii = 1.
        if np.any(deg > 0):
            resid = lap @ null
            assert np.max(np.abs(resid[deg > 0])) <= 1e-12


def test_laplacian_psd_and_isolated_row():
    w = np.array([
        [0.0, 0.8, 0.0],
        [0.8, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])
    lap = normalized_laplacian(w)
    assert lap[2, 2] == 1.0 and lap[2, 0] == 0.0 and lap[2, 1] == 0.0
    eigs = np.linalg.eigvalsh(lap)
    assert np.all(eigs >= -1e-12)


# -- lambda_max --------------------------------------------------------------

def test_lambda_max_two_node_closed_form():
    lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert lambda_max(lap) == pytest.approx(2.0, abs=1e-6)


def test_lambda_max_identity():
    assert lambda_max(np.eye(5)) == pytest.approx(1.0, abs=1e-6)


def test_lambda_max_matches_dense_eigensolver():
    rng = np.random.default_rng(2)
    for trial in range(20):
        w = build_adjacency(random_distances(rng, 8))
        lap = normalized_laplacian(w)
        est = lambda_max(lap, seed=trial)
        exact = float(np.linalg.eigvalsh(lap)[-1])
        assert abs(est - exact) <= 1e-6, (trial, est, exact)


def test_lambda_max_nonconvergence_carries_estimate():
    lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
    with pytest.raises(ConvergenceError) as exc_info:
        lambda_max(lap, tol=0.0, max_iter=3)
    assert exc_info.value.last_estimate is not None
    assert 0.0 < exc_info.value.last_estimate <= 2.0 + 1e-9


# -- scaled laplacian --------------------------------------------------------

def test_scaled_laplacian_closed_form():
    lap = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert np.allclose(scaled_laplacian(lap, 2.0), [[0.0, -1.0], [-1.0, 0.0]])
    assert np.allclose(scaled_laplacian(np.eye(3), 1.0), np.eye(3))


def test_scaled_laplacian_spectrum_in_unit_interval():
    rng = np.random.default_rng(3)
    for trial in range(20):
        w = build_adjacency(random_distances(rng, 8))
        lap = normalized_laplacian(w)
        lam = lambda_max(lap, seed=trial)
        eigs = np.linalg.eigvalsh(scaled_laplacian(lap, lam))
        assert np.all(eigs >= -1.0 - 1e-6) and np.all(eigs <= 1.0 + 1e-6)


# -- chebyshev convolution ---------------------------------------------------

def test_cheb_conv_zeroth_order_passthrough():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 3)))
    lap = scaled_laplacian(np.eye(5), 1.0)
    out = cheb_conv(lap, x, [Tensor(np.eye(3))])
    assert np.allclose(out.data, x.data)


def test_cheb_conv_hand_recurrence():
    lap = np.array([[0.0, -1.0], [-1.0, 0.0]])
    x = Tensor(np.array([[1.0], [0.0]]))
    theta = [Tensor(np.array([[1.0]])), Tensor(np.array([[1.0]]))]
    out = cheb_conv(lap, x, theta)
    assert np.allclose(out.data, [[1.0], [-1.0]])


def test_cheb_conv_matches_spectral_oracle_scalar_channels():
    rng = np.random.default_rng(5)
    for trial in range(30):
        w = build_adjacency(random_distances(rng, 8))
        lap = normalized_laplacian(w)
        lam = lambda_max(lap, seed=trial)
        x = Tensor(rng.normal(size=(8, 1)))
        theta = [Tensor(rng.normal(size=(1, 1))) for _ in range(3)]
        fast = cheb_conv(scaled_laplacian(lap, lam), x, theta)
        exact = spectral_oracle(lap, x, theta, lam)
        assert np.max(np.abs(fast.data - exact)) <= 1e-8


def test_cheb_conv_matches_spectral_oracle_multichannel():
    rng = np.random.default_rng(6)
    for trial in range(10):
        w = build_adjacency(random_distances(rng, 10))
        lap = normalized_laplacian(w)
        lam = lambda_max(lap, seed=trial)
        x = Tensor(rng.normal(size=(10, 3)))
        theta = [Tensor(rng.normal(size=(3, 4))) for _ in range(5)]
        fast = cheb_conv(scaled_laplacian(lap, lam), x, theta)
        exact = spectral_oracle(lap, x, theta, lam)
        assert np.max(np.abs(fast.data - exact)) <= 1e-8


def test_spectral_oracle_identity_laplacian_is_coefficient_sum():
    # T_k(1) = 1 for every k, so the conv collapses to a scalar gain.
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 1)))
    theta = [Tensor(np.array([[c]])) for c in (0.5, -1.5, 2.0)]
    out = spectral_oracle(np.eye(4), x, theta, 1.0)
    assert np.allclose(out, x.data * (0.5 - 1.5 + 2.0))


def test_spectral_oracle_zeroth_only_ignores_graph():
    rng = np.random.default_rng(8)
    w = build_adjacency(random_distances(rng, 6))
    lap = normalized_laplacian(w)
    x = Tensor(rng.normal(size=(6, 2)))
    theta = [Tensor(np.array([[2.0, 0.0], [0.0, -1.0]]))]
    out = spectral_oracle(lap, x, theta, 1.7)
    assert np.allclose(out, x.data @ theta[0].data)


def test_cheb_conv_linear_in_signal():
    rng = np.random.default_rng(9)
    w = build_adjacency(random_distances(rng, 8))
    lap = scaled_laplacian(normalized_laplacian(w), 1.5)
    theta = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    x1, x2 = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    a, b = 0.7, -2.3
    lhs = cheb_conv(lap, Tensor(a * x1 + b * x2), theta).data
    rhs = (a * cheb_conv(lap, Tensor(x1), theta).data
           + b * cheb_conv(lap, Tensor(x2), theta).data)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_cheb_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    w = build_adjacency(random_distances(rng, 6))
    lap = scaled_laplacian(normalized_laplacian(w),
                           lambda_max(normalized_laplacian(w)))
    store = ParameterStore()
    x = store.add("x", rng.normal(size=(6, 2)))
    thetas = [store.add(f"theta{k}", rng.normal(size=(2, 2))) for k in range(4)]

    report = grad_check(
        lambda: tsum(cheb_conv(lap, x, thetas)), store, h=1e-6, tol=1e-6)
    assert all(ok for _, _, ok in report), report


def test_cheb_conv_backward_flows_to_all_coefficients():
    rng = np.random.default_rng(11)
    lap = np.array([[0.0, -1.0], [-1.0, 0.0]])
    store = ParameterStore()
    x = store.add("x", rng.normal(size=(2, 1)))
    thetas = [store.add(f"t{k}", rng.normal(size=(1, 1))) for k in range(3)]
    store.zero_grads()
    backward(tsum(cheb_conv(lap, x, thetas)))
    for th in thetas:
        assert np.any(th.grad != 0)


def test_cheb_conv_shape_errors():
    lap = np.eye(3)
    with pytest.raises(DimensionError):
        cheb_conv(lap, Tensor(np.zeros((4, 2))), [Tensor(np.zeros((2, 2)))])
    with pytest.raises(DimensionError):
        cheb_conv(lap, Tensor(np.zeros((3, 2))), [Tensor(np.zeros((3, 2)))])


# -- graph assembly ----------------------------------------------------------

def test_traffic_graph_from_distances():
    rng = np.random.default_rng(12)
    d = random_distances(rng, 8)
    g = TrafficGraph.from_distances(d)
    assert g.n_nodes == 8
    assert np.array_equal(g.adjacency, build_adjacency(d))
    eigs = np.linalg.eigvalsh(g.spectral.scaled_laplacian)
    assert np.all(np.abs(eigs) <= 1.0 + 1e-6)


def test_traffic_graph_edgeless_uses_unit_lambda():
    d = np.full((3, 3), np.inf)
    np.fill_diagonal(d, 0.0)
    g = TrafficGraph.from_distances(d)
    assert np.array_equal(g.spectral.laplacian, np.eye(3))
    assert g.spectral.lambda_max == 1.0


# -- distances file ----------------------------------------------------------

def test_load_distances_round_trip(tmp_path):
    path = tmp_path / "dist.csv"
    path.write_text("from,to,distance\n0,1,2.5\n1,2,4.0\n2,1,4.0\n")
    d = load_distances(path)
    assert d.shape == (3, 3)
    assert d[0, 1] == 2.5 and d[1, 0] == 2.5
    assert d[1, 2] == 4.0
    assert np.isinf(d[0, 2])
    assert np.all(np.diagonal(d) == 0)


def test_load_distances_direction_conflict(tmp_path):
    path = tmp_path / "dist.csv"
    path.write_text("from,to,distance\n0,1,2.5\n1,0,2.6\n")
    with pytest.raises(ValidationError):
        load_distances(path)


def test_load_distances_bad_header(tmp_path):
    path = tmp_path / "dist.csv"
    path.write_text("a,b,c\n0,1,2.5\n")
    with pytest.raises(ValidationError):
        load_distances(path)


def test_load_distances_explicit_node_count(tmp_path):
    path = tmp_path / "dist.csv"
    path.write_text("from,to,distance\n0,1,1.0\n")
    d = load_distances(path, n_nodes=4)
    assert d.shape == (4, 4)
    with pytest.raises(ValidationError):
        load_distances(path, n_nodes=1)
