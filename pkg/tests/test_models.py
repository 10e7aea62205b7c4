"""Model layer: dose-response mean, conditional densities, conjugate
reference model, simulation, and dataset serialization.

Density values are checked against scipy.stats oracles; mean values
against hand-evaluated fractions of the response formula.
"""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from zeromix.covariance import SpdMatrix
from zeromix.exceptions import (DataFormatError, DegenerateDrawError,
                                DomainError)
from zeromix.models import (DEFAULT_DOSES, CortisolModel, Dataset,
                            LinearGaussianModel, load_dataset,
                            log_prior_density, save_dataset,
                            simulate_dataset, simulate_individual)


def test_default_dose_grid():
    assert DEFAULT_DOSES == (0.005, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0)
    model = CortisolModel()
    assert model.q == 4 and model.n_obs == 7
    assert np.array_equal(model.doses, np.asarray(DEFAULT_DOSES))


def test_mean_response_by_hand():
    model = CortisolModel()
    f = model.mean(np.array([50.0, 70.0, 1.0, 0.1]))
    # x3 = 1: F(d) = 50 + 70 d / (0.1 + d)
    assert f[0] == pytest.approx(50.0 + 70.0 * 0.005 / 0.105, abs=1e-12)
    assert f[2] == pytest.approx(85.0, abs=1e-12)
    assert f[6] == pytest.approx(50.0 + 700.0 / 10.1, abs=1e-12)
    f2 = CortisolModel(doses=(0.5,)).mean(np.array([50.0, 70.0, 2.0, 0.25]))
    # 0.5^2 / (0.25^2 + 0.5^2) = 0.8
    assert f2[0] == pytest.approx(106.0, abs=1e-12)


def test_mean_rejects_off_domain_points():
    model = CortisolModel()
    with pytest.raises(DomainError):
        model.mean(np.array([50.0, 70.0, 1.0, 0.0]))
    with pytest.raises(DomainError):
        model.mean(np.array([50.0, 70.0, 1.0, -0.5]))
    with pytest.raises(DomainError):
        model.mean(np.array([np.nan, 70.0, 1.0, 0.1]))
    with pytest.raises(DomainError):
        # 10^x3 overflows against x4^x3 ~ inf/inf
        model.mean(np.array([50.0, 70.0, 1e300, 2.0]))


def test_scale_is_proportional_to_the_mean():
    model = CortisolModel()
    x = np.array([50.0, 70.0, 1.0, 0.1])
    g = model.scale(x, 0.04)
    assert np.allclose(np.diag(g), 0.2 * model.mean(x), atol=1e-12)
    with pytest.raises(DomainError):
        model.scale(x, -1.0)


def test_conditional_density_matches_scipy():
    model = CortisolModel()
    x = np.array([48.0, 65.0, 1.2, 0.09])
    theta = 0.02
    f = model.mean(x)
    rng = np.random.default_rng(0)
    for _ in range(5):
        y = f * (1.0 + 0.1 * rng.standard_normal(7))
        expected = multivariate_normal(mean=f, cov=theta * np.diag(f * f)).logpdf(y)
        assert model.log_cond_density(y, x, theta) == pytest.approx(expected, abs=1e-10)


def test_conditional_density_handles_negative_means():
    # a negative response leg is fine as long as no component is zero
    model = CortisolModel(doses=(0.5, 2.0))
    x = np.array([1.0, -3.0, 1.0, 0.5])
    f = model.mean(x)
    assert np.any(f < 0.0) and np.all(f != 0.0)
    y = np.array([-0.4, -1.5])
    expected = multivariate_normal(mean=f, cov=0.05 * np.diag(f * f)).logpdf(y)
    assert model.log_cond_density(y, x, 0.05) == pytest.approx(expected, abs=1e-10)


def test_theta_stat_sums_squared_relative_residuals():
    model = CortisolModel()
    x = np.array([50.0, 70.0, 1.0, 0.1])
    f = model.mean(x)
    y = f * 1.1
    assert model.theta_stat(y, x) == pytest.approx(7 * 0.01, abs=1e-12)


def test_batch_density_agrees_with_scalar_loop():
    model = CortisolModel()
    theta = 0.03
    rng = np.random.default_rng(4)
    xs = np.column_stack([
        rng.normal(50, 5, 8), rng.normal(70, 5, 8),
        rng.normal(1.2, 0.2, 8), rng.normal(0.1, 0.02, 8),
    ])
    xs[3, 3] = -0.01  # off-domain row
    ys = rng.normal(80, 5, (8, 7))
    logp, ok = model.log_cond_density_pairs(ys, xs, theta)
    for i in range(8):
        if ok[i]:
            assert logp[i] == pytest.approx(
                model.log_cond_density(ys[i], xs[i], theta), abs=1e-10)
        else:
            assert logp[i] == -np.inf
    assert not ok[3]
    stat = model.theta_stat_pairs(ys[ok], xs[ok])
    for k, i in enumerate(np.flatnonzero(ok)):
        assert stat[k] == pytest.approx(model.theta_stat(ys[i], xs[i]), abs=1e-10)


def test_draw_ok_requires_positive_response():
    model = CortisolModel()
    assert model.draw_ok(np.array([50.0, 70.0, 1.0, 0.1]))
    assert not model.draw_ok(np.array([50.0, 70.0, 1.0, 0.0]))
    assert not model.draw_ok(np.array([1.0, -300.0, 1.0, 0.1]))
    assert not model.draw_ok(np.array([np.inf, 70.0, 1.0, 0.1]))


def test_linear_gaussian_posterior_moments_by_direct_algebra():
    model = LinearGaussianModel(3)
    rng = np.random.default_rng(9)
    m = rng.standard_normal(3)
    sigma = SpdMatrix(np.array([[2.0, 0.4, 0.0], [0.4, 1.5, -0.3],
                                [0.0, -0.3, 1.0]]))
    theta = 0.7
    y = rng.standard_normal(3)
    mean, cov = model.posterior_moments(y, m, sigma, theta)
    prec = np.linalg.inv(sigma.values) + np.eye(3) / theta
    cov_exp = np.linalg.inv(prec)
    mean_exp = cov_exp @ (np.linalg.solve(sigma.values, m) + y / theta)
    assert np.allclose(cov, cov_exp, atol=1e-12)
    assert np.allclose(mean, mean_exp, atol=1e-12)


def test_linear_gaussian_marginal_matches_scipy():
    model = LinearGaussianModel(2)
    m = np.array([1.0, -2.0])
    sigma = SpdMatrix(np.array([[1.0, 0.3], [0.3, 2.0]]))
    theta = 0.5
    ys = np.array([[1.2, -1.5], [0.0, 0.0]])
    expected = multivariate_normal(
        mean=m, cov=sigma.values + theta * np.eye(2)).logpdf(ys).sum()
    assert model.marginal_loglik(ys, m, sigma, theta) == pytest.approx(
        expected, abs=1e-10)


def test_prior_density_matches_scipy():
    rng = np.random.default_rng(21)
    sigma = SpdMatrix(np.array([[1.5, -0.2], [-0.2, 0.8]]))
    m = np.array([0.5, -1.0])
    for _ in range(3):
        x = rng.standard_normal(2)
        expected = multivariate_normal(mean=m, cov=sigma.values).logpdf(x)
        assert log_prior_density(x, m, sigma) == pytest.approx(expected, abs=1e-12)


def test_simulate_individual_is_deterministic():
    model = CortisolModel()
    m = np.array([50.0, 70.0, 1.5, 0.08])
    sigma = SpdMatrix(np.diag([20.0, 2.5, 0.05, 1e-5]))
    x1, y1 = simulate_individual(model, m, sigma, 0.015, 42)
    x2, y2 = simulate_individual(model, m, sigma, 0.015, 42)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert model.draw_ok(x1)
    assert y1.shape == (7,)


def test_simulate_individual_gives_up_after_retries():
    class Hopeless(CortisolModel):
        def draw_ok(self, x):
            return False

    model = Hopeless()
    sigma = SpdMatrix(np.eye(4))
    with pytest.raises(DegenerateDrawError):
        simulate_individual(model, np.zeros(4), sigma, 0.01, 0, max_retries=5)


def test_simulate_dataset_shape_ids_and_determinism():
    model = CortisolModel()
    m = np.array([50.0, 70.0, 1.5, 0.08])
    sigma = SpdMatrix(np.diag([20.0, 2.5, 0.05, 1e-5]))
    data, lat = simulate_dataset(model, m, sigma, 0.015, 6, 3)
    assert data.ids == tuple(str(i) for i in range(1, 7))
    assert data.y.shape == (6, 7) and lat.shape == (6, 4)
    data2, lat2 = simulate_dataset(model, m, sigma, 0.015, 6, 3)
    assert np.array_equal(data.y, data2.y) and np.array_equal(lat, lat2)


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        Dataset(["a", "a"], np.zeros((2, 3)), np.arange(1.0, 4.0))


def test_dataset_round_trip_is_bitwise(tmp_path):
    model = CortisolModel()
    sigma = SpdMatrix(np.diag([20.0, 2.5, 0.05, 1e-5]))
    data, _ = simulate_dataset(model, np.array([50.0, 70.0, 1.5, 0.08]),
                               sigma, 0.015, 4, 11)
    path = tmp_path / "d.csv"
    save_dataset(data, path)
    back = load_dataset(path)
    assert back.ids == data.ids
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.design, data.design)


@pytest.mark.parametrize("content,fragment", [
    ("", "row 1: file is empty"),
    ("id,obs,design_value,y\n", "row 1: expected header"),
    ("id,obs_index,design_value,y\n1,1,0.5\n", "row 2: expected 4 fields"),
    ("id,obs_index,design_value,y\n1,x,0.5,2.0\n", "row 2: obs_index"),
    ("id,obs_index,design_value,y\n1,1,0.5,abc\n", "row 2: non-numeric"),
    ("id,obs_index,design_value,y\n1,1,0.5,inf\n", "row 2: non-finite"),
    ("id,obs_index,design_value,y\n1,1,0.5,2.0\n1,1,0.5,2.1\n",
     "row 3: duplicate obs_index"),
    ("id,obs_index,design_value,y\n", "row 1: no data rows"),
    ("id,obs_index,design_value,y\n1,1,0.5,2.0\n1,2,1.0,2.1\n2,1,0.5,2.2\n",
     "row 4: id 2"),
    ("id,obs_index,design_value,y\n1,1,0.5,2.0\n2,1,0.7,2.2\n",
     "row 3: id 2 has a design grid different"),
])
def test_malformed_csv_errors_cite_rows(tmp_path, content, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(DataFormatError) as err:
        load_dataset(path)
    assert fragment in str(err.value)
