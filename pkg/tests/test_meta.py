import numpy as np
import pytest

from airmeta import meta, tasks
from airmeta.meta import LocalConfig, ideal_aggregate, inner_adapt, local_rounds, meta_grad_estimate
from airmeta.tasks import Dataset, DeviceDistribution, TaskEnvironment, sample_dataset, sample_device


def orthonormal_design(w, copies=1):
    """Dataset whose batches realize the population moments exactly.

    Points sqrt(d)*e_j have empirical second moment I for any full block, and
    noiseless labels make every batch gradient equal the population one.
    """
    d = w.size
    x = np.sqrt(d) * np.eye(d)
    blocks = np.vstack([x] * (1 + 2 * copies))
    y = blocks @ w
    return Dataset(x=blocks, y=y, m_tr=d, m_va=2 * copies * d)


class TestInnerAdapt:
    def test_alpha_zero_identity(self, rng):
        theta = rng.standard_normal(4)
        x = rng.standard_normal((5, 4))
        y = rng.standard_normal(5)
        assert np.array_equal(inner_adapt(theta, x, y, 0.0), theta)

    def test_explicit_single_step(self):
        # batch realizing mean gradient [1, 0]: x = [1, 0], y = -1 at theta = [1, 0]
        theta = np.array([1.0, 0.0])
        x = np.array([[1.0, 0.0]])
        y = np.array([0.0])
        phi = inner_adapt(theta, x, y, alpha=0.5)
        assert np.allclose(phi, [0.5, 0.0])

    def test_matches_literal_summation(self, rng):
        theta = rng.standard_normal(3)
        x = rng.standard_normal((7, 3))
        y = rng.standard_normal(7)
        alpha = 0.3
        expected = theta - (alpha / 7) * sum(tasks.grad(theta, x[i], y[i]) for i in range(7))
        assert np.allclose(inner_adapt(theta, x, y, alpha), expected, atol=1e-14)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            inner_adapt(np.zeros(2), np.zeros((0, 2)), np.zeros(0), 0.1)

    def test_non_finite_theta_rejected(self):
        with pytest.raises(ValueError):
            inner_adapt(np.array([np.nan, 0.0]), np.ones((1, 2)), np.ones(1), 0.1)


class TestBatchPools:
    def test_pools_are_disjoint(self):
        ds = Dataset(x=np.zeros((10, 2)), y=np.zeros(10), m_tr=4, m_va=6)
        pools = meta.batch_pools(ds, 2)
        flat = np.concatenate(pools)
        assert len(set(flat.tolist())) == flat.size
        assert set(pools[0].tolist()) == set(range(4))

    def test_too_small_dataset_rejected(self):
        ds = Dataset(x=np.zeros((6, 2)), y=np.zeros(6), m_tr=3, m_va=3)
        with pytest.raises(ValueError):
            meta.batch_pools(ds, 2)


class TestMetaGradEstimate:
    def test_exact_design_matches_population_meta_grad(self):
        w = np.array([0.0, 0.0, 0.0])
        theta = np.array([1.0, 0.0, 0.0])
        ds = orthonormal_design(w)
        cfg = LocalConfig(alpha=0.5, local_steps=1, batch_size=3)
        est = meta_grad_estimate(theta, ds, cfg, np.random.default_rng(0))
        assert np.allclose(est, 0.25 * theta, atol=1e-12)

    def test_alpha_zero_is_plain_minibatch_gradient(self, rng):
        w = rng.standard_normal(3)
        ds = orthonormal_design(w)
        theta = rng.standard_normal(3)
        cfg = LocalConfig(alpha=0.0, local_steps=1, batch_size=3)
        est = meta_grad_estimate(theta, ds, cfg, np.random.default_rng(0))
        # full-pool batch: the estimate is the batch gradient at theta itself
        assert np.allclose(est, theta - w, atol=1e-12)

    def test_first_order_drops_curvature_factor(self):
        w = np.zeros(3)
        theta = np.array([1.0, 0.0, 0.0])
        ds = orthonormal_design(w)
        cfg = LocalConfig(alpha=0.5, local_steps=1, batch_size=3, first_order=True)
        est = meta_grad_estimate(theta, ds, cfg, np.random.default_rng(0))
        assert np.allclose(est, 0.5 * theta, atol=1e-12)  # no (1 - alpha) factor

    def test_conditional_mean_matches_exact_oracle(self, rng):
        """Mean of the estimator over batch draws from a frozen dataset equals
        the product of per-pool conditional expectations (quadratic family)."""
        d, m_b = 3, 4
        env = TaskEnvironment(family="quadratic", dim=d, center=np.zeros(d),
                              task_spread=0.5, label_noise_var=0.5)
        dev = sample_device(env, rng)
        ds = sample_dataset(dev, 24, 8, 16, rng)
        theta = rng.standard_normal(d)
        alpha = 0.3
        cfg = LocalConfig(alpha=alpha, local_steps=1, batch_size=m_b)
        pool_b, pool_g, pool_h = meta.batch_pools(ds, m_b)

        def pool_grad(phi, pool):
            return tasks.batch_grad(phi, ds.x[pool], ds.y[pool])

        h_mean = tasks.batch_hessian(theta, ds.x[pool_h], ds.y[pool_h])
        s_g = tasks.batch_hessian(theta, ds.x[pool_g], ds.y[pool_g])  # phi-independent
        # E over B of the adapted point, then the (linear) outer gradient
        phi_mean = theta - alpha * pool_grad(theta, pool_b)
        g_outer_mean = pool_grad(phi_mean, pool_g)
        expected = (np.eye(d) - alpha * h_mean) @ g_outer_mean
        n = 20_000
        draws = np.stack([meta_grad_estimate(theta, ds, cfg, rng) for _ in range(n)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - expected) <= 3 * se + 1e-12)
        assert s_g.shape == (d, d)

    def test_fresh_data_mean_matches_population_and_bias_bound(self):
        """Over fresh datasets the estimator mean lands on the population
        meta-gradient (quadratic losses make it unbiased), within the stated
        squared-bias allowance 4 a^2 L^2 sigma_G^2 / m_B."""
        d, m_b, alpha = 3, 8, 0.3
        env = TaskEnvironment(family="quadratic", dim=d, center=np.zeros(d),
                              task_spread=0.0, label_noise_var=0.4)
        gen = np.random.default_rng(17)
        dev = sample_device(env, gen)
        theta = np.array([1.0, -0.5, 0.25])
        cfg = LocalConfig(alpha=alpha, local_steps=1, batch_size=m_b)
        n = 10_000
        draws = np.empty((n, d))
        for i in range(n):
            ds = sample_dataset(dev, 3 * m_b, m_b, 2 * m_b, gen)
            draws[i] = meta_grad_estimate(theta, ds, cfg, gen)
        target = tasks.population_meta_grad(theta, dev, alpha)
        se = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - target) <= 3 * se)
        sigma_g_sq = tasks.grad_variance(theta - dev.w, env)
        bias_sq_allow = 4 * alpha**2 * env.smoothness**2 * sigma_g_sq / m_b
        assert float(np.sum((draws.mean(axis=0) - target) ** 2)) <= bias_sq_allow

    def test_second_moment_within_stated_bound(self):
        """Measured E||estimate||^2 stays below
        2 ((1 + a L)^2 + a^2 sigma_H^2 / m_B) G^2 with measured constants."""
        d, m_b, alpha = 4, 8, 0.2
        env = TaskEnvironment(family="quadratic", dim=d, center=np.zeros(d),
                              task_spread=0.0, label_noise_var=0.5)
        gen = np.random.default_rng(23)
        dev = sample_device(env, gen)
        theta = np.array([0.8, -0.3, 0.1, 0.5])
        cfg = LocalConfig(alpha=alpha, local_steps=1, batch_size=m_b)
        draws = []
        for _ in range(1000):
            ds = sample_dataset(dev, 3 * m_b, m_b, 2 * m_b, gen)
            draws.append(float(np.sum(meta_grad_estimate(theta, ds, cfg, gen) ** 2)))
        g_sq = max(tasks.grad_second_moment(theta - dev.w, env),
                   tasks.grad_second_moment((np.eye(d) - alpha * env.input_cov)
                                            @ (theta - dev.w), env))
        sigma_h_sq, _ = tasks.hessian_spectral_variance(env)
        limit = 2 * ((1 + alpha * env.smoothness) ** 2 + alpha**2 * sigma_h_sq / m_b) * g_sq
        assert float(np.mean(draws)) <= limit


class TestLocalRounds:
    def test_single_step_delta(self, rng):
        w = rng.standard_normal(3)
        ds = orthonormal_design(w)
        theta = rng.standard_normal(3)
        cfg = LocalConfig(alpha=0.5, local_steps=1, batch_size=3)
        eta = 0.1
        _, delta = local_rounds(theta, ds, cfg, eta, np.random.default_rng(0))
        est = meta_grad_estimate(theta, ds, cfg, np.random.default_rng(0))
        assert np.allclose(delta, eta * est, atol=1e-14)

    def test_zero_rate_no_movement(self, rng):
        w = rng.standard_normal(3)
        ds = orthonormal_design(w)
        theta = rng.standard_normal(3)
        cfg = LocalConfig(alpha=0.5, local_steps=4, batch_size=3)
        end, delta = local_rounds(theta, ds, cfg, 0.0, np.random.default_rng(0))
        assert np.array_equal(end, theta)
        assert np.all(delta == 0)

    def test_external_step_replay(self, quad_device, rng):
        ds = sample_dataset(quad_device, 30, 10, 20, rng)
        theta0 = rng.standard_normal(quad_device.env.dim)
        cfg = LocalConfig(alpha=0.2, local_steps=3, batch_size=5)
        eta = 0.05
        _, delta = local_rounds(theta0, ds, cfg, eta, np.random.default_rng(99))
        gen = np.random.default_rng(99)
        theta = theta0.copy()
        for _ in range(3):
            theta = theta - eta * meta_grad_estimate(theta, ds, cfg, gen)
        assert np.array_equal(delta, theta0 - theta)

    def test_determinism(self, quad_device, rng):
        ds = sample_dataset(quad_device, 30, 10, 20, rng)
        theta = rng.standard_normal(quad_device.env.dim)
        cfg = LocalConfig(alpha=0.2, local_steps=3, batch_size=5)
        d1 = local_rounds(theta, ds, cfg, 0.05, np.random.default_rng(7))[1]
        d2 = local_rounds(theta, ds, cfg, 0.05, np.random.default_rng(7))[1]
        assert np.array_equal(d1, d2)

    def test_drift_within_stated_bound(self):
        from airmeta.verify import check_local_drift

        res = check_local_drift(seed=0, n_draws=200)
        assert res.passed, res.detail


class TestIdealAggregate:
    def test_zero_deltas_identity(self, rng):
        theta = rng.standard_normal(4)
        out = ideal_aggregate(theta, [np.zeros(4)] * 3)
        assert np.array_equal(out, theta)

    def test_single_device(self, rng):
        theta = rng.standard_normal(4)
        v = rng.standard_normal(4)
        assert np.allclose(ideal_aggregate(theta, [v]), theta - v, atol=1e-15)

    def test_matches_hand_sum(self, rng):
        theta = rng.standard_normal(4)
        deltas = [rng.standard_normal(4) for _ in range(3)]
        expected = theta - (deltas[0] + deltas[1] + deltas[2]) / 3
        assert np.allclose(ideal_aggregate(theta, deltas), expected, atol=1e-14)

    def test_empty_rejected(self, rng):
        with pytest.raises(ValueError):
            ideal_aggregate(rng.standard_normal(3), [])
