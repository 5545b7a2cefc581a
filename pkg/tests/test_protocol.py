import copy

import numpy as np
import pytest

from airmeta import rng as streams
from airmeta.meta import LocalConfig, local_rounds
from airmeta.protocol import (ExperimentConfig, constant_rate_limit, lr_schedule,
                              meets_constant_rate, memory_identity_residuals,
                              replay_experiment, run_experiment, sample_active_set)


def small_air_config(**overrides):
    base = dict(rounds=40, n_devices=4, active_fraction=1.0, dim=10,
                local_steps=2, batch_size=8, samples_per_device=60,
                train_samples=30, eta=0.01, alpha=0.3, sparsify_k=2,
                channel_uses=4, snr_db=10.0, master_seed=5)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestActiveSet:
    def test_full_participation(self, rng):
        assert np.array_equal(sample_active_set(6, 1.0, rng), np.arange(6))

    def test_exact_cardinality(self, rng):
        for _ in range(50):
            ids = sample_active_set(9, 1 / 3, rng)
            assert ids.size == 3 and np.unique(ids).size == 3

    def test_uniform_inclusion(self):
        gen = np.random.default_rng(0)
        n, r, draws = 8, 0.5, 100_000
        counts = np.zeros(n)
        for _ in range(draws):
            counts[sample_active_set(n, r, gen)] += 1
        freq = counts / draws
        se = np.sqrt(r * (1 - r) / draws)
        assert np.all(np.abs(freq - r) < 3 * se)

    def test_non_integer_rejected(self, rng):
        with pytest.raises(ValueError):
            sample_active_set(9, 0.3, rng)


class TestSchedules:
    def test_constant(self):
        cfg = ExperimentConfig(lr_schedule="constant", eta=0.01, alpha=0.3)
        assert lr_schedule(cfg, 0) == (0.01, 0.3)
        assert lr_schedule(cfg, 100) == (0.01, 0.3)

    def test_adaptive_start_and_decay(self):
        cfg = ExperimentConfig(lr_schedule="adaptive", eta_scale=0.5, eta_offset=10.0,
                               alpha_scale=2.0, alpha_offset=8.0)
        eta0, _ = lr_schedule(cfg, 0)
        assert eta0 == pytest.approx(0.05)
        etas = [lr_schedule(cfg, t)[0] for t in range(50)]
        assert all(a > b for a, b in zip(etas, etas[1:]))

    def test_adaptive_inner_rate_capped_at_inverse_smoothness(self):
        cfg = ExperimentConfig(lr_schedule="adaptive", alpha_scale=100.0, alpha_offset=2.0,
                               input_cov_scale=2.0)
        _, alpha0 = lr_schedule(cfg, 0)
        assert alpha0 == pytest.approx(0.5)  # 1 / L_G

    def test_rate_sum_lower_bound(self):
        xi, a, big_t = 0.7, 5.0, 1000
        cfg = ExperimentConfig(lr_schedule="adaptive", eta_scale=xi, eta_offset=a)
        total = sum(lr_schedule(cfg, t)[0] for t in range(big_t))
        assert total >= xi * np.log((big_t + a - 1) / a)

    def test_validity_limit_is_tight(self):
        q, l_f = 5, 4.0
        limit = constant_rate_limit(q, l_f)
        assert meets_constant_rate(limit * 0.999, q, l_f)
        assert not meets_constant_rate(limit * 1.01, q, l_f)


class TestRunExperiment:
    def test_zero_rounds(self):
        traj = run_experiment(small_air_config(rounds=0))
        assert len(traj.records) == 0
        assert np.array_equal(traj.thetas[0], traj.theta_final)

    def test_determinism(self):
        t1 = run_experiment(small_air_config())
        t2 = run_experiment(small_air_config())
        assert np.array_equal(t1.thetas, t2.thetas)
        assert t1.series("rho").tolist() == t2.series("rho").tolist()

    def test_replay_bit_identical(self):
        cfg = small_air_config(active_fraction=0.5)
        t1 = run_experiment(cfg)
        t2 = replay_experiment(cfg, t1.replay)
        assert np.array_equal(t1.thetas, t2.thetas)

    def test_degenerate_chain_equals_ideal(self):
        base = dict(rounds=30, n_devices=4, active_fraction=1.0, dim=10,
                    local_steps=3, batch_size=8, samples_per_device=60,
                    train_samples=30, eta=0.005, alpha=0.3, sparsify_k=10,
                    channel_uses=10, compression="partial_dft", estimator="matched",
                    fading="unit", noise_var=0.0, snr_db=None, master_seed=2)
        air = run_experiment(ExperimentConfig(**base))
        ideal = run_experiment(ExperimentConfig(**{**base, "channel_mode": "ideal"}))
        denom = np.maximum(np.linalg.norm(ideal.thetas, axis=1), 1e-30)
        rel = np.linalg.norm(air.thetas - ideal.thetas, axis=1) / denom
        assert rel.max() < 1e-10

    def test_zero_rate_keeps_iterate_and_memories(self):
        traj = run_experiment(small_air_config(eta=0.0, rounds=5))
        assert np.array_equal(traj.thetas[0], traj.thetas[-1])
        assert np.all(traj.memories == 0)

    def test_divergence_aborts_with_round_index(self):
        traj = run_experiment(small_air_config(eta=50.0, rounds=300))
        assert traj.aborted_at is not None
        assert traj.records[-1].t == traj.aborted_at

    def test_power_constraint_every_round(self):
        traj = run_experiment(small_air_config(rounds=60))
        assert np.max(traj.series("power_margin")) <= 1e-12

    def test_memory_not_exploding(self):
        traj = run_experiment(small_air_config(rounds=120))
        mem = traj.series("mem_norm_sq_max")
        assert np.max(mem) <= 1e6 * (mem[9] + 1e-9)

    def test_inactive_memories_frozen(self):
        cfg = small_air_config(active_fraction=0.25, rounds=6)
        traj = run_experiment(cfg)
        # devices never selected must keep their zero initial memory
        never_active = set(range(cfg.n_devices)) - {
            int(i) for entry in traj.replay for i in entry["active"]}
        assert never_active, "fixture needs at least one never-active device"
        for i in never_active:
            assert np.all(traj.memories[i] == 0)

    def test_logistic_run_completes(self):
        cfg = small_air_config(family="logistic", rounds=10)
        traj = run_experiment(cfg)
        assert len(traj.records) == 10
        assert np.isfinite(traj.series("train_loss")).all()
        assert np.isnan(traj.series("grad_norm_sq")).all()  # no closed-form oracle

    def test_unknown_config_field_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"bogus_field": 1})

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ValueError):
            small_air_config(active_fraction=0.3, n_devices=9).validate()

    def test_rate_warning_surfaced(self):
        warnings = small_air_config(eta=0.4, local_steps=5).validate()
        assert any("validity" in w for w in warnings)

    def test_convergence_smoke_at_rate_limit(self):
        """Ideal chain at the largest valid constant rate: the gradient-norm
        reduction at t=200 matches the linear-dynamics prediction.

        The supremum of the reduction over all valid rates is about 9.9x at
        t=200 (a 10x target is unattainable by ~1% even in the deterministic
        limit), so the assertion pins >= 9x plus agreement with the
        closed-form factor.
        """
        q, alpha = 1, 0.01
        eta = 0.999 * constant_rate_limit(q, 4.0)
        cfg = ExperimentConfig(rounds=200, n_devices=4, active_fraction=1.0,
                               dim=20, local_steps=q, batch_size=64,
                               samples_per_device=400, train_samples=200,
                               eta=eta, alpha=alpha, task_spread=0.0,
                               label_noise_var=0.0, channel_mode="ideal",
                               master_seed=3)
        assert cfg.validate() == []
        traj = run_experiment(cfg)
        from airmeta import tasks

        devs = [tasks.DeviceDistribution(w=traj.device_ws[i], env=cfg.env())
                for i in range(cfg.n_devices)]

        def gsq(theta):
            v = tasks.mean_meta_grad(theta, devs, traj.metric_alpha)
            return float(v @ v)

        ratio = gsq(traj.thetas[200]) / gsq(traj.thetas[0])
        predicted = (1 - eta * (1 - alpha) ** 2) ** (2 * q * 200)
        assert ratio <= 1 / 9
        assert abs(np.log(ratio) - np.log(predicted)) <= 0.3


class TestMemoryIdentity:
    def test_identity_holds_on_noisy_run(self):
        cfg = small_air_config(rounds=100, snr_db=5.0)
        traj = run_experiment(cfg)
        resid = memory_identity_residuals(traj)
        assert resid.size == 100
        assert resid.max() <= 1e-8

    def test_corrupted_memories_fail_the_check(self):
        cfg = small_air_config(rounds=30)
        traj = run_experiment(cfg)
        bad = copy.deepcopy(traj)
        bad.recon[10]["mem_sum"] = bad.recon[10]["mem_sum"] + 0.05
        resid = memory_identity_residuals(bad)
        assert resid.max() > 1e-4

    def test_identity_with_partial_participation(self):
        cfg = small_air_config(rounds=60, active_fraction=0.5, snr_db=5.0)
        traj = run_experiment(cfg)
        assert memory_identity_residuals(traj).max() <= 1e-8


class TestSchedulingInvariance:
    def test_device_results_independent_of_order(self):
        """Per-device streams are keyed by (seed, round, device), so the
        execution order cannot change any device's local result."""
        cfg = small_air_config()
        traj = run_experiment(cfg)
        local_cfg = LocalConfig(alpha=cfg.alpha, local_steps=cfg.local_steps,
                                batch_size=cfg.batch_size)
        theta0 = traj.thetas[0]
        order_a, order_b = [0, 1, 2, 3], [3, 1, 0, 2]
        deltas_a, deltas_b = {}, {}
        for order, out in ((order_a, deltas_a), (order_b, deltas_b)):
            for i in order:
                gen = streams.substream(cfg.master_seed, streams.LOCAL_BATCH, 0, i)
                out[i] = local_rounds(theta0, traj.datasets[i], local_cfg, cfg.eta, gen)[1]
        for i in range(4):
            assert np.array_equal(deltas_a[i], deltas_b[i])
