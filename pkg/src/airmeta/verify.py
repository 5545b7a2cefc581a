"""Invariant verification suite behind ``airmeta verify``.

Each check is a pure function returning a VerifyResult, so tests can reuse
them and negative controls can corrupt inputs to prove a check can fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import channel, meta, metrics, report, sparsify, tasks
from .protocol import (ExperimentConfig, constant_rate_limit, lr_schedule,
                       memory_identity_residuals, run_experiment)


@dataclass(frozen=True)
class VerifyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _result(name, passed, detail, t0):
    return VerifyResult(name=name, passed=bool(passed), detail=detail,
                        seconds=time.perf_counter() - t0)


def check_contraction(seed: int = 0, n_vectors: int = 1000, dim: int = 20) -> VerifyResult:
    """Dropping all but k entries loses at most a (1 - k/d) energy fraction:
    surely for top-k, on the mean for random-k (99% CI)."""
    t0 = time.perf_counter()
    gen = np.random.default_rng(seed)
    ks = sorted({1, dim // 4, dim // 2, dim})
    worst = -np.inf
    randk_ok = True
    detail = []
    for k in ks:
        ratios_rand = np.empty(n_vectors)
        worst_k = -np.inf
        for i in range(n_vectors):
            x = gen.standard_normal(dim) * gen.choice([0.1, 1.0, 10.0])
            nx = float(x @ x)
            top = sparsify.comp_k(x, k, "topk")
            resid = x - top
            worst_k = max(worst_k, float(resid @ resid) / nx - (1 - k / dim))
            rnd = sparsify.comp_k(x, k, "randk", gen)
            ratios_rand[i] = float((x - rnd) @ (x - rnd)) / nx
        worst = max(worst, worst_k)
        mean = ratios_rand.mean()
        half = 2.576 * ratios_rand.std(ddof=1) / np.sqrt(n_vectors)
        if mean - half > 1 - k / dim:
            randk_ok = False
        detail.append(f"k={k}: topk margin {-worst_k:.2e}, randk mean {mean:.4f} "
                      f"vs {1 - k / dim:.4f} (+-{half:.4f})")
    passed = worst <= 1e-12 and randk_ok
    return _result("contraction", passed, "; ".join(detail), t0)


def check_rayleigh_moments(seed: int = 0, n_draws: int = 10**6) -> VerifyResult:
    """Realized |h| moments match E|h| = sqrt(pi)/2 and E|h|^2 = 1 within 1%."""
    t0 = time.perf_counter()
    gen = np.random.default_rng(seed)
    h = (gen.standard_normal(n_draws) + 1j * gen.standard_normal(n_draws)) / np.sqrt(2)
    a = np.abs(h)
    m1, m2 = float(a.mean()), float((a**2).mean())
    e1, e2 = channel.RAYLEIGH_ABS_MEAN, channel.RAYLEIGH_ABS_POWER
    passed = abs(m1 - e1) / e1 < 0.01 and abs(m2 - e2) / e2 < 0.01
    return _result("rayleigh_moments", passed,
                   f"E|h|={m1:.5f} (target {e1:.5f}), E|h|^2={m2:.5f} (target {e2:.5f})", t0)


def check_power_constraint(seed: int = 0, rounds: int = 200) -> VerifyResult:
    """Every transmitted block respects (1/M)||x||^2 <= P + 1e-12."""
    t0 = time.perf_counter()
    cfg = default_convergence_config(master_seed=seed, rounds=rounds)
    traj = run_experiment(cfg)
    margin = float(np.max(traj.series("power_margin")))
    return _result("power_constraint", margin <= 1e-12,
                   f"max margin {margin:.3e} over {rounds} rounds", t0)


def check_unbiased_aggregation(seed: int = 0, n_draws: int = 10**4) -> VerifyResult:
    """With fixed updates, the mean effective update over fading and noise
    matches the plain average of the updates (3 standard errors, per
    component).  Uses the matched estimator so the reconstruction error is
    zero-mean by construction."""
    t0 = time.perf_counter()
    gen = np.random.default_rng(seed)
    d, n_active, eta, power = 20, 3, 0.05, 1.0
    gs = [sparsify.comp_k(gen.standard_normal(d), 5, "topk") for _ in range(n_active)]
    policy = sparsify.PowerPolicy(power=power, channel_uses=d)
    rho = sparsify.power_scale(gs, eta, policy)
    comp = channel.make_compression("partial_dft", d, d, gen)
    mu, pw = channel.fading_moments("rayleigh")
    noise_var = channel.snr_noise_var(10.0, n_active, power, pw)
    target = np.mean(gs, axis=0)
    samples = np.empty((n_draws, d))
    theta = np.zeros(d)
    for it in range(n_draws):
        ch_round = channel.sample_channel(n_active, "rayleigh", noise_var, d, gen)
        signals = [comp.matrix @ sparsify.phase_precompensate(g, rho, eta, h)
                   for g, h in zip(gs, ch_round.gains)]
        y = channel.transmit_mac(signals, ch_round)
        est = channel.estimate(y, comp, 0.0, noise_var, "matched")
        theta_next = channel.global_update(theta, est, eta, rho, mu, n_active)
        samples[it] = theta - theta_next  # effective update
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_draws)
    z = np.abs(mean - target) / se
    passed = bool(np.all(z <= 3.0))
    return _result("aggregation_unbiased", passed,
                   f"max |z| = {float(z.max()):.2f} over {d} components", t0)


def check_memory_identity(seed: int = 0, rounds: int = 100,
                          traj=None) -> VerifyResult:
    """Gap between the iterate and the noise-free virtual iterate equals the
    averaged error-feedback memories at every round (1e-8)."""
    t0 = time.perf_counter()
    if traj is None:
        cfg = default_convergence_config(master_seed=seed, rounds=rounds,
                                         active_fraction=1.0)
        traj = run_experiment(cfg)
    resid = memory_identity_residuals(traj)
    worst = float(resid.max()) if resid.size else 0.0
    return _result("memory_identity", worst <= 1e-8,
                   f"max residual {worst:.3e} over {resid.size} rounds", t0)


def check_memory_bound(seed: int = 0, rounds: int = 200) -> VerifyResult:
    """Running max of the memory energy stays below its geometric-series
    bound evaluated with measured constants."""
    t0 = time.perf_counter()
    cfg = default_convergence_config(master_seed=seed, rounds=rounds)
    traj = run_experiment(cfg)
    ac, dc = report.run_constants(traj)
    eta0, alpha0 = lr_schedule(cfg, 0)
    limit = (2.0 * eta0**2 * dc.gain * cfg.local_steps**2
             * ((1 + alpha0 * ac.l_g) ** 2 + alpha0**2 * ac.sigma_h_sq / cfg.batch_size)
             * ac.g_sq)
    measured = float(np.max(traj.series("mem_norm_sq_max")))
    return _result("memory_bound", measured <= limit,
                   f"max ||m||^2 = {measured:.3e}, bound {limit:.3e}", t0)


def check_local_drift(seed: int = 0, n_draws: int = 300) -> VerifyResult:
    """Measured drift of local iterates from the shared iterate stays below
    40 Q^2 eta^2 ((sigma_F^2 + gamma_F^2) + ||grad F||^2) with measured
    constants."""
    t0 = time.perf_counter()
    gen = np.random.default_rng(seed)
    env = tasks.TaskEnvironment(family="quadratic", dim=20,
                                center=np.ones(20), task_spread=0.5,
                                input_cov=1.0, label_noise_var=1.0)
    devices = [tasks.sample_device(env, gen) for _ in range(4)]
    datasets = [tasks.sample_dataset(d, 200, 100, 100, gen) for d in devices]
    q, m_b, alpha = 5, 16, 0.4
    l_f = 4.0 * env.smoothness
    eta = 0.9 / (10 * q * l_f)
    theta = 0.3 * np.ones(20)
    cfg_local = meta.LocalConfig(alpha=alpha, local_steps=q, batch_size=m_b)
    # measured variance / heterogeneity of the meta-gradient estimate at theta
    grad_mean = tasks.mean_meta_grad(theta, devices, alpha)
    sigma_sq = 0.0
    gamma_sq = 0.0
    for dev, ds in zip(devices, datasets):
        per_dev = tasks.population_meta_grad(theta, dev, alpha)
        gamma_sq = max(gamma_sq, float(np.sum((per_dev - grad_mean) ** 2)))
        ests = np.stack([meta.meta_grad_estimate(theta, ds, cfg_local, gen)
                         for _ in range(n_draws)])
        sigma_sq = max(sigma_sq, float(np.mean(np.sum((ests - per_dev) ** 2, axis=1))))
    drift_sq = []
    for dev, ds in zip(devices, datasets):
        for _ in range(n_draws // 10):
            _, _, iterates = meta.local_rounds(theta, ds, cfg_local, eta, gen, trace=True)
            drift_sq.append(max(float(np.sum((it - theta) ** 2)) for it in iterates))
    measured = float(np.mean(drift_sq))
    limit = 40 * q**2 * eta**2 * (sigma_sq + gamma_sq + float(grad_mean @ grad_mean))
    return _result("local_drift", measured <= limit,
                   f"mean max drift {measured:.3e}, bound {limit:.3e}", t0)


def check_bound_validity(seed: int = 0, n_seeds: int = 3, rounds: int = 200) -> VerifyResult:
    """Measured average squared meta-gradient stays below the constant-rate
    bound on seeded runs that satisfy the validity condition."""
    t0 = time.perf_counter()
    fails = []
    for s in range(n_seeds):
        cfg = default_convergence_config(master_seed=seed + s, rounds=rounds)
        traj = run_experiment(cfg)
        lhs = metrics.stationary_convergence_error(traj)
        rhs = report.constant_bound_report(traj).total
        if not lhs <= rhs:
            fails.append((s, lhs, rhs))
    return _result("bound_validity", not fails,
                   f"{n_seeds - len(fails)}/{n_seeds} runs below the bound", t0)


def default_convergence_config(**overrides) -> ExperimentConfig:
    """Desk-scale convergence setup; outer rate sits at 90% of the validity
    limit for the quadratic family."""
    q = overrides.pop("local_steps", 5)
    base = ExperimentConfig(local_steps=q, active_fraction=1.0 / 3.0, n_devices=9)
    l_f = 4.0 * base.env().smoothness
    cfg = base.replace(eta=0.9 * constant_rate_limit(q, l_f), **overrides)
    return cfg


ALL_CHECKS = [
    check_contraction,
    check_rayleigh_moments,
    check_power_constraint,
    check_unbiased_aggregation,
    check_memory_identity,
    check_memory_bound,
    check_local_drift,
    check_bound_validity,
]


def run_all(seed: int = 0) -> list[VerifyResult]:
    return [chk(seed=seed) for chk in ALL_CHECKS]
