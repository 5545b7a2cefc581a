"""Empirical performance metrics: convergence error, meta losses, and the
meta-generalization gap."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng, tasks
from .tasks import Dataset, TaskEnvironment


def stationary_convergence_error(traj) -> float:
    """Average squared meta-gradient norm over the recorded rounds."""
    vals = traj.series("grad_norm_sq")
    if vals.size == 0:
        return float("nan")
    return float(np.mean(vals))


def meta_training_loss(theta, datasets, alpha: float, family: str = "quadratic") -> float:
    """Empirical meta objective: validation loss after one adaptation step
    on the full training split, averaged over devices."""
    theta = np.asarray(theta, dtype=float)
    vals = []
    for ds in datasets:
        x_tr, y_tr = ds.train
        if x_tr.shape[0] == 0 or ds.m_va == 0:
            raise ValueError("meta training loss needs non-empty splits")
        phi = theta - alpha * tasks.batch_grad(theta, x_tr, y_tr, family)
        x_va, y_va = ds.val
        vals.append(tasks.batch_loss(phi, x_va, y_va, family))
    return float(np.mean(vals))


def per_task_training_loss(theta, dataset: Dataset, alpha: float,
                           family: str = "quadratic") -> float:
    """Single-device term of the meta objective (used for loss clipping)."""
    x_tr, y_tr = dataset.train
    phi = theta - alpha * tasks.batch_grad(theta, x_tr, y_tr, family)
    x_va, y_va = dataset.val
    return tasks.batch_loss(phi, x_va, y_va, family)


def meta_test_loss(theta, env: TaskEnvironment, alpha: float, n_test: int, m: int,
                   m_tr: int, gen: np.random.Generator,
                   eval_points: int = 256) -> float:
    """Monte Carlo meta-test loss on fresh devices.

    Each fresh device adapts from theta on m_tr newly drawn samples.  For the
    quadratic family the innermost expectation over evaluation points is
    taken in closed form (an exact, lower-variance version of held-out
    evaluation); otherwise ``eval_points`` held-out samples are drawn.
    """
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    if m_tr < 1 or m_tr > m:
        raise ValueError("need 1 <= m_tr <= m")
    theta = np.asarray(theta, dtype=float)
    vals = []
    for _ in range(n_test):
        dev = tasks.sample_device(env, gen)
        x = gen.standard_normal((m_tr, env.dim)) @ env.cov_sqrt.T
        if env.family == "quadratic":
            y = x @ dev.w + np.sqrt(env.label_noise_var) * gen.standard_normal(m_tr)
        else:
            y = (gen.random(m_tr) < 0.5 * (1 + np.tanh(0.5 * (x @ dev.w)))).astype(float)
        phi = theta - alpha * tasks.batch_grad(theta, x, y, env.family)
        if env.family == "quadratic":
            vals.append(tasks.population_loss(phi, dev))
        else:
            xe = gen.standard_normal((eval_points, env.dim)) @ env.cov_sqrt.T
            ye = (gen.random(eval_points) < 0.5 * (1 + np.tanh(0.5 * (xe @ dev.w)))).astype(float)
            vals.append(tasks.batch_loss(phi, xe, ye, env.family))
    return float(np.mean(vals))


@dataclass(frozen=True)
class GapEstimate:
    """Meta-generalization error estimate with its standard error."""

    value: float
    stderr: float
    n_trials: int
    flagged: bool = False  # True when too few trials for an error bar

    @property
    def abs_value(self) -> float:
        return abs(self.value)


def meta_generalization_error(trial_gaps) -> GapEstimate:
    """Mean over trials of (meta-test loss - meta-training loss).

    ``trial_gaps`` holds one (test_loss, train_loss) pair per independent
    trial.  Fewer than two trials yields a flagged estimate without an error
    bar.
    """
    gaps = np.array([float(te) - float(tr) for te, tr in trial_gaps], dtype=float)
    if gaps.size == 0:
        raise ValueError("need at least one trial")
    if gaps.size == 1:
        return GapEstimate(value=float(gaps[0]), stderr=float("nan"), n_trials=1, flagged=True)
    return GapEstimate(
        value=float(gaps.mean()),
        stderr=float(gaps.std(ddof=1) / np.sqrt(gaps.size)),
        n_trials=int(gaps.size),
    )


def trial_gap(traj, gen: np.random.Generator | None = None) -> tuple[float, float]:
    """(meta-test loss, meta-training loss) of one finished run."""
    cfg = traj.config
    env = cfg.env()
    alpha = traj.metric_alpha
    train = meta_training_loss(traj.theta_final, traj.datasets, alpha, cfg.family)
    if gen is None:
        gen = rng.substream(cfg.master_seed, rng.EVALUATION)
    m = cfg.test_samples or cfg.samples_per_device
    m_tr = min(cfg.train_samples, m)
    test = meta_test_loss(traj.theta_final, env, alpha, cfg.n_test_devices, m, m_tr, gen)
    return test, train


def measured_snr_db(traj, power: float) -> float:
    """Received SNR recovered from the realized fading draws.

    Averages the per-round sum of |h|^2 scaled by the power budget against
    the configured noise variance; validates the channel moments rather than
    the instantaneous transmit occupancy.
    """
    cfg = traj.config
    noise_var = cfg.effective_noise_var()
    if noise_var <= 0:
        return float("inf")
    mean_sum = float(np.mean(traj.series("sum_abs_h_sq")))
    return 10.0 * np.log10(power * mean_sum / noise_var)
