"""Full round loop: local updates, sparsify/scale/compress/transmit/estimate.

A run is reproducible from (config, master_seed): every stochastic component
draws from a child stream keyed by purpose, round, and device, so device
work can be scheduled in any order without changing the result.  Realized
channel draws are recorded per round; a replay consumes them instead of
sampling and must reproduce the trajectory bit for bit.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from . import meta, rng, sparsify, tasks

SCHEDULES = ("constant", "adaptive")
CHANNEL_MODES = ("air", "ideal")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Physical quantities carry units in the field name (snr_db, noise_var,
    power_per_use).  Exactly one of snr_db / noise_var determines the channel
    noise; noise_var wins when both are set.
    """

    # task family and population
    family: str = "quadratic"
    dim: int = 20
    center: float = 1.0              # mean task vector = center * ones(dim)
    task_spread: float = 0.5         # variance of task vectors (heterogeneity)
    input_cov_scale: float = 1.0     # inputs ~ N(0, scale * I)
    label_noise_var: float = 1.0
    # local data
    n_devices: int = 9
    samples_per_device: int = 150    # m
    train_samples: int = 75          # m_tr (validation gets the rest)
    # federated loop
    active_fraction: float = 1.0     # r; r * n_devices must be an integer
    rounds: int = 200                # T
    local_steps: int = 5             # Q
    batch_size: int = 16             # m_B
    first_order: bool = False
    # learning rates
    lr_schedule: str = "constant"
    eta: float = 0.001
    alpha: float = 0.4
    eta_scale: float = 0.1           # adaptive outer rate xi / (a + t)
    eta_offset: float = 100.0
    alpha_scale: float = 40.0        # adaptive inner rate xi' / (a' + t)
    alpha_offset: float = 100.0
    # uplink
    channel_mode: str = "air"        # "air" or the noiseless "ideal" reference
    sparsify_k: int = 1
    comp_mode: str = "topk"
    channel_uses: int = 8            # M
    compression: str = "partial_dft"
    estimator: str = "lmmse"
    fading: str = "rayleigh"
    power_per_use: float = 1.0
    snr_db: float | None = 19.0
    noise_var: float | None = None
    rho_max: float = 1e12
    # initialization, evaluation, bookkeeping
    theta_init: float = 0.0          # theta^(0) = theta_init * ones(dim)
    master_seed: int = 0
    trials: int = 1
    loss_clip: float = 4.0           # clip bound b; sub-Gaussian proxy b^2/4
    n_test_devices: int = 48
    test_samples: int = 0            # fresh-device dataset size; 0 -> samples_per_device
    record_reconstruction: bool = True
    track_train_loss: bool = True

    # -- derived helpers ----------------------------------------------------

    @property
    def val_samples(self) -> int:
        return self.samples_per_device - self.train_samples

    @property
    def n_active(self) -> int:
        return int(round(self.active_fraction * self.n_devices))

    def env(self) -> tasks.TaskEnvironment:
        return tasks.TaskEnvironment(
            family=self.family,
            dim=self.dim,
            center=self.center * np.ones(self.dim),
            task_spread=self.task_spread,
            input_cov=self.input_cov_scale,
            label_noise_var=self.label_noise_var,
        )

    def effective_noise_var(self) -> float:
        if self.noise_var is not None:
            return float(self.noise_var)
        if self.snr_db is None:
            raise ValueError("one of noise_var / snr_db must be set")
        _, abs_power = ch.fading_moments(self.fading)
        return ch.snr_noise_var(self.snr_db, self.n_active, self.power_per_use, abs_power)

    def validate(self) -> list[str]:
        """Raise on hard contract violations; return soft warnings."""
        k_active = self.active_fraction * self.n_devices
        if abs(k_active - round(k_active)) > 1e-9 or round(k_active) < 1:
            raise ValueError(
                f"active_fraction * n_devices must be a positive integer, got {k_active}"
            )
        if not 1 <= self.sparsify_k <= self.dim:
            raise ValueError("sparsify_k must be in [1, dim]")
        if not 1 <= self.channel_uses <= self.dim:
            raise ValueError("channel_uses must be in [1, dim]")
        if self.compression == "identity" and self.channel_uses != self.dim:
            raise ValueError("identity compression requires channel_uses == dim")
        if self.estimator == "matched" and self.channel_uses != self.dim:
            raise ValueError("matched estimator requires channel_uses == dim")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ValueError("both data splits need at least one sample")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(f"unknown channel_mode {self.channel_mode!r}")
        if self.lr_schedule == "adaptive" and (self.eta_offset <= 1 or self.alpha_offset <= 1):
            raise ValueError("adaptive schedule offsets must exceed 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        # batch pools must be drawable
        meta.batch_pools(
            tasks.Dataset(
                x=np.zeros((self.samples_per_device, self.dim)),
                y=np.zeros(self.samples_per_device),
                m_tr=self.train_samples,
                m_va=self.val_samples,
            ),
            self.batch_size,
        )
        self.effective_noise_var()

        warnings = []
        if self.family == "quadratic":
            l_g = self.env().smoothness
            eta0, alpha0 = lr_schedule(self, 0)
            if alpha0 > 1 / l_g + 1e-12:
                warnings.append(
                    f"inner rate {alpha0} exceeds 1/L_G = {1 / l_g:.6g}; the smoothness "
                    "precondition of the convergence analysis does not hold"
                )
            l_f = 4.0 * l_g  # quadratic family has a constant Hessian
            if not meets_constant_rate(eta0, self.local_steps, l_f):
                warnings.append(
                    f"outer rate {eta0} violates the constant-rate validity condition "
                    f"(max {constant_rate_limit(self.local_steps, l_f):.6g}); "
                    "bound evaluation on this run is not covered by the theory"
                )
        return warnings

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def lr_schedule(cfg: ExperimentConfig, t: int, l_g: float | None = None):
    """(eta_t, alpha_t) for round t.

    The adaptive schedule decays both rates as 1/t and caps the inner rate at
    1/L_G when the smoothness constant is known.
    """
    if cfg.lr_schedule == "constant":
        return float(cfg.eta), float(cfg.alpha)
    eta_t = cfg.eta_scale / (cfg.eta_offset + t)
    alpha_t = cfg.alpha_scale / (cfg.alpha_offset + t)
    if l_g is None and cfg.family == "quadratic":
        l_g = cfg.env().smoothness
    if l_g is not None:
        alpha_t = min(alpha_t, 1.0 / l_g)
    return float(eta_t), float(alpha_t)


def constant_rate_limit(q: int, l_f: float) -> float:
    """Largest constant outer rate admitted by the validity condition.

    Solves 160 x^3 + 60 x^2 + 4 x = 1/8 for x = eta*Q*L_F and intersects with
    eta <= 1/(10*Q*L_F).
    """
    roots = np.roots([160.0, 60.0, 4.0, -0.125])
    x = min(r.real for r in roots if abs(r.imag) < 1e-12 and r.real > 0)
    return float(min(x, 0.1) / (q * l_f))


def meets_constant_rate(eta: float, q: int, l_f: float) -> bool:
    x = eta * q * l_f
    return 0 < eta <= 1 / (10 * q * l_f) and 60 * x**2 + 160 * x**3 + 4 * x <= 0.125 + 1e-12


def sample_active_set(n: int, r: float, gen: np.random.Generator) -> np.ndarray:
    """Uniform size-(r*n) subset of device ids, without replacement."""
    k = r * n
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise ValueError(f"r * n must be a positive integer, got {k}")
    return np.sort(gen.choice(n, size=int(round(k)), replace=False))


@dataclass
class RoundRecord:
    """Scalar metrics of one round.

    ``grad_norm_sq`` is measured against the population meta objective at the
    run's initial inner rate so that constant and adaptive runs share one
    yardstick.
    """

    t: int
    eta_t: float
    alpha_t: float
    active: tuple
    rho: float
    v_model: float
    v_realized: float
    grad_norm_sq: float
    train_loss: float
    sum_abs_h_sq: float
    min_g_sq_over_eta_sq: float
    mem_norm_sq_max: float
    power_margin: float
    pinv_fallback: bool


@dataclass
class Trajectory:
    """Recorded run: iterates, per-round metrics, and replayable channel draws."""

    config: ExperimentConfig
    thetas: np.ndarray                 # (rounds_done + 1, dim)
    records: list
    device_ws: np.ndarray              # (n, dim) task vectors
    datasets: list
    memories: np.ndarray               # final error-feedback memories (n, dim)
    replay: list                       # per-round realized channel draws
    recon: list | None                 # per-round vectors for identity checks
    probe: dict | None                 # running maxima for constant estimation
    f_init: float
    f_star: float
    metric_alpha: float
    warnings: list
    aborted_at: int | None = None

    @property
    def theta_final(self) -> np.ndarray:
        return self.thetas[-1]

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(rec, name) for rec in self.records], dtype=float)

    def eps_g_measured(self, floor: float = 1e-12) -> float:
        """Minimum over rounds/devices of ||g||^2 / eta^2, floored."""
        vals = self.series("min_g_sq_over_eta_sq")
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            return floor
        return max(float(vals.min()), floor)


class _State:
    def __init__(self, cfg: ExperimentConfig):
        self.env = cfg.env()
        seed = cfg.master_seed
        self.devices = [
            tasks.sample_device(self.env, rng.substream(seed, rng.DEVICE_TASK, i))
            for i in range(cfg.n_devices)
        ]
        self.datasets = [
            tasks.sample_dataset(
                dev, cfg.samples_per_device, cfg.train_samples, cfg.val_samples,
                rng.substream(seed, rng.DEVICE_DATA, i),
            )
            for i, dev in enumerate(self.devices)
        ]
        self.theta = cfg.theta_init * np.ones(cfg.dim)
        self.memories = np.zeros((cfg.n_devices, cfg.dim))
        self.probe = {"g_sq": 0.0, "sigma_g_sq": 0.0} if cfg.family == "quadratic" else None
        if self.probe is not None:
            cov = self.env.input_cov
            tr = float(np.trace(cov))
            cov2 = cov @ cov
            self._second_moment_mat = 2.0 * cov2 + tr * cov
            self._variance_mat = cov2 + tr * cov
            self._noise_trace = self.env.label_noise_var * tr

    def update_probe(self, points, device: tasks.DeviceDistribution, alpha: float):
        """Track analytic per-point gradient moments along the trajectory."""
        if self.probe is None:
            return
        cov = self.env.input_cov
        for p in points:
            e = p - device.w
            e_ad = e - alpha * (cov @ e)  # offset after an exact adaptation step
            for off in (e, e_ad):
                self.probe["g_sq"] = max(
                    self.probe["g_sq"],
                    float(off @ self._second_moment_mat @ off) + self._noise_trace,
                )
                self.probe["sigma_g_sq"] = max(
                    self.probe["sigma_g_sq"],
                    float(off @ self._variance_mat @ off) + self._noise_trace,
                )


def _meta_training_loss(theta, datasets, alpha, family):
    # local import breaks a metrics <-> protocol cycle
    from .metrics import meta_training_loss

    return meta_training_loss(theta, datasets, alpha, family)


def run_experiment(cfg: ExperimentConfig, channel_replay: list | None = None) -> Trajectory:
    """Run the configured number of rounds and record the trajectory.

    ``channel_replay`` substitutes recorded channel draws for fresh sampling
    (deterministic replay); everything else still derives from the master
    seed.  A non-finite iterate aborts the run and stamps the failing round.
    """
    warnings = cfg.validate()
    state = _State(cfg)
    seed = cfg.master_seed
    mu_abs, abs_power = ch.fading_moments(cfg.fading)
    noise_var = cfg.effective_noise_var() if cfg.channel_mode == "air" else 0.0
    metric_alpha = lr_schedule(cfg, 0)[1]

    quadratic = cfg.family == "quadratic"
    f_init = tasks.mean_meta_loss(state.theta, state.devices, metric_alpha) if quadratic else float("nan")
    f_star = tasks.meta_loss_minimum(state.devices, metric_alpha) if quadratic else float("nan")

    thetas = [state.theta.copy()]
    records: list[RoundRecord] = []
    replay_out: list[dict] = []
    recon: list[dict] | None = [] if cfg.record_reconstruction else None
    aborted_at = None

    for t in range(cfg.rounds):
        eta_t, alpha_t = lr_schedule(cfg, t)
        local_cfg = meta.LocalConfig(
            alpha=alpha_t, local_steps=cfg.local_steps,
            batch_size=cfg.batch_size, first_order=cfg.first_order,
        )
        active = sample_active_set(
            cfg.n_devices, cfg.active_fraction, rng.substream(seed, rng.ACTIVE_SET, t)
        )
        rn = active.size

        if channel_replay is not None:
            entry = channel_replay[t]
            if not np.array_equal(np.asarray(entry["active"]), active):
                raise ValueError(f"replay log active set mismatch at round {t}")
            round_ch = ch.ChannelRound(
                gains=np.asarray(entry["gains"], dtype=complex),
                noise_var=noise_var,
                noise_re=np.asarray(entry["noise_re"], dtype=float),
                noise_im=np.asarray(entry["noise_im"], dtype=float),
                fading=cfg.fading,
            )
        else:
            round_ch = ch.sample_channel(
                rn, cfg.fading, noise_var, cfg.channel_uses,
                rng.substream(seed, rng.CHANNEL, t),
            )
        replay_out.append({
            "active": active.copy(),
            "gains": round_ch.gains.copy(),
            "noise_re": round_ch.noise_re.copy(),
            "noise_im": round_ch.noise_im.copy(),
        })

        # a zero channel coefficient drops the device for the round
        alive = np.abs(round_ch.gains) > 0.0
        act_eff = active[alive]
        gains = round_ch.gains[alive]

        deltas = {}
        with np.errstate(over="ignore", invalid="ignore"):
            for i in act_eff:
                _, delta, iterates = meta.local_rounds(
                    state.theta, state.datasets[i], local_cfg, eta_t,
                    rng.substream(seed, rng.LOCAL_BATCH, t, i), cfg.family, trace=True,
                )
                deltas[i] = delta
                state.update_probe(iterates, state.devices[i], alpha_t)
        if any(not np.all(np.isfinite(deltas[i])) for i in act_eff):
            records.append(_diagnostic_record(state, cfg, t, eta_t, alpha_t, active,
                                              metric_alpha, quadratic))
            aborted_at = t
            break

        if cfg.channel_mode == "ideal":
            theta_next = meta.ideal_aggregate(state.theta, [deltas[i] for i in act_eff]) \
                if act_eff.size else state.theta.copy()
            rec = RoundRecord(
                t=t, eta_t=eta_t, alpha_t=alpha_t, active=tuple(int(i) for i in active),
                rho=float("nan"), v_model=0.0, v_realized=0.0,
                grad_norm_sq=_grad_norm_sq(state, metric_alpha, quadratic),
                train_loss=_train_loss(cfg, state),
                sum_abs_h_sq=float(np.sum(np.abs(gains) ** 2)),
                min_g_sq_over_eta_sq=float("nan"),
                mem_norm_sq_max=0.0, power_margin=0.0, pinv_fallback=False,
            )
            if recon is not None:
                recon.append({
                    "sum_delta": np.sum([deltas[i] for i in act_eff], axis=0),
                    "noise_term": np.zeros(cfg.dim),
                    "fading_dev": np.zeros(cfg.dim),
                    "mem_sum": state.memories.sum(axis=0),
                })
        else:
            updates, mem_next = {}, {}
            with np.errstate(over="ignore", invalid="ignore"):
                for i in act_eff:
                    g, m_next = sparsify.memory_fold(
                        state.memories[i], deltas[i], cfg.sparsify_k, cfg.comp_mode,
                        rng.substream(seed, rng.SPARSIFIER, t, i),
                    )
                    updates[i] = g
                    mem_next[i] = m_next

            policy = sparsify.PowerPolicy(
                power=cfg.power_per_use, channel_uses=cfg.channel_uses, rho_max=cfg.rho_max,
            )
            with np.errstate(over="ignore", invalid="ignore"):
                rho = sparsify.power_scale([updates[i] for i in act_eff], eta_t, policy)
            if not (np.isfinite(rho) and rho > 0):  # update energy overflowed
                records.append(_diagnostic_record(state, cfg, t, eta_t, alpha_t, active,
                                                  metric_alpha, quadratic))
                aborted_at = t
                break
            comp = ch.make_compression(
                cfg.compression, cfg.channel_uses, cfg.dim,
                rng.substream(seed, rng.COMPRESSION, t),
            )

            signals, margins, g_sq = [], [], []
            for i, h in zip(act_eff, gains):
                x_tilde = sparsify.phase_precompensate(updates[i], rho, eta_t, h)
                x_i = comp.matrix @ x_tilde
                margins.append(float(np.real(np.vdot(x_i, x_i))) / cfg.channel_uses
                               - cfg.power_per_use)
                g_sq.append(float(updates[i] @ updates[i]))
                signals.append(x_i)

            if signals:
                y = ch.transmit_mac(signals, ch.ChannelRound(
                    gains=gains, noise_var=round_ch.noise_var,
                    noise_re=round_ch.noise_re, noise_im=round_ch.noise_im,
                    fading=cfg.fading,
                ))
            else:
                y = round_ch.noise_re.copy()
            total_g_sq = float(np.sum(g_sq)) if g_sq else 0.0
            prior_power = abs_power * rho * total_g_sq / (eta_t**2 * cfg.dim) \
                if total_g_sq > 0.0 else 0.0
            est = ch.estimate(y, comp, prior_power, noise_var, cfg.estimator)

            signal_true = (np.sqrt(rho) / eta_t) * np.sum(
                [np.abs(h) * updates[i] for i, h in zip(act_eff, gains)], axis=0,
            ) if total_g_sq > 0.0 else np.zeros(cfg.dim)
            noise_term = est.x_hat - signal_true
            theta_next = ch.global_update(state.theta, est, eta_t, rho, mu_abs, rn)

            for i in act_eff:
                state.memories[i] = mem_next[i]

            rec = RoundRecord(
                t=t, eta_t=eta_t, alpha_t=alpha_t, active=tuple(int(i) for i in active),
                rho=float(rho), v_model=float(est.err_var),
                v_realized=float(noise_term @ noise_term) / cfg.dim,
                grad_norm_sq=_grad_norm_sq(state, metric_alpha, quadratic),
                train_loss=_train_loss(cfg, state),
                sum_abs_h_sq=float(np.sum(np.abs(gains) ** 2)),
                min_g_sq_over_eta_sq=(min(g_sq) / eta_t**2) if g_sq and eta_t > 0
                else float("nan"),
                mem_norm_sq_max=float(np.max(np.sum(state.memories**2, axis=1))),
                power_margin=max(margins) if margins else 0.0,
                pinv_fallback=bool(est.pinv_fallback),
            )
            if recon is not None:
                recon.append({
                    "sum_delta": np.sum([deltas[i] for i in act_eff], axis=0)
                    if act_eff.size else np.zeros(cfg.dim),
                    "noise_term": noise_term,
                    "fading_dev": np.sum(
                        [(np.abs(h) / mu_abs - 1.0) * updates[i]
                         for i, h in zip(act_eff, gains)], axis=0,
                    ) if act_eff.size else np.zeros(cfg.dim),
                    "mem_sum": state.memories.sum(axis=0),
                })

        records.append(rec)
        if not np.all(np.isfinite(theta_next)):
            aborted_at = t
            break
        state.theta = theta_next
        thetas.append(state.theta.copy())

    return Trajectory(
        config=cfg,
        thetas=np.stack(thetas),
        records=records,
        device_ws=np.stack([d.w for d in state.devices]),
        datasets=state.datasets,
        memories=state.memories,
        replay=replay_out,
        recon=recon,
        probe=state.probe,
        f_init=f_init,
        f_star=f_star,
        metric_alpha=metric_alpha,
        warnings=warnings,
        aborted_at=aborted_at,
    )


def _diagnostic_record(state, cfg, t, eta_t, alpha_t, active, metric_alpha,
                       quadratic) -> RoundRecord:
    """Record stamped when a round blows up, before the iterate goes NaN."""
    return RoundRecord(
        t=t, eta_t=eta_t, alpha_t=alpha_t, active=tuple(int(i) for i in active),
        rho=float("nan"), v_model=float("nan"), v_realized=float("nan"),
        grad_norm_sq=_grad_norm_sq(state, metric_alpha, quadratic),
        train_loss=float("nan"), sum_abs_h_sq=float("nan"),
        min_g_sq_over_eta_sq=float("nan"), mem_norm_sq_max=float("nan"),
        power_margin=float("nan"), pinv_fallback=False,
    )


def _grad_norm_sq(state: _State, metric_alpha: float, quadratic: bool) -> float:
    if not quadratic:
        return float("nan")
    g = tasks.mean_meta_grad(state.theta, state.devices, metric_alpha)
    return float(g @ g)


def _train_loss(cfg: ExperimentConfig, state: _State) -> float:
    if not cfg.track_train_loss:
        return float("nan")
    return _meta_training_loss(state.theta, state.datasets, lr_schedule(cfg, 0)[1], cfg.family)


def replay_experiment(cfg: ExperimentConfig, replay: list) -> Trajectory:
    """Re-run using the recorded channel draws; must match bit for bit."""
    if len(replay) < cfg.rounds:
        raise ValueError("replay log shorter than the configured number of rounds")
    return run_experiment(cfg, channel_replay=replay)


def memory_identity_residuals(traj: Trajectory) -> np.ndarray:
    """Per-round residual of the error-feedback bookkeeping identity.

    Maintains the noise-free virtual iterate from the recorded realized
    terms; the gap to the true iterate must equal the device-averaged
    memories, so the residual is numerical noise when the implementation is
    faithful.
    """
    if traj.recon is None:
        raise ValueError("trajectory was recorded without reconstruction vectors")
    cfg = traj.config
    rn = cfg.n_active
    mu_abs, _ = ch.fading_moments(cfg.fading)
    theta_hat = traj.thetas[0].copy()
    residuals = []
    for t, (rec, extra) in enumerate(zip(traj.records, traj.recon)):
        rho = rec.rho if np.isfinite(rec.rho) else 1.0
        theta_hat = (
            theta_hat
            - extra["sum_delta"] / rn
            - (rec.eta_t / (mu_abs * rn * np.sqrt(rho))) * extra["noise_term"]
            - extra["fading_dev"] / rn
        )
        gap = traj.thetas[t + 1] - theta_hat
        residuals.append(float(np.linalg.norm(gap - extra["mem_sum"] / rn)))
    return np.array(residuals)
