"""EDM-style diffusion over the latent part of a scene tensor.

The forward kernel is p(x_tau | x_0) = N(x_0, tau^2 I) applied only to the
valid-and-unobserved slots; observed slots stay clean and invalid slots stay
zero. Sampling integrates the probability-flow ODE dx/dtau = -tau * score
with the deterministic 2nd-order Heun scheme on the rho-warped time grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DiffusionConfig:
    """Noise schedule, preconditioning and sampler parameters.

    Defaults follow the EDM reference settings; sigma_data matches the
    feature scaling target (0.5).
    """

    sigma_data: float = 0.5
    rho: float = 7.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    num_steps: int = 50
    p_train_mean: float = -1.2
    p_train_std: float = 1.2

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0 or self.sigma_data <= 0:
            raise ValueError("rho and sigma_data must be positive")
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")
        if self.p_train_std <= 0:
            raise ValueError("p_train_std must be positive")

    def as_dict(self):
        return {
            "sigma_data": self.sigma_data,
            "rho": self.rho,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "num_steps": self.num_steps,
            "p_train_mean": self.p_train_mean,
            "p_train_std": self.p_train_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PreconditionCoefficients:
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    c_noise: np.ndarray


def precondition(tau, sigma_data=0.5):
    """Input/output scalings of the denoiser at noise level tau.

    c_skip = sd^2/(tau^2+sd^2), c_out = tau*sd/sqrt(tau^2+sd^2),
    c_in = 1/sqrt(tau^2+sd^2), c_noise = ln(tau)/4. Requires tau > 0.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("precondition requires tau > 0 (c_noise = ln(tau)/4)")
    sd2 = sigma_data * sigma_data
    denom = tau * tau + sd2
    return PreconditionCoefficients(
        c_skip=sd2 / denom,
        c_out=tau * sigma_data / np.sqrt(denom),
        c_in=1.0 / np.sqrt(denom),
        c_noise=0.25 * np.log(tau),
    )


def sigma_grid(config, num_steps=None):
    """EDM time discretization tau_0 = sigma_max > ... > tau_{N-1} = sigma_min,
    with the terminal 0 appended: returns an array of length N+1."""
    n = config.num_steps if num_steps is None else int(num_steps)
    if n < 2:
        raise ValueError("need at least 2 steps")
    i = np.arange(n, dtype=np.float64)
    inv_rho = 1.0 / config.rho
    taus = (
        config.sigma_max**inv_rho
        + (i / (n - 1)) * (config.sigma_min**inv_rho - config.sigma_max**inv_rho)
    ) ** config.rho
    return np.concatenate([taus, [0.0]])


def perturb(x0, noise_mask, tau, rng):
    """Add N(0, tau^2) noise on masked slots; everything else unchanged.

    x0: (..., 3) states, noise_mask: (...) bool over the leading grid,
    tau: scalar or per-batch (B,) broadcast over the remaining axes.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr < 0):
        raise ValueError("tau must be non-negative")
    if tau_arr.ndim > 0:
        tau_arr = tau_arr.reshape(tau_arr.shape + (1,) * (x0.ndim - 1))
    eps = rng.standard_normal(x0.shape)
    noisy = x0 + tau_arr * eps
    return np.where(noise_mask[..., None], noisy, x0)


def score_from_denoiser(D, x, tau):
    """Score estimate (D - x) / tau^2 (applied per latent slot)."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("score undefined at tau <= 0")
    if tau.ndim > 0:
        tau = tau.reshape(tau.shape + (1,) * (np.asarray(x).ndim - 1))
    return (D - x) / (tau * tau)


def denoiser_to_score_fn(denoise_fn):
    """Adapt a denoiser callable D(x, tau) into a score callable."""

    def score_fn(x, tau):
        return score_from_denoiser(denoise_fn(x, tau), x, tau)

    return score_fn


def sample_train_taus(config, batch_size, rng):
    """Per-scene noise levels: ln(tau) ~ N(p_train_mean, p_train_std^2)."""
    return np.exp(
        config.p_train_mean + config.p_train_std * rng.standard_normal(batch_size)
    )


class SamplerDivergenceError(RuntimeError):
    """Raised when the ODE integration produces non-finite values."""

    def __init__(self, step, tau, bad_count):
        self.step = step
        self.tau = tau
        self.bad_count = bad_count
        super().__init__(
            f"non-finite values during sampling at step {step} (tau={tau:.6g}, "
            f"{bad_count} bad entries)"
        )


def heun_sample(
    score_fn,
    x_obs_grid,
    observed,
    valid,
    config,
    rng,
    num_steps=None,
    taus=None,
    x_init=None,
    on_step=None,
):
    """Integrate the probability-flow ODE from sigma_max down to 0.

    score_fn(x, tau) -> score array shaped like x; only its values on
    latent (valid & ~observed) slots are used. Observed slots are pinned to
    ``x_obs_grid`` at every substep; invalid slots stay zero.

    x_obs_grid/observed/valid: (..., A, T, [3]) aligned grids (any number of
    leading batch axes). Returns the sampled grid.
    """
    observed = np.asarray(observed, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if (observed & ~valid).any():
        raise ValueError("observed slots must be valid")
    latent = (valid & ~observed)[..., None]
    obs3 = observed[..., None]

    if taus is None:
        taus = sigma_grid(config, num_steps)
    taus = np.asarray(taus, dtype=np.float64)
    if taus.ndim != 1 or taus.shape[0] < 2 or taus[-1] != 0.0:
        raise ValueError("taus must be a descending grid terminating at 0")
    if np.any(np.diff(taus) >= 0):
        raise ValueError("taus must be strictly decreasing")

    x_obs_grid = np.where(obs3, x_obs_grid, 0.0)
    if x_init is None:
        eps = rng.standard_normal(x_obs_grid.shape)
        x = np.where(latent, taus[0] * eps, x_obs_grid)
    else:
        x = np.where(latent, x_init, x_obs_grid)

    for i in range(taus.shape[0] - 1):
        t_cur, t_next = taus[i], taus[i + 1]
        h = t_next - t_cur
        d_cur = -t_cur * score_fn(x, t_cur)
        x_pred = np.where(latent, x + h * d_cur, x_obs_grid)
        if t_next > 0.0:
            d_next = -t_next * score_fn(x_pred, t_next)
            x = np.where(latent, x + 0.5 * h * (d_cur + d_next), x_obs_grid)
        else:
            x = x_pred
        bad = ~np.isfinite(np.where(latent, x, 0.0))
        if bad.any():
            raise SamplerDivergenceError(i, float(t_next), int(bad.sum()))
        if on_step is not None:
            on_step(i, float(t_next), x)
    return x


class GaussianWorldOracle:
    """Closed-form denoiser for i.i.d. N(0, sigma_data^2) latent slots.

    D*(x, tau) = sigma_data^2 * x / (sigma_data^2 + tau^2); the matching
    marginal score is -x / (sigma_data^2 + tau^2). Used to verify the sampler
    independently of any learned network.
    """

    def __init__(self, sigma_data=0.5):
        self.sigma_data = sigma_data

    def __call__(self, x, tau):
        sd2 = self.sigma_data**2
        return sd2 * x / (sd2 + tau * tau)

    def score(self, x, tau):
        return -x / (self.sigma_data**2 + tau * tau)

    def exact_terminal_factor(self, tau_start):
        """x(0) / x(tau_start) under the exact PF ODE solution."""
        sd2 = self.sigma_data**2
        return np.sqrt(sd2 / (sd2 + tau_start * tau_start))


def masked_mse(D, x0, latent_mask):
    """Per-scene mean squared error over latent valid slot-channels.

    Returns (loss, dLoss/dD). Scenes without latent slots contribute
    nothing; raises if the whole batch has none.
    """
    D = np.asarray(D, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    lat3 = np.broadcast_to(np.asarray(latent_mask, bool)[..., None], D.shape)
    B = D.shape[0]
    counts = lat3.reshape(B, -1).sum(axis=1)
    live = counts > 0
    if not live.any():
        raise ValueError("batch has zero latent slots")
    diff = np.where(lat3, D - x0, 0.0)
    per_scene = (diff**2).reshape(B, -1).sum(axis=1)
    per_scene = np.where(live, per_scene / np.maximum(counts, 1), 0.0)
    loss = float(per_scene[live].mean())
    n_live = int(live.sum())
    scale = np.where(live, 2.0 / (np.maximum(counts, 1) * n_live), 0.0)
    dD = diff * scale.reshape((B,) + (1,) * (D.ndim - 1))
    return loss, dD


def training_loss(denoise_fn, x0, observed, valid, config, rng, taus=None):
    """One Monte-Carlo evaluation of the denoising objective.

    denoise_fn(x_noisy, taus) must return the preconditioned estimate with
    observed slots passed through clean. Returns the scalar loss.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    latent = valid & ~observed
    if taus is None:
        taus = sample_train_taus(config, x0.shape[0], rng)
    x_noisy = perturb(x0, latent, taus, rng)
    D = denoise_fn(x_noisy, taus)
    loss, _ = masked_mse(D, x0, latent)
    if not np.isfinite(loss):
        raise FloatingPointError("training loss is not finite")
    return loss
