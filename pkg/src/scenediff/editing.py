"""Scenario fine-tuning: partial noising of a guide scene followed by the
deterministic reverse integration from an intermediate noise level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import heun_sample, sigma_grid


@dataclass
class EditRequest:
    """Guide states plus the held-fixed mask and the edit noise level."""

    guide_states: np.ndarray  # (A, T, 3) or (B, A, T, 3), scaled frame
    observed: np.ndarray  # slots held exactly at guide values
    valid: np.ndarray
    tau_edit: float
    seed: int = 0

    def validate(self, config):
        if not 0.0 < self.tau_edit <= config.sigma_max:
            raise ValueError(
                f"tau_edit must lie in (0, {config.sigma_max}], got {self.tau_edit}"
            )


def edit_grid(config, tau_edit, num_steps=None):
    """Reverse-integration grid for an edit: grid points <= tau_edit with
    tau_edit itself prepended as the initial node."""
    full = sigma_grid(config, num_steps)
    keep = full[full <= tau_edit]
    if keep.size == 0 or keep[0] < tau_edit:
        keep = np.concatenate([[tau_edit], keep])
    if keep[-1] != 0.0:  # pragma: no cover - sigma_grid always ends at 0
        keep = np.concatenate([keep, [0.0]])
    return keep


def sdedit(score_fn, request: EditRequest, config, num_steps=None, rng=None,
           on_step=None):
    """Run one stochastic-differential edit; deterministic given the seed.

    Latent slots start at guide + tau_edit * eps; observed slots are pinned
    to the guide values throughout.
    """
    request.validate(config)
    rng = rng if rng is not None else np.random.default_rng(request.seed)
    guide = np.asarray(request.guide_states, dtype=np.float64)
    observed = np.asarray(request.observed, dtype=bool)
    valid = np.asarray(request.valid, dtype=bool)
    latent = (valid & ~observed)[..., None]

    taus = edit_grid(config, request.tau_edit, num_steps)
    eps = rng.standard_normal(guide.shape)
    x_init = np.where(latent, guide + request.tau_edit * eps, 0.0)
    return heun_sample(
        score_fn,
        x_obs_grid=guide,
        observed=observed,
        valid=valid,
        config=config,
        rng=rng,
        taus=taus,
        x_init=x_init,
        on_step=on_step,
    )
