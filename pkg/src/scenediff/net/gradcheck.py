"""Finite-difference verification of the hand-written backward pass."""

from __future__ import annotations

import numpy as np

from ..diffusion import masked_mse, perturb


def _loss(denoiser, batch, x_noisy, taus, want_cache=False):
    ret = denoiser.denoise(batch, x_noisy, taus, want_cache=want_cache)
    D, cache = ret if want_cache else (ret, None)
    loss, dD = masked_mse(D, batch.x0, batch.latent())
    return (loss, dD, cache) if want_cache else loss


def grad_check(denoiser, batch, rng, entries_per_tensor=6, h_scale=1e-5):
    """Compare analytic parameter gradients with central differences.

    Uses one fixed noising of the batch; probes a random subset of entries
    in every parameter tensor. Returns (max relative error, report dict).
    """
    taus = np.exp(rng.normal(-0.5, 0.5, size=batch.batch_size))
    x_noisy = perturb(batch.x0, batch.latent(), taus, rng)

    loss0, dD, cache = _loss(denoiser, batch, x_noisy, taus, want_cache=True)
    grads = denoiser.backward(dD, cache)

    params = denoiser.network.params
    worst = 0.0
    report = {}
    for name in sorted(params):
        tensor = params[name]
        flat = tensor.reshape(-1)
        n = min(entries_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=n, replace=False)
        tensor_worst = 0.0
        for j in idx:
            orig = flat[j]
            h = h_scale * max(1.0, abs(orig))
            flat[j] = orig + h
            lp = _loss(denoiser, batch, x_noisy, taus)
            flat[j] = orig - h
            lm = _loss(denoiser, batch, x_noisy, taus)
            flat[j] = orig
            fd = (lp - lm) / (2.0 * h)
            an = grads[name].reshape(-1)[j]
            rel = abs(an - fd) / max(abs(an) + abs(fd), 1e-8)
            tensor_worst = max(tensor_worst, rel)
        report[name] = tensor_worst
        worst = max(worst, tensor_worst)
    return worst, report
