"""Training loop: Adam with gradient clipping and a linear warmup ramp."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..batching import normalize_entry, pack_scenes
from ..diffusion import DiffusionConfig, masked_mse, perturb, sample_train_taus
from ..scene import sample_observation_mask
from .config import NetworkConfig
from .network import NetDenoiser, ScoreNetwork

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: float = 3.0
    batch_size: int = 32
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 5.0
    ramp_epochs: float = 0.1
    seed: int = 0
    log_every: int = 50

    def as_dict(self):
        d = self.__dict__.copy()
        d["betas"] = list(self.betas)
        return d


class AdamOptimizer:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.b1**t
        bc2 = 1.0 - self.b2**t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * (g * g)
            p -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def global_grad_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_gradients(grads, max_norm):
    """Scale gradients to max_norm when exceeded; returns (pre-clip norm)."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def training_step(denoiser, batch, dconfig, rng, taus=None):
    """One loss + gradient evaluation; returns (loss, grads)."""
    if taus is None:
        taus = sample_train_taus(dconfig, batch.batch_size, rng)
    x_noisy = perturb(batch.x0, batch.latent(), taus, rng)
    D, cache = denoiser.denoise(batch, x_noisy, taus, want_cache=True)
    loss, dD = masked_mse(D, batch.x0, batch.latent())
    grads = denoiser.backward(dD, cache)
    return loss, grads


def assemble_batch(corpus, indices, dist, scales, rng):
    """Normalize + mask a set of corpus scenes into a SceneBatch."""
    entries = []
    for i in indices:
        scene, ctx, graph, meta = corpus[i]
        mask = sample_observation_mask(dist, scene, rng, ego_index=meta["ego_index"])
        entry, _ = normalize_entry(
            scene, mask, ctx, graph, meta["ego_index"], dist.t_obs, scales
        )
        entries.append(entry)
    return pack_scenes(entries)


def train(
    network,
    corpus,
    dist,
    scales,
    dconfig=None,
    tconfig=None,
    checkpoint_path=None,
    grad_norm_log=None,
):
    """Train the denoiser; returns (denoiser, loss trace).

    Aborts on non-finite loss, keeping the last finite-state parameters.
    ``grad_norm_log``, when given, collects post-clip global norms.
    """
    dconfig = dconfig or DiffusionConfig()
    tconfig = tconfig or TrainConfig()
    rng = np.random.default_rng(tconfig.seed)
    denoiser = NetDenoiser(network, dconfig)
    opt = AdamOptimizer(network.params, tconfig.lr, tconfig.betas, tconfig.eps)

    n = len(corpus)
    steps_per_epoch = max(n // tconfig.batch_size, 1)
    total_steps = max(int(round(tconfig.epochs * steps_per_epoch)), 1)
    ramp_steps = max(int(round(tconfig.ramp_epochs * steps_per_epoch)), 1)

    if hasattr(corpus, "agent_count"):
        agent_counts = np.asarray(corpus.agent_count, dtype=np.int64)
    else:
        agent_counts = np.array([corpus[i][0].agent_count for i in range(n)])

    def epoch_order():
        # shuffle, then sort within chunks by agent count so batches pad less
        order = rng.permutation(n)
        chunk = tconfig.batch_size * 16
        for s in range(0, n, chunk):
            block = order[s : s + chunk]
            order[s : s + chunk] = block[np.argsort(agent_counts[block], kind="stable")]
        return order

    trace = []
    order = epoch_order()
    pos = 0
    last_good = {k: v.copy() for k, v in network.params.items()}
    for step in range(total_steps):
        if pos + tconfig.batch_size > n:
            order = epoch_order()
            pos = 0
        idx = order[pos : pos + tconfig.batch_size]
        pos += tconfig.batch_size

        batch = assemble_batch(corpus, idx, dist, scales, rng)
        loss, grads = training_step(denoiser, batch, dconfig, rng)
        if not np.isfinite(loss):
            log.error("non-finite loss at step %d; restoring last checkpoint", step)
            network.params.update({k: v.copy() for k, v in last_good.items()})
            break
        clip_gradients(grads, tconfig.clip_norm)
        if grad_norm_log is not None:
            grad_norm_log.append(global_grad_norm(grads))
        lr = tconfig.lr * min(1.0, (step + 1) / ramp_steps)
        opt.step(network.params, grads, lr=lr)
        trace.append(loss)
        if step % tconfig.log_every == 0:
            recent = float(np.mean(trace[-tconfig.log_every :]))
            log.info("step %d/%d loss %.5f", step, total_steps, recent)
            last_good = {k: v.copy() for k, v in network.params.items()}
            if checkpoint_path is not None:
                save_checkpoint(
                    checkpoint_path, network, dconfig, scales, dist,
                    trace=trace, train_config=tconfig,
                )
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, network, dconfig, scales, dist,
            trace=trace, train_config=tconfig,
        )
    return denoiser, trace


CHECKPOINT_VERSION = 1


def save_checkpoint(path, network, dconfig, scales, dist, trace=None, train_config=None):
    """Versioned npz checkpoint: configs as a JSON header + parameter arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "network": network.config.as_dict(),
        "diffusion": dconfig.as_dict(),
        "scales": scales.as_dict(),
        "task_distribution": {"t_obs": dist.t_obs, "weights": dist.weights},
        "train_config": train_config.as_dict() if train_config else None,
    }
    arrays = {f"param/{k}": v for k, v in network.params.items()}
    if trace is not None:
        arrays["trace"] = np.asarray(trace)
    np.savez(path, header=json.dumps(header), **arrays)


def load_checkpoint(path):
    """Returns (network, diffusion config, scales, task distribution, trace)."""
    from ..scene import FeatureScales, TaskDistribution

    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        params = {
            k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")
        }
        trace = z["trace"] if "trace" in z.files else None
    config = NetworkConfig.from_dict(header["network"])
    network = ScoreNetwork(config, params=params)
    dconfig = DiffusionConfig.from_dict(header["diffusion"])
    scales = FeatureScales.from_dict(header["scales"])
    td = header["task_distribution"]
    dist = TaskDistribution(t_obs=int(td["t_obs"]), weights=td["weights"])
    return network, dconfig, scales, dist, trace
