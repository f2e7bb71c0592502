"""Forecasting metrics and the sample-set to trajectory-set reduction.

minADE/minFDE are position-only displacement errors minimized over K
samples; the scene variants pick one sample index jointly for all agents.
The trajectory-set reduction fits a diagonal-covariance Gaussian mixture to
sampled trajectories with EM and returns the component means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6  # m^2, keeps mixture components non-singular


@dataclass
class GmmConfig:
    components: int = 6
    sample_count: int = 60
    max_iter: int = 200
    tol: float = 1e-7
    seed: int = 0
    retries: int = 3

    def __post_init__(self):
        if self.components < 1 or self.sample_count < self.components:
            raise ValueError("need sample_count >= components >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class TrajectorySet:
    """K trajectories (K, steps, 2) with mixture weights."""

    trajectories: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.trajectories.ndim != 3 or self.trajectories.shape[-1] != 2:
            raise ValueError("trajectories must be (K, steps, 2)")
        if self.weights.shape != (self.trajectories.shape[0],):
            raise ValueError("weights must match trajectory count")
        if (self.weights < 0).any() or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must be a distribution")


def _agent_errors(samples, truth_states, eval_mask, agent):
    steps = np.nonzero(eval_mask[agent])[0]
    if steps.size == 0:
        raise ValueError(f"agent {agent} has no evaluated steps")
    pred = np.asarray(samples)[:, agent][:, steps, :2]
    true = np.asarray(truth_states)[agent][steps, :2]
    err = np.linalg.norm(pred - true, axis=-1)  # (K, steps)
    return err


def min_ade_fde(samples, truth_states, eval_mask, agent):
    """Per-agent (minADE_K, minFDE_K) over K scene samples.

    samples: (K, A, T, >=2); truth_states: (A, T, >=2); eval_mask: (A, T)
    marks the steps that count (typically valid & unobserved).
    """
    err = _agent_errors(samples, truth_states, eval_mask, agent)
    return float(err.mean(axis=1).min()), float(err[:, -1].min())


def scene_min_ade_fde(samples, truth_states, eval_mask):
    """Joint (minSceneADE_K, minSceneFDE_K): one sample index for the scene."""
    K = np.asarray(samples).shape[0]
    agents = [a for a in range(eval_mask.shape[0]) if eval_mask[a].any()]
    if not agents:
        raise ValueError("no agent has evaluated steps")
    ade = np.zeros(K)
    fde = np.zeros(K)
    for a in agents:
        err = _agent_errors(samples, truth_states, eval_mask, a)
        ade += err.mean(axis=1)
        fde += err[:, -1]
    ade /= len(agents)
    fde /= len(agents)
    return float(ade.min()), float(fde.min())


def _kmeanspp_init(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(
            [((X - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
            continue
        centers.append(X[rng.choice(n, p=d2 / total)])
    return np.stack(centers)


def _log_gauss_diag(X, means, variances):
    # (n, k) log N(x; mu_k, diag(var_k))
    d = X.shape[1]
    diff2 = (X[:, None, :] - means[None]) ** 2
    return -0.5 * (
        (diff2 / variances[None]).sum(-1)
        + np.log(variances).sum(-1)[None]
        + d * np.log(2 * np.pi)
    )


def gmm_em_diag(X, k, cfg: GmmConfig):
    """EM for a diagonal-covariance GMM; returns (means, variances, weights,
    log-likelihood trace). The trace is non-decreasing by construction of EM;
    empty components are re-seeded from the farthest sample."""
    rng = np.random.default_rng(cfg.seed)
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if k > n:
        raise ValueError("more components than samples")
    means = _kmeanspp_init(X, k, rng)
    variances = np.full((k, d), max(X.var(axis=0).mean(), VARIANCE_FLOOR))
    weights = np.full(k, 1.0 / k)

    trace = []
    retries = cfg.retries
    it = 0
    while it < cfg.max_iter:
        it += 1
        logp = _log_gauss_diag(X, means, variances) + np.log(weights)[None]
        m = logp.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True))
        ll = float(lse.sum())
        resp = np.exp(logp - lse)

        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if empty.any() and retries > 0:
            retries -= 1
            dist = np.min(((X[:, None] - means[None]) ** 2).sum(-1), axis=1)
            for j in np.nonzero(empty)[0]:
                far = int(np.argmax(dist))
                means[j] = X[far]
                variances[j] = np.maximum(X.var(axis=0), VARIANCE_FLOOR)
                weights[j] = 1.0 / k
                dist[far] = 0.0
            weights /= weights.sum()
            trace = []  # restart the monotone trace after a re-seed
            continue
        if empty.any():
            keep = ~empty
            log.warning("dropping %d empty mixture components", int(empty.sum()))
            means, variances = means[keep], variances[keep]
            weights = nk[keep] / nk[keep].sum()
            k = int(keep.sum())
            trace = []
            continue

        trace.append(ll)
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        diff2 = (X[:, None, :] - means[None]) ** 2
        variances = np.einsum("nk,nkd->kd", resp, diff2) / nk[:, None]
        variances = np.maximum(variances, VARIANCE_FLOOR)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < cfg.tol * max(1.0, abs(trace[-2])):
            break
    return means, variances, weights, np.asarray(trace)


def fit_trajectory_set(samples, agent, cfg: GmmConfig, eval_mask=None):
    """Reduce K scene samples to a small trajectory set for one agent.

    Flattens the agent's evaluated positions per sample and fits a
    diagonal-covariance mixture; component means become the trajectory set.
    """
    samples = np.asarray(samples, dtype=np.float64)
    K = samples.shape[0]
    if K < cfg.components:
        raise ValueError(f"need >= {cfg.components} samples, got {K}")
    if eval_mask is None:
        steps = np.arange(samples.shape[2])
    else:
        steps = np.nonzero(eval_mask[agent])[0]
        if steps.size == 0:
            raise ValueError(f"agent {agent} has no evaluated steps")
    X = samples[:, agent][:, steps, :2].reshape(K, -1)
    means, _, weights, trace = gmm_em_diag(X, cfg.components, cfg)
    trajs = means.reshape(means.shape[0], steps.size, 2)
    return TrajectorySet(trajs, weights), trace
