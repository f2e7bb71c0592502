"""Test-time conditioning: classifier-free guidance over augmented
observation sets, and classifier guidance from behavior classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batching import SceneBatch
from .diffusion import sample_train_taus

GUIDANCE_MODES = ("none", "classifier_free", "classifier", "both")


def cfg_score(score_cond, score_base, lam):
    """Classifier-free combination: lam * s_cond + (1 - lam) * s_base."""
    score_cond = np.asarray(score_cond)
    score_base = np.asarray(score_base)
    if score_cond.shape != score_base.shape:
        raise ValueError(
            f"score shapes differ: {score_cond.shape} vs {score_base.shape}"
        )
    if not np.isfinite(lam):
        raise ValueError("guidance weight must be finite")
    return lam * score_cond + (1.0 - lam) * score_base


def classifier_guided_score(score_base, grad_log_prob, alpha):
    """Classifier guidance: s + alpha * grad_x log p(y | x_tau)."""
    grad = np.asarray(grad_log_prob)
    if grad.shape != np.asarray(score_base).shape:
        raise ValueError("classifier gradient shape mismatch")
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    if alpha != 0.0 and not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite classifier gradient")
    return score_base + alpha * grad


@dataclass
class GuidanceSpec:
    """How to steer sampling; modes compose additively when 'both'."""

    mode: str = "none"
    cfg_weight: float = 1.0
    alpha: float = 0.0
    cond_mask: np.ndarray | None = None  # (A, T) extra conditioning slots
    cond_values: np.ndarray | None = None  # (A, T, 3) values on those slots
    classifier: object | None = None  # CutInClassifier
    classifier_pair: tuple | None = None  # (ego agent, other agent)
    y_target: int = 1

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if not (np.isfinite(self.cfg_weight) and np.isfinite(self.alpha)):
            raise ValueError("guidance weights must be finite")
        if self.mode in ("classifier_free", "both") and self.cond_mask is None:
            raise ValueError("classifier-free guidance needs conditioning states")
        if self.mode in ("classifier", "both") and (
            self.classifier is None or self.classifier_pair is None
        ):
            raise ValueError("classifier guidance needs a classifier and a pair")


def augment_batch(batch: SceneBatch, cond_mask, cond_values):
    """Batch view with x_cond merged into the observation set.

    cond slots must be valid and disjoint from the base observed set;
    context velocities stay masked by the base set (unknown for goals).
    """
    cond = np.asarray(cond_mask, dtype=bool)
    if cond.shape == batch.observed.shape[1:]:
        cond = np.broadcast_to(cond[None], batch.observed.shape)
    elif cond.shape != batch.observed.shape:
        raise ValueError(f"cond mask shape {cond.shape} does not fit batch")
    if (cond & batch.observed).any():
        raise ValueError("x_cond must be disjoint from x_obs")
    if (cond & ~batch.valid).any():
        raise ValueError("x_cond slots must be valid")
    observed = batch.observed | cond
    vals = np.asarray(cond_values, dtype=np.float64)
    if vals.shape == batch.x0.shape[1:]:
        vals = np.broadcast_to(vals[None], batch.x0.shape)
    elif vals.shape != batch.x0.shape:
        raise ValueError(f"cond values shape {vals.shape} does not fit batch")
    x0 = np.where(cond[..., None], vals, batch.x0)
    ctx = batch.ctx.copy()
    ctx[..., 5] = observed
    return SceneBatch(x0, batch.valid, observed, ctx, batch.map_feat, batch.map_valid)


def build_score_fn(denoiser, batch, spec: GuidanceSpec | None):
    """Compose the sampler's score function from a denoiser and a spec.

    The conditional branch sees the current noisy state with the extra
    conditioning slots replaced by their clean values; both branches share
    the base latent set, so scores combine elementwise.
    """
    base_fn = denoiser.as_denoise_fn(batch)
    if spec is None or spec.mode == "none":
        def score_fn(x, tau):
            return (base_fn(x, tau) - x) / (tau * tau)

        return score_fn

    use_cfg = spec.mode in ("classifier_free", "both")
    use_cls = spec.mode in ("classifier", "both")
    if use_cfg:
        cond_batch = augment_batch(batch, spec.cond_mask, spec.cond_values)
        cond_fn = denoiser.as_denoise_fn(cond_batch)
        cond3 = (cond_batch.observed & ~batch.observed)[..., None]
        cond_vals = cond_batch.x0

    latent3 = (batch.valid & ~batch.observed)[..., None]

    def score_fn(x, tau):
        t2 = tau * tau
        score = (base_fn(x, tau) - x) / t2
        if use_cfg:
            x_cond = np.where(cond3, cond_vals, x)
            score_cond = (cond_fn(x_cond, tau) - x) / t2
            score = cfg_score(score_cond, score, spec.cfg_weight)
        if use_cls and spec.alpha != 0.0:
            grad = classifier_grad_field(
                spec.classifier, x, batch.valid, tau, spec.classifier_pair,
                y_target=spec.y_target,
            )
            score = classifier_guided_score(score, np.where(latent3, grad, 0.0),
                                            spec.alpha)
        return score

    return score_fn


# --- behavior classifier ---------------------------------------------------


class CutInClassifier:
    """Two hidden layers of 128 units; consumes the diffused trajectory pair,
    per-step validity and the noise level; emits one logit."""

    def __init__(self, horizon, hidden=128, rng=None, params=None):
        self.horizon = int(horizon)
        self.hidden = int(hidden)
        d_in = self.input_dim
        if params is not None:
            self.params = params
            return
        rng = rng or np.random.default_rng(0)
        h = self.hidden
        self.params = {
            "w0": rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, h)),
            "b0": np.zeros(h),
            "w1": rng.normal(0.0, np.sqrt(2.0 / h), (h, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, np.sqrt(1.0 / h), (h, 1)),
            "b2": np.zeros(1),
        }

    @property
    def input_dim(self):
        return 8 * self.horizon + 1

    def build_input(self, ego_states, other_states, ego_valid, other_valid, tau):
        """Flatten one pair into (N, 8T+1); states zeroed where invalid."""
        ego = np.where(ego_valid[..., None], ego_states, 0.0)
        oth = np.where(other_valid[..., None], other_states, 0.0)
        n = ego.shape[0]
        tau_feat = 0.25 * np.log(np.maximum(np.broadcast_to(tau, (n,)), 1e-12))
        return np.concatenate(
            [
                ego.reshape(n, -1),
                oth.reshape(n, -1),
                ego_valid.reshape(n, -1).astype(np.float64),
                other_valid.reshape(n, -1).astype(np.float64),
                tau_feat[:, None],
            ],
            axis=1,
        )

    def logits(self, x_in, want_cache=False):
        p = self.params
        h0 = x_in @ p["w0"] + p["b0"]
        a0 = np.maximum(h0, 0.0)
        h1 = a0 @ p["w1"] + p["b1"]
        a1 = np.maximum(h1, 0.0)
        out = (a1 @ p["w2"] + p["b2"]).reshape(-1)
        if want_cache:
            return out, (x_in, h0 > 0, a0, h1 > 0, a1)
        return out

    def input_grad(self, x_in):
        """d logit / d input, shape like x_in (pure linear/ReLU chain)."""
        p = self.params
        _, cache = self.logits(x_in, want_cache=True)
        _, m0, _, m1, _ = cache
        d = np.repeat(p["w2"].T, x_in.shape[0], axis=0)  # (N, h)
        d = (d * m1) @ p["w1"].T
        d = (d * m0) @ p["w0"].T
        return d

    def backward(self, d_logit, cache):
        x_in, m0, a0, m1, a1 = cache
        g = {}
        d = d_logit[:, None]  # (N, 1)
        g["w2"] = a1.T @ d
        g["b2"] = d.sum(axis=0)
        d = (d @ self.params["w2"].T) * m1
        g["w1"] = a0.T @ d
        g["b1"] = d.sum(axis=0)
        d = (d @ self.params["w1"].T) * m0
        g["w0"] = x_in.T @ d
        g["b0"] = d.sum(axis=0)
        return g

    def prob(self, x_in):
        return 1.0 / (1.0 + np.exp(-self.logits(x_in)))


def classifier_grad_field(classifier, x, valid, tau, pair, y_target=1):
    """grad_x log p(y | x_tau) mapped onto the scene grid.

    x: (B, A, T, 3); only the pair's slots receive non-zero gradient.
    """
    ego_i, oth_i = pair
    B, A, T, _ = x.shape
    ev = np.broadcast_to(valid[:, ego_i], (B, T))
    ov = np.broadcast_to(valid[:, oth_i], (B, T))
    x_in = classifier.build_input(x[:, ego_i], x[:, oth_i], ev, ov, tau)
    logit = classifier.logits(x_in)
    dgrad = classifier.input_grad(x_in)
    # d log p(y|x) / d logit: y=1 -> sigmoid(-l); y=0 -> -sigmoid(l)
    if y_target == 1:
        factor = 1.0 / (1.0 + np.exp(logit))
    else:
        factor = -1.0 / (1.0 + np.exp(-logit))
    dgrad = dgrad * factor[:, None]
    out = np.zeros_like(x)
    out[:, ego_i] = (dgrad[:, : 3 * T]).reshape(B, T, 3) * ev[..., None]
    out[:, oth_i] = (dgrad[:, 3 * T : 6 * T]).reshape(B, T, 3) * ov[..., None]
    return out


@dataclass
class ClassifierTrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.2
    t_obs: int = 10


def train_cutin_classifier(inputs_clean, labels, latent_step_mask, dconfig,
                           config=None):
    """Train on noised pairs across tau ~ p_train; returns (clf, report).

    inputs_clean: list/array of dicts from ``CutInClassifier.build_input``
    precursors - here: (N, T, 3) ego, (N, T, 3) other, (N, T) ego_valid,
    (N, T) other_valid stacked in a dict of arrays (already in the scaled
    pair-ego frame). latent_step_mask: (T,) bool, steps that get noised
    (the guidance-time latent horizon). Both classes must be present.
    """
    cfg = config or ClassifierTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    ego = np.asarray(inputs_clean["ego"], dtype=np.float64)
    oth = np.asarray(inputs_clean["other"], dtype=np.float64)
    ev = np.asarray(inputs_clean["ego_valid"], dtype=bool)
    ov = np.asarray(inputs_clean["other_valid"], dtype=bool)
    y = np.asarray(labels, dtype=np.float64)
    if y.min() == y.max():
        raise ValueError("classifier training needs both classes")
    N, T, _ = ego.shape

    n_hold = max(int(N * cfg.holdout_fraction), 2)
    perm = rng.permutation(N)
    hold, tr = perm[:n_hold], perm[n_hold:]
    if y[tr].min() == y[tr].max() or y[hold].min() == y[hold].max():
        raise ValueError("degenerate class split; need both classes on each side")

    clf = CutInClassifier(T, rng=rng)
    from .net.training import AdamOptimizer

    opt = AdamOptimizer(clf.params, cfg.lr)
    pos = tr[y[tr] == 1]
    neg = tr[y[tr] == 0]
    half = cfg.batch_size // 2
    noise_cols = latent_step_mask[None, :, None]

    def noisy_input(idx, taus):
        e = ego[idx] + taus[:, None, None] * rng.standard_normal(ego[idx].shape) * noise_cols
        o = oth[idx] + taus[:, None, None] * rng.standard_normal(oth[idx].shape) * noise_cols
        return clf.build_input(e, o, ev[idx], ov[idx], taus)

    steps = max(1, cfg.epochs * (len(tr) // max(cfg.batch_size, 1)))
    for _ in range(steps):
        idx = np.concatenate(
            [rng.choice(pos, half, replace=True), rng.choice(neg, half, replace=True)]
        )
        taus = sample_train_taus(dconfig, idx.size, rng)
        x_in = noisy_input(idx, taus)
        logit, cache = clf.logits(x_in, want_cache=True)
        target = y[idx]
        p = 1.0 / (1.0 + np.exp(-logit))
        d_logit = (p - target) / idx.size
        grads = clf.backward(d_logit, cache)
        opt.step(clf.params, grads)

    # held-out accuracy near tau=0 and across tau bins
    report = {"tau_bins": [], "accuracy": []}
    for tau in (0.01, 0.1, 0.5, 1.0, 2.0):
        taus = np.full(hold.size, tau)
        x_in = noisy_input(hold, taus)
        pred = clf.logits(x_in) > 0
        acc = float((pred == (y[hold] == 1)).mean())
        report["tau_bins"].append(tau)
        report["accuracy"].append(acc)
    report["holdout_accuracy_low_tau"] = report["accuracy"][0]
    return clf, report
