import numpy as np
import pytest

from scenediff.batching import SceneBatch, normalize_entry, pack_scenes
from scenediff.diffusion import DiffusionConfig, perturb, masked_mse
from scenediff.net import NetworkConfig, ScoreNetwork, grad_check
from scenediff.net.config import (
    DIFFUSION_TIME_PERIODS,
    SCENARIO_TIME_PERIODS,
    STATE_PERIODS,
)
from scenediff.net.encoding import encoding_periods, sinusoid_encode
from scenediff.net.network import NetDenoiser
from scenediff.net.training import (
    TrainConfig,
    clip_gradients,
    global_grad_norm,
    load_checkpoint,
    save_checkpoint,
    train,
    training_step,
)
from scenediff.scene import FeatureScales, TaskDistribution, sample_observation_mask
from scenediff.worldgen import SynthWorldConfig, generate_world


def tiny_batch(seed=3, n=2, horizon=8):
    rng = np.random.default_rng(seed)
    cfg = SynthWorldConfig(agent_count=(2, 3), horizon=horizon)
    dist = TaskDistribution(t_obs=3)
    scales = FeatureScales(0.05, 0.7)
    entries = []
    worlds = []
    for _ in range(n):
        w = generate_world(cfg, rng)
        m = sample_observation_mask(dist, w.scene, rng)
        e, _ = normalize_entry(w.scene, m, w.context, w.roadgraph, 0, 3, scales)
        entries.append(e)
        worlds.append(w)
    return pack_scenes(entries), worlds


@pytest.fixture(scope="module")
def tiny_net():
    return ScoreNetwork(NetworkConfig.tiny(), rng=np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny_denoiser(tiny_net):
    return NetDenoiser(tiny_net, DiffusionConfig())


class TestEncoding:
    def test_table_period_defaults(self):
        cfg = NetworkConfig.desk()
        assert (cfg.state_spec.min_period, cfg.state_spec.max_period) == STATE_PERIODS == (0.01, 10.0)
        assert (cfg.time_spec.min_period, cfg.time_spec.max_period) == SCENARIO_TIME_PERIODS == (1.0, 100.0)
        assert (cfg.tau_spec.min_period, cfg.tau_spec.max_period) == DIFFUSION_TIME_PERIODS == (0.1, 10000.0)

    def test_periods_geometric(self):
        spec = NetworkConfig.desk().state_spec
        p = encoding_periods(spec)
        assert p[0] == pytest.approx(spec.min_period)
        assert p[-1] == pytest.approx(spec.max_period)
        ratios = p[1:] / p[:-1]
        assert np.allclose(ratios, ratios[0])

    def test_encode_shape_and_determinism(self):
        spec = NetworkConfig.desk().state_spec
        v = np.random.default_rng(0).normal(size=(4, 5))
        e1 = sinusoid_encode(v, spec)
        e2 = sinusoid_encode(v.copy(), spec)
        assert e1.shape == (4, 5, spec.dim)
        assert np.array_equal(e1, e2)
        assert np.all(np.abs(e1) <= 1.0)

    def test_noise_levels_distinguished(self):
        # the tau channel sees c_noise = ln(tau)/4; encodings must separate
        # noise levels across the training range
        cfg = NetworkConfig.desk()
        taus = np.array([0.01, 0.1, 1.0, 10.0, 80.0])
        enc = sinusoid_encode(0.25 * np.log(taus), cfg.tau_spec)
        d = np.linalg.norm(enc[:, None] - enc[None, :], axis=-1)
        off = d[~np.eye(5, dtype=bool)]
        assert off.min() > 0.05

    def test_observed_slot_latent_channel_is_zero_encoding(self, tiny_net):
        batch, _ = tiny_batch()
        B, A, T, _ = batch.x0.shape
        x = batch.x0 + 1.0
        latent = batch.latent()[..., None]
        x_lat_in = np.where(latent, x, 0.0)
        feats = tiny_net.encode_inputs(
            x_lat_in, np.where(batch.observed[..., None], x, 0.0), batch.ctx,
            np.full(B, 0.7),
        )
        enc_dim = tiny_net.config.state_enc_dim
        zero_enc = sinusoid_encode(np.zeros(3), tiny_net.config.state_spec).ravel()
        obs_idx = np.argwhere(batch.observed)
        i = tuple(obs_idx[0])
        assert np.allclose(feats[i[0], i[1], i[2], : 3 * enc_dim], zero_enc)

    def test_identical_slots_identical_features(self, tiny_net):
        batch, _ = tiny_batch()
        B = batch.x0.shape[0]
        feats = tiny_net.encode_inputs(
            np.zeros_like(batch.x0), np.zeros_like(batch.x0),
            np.zeros_like(batch.ctx), np.full(B, 1.0),
        )
        # same t, everything else equal -> identical features across agents
        assert np.allclose(feats[0, 0, 3], feats[0, 1, 3])


def forward_tiny(net, batch, tau=1.0):
    B = batch.x0.shape[0]
    latent = batch.latent()[..., None]
    x = perturb(batch.x0, batch.latent(), np.full(B, tau), np.random.default_rng(0))
    x_lat_in = np.where(latent, x, 0.0)
    x_obs_in = np.where(batch.observed[..., None], x, 0.0)
    return net.forward(
        x_lat_in, x_obs_in, batch.valid, batch.ctx, np.full(B, tau),
        batch.map_feat, batch.map_valid,
    )


class TestForwardInvariances:
    def test_agent_permutation_equivariance(self, tiny_net):
        batch, _ = tiny_batch(seed=5)
        out = forward_tiny(tiny_net, batch)
        perm = np.random.default_rng(1).permutation(batch.x0.shape[1])
        pbatch = SceneBatch(
            batch.x0[:, perm], batch.valid[:, perm], batch.observed[:, perm],
            batch.ctx[:, perm], batch.map_feat, batch.map_valid,
        )
        pout = forward_tiny(tiny_net, pbatch)
        assert np.abs(pout - out[:, perm]).max() < 1e-6

    def test_polyline_order_invariance(self, tiny_net):
        batch, _ = tiny_batch(seed=6)
        out = forward_tiny(tiny_net, batch)
        perm = np.random.default_rng(2).permutation(batch.map_feat.shape[1])
        pbatch = SceneBatch(
            batch.x0, batch.valid, batch.observed, batch.ctx,
            batch.map_feat[:, perm], batch.map_valid[:, perm],
        )
        pout = forward_tiny(tiny_net, pbatch)
        assert np.abs(pout - out).max() < 1e-6

    def test_duplicated_polylines_no_effect(self, tiny_net):
        batch, _ = tiny_batch(seed=7)
        out = forward_tiny(tiny_net, batch)
        dbatch = SceneBatch(
            batch.x0, batch.valid, batch.observed, batch.ctx,
            np.concatenate([batch.map_feat, batch.map_feat], axis=1),
            np.concatenate([batch.map_valid, batch.map_valid], axis=1),
        )
        dout = forward_tiny(tiny_net, dbatch)
        assert np.abs(dout - out).max() < 1e-6

    def test_padding_invariance(self, tiny_net):
        batch, _ = tiny_batch(seed=8)
        out = forward_tiny(tiny_net, batch)
        B, A, T, _ = batch.x0.shape
        pad_a = 2
        pbatch = SceneBatch(
            np.concatenate([batch.x0, np.zeros((B, pad_a, T, 3))], axis=1),
            np.concatenate([batch.valid, np.zeros((B, pad_a, T), bool)], axis=1),
            np.concatenate([batch.observed, np.zeros((B, pad_a, T), bool)], axis=1),
            np.concatenate([batch.ctx, np.zeros((B, pad_a, T, 6))], axis=1),
            np.concatenate([batch.map_feat, np.zeros((B, 3, 30))], axis=1),
            np.concatenate([batch.map_valid, np.zeros((B, 3), bool)], axis=1),
        )
        pout = forward_tiny(tiny_net, pbatch)
        assert np.abs(pout[:, :A] - out).max() < 1e-6

    def test_all_invalid_column_no_nan(self, tiny_net):
        batch, _ = tiny_batch(seed=9)
        batch.valid[:, :, 4] = False  # nobody tracked at t=4
        batch.observed[:, :, 4] = False
        out = forward_tiny(tiny_net, batch)
        assert np.all(np.isfinite(out))


class TestDenoiser:
    def test_zero_network_reduces_to_skip(self, tiny_denoiser):
        batch, _ = tiny_batch(seed=10)

        class ZeroNet:
            config = tiny_denoiser.network.config
            params = tiny_denoiser.network.params

            def forward(self, *a, **k):
                return np.zeros(batch.x0.shape)

        den = NetDenoiser(ZeroNet(), tiny_denoiser.dconfig)
        tau = 0.8
        x = batch.x0 + 0.3
        D = den.denoise(batch, x, np.array([tau] * batch.x0.shape[0]))
        co_skip = 0.25 / (tau**2 + 0.25)
        latent = batch.latent()[..., None]
        assert np.allclose(D[latent.repeat(3, -1)], (co_skip * x)[latent.repeat(3, -1)])
        obs3 = batch.observed[..., None].repeat(3, -1)
        assert np.array_equal(D[obs3], x[obs3])
        invalid = ~batch.valid[..., None].repeat(3, -1)
        assert np.all(D[invalid] == 0.0)

    def test_small_tau_passthrough(self, tiny_denoiser):
        batch, _ = tiny_batch(seed=11)
        x = batch.x0 + 0.01
        D = tiny_denoiser.denoise(batch, x, np.full(batch.x0.shape[0], 1e-7))
        latent = batch.latent()[..., None].repeat(3, -1)
        assert np.abs(D[latent] - x[latent]).max() < 1e-5


class TestGradients:
    def test_linear_stub_exact(self):
        # single linear layer driven through the same loss machinery
        from scenediff.net import layers

        rng = np.random.default_rng(0)
        params = {}
        layers.linear_init(params, "lin", 4, 3, rng)
        x = rng.normal(size=(10, 4))
        target = rng.normal(size=(10, 3))

        def loss_fn():
            y, xc = layers.linear_fwd(params, "lin", x)
            return 0.5 * ((y - target) ** 2).sum(), y, xc

        loss, y, xc = loss_fn()
        grads = {}
        layers.linear_bwd(params, grads, "lin", y - target, xc)
        for name in ("lin.w", "lin.b"):
            flat = params[name].reshape(-1)
            gflat = np.asarray(grads[name]).reshape(-1)
            for j in range(flat.size):
                h = 1e-7 * max(1.0, abs(flat[j]))
                orig = flat[j]
                flat[j] = orig + h
                lp = loss_fn()[0]
                flat[j] = orig - h
                lm = loss_fn()[0]
                flat[j] = orig
                fd = (lp - lm) / (2 * h)
                rel = abs(fd - gflat[j]) / max(abs(fd) + abs(gflat[j]), 1e-10)
                assert rel < 1e-8

    def test_full_tiny_network(self, tiny_denoiser):
        batch, _ = tiny_batch(seed=12)
        worst, report = grad_check(
            tiny_denoiser, batch, np.random.default_rng(5), entries_per_tensor=4
        )
        assert worst < 1e-4

    def test_zero_loss_zero_grads(self, tiny_denoiser):
        batch, _ = tiny_batch(seed=13)
        B = batch.x0.shape[0]
        taus = np.full(B, 0.5)
        D, cache = tiny_denoiser.denoise(batch, batch.x0, taus, want_cache=True)
        # craft a zero-loss instance: target equals the model output on latents
        latent = batch.latent()
        x0_star = np.where(latent[..., None], D, batch.x0)
        loss, dD = masked_mse(D, x0_star, latent)
        assert loss == 0.0
        grads = tiny_denoiser.backward(dD, cache)
        assert max(np.abs(g).max() for g in grads.values()) == 0.0


class TestTraining:
    def test_loss_decreases_and_grads_clipped(self, desk_corpus):
        dist = TaskDistribution(t_obs=10)
        net = ScoreNetwork(NetworkConfig.tiny(), rng=np.random.default_rng(2))
        norms = []
        tc = TrainConfig(epochs=0.008, batch_size=8, seed=1, log_every=50)
        sub = [desk_corpus[i] for i in range(160)]

        class Mini:
            def __len__(self):
                return len(sub)

            def __getitem__(self, i):
                return sub[i]

        _, trace = train(net, Mini(), dist, desk_corpus.scales,
                         DiffusionConfig(), tc, grad_norm_log=norms)
        assert len(trace) >= 4
        assert max(norms) <= 5.0 + 1e-6

    def test_fixed_seed_reproducible_trace(self, desk_corpus):
        dist = TaskDistribution(t_obs=10)
        sub = [desk_corpus[i] for i in range(64)]

        class Mini:
            def __len__(self):
                return len(sub)

            def __getitem__(self, i):
                return sub[i]

        traces = []
        for _ in range(2):
            net = ScoreNetwork(NetworkConfig.tiny(), rng=np.random.default_rng(4))
            tc = TrainConfig(epochs=0.06, batch_size=8, seed=9)
            _, trace = train(net, Mini(), dist, desk_corpus.scales,
                             DiffusionConfig(), tc)
            traces.append(trace)
        assert traces[0] == traces[1]

    def test_clip_gradients_norm(self):
        grads = {"a": np.full(4, 10.0), "b": np.full(2, -10.0)}
        norm = clip_gradients(grads, 5.0)
        assert norm == pytest.approx(np.sqrt(600.0))
        assert global_grad_norm(grads) == pytest.approx(5.0)

    def test_checkpoint_roundtrip(self, tmp_path, tiny_net):
        from scenediff.scene import TaskDistribution

        path = tmp_path / "ckpt.npz"
        dist = TaskDistribution(t_obs=4)
        scales = FeatureScales(0.03, 0.5)
        save_checkpoint(path, tiny_net, DiffusionConfig(), scales, dist,
                        trace=[1.0, 0.5], train_config=TrainConfig())
        net2, dcfg, scales2, dist2, trace = load_checkpoint(path)
        assert net2.config == tiny_net.config
        assert dcfg.sigma_max == 80.0
        assert scales2.pos_scale == pytest.approx(0.03)
        assert dist2.t_obs == 4
        assert list(trace) == [1.0, 0.5]
        for k, v in tiny_net.params.items():
            assert np.array_equal(net2.params[k], v)

    def test_checkpoint_shape_validation(self, tmp_path, tiny_net):
        import json

        path = str(tmp_path / "bad.npz")
        dist = TaskDistribution(t_obs=4)
        save_checkpoint(path, tiny_net, DiffusionConfig(), FeatureScales(), dist)
        data = dict(np.load(path, allow_pickle=False))
        data["param/in_mlp.l0.w"] = np.zeros((2, 2))
        np.savez(path, **data)
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(path)
