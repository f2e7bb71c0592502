"""Command-line interface: gen, train, sample, edit, eval, mine-cutins,
train-classifier, serve, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("scenediff")


def _load_exp(args):
    from .experiment import ExperimentConfig

    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    return ExperimentConfig()


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    log.info("wrote %s", path)


def cmd_gen(args):
    from .dataio import generate_corpus, save_corpus

    exp = _load_exp(args)
    n = args.scenes or exp.n_scenes
    seed = exp.seed if args.seed is None else args.seed
    out = args.out or exp.corpus_dir
    corpus = generate_corpus(exp.world_config(), n, seed, t_obs=exp.t_obs)
    save_corpus(out, corpus)
    log.info("generated %d scenes into %s (seed %d)", n, out, seed)


def cmd_train(args):
    from .dataio import load_corpus
    from .net import ScoreNetwork
    from .net.training import load_checkpoint, train

    exp = _load_exp(args)
    corpus = load_corpus(args.corpus or exp.corpus_dir)
    dist = exp.task_distribution()
    tconfig = exp.train_config()
    if args.epochs is not None:
        tconfig.epochs = args.epochs
    if args.seed is not None:
        tconfig.seed = args.seed
    out = args.out or exp.checkpoint
    if args.resume and os.path.exists(out):
        net, dcfg, scales, dist, _ = load_checkpoint(out)
        log.info("resuming from %s", out)
    else:
        net = ScoreNetwork(exp.network_config(), rng=np.random.default_rng(tconfig.seed))
        dcfg = exp.diffusion_config()
        scales = corpus.scales
    _, trace = train(net, corpus, dist, scales, dcfg, tconfig, checkpoint_path=out)
    log.info("final smoothed loss %.5f", float(np.mean(trace[-50:])))


def _load_model(path):
    from .net.network import NetDenoiser
    from .net.training import load_checkpoint

    net, dcfg, scales, dist, _ = load_checkpoint(path)
    return NetDenoiser(net, dcfg), scales, dist


def _scene_inputs(args):
    from .dataio import load_corpus, map_from_json, scene_from_json

    if args.scene:
        with open(args.scene) as f:
            scene, ctx, ego = scene_from_json(json.load(f))
        with open(args.map) as f:
            graph = map_from_json(json.load(f))
        return scene, ctx, graph, {"ego_index": ego}
    corpus = load_corpus(args.corpus)
    return corpus[args.index]


def _mask_from_arg(scene, spec_text, t_obs):
    from .scene import ObservationMask

    if not spec_text or spec_text == "predictive":
        return ObservationMask.predictive(scene, t_obs)
    if spec_text.startswith("predictive:"):
        return ObservationMask.predictive(scene, int(spec_text.split(":", 1)[1]))
    with open(spec_text) as f:
        grid = np.asarray(json.load(f)["observed"], dtype=bool)
    mask = ObservationMask(grid)
    mask.validate_against(scene)
    return mask


def cmd_sample(args):
    from .dataio import scene_to_json
    from .guidance import GuidanceSpec
    from .pipeline import goal_guidance, sample_world
    from .scene import SceneTensor

    exp = _load_exp(args)
    den, scales, dist = _load_model(args.checkpoint or exp.checkpoint)
    scene, ctx, graph, meta = _scene_inputs(args)
    t_obs = args.t_obs or exp.t_obs
    mask = _mask_from_arg(scene, args.mask, t_obs)

    guidance = None
    rng = np.random.default_rng(args.seed)
    if args.goals:
        guidance, _ = goal_guidance(
            scene, mask, rng, goal_noise_std=args.goal_noise,
            cfg_weight=args.guidance_weight,
        )
    samples, _ = sample_world(
        den, scene, mask, ctx, graph, meta["ego_index"], t_obs, scales,
        num_samples=args.num_samples, num_steps=args.steps, seed=args.seed,
        guidance=guidance,
    )
    docs = [
        scene_to_json(SceneTensor(s, scene.valid, scene.dt), ctx, meta["ego_index"])
        for s in samples
    ]
    _write_json(args.out, {"seed": args.seed, "steps": args.steps, "samples": docs})


def cmd_edit(args):
    from .dataio import scene_to_json
    from .service import run_edit

    exp = _load_exp(args)
    den, scales, dist = _load_model(args.checkpoint or exp.checkpoint)
    scene, ctx, graph, meta = _scene_inputs(args)
    t_obs = args.t_obs or exp.t_obs
    mask = _mask_from_arg(scene, args.mask, t_obs)
    edited = run_edit(
        den, scales, scene, mask, ctx, graph, meta["ego_index"], t_obs,
        tau_edit=args.tau_edit, seed=args.seed, num_steps=args.steps,
    )
    _write_json(
        args.out,
        {"seed": args.seed, "tau_edit": args.tau_edit,
         "edited": scene_to_json(edited, ctx, meta["ego_index"])},
    )


def cmd_eval(args):
    exp = _load_exp(args)
    if args.analytic:
        from .diffusion import DiffusionConfig, GaussianWorldOracle, heun_sample

        dcfg = DiffusionConfig()
        oracle = GaussianWorldOracle(dcfg.sigma_data)
        B = args.analytic_samples
        obs = np.zeros((B, 1, 1), dtype=bool)
        val = np.ones((B, 1, 1), dtype=bool)
        out = heun_sample(
            oracle.score, np.zeros((B, 1, 1, 3)), obs, val, dcfg,
            np.random.default_rng(args.seed), num_steps=args.steps,
        )
        report = {
            "steps": args.steps,
            "mean_abs": float(abs(out.mean())),
            "std": float(out.std()),
            "std_rel_err": float(abs(out.std() - dcfg.sigma_data) / dcfg.sigma_data),
        }
    else:
        from .dataio import load_corpus
        from .pipeline import evaluate_corpus

        den, scales, dist = _load_model(args.checkpoint or exp.checkpoint)
        corpus = load_corpus(args.corpus or exp.corpus_dir)
        n = len(corpus)
        k = min(args.num_scenes, n)
        indices = np.arange(n - k, n)
        gmm = exp.gmm_config()
        report = evaluate_corpus(
            den, corpus, indices, args.t_obs or exp.t_obs, gmm,
            num_steps=args.steps, seed=args.seed,
        )
    _write_json(args.out, report)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_mine(args):
    from .dataio import load_corpus
    from .mining import mine_cutins, write_examples_jsonl

    exp = _load_exp(args)
    corpus = load_corpus(args.corpus or exp.corpus_dir)
    idx = range(len(corpus)) if args.limit is None else range(min(args.limit, len(corpus)))
    worlds = (corpus.world(i) for i in idx)
    examples = mine_cutins(worlds, pairs=args.pairs)
    write_examples_jsonl(args.out, examples)
    pos = sum(e.label for e in examples)
    log.info("mined %d examples (%d positive) -> %s", len(examples), pos, args.out)


def cmd_train_classifier(args):
    from .dataio import load_corpus
    from .guidance import ClassifierTrainConfig, train_cutin_classifier
    from .mining import read_examples_jsonl
    from .service import classifier_training_arrays, save_classifier

    exp = _load_exp(args)
    corpus = load_corpus(args.corpus or exp.corpus_dir)
    examples = read_examples_jsonl(args.examples)
    t_obs = args.t_obs or exp.t_obs
    arrays, labels, latent_steps = classifier_training_arrays(
        examples, corpus.scales, t_obs
    )
    cfg = ClassifierTrainConfig(seed=args.seed, t_obs=t_obs, epochs=args.epochs)
    clf, report = train_cutin_classifier(
        arrays, labels, latent_steps, exp.diffusion_config(), cfg
    )
    save_classifier(args.out, clf, report)
    log.info("classifier held-out accuracy (low tau): %.3f",
             report["holdout_accuracy_low_tau"])


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    exp = _load_exp(args)
    app = create_app(
        checkpoint=args.checkpoint or exp.checkpoint,
        corpus_dir=args.corpus or exp.corpus_dir,
        classifier=args.classifier,
    )
    port = args.port or int(os.environ.get("SCENEDIFF_PORT", "8008"))
    uvicorn.run(app, host=args.host, port=port)


def cmd_bench(args):
    from benchmarks.bench_backends import main as bench_main  # pragma: no cover

    bench_main()  # pragma: no cover


def build_parser():
    p = argparse.ArgumentParser(
        prog="scenediff",
        description="Joint traffic-scenario generation with a diffusion model",
    )
    p.add_argument("--config", help="experiment config JSON", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--out", default=None)
    g.add_argument("--scenes", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--corpus", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--epochs", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    def scene_args(sp):
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--corpus", default=None)
        sp.add_argument("--index", type=int, default=0)
        sp.add_argument("--scene", default=None, help="scene JSON path")
        sp.add_argument("--map", default=None, help="map JSON path")
        sp.add_argument("--mask", default="predictive")
        sp.add_argument("--t-obs", dest="t_obs", type=int, default=None)
        sp.add_argument("--steps", type=int, default=50)
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="draw joint scene samples")
    scene_args(s)
    s.add_argument("--num-samples", type=int, default=1)
    s.add_argument("--goals", action="store_true",
                   help="goal-conditioned via classifier-free guidance")
    s.add_argument("--goal-noise", type=float, default=1.0)
    s.add_argument("--guidance-weight", type=float, default=1.0)
    s.add_argument("--out", default="samples.json")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("edit", help="stochastic-differential scenario edit")
    scene_args(e)
    e.add_argument("--tau-edit", dest="tau_edit", type=float, default=0.8)
    e.add_argument("--out", default="edited.json")
    e.set_defaults(func=cmd_edit)

    ev = sub.add_parser("eval", help="forecasting metrics on held-out scenes")
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--corpus", default=None)
    ev.add_argument("--num-scenes", type=int, default=32)
    ev.add_argument("--t-obs", dest="t_obs", type=int, default=None)
    ev.add_argument("--steps", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--analytic", action="store_true",
                    help="closed-form world moment check instead of a model")
    ev.add_argument("--analytic-samples", type=int, default=10000)
    ev.add_argument("--out", default="report.json")
    ev.set_defaults(func=cmd_eval)

    m = sub.add_parser("mine-cutins", help="mine labeled cut-in pairs")
    m.add_argument("--corpus", default=None)
    m.add_argument("--pairs", choices=("all", "ego"), default="all")
    m.add_argument("--limit", type=int, default=None)
    m.add_argument("--out", default="cutins.jsonl")
    m.set_defaults(func=cmd_mine)

    tc = sub.add_parser("train-classifier", help="train the cut-in classifier")
    tc.add_argument("--corpus", default=None)
    tc.add_argument("--examples", required=True)
    tc.add_argument("--t-obs", dest="t_obs", type=int, default=None)
    tc.add_argument("--epochs", type=int, default=40)
    tc.add_argument("--seed", type=int, default=0)
    tc.add_argument("--out", default="classifier.npz")
    tc.set_defaults(func=cmd_train_classifier)

    sv = sub.add_parser("serve", help="HTTP JSON service")
    sv.add_argument("--checkpoint", default=None)
    sv.add_argument("--corpus", default=None)
    sv.add_argument("--classifier", default=None)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=None)
    sv.set_defaults(func=cmd_serve)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        sys.exit(2)


if __name__ == "__main__":
    main()
