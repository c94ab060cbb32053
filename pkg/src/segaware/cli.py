"""Command-line interface.

Subcommands: gen-data, train, eval, ablate-k, permute-exp,
downstream-seg, significance, niqe-fit. A TOML or JSON config file
(--config) carries TrainConfig fields; explicit flags override it.
Outputs land under --out: results.csv / rows.csv / history.csv /
meta.json and checkpoints in ckpt/*.usaid.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as exp
from . import niqe as niqe_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_shapes_corpus, load_corpus, load_image_folder, save_corpus
from .model import build_model, load_state, save_state
from .training import TrainConfig, train


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    try:
        import tomllib  # py311+
    except ImportError:
        import tomli as tomllib
    return tomllib.loads(text)


def make_config(args, **overrides) -> TrainConfig:
    fields = {}
    if getattr(args, "config", None):
        fields.update(load_config_file(args.config))
    if getattr(args, "seed", None) is not None:
        fields["seed"] = args.seed
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**fields)


def load_any_corpus(path):
    """Corpus directory (with meta.json) or a plain image folder."""
    p = Path(path)
    if (p / "meta.json").exists():
        return load_corpus(p)
    return load_image_folder(p)


def _parse_floats(text):
    return [float(x) for x in text.split(",") if x]


def _parse_ints(text):
    return [int(x) for x in text.split(",") if x]


def _load_denoisers(args):
    dens = {}
    for ck in args.ckpt or []:
        state, _ = load_state(ck)
        dens[Path(ck).stem] = state.denoiser
    if args.identity:
        dens["identity"] = "identity"
    if getattr(args, "oracle", False):
        dens["oracle"] = "oracle"
    if not dens:
        raise SystemExit("no denoisers given: pass --ckpt and/or --identity")
    return dens


def _maybe_niqe_model(args):
    if getattr(args, "niqe_model", None):
        tensors, _ = load_checkpoint(args.niqe_model)
        return niqe_mod.model_from_tensors(tensors)
    return None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    h, w = (int(x) for x in args.size.split("x"))
    corpus = generate_shapes_corpus(args.n, (h, w), args.k,
                                    seed=args.seed or 0, split=args.split)
    save_corpus(corpus, _out(args), seed=args.seed or 0)
    print(f"wrote {len(corpus)} images to {args.out}")


def cmd_train(args):
    cfg = make_config(args, mode=args.mode)
    corpus = load_any_corpus(args.data)
    val = load_any_corpus(args.val_data) if args.val_data else None
    state, history = train(cfg, corpus, val_corpus=val)
    out = _out(args)
    (out / "ckpt").mkdir(exist_ok=True)
    ck = out / "ckpt" / f"{cfg.mode}.usaid"
    save_state(ck, state, {"train_config": cfg.to_dict(),
                           "epoch": cfg.epochs, "seed": cfg.seed})
    history.to_csv(out / "history.csv")
    (out / "meta.json").write_text(json.dumps(
        {"train_config": cfg.to_dict(), "checkpoint": str(ck)}, indent=1))
    final = history.records[-1] if history.records else None
    if final:
        print(f"trained {cfg.mode}: val_psnr={final.val_psnr:.2f} "
              f"val_entropy={final.val_entropy:.4f} -> {ck}")
    else:
        print(f"saved initialization (0 epochs) -> {ck}")


def cmd_eval(args):
    testset = load_any_corpus(args.data)
    dens = _load_denoisers(args)
    res = exp.run_denoising_eval(dens, testset, _parse_floats(args.sigmas),
                                 seed=args.seed or 0,
                                 niqe_model=_maybe_niqe_model(args),
                                 k_classes=args.k)
    exp.write_result(res, _out(args))
    for agg in res.aggregates:
        print(agg)


def cmd_ablate_k(args):
    corpus = load_any_corpus(args.data)
    testset = load_any_corpus(args.test_data) if args.test_data else corpus
    cfg = make_config(args, mode="usaid")
    res = exp.run_k_ablation(_parse_ints(args.ks), cfg, corpus, testset,
                             seed=args.seed or 0,
                             niqe_model=_maybe_niqe_model(args))
    exp.write_result(res, _out(args))
    for agg in res.aggregates:
        print(agg)


def cmd_permute_exp(args):
    corpus = load_any_corpus(args.data)
    cfg = make_config(args, mode="seg_supervised",
                      k_classes=corpus.k_classes,
                      train_embedding=True, record_steps=True)
    if args.thresholds == "auto":
        thresholds = [0.5 * np.log(corpus.k_classes)]
    else:
        thresholds = _parse_floats(args.thresholds)
    res = exp.run_permutation_experiment(cfg, corpus, thresholds,
                                         seeds=_parse_ints(args.seeds))
    out = _out(args)
    exp.write_result(res, out)
    curve_lines = ["arm,seed,step,ce"]
    for (arm, s), curve in res.extras["curves"].items():
        curve_lines += [f"{arm},{s},{i},{v:.6g}" for i, v in enumerate(curve)]
    (out / "curves.csv").write_text("\n".join(curve_lines) + "\n")
    th_lines = ["arm,tau,seed,steps"]
    for arm, by_t in res.extras["steps_to_threshold"].items():
        for tau, steps in by_t.items():
            th_lines += [f"{arm},{tau:.6g},{s},{exp._fmt(v)}"
                         for s, v in zip(res.meta["seeds"], steps)]
    (out / "thresholds.csv").write_text("\n".join(th_lines) + "\n")
    print(json.dumps(res.meta["median_steps"], indent=1))
    if args.plots:
        _plot_curves(res, out)


def cmd_downstream_seg(args):
    corpus = load_any_corpus(args.data)
    dens = _load_denoisers(args)
    seg_cfg = make_config(args, mode="seg_supervised",
                          k_classes=corpus.k_classes) if args.config else None
    res = exp.run_downstream_seg(dens, corpus, sigma=args.sigma,
                                 seed=args.seed or 0, seg_cfg=seg_cfg)
    res.extras.pop("segmenter", None)
    exp.write_result(res, _out(args))
    for agg in res.aggregates:
        print(agg)


def cmd_significance(args):
    testset = load_any_corpus(args.data)
    dens = _load_denoisers(args)
    rep = exp.run_significance(dens, testset, seed=args.seed or 0,
                               sigma=args.sigma, n_noise=args.n_noise,
                               metric=args.metric)
    out = _out(args)
    rows = exp.significance_to_rows(rep, sigma=args.sigma)
    exp.rows_to_csv(rows, out / "results.csv")
    payload = {
        "n_noise": rep.n_noise,
        "variance_note": "per-run variance of per-draw mean scores over "
                         "noise seeds",
        "variances": rep.variances,
        "pairs": {f"{a}-vs-{b}": v for (a, b), v in rep.pairs.items()},
    }
    (out / "meta.json").write_text(json.dumps(payload, indent=1))
    print(json.dumps(payload["pairs"], indent=1))


def cmd_niqe_fit(args):
    corpus = load_any_corpus(args.data)
    model = niqe_mod.fit_niqe(corpus, patch=args.patch)
    out = _out(args)
    path = out / "niqe_model.usaid"
    save_checkpoint(path, niqe_mod.model_to_tensors(model),
                    {"n_patches": model.n_patches, "patch": model.patch})
    print(f"fitted on {model.n_patches} patches -> {path}")


def _plot_curves(res, out):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plots", file=sys.stderr)
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = {"true": "C0", "blocks": "C1", "pixels": "C3"}
    seen = set()
    for (arm, s), curve in res.extras["curves"].items():
        ax.plot(curve, color=colors[arm], alpha=0.5,
                label=arm if arm not in seen else None)
        seen.add(arm)
    ax.set_xlabel("step")
    ax.set_ylabel("cross entropy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)


def build_parser():
    p = argparse.ArgumentParser(prog="segaware",
                                description="segmentation-aware denoising "
                                            "toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True)
        if config:
            sp.add_argument("--config", default=None,
                            help="TOML/JSON file with TrainConfig fields")

    g = sub.add_parser("gen-data", help="generate a labeled shapes corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", default="64x64")
    g.add_argument("--k", type=int, default=6)
    g.add_argument("--split", default="train")
    common(g, config=False)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser or segmenter")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data", default=None)
    t.add_argument("--mode", default=None,
                   choices=["mse_only", "usaid", "ssaid", "seg_supervised",
                            "seg_permuted_blocks", "seg_permuted_pixels"])
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="denoising quality evaluation")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", action="append", default=[])
    e.add_argument("--identity", action="store_true")
    e.add_argument("--oracle", action="store_true")
    e.add_argument("--sigmas", default="15,25,35")
    e.add_argument("--k", type=int, default=6)
    e.add_argument("--niqe-model", default=None)
    common(e, config=False)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate-k", help="K ablation sweep")
    a.add_argument("--data", required=True)
    a.add_argument("--test-data", default=None)
    a.add_argument("--ks", default="4,8,12")
    a.add_argument("--niqe-model", default=None)
    common(a)
    a.set_defaults(func=cmd_ablate_k)

    pe = sub.add_parser("permute-exp", help="permuted-supervision convergence")
    pe.add_argument("--data", required=True)
    pe.add_argument("--thresholds", default="auto")
    pe.add_argument("--seeds", default="1,2,3,4,5")
    pe.add_argument("--plots", action="store_true")
    common(pe)
    pe.set_defaults(func=cmd_permute_exp)

    ds = sub.add_parser("downstream-seg", help="segmentation after denoising")
    ds.add_argument("--data", required=True)
    ds.add_argument("--ckpt", action="append", default=[])
    ds.add_argument("--identity", action="store_true")
    ds.add_argument("--oracle", action="store_true")
    ds.add_argument("--sigma", type=float, default=25.0)
    common(ds)
    ds.set_defaults(func=cmd_downstream_seg)

    sg = sub.add_parser("significance", help="paired significance study")
    sg.add_argument("--data", required=True)
    sg.add_argument("--ckpt", action="append", default=[])
    sg.add_argument("--identity", action="store_true")
    sg.add_argument("--oracle", action="store_true")
    sg.add_argument("--sigma", type=float, default=25.0)
    sg.add_argument("--n-noise", type=int, default=10)
    sg.add_argument("--metric", default="psnr", choices=["psnr", "ssim"])
    common(sg, config=False)
    sg.set_defaults(func=cmd_significance)

    nf = sub.add_parser("niqe-fit", help="fit the no-reference quality model")
    nf.add_argument("--data", required=True)
    nf.add_argument("--patch", type=int, default=48)
    common(nf, config=False)
    nf.set_defaults(func=cmd_niqe_fit)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
