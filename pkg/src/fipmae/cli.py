"""Command-line entry point: generate -> pretrain -> finetune -> eval -> inspect.

Every command is deterministic given its flags and seed, and every output
directory receives the fully resolved config that produced it. Exit codes:
0 success, 1 validation error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .finetune import evaluate_on_samples, export_features, finetune, model_classifier
from .modalities import (MODALITIES, RenderConfig, build_sample, denormalize, normalize)
from .model import ModelParams, forward_pretrain, patchify, unpatchify
from .sigsim import ModulationScheme
from .storage import (StorageError, load_checkpoint, load_dataset, save_checkpoint,
                      save_dataset)
from .training import FipConfig, TrainLog, make_mask_plan, pretrain

DEFAULT_GRID = list(range(-10, 12, 2))


class CliError(Exception):
    """Validation failure: maps to exit code 1."""


def _gen_one(args_tuple):
    seed, index, classes, snr_min, snr_max, render_cfg, labeled = args_tuple
    rng = np.random.default_rng((seed, index))
    scheme = classes[int(rng.integers(0, len(classes)))]
    snr = float(rng.uniform(snr_min, snr_max))
    sample = build_sample(scheme, snr, rng, render_cfg)
    if not labeled:
        sample.label = None
    return sample


def cmd_gen(args) -> int:
    try:
        classes = [ModulationScheme.from_label(c) for c in args.classes.split(",")]
    except ValueError as e:
        raise CliError(str(e))
    if args.snr_min > args.snr_max:
        raise CliError(f"--snr-min {args.snr_min} > --snr-max {args.snr_max}")
    render_cfg = RenderConfig(image_size=args.image_size, n_symbols=args.n_symbols,
                              samples_per_symbol=args.sps)
    work = [(args.seed, i, classes, args.snr_min, args.snr_max, render_cfg, args.labeled)
            for i in range(args.n)]
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            samples = list(pool.map(_gen_one, work))
    else:
        samples = [_gen_one(w) for w in work]
    seeds = [f"({args.seed},{i})" for i in range(args.n)]
    save_dataset(args.out, samples, class_names=[m.label for m in ModulationScheme],
                 seeds=seeds)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _load_run_config(args) -> RunConfig:
    try:
        cfg = load_run_config(args.config)
    except (ConfigError, OSError, ValueError) as e:
        raise CliError(f"config: {e}")
    if getattr(args, "mode", None):
        cfg.fip = FipConfig.from_json_dict({**cfg.fip.to_json_dict(), "mode": args.mode})
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "batch", None) is not None:
        cfg.train.batch_size = args.batch
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.resolve()


def _require(path, flag):
    if path is None or not os.path.exists(path):
        raise CliError(f"{flag}: path '{path}' does not exist")


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    _require(args.data, "--data")
    dataset, stats, _manifest = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    log = TrainLog()
    start_step = 0
    if args.resume:
        _require(args.resume, "--resume")
        params, model_cfg, fip_cfg, state, stats_ck = load_checkpoint(args.resume)
        if model_cfg.to_json_dict() != cfg.model.to_json_dict():
            raise CliError("--resume: checkpoint model config differs from the requested config")
        start_step = state.step
        stats = stats_ck or stats
    else:
        params = ModelParams.init(cfg.model, np.random.default_rng(cfg.seed))
        state = None
    ckpt_dir = os.path.join(args.out, "checkpoint")

    def checkpoint_cb(step, p, s, lg):
        save_checkpoint(ckpt_dir, p, cfg.model, cfg.fip, s, stats)

    result = pretrain(dataset, params, cfg.fip, cfg.train.epochs, cfg.train.batch_size,
                      cfg.seed, base_lr=cfg.train.base_lr, weight_decay=cfg.train.weight_decay,
                      stats=stats, state=state, start_step=start_step, log=log,
                      on_checkpoint=checkpoint_cb if args.save_every else None,
                      checkpoint_every=args.save_every)
    save_checkpoint(ckpt_dir, result.params, cfg.model, cfg.fip, result.state, stats)
    result.log.to_csv(os.path.join(args.out, "trainlog.csv"))
    cfg.write(os.path.join(args.out, "config.resolved.json"),
              data=os.path.abspath(args.data), command="pretrain")
    if result.aborted:
        print("aborted on non-finite loss; last good checkpoint retained", file=sys.stderr)
        return 2
    print(f"pretrained {result.state.step} steps -> {ckpt_dir}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    _require(args.data, "--data")
    _require(args.ckpt, "--ckpt")
    dataset, stats, _ = load_dataset(args.data)
    if any(s.label is None for s in dataset):
        raise CliError("--data: fine-tuning requires a labeled dataset")
    params, model_cfg, fip_cfg, _state, stats_ck = load_checkpoint(args.ckpt)
    stats = stats_ck or stats
    epochs = args.epochs if args.epochs is not None else cfg.train.finetune_epochs
    lr = args.lr if args.lr is not None else cfg.train.finetune_lr
    result = finetune(params, dataset, epochs=epochs, base_lr=lr, seed=cfg.seed,
                      batch_size=cfg.train.batch_size, head_only=args.head_only,
                      weight_decay=cfg.train.weight_decay, stats=stats)
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    save_checkpoint(ckpt_dir, result.params, model_cfg, fip_cfg, result.state, stats)
    with open(os.path.join(args.out, "finetune_history.csv"), "w") as f:
        f.write("epoch,loss,accuracy\n")
        for rec in result.history:
            f.write(f"{rec['epoch']},{rec['loss']!r},{rec['accuracy']!r}\n")
    cfg.write(os.path.join(args.out, "config.resolved.json"),
              data=os.path.abspath(args.data), checkpoint=os.path.abspath(args.ckpt),
              command="finetune")
    if result.aborted:
        print("aborted on non-finite loss", file=sys.stderr)
        return 2
    final = result.history[-1] if result.history else {"accuracy": float("nan")}
    print(f"fine-tuned {epochs} epochs; train accuracy {final['accuracy']:.3f} -> {ckpt_dir}")
    return 0


def _parse_grid(spec: str):
    try:
        vals = [float(v) for v in spec.split(",")]
    except ValueError:
        raise CliError(f"--grid: cannot parse '{spec}'")
    if not vals:
        raise CliError("--grid: empty")
    return vals


def cmd_eval(args) -> int:
    _require(args.ckpt, "--ckpt")
    params, model_cfg, _fip, _state, stats = load_checkpoint(args.ckpt)
    if "head.w" not in params:
        raise CliError("--ckpt: checkpoint has no classification head (run finetune first)")
    grid = _parse_grid(args.grid)
    classify = model_classifier(params, stats)
    if args.data:
        _require(args.data, "--data")
        dataset, ds_stats, _ = load_dataset(args.data)
        if stats is None:
            classify = model_classifier(params, ds_stats)
        report = evaluate_on_samples(classify, dataset, model_cfg.n_classes)
    else:
        render_cfg = RenderConfig(image_size=model_cfg.image_size, n_symbols=args.n_symbols,
                                  samples_per_symbol=args.sps)
        classes = list(ModulationScheme)
        samples = []
        for i, snr in enumerate(grid):
            rng = np.random.default_rng((args.seed, i))
            for _ in range(args.n_per_point):
                scheme = classes[int(rng.integers(0, len(classes)))]
                samples.append(build_sample(scheme, float(snr), rng, render_cfg))
        report = evaluate_on_samples(classify, samples, model_cfg.n_classes)
    report.to_csv(args.csv)
    if args.confusion:
        report.confusion_to_csv(args.confusion, [m.label for m in ModulationScheme])
    if args.plot:
        _plot_accuracy(report, args.plot)
    print(f"overall accuracy {report.overall_accuracy:.4f} over {int(report.confusion.sum())} samples")
    for snr in sorted(report.per_snr):
        print(f"  {snr:+.1f} dB: {report.per_snr[snr]:.4f} (n={report.n_per_snr[snr]})")
    return 0


def _plot_accuracy(report, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    snrs = sorted(report.per_snr)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(snrs, [report.per_snr[s] for s in snrs], marker="o")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_features(args) -> int:
    _require(args.ckpt, "--ckpt")
    _require(args.data, "--data")
    params, _mc, _fc, _st, stats = load_checkpoint(args.ckpt)
    dataset, ds_stats, _ = load_dataset(args.data)
    export_features(params, dataset, args.out, stats=stats or ds_stats)
    print(f"wrote {len(dataset)} feature rows to {args.out}")
    return 0


def _save_png(path, image: np.ndarray) -> None:
    """8-bit PNG of a [3, H, W] image in [0, 1]; display-only quantization."""
    from PIL import Image
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def cmd_recon(args) -> int:
    _require(args.ckpt, "--ckpt")
    _require(args.data, "--data")
    params, model_cfg, fip_cfg, _st, stats = load_checkpoint(args.ckpt)
    dataset, ds_stats, _ = load_dataset(args.data)
    stats = stats or ds_stats
    if not 0 <= args.sample < len(dataset):
        raise CliError(f"--sample: index {args.sample} out of range [0, {len(dataset)})")
    sample = dataset[args.sample]
    plan = make_mask_plan(fip_cfg, model_cfg, np.random.default_rng(args.seed))
    preds = forward_pretrain(sample, plan, params, stats)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved.json"), "w") as f:
        json.dump({"model": model_cfg.to_json_dict(), "fip": fip_cfg.to_json_dict(),
                   "checkpoint": os.path.abspath(args.ckpt), "sample": args.sample,
                   "seed": args.seed, "command": "recon"}, f, indent=2, sort_keys=True)
        f.write("\n")
    p = model_cfg.patch_size
    for m in MODALITIES:
        inp = sample.inputs[m]
        tgt = sample.targets[m]
        if m in preds:
            pred_patches = preds[m].data.astype(np.float32)
            input_patches = patchify(normalize(inp, stats[m]) if stats else inp, p)
            composed = input_patches.copy()
            composed[plan.masks[m]] = pred_patches[plan.masks[m]]
            recon = unpatchify(composed, p, model_cfg.image_size)
            if stats:
                recon = denormalize(recon, stats[m])
            recon = np.clip(recon, 0.0, 1.0)
        else:
            recon = np.zeros_like(inp)
        _save_png(os.path.join(args.out, f"{m.value}_input.png"), inp)
        _save_png(os.path.join(args.out, f"{m.value}_target.png"), tgt)
        _save_png(os.path.join(args.out, f"{m.value}_recon.png"), recon)
    print(f"wrote {3 * len(MODALITIES)} panels to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_gradcheck_suite
    report = run_gradcheck_suite(seed=args.seed, n_seeds=args.seeds,
                                 full_loss_seeds=args.seeds, verbose=True)
    if not report["passed"]:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    print(f"gradient checks passed: {report['n_checks']} checks, "
          f"worst relative error {report['worst']:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fipmae",
                                 description="multimodal masked-autoencoder pretraining "
                                             "with a designated target modality")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    lab = g.add_mutually_exclusive_group()
    lab.add_argument("--labeled", action="store_true", default=True)
    lab.add_argument("--unlabeled", dest="labeled", action="store_false")
    g.add_argument("--snr-min", type=float, default=-10.0)
    g.add_argument("--snr-max", type=float, default=10.0)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--n-symbols", type=int, default=1024)
    g.add_argument("--sps", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", default=",".join(m.label for m in ModulationScheme))
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="run masked-autoencoder pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["fip", "uniform"], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--save-every", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint for classification")
    f.add_argument("--data", required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--config", default=None)
    f.add_argument("--out", required=True)
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--batch", type=int, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--head-only", action="store_true")
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="accuracy over an SNR grid")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--csv", required=True)
    e.add_argument("--data", default=None, help="fixed dataset mode; omit for fresh generation")
    e.add_argument("--grid", default=",".join(str(v) for v in DEFAULT_GRID))
    e.add_argument("--n-per-point", type=int, default=50)
    e.add_argument("--n-symbols", type=int, default=1024)
    e.add_argument("--sps", type=int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--confusion", default=None)
    e.add_argument("--plot", default=None)
    e.set_defaults(fn=cmd_eval)

    ft = sub.add_parser("features", help="export pooled encoder features as CSV")
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--data", required=True)
    ft.add_argument("--out", required=True)
    ft.set_defaults(fn=cmd_features)

    r = sub.add_parser("recon", help="write input/target/reconstruction PNG panels")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--sample", type=int, default=0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_recon)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=20, help="seeds per check")
    gc.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (CliError, ConfigError, StorageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FloatingPointError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
