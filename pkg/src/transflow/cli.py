"""Command line entry point: synth, pretrain, train, eval, infer, plot, config."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import CONFIG_KEYS, ConfigError, ModelConfig, desk_profile, dump_config, load_config, paper_profile
from .flowio import flow_to_color, read_frame, write_flo, write_png
from .model import TransFlow, predict_flow
from .synth import SceneSampler
from .training import (ClipSet, build_optimizer, build_scheduler, load_checkpoint,
                       model_from_checkpoint, predict_clips, pretrain, read_log, save_checkpoint, score_predictions,
                       seed_everything, split_seeds, train_flow, write_synthetic)

# flag -> config key
OVERRIDES = {
    "seed": "seed",
    "steps": "steps",
    "lr": "lr",
    "batch": "batch",
    "mask_ratio": "mask_ratio",
    "tau": "softsort_tau",
    "gamma": "gamma",
    "patch": "patch",
    "temporal_length": "temporal_length",
    "pos_embed": "pos_embed_kind",
    "sampling": "sampling",
}


def add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML key: value file; keys mirror ModelConfig")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk",
                   help="base profile for keys the config file leaves out")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--patch", type=int, nargs="+", help="patch side, or h w")
    p.add_argument("--temporal-length", type=int)
    p.add_argument("--pos-embed", choices=("fixed_abs", "learnable_abs", "peg", "learnable_rel"))
    p.add_argument("--sampling", choices=("strategic", "random", "block", "uniform"))
    p.add_argument("--quiet", action="store_true")


def resolve_config(args, base: ModelConfig | None = None, lr_key: str = "lr") -> ModelConfig:
    """Profile < checkpoint snapshot < config file < command-line flags."""
    if base is None:
        base = paper_profile() if args.profile == "paper" else desk_profile()
    cfg = load_config(args.config, base) if args.config else base
    changes = {}
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "patch":
            value = tuple(value) * (2 // len(value)) if len(value) in (1, 2) else None
            if value is None:
                raise ConfigError("--patch takes one or two integers")
        if flag == "lr":
            key = lr_key
        changes[key] = value
    return ModelConfig.from_dict({**cfg.to_dict(), **changes})


def _say(args, *msg) -> None:
    if not getattr(args, "quiet", False):
        print(*msg, flush=True)


def _progress(args, every: int = 50):
    def show(row):
        if row["step"] % every == 0 or row.get("aepe") is not None:
            cells = [f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()]
            _say(args, "\t".join(cells))
    return show


def _out(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if cfg.temporal_length < 2:
        raise ConfigError(f"temporal_length must be >= 2, got {cfg.temporal_length}")
    out = _out(args, "data")
    H, W = cfg.image_size
    sampler = SceneSampler(H=H, W=W, T=cfg.temporal_length, C=cfg.channels)
    manifests = {}
    for split, count in (("train", args.count), ("val", args.val_count)):
        if count > 0:
            manifests[split] = write_synthetic(out, split_seeds(cfg.seed, count, split), sampler, split)
    dump_config(cfg, out / "config.yaml")
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def _init_model(args, cfg: ModelConfig) -> TransFlow:
    seed_everything(cfg.seed)
    model = TransFlow(cfg)
    if getattr(args, "init", None):
        state = load_checkpoint(args.init)
        model.load_state_dict(state["model"])
        _say(args, f"initialised from {args.init} ({state['kind']}, step {state['step']})")
    return model


def _resume(args, out: Path, model, optimizer, scheduler) -> int:
    last = out / "last.pt"
    if not getattr(args, "resume", False) or not last.exists():
        return 0
    state = load_checkpoint(last)
    model.load_state_dict(state["model"])
    optimizer.load_state_dict(state["optimizer"])
    scheduler.load_state_dict(state["scheduler"])
    _say(args, f"resumed from {last} at step {state['step']}")
    return int(state["step"])


def _abort(out: Path, err: Exception) -> int:
    last = out / "last.pt"
    kept = f"; last good checkpoint kept at {last}" if last.exists() else ""
    print(f"error: {err}{kept}", file=sys.stderr)
    return 3


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, lr_key="pretrain_lr")
    out = _out(args, "runs/pretrain")
    train = ClipSet.from_manifest(args.data)
    model = _init_model(args, cfg)
    opt = build_optimizer(model, cfg.pretrain_lr, cfg.weight_decay)
    sched = build_scheduler(opt, cfg.warmup_steps, cfg.steps)
    start = _resume(args, out, model, opt, sched)
    dump_config(cfg, out / "config.yaml")
    try:
        pretrain(model, train, cfg, out_dir=out, optimizer=opt, scheduler=sched, start_step=start,
                 progress=_progress(args))
    except FloatingPointError as err:
        return _abort(out, err)
    save_checkpoint(out / "last.pt", model, opt, sched, max(start, cfg.steps), "pretrain")
    print(f"checkpoint: {out / 'last.pt'}")
    return 0


def _val_manifest(args) -> Path | None:
    if args.val:
        return args.val
    guess = Path(args.data).with_name("val.txt")
    return guess if guess.exists() else None


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out(args, "runs/train")
    train = ClipSet.from_manifest(args.data)
    val_path = _val_manifest(args)
    val = ClipSet.from_manifest(val_path) if val_path else None
    model = _init_model(args, cfg)
    opt = build_optimizer(model, cfg.lr, cfg.weight_decay)
    sched = build_scheduler(opt, cfg.warmup_steps, cfg.steps)
    start = _resume(args, out, model, opt, sched)
    dump_config(cfg, out / "config.yaml")
    try:
        result = train_flow(model, train, val, cfg, out_dir=out, optimizer=opt, scheduler=sched,
                            start_step=start, progress=_progress(args))
    except FloatingPointError as err:
        return _abort(out, err)
    save_checkpoint(out / "last.pt", model, opt, sched, max(start, result.step), "train")
    if result.final is not None:
        (out / "val_report.txt").write_text(result.final.to_text())
        print(result.final.to_text(), end="")
    print(f"checkpoint: {out / 'last.pt'}")
    return 0


def cmd_eval(args) -> int:
    if args.ckpt is None:
        raise ConfigError("eval needs --ckpt")
    model, state = model_from_checkpoint(args.ckpt)
    clips = ClipSet.from_manifest(args.data)
    out = _out(args, "runs/eval")
    if clips.flows is None:
        raise ValueError(f"{args.data} has no ground-truth flow")
    pred = predict_clips(model, clips).numpy()
    gt, valid = clips.flows.numpy(), clips.valid.numpy()
    report = score_predictions(pred, clips)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.to_text(), end="")
    if args.png or args.figures:
        from . import plotting

        n = min(len(clips), args.max_figures)
        for i in range(n):
            if args.png:
                for t in range(gt.shape[1]):
                    write_png(out / f"seq{i:03d}_flow{t:02d}.png", flow_to_color(pred[i, t]))
            if args.figures:
                plotting.flow_panel(clips.frames[i, 0].numpy(), pred[i, 0], gt[i, 0],
                                    out / f"panel_{i:03d}.png", title=f"sequence {i}, pair 0")
        if args.figures:
            epe = np.sqrt(((pred - gt) ** 2).sum(-1))[valid]
            plotting.epe_histogram(epe, out / "epe_hist.png")
            log = Path(args.ckpt).parent / "log.tsv"
            if log.exists():
                plotting.training_curves(read_log(log), out / "curves.png")
    return 0


def cmd_infer(args) -> int:
    if args.ckpt is None:
        raise ConfigError("infer needs --ckpt")
    if len(args.frames) < 2:
        raise ConfigError("infer needs at least 2 frames")
    model, _ = model_from_checkpoint(args.ckpt)
    frames = np.stack([read_frame(p) for p in args.frames])
    flow, _ = predict_flow(model, torch.from_numpy(frames))
    out = _out(args, "runs/infer")
    for t, f in enumerate(flow[0].numpy()):
        write_flo(f, out / f"flow_{t:02d}.flo")
        write_png(out / f"flow_{t:02d}.png", flow_to_color(f))
        print(out / f"flow_{t:02d}.flo")
    return 0


def cmd_plot(args) -> int:
    from . import plotting

    out = _out(args, "runs/plots")
    path = plotting.training_curves(read_log(args.log), out / "curves.png")
    print(path)
    return 0


def cmd_config(args) -> int:
    if args.describe:
        for key, doc in CONFIG_KEYS.items():
            print(f"{key}\t{doc}")
        return 0
    cfg = resolve_config(args)
    if args.out:
        dump_config(cfg, args.out)
    else:
        print(json.dumps(cfg.to_dict(), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transflow", description="Transformer optical flow on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset with ground truth")
    add_common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--val-count", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="masked self-supervised pre-training")
    add_common(p)
    p.add_argument("--data", type=Path, required=True, help="train manifest")
    p.add_argument("--init", type=Path, help="start from these weights")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.pt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised flow training")
    add_common(p)
    p.add_argument("--data", type=Path, required=True, help="train manifest")
    p.add_argument("--val", type=Path, help="held-out manifest (default: val.txt next to --data)")
    p.add_argument("--init", type=Path, help="pre-trained checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.pt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AEPE / F1-all report on a labelled manifest")
    add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--png", action="store_true", help="write colour-coded flow PNGs")
    p.add_argument("--figures", action="store_true", help="write flow panels, EPE histogram, curves")
    p.add_argument("--max-figures", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict flow for a frame sequence")
    add_common(p)
    p.add_argument("frames", nargs="+", type=Path)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="training curves from a log.tsv")
    add_common(p)
    p.add_argument("log", type=Path)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("config", help="print the resolved config or describe keys")
    add_common(p)
    p.add_argument("--describe", action="store_true")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
