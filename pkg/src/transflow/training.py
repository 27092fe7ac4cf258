"""Training loops, checkpoints, clip datasets and the append-only training log."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .decoder import occlusion, sequence_loss
from .flowio import SequenceRecord, load_sequence, read_manifest, write_flo, write_manifest, write_png
from .metrics import Accumulator, EvalReport
from .model import TransFlow, predict_flow
from .pretrain import pretrain_step
from .synth import SceneSampler, generate_arrays

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("kind", "step", "loss", "lr", "aepe", "f1_all", "seconds")


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


# --- data ------------------------------------------------------------------

@dataclass
class ClipSet:
    """In-memory clips: frames [n, T, H, W, C]; flows [n, T-1, H, W, 2];
    valid / occluded [n, T-1, H, W]. Flow fields may be None (unlabelled)."""

    frames: torch.Tensor
    flows: torch.Tensor | None = None
    valid: torch.Tensor | None = None
    occluded: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]

    def take(self, idx) -> "ClipSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return ClipSet(self.frames[idx], pick(self.flows), pick(self.valid), pick(self.occluded))

    def subset(self, n: int) -> "ClipSet":
        return self.take(range(min(n, len(self))))

    @classmethod
    def from_arrays(cls, items) -> "ClipSet":
        frames, flows, valid, occ = zip(*items)
        stack = lambda xs: None if xs[0] is None else torch.from_numpy(np.stack(xs))  # noqa: E731
        return cls(stack(frames), stack(flows), stack(valid), stack(occ))

    @classmethod
    def synthetic(cls, seeds, sampler: SceneSampler | None = None) -> "ClipSet":
        sampler = sampler or SceneSampler()
        items = []
        for s in seeds:
            frames, flows, occ = generate_arrays(sampler(int(s)))
            items.append((frames, flows, np.ones(flows.shape[:-1], dtype=bool), occ))
        return cls.from_arrays(items)

    @classmethod
    def from_manifest(cls, path) -> "ClipSet":
        records = read_manifest(path)
        if not records:
            raise ValueError(f"manifest {path} lists no sequences")
        return cls.from_arrays([load_sequence(r) for r in records])


def split_seeds(seed: int, count: int, split: str) -> list[int]:
    """Scene seeds for a split; train and val never overlap."""
    base = {"train": 0, "val": 1, "test": 2}[split]
    return [(seed * 3 + base) * 1_000_003 + i for i in range(count)]


def write_synthetic(out_dir, seeds, sampler: SceneSampler, name: str) -> Path:
    """Render scenes to PNG frames, .flo flows and PNG occlusion masks plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for n, s in enumerate(seeds):
        frames, flows, occs = generate_arrays(sampler(int(s)))
        seq = out / name / f"{n:05d}"
        seq.mkdir(parents=True, exist_ok=True)
        fp, lp, op = [], [], []
        for t, frame in enumerate(frames):
            fp.append(seq / f"frame_{t:02d}.png")
            write_png(fp[-1], np.round(np.clip(frame, 0, 1) * 65535).astype(np.uint16))
        for t, (flow, occ) in enumerate(zip(flows, occs)):
            lp.append(seq / f"flow_{t:02d}.flo")
            op.append(seq / f"occ_{t:02d}.png")
            write_flo(flow, lp[-1])
            write_png(op[-1], (occ * 255).astype(np.uint8))
        records.append(SequenceRecord(tuple(fp), tuple(lp), tuple(op)))
    manifest = out / f"{name}.txt"
    write_manifest(manifest, records)
    return manifest


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Clip indices for a step; a pure function of (seed, step) so resumed runs match."""
    return np.random.default_rng([seed, step]).integers(0, n, batch)


# --- optimisation ----------------------------------------------------------

def build_optimizer(model: torch.nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    """AdamW; norms, biases, scalars and embeddings are not decayed."""
    decay, plain = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (plain if p.dim() < 2 or "pos" in name or "mask_token" in name or "rel_table" in name else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": plain, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr)


def lr_factor(step: int, warmup: int, total: int, floor: float = 0.1) -> float:
    """Linear warmup to 1, then cosine decay to ``floor`` at ``total``."""
    if step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    progress = min(1.0, (step - warmup) / (total - warmup))
    return floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress))


def build_scheduler(optimizer, warmup: int, total: int):
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: lr_factor(s, warmup, total))


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: TransFlow, optimizer=None, scheduler=None, step: int = 0,
                    kind: str = "train") -> Path:
    """Atomic write: the previous file stays intact if saving fails."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "step": step,
        "config": model.config.to_dict(),
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "scheduler": None if scheduler is None else scheduler.state_dict(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {state.get('version')}")
    state["config"] = ModelConfig.from_dict(state["config"])
    return state


def model_from_checkpoint(path, config: ModelConfig | None = None) -> tuple[TransFlow, dict]:
    state = load_checkpoint(path)
    model = TransFlow(config or state["config"])
    model.load_state_dict(state["model"])
    return model, state


# --- logging ---------------------------------------------------------------

class TrainLog:
    """Append-only tab-separated records; the header is written once."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                self.path.write_text("\t".join(LOG_COLUMNS) + "\n")

    def write(self, **row) -> None:
        self.rows.append(row)
        if self.path is None:
            return
        cells = []
        for c in LOG_COLUMNS:
            v = row.get(c)
            cells.append("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)))
        with open(self.path, "a") as fh:
            fh.write("\t".join(cells) + "\n")


def read_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        row = {}
        for k, v in zip(header, line.split("\t")):
            if v == "":
                row[k] = None
            elif k == "kind":
                row[k] = v
            elif k == "step":
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


# --- evaluation ------------------------------------------------------------

def predict_clips(model: TransFlow, clips: ClipSet, chunk: int = 8) -> torch.Tensor:
    """Final flow [n, T-1, H, W, 2] for every clip."""
    outs = [predict_flow(model, clips.frames[i : i + chunk])[0] for i in range(0, len(clips), chunk)]
    return torch.cat(outs)


def score_predictions(pred, clips: ClipSet) -> EvalReport:
    """Pooled AEPE / F1-all of predictions [n, T-1, H, W, 2] against the clips' ground truth."""
    if clips.flows is None:
        raise ValueError("evaluation needs ground-truth flow")
    pred = np.asarray(pred)
    gt = clips.flows.numpy()
    valid = None if clips.valid is None else clips.valid.numpy()
    acc = Accumulator()
    for i in range(len(clips)):
        for t in range(gt.shape[1]):
            acc.add(pred[i, t], gt[i, t], None if valid is None else valid[i, t])
        acc.sequences += 1
    return acc.report()


def evaluate(model: TransFlow, clips: ClipSet, chunk: int = 8) -> EvalReport:
    if clips.flows is None:
        raise ValueError("evaluation needs ground-truth flow")
    return score_predictions(predict_clips(model, clips, chunk).numpy(), clips)


# --- loops -----------------------------------------------------------------

def flow_loss(model: TransFlow, frames, flows, valid=None, config: ModelConfig | None = None):
    cfg = config or model.config
    preds = model(frames)
    occ = None
    if cfg.occ_mode == "gt_flow":
        occ = occlusion(frames[:, :-1], frames[:, 1:], flows, cfg.occ_threshold)
    elif cfg.occ_mode == "pred_flow":
        occ = occlusion(frames[:, :-1], frames[:, 1:], preds[-1].detach(), cfg.occ_threshold)
    return sequence_loss(preds, flows, occ, cfg.gamma, valid)


@dataclass
class RunResult:
    step: int
    history: list[tuple[int, float]] = field(default_factory=list)  # (step, held-out AEPE)
    reached: int | None = None  # first evaluated step with AEPE below the threshold
    final: EvalReport | None = None
    losses: list[float] = field(default_factory=list)


def _checkpoint_due(step: int, every: int, total: int) -> bool:
    return step % every == 0 or step == total


def train_flow(model: TransFlow, train: ClipSet, val: ClipSet | None = None,
               config: ModelConfig | None = None, out_dir=None, optimizer=None, scheduler=None,
               start_step: int = 0, log: TrainLog | None = None, stop_below: float | None = None,
               progress=None) -> RunResult:
    """Supervised flow training with the multi-iteration L1 loss.

    Evaluates held-out AEPE every ``eval_every`` steps (and at the end). With
    ``stop_below`` set, stops at the first evaluation below that AEPE.
    """
    cfg = config or model.config
    if train.flows is None:
        raise ValueError("flow training needs ground-truth flow")
    optimizer = optimizer or build_optimizer(model, cfg.lr, cfg.weight_decay)
    scheduler = scheduler or build_scheduler(optimizer, cfg.warmup_steps, cfg.steps)
    log = log or TrainLog(None if out_dir is None else Path(out_dir) / "log.tsv")
    result = RunResult(step=start_step)
    t0 = time.perf_counter()
    model.train()
    for step in range(start_step + 1, cfg.steps + 1):
        batch = train.take(batch_indices(cfg.seed, step, len(train), cfg.batch))
        loss = flow_loss(model, batch.frames, batch.flows, batch.valid, cfg)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite flow loss at step {step}: {loss.item()}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        scheduler.step()
        result.step = step
        result.losses.append(loss.item())
        row = dict(kind="train", step=step, loss=loss.item(), lr=optimizer.param_groups[0]["lr"])
        if val is not None and _checkpoint_due(step, cfg.eval_every, cfg.steps):
            report = evaluate(model, val)
            model.train()
            result.history.append((step, report.aepe))
            result.final = report
            row.update(aepe=report.aepe, f1_all=report.f1_all)
            if stop_below is not None and result.reached is None and report.aepe < stop_below:
                result.reached = step
        row["seconds"] = round(time.perf_counter() - t0, 3)
        log.write(**row)
        if progress is not None:
            progress(row)
        if out_dir is not None and _checkpoint_due(step, cfg.ckpt_every, cfg.steps):
            save_checkpoint(Path(out_dir) / "last.pt", model, optimizer, scheduler, step, "train")
        if result.reached is not None:
            break
    return result


def pretrain(model: TransFlow, train: ClipSet, config: ModelConfig | None = None, out_dir=None,
             optimizer=None, scheduler=None, start_step: int = 0, log: TrainLog | None = None,
             progress=None) -> RunResult:
    """Masked-reconstruction pre-training; every frame of a clip is an independent sample."""
    cfg = config or model.config
    optimizer = optimizer or build_optimizer(model, cfg.pretrain_lr, cfg.weight_decay)
    scheduler = scheduler or build_scheduler(optimizer, cfg.warmup_steps, cfg.steps)
    log = log or TrainLog(None if out_dir is None else Path(out_dir) / "log.tsv")
    result = RunResult(step=start_step)
    t0 = time.perf_counter()
    for step in range(start_step + 1, cfg.steps + 1):
        batch = train.take(batch_indices(cfg.seed, step, len(train), cfg.batch))
        gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
        loss = pretrain_step(model, batch.frames, optimizer, cfg, scheduler, gen)
        result.step = step
        result.losses.append(loss)
        row = dict(kind="pretrain", step=step, loss=loss, lr=optimizer.param_groups[0]["lr"],
                   seconds=round(time.perf_counter() - t0, 3))
        log.write(**row)
        if progress is not None:
            progress(row)
        if out_dir is not None and _checkpoint_due(step, cfg.ckpt_every, cfg.steps):
            save_checkpoint(Path(out_dir) / "last.pt", model, optimizer, scheduler, step, "pretrain")
    return result


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
