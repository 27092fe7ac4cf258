import math

import numpy as np
import pytest
import torch

from transflow.config import desk_profile
from transflow.model import TransFlow
from transflow.synth import SceneSampler
from transflow.training import (LOG_COLUMNS, ClipSet, TrainLog, batch_indices, build_optimizer, build_scheduler,
                                evaluate, load_checkpoint, lr_factor, model_from_checkpoint, pretrain, read_log,
                                save_checkpoint, score_predictions, seed_everything, smoothed, split_seeds,
                                train_flow)


def tiny(**kw):
    base = dict(image_size=(32, 32), d=16, num_heads=2, num_encoder_blocks=1, num_decoder_blocks=1,
                temporal_length=3, batch=2, steps=4, warmup_steps=2, eval_every=2, ckpt_every=2,
                refine_iters=2, lr=1e-3, pretrain_lr=1e-3)
    base.update(kw)
    return desk_profile(**base)


@pytest.fixture(scope="module")
def clips():
    return ClipSet.synthetic(range(6), SceneSampler(H=32, W=32, T=3))


def _model(cfg, seed=0):
    seed_everything(seed)
    return TransFlow(cfg)


def _params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_lr_warmup_then_cosine_floor():
    assert lr_factor(0, 10, 100) == pytest.approx(0.1)
    assert lr_factor(9, 10, 100) == 1.0
    assert lr_factor(10, 10, 100) == 1.0
    assert lr_factor(100, 10, 100) == pytest.approx(0.1)
    assert lr_factor(55, 10, 100) == pytest.approx(0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * 0.5)))
    after = [lr_factor(s, 10, 100) for s in range(10, 101)]
    assert all(x >= y for x, y in zip(after, after[1:]))


def test_optimizer_skips_decay_on_norms_and_embeddings():
    model = _model(tiny())
    opt = build_optimizer(model, 1e-3, 0.05)
    decayed = {id(p) for p in opt.param_groups[0]["params"]}
    for name, p in model.named_parameters():
        if p.dim() < 2 or "pos" in name:
            assert id(p) not in decayed, name
    assert opt.param_groups[1]["weight_decay"] == 0.0
    assert len(decayed) > 0


def test_batch_indices_pure():
    assert np.array_equal(batch_indices(3, 17, 50, 6), batch_indices(3, 17, 50, 6))
    assert not np.array_equal(batch_indices(3, 17, 50, 6), batch_indices(3, 18, 50, 6))


def test_split_seeds_disjoint():
    tr, va, te = (set(split_seeds(5, 1000, s)) for s in ("train", "val", "test"))
    assert not (tr & va) and not (tr & te) and not (va & te)
    assert not set(split_seeds(0, 1000, "train")) & set(split_seeds(1, 1000, "train"))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny(pos_embed_kind="learnable_rel")
    model = _model(cfg, seed=4)
    opt = build_optimizer(model, 1e-3, 1e-4)
    path = save_checkpoint(tmp_path / "c.pt", model, opt, None, step=7)
    assert not (tmp_path / "c.pt.tmp").exists()
    back, state = model_from_checkpoint(path)
    assert _params_equal(model, back)
    assert state["step"] == 7 and state["config"] == cfg


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"version": 99}, tmp_path / "old.pt")
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "old.pt")


def test_resume_matches_uninterrupted(tmp_path, clips):
    cfg = tiny()
    straight = _model(cfg)
    train_flow(straight, clips, None, cfg)

    # writing checkpoints along the way must not perturb training
    first = _model(cfg)
    train_flow(first, clips, None, cfg, out_dir=tmp_path)
    half = _model(cfg)
    opt = build_optimizer(half, cfg.lr, cfg.weight_decay)
    sched = build_scheduler(opt, cfg.warmup_steps, cfg.steps)
    r = train_flow(half, clips, None, cfg.replace(steps=2), optimizer=opt, scheduler=sched, out_dir=tmp_path / "h")
    state = load_checkpoint(tmp_path / "h" / "last.pt")
    assert state["step"] == 2 == r.step
    resumed = _model(cfg, seed=99)
    opt2 = build_optimizer(resumed, cfg.lr, cfg.weight_decay)
    sched2 = build_scheduler(opt2, cfg.warmup_steps, cfg.steps)
    resumed.load_state_dict(state["model"])
    opt2.load_state_dict(state["optimizer"])
    sched2.load_state_dict(state["scheduler"])
    r2 = train_flow(resumed, clips, None, cfg, optimizer=opt2, scheduler=sched2, start_step=state["step"])
    assert r2.step == 4
    assert _params_equal(straight, first)
    assert _params_equal(straight, resumed)


def test_training_deterministic(clips):
    cfg = tiny()
    a, b = _model(cfg), _model(cfg)
    ra = train_flow(a, clips, clips.subset(2), cfg)
    rb = train_flow(b, clips, clips.subset(2), cfg)
    assert ra.losses == rb.losses and ra.history == rb.history
    assert [s for s, _ in ra.history] == [2, 4]


def test_stop_below_threshold(clips):
    cfg = tiny(steps=6)
    r = train_flow(_model(cfg), clips, clips.subset(2), cfg, stop_below=1e6)
    assert r.reached == 2 and r.step == 2


def test_log_append_only(tmp_path):
    log = TrainLog(tmp_path / "log.tsv")
    log.write(kind="train", step=1, loss=0.5, lr=1e-3, seconds=0.1)
    log2 = TrainLog(tmp_path / "log.tsv")
    log2.write(kind="train", step=2, loss=0.25, lr=1e-3, aepe=1.5, f1_all=2.0, seconds=0.2)
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(LOG_COLUMNS) and len(lines) == 3
    rows = read_log(tmp_path / "log.tsv")
    assert rows[0]["aepe"] is None and rows[1]["aepe"] == 1.5 and rows[1]["step"] == 2


def test_train_writes_log_and_checkpoint(tmp_path, clips):
    cfg = tiny()
    train_flow(_model(cfg), clips, clips.subset(2), cfg, out_dir=tmp_path)
    rows = read_log(tmp_path / "log.tsv")
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert rows[1]["aepe"] is not None and rows[0]["aepe"] is None
    assert load_checkpoint(tmp_path / "last.pt")["step"] == 4


def test_pretrain_loop_runs_and_logs(tmp_path, clips):
    cfg = tiny()
    model = _model(cfg)
    r = pretrain(model, clips, cfg, out_dir=tmp_path)
    assert len(r.losses) == 4 and all(np.isfinite(r.losses))
    assert load_checkpoint(tmp_path / "last.pt")["kind"] == "pretrain"
    assert {row["kind"] for row in read_log(tmp_path / "log.tsv")} == {"pretrain"}


def test_gt_as_prediction_scores_zero(clips):
    rep = score_predictions(clips.flows.numpy(), clips)
    assert rep.aepe == 0.0 and rep.f1_all == 0.0
    assert rep.pixels == int(clips.valid.sum()) and rep.sequences == len(clips)


def test_evaluate_pixel_count(clips):
    cfg = tiny()
    rep = evaluate(_model(cfg), clips.subset(3))
    assert rep.pixels == 3 * 2 * 32 * 32 and rep.aepe > 0


def test_training_lowers_loss(clips):
    cfg = tiny(steps=40, warmup_steps=5)
    r = train_flow(_model(cfg), clips, None, cfg)
    assert np.mean(r.losses[-10:]) < np.mean(r.losses[:10])


def test_smoothed_trailing_mean():
    assert smoothed([1, 2, 3, 4], window=2).tolist() == [1.0, 1.5, 2.5, 3.5]
    assert smoothed([5.0], window=20).tolist() == [5.0]
