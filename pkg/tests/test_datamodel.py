import numpy as np
import pytest
from hypothesis import given, strategies as st

from transflow.config import (CONFIG_KEYS, ConfigError, ModelConfig, desk_profile, dump_config, load_config,
                              paper_profile, validate_config)
from transflow.types import FlowField, FrameSequence, OcclusionMask, PatchGeometry, TokenGrid


def test_config_accepts_divisible_width():
    cfg = paper_profile(d=128, num_heads=8)
    assert validate_config(cfg) is cfg


def test_config_paper_masking_defaults():
    cfg = ModelConfig()
    assert (cfg.mask_ratio, cfg.softsort_tau, cfg.gamma) == (0.5, 0.1, 0.8)
    validate_config(cfg)


def test_config_paper_schedule_defaults():
    cfg = ModelConfig()
    assert cfg.lr == 12.5e-5
    assert cfg.batch == 6
    assert cfg.pretrain_lr == 1e-4
    assert cfg.num_encoder_blocks == 12
    assert cfg.temporal_length == 5
    assert cfg.patch == (8, 8)


def test_config_rejects_indivisible_width():
    with pytest.raises(ConfigError, match="d not divisible by heads"):
        validate_config(ModelConfig(d=100, num_heads=8))


@pytest.mark.parametrize("change, message", [
    (dict(mask_ratio=0.0), "mask_ratio"),
    (dict(mask_ratio=1.0), "mask_ratio"),
    (dict(softsort_tau=0.0), "softsort_tau"),
    (dict(gamma=0.0), "gamma"),
    (dict(gamma=1.5), "gamma"),
    (dict(refine_iters=0), "refine_iters"),
    (dict(pos_embed_kind="rotary"), "pos_embed_kind"),
    (dict(image_size=(60, 64)), "not divisible by patch"),
])
def test_config_names_violated_invariant(change, message):
    with pytest.raises(ConfigError, match=message):
        validate_config(desk_profile().replace(**change))


def test_config_reports_first_violation():
    with pytest.raises(ConfigError, match="d not divisible"):
        validate_config(ModelConfig(d=100, num_heads=8, mask_ratio=2.0))


def test_desk_profile_shape():
    cfg = desk_profile()
    assert (cfg.d, cfg.num_encoder_blocks, cfg.image_size, cfg.patch, cfg.temporal_length) == (64, 2, (64, 64), (8, 8), 5)


def test_every_key_documented():
    assert set(CONFIG_KEYS) == set(ModelConfig().to_dict())


def test_config_file_round_trip(tmp_path):
    cfg = desk_profile(seed=3, pos_embed_kind="peg", patch=(4, 4))
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_config_file_partial_uses_base(tmp_path):
    (tmp_path / "c.yaml").write_text("gamma: 0.5\npatch: 4\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.gamma == 0.5 and cfg.patch == (4, 4) and cfg.d == desk_profile().d


def test_config_file_unknown_key(tmp_path):
    (tmp_path / "c.yaml").write_text("gamma: 0.5\ngamm: 0.5\n")
    with pytest.raises(ConfigError, match="gamm"):
        load_config(tmp_path / "c.yaml")


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]))
def test_patch_geometry_counts(r, c, h, w):
    g = PatchGeometry(r * h, c * w, h, w)
    assert g.N == g.grid_rows * g.grid_cols
    assert (g.grid_rows, g.grid_cols) == (r, c)
    assert g.N * h * w == g.H * g.W


def test_patch_geometry_rejects_indivisible():
    with pytest.raises(ValueError):
        PatchGeometry(30, 32, 8, 8)


def test_frame_sequence_invariants():
    FrameSequence(np.zeros((2, 8, 8, 3), np.float32))
    with pytest.raises(ValueError):
        FrameSequence(np.zeros((1, 8, 8, 3), np.float32))
    bad = np.zeros((2, 8, 8, 3), np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        FrameSequence(bad)


def test_frame_sequence_is_immutable():
    seq = FrameSequence(np.zeros((2, 8, 8, 3), np.float32))
    with pytest.raises(ValueError):
        seq.frames[0, 0, 0, 0] = 1.0


def test_token_grid_checks_count():
    g = PatchGeometry(16, 16, 8, 8)
    TokenGrid(np.zeros((4, 6), np.float32), g)
    with pytest.raises(ValueError):
        TokenGrid(np.zeros((5, 6), np.float32), g)


def test_flow_field_valid_default_and_nonfinite():
    f = np.zeros((4, 4, 2), np.float32)
    f[0, 0] = np.nan
    field = FlowField(f)
    assert not field.valid[0, 0] and field.valid.sum() == 15
    with pytest.raises(ValueError):
        FlowField(f, valid=np.ones((4, 4), bool))


def test_occlusion_mask_shape_match():
    m = OcclusionMask(np.zeros((4, 4), bool))
    m.check_matches(FlowField(np.zeros((4, 4, 2), np.float32)))
    with pytest.raises(ValueError):
        m.check_matches(FlowField(np.zeros((4, 5, 2), np.float32)))
