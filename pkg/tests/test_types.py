import numpy as np
import pytest

from selectpack.numerics import Tensor
from selectpack.types import (
    ConfigError,
    ModelConfig,
    ScoreMap,
    SelectionMask,
    SelectLabelPyramid,
    TokenGrid,
    dump_config,
    micro_config,
    parse_config_text,
    pyramid_nesting_holds,
    validate_config,
)


class TestValidateConfig:
    def test_default_desk_config_ok(self):
        validate_config(ModelConfig())

    def test_documented_ok_case(self):
        validate_config(ModelConfig(height=256, width=256, embed_dim=24, window_size=4, package_len=16, depths=(2, 2, 4, 2)))

    def test_package_len_must_be_window_squared(self):
        with pytest.raises(ConfigError, match="window_size squared"):
            validate_config(ModelConfig(package_len=15))

    def test_odd_depth_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            validate_config(ModelConfig(depths=(2, 2, 3, 2)))

    def test_grid_divisibility(self):
        with pytest.raises(ConfigError, match="height"):
            validate_config(ModelConfig(height=250))
        with pytest.raises(ConfigError, match="window_size"):
            validate_config(ModelConfig(height=96, width=96))  # 96/32=3 not divisible by 4

    def test_alpha_tau_temp_ranges(self):
        with pytest.raises(ConfigError, match="alpha"):
            validate_config(ModelConfig(alpha=0.0))
        with pytest.raises(ConfigError, match="tau"):
            validate_config(ModelConfig(tau=1.0))
        with pytest.raises(ConfigError, match="temp"):
            validate_config(ModelConfig(temp=0.0))

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError, match="heads"):
            validate_config(ModelConfig(heads=(5, 4, 8, 16)))

    def test_stage_shapes(self):
        cfg = ModelConfig()
        assert cfg.stage_dim(1) == 24 and cfg.stage_dim(4) == 192
        assert cfg.stage_grid(1) == (64, 64) and cfg.stage_grid(4) == (8, 8)
        assert cfg.label_grid(0) == (32, 32) and cfg.label_grid(2) == (8, 8)

    def test_micro_config_valid(self):
        validate_config(micro_config())


class TestConfigFile:
    def test_roundtrip(self):
        cfg = micro_config(seed=7, alpha=0.5)
        assert parse_config_text(dump_config(cfg)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("heigth=256\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config_text("height=tall\n")

    def test_comments_and_blanks(self):
        cfg = parse_config_text("# comment\n\nembed_dim=32\n")
        assert cfg.embed_dim == 32

    def test_invalid_parsed_config_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("package_len=9\n")


class TestValueTypes:
    def test_token_grid_properties(self):
        g = TokenGrid(Tensor(np.zeros((2, 4, 6, 8))))
        assert (g.batch, g.h, g.w, g.channels, g.tokens) == (2, 4, 6, 8, 24)

    def test_token_grid_rank_checked(self):
        with pytest.raises(ValueError):
            TokenGrid(Tensor(np.zeros((2, 4, 6))))

    def test_score_map_channel_checked(self):
        with pytest.raises(ValueError):
            ScoreMap(Tensor(np.zeros((1, 4, 4, 2))))

    def test_pyramid_nesting(self):
        lv0 = np.zeros((8, 8), dtype=np.uint8)
        lv0[:2, :2] = 1
        lv1 = np.zeros((4, 4), dtype=np.uint8)
        lv1[0, 0] = 1
        lv2 = np.zeros((2, 2), dtype=np.uint8)
        lv2[0, 0] = 1
        p = SelectLabelPyramid((lv0, lv1, lv2))
        assert pyramid_nesting_holds(p)

    def test_pyramid_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SelectLabelPyramid((np.zeros((8, 8)), np.zeros((4, 4)), np.zeros((3, 3))))

    def test_pyramid_nonbinary_rejected(self):
        with pytest.raises(ValueError):
            SelectLabelPyramid((np.full((8, 8), 0.5), np.zeros((4, 4)), np.zeros((2, 2))))

    def test_selection_mask(self):
        keep = np.zeros((2, 2, 2), dtype=bool)
        keep[0, 0, 0] = True
        m = SelectionMask(keep, Tensor(np.full((2, 2, 2, 1), 0.5)))
        assert m.num_selected == 1
        assert m.ratio == pytest.approx(1 / 8)
        np.testing.assert_array_equal(m.per_image_counts(), [1, 0])

    def test_selection_mask_prob_range(self):
        with pytest.raises(ValueError):
            SelectionMask(np.zeros((1, 2, 2), dtype=bool), Tensor(np.full((1, 2, 2, 1), 1.5)))
