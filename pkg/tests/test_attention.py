import numpy as np
import pytest

from selectpack import numerics as nm
from selectpack.attention import (
    BlockParams,
    dense_msa_block,
    relative_position_index,
    spa_block,
    spa_stage,
    window_attention_block,
)
from selectpack.numerics import Tensor
from selectpack.selection import GateParams
from selectpack.types import ModelConfig, ScoreMap, TokenGrid


def tiny_cfg(window=2, **kw):
    # geometry fields are irrelevant for single-block tests; selection ones matter
    return ModelConfig(
        height=64 * window // 2,
        width=64 * window // 2,
        window_size=window,
        package_len=window * window,
        depths=(2, 2, 2, 2),
        heads=(1, 2, 4, 8),
        embed_dim=8,
        **kw,
    )


def zero_out_projections(p: BlockParams):
    p.proj_w.data[:] = 0
    p.proj_b.data[:] = 0
    p.fc2_w.data[:] = 0
    p.fc2_b.data[:] = 0


class TestWindowBlock:
    def test_zero_weights_residual_identity(self):
        rng = np.random.default_rng(0)
        params = BlockParams.init(8, 2, rng, window=2)
        zero_out_projections(params)
        x = rng.normal(size=(2, 4, 4, 8)).astype(np.float32)
        out = window_attention_block(TokenGrid(Tensor(x)), params, shifted=False, window=2)
        np.testing.assert_array_equal(out.values.data, x)

    def test_single_window_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            m = int(rng.choice([2, 4]))
            c = int(rng.choice([4, 8]))
            params = BlockParams.init(c, 2, rng, window=m)
            params.rel_bias.data[:] = 0  # dense oracle carries no positional bias
            x = rng.normal(size=(1, m, m, c)).astype(np.float32)
            out = window_attention_block(TokenGrid(Tensor(x)), params, shifted=False, window=m)
            expect = dense_msa_block(Tensor(x.reshape(1, m * m, c)), params)
            np.testing.assert_allclose(out.values.data.reshape(1, -1, c), expect.data, rtol=1e-6, atol=1e-6)

    def test_constant_input_preserved_through_shift_pair(self):
        rng = np.random.default_rng(2)
        params = BlockParams.init(6, 2, rng, window=2)
        const = np.tile(np.full(6, 0.0, dtype=np.float32), (1, 6, 6, 1))
        grid = TokenGrid(Tensor(const))
        out = window_attention_block(grid, params, shifted=False, window=2)
        out = window_attention_block(out, params, shifted=True, window=2)
        np.testing.assert_allclose(out.values.data, const, atol=1e-6)

    def test_shift_roundtrip_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 6, 6, 3)).astype(np.float32))
        back = nm.roll2d(nm.roll2d(x, -1, -1), 1, 1)
        np.testing.assert_array_equal(back.data, x.data)

    def test_shifted_block_differs_from_unshifted(self):
        rng = np.random.default_rng(4)
        params = BlockParams.init(4, 1, rng, window=2)
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        a = window_attention_block(TokenGrid(Tensor(x)), params, shifted=False, window=2)
        b = window_attention_block(TokenGrid(Tensor(x)), params, shifted=True, window=2)
        assert not np.allclose(a.values.data, b.values.data)

    def test_relative_index_shape_and_range(self):
        idx = relative_position_index(3)
        assert idx.shape == (9, 9)
        assert idx.min() >= 0 and idx.max() < 25
        assert (idx.T == idx[::-1, ::-1].T[::-1, ::-1]).all()  # symmetry under pair swap + reflection


def full_selection_gate(c, dtype=np.float32):
    """Gate that always selects: zero weight, strongly positive bias."""
    return GateParams(nm.param(np.zeros((c, 1)), dtype=dtype), nm.param(np.full(1, 60.0), dtype=dtype))


def blocking_gate(c, dtype=np.float32):
    return GateParams(nm.param(np.zeros((c, 1)), dtype=dtype), nm.param(np.full(1, -60.0), dtype=dtype))


class TestSpaBlock:
    def test_full_selection_matches_dense_block_on_gated_input(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            m = int(rng.choice([2, 4]))
            c = int(rng.choice([4, 8, 16]))
            cfg = tiny_cfg(window=m)
            params = BlockParams.init(c, 2, rng)
            gate = GateParams.init(c, rng)
            x = rng.normal(size=(1, m, m, c)).astype(np.float32)
            out, smap, mask = spa_block(TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=False, mode="eval")
            assert mask.keep.all()  # default tau is generous; near-zero logits select
            # oracle: dense pre-norm block applied to the gated representation
            z = nm.layer_norm(Tensor(x), params.norm1_gamma, params.norm1_beta)
            scores = nm.linear(z, gate.weight, gate.bias)
            r_g = nm.mul(Tensor(x), nm.sigmoid(scores))
            expect = dense_msa_block(nm.reshape(r_g, (1, m * m, c)), params)
            np.testing.assert_allclose(out.values.data.reshape(1, -1, c), expect.data, rtol=1e-5, atol=1e-5)

    def test_no_selection_skips_attention(self):
        rng = np.random.default_rng(6)
        cfg = tiny_cfg(window=2)
        c = 8
        params = BlockParams.init(c, 2, rng)
        gate = blocking_gate(c)
        x = rng.normal(size=(2, 4, 4, c)).astype(np.float32)
        out, smap, mask = spa_block(TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=False, mode="eval")
        assert mask.num_selected == 0
        r_g = nm.mul(Tensor(x), nm.sigmoid(Tensor(np.full((2, 4, 4, 1), -60.0))))
        z2 = nm.layer_norm(r_g, params.norm2_gamma, params.norm2_beta)
        from selectpack.attention import feed_forward

        expect = nm.add(r_g, feed_forward(z2, params))
        np.testing.assert_allclose(out.values.data, expect.data, rtol=1e-6, atol=1e-6)

    def test_zero_projections_yield_gated_representation(self):
        rng = np.random.default_rng(7)
        cfg = tiny_cfg(window=2)
        params = BlockParams.init(4, 1, rng)
        zero_out_projections(params)
        gate = GateParams.init(4, rng)
        x = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        out, smap, _ = spa_block(TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=False, mode="eval")
        expect = x * (1 / (1 + np.exp(-smap.logits.data)))
        np.testing.assert_allclose(out.values.data, expect, rtol=1e-5, atol=1e-6)

    def test_fixed_seed_bit_identical(self):
        rng = np.random.default_rng(8)
        cfg = tiny_cfg(window=2)
        params = BlockParams.init(4, 1, rng)
        gate = GateParams.init(4, rng)
        x = rng.normal(size=(2, 4, 4, 4)).astype(np.float32)

        def run():
            out, _, mask = spa_block(
                TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=False, mode="train", rng=np.random.default_rng(123)
            )
            return out.values.data, mask.keep

        o1, k1 = run()
        o2, k2 = run()
        np.testing.assert_array_equal(o1, o2)
        np.testing.assert_array_equal(k1, k2)

    def test_cross_image_isolation_exact(self):
        rng = np.random.default_rng(9)
        cfg = tiny_cfg(window=2)
        c = 8
        params = BlockParams.init(c, 2, rng)
        gate = GateParams.init(c, rng)
        x = rng.normal(size=(2, 4, 4, c)).astype(np.float32)
        zeroed = x.copy()
        zeroed[1] = 0.0
        for shifted in (False, True):
            out_a, _, _ = spa_block(TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=shifted, mode="eval")
            out_b, _, _ = spa_block(TokenGrid(Tensor(zeroed)), None, params, gate, cfg, shifted=shifted, mode="eval")
            np.testing.assert_array_equal(out_a.values.data[0], out_b.values.data[0])

    def test_shifted_scores_return_in_original_coordinates(self):
        rng = np.random.default_rng(10)
        cfg = tiny_cfg(window=2)
        c = 4
        params = BlockParams.init(c, 1, rng)
        # gate keys on channel 0 so the score map mirrors the input pattern
        gate = GateParams(nm.param(np.eye(c)[:, :1] * 5.0), nm.param(np.zeros(1)))
        x = np.zeros((1, 4, 4, c), dtype=np.float32)
        x[0, 1, 2, 0] = 50.0  # single hot token
        _, smap_plain, _ = spa_block(TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=False, mode="eval")
        _, smap_shift, _ = spa_block(TokenGrid(Tensor(x)), None, params, gate, cfg, shifted=True, mode="eval")
        hot_plain = np.unravel_index(np.argmax(smap_plain.logits.data[0, :, :, 0]), (4, 4))
        hot_shift = np.unravel_index(np.argmax(smap_shift.logits.data[0, :, :, 0]), (4, 4))
        assert hot_plain == hot_shift == (1, 2)

    def test_gradient_full_block_frozen_noise(self):
        rng = np.random.default_rng(11)
        cfg = tiny_cfg(window=2)
        c = 6
        params = BlockParams.init(c, 2, rng, dtype=np.float64)
        gate = GateParams.init(c, rng, dtype=np.float64)
        # scale weights up so no sampled gradient sits below the FD noise floor
        for t in (params.qkv_w, params.proj_w, params.fc1_w, params.fc2_w, gate.weight):
            t.data *= 8.0
        x = rng.normal(size=(2, 4, 4, c))
        up = rng.normal(size=(2, 8, 8, 1))
        x_t = nm.param(x, dtype=np.float64)

        def f():
            out, smap, _ = spa_block(
                TokenGrid(x_t),
                ScoreMap(Tensor(up, dtype=np.float64)),
                params,
                gate,
                cfg,
                shifted=True,
                mode="train",
                rng=np.random.default_rng(77),
                st_hard=False,
            )
            return nm.add(nm.mean_all(out.values), nm.mean_all(smap.logits))

        err = nm.finite_diff_check(f, [x_t, gate.weight, gate.bias, params.qkv_w, params.proj_w, params.fc1_w, params.norm1_gamma], max_coords=12)
        assert err < 1e-4


class TestSpaStage:
    def test_stage_contract(self):
        rng = np.random.default_rng(12)
        cfg = tiny_cfg(window=2)
        c = 8
        blocks = [BlockParams.init(c, 2, rng) for _ in range(4)]
        gates = [GateParams.init(c, rng) for _ in range(4)]
        x = rng.normal(size=(2, 4, 4, c)).astype(np.float32)
        s_in = ScoreMap(Tensor(rng.normal(size=(2, 8, 8, 1)).astype(np.float32)))
        grid, last, maps, sels = spa_stage(TokenGrid(Tensor(x)), s_in, blocks, gates, cfg, mode="eval")
        assert len(maps) == 4 and len(sels) == 4
        np.testing.assert_array_equal(last.logits.data, maps[-1].logits.data)

    def test_identity_blocks_return_fused_bias_scores(self):
        rng = np.random.default_rng(13)
        cfg = tiny_cfg(window=2)
        c = 4
        blocks = []
        gates = []
        for _ in range(2):
            bp = BlockParams.init(c, 1, rng)
            zero_out_projections(bp)
            blocks.append(bp)
            gates.append(GateParams(nm.param(np.zeros((c, 1))), nm.param(np.full(1, 0.25))))
        x = rng.normal(size=(1, 4, 4, c)).astype(np.float32)
        s_in = ScoreMap(Tensor(np.full((1, 8, 8, 1), -3.0, dtype=np.float32)))
        grid, last, maps, _ = spa_stage(TokenGrid(Tensor(x)), s_in, blocks, gates, cfg, mode="eval")
        # pooled s_in (-3) loses the max against the 0.25 gate bias everywhere
        np.testing.assert_allclose(last.logits.data, np.full((1, 4, 4, 1), 0.25), rtol=1e-6)

    def test_odd_depth_rejected(self):
        cfg = tiny_cfg(window=2)
        with pytest.raises(ValueError):
            spa_stage(TokenGrid(Tensor(np.zeros((1, 4, 4, 4)))), None, [None], [None], cfg)
