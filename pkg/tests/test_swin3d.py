import numpy as np
import pytest
from oracles import attention_scalar

from morphkit import swin3d
from morphkit.gradcheck import directional_error
from morphkit.swin3d import (
    BlockDropout,
    SwinNetParams,
    SwinParams,
    make_plan,
    patch_embed,
    patch_merge,
    swin_block,
    swin_forward,
    swin_vjp,
    window_attention,
    window_partition,
    window_reverse,
)
from morphkit.volume import VolumeError


def set_array(net, name, value):
    """Copy of ``net`` with the array called ``name`` replaced."""
    out = swin3d._map_arrays(net, np.copy)
    parts = name.split(".")
    if parts[0] == "pairs":
        setattr(out.pairs[int(parts[1])][int(parts[2])], parts[3], value)
    else:
        setattr(out, name, value)
    return out


class TestPatchEmbed:
    def test_zero_input(self, rng):
        w = rng.standard_normal((16, 5))
        tokens, _ = patch_embed(np.zeros((2, 4, 6, 8)), 2, w)
        assert tokens.shape == (2, 3, 4, 5) and not tokens.any()

    def test_token_grid(self):
        assert swin3d.token_grid_shape((160, 192, 224), 4) == (40, 48, 56)
        assert swin3d.token_grid_shape((5, 6, 7), 2) == (3, 3, 4)

    def test_single_voxel_touches_one_token(self, rng):
        pair = np.zeros((2, 8, 8, 8))
        pair[1, 5, 2, 7] = 1.0
        tokens, _ = patch_embed(pair, 4, rng.standard_normal((128, 3)))
        hit = np.argwhere(np.abs(tokens).sum(-1) > 0)
        assert hit.tolist() == [[1, 0, 1]]

    def test_patch_layout(self, rng):
        pair = rng.random((2, 4, 4, 4))
        w = rng.standard_normal((16, 3))
        tokens, _ = patch_embed(pair, 2, w)
        patch = pair[:, 2:4, 0:2, 2:4].reshape(-1)
        assert np.allclose(tokens[1, 0, 1], patch @ w, atol=1e-12)

    def test_vjp(self, rng):
        pair, w = rng.random((2, 5, 4, 3)), rng.standard_normal((16, 4))
        tokens, cache = patch_embed(pair, 2, w)
        g = rng.standard_normal(tokens.shape)
        gx, gw, _ = swin3d.patch_embed_vjp(cache, g, w)
        f = lambda x: np.sum(g * patch_embed(x, 2, w)[0])
        assert directional_error(f, pair, gx, rng, h=1e-6) <= 1e-4
        fw = lambda x: np.sum(g * patch_embed(pair, 2, x)[0])
        assert directional_error(fw, w, gw, rng, h=1e-6) <= 1e-4


class TestPartition:
    def test_figure_configuration(self, rng):
        tokens = rng.standard_normal((4, 8, 12, 3))
        plain, p0 = window_partition(tokens, (2, 4, 6), "none")
        shifted, p1 = window_partition(tokens, (2, 4, 6), "half")
        assert plain.shape == (8, 48, 3) and shifted.shape == (8, 48, 3)
        assert p0.mask is None
        assert len(np.unique(p1.region)) == 27
        assert p1.shift == (1, 2, 3)

    def test_windows_are_contiguous_blocks(self, rng):
        tokens = rng.standard_normal((4, 8, 12, 2))
        wins, _ = window_partition(tokens, (2, 4, 6), "none")
        # window ordering is x-major, tokens within a window are z-fastest
        assert np.array_equal(wins[3], tokens[0:2, 4:8, 6:12].reshape(-1, 2))

    def test_shifted_windows_after_roll(self, rng):
        tokens = rng.standard_normal((4, 8, 12, 2))
        wins, _ = window_partition(tokens, (2, 4, 6), "half")
        rolled = np.roll(tokens, (-1, -2, -3), axis=(0, 1, 2))
        assert np.array_equal(wins[0], rolled[0:2, 0:4, 0:6].reshape(-1, 2))

    @pytest.mark.parametrize("grid", [(4, 8, 12), (5, 7, 9), (1, 3, 2)])
    def test_reverse_identity(self, rng, grid):
        tokens = rng.standard_normal(grid + (3,))
        for shift in ("none", "half"):
            wins, plan = window_partition(tokens, (2, 4, 6), shift)
            assert np.array_equal(window_reverse(wins, plan), tokens)

    def test_padded_keys_masked(self):
        plan = make_plan((5, 4, 4), (2, 2, 2), False)
        assert plan.padded == (6, 4, 4)
        assert plan.mask is not None and plan.mask.min() <= -1e8

    def test_window_clamped_to_grid(self):
        plan = make_plan((1, 3, 2), (2, 4, 6), True)
        assert plan.window == (1, 3, 2) and plan.shift == (0, 0, 0)

    def test_relative_index_range(self):
        idx = swin3d.relative_position_index((2, 4, 6), (2, 4, 6))
        assert idx.min() == 0 and idx.max() == 3 * 7 * 11 - 1
        assert np.all(np.diag(idx) == idx[0, 0])

    def test_relative_index_brute(self):
        win = (2, 3, 2)
        coords = list(np.ndindex(*win))
        idx = swin3d.relative_position_index(win, win)
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                d = [a[k] - b[k] + win[k] - 1 for k in range(3)]
                assert idx[i, j] == (d[0] * 5 + d[1]) * 3 + d[2]

    def test_bad_shift(self, rng):
        with pytest.raises(VolumeError):
            window_partition(rng.standard_normal((2, 2, 2, 1)), 2, "quarter")


class TestAttention:
    def test_zero_values_give_bias_only(self, rng):
        params = SwinParams.init(4, 2, (2, 2, 2), rng, scale=0.5)
        params.qkv_w[:, 8:] = 0.0
        params.qkv_b[8:] = 0.0
        wins, plan = window_partition(rng.standard_normal((2, 2, 2, 4)), 2)
        out, _ = window_attention(wins, params, plan)
        assert np.allclose(out, params.proj_b, atol=1e-14)

    def test_singleton_window_returns_value(self, rng):
        params = SwinParams.init(4, 1, (1, 1, 1), rng, scale=0.5)
        x = rng.standard_normal((3, 2, 2, 4))
        wins, plan = window_partition(x, 1)
        out, _ = window_attention(wins, params, plan)
        v = wins @ params.qkv_w[:, 8:] + params.qkv_b[8:]
        assert np.allclose(out, v @ params.proj_w + params.proj_b, atol=1e-12)

    def test_scalar_oracle(self, rng):
        c = 3
        params = SwinParams.init(c, 1, (2, 1, 1), rng, scale=0.7)
        x = rng.standard_normal((2, 1, 1, c))
        wins, plan = window_partition(x, (2, 1, 1))
        out, _ = window_attention(wins, params, plan)
        w, b = params.qkv_w, params.qkv_b
        bias = params.bias_table[0][plan.rel_index]
        want = attention_scalar(
            x.reshape(2, c).tolist(), w[:, :c].tolist(), w[:, c:2 * c].tolist(), w[:, 2 * c:].tolist(),
            b[:c].tolist(), b[c:2 * c].tolist(), b[2 * c:].tolist(), bias.tolist(),
            params.proj_w.tolist(), params.proj_b.tolist(),
        )
        assert np.abs(out[0] - np.array(want)).max() <= 1e-6

    def test_rows_and_mask(self, rng):
        params = SwinParams.init(4, 2, (2, 4, 6), rng, scale=0.5)
        wins, plan = window_partition(rng.standard_normal((4, 8, 12, 4)), (2, 4, 6), "half")
        _, _, attn = window_attention(wins, params, plan, return_weights=True)
        assert np.abs(attn.sum(-1) - 1.0).max() <= 1e-6
        blocked = np.broadcast_to((plan.mask < 0)[:, None], attn.shape)
        assert blocked.any() and attn[blocked].max() <= 1e-8

    def test_channel_mismatch(self, rng):
        params = SwinParams.init(4, 2, 2, rng)
        wins, plan = window_partition(rng.standard_normal((2, 2, 2, 6)), 2)
        with pytest.raises(VolumeError):
            window_attention(wins, params, plan)

    def test_heads_must_divide(self, rng):
        with pytest.raises(VolumeError):
            SwinParams.init(5, 2, 2, rng)


class TestBlock:
    def test_zero_branches_are_identity(self, rng):
        params = SwinParams.init(4, 2, (2, 2, 2), rng, scale=0.5)
        for name in ("proj_w", "proj_b", "fc2_w", "fc2_b"):
            getattr(params, name)[...] = 0.0
        z = rng.standard_normal((4, 4, 4, 4))
        for shifted in (False, True):
            assert np.array_equal(swin_block(z, params, shifted)[0], z)

    def test_keep_all_dropout(self, rng):
        params = SwinParams.init(4, 2, (2, 2, 2), rng, scale=0.5)
        z = rng.standard_normal((4, 4, 4, 4))
        drop = BlockDropout.keep_all((4, 4, 4), 4, 16)
        assert np.array_equal(swin_block(z, params, True, drop)[0], swin_block(z, params, True)[0])

    def test_dropout_probability_range(self, rng):
        with pytest.raises(VolumeError):
            BlockDropout.sample((2, 2, 2), 4, 16, 1.0, rng)

    def test_dropout_mask_scaling(self, rng):
        d = BlockDropout.sample((10, 10, 10), 4, 16, 0.25, rng)
        assert set(np.unique(d.fc1)) <= {0.0, 1.0 / 0.75}

    def test_block_vjp(self, rng):
        params = SwinParams.init(4, 2, (2, 2, 2), rng, scale=0.4)
        z = rng.standard_normal((3, 4, 4, 4))
        drop = BlockDropout.sample((3, 4, 4), 4, 16, 0.3, rng)
        out, cache = swin_block(z, params, True, drop)
        g = rng.standard_normal(out.shape)
        gz, gp = swin3d.swin_block_vjp(cache, g, params)
        f = lambda x: np.sum(g * swin_block(x, params, True, drop)[0])
        assert directional_error(f, z, gz, rng, h=1e-6) <= 1e-3


class TestPatchMerge:
    def test_shape_law(self, rng):
        red = rng.standard_normal((24, 5))
        out, _ = patch_merge(rng.standard_normal((5, 4, 3, 3)), red)
        assert out.shape == (3, 2, 2, 5)

    def test_constant(self):
        red = np.full((16, 1), 1.0 / 16)
        out, _ = patch_merge(np.full((4, 4, 4, 2), 3.0), red)
        assert np.allclose(out, 3.0, atol=1e-14)

    def test_gather_oracle(self, rng):
        tokens = rng.standard_normal((4, 2, 4, 2))
        red = np.eye(16)
        out, _ = patch_merge(tokens, red)
        want = np.concatenate([tokens[2 + a, b, 2 + c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
        assert np.array_equal(out[1, 0, 1], want)

    def test_vjp(self, rng):
        tokens, red = rng.standard_normal((3, 4, 2, 2)), rng.standard_normal((16, 3))
        out, cache = patch_merge(tokens, red)
        g = rng.standard_normal(out.shape)
        gt, gw = swin3d.patch_merge_vjp(cache, g, red)
        f = lambda x: np.sum(g * patch_merge(x, red)[0])
        assert directional_error(f, tokens, gt, rng, h=1e-6) <= 1e-4
        fw = lambda x: np.sum(g * patch_merge(tokens, x)[0])
        assert directional_error(fw, red, gw, rng, h=1e-6) <= 1e-4


class TestNetwork:
    @pytest.fixture
    def net(self):
        return SwinNetParams.init(channels=8, heads=2, window=(2, 2, 2), patch=2, n_pairs=2, seed=5, scale=0.4)

    def test_zero_network(self, net, rng):
        u, _ = swin_forward(net.scaled(0.0), rng.random((2, 6, 6, 6)))
        assert u.shape == (3, 6, 6, 6) and not u.any()

    def test_odd_dims_cropped(self, net, rng):
        u, _ = swin_forward(net, rng.random((2, 5, 7, 3)))
        assert u.shape == (3, 5, 7, 3)

    def test_zero_cotangent(self, net, rng):
        u, tape = swin_forward(net, rng.random((2, 8, 8, 8)))
        gx, gp = swin_vjp(tape, np.zeros_like(u))
        assert not gx.any() and all(not a.any() for _, a in gp.named_arrays())

    def test_input_gradient(self, net, rng):
        x = rng.random((2, 8, 8, 8))
        u, tape = swin_forward(net, x)
        g = rng.standard_normal(u.shape)
        gx, _ = swin_vjp(tape, g)
        f = lambda y: np.sum(g * swin_forward(net, y)[0])
        assert directional_error(f, x, gx, rng, h=1e-6) <= 1e-3

    @pytest.mark.parametrize("name", ["embed_w", "pairs.0.0.qkv_w", "pairs.1.1.bias_table",
                                      "pairs.0.1.norm1_g", "pairs.1.0.fc1_b", "head_w"])
    def test_parameter_gradient(self, net, rng, name):
        x = rng.random((2, 8, 8, 8))
        u, tape = swin_forward(net, x)
        g = rng.standard_normal(u.shape)
        _, grads = swin_vjp(tape, g)
        arr = dict(net.named_arrays())[name]
        garr = dict(grads.named_arrays())[name]
        f = lambda a: np.sum(g * swin_forward(set_array(net, name, a), x)[0])
        assert directional_error(f, arr, garr, rng, h=1e-6) <= 1e-3

    def test_grad_shape_mismatch(self, net, rng):
        _, tape = swin_forward(net, rng.random((2, 4, 4, 4)))
        with pytest.raises(VolumeError):
            swin_vjp(tape, np.zeros((3, 4, 4, 5)))

    def test_save_load_round_trip(self, net, tmp_path, rng):
        swin3d.save_params(net, tmp_path / "net")
        back = swin3d.load_params(tmp_path / "net")
        for (n1, a1), (n2, a2) in zip(net.named_arrays(), back.named_arrays()):
            assert n1 == n2 and np.array_equal(a1, a2)
        x = rng.random((2, 4, 4, 4))
        assert np.array_equal(swin_forward(net, x)[0], swin_forward(back, x)[0])

    def test_truncated_blob(self, net, tmp_path):
        swin3d.save_params(net, tmp_path / "net")
        blob = (tmp_path / "net.bin").read_bytes()
        (tmp_path / "net.bin").write_bytes(blob[:-8])
        with pytest.raises(VolumeError):
            swin3d.load_params(tmp_path / "net")
