import math

import numpy as np
import pytest
import torch

from pathfusion.deform import MultiHeadAttention, OffsetNetwork, bilinear_sample, uniform_reference_grid

from helpers import bilinear_oracle


class TestReferenceGrid:
    def test_spans_unit_square(self):
        ref = uniform_reference_grid(4, 4)
        assert ref.shape == (4, 4, 2)
        assert torch.allclose(ref[0, 0], torch.tensor([-1.0, -1.0]))
        assert torch.allclose(ref[-1, -1], torch.tensor([1.0, 1.0]))
        assert torch.allclose(ref[:, 0, 0], torch.linspace(-1, 1, 4))

    def test_singleton_axis_centered(self):
        ref = uniform_reference_grid(1, 3)
        assert torch.all(ref[..., 0] == 0)


class TestBilinearSample:
    def _grid(self, h, w, c=3, seed=0):
        g = torch.from_numpy(np.random.default_rng(seed).normal(size=(1, h, w, c))).float()
        return g

    def test_exact_patch_center(self):
        grid = self._grid(3, 3)
        # normalized coordinates of patch (1, 2) on a 3x3 grid
        point = torch.tensor([[[0.0, 1.0]]])
        out = bilinear_sample(grid, point)
        assert torch.allclose(out[0, 0], grid[0, 1, 2])

    def test_corner_returns_corner_patch(self):
        grid = self._grid(4, 5)
        out = bilinear_sample(grid, torch.tensor([[[-1.0, -1.0]]]))
        assert torch.allclose(out[0, 0], grid[0, 0, 0])

    def test_midpoint_of_adjacent_centers_is_mean(self):
        grid = self._grid(2, 3)
        # halfway between patches (0,0) and (0,1) on a 3-wide grid: col 0.5 -> x = -0.5
        out = bilinear_sample(grid, torch.tensor([[[-1.0, -0.5]]]))
        expected = (grid[0, 0, 0] + grid[0, 0, 1]) / 2
        assert torch.allclose(out[0, 0], expected, atol=1e-6)

    def test_matches_four_term_oracle(self):
        grid = self._grid(2, 2, c=4, seed=3)
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = rng.uniform(-1, 1, size=2)
            out = bilinear_sample(grid, torch.tensor([[p.tolist()]], dtype=torch.float32))
            expected = bilinear_oracle(grid[0].numpy(), (p[0], p[1]))
            np.testing.assert_allclose(out[0, 0].numpy(), expected, atol=1e-6)

    def test_out_of_range_points_clamped(self):
        grid = self._grid(3, 3)
        out_far = bilinear_sample(grid, torch.tensor([[[-9.0, -9.0]]]))
        assert torch.allclose(out_far[0, 0], grid[0, 0, 0])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            bilinear_sample(torch.zeros(2, 2, 2), torch.zeros(1, 1, 2))


def _gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _conv3x3_oracle(inp, weight, bias):
    """Zero-padded 3x3 convolution, (C_in, H, W) -> (C_out, H, W)."""
    c_out, c_in, _, _ = weight.shape
    _, h, w = inp.shape
    out = np.zeros((c_out, h, w))
    for co in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = bias[co]
                for ci in range(c_in):
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ii, jj = i + di, j + dj
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += weight[co, ci, di + 1, dj + 1] * inp[ci, ii, jj]
                out[co, i, j] = acc
    return out


class TestOffsetNetwork:
    def test_zero_params_give_zero_offsets(self):
        net = OffsetNetwork(channels=4, ref_h=2, ref_w=2, scale=0.5)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        offsets = net(torch.randn(3, 2, 2, 4))
        assert torch.all(offsets == 0)

    def test_offsets_bounded_by_scale(self):
        net = OffsetNetwork(channels=4, ref_h=2, ref_w=2, scale=0.3)
        with torch.no_grad():
            for p in net.parameters():
                p.mul_(50.0)
        offsets = net(100.0 * torch.randn(5, 2, 2, 4))
        assert offsets.abs().max() <= 0.3 + 1e-6

    def test_matches_hand_computed_conv_arithmetic(self):
        torch.manual_seed(0)
        net = OffsetNetwork(channels=1, ref_h=2, ref_w=2, scale=0.5).double()
        grid = torch.randn(1, 2, 2, 1, dtype=torch.float64)
        with torch.no_grad():
            got = net(grid)[0].numpy()

        inp = grid[0, :, :, 0].numpy()[None]
        w1 = net.conv1.weight.detach().numpy()
        b1 = net.conv1.bias.detach().numpy()
        w2 = net.conv2.weight.detach().numpy()[:, :, 0, 0]
        b2 = net.conv2.bias.detach().numpy()
        hidden = np.vectorize(_gelu)(_conv3x3_oracle(inp, w1, b1))
        pre = np.einsum("oc,chw->ohw", w2, hidden) + b2[:, None, None]
        expected = 0.5 * np.tanh(pre).transpose(1, 2, 0)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_pools_larger_grids_to_reference(self):
        net = OffsetNetwork(channels=4, ref_h=2, ref_w=2, scale=0.5)
        offsets = net(torch.randn(1, 8, 8, 4))
        assert offsets.shape == (1, 2, 2, 2)


class TestMultiHeadAttention:
    def test_uniform_softmax_over_two_keys(self):
        torch.manual_seed(1)
        attn = MultiHeadAttention(4, 1)
        with torch.no_grad():
            attn.w_q.weight.zero_()  # all logits 0 -> uniform attention
        queries = torch.randn(1, 1, 4)
        keys = torch.randn(1, 2, 4)
        out, weights = attn(queries, keys)
        assert torch.allclose(weights, torch.full((1, 1, 2), 0.5))
        mean_v = attn.w_v(keys).mean(dim=1)
        assert torch.allclose(out[0], attn.w_o(mean_v), atol=1e-6)

    def test_rows_sum_to_one(self):
        torch.manual_seed(2)
        attn = MultiHeadAttention(8, 2)
        _, weights = attn(torch.randn(3, 5, 8), torch.randn(3, 7, 8))
        assert torch.allclose(weights.sum(-1), torch.ones(3, 5), atol=1e-5)

    def test_hand_evaluated_two_by_two(self):
        attn = MultiHeadAttention(2, 1)
        with torch.no_grad():
            eye = torch.eye(2)
            attn.w_q.weight.copy_(eye)
            attn.w_k.weight.copy_(eye)
            attn.w_v.weight.copy_(eye)
            attn.w_o.weight.copy_(eye)
            attn.w_o.bias.zero_()
        q = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
        kv = torch.tensor([[[1.0, 1.0], [2.0, 0.0]]])
        with torch.no_grad():
            out, _ = attn(q, kv)
        logits = (q[0] @ kv[0].T / math.sqrt(2)).numpy()
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        softmax = e / e.sum(axis=1, keepdims=True)
        expected = softmax @ kv[0].numpy()
        np.testing.assert_allclose(out[0].numpy(), expected, atol=1e-6)

    def test_identical_keys_make_logits_irrelevant(self):
        torch.manual_seed(3)
        attn = MultiHeadAttention(6, 2)
        queries = torch.randn(2, 4, 6)
        key = torch.randn(2, 1, 6).expand(2, 5, 6)
        out1, _ = attn(queries, key)
        with torch.no_grad():
            attn.w_q.weight.mul_(3.0)  # changes logits, not the output
        out2, _ = attn(queries, key)
        assert torch.allclose(out1, out2, atol=1e-5)

    def test_key_permutation_invariance(self):
        torch.manual_seed(4)
        attn = MultiHeadAttention(8, 2)
        queries = torch.randn(1, 3, 8)
        keys = torch.randn(1, 6, 8)
        out1, _ = attn(queries, keys)
        perm = torch.randperm(6)
        out2, _ = attn(queries, keys[:, perm])
        assert torch.allclose(out1, out2, atol=1e-5)

    def test_width_mismatch_rejected(self):
        attn = MultiHeadAttention(8, 2)
        with pytest.raises(ValueError):
            attn(torch.randn(1, 2, 4), torch.randn(1, 2, 8))
