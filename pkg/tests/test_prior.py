"""Feature extraction, fusion, and codebook quantization."""

import numpy as np
import pytest

from vxs import autodiff as ad
from vxs.autodiff import Tensor
from vxs.errors import ArgumentError, DimensionError, ShapeError, StateError
from vxs.nn import ParamStore
from vxs.prior import (Codebook, PriorConfig, extract_features, extractor_param_shapes,
                       fuse, fuse_graph, fusion_param_shapes, init_extractor_params,
                       init_fusion_params, nearest_codewords, quantization_loss, quantize,
                       quantize_st, reset_dead_codes)
from vxs.volume import Volume, synth_volume

from conftest import brute_nearest

RNG = np.random.default_rng(17)
CFG = PriorConfig(width=16, codebook_size=8, tokens_per_branch=4, bottleneck_tokens=2)


def zero_extractor(cfg):
    ps = ParamStore()
    for name, shape in extractor_param_shapes(cfg).items():
        ps.add(name, np.zeros(shape, dtype=np.float32))
    return ps


class TestExtractFeatures:
    def test_zero_encoder_zero_embeddings(self):
        v = synth_volume("mixed", (8, 8, 8), 0)
        out = extract_features(v, zero_extractor(CFG), CFG)
        assert out.shape == (CFG.tokens_per_branch, CFG.width)
        assert np.all(out == 0.0)

    def test_single_voxel_difference_changes_embeddings(self):
        params = init_extractor_params(CFG, RNG)
        v1 = synth_volume("mixed", (8, 8, 8), 1)
        data = v1.data.copy()
        data[3, 4, 5] += 0.25
        v2 = Volume(data, value_range=(0.0, 1.0))
        e1 = extract_features(v1, params, CFG)
        e2 = extract_features(v2, params, CFG)
        assert not np.array_equal(e1, e2)

    def test_token_grid_shape(self):
        cfg = PriorConfig(width=16, codebook_size=8, tokens_per_branch=8, bottleneck_tokens=2)
        params = init_extractor_params(cfg, RNG)
        v = synth_volume("smooth_blobs", (16, 64, 64), 2)
        # stride 8 -> (2, 8, 8) = 128 pooled cells, grouped into 8 tokens
        out = extract_features(v, params, cfg)
        assert out.shape == (8, 16)

    def test_indivisible_dims_rejected(self):
        params = init_extractor_params(CFG, RNG)
        with pytest.raises(DimensionError):
            extract_features(synth_volume("mixed", (4, 8, 8), 0), params, CFG)

    def test_pool_groups_must_divide(self):
        cfg = PriorConfig(width=16, codebook_size=8, tokens_per_branch=3, bottleneck_tokens=2)
        params = init_extractor_params(cfg, RNG)
        with pytest.raises(DimensionError):
            extract_features(synth_volume("mixed", (8, 8, 8), 0), params, cfg)


def identity_fusion(cfg):
    """All projections identity, positions/bottleneck zero, LN affine neutral."""
    ps = ParamStore()
    for name, shape in fusion_param_shapes(cfg).items():
        if name.endswith("ln/g"):
            ps.add(name, np.ones(shape, dtype=np.float64))
        elif name.endswith(("ln/b", "pos", "zf")):
            ps.add(name, np.zeros(shape, dtype=np.float64))
        else:
            ps.add(name, np.eye(shape[0], dtype=np.float64))
    return ps


class TestFuse:
    def test_identity_single_token_passthrough(self):
        # constant token per branch: LN gives 0, self-attention adds nothing,
        # uniform cross-attention averages identical values
        cfg = PriorConfig(width=8, codebook_size=4, tokens_per_branch=1, bottleneck_tokens=1)
        token = np.full((1, 8), 0.37)
        feats = {br: token.copy() for br in cfg.branches}
        out = fuse(feats, identity_fusion(cfg), cfg)
        assert out.shape == (1, 8)
        assert np.allclose(out, token, atol=1e-6)

    @pytest.mark.parametrize("k", [1, 4, 8])
    def test_output_token_count_is_k(self, k):
        cfg = PriorConfig(width=16, codebook_size=8, tokens_per_branch=4, bottleneck_tokens=k)
        params = init_fusion_params(cfg, np.random.default_rng(0))
        feats = {br: RNG.normal(size=(4, 16)) for br in cfg.branches}
        assert fuse(feats, params, cfg).shape == (k, 16)

    def test_branch_permutation_changes_output(self):
        cfg = PriorConfig(width=16, codebook_size=8, tokens_per_branch=4, bottleneck_tokens=2)
        params = init_fusion_params(cfg, np.random.default_rng(1))
        params["pos"] = np.zeros_like(params["pos"])
        feats = {br: RNG.normal(size=(4, 16)) for br in cfg.branches}
        swapped = {"high": feats["low"], "low": feats["high"], "raw": feats["raw"]}
        out1 = fuse(feats, params, cfg)
        out2 = fuse(swapped, params, cfg)
        assert not np.allclose(out1, out2)

    def test_shape_mismatch(self):
        params = init_fusion_params(CFG, np.random.default_rng(2))
        feats = {br: RNG.normal(size=(3, CFG.width)) for br in CFG.branches}
        with pytest.raises(ShapeError):
            fuse(feats, params, CFG)


class TestQuantize:
    def test_two_codeword_example(self):
        cb = Codebook(codewords=np.array([[0.0, 0.0], [1.0, 1.0]]))
        toks = quantize(np.array([[0.9, 0.8]]), cb)
        assert toks.indices.tolist() == [1]
        assert np.array_equal(toks.z_q, [[1.0, 1.0]])

    def test_exact_codeword_distance_zero(self):
        cw = RNG.normal(size=(6, 4))
        cb = Codebook(codewords=cw.copy())
        toks = quantize(cw[3][None], cb)
        assert toks.indices.tolist() == [3]
        assert quantization_loss(toks.z, toks.z_q) == 0.0

    def test_tie_breaks_to_lowest_index(self):
        cb = Codebook(codewords=np.array([[0.0, 0.0], [2.0, 0.0]]))
        toks = quantize(np.array([[1.0, 0.0]]), cb)
        assert toks.indices.tolist() == [0]

    def test_usage_counts_increment(self):
        cb = Codebook(codewords=np.array([[0.0, 0.0], [2.0, 2.0]]))
        quantize(np.array([[0.1, 0.0], [1.9, 2.0], [2.1, 2.0]]), cb)
        assert cb.usage_counts.tolist() == [1, 2]

    def test_idempotence_on_codewords(self):
        cw = RNG.normal(size=(10, 5))
        cb = Codebook(codewords=cw.copy())
        toks = quantize(cw.copy(), cb)
        again = quantize(toks.z_q, cb)
        assert np.array_equal(again.z_q, toks.z_q)
        assert quantization_loss(toks.z_q, again.z_q) == 0.0

    def test_brute_force_oracle_agreement(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            d = int(rng.integers(2, 33))
            w = int(rng.integers(1, 9))
            cw = rng.normal(size=(d, w))
            z = rng.normal(size=w)
            idx = nearest_codewords(z[None], cw)[0]
            want_i, want_d = brute_nearest(z, cw)
            assert idx == want_i
            got_d = float(np.sum((z - cw[idx]) ** 2))
            assert got_d == pytest.approx(want_d, rel=1e-12)

    def test_width_mismatch(self):
        cb = Codebook(codewords=np.zeros((4, 3)))
        with pytest.raises(ShapeError):
            quantize(np.zeros((2, 5)), cb)


class TestQuantizationLoss:
    def test_equal_is_zero(self):
        z = RNG.normal(size=(3, 4))
        assert quantization_loss(z, z.copy()) == 0.0

    def test_single_token_value(self):
        assert quantization_loss(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]])) == pytest.approx(2.0)

    def test_mean_over_tokens(self):
        z = np.array([[0.0, 0.0], [1.0, 1.0]])
        zq = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert quantization_loss(z, zq) == pytest.approx(1.0)

    def test_gradient_reaches_only_codewords(self):
        cw = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
        z = Tensor(RNG.normal(size=(2, 3)), requires_grad=True)
        cb = Codebook(codewords=cw.data.copy())
        _, idx, rows = quantize_st(z, cw, cb)
        loss = quantization_loss(z, rows)
        loss.backward()
        assert z.grad is None  # stop-gradient on the continuous side
        assert cw.grad is not None and np.any(cw.grad != 0)


class TestStraightThrough:
    def test_gradient_matches_identity_composition(self):
        # finite differences on the full forward (2 tokens): the gradient of a
        # downstream loss wrt z must equal the identity-path gradient
        rng = np.random.default_rng(31)
        cw = rng.normal(size=(5, 3))
        w = rng.normal(size=(3, 1))
        z0 = rng.normal(size=(2, 3)) * 0.5

        def forward(z_arr):
            cb = Codebook(codewords=cw.copy())
            zt = Tensor(z_arr, requires_grad=True)
            zq, _, _ = quantize_st(zt, Tensor(cw), cb)
            loss = ad.tsum(ad.mul(ad.matmul(zq, Tensor(w)), 1.0))
            return zt, loss

        zt, loss = forward(z0.copy())
        loss.backward()
        got = zt.grad
        fd = np.zeros_like(z0)
        for i in np.ndindex(z0.shape):
            up = z0.copy(); up[i] += 1e-5
            dn = z0.copy(); dn[i] -= 1e-5
            fd[i] = (float(forward(up)[1].data) - float(forward(dn)[1].data)) / 2e-5
        assert np.abs(got - fd).max() < 1e-6

    def test_forward_value_is_codeword(self):
        cw = RNG.normal(size=(4, 3))
        cb = Codebook(codewords=cw.copy())
        z = Tensor(RNG.normal(size=(1, 3)), requires_grad=True)
        zq, idx, _ = quantize_st(z, Tensor(cw), cb)
        assert np.allclose(zq.data, cw[idx])


class TestResetDeadCodes:
    def test_all_alive_unchanged(self):
        cb = Codebook(codewords=RNG.normal(size=(4, 3)),
                      usage_counts=np.array([5, 6, 7, 8]))
        before = cb.codewords.copy()
        reset_dead_codes(cb, RNG.normal(size=(10, 3)), threshold=1)
        assert np.array_equal(cb.codewords, before)
        assert np.all(cb.usage_counts == 0)

    def test_single_dead_code_takes_sample(self):
        cb = Codebook(codewords=np.zeros((2, 3)), usage_counts=np.array([4, 0]))
        sample = np.array([[1.0, 2.0, 3.0]])
        reset_dead_codes(cb, sample, threshold=1, rng=np.random.default_rng(0))
        assert np.allclose(cb.codewords[1], sample[0])

    def test_reseed_count(self):
        cb = Codebook(codewords=np.zeros((4, 2)), usage_counts=np.array([10, 0, 0, 5]))
        before = cb.codewords.copy()
        reset_dead_codes(cb, RNG.normal(size=(20, 2)), threshold=1,
                         rng=np.random.default_rng(1))
        changed = [i for i in range(4) if not np.array_equal(cb.codewords[i], before[i])]
        assert changed == [1, 2]

    def test_no_samples_with_dead_codes(self):
        cb = Codebook(codewords=np.zeros((2, 3)), usage_counts=np.array([0, 3]))
        with pytest.raises(StateError):
            reset_dead_codes(cb, np.empty((0, 3)), threshold=1)


class TestPriorConfig:
    def test_codebook_size_minimum(self):
        with pytest.raises(ArgumentError):
            PriorConfig(codebook_size=1)

    def test_branch_subset_valid(self):
        cfg = PriorConfig(branches=("raw",))
        assert "pos" in fusion_param_shapes(cfg)
        assert fusion_param_shapes(cfg)["pos"][0] == cfg.tokens_per_branch + cfg.bottleneck_tokens

    def test_codebook_invariants(self):
        with pytest.raises(ArgumentError):
            Codebook(codewords=np.array([[np.inf, 0.0], [0.0, 0.0]]))
        with pytest.raises(ShapeError):
            Codebook(codewords=np.zeros((3, 2)), usage_counts=np.zeros(2, dtype=np.int64))
