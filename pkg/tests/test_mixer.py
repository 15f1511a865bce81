from dataclasses import replace

import numpy as np
import pytest

from regioncap import autodiff as ad
from regioncap import mixer as mx
from helpers import check_grads

DESK = mx.MixerConfig(d=16, mlp_dim=32, heads=2, n_text_layers=2, lm_dim=8,
                      n_mask_tokens=2)


def rand_tokens(rng, n, d, rg=False):
    return ad.Tensor(rng.normal(size=(n, d)), requires_grad=rg)


class TestParamAccounting:
    def test_per_block_count_at_paper_scale(self):
        assert mx.block_param_count(mx.PAPER_SCALE) == 1_579_520

    def test_tail_removal_delta(self):
        assert mx.tail_param_count(mx.PAPER_SCALE) == 131_712 + 512

    def test_text_stage_blocks_plus_tail_at_12_layers(self):
        cfg = mx.PAPER_SCALE
        total = 12 * mx.block_param_count(cfg) + mx.tail_param_count(cfg)
        assert total == 19_086_464

    def test_count_params_near_table_values(self):
        for layers, target, tol in ((12, 19.1e6, 0.002), (8, 12.8e6, 0.002)):
            got = mx.count_params(replace(mx.PAPER_SCALE, n_text_layers=layers))
            assert abs(got - target) / target < tol

    def test_desk_scale_closed_form_matches_built_tensors(self):
        params = mx.build_mixer(DESK, seed=0)
        actual = sum(t.data.size for name, t in params.tensors.items()
                     if name.startswith("text_mixer/"))
        # built tensors exclude the task tokens, which live on the LM side
        assert actual == mx.count_params(DESK) - DESK.n_task_tokens * DESK.lm_dim

    def test_sam_query_variant_params_are_one_projection(self):
        cfg = replace(DESK, variant="sam_query_decode")
        params = mx.build_mixer(cfg, seed=0)
        trainable = {k: t for k, t in params.tensors.items() if t.requires_grad}
        assert set(trainable) == {"text_mixer/sam_query_proj/w",
                                  "text_mixer/sam_query_proj/b"}
        want = cfg.n_mask_tokens * cfg.d * cfg.n_query_tokens * cfg.d \
            + cfg.n_query_tokens * cfg.d
        assert sum(t.data.size for t in trainable.values()) == want

    def test_invalid_configs_rejected(self):
        with pytest.raises(mx.ConfigError):
            mx.MixerConfig(d=15, heads=2)
        with pytest.raises(mx.ConfigError):
            mx.MixerConfig(n_text_layers=0)
        with pytest.raises(mx.ConfigError):
            mx.MixerConfig(variant="nope")


class TestTwoWayBlock:
    def test_zero_weights_yield_zero_mean_sparse_rows(self):
        params = mx.build_mixer(DESK, seed=1)
        block = params.text_stage["blocks"][0]
        for name in ("self_attn", "cross_sd", "cross_ds"):
            for t in block[name].tensors().values():
                t.data[...] = 0.0
        for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            block[name].data[...] = 0.0
        rng = np.random.default_rng(2)
        sparse = rand_tokens(rng, 4, DESK.d)
        dense = rand_tokens(rng, 9, DESK.d)
        out_sparse, _ = mx.two_way_block(block, sparse, dense, sparse, dense,
                                         DESK.heads)
        assert np.abs(out_sparse.data.mean(axis=-1)).max() < 1e-10

    def test_gradient_check_through_one_block(self):
        params = mx.build_mixer(DESK, seed=3)
        block = params.text_stage["blocks"][0]
        rng = np.random.default_rng(4)
        sparse = rand_tokens(rng, 3, DESK.d)
        dense = rand_tokens(rng, 4, DESK.d)
        sparse_pe = rand_tokens(rng, 3, DESK.d)
        dense_pe = rand_tokens(rng, 4, DESK.d)
        mix_s = ad.Tensor(rng.normal(size=(3, DESK.d)))
        mix_d = ad.Tensor(rng.normal(size=(4, DESK.d)))

        tensors = []
        for name in ("self_attn", "cross_sd", "cross_ds"):
            tensors.extend(block[name].tensors().values())
        tensors.extend(block[name] for name in ("mlp_w1", "mlp_b1",
                                                "mlp_w2", "mlp_b2"))
        for g, b in (block["norm1"], block["norm2"], block["norm3"],
                     block["norm4"]):
            tensors.extend([g, b])

        def f():
            s, d_ = mx.two_way_block(block, sparse, dense, sparse_pe, dense_pe,
                                     DESK.heads)
            return ad.add(ad.sum_all(ad.mul(s, mix_s)),
                          ad.sum_all(ad.mul(d_, mix_d)))

        check_grads(f, tensors, tol=1e-4)

    def test_shape_mismatch_rejected(self):
        params = mx.build_mixer(DESK, seed=5)
        block = params.text_stage["blocks"][0]
        rng = np.random.default_rng(6)
        sparse = rand_tokens(rng, 3, DESK.d)
        dense = rand_tokens(rng, 4, DESK.d + 2)
        with pytest.raises(ad.ContractError):
            mx.two_way_block(block, sparse, dense, sparse, dense, DESK.heads)


class TestStages:
    def _inputs(self, seed=0, n_p=2, n_dense=9):
        rng = np.random.default_rng(seed)
        return (rand_tokens(rng, n_p, DESK.d), rand_tokens(rng, n_dense, DESK.d),
                rand_tokens(rng, n_dense, DESK.d))

    def test_sam_stage_deterministic_and_frozen(self):
        params = mx.build_mixer(DESK, seed=7)
        prompt, dense, pe = self._inputs()
        a = mx.run_sam_stage(params, prompt, dense, pe)
        b = mx.run_sam_stage(params, prompt, dense, pe)
        for x, y in zip(a, b):
            assert (x.data == y.data).all()
        assert not any(t.requires_grad for k, t in params.tensors.items()
                       if k.startswith("sam_mixer/") or k == "mask_tokens")

    def test_text_stage_query_shape_for_any_prompt_arity(self):
        params = mx.build_mixer(DESK, seed=8)
        for n_p in (1, 2, 5):
            prompt, dense, pe = self._inputs(n_p=n_p)
            q_hat = mx.run_text_stage(params, prompt, dense, pe)
            assert q_hat.shape == (DESK.n_query_tokens, DESK.d)

    def test_wrong_variant_rejected(self):
        params = mx.build_mixer(replace(DESK, variant="roi_align"), seed=9)
        prompt, dense, pe = self._inputs()
        with pytest.raises(ad.ContractError):
            mx.run_text_stage(params, prompt, dense, pe)

    def test_block_loop_recursion_composes(self):
        # running j blocks then N-j blocks equals running all N blocks
        params = mx.build_mixer(replace(DESK, n_text_layers=4), seed=10)
        stage = params.text_stage
        prompt, dense, pe = self._inputs(seed=11, n_p=3)
        sparse0 = ad.concat([prompt, params.query_tokens], axis=0)
        full_s, full_d = mx.run_stage_blocks(stage, sparse0, dense, sparse0, pe)
        for j in (1, 2, 3):
            s, d_ = mx.run_stage_blocks(stage, sparse0, dense, sparse0, pe,
                                        start=0, end=j)
            s, d_ = mx.run_stage_blocks(stage, s, d_, sparse0, pe, start=j)
            np.testing.assert_allclose(s.data, full_s.data, atol=1e-12)
            np.testing.assert_allclose(d_.data, full_d.data, atol=1e-12)

    def test_prompt_permutation_leaves_queries_unchanged(self):
        params = mx.build_mixer(DESK, seed=12)
        rng = np.random.default_rng(13)
        prompt = rand_tokens(rng, 4, DESK.d)
        dense = rand_tokens(rng, 9, DESK.d)
        pe = rand_tokens(rng, 9, DESK.d)
        base = mx.run_text_stage(params, prompt, dense, pe)
        perm = [2, 0, 3, 1]
        shuffled = ad.Tensor(prompt.data[perm])
        swapped = mx.run_text_stage(params, shuffled, dense, pe)
        assert np.abs(base.data - swapped.data).max() <= 1e-9

    def test_freezing_partition_names(self):
        params = mx.build_mixer(DESK, seed=14)
        trainable = {k for k, t in params.tensors.items() if t.requires_grad}
        assert trainable == {k for k in params.tensors if k.startswith("text_mixer/")}


class TestRoiAlign:
    def test_whole_canvas_single_cell_equals_grid_mean(self):
        rng = np.random.default_rng(15)
        grid = rng.normal(size=(8, 8, 5))
        pooled = mx.roi_align_pool(grid, (0, 0, 64, 64), patch=8, out=1)
        np.testing.assert_allclose(pooled[0, 0], grid.reshape(-1, 5).mean(axis=0),
                                   atol=1e-12)

    def test_constant_grid_pools_to_constant(self):
        grid = np.full((8, 8, 3), 2.5)
        pooled = mx.roi_align_pool(grid, (5, 9, 40, 30), patch=8, out=2)
        np.testing.assert_allclose(pooled, 2.5, atol=1e-12)

    def test_grid_aligned_sample_is_exact(self):
        rng = np.random.default_rng(16)
        grid = rng.normal(size=(8, 8, 4))
        np.testing.assert_array_equal(mx.bilinear_sample(grid, 3.0, 5.0), grid[3, 5])

    def test_degenerate_box_rejected(self):
        grid = np.zeros((8, 8, 2))
        with pytest.raises(ad.ContractError):
            mx.roi_align_pool(grid, (10, 10, 10, 20), patch=8)

    def test_roi_features_shape_and_gradients(self):
        for variant in ("roi_align", "roi_align_mlp"):
            cfg = replace(DESK, variant=variant)
            params = mx.build_mixer(cfg, seed=17)
            rng = np.random.default_rng(18)
            grid = rng.normal(size=(8, 8, DESK.d))
            rows = mx.roi_features(params, grid, (8, 8, 40, 40), patch=8)
            assert rows.shape == (cfg.n_query_tokens, cfg.d)
            mixw = ad.Tensor(rng.normal(size=rows.shape))
            tensors = [t for t in params.proj.values()]
            check_grads(lambda: ad.sum_all(ad.mul(
                mx.roi_features(params, grid, (8, 8, 40, 40), patch=8), mixw)),
                tensors, tol=1e-5)


class TestPredictMask:
    def test_shape_and_determinism(self):
        params = mx.build_mixer(DESK, seed=19)
        rng = np.random.default_rng(20)
        prompt = rand_tokens(rng, 2, DESK.d)
        dense = rand_tokens(rng, 16, DESK.d)
        pe = rand_tokens(rng, 16, DESK.d)
        _, m_hat, i_hat = mx.run_sam_stage(params, prompt, dense, pe)
        a = mx.predict_mask(m_hat, i_hat, 4)
        b = mx.predict_mask(m_hat, i_hat, 4)
        assert a.shape == (4, 4)
        assert (a.data == b.data).all()

    def test_invariant_to_text_stage_parameters(self):
        params = mx.build_mixer(DESK, seed=21)
        rng = np.random.default_rng(22)
        prompt = rand_tokens(rng, 2, DESK.d)
        dense = rand_tokens(rng, 16, DESK.d)
        pe = rand_tokens(rng, 16, DESK.d)
        _, m_hat, i_hat = mx.run_sam_stage(params, prompt, dense, pe)
        before = mx.predict_mask(m_hat, i_hat, 4).data.copy()
        for k, t in params.tensors.items():
            if k.startswith("text_mixer/"):
                t.data += 1.0
        _, m_hat2, i_hat2 = mx.run_sam_stage(params, prompt, dense, pe)
        after = mx.predict_mask(m_hat2, i_hat2, 4).data
        np.testing.assert_array_equal(before, after)
