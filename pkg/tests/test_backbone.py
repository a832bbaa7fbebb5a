import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrestore.backbone import (BackboneConfig, DiTBackbone, MultiHeadAttention,
                                  TextEmbedder, TextTokens, TokenGrid, patchify,
                                  patches_to_space, space_to_patches,
                                  timestep_embed, unpatchify)
from diffrestore.schedule import diffusion_loss, make_schedule

from gradtools import max_rel_grad_error, randomize_

SMALL = BackboneConfig(latent_hw=8, latent_channels=3, patch_size=2,
                       hidden_dim=16, num_blocks=2, num_heads=2, text_dim=12)


def rand_latent(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(cfg.latent_hw, cfg.latent_hw, cfg.latent_channels,
                       generator=g)


def rand_text(dim, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return TextTokens(embeddings=torch.randn(n, dim, generator=g),
                      mask=torch.ones(n, dtype=torch.bool))


class TestPatchify:
    def test_rearrangement_matches_loop_oracle(self):
        h, w, ch, p = 4, 6, 2, 2
        latent = torch.arange(h * w * ch, dtype=torch.float32).reshape(h, w, ch)
        patches = space_to_patches(latent, p)
        gw = w // p
        for gi in range(h // p):
            for gj in range(gw):
                for di in range(p):
                    for dj in range(p):
                        for c in range(ch):
                            assert patches[gi * gw + gj, (di * p + dj) * ch + c] \
                                == latent[gi * p + di, gj * p + dj, c]

    def test_roundtrip_bitwise(self):
        latent = torch.randn(8, 8, 4)
        grid = patchify(latent, 2)
        back = unpatchify(grid, 2, 4)
        assert torch.equal(back, latent)

    @given(gh=st.integers(1, 4), gw=st.integers(1, 4), p=st.integers(1, 3),
           ch=st.integers(1, 4), seed=st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_property(self, gh, gw, p, ch, seed):
        g = torch.Generator().manual_seed(seed)
        latent = torch.randn(gh * p, gw * p, ch, generator=g)
        patches = space_to_patches(latent, p)
        assert patches.shape == (gh * gw, p * p * ch)
        assert torch.equal(patches_to_space(patches, gh, gw, p, ch), latent)

    def test_projection_applied(self):
        proj = torch.nn.Linear(2 * 2 * 3, 5)
        grid = patchify(torch.randn(4, 4, 3), 2, proj=proj)
        assert grid.tokens.shape == (4, 5)

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            space_to_patches(torch.randn(5, 4, 1), 2)

    def test_unpatchify_dim_mismatch_raises(self):
        grid = TokenGrid(tokens=torch.randn(4, 12), grid_h=2, grid_w=2)
        with pytest.raises(ValueError):
            unpatchify(grid, 2, 4)


class TestTokenGrid:
    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            TokenGrid(tokens=torch.randn(3, 8), grid_h=2, grid_w=2)

    def test_nonfinite_rejected(self):
        bad = torch.randn(4, 8)
        bad[1, 3] = float("nan")
        with pytest.raises(ValueError):
            TokenGrid(tokens=bad, grid_h=2, grid_w=2)


class TestTimestepEmbed:
    def test_dim_two_is_cos_sin(self):
        for t in (0, 1, 7):
            e = timestep_embed(t, 2)
            assert e[0] == pytest.approx(math.cos(t), abs=1e-7)
            assert e[1] == pytest.approx(math.sin(t), abs=1e-7)

    def test_shape_and_range(self):
        e = timestep_embed(13, 32)
        assert e.shape == (32,)
        assert e.abs().max() <= 1.0

    def test_distinct_steps_distinct_embeddings(self):
        seen = [timestep_embed(t, 16) for t in range(50)]
        for i in range(len(seen)):
            for j in range(i + 1, len(seen)):
                assert not torch.equal(seen[i], seen[j])

    def test_deterministic(self):
        assert torch.equal(timestep_embed(9, 24), timestep_embed(9, 24))

    def test_odd_dim_raises(self):
        with pytest.raises(ValueError):
            timestep_embed(3, 7)

    def test_negative_t_raises(self):
        with pytest.raises(ValueError):
            timestep_embed(-1, 8)


class TestTextEmbedder:
    def test_ids_stable_and_bounded(self):
        emb = TextEmbedder(text_dim=8, vocab_size=64)
        ids = emb.token_ids("a photo of a cat")
        assert ids == emb.token_ids("a photo of a cat")
        assert all(0 <= i < 64 for i in ids)
        assert ids[0] == ids[3]  # repeated word, same id

    def test_truncates_to_max_tokens(self):
        emb = TextEmbedder(text_dim=8, max_tokens=3)
        out = emb.encode("one two three four five")
        assert out.num_tokens == 3
        assert bool(out.mask.all())

    def test_empty_text(self):
        out = TextEmbedder(text_dim=8).encode("")
        assert out.num_tokens == 0
        assert out.embeddings.shape == (0, 8)

    def test_mask_length_validated(self):
        with pytest.raises(ValueError):
            TextTokens(embeddings=torch.randn(3, 8),
                       mask=torch.ones(2, dtype=torch.bool))


class TestAttention:
    def test_empty_kv_returns_zero(self):
        att = MultiHeadAttention(8, 2, kv_dim=6)
        x = torch.randn(5, 8)
        out = att(x, torch.zeros(0, 6), torch.zeros(0, dtype=torch.bool))
        assert torch.equal(out, torch.zeros(5, 8))

    def test_all_masked_returns_zero(self):
        att = MultiHeadAttention(8, 2, kv_dim=6)
        out = att(torch.randn(5, 8), torch.randn(4, 6),
                  torch.zeros(4, dtype=torch.bool))
        assert torch.equal(out, torch.zeros(5, 8))

    def test_masked_token_content_irrelevant(self):
        att = MultiHeadAttention(8, 2, kv_dim=6)
        x = torch.randn(5, 8)
        kv = torch.randn(4, 6)
        mask = torch.tensor([True, True, False, True])
        base = att(x, kv, mask)
        kv2 = kv.clone()
        kv2[2] = 999.0
        assert torch.equal(att(x, kv2, mask), base)

    def test_single_key_is_value_projection(self):
        # one key: softmax weight is exactly 1, output = out_proj(v_proj(kv))
        att = MultiHeadAttention(8, 2, kv_dim=6)
        x = torch.randn(3, 8)
        kv = torch.randn(1, 6)
        expect = att.out_proj(att.v_proj(kv)).expand(3, 8)
        assert torch.allclose(att(x, kv, None), expect, atol=1e-6)


def masked_text(dim, n, seed=0):
    t = rand_text(dim, n, seed)
    return TextTokens(embeddings=t.embeddings,
                      mask=torch.zeros(n, dtype=torch.bool))


class TestBackbone:
    def test_fresh_model_outputs_zeros(self):
        torch.manual_seed(0)
        net = DiTBackbone(SMALL)
        out = net(rand_latent(SMALL), 3, rand_text(SMALL.text_dim, 4))
        assert torch.count_nonzero(out) == 0
        assert out.shape == (8, 8, 3)

    def test_deterministic_forward(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 1)
        z, text = rand_latent(SMALL, 2), rand_text(SMALL.text_dim, 4, 3)
        assert torch.equal(net(z, 5, text), net(z, 5, text))

    def test_zero_residuals_match_absent_residuals(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 4)
        z = rand_latent(SMALL, 5)
        zeros = [torch.zeros(SMALL.num_tokens, SMALL.hidden_dim)
                 for _ in range(SMALL.num_blocks)]
        assert torch.equal(net(z, 2, None, residuals=zeros), net(z, 2, None))

    def test_nonzero_residuals_change_output(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 6)
        z = rand_latent(SMALL, 7)
        res = [torch.full((SMALL.num_tokens, SMALL.hidden_dim), 0.5)
               for _ in range(SMALL.num_blocks)]
        assert not torch.equal(net(z, 2, None, residuals=res), net(z, 2, None))

    def test_residual_count_validated(self):
        net = DiTBackbone(SMALL)
        with pytest.raises(ValueError):
            net(rand_latent(SMALL), 0, None,
                residuals=[torch.zeros(SMALL.num_tokens, SMALL.hidden_dim)])

    def test_latent_shape_validated(self):
        net = DiTBackbone(SMALL)
        with pytest.raises(ValueError):
            net(torch.randn(4, 4, 3), 0)

    def test_no_text_equals_empty_and_fully_masked(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 8)
        z = rand_latent(SMALL, 9)
        empty = TextTokens(embeddings=torch.zeros(0, SMALL.text_dim),
                           mask=torch.zeros(0, dtype=torch.bool))
        base = net(z, 4, None)
        assert torch.equal(net(z, 4, empty), base)
        assert torch.equal(net(z, 4, masked_text(SMALL.text_dim, 3)), base)

    def test_text_token_permutation_invariance(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 10)
        z = rand_latent(SMALL, 11)
        text = rand_text(SMALL.text_dim, 5, 12)
        perm = torch.tensor([4, 2, 0, 1, 3])
        shuffled = TextTokens(embeddings=text.embeddings[perm],
                              mask=text.mask[perm])
        assert torch.allclose(net(z, 4, text), net(z, 4, shuffled), atol=1e-6)

    def test_text_changes_output(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 13)
        z = rand_latent(SMALL, 14)
        a = net(z, 4, rand_text(SMALL.text_dim, 4, 20))
        b = net(z, 4, rand_text(SMALL.text_dim, 4, 21))
        assert not torch.equal(a, b)

    def test_timestep_changes_output(self):
        net = DiTBackbone(SMALL)
        randomize_(net, 15)
        z = rand_latent(SMALL, 16)
        assert not torch.equal(net(z, 0, None), net(z, 7, None))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(latent_hw=9, patch_size=2)
        with pytest.raises(ValueError):
            BackboneConfig(hidden_dim=10, num_heads=4)


class TestGradients:
    def test_fd_smoke_double_precision(self):
        cfg = BackboneConfig(latent_hw=4, latent_channels=2, patch_size=2,
                             hidden_dim=8, num_blocks=1, num_heads=2, text_dim=6)
        net = DiTBackbone(cfg).double()
        randomize_(net, 30)
        sched = make_schedule(10, "cosine")
        g = torch.Generator().manual_seed(31)
        z0 = torch.randn(4, 4, 2, generator=g, dtype=torch.float64)
        text = TextTokens(
            embeddings=torch.randn(3, 6, generator=g, dtype=torch.float64),
            mask=torch.ones(3, dtype=torch.bool))
        model = lambda z, t, cond: net(z, t, cond)

        def loss_fn():
            return diffusion_loss(model, z0, text, sched,
                                  np.random.default_rng(32))

        err = max_rel_grad_error(loss_fn, list(net.parameters()), n_coords=25)
        assert err <= 1e-3
