"""Diffusion schedule, hybrid conditioning, adapters, and the adapted U-Net."""

import math

import numpy as np
import pytest
import torch

from abduct.imaginer import (
    AdaptedUNet,
    AdaptedUNetBlock,
    AdapterToggles,
    DiffusionConfig,
    DiffusionSchedule,
    DualCrossAttention,
    FAdapter,
    HybridVisualCondition,
    LatentMapper,
    TAdapter,
    UNetConfig,
    diffusion_loss,
    dual_cross_attention,
    f_adapter,
    frame_relevance_weights,
    hybrid_condition,
    load_unet_checkpoint,
    min_snr_weight,
    save_unet_checkpoint,
    t_adapter,
    timestep_embedding,
    unet_block_forward,
    v_adapter,
)

BASE_OFF = AdapterToggles(visual=False, temporal=False, ffn=False)


def fd_param_check(module, loss_fn, rtol=1e-5, eps=1e-6):
    """Elementwise central finite differences over every parameter."""
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    for name, param in module.named_parameters():
        analytic = param.grad.detach().numpy().copy() if param.grad is not None \
            else np.zeros(param.shape)
        fd = np.zeros(param.numel())
        flat = param.data.view(-1)
        for i in range(param.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            hi = float(loss_fn().detach())
            flat[i] = orig - eps
            lo = float(loss_fn().detach())
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * eps)
        fd = fd.reshape(param.shape)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-10)
        err = np.linalg.norm(analytic - fd) / denom
        assert err < rtol, f"{name}: rel err {err:.2e}"


class TestSchedule:
    def test_betas_increasing_in_unit_interval(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=100))
        assert np.all(s.betas > 0) and np.all(s.betas < 1)
        assert np.all(np.diff(s.betas) > 0)

    def test_snr_strictly_decreasing(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=500))
        assert np.all(np.diff(s.snr) < 0)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            DiffusionConfig(beta_start=0.5, beta_end=0.1)
        with pytest.raises(ValueError):
            DiffusionConfig(timesteps=1)


class TestMinSnrWeight:
    def test_saturated_region_is_one(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=200))
        gamma = 5.0
        low_snr_ts = [t for t in range(200) if s.snr[t] <= gamma]
        assert low_snr_ts
        for t in low_snr_ts[:: max(1, len(low_snr_ts) // 10)]:
            assert min_snr_weight(t, s, gamma) == 1.0

    def test_ratio_region(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=200))
        gamma = 5.0
        high = [t for t in range(200) if s.snr[t] > gamma]
        assert high
        for t in high[:: max(1, len(high) // 10)]:
            assert min_snr_weight(t, s, gamma) == pytest.approx(gamma / s.snr[t], rel=1e-12)

    def test_half_weight_at_double_gamma(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=1000))
        t = int(np.argmin(np.abs(s.snr - 10.0)))
        assert min_snr_weight(t, s, snr_gamma=s.snr[t] / 2.0) == pytest.approx(0.5)

    def test_bounds_and_monotonicity(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=300))
        weights = [min_snr_weight(t, s, 5.0) for t in range(300)]
        assert all(0.0 < w <= 1.0 for w in weights)
        assert all(b >= a for a, b in zip(weights, weights[1:]))

    def test_out_of_range(self):
        s = DiffusionSchedule(DiffusionConfig(timesteps=10))
        with pytest.raises(ValueError):
            min_snr_weight(10, s, 5.0)


class TestFrameRelevanceWeights:
    def test_identical_embeddings_uniform(self):
        e = torch.tensor([1.0, 2.0, 3.0])
        gamma = frame_relevance_weights(e.repeat(4, 1), torch.tensor([0.5, 1.0, -1.0]))
        assert torch.allclose(gamma, torch.full((4,), 0.25))

    def test_two_frames_unit_similarity_gap(self):
        text = torch.tensor([1.0, 0.0])
        frames = torch.stack([text * 3.0, torch.tensor([0.0, 2.0])])
        gamma = frame_relevance_weights(frames, text)
        e = math.e
        assert float(gamma[0]) == pytest.approx(e / (e + 1), abs=1e-6)
        assert float(gamma[1]) == pytest.approx(1 / (e + 1), abs=1e-6)

    def test_permutation_equivariance(self, rng):
        frames = torch.tensor(rng.standard_normal((6, 5)))
        text = torch.tensor(rng.standard_normal(5))
        gamma = frame_relevance_weights(frames, text)
        perm = torch.tensor(rng.permutation(6))
        gamma_p = frame_relevance_weights(frames[perm], text)
        assert torch.allclose(gamma_p, gamma[perm], atol=1e-12)

    def test_sums_to_one(self, rng):
        for _ in range(20):
            frames = torch.tensor(rng.standard_normal((4, 7)) + 0.1)
            text = torch.tensor(rng.standard_normal(7) + 0.1)
            assert float(frame_relevance_weights(frames, text).sum()) == pytest.approx(1.0, abs=1e-6)

    def test_zero_norm_raises(self):
        with pytest.raises(ValueError, match="zero-norm"):
            frame_relevance_weights(torch.zeros(3, 4), torch.ones(4))


class TestHybridCondition:
    def test_m_equals_n_keeps_index_order(self, rng):
        frames = torch.tensor(rng.standard_normal((5, 3)))
        gamma = torch.tensor(rng.dirichlet(np.ones(5)))
        cond = hybrid_condition(frames, gamma, m=5)
        assert torch.equal(cond.c_local, frames)
        assert cond.c_v.shape == (6, 3)

    def test_uniform_gamma_global_is_mean(self, rng):
        frames = torch.tensor(rng.standard_normal((4, 6)))
        gamma = torch.full((4,), 0.25, dtype=frames.dtype)
        cond = hybrid_condition(frames, gamma, m=2)
        assert torch.allclose(cond.c_global[0], frames.mean(dim=0), atol=1e-7)
        # uniform weights tie; stable selection keeps lowest indices
        assert torch.equal(cond.c_local, frames[:2])

    def test_global_matches_bruteforce_oracle(self, rng):
        for _ in range(25):
            n, d = int(rng.integers(1, 9)), int(rng.integers(1, 6))
            frames = rng.standard_normal((n, d))
            raw = rng.dirichlet(np.ones(n))
            cond = hybrid_condition(torch.tensor(frames), torch.tensor(raw),
                                    m=int(rng.integers(1, n + 1)))
            expected = sum(raw[i] * frames[i] for i in range(n))
            np.testing.assert_allclose(cond.c_global[0].numpy(), expected, atol=1e-6)

    def test_top_m_selection(self):
        frames = torch.eye(4)
        gamma = torch.tensor([0.1, 0.4, 0.2, 0.3])
        cond = hybrid_condition(frames, gamma, m=2)
        assert torch.equal(cond.c_local, frames[[1, 3]])

    def test_m_out_of_range(self):
        frames = torch.zeros(3, 2)
        gamma = torch.full((3,), 1 / 3)
        for bad in (0, 4):
            with pytest.raises(ValueError):
                hybrid_condition(frames, gamma, m=bad)


class TestVAdapter:
    def test_zero_value_projection_gives_zero(self, rng):
        x = torch.tensor(rng.standard_normal((5, 8)))
        c_v = torch.tensor(rng.standard_normal((3, 6)))
        w_q = torch.tensor(rng.standard_normal((8, 4)))
        w_k = torch.tensor(rng.standard_normal((6, 4)))
        w_v = torch.zeros(6, 8, dtype=torch.float64)
        out = v_adapter(x, c_v, w_q, w_k, w_v)
        assert torch.count_nonzero(out) == 0

    def test_single_token_broadcasts_value(self, rng):
        x = torch.tensor(rng.standard_normal((5, 8)))
        c_v = torch.tensor(rng.standard_normal((1, 6)))
        w_q = torch.tensor(rng.standard_normal((8, 4)))
        w_k = torch.tensor(rng.standard_normal((6, 4)))
        w_v = torch.tensor(rng.standard_normal((6, 8)))
        out = v_adapter(x, c_v, w_q, w_k, w_v)
        value = (c_v @ w_v)[0]
        for row in out:
            assert torch.allclose(row, value, atol=1e-10)

    def test_gradient_wrt_key_projection(self, rng):
        x = torch.tensor(rng.standard_normal((4, 6)))
        c_v = torch.tensor(rng.standard_normal((3, 5)))
        w_q = torch.tensor(rng.standard_normal((6, 4)))
        w_v = torch.tensor(rng.standard_normal((5, 6)))
        base = rng.standard_normal((5, 4))
        target = torch.tensor(rng.standard_normal((4, 6)))

        def loss_at(arr):
            w_k = torch.tensor(arr, requires_grad=True)
            loss = ((v_adapter(x, c_v, w_q, w_k, w_v) - target) ** 2).mean()
            return loss, w_k

        loss, w_k = loss_at(base)
        loss.backward()
        analytic = w_k.grad.numpy()
        eps = 1e-6
        fd = np.zeros_like(base)
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                hi, lo = base.copy(), base.copy()
                hi[i, j] += eps
                lo[i, j] -= eps
                fd[i, j] = (float(loss_at(hi)[0].detach())
                            - float(loss_at(lo)[0].detach())) / (2 * eps)
        err = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-10)
        assert err < 1e-5


class TestDualCrossAttention:
    def make(self, seed=0, d_model=8, d_cond=6, d_k=4, zero_visual=False):
        torch.manual_seed(seed)
        block = DualCrossAttention(d_model, d_cond, d_k).double()
        if not zero_visual:
            with torch.no_grad():
                block.w_vv.normal_()
        return block

    def test_zero_visual_equals_text_branch(self, rng):
        block = self.make(zero_visual=True)
        x = torch.tensor(rng.standard_normal((5, 8)))
        c_t = torch.tensor(rng.standard_normal((3, 6)))
        c_v = torch.tensor(rng.standard_normal((4, 6)))
        with_v = block(x, c_t, c_v, enable_visual=True)
        without = block(x, c_t, c_v, enable_visual=False)
        assert torch.equal(with_v, without)

    def test_swapped_conditions_differ(self, rng):
        block = self.make()
        x = torch.tensor(rng.standard_normal((5, 8)))
        c_t = torch.tensor(rng.standard_normal((3, 6)))
        c_v = torch.tensor(rng.standard_normal((3, 6)))
        a = dual_cross_attention(x, c_t, c_v, block)
        b = dual_cross_attention(x, c_v, c_t, block)
        assert not torch.allclose(a, b)

    def test_linearity_in_value_projection(self, rng):
        block = self.make()
        x = torch.tensor(rng.standard_normal((5, 8)))
        c_t = torch.tensor(rng.standard_normal((3, 6)))
        c_v = torch.tensor(rng.standard_normal((4, 6)))
        base = block(x, c_t, c_v, enable_visual=False)
        branch1 = block(x, c_t, c_v, enable_visual=True) - base
        with torch.no_grad():
            block.w_vv.mul_(2.0)
        branch2 = block(x, c_t, c_v, enable_visual=True) - base
        assert torch.allclose(branch2, 2.0 * branch1, atol=1e-10)


class TestTAdapter:
    def test_zero_init_is_identity(self, rng):
        adapter = TAdapter(channels=8).double()
        x = torch.tensor(rng.standard_normal((3, 8, 4, 4)))
        assert torch.equal(t_adapter(x, adapter), x)

    def test_single_frame_well_defined(self, rng):
        adapter = TAdapter(channels=4).double()
        with torch.no_grad():
            for p in adapter.parameters():
                p.normal_()
        x = torch.tensor(rng.standard_normal((1, 4, 4, 4)))
        out = adapter(x)
        assert out.shape == x.shape
        assert torch.isfinite(out).all()

    def test_symmetric_zero_sum_kernel_passes_static_content(self, rng):
        # a (-1, 2, -1) temporal stencil responds to change over time only
        adapter = TAdapter(channels=4, ratio=4).double()
        with torch.no_grad():
            adapter.down.weight.normal_()
            adapter.down.bias.zero_()
            adapter.temporal.weight.zero_()
            adapter.temporal.weight[:, :, 0, 0, 0] = -1.0
            adapter.temporal.weight[:, :, 1, 0, 0] = 2.0
            adapter.temporal.weight[:, :, 2, 0, 0] = -1.0
            adapter.temporal.bias.zero_()
            adapter.up.weight.normal_()
            adapter.up.bias.zero_()
        frame = torch.tensor(rng.standard_normal((1, 4, 4, 4)))
        static = torch.cat([frame, frame], dim=0)
        assert torch.allclose(adapter(static), static, atol=1e-10)
        moving = torch.cat([frame, torch.tensor(rng.standard_normal((1, 4, 4, 4)))], dim=0)
        assert not torch.allclose(adapter(moving), moving)

    def test_gradient_check(self, rng):
        torch.manual_seed(0)
        adapter = TAdapter(channels=4, ratio=4).double()
        with torch.no_grad():
            for p in adapter.parameters():
                p.normal_()
        x = torch.tensor(rng.standard_normal((2, 4, 4, 4)))
        target = torch.tensor(rng.standard_normal((2, 4, 4, 4)))
        fd_param_check(adapter, lambda: ((adapter(x) - target) ** 2).mean())


class TestFAdapter:
    def test_zero_init_is_identity(self, rng):
        adapter = FAdapter(d_model=8).double()
        x = torch.tensor(rng.standard_normal((5, 8)))
        assert torch.equal(f_adapter(x, adapter), x)

    def test_zero_input_zero_bias_fixed_point(self):
        adapter = FAdapter(d_model=8).double()
        with torch.no_grad():
            adapter.fc_down.weight.normal_()
            adapter.fc_down.bias.zero_()
        x = torch.zeros(3, 8, dtype=torch.float64)
        assert torch.count_nonzero(adapter(x)) == 0

    def test_gradient_check(self, rng):
        torch.manual_seed(1)
        adapter = FAdapter(d_model=6, ratio=2).double()
        with torch.no_grad():
            for p in adapter.parameters():
                p.normal_()
        x = torch.tensor(rng.standard_normal((4, 6)))
        target = torch.tensor(rng.standard_normal((4, 6)))
        fd_param_check(adapter, lambda: ((adapter(x) - target) ** 2).mean())


def tiny_block(seed=0, in_ch=8, out_ch=8, d_cond=6, d_k=4, dtype=torch.float64):
    torch.manual_seed(seed)
    return AdaptedUNetBlock(in_ch, out_ch, d_cond, d_k, t_dim=8, groups=4,
                            adapter_ratio=4).to(dtype)


def tiny_unet(seed=0, dtype=torch.float32, **overrides):
    torch.manual_seed(seed)
    cfg = UNetConfig(latent_channels=2, base_channels=8, channel_mult=2,
                     d_cond=6, d_k=4, t_dim=8, groups=4, **overrides)
    return AdaptedUNet(cfg).to(dtype)


def conditions(rng, d_cond=6, dtype=torch.float64):
    c_t = torch.tensor(rng.standard_normal((3, d_cond)), dtype=dtype)
    c_v = torch.tensor(rng.standard_normal((4, d_cond)), dtype=dtype)
    return c_t, c_v


class TestUNetBlock:
    def test_zero_init_adapters_match_disabled(self, rng):
        block = tiny_block()
        x = torch.tensor(rng.standard_normal((2, 8, 4, 4)))
        c_t, c_v = conditions(rng)
        t_emb = torch.tensor(rng.standard_normal(8))
        on = unet_block_forward(x, c_t, c_v, t_emb, block)
        off = unet_block_forward(x, c_t, c_v, t_emb, block, BASE_OFF)
        assert torch.allclose(on, off, atol=1e-12)

    def test_shape_preserved(self, rng):
        block = tiny_block(in_ch=8, out_ch=16)
        x = torch.tensor(rng.standard_normal((3, 8, 4, 4)))
        c_t, c_v = conditions(rng)
        t_emb = torch.tensor(rng.standard_normal(8))
        out = block(x, c_t, c_v, t_emb)
        assert out.shape == (3, 16, 4, 4)

    def test_enabled_t_adapter_reacts_to_motion_only(self, rng):
        block = tiny_block()
        with torch.no_grad():
            block.t_adapter.down.weight.normal_()
            block.t_adapter.down.bias.zero_()
            block.t_adapter.temporal.weight.zero_()
            block.t_adapter.temporal.weight[:, :, 0, 0, 0] = -1.0
            block.t_adapter.temporal.weight[:, :, 1, 0, 0] = 2.0
            block.t_adapter.temporal.weight[:, :, 2, 0, 0] = -1.0
            block.t_adapter.temporal.bias.zero_()
            block.t_adapter.up.weight.normal_()
            block.t_adapter.up.bias.zero_()
        only_t = AdapterToggles(visual=False, temporal=True, ffn=False)
        c_t, c_v = conditions(rng)
        t_emb = torch.tensor(rng.standard_normal(8))
        frame = torch.tensor(rng.standard_normal((1, 8, 4, 4)))
        static = torch.cat([frame, frame], dim=0)
        assert torch.allclose(block(static, c_t, c_v, t_emb, only_t),
                              block(static, c_t, c_v, t_emb, BASE_OFF), atol=1e-10)
        moving = torch.cat(
            [frame, torch.tensor(rng.standard_normal((1, 8, 4, 4)))], dim=0)
        assert not torch.allclose(block(moving, c_t, c_v, t_emb, only_t),
                                  block(moving, c_t, c_v, t_emb, BASE_OFF))


class TestAdaptedUNet:
    def test_base_equivalence_at_init(self, rng):
        unet = tiny_unet(dtype=torch.float64)
        c_t, c_v = conditions(rng)
        for trial in range(3):
            x = torch.tensor(rng.standard_normal((2, 2, 8, 8)))
            with torch.no_grad():
                on = unet(x, 10, c_t, c_v)
                off = unet(x, 10, c_t, c_v, BASE_OFF)
            assert float((on - off).abs().max()) <= 1e-6
            assert on.shape == x.shape

    def test_adapter_partition(self):
        unet = tiny_unet()
        adapters = set(unet.adapter_parameter_names())
        frozen = set(unet.frozen_parameter_names())
        assert adapters and frozen
        assert not adapters & frozen
        assert adapters | frozen == {n for n, _ in unet.named_parameters()}
        assert any("t_adapter" in n for n in adapters)
        assert any("f_adapter" in n for n in adapters)
        assert any("w_vv" in n for n in adapters)
        assert all("w_tk" not in n for n in adapters)

    def test_freeze_base_and_training_preserves_frozen(self, rng):
        unet = tiny_unet(seed=4)
        unet.freeze_base()
        before = unet.frozen_state()
        sched = DiffusionSchedule(DiffusionConfig(timesteps=50))
        gen = torch.Generator().manual_seed(0)
        optim = torch.optim.AdamW(unet.adapter_parameters(), lr=1e-3)
        c_t = torch.randn(3, 6, generator=gen)
        c_v = torch.randn(4, 6, generator=gen)
        for step in range(20):
            latents = torch.randn(2, 2, 8, 8, generator=gen)
            loss = diffusion_loss(latents, c_t, c_v, gen, unet, sched)
            optim.zero_grad()
            loss.backward()
            optim.step()
        after = unet.frozen_state()
        for name, tensor in before.items():
            assert torch.equal(tensor, after[name]), name
        # adapters actually moved
        moved = [n for n, p in unet.named_parameters()
                 if n in set(unet.adapter_parameter_names())
                 and not torch.equal(p.detach(), torch.zeros_like(p))]
        assert moved

    def test_checkpoint_round_trip(self, tmp_path, rng):
        unet = tiny_unet(seed=9)
        sched = DiffusionSchedule(DiffusionConfig(timesteps=40))
        save_unet_checkpoint(tmp_path / "ck", unet, sched, {"note": "test"})
        loaded, sched2, meta = load_unet_checkpoint(tmp_path / "ck")
        assert meta["note"] == "test"
        assert sched2.timesteps == 40
        np.testing.assert_allclose(sched2.betas, sched.betas, atol=1e-7)
        c_t = torch.randn(3, 6)
        c_v = torch.randn(4, 6)
        x = torch.randn(2, 2, 8, 8)
        assert torch.allclose(unet(x, 5, c_t, c_v), loaded(x, 5, c_t, c_v), atol=1e-6)
        assert meta["adapter_params"].split(",") == unet.adapter_parameter_names()


class TestLatentMapper:
    def test_shape_and_determinism(self, rng):
        mapper = LatentMapper(latent_channels=4, latent_size=8, seed=3)
        frames = rng.uniform(size=(3, 32, 32, 3)).astype(np.float32)
        a = mapper(frames)
        b = LatentMapper(latent_channels=4, latent_size=8, seed=3)(frames)
        assert a.shape == (3, 4, 8, 8)
        assert torch.equal(a, b)

    def test_no_trainable_parameters(self):
        mapper = LatentMapper()
        assert list(mapper.parameters()) == []


class TestDiffusionLoss:
    def setup_method(self):
        self.sched = DiffusionSchedule(DiffusionConfig(timesteps=100))

    def test_perfect_predictor_zero_loss(self):
        gen = torch.Generator().manual_seed(0)
        latents = torch.randn(2, 2, 4, 4, generator=gen)
        captured = {}

        def perfect(x_t, t, c_t, c_v):
            alpha_bar = self.sched.alpha_bar(t)
            eps = (x_t - math.sqrt(alpha_bar) * latents) / math.sqrt(1 - alpha_bar)
            captured["eps"] = eps
            return eps

        loss = diffusion_loss(latents, None, None, gen, perfect, self.sched)
        assert float(loss) == pytest.approx(0.0, abs=1e-10)

    def test_zero_predictor_monte_carlo(self):
        gen = torch.Generator().manual_seed(1)
        latents = torch.zeros(2, 2, 8, 8)
        zero = lambda x_t, t, c_t, c_v: torch.zeros_like(x_t)  # noqa: E731
        t = 60
        weight = min_snr_weight(t, self.sched, 5.0)
        draws = [
            float(diffusion_loss(latents, None, None, gen, zero, self.sched, t=t))
            for _ in range(1000)
        ]
        assert np.mean(draws) == pytest.approx(weight, rel=0.05)

    def test_gradient_flows_into_conditions(self):
        gen = torch.Generator().manual_seed(2)
        unet = tiny_unet(seed=2)
        # nonzero visual value path so c_v also gets gradient
        with torch.no_grad():
            for n, p in unet.named_parameters():
                if "w_vv" in n:
                    p.normal_()
        latents = torch.randn(2, 2, 8, 8, generator=gen)
        c_t = torch.randn(3, 6, requires_grad=True)
        c_v = torch.randn(4, 6, requires_grad=True)
        loss = diffusion_loss(latents, c_t, c_v, gen, unet, self.sched)
        loss.backward()
        assert float(c_t.grad.norm()) > 0
        assert float(c_v.grad.norm()) > 0

    def test_deterministic_given_generator_seed(self):
        unet = tiny_unet(seed=5)
        latents = torch.randn(2, 2, 8, 8, generator=torch.Generator().manual_seed(3))
        c_t = torch.randn(3, 6)
        c_v = torch.randn(4, 6)
        a = diffusion_loss(latents, c_t, c_v, torch.Generator().manual_seed(7),
                           unet, self.sched)
        b = diffusion_loss(latents, c_t, c_v, torch.Generator().manual_seed(7),
                           unet, self.sched)
        assert float(a) == float(b)


class TestTimestepEmbedding:
    def test_shape_and_determinism(self):
        a = timestep_embedding(5, 16, torch.float64)
        b = timestep_embedding(5, 16, torch.float64)
        assert a.shape == (16,)
        assert torch.equal(a, b)
        assert not torch.equal(a, timestep_embedding(6, 16, torch.float64))
