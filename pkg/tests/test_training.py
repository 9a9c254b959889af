"""Bridge layer, loss composition, and the two training stages."""

import copy

import numpy as np
import pytest
import torch

from abduct.embed import frame_features, text_features
from abduct.hypgen import Hypothesis, HypothesisSet, PROVENANCE_CANDIDATE
from abduct.reasoner import ByteTokenizer, ce_loss, reason
from abduct.training import (
    BridgeLayer,
    ModelBundle,
    RunDirectory,
    STAGE_CONTRAST,
    STAGE_IMAGINER,
    STAGE_JOINT,
    STAGE_REASONER,
    StageHooks,
    TrainPlan,
    _imaginer_term,
    evaluate_diffusion,
    joint_loss,
    prepare_corpus,
    run_stage1,
    run_stage2,
)
from conftest import make_bundle, make_video_corpus

D_COND = 8


def build_corpus(samples, topics, bundle, k=1, seed=0):
    selected = {}
    for s in samples:
        hyps = [s.explanation] + [t for t in topics if t != s.explanation][:max(0, k - 1)]
        selected[s.sample_id] = HypothesisSet(
            hypotheses=tuple(
                Hypothesis(text=t, provenance=PROVENANCE_CANDIDATE, score=1.0 - 0.1 * i)
                for i, t in enumerate(hyps[:k])
            ),
            source_sample_id=s.sample_id,
        )
    return prepare_corpus(
        samples, selected, bundle.tokenizer, bundle.latent_mapper,
        frame_embedder=lambda fr: frame_features(fr, dim=D_COND, seed=5),
        text_embedder=lambda t: text_features(t, dim=D_COND, seed=5),
        seed=seed,
    )


@pytest.fixture(scope="module")
def world():
    samples, topics = make_video_corpus(n_topics=4, videos_per_topic=2, seed=0)
    tok = ByteTokenizer.train(topics, num_merges=24)
    return samples, topics, tok


class TestBridgeLayer:
    def test_shape(self):
        bridge = BridgeLayer(d_model=16, d_cond=8)
        out = bridge(torch.randn(5, 16))
        assert out.shape == (5, 8)

    def test_gradient_matches_finite_differences(self, rng):
        bridge = BridgeLayer(d_model=4, d_cond=3, hidden_dim=5).double()
        x = torch.tensor(rng.standard_normal((3, 4)))
        target = torch.tensor(rng.standard_normal((3, 3)))

        def loss_fn():
            return ((bridge(x) - target) ** 2).mean()

        loss = loss_fn()
        bridge.zero_grad()
        loss.backward()
        eps = 1e-6
        for name, param in bridge.named_parameters():
            analytic = param.grad.numpy().copy()
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
            assert np.linalg.norm(analytic - fd) / denom < 1e-5, name


class TestJointLoss:
    def test_arithmetic(self):
        assert float(joint_loss(1.0, 0.2, alpha=5.0)) == pytest.approx(2.0)

    def test_alpha_must_be_positive(self):
        with pytest.raises(ValueError, match="alpha"):
            joint_loss(1.0, 0.2, alpha=0.0)
        with pytest.raises(ValueError, match="alpha"):
            TrainPlan(stage=STAGE_JOINT, alpha=0.0)

    def test_partial_derivative_wrt_diff_is_alpha(self):
        diff = torch.tensor(0.3, requires_grad=True)
        loss = joint_loss(torch.tensor(1.0), diff, alpha=5.0)
        loss.backward()
        assert float(diff.grad) == pytest.approx(5.0)


class TestTrainPlan:
    def test_stage_validated(self):
        with pytest.raises(ValueError, match="stage"):
            TrainPlan(stage="III_bogus")

    def test_epochs_validated(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainPlan(stage=STAGE_REASONER, epochs=0)

    def test_known_stages(self):
        for stage in (STAGE_REASONER, STAGE_IMAGINER, STAGE_CONTRAST, STAGE_JOINT):
            TrainPlan(stage=stage)


class TestPrepareCorpus:
    def test_fields(self, world):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=0, d_cond=D_COND)
        corpus = build_corpus(samples[:3], topics, bundle)
        item = corpus[0]
        assert item.latents.shape == (2, 2, 8, 8)
        assert item.cond_frame_embeds.shape[1] == D_COND
        assert item.cond_text_embed.shape == (D_COND,)
        assert item.target_tokens
        assert item.assembled.frames.ndim == 4

    def test_missing_selection_means_no_hypotheses(self, world):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=0, d_cond=D_COND)
        corpus = prepare_corpus(
            samples[:1], {}, tok, bundle.latent_mapper,
            frame_embedder=lambda fr: frame_features(fr, dim=D_COND),
            text_embedder=lambda t: text_features(t, dim=D_COND),
        )
        text = tok.decode(list(corpus[0].assembled.prompt_tokens))
        assert "Candidate hypotheses" not in text


class TestStage1Reasoner:
    def test_loss_decreases(self, world):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=1, d_cond=D_COND)
        corpus = build_corpus(samples, topics, bundle)
        plan = TrainPlan(stage=STAGE_REASONER, epochs=20, lr=1e-3, seed=1)
        history = run_stage1(plan, corpus, bundle)
        n = len(corpus)
        assert np.mean(history.losses[-n:]) < 0.6 * np.mean(history.losses[:n])

    def test_empty_corpus_raises(self, world):
        _, _, tok = world
        bundle = make_bundle(tok, seed=1, d_cond=D_COND)
        with pytest.raises(ValueError, match="empty"):
            run_stage1(TrainPlan(stage=STAGE_REASONER), [], bundle)

    def test_wrong_stage_rejected(self, world):
        _, _, tok = world
        bundle = make_bundle(tok, seed=1, d_cond=D_COND)
        with pytest.raises(ValueError, match="stage"):
            run_stage1(TrainPlan(stage=STAGE_JOINT), [object()], bundle)


class TestStage1Imaginer:
    def test_loss_decreases_and_base_frozen(self, world):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=2, d_cond=D_COND)
        corpus = build_corpus(samples, topics, bundle)
        frozen_before = bundle.unet.frozen_state()
        backbone_before = {
            n: p.detach().clone() for n, p in bundle.backbone.named_parameters()
        }
        plan = TrainPlan(stage=STAGE_IMAGINER, epochs=15, lr=3e-3, seed=2)
        before = evaluate_diffusion(corpus, bundle, plan)
        run_stage1(plan, corpus, bundle)
        after = evaluate_diffusion(corpus, bundle, plan)
        assert after < before
        for name, tensor in bundle.unet.frozen_state().items():
            assert torch.equal(tensor, frozen_before[name]), name
        # the reasoner is untouched in the imaginer stage
        for name, param in bundle.backbone.named_parameters():
            assert torch.equal(param.detach(), backbone_before[name]), name

    def test_run_dir_artifacts(self, world, tmp_path):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=2, d_cond=D_COND)
        corpus = build_corpus(samples[:2], topics, bundle)
        run_dir = RunDirectory(tmp_path / "run")
        run_dir.snapshot_config({"stage": STAGE_IMAGINER, "alpha": 5.0})
        plan = TrainPlan(stage=STAGE_IMAGINER, epochs=2, lr=1e-3, seed=0)
        history = run_stage1(plan, corpus, bundle, run_dir=run_dir)
        assert (tmp_path / "run" / "config.json").exists()
        log_lines = (tmp_path / "run" / "metrics.log").read_text().splitlines()
        assert len(log_lines) == len(history.losses)
        assert len(log_lines[0].split()) == 4
        assert history.checkpoints
        ck = tmp_path / "run" / "checkpoints" / history.checkpoints[0]
        assert (ck / "tensors.txt").exists()


class TestStage2:
    def make_setup(self, world, seed=0, n=4):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=seed, d_cond=D_COND)
        corpus = build_corpus(samples[:n], topics, bundle)
        return bundle, corpus

    def test_joint_loss_decreases(self, world):
        bundle, corpus = self.make_setup(world, seed=3, n=8)
        plan = TrainPlan(stage=STAGE_JOINT, epochs=12, lr=1e-3, alpha=5.0, seed=3)
        history = run_stage2(plan, corpus, bundle)
        n = len(corpus)
        assert np.mean(history.losses[-n:]) < np.mean(history.losses[:n])

    def test_gradient_reaches_reasoner_through_diffusion_alone(self, world):
        bundle, corpus = self.make_setup(world, seed=4)
        plan = TrainPlan(stage=STAGE_JOINT, epochs=1, lr=1e-4, alpha=5.0, seed=4)
        hooks = StageHooks(zero_ce=True, record_grad_norms=True)
        history = run_stage2(plan, corpus[:2], bundle, hooks=hooks)
        assert history.grad_norms
        assert all(g["reasoner"] > 0 for g in history.grad_norms)
        assert all(g["bridge"] > 0 for g in history.grad_norms)

    def test_detached_diffusion_equals_ce_only_run(self, world):
        samples, topics, tok = world

        def run(hooks):
            bundle = make_bundle(tok, seed=5, d_cond=D_COND)
            corpus = build_corpus(samples[:3], topics, bundle, seed=5)
            plan = TrainPlan(stage=STAGE_JOINT, epochs=2, lr=1e-3, alpha=5.0, seed=5)
            run_stage2(plan, corpus, bundle, hooks=hooks)
            return bundle

        detached = run(StageHooks(detach_diffusion=True))
        ce_only = run(StageHooks(skip_diffusion=True))
        for (name, p1), (_, p2) in zip(detached.backbone.named_parameters(),
                                       ce_only.backbone.named_parameters()):
            assert torch.equal(p1, p2), name
        for (name, p1), (_, p2) in zip(detached.bridge.named_parameters(),
                                       ce_only.bridge.named_parameters()):
            assert torch.equal(p1, p2), name

    def test_determinism_bitwise(self, world):
        samples, topics, tok = world

        def run():
            bundle = make_bundle(tok, seed=6, d_cond=D_COND)
            corpus = build_corpus(samples[:3], topics, bundle, seed=6)
            plan = TrainPlan(stage=STAGE_JOINT, epochs=2, lr=1e-3, alpha=5.0,
                             seed=6, single_thread=True)
            run_stage2(plan, corpus, bundle)
            return bundle

        b1, b2 = run(), run()
        for (name, p1), (_, p2) in zip(b1.backbone.named_parameters(),
                                       b2.backbone.named_parameters()):
            assert torch.equal(p1, p2), name
        for (name, p1), (_, p2) in zip(b1.unet.named_parameters(),
                                       b2.unet.named_parameters()):
            assert torch.equal(p1, p2), name

    def test_frozen_unet_base_survives_joint_training(self, world):
        bundle, corpus = self.make_setup(world, seed=7)
        frozen_before = bundle.unet.frozen_state()
        plan = TrainPlan(stage=STAGE_JOINT, epochs=3, lr=1e-3, alpha=5.0, seed=7)
        run_stage2(plan, corpus, bundle)
        for name, tensor in bundle.unet.frozen_state().items():
            assert torch.equal(tensor, frozen_before[name]), name


class TestAdditivity:
    def test_joint_gradients_are_ce_plus_alpha_diff(self, world):
        samples, topics, tok = world
        bundle = make_bundle(tok, seed=8, d_cond=D_COND)
        bundle.backbone.double()
        bundle.bridge.double()
        bundle.unet.double()
        corpus = build_corpus(samples[:1], topics, bundle)
        item = corpus[0]
        item.latents = item.latents.double()
        item.cond_frame_embeds = item.cond_frame_embeds.double()
        item.cond_text_embed = item.cond_text_embed.double()
        bundle.unet.freeze_base()
        alpha = 5.0
        plan = TrainPlan(stage=STAGE_JOINT, alpha=alpha, seed=8)
        params = (bundle.backbone.trainable_parameters()
                  + bundle.unet.adapter_parameters()
                  + list(bundle.bridge.parameters()))

        def forward():
            out = reason(item.assembled, bundle.backbone, bundle.tokenizer,
                         mode="teacher_forced", target=item.target_tokens)
            ce = ce_loss(out.logits, list(item.target_tokens))
            gen = torch.Generator().manual_seed(99)
            diff = _imaginer_term(item, out.c_t, bundle, plan, gen)
            return ce, diff

        ce, diff = forward()
        g_ce = torch.autograd.grad(ce, params, retain_graph=True,
                                   allow_unused=True)
        g_diff = torch.autograd.grad(diff, params, allow_unused=True)
        ce2, diff2 = forward()
        g_joint = torch.autograd.grad(joint_loss(ce2, diff2, alpha), params,
                                      allow_unused=True)
        for gc, gd, gj in zip(g_ce, g_diff, g_joint):
            gc = torch.zeros_like(gj) if gc is None else gc
            gd = torch.zeros_like(gj) if gd is None else gd
            assert torch.allclose(gj, gc + alpha * gd, atol=1e-10)
