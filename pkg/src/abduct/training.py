"""Two-stage training: independent component fitting, then joint tuning.

Stage I fits the reasoner (cross-entropy on ground-truth explanations),
the imaginer (Min-SNR diffusion loss through adapters and the bridge), and
the contrastive selector, each on its own. Stage II ties the verbal and
pictorial paths together: teacher-forced decoder states are bridged into
the diffusion text-condition space, and the summed loss ce + alpha * diff
backpropagates through both components.

Run directories hold a config snapshot, per-epoch checkpoints, and a plain
text scalar log with one ``step ce diff joint`` record per optimizer step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .contrast import ContrastConfig, train_contrast
from .data import Sample, save_state
from .hypgen import HypothesisSet
from .imaginer import (
    AdaptedUNet,
    DiffusionSchedule,
    LatentMapper,
    diffusion_loss,
    frame_relevance_weights,
    hybrid_condition,
)
from .reasoner import AssembledInput, ByteTokenizer, ReasonerBackbone, assemble_input, ce_loss, reason

STAGE_REASONER = "I_reasoner"
STAGE_IMAGINER = "I_imaginer"
STAGE_CONTRAST = "I_contrast"
STAGE_JOINT = "II_joint"
_STAGES = (STAGE_REASONER, STAGE_IMAGINER, STAGE_CONTRAST, STAGE_JOINT)


class BridgeLayer(nn.Module):
    """Maps reasoner decoder states into the diffusion text-condition space."""

    def __init__(self, d_model: int, d_cond: int, hidden_dim: int | None = None):
        super().__init__()
        hidden = hidden_dim or 2 * d_model
        self.fc1 = nn.Linear(d_model, hidden)
        self.fc2 = nn.Linear(hidden, d_cond)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.silu(self.fc1(x)))


@dataclass
class TrainPlan:
    stage: str
    epochs: int = 1
    alpha: float = 5.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 1
    grad_accum: int = 1
    m_frames: int = 4
    snr_gamma: float = 5.0
    trainable_pattern: str | None = None
    single_thread: bool = False

    def __post_init__(self) -> None:
        if self.stage not in _STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {_STAGES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.stage == STAGE_JOINT and self.alpha <= 0:
            raise ValueError("alpha must be > 0 for joint training")


def joint_loss(ce: torch.Tensor | float, diff: torch.Tensor | float,
               alpha: float) -> torch.Tensor:
    """Combined objective ce + alpha * diff."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    ce = ce if torch.is_tensor(ce) else torch.tensor(float(ce))
    diff = diff if torch.is_tensor(diff) else torch.tensor(float(diff))
    return ce + alpha * diff


# ---------------------------------------------------------------------------
# Prepared corpus
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One sample, fully materialized for the training loops."""

    sample_id: str
    assembled: AssembledInput
    target_tokens: tuple[int, ...]
    latents: torch.Tensor               # (F, C_lat, h, w) masked-event latents
    cond_frame_embeds: torch.Tensor     # (N, d_cond) observed-frame embeddings
    cond_text_embed: torch.Tensor       # (d_cond,) explanation embedding


def prepare_corpus(samples: Sequence[Sample],
                   selected: dict[str, HypothesisSet],
                   tokenizer: ByteTokenizer,
                   latent_mapper: LatentMapper,
                   frame_embedder: Callable[[np.ndarray], np.ndarray],
                   text_embedder: Callable[[str], np.ndarray],
                   placeholder_len: int | None = None,
                   seed: int = 0) -> list[TrainItem]:
    """Assemble inputs, targets, latents, and condition embeddings.

    ``selected`` maps sample ids to their pruned hypothesis sets; samples
    without an entry get an empty set (hypothesis-free prompt). The masked
    event must carry frames: they define the latents the imaginer denoises.
    """
    empty_cache: dict[str, HypothesisSet] = {}
    items: list[TrainItem] = []
    for i, sample in enumerate(samples):
        topk = selected.get(sample.sample_id)
        if topk is None:
            topk = empty_cache.setdefault(
                sample.sample_id,
                HypothesisSet(hypotheses=(), source_sample_id=sample.sample_id),
            )
        assembled = assemble_input(sample, topk, tokenizer,
                                   placeholder_len=placeholder_len,
                                   seed=seed * 100003 + i)
        masked = sample.events[sample.mask_index]
        if masked.frames is None:
            raise ValueError(
                f"sample {sample.sample_id}: masked event has no frames for latents"
            )
        observed = np.concatenate(
            [e.frames for e in sample.observed_events()], axis=0
        )
        items.append(TrainItem(
            sample_id=sample.sample_id,
            assembled=assembled,
            target_tokens=tuple(tokenizer.encode(sample.explanation, add_eos=True)),
            latents=latent_mapper(masked.frames).detach(),
            cond_frame_embeds=torch.as_tensor(frame_embedder(observed),
                                              dtype=torch.float32),
            cond_text_embed=torch.as_tensor(text_embedder(sample.explanation),
                                            dtype=torch.float32),
        ))
    return items


@dataclass
class ModelBundle:
    """Everything the training stages touch, in one place."""

    tokenizer: ByteTokenizer
    backbone: ReasonerBackbone
    bridge: BridgeLayer
    unet: AdaptedUNet
    schedule: DiffusionSchedule
    latent_mapper: LatentMapper


@dataclass
class StageHooks:
    """Test instrumentation for the joint stage."""

    zero_ce: bool = False
    detach_diffusion: bool = False
    skip_diffusion: bool = False
    record_grad_norms: bool = False


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    ce_losses: list[float] = field(default_factory=list)
    diff_losses: list[float] = field(default_factory=list)
    grad_norms: list[dict[str, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Run directory plumbing
# ---------------------------------------------------------------------------

class RunDirectory:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._log_path = self.root / "metrics.log"

    def snapshot_config(self, config: dict) -> None:
        (self.root / "config.json").write_text(
            json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def log_step(self, step: int, ce: float, diff: float, joint: float) -> None:
        with open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{step} {ce:.6f} {diff:.6f} {joint:.6f}\n")

    def checkpoint_dir(self, tag: str) -> Path:
        return self.root / "checkpoints" / tag


def _save_module_checkpoint(directory: Path, modules: dict[str, nn.Module],
                            meta: dict[str, str]) -> None:
    tensors = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().numpy()
    save_state(directory, tensors, meta)


def _seed_everything(seed: int, single_thread: bool) -> None:
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------

def run_stage1(plan: TrainPlan, corpus: Sequence[TrainItem], bundle: ModelBundle,
               run_dir: RunDirectory | None = None) -> TrainHistory:
    """Train one component in isolation according to ``plan.stage``."""
    if plan.stage not in (STAGE_REASONER, STAGE_IMAGINER):
        raise ValueError(
            f"run_stage1 handles {STAGE_REASONER} and {STAGE_IMAGINER}; "
            f"use run_contrast_stage for {STAGE_CONTRAST}"
        )
    if not corpus:
        raise ValueError("corpus is empty")
    _seed_everything(plan.seed, plan.single_thread)
    history = TrainHistory()
    order_rng = np.random.default_rng(plan.seed)
    diffusion_gen = torch.Generator().manual_seed(plan.seed + 1)

    if plan.stage == STAGE_REASONER:
        bundle.backbone.set_trainable(plan.trainable_pattern)
        params = bundle.backbone.trainable_parameters()
        if not params:
            raise ValueError("trainable pattern selects no parameters")
        optim = torch.optim.AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay)
    else:
        bundle.unet.freeze_base()
        params = bundle.unet.adapter_parameters() + list(bundle.bridge.parameters())
        optim = torch.optim.AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay)

    step = 0
    for epoch in range(plan.epochs):
        for idx in order_rng.permutation(len(corpus)):
            item = corpus[idx]
            if plan.stage == STAGE_REASONER:
                out = reason(item.assembled, bundle.backbone, bundle.tokenizer,
                             mode="teacher_forced", target=item.target_tokens)
                loss = ce_loss(out.logits, list(item.target_tokens))
                ce_val, diff_val = float(loss.detach()), 0.0
            else:
                with torch.no_grad():
                    out = reason(item.assembled, bundle.backbone, bundle.tokenizer,
                                 mode="teacher_forced", target=item.target_tokens)
                    c_t_raw = out.c_t.detach()
                loss = _imaginer_term(item, c_t_raw, bundle, plan, diffusion_gen)
                ce_val, diff_val = 0.0, float(loss.detach())
            loss = loss / plan.grad_accum
            loss.backward()
            if (step + 1) % plan.grad_accum == 0:
                optim.step()
                optim.zero_grad()
            history.losses.append(float(loss.detach()) * plan.grad_accum)
            history.ce_losses.append(ce_val)
            history.diff_losses.append(diff_val)
            if run_dir is not None:
                run_dir.log_step(step, ce_val, diff_val,
                                 float(loss.detach()) * plan.grad_accum)
            step += 1
        if run_dir is not None and (epoch + 1) % plan.checkpoint_every == 0:
            tag = f"{plan.stage}_epoch{epoch + 1}"
            _save_module_checkpoint(
                run_dir.checkpoint_dir(tag),
                {"backbone": bundle.backbone, "bridge": bundle.bridge,
                 "unet": bundle.unet},
                {"stage": plan.stage, "epoch": str(epoch + 1)},
            )
            history.checkpoints.append(tag)
    return history


def run_contrast_stage(plan: TrainPlan, samples: Sequence[Sample],
                       negatives: dict[str, HypothesisSet], space,
                       temperature: float = 0.07):
    """Stage I contrastive training, delegated to the contrast module."""
    if plan.stage != STAGE_CONTRAST:
        raise ValueError(f"expected stage {STAGE_CONTRAST}, got {plan.stage}")
    cfg = ContrastConfig(
        temperature=temperature,
        negatives=max(1, min(len(h) for h in negatives.values()) if negatives else 1),
        epochs=plan.epochs,
        lr=plan.lr,
        weight_decay=0.0,
        seed=plan.seed,
    )
    return train_contrast(samples, negatives, cfg, space)


def _imaginer_term(item: TrainItem, c_t_raw: torch.Tensor, bundle: ModelBundle,
                   plan: TrainPlan, generator: torch.Generator) -> torch.Tensor:
    """Bridge the decoder states and score the conditioned denoiser."""
    bridged = bundle.bridge(c_t_raw)
    gamma = frame_relevance_weights(item.cond_frame_embeds, item.cond_text_embed)
    m = min(plan.m_frames, item.cond_frame_embeds.shape[0])
    cond = hybrid_condition(item.cond_frame_embeds, gamma, m)
    # the hybrid condition feeds the visual branch; bridged states feed text
    return diffusion_loss(item.latents, bridged, cond.c_v, generator,
                          bundle.unet, bundle.schedule, plan.snr_gamma)


# ---------------------------------------------------------------------------
# Stage II
# ---------------------------------------------------------------------------

def run_stage2(plan: TrainPlan, corpus: Sequence[TrainItem], bundle: ModelBundle,
               run_dir: RunDirectory | None = None,
               hooks: StageHooks | None = None) -> TrainHistory:
    """Joint end-to-end pass: ce + alpha * diffusion through the bridge."""
    if plan.stage != STAGE_JOINT:
        raise ValueError(f"expected stage {STAGE_JOINT}, got {plan.stage}")
    if not corpus:
        raise ValueError("corpus is empty")
    hooks = hooks or StageHooks()
    _seed_everything(plan.seed, plan.single_thread)
    history = TrainHistory()
    order_rng = np.random.default_rng(plan.seed)
    diffusion_gen = torch.Generator().manual_seed(plan.seed + 1)

    bundle.backbone.set_trainable(plan.trainable_pattern)
    bundle.unet.freeze_base()
    params = (bundle.backbone.trainable_parameters()
              + bundle.unet.adapter_parameters()
              + list(bundle.bridge.parameters()))
    optim = torch.optim.AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay)

    step = 0
    for epoch in range(plan.epochs):
        for idx in order_rng.permutation(len(corpus)):
            item = corpus[idx]
            out = reason(item.assembled, bundle.backbone, bundle.tokenizer,
                         mode="teacher_forced", target=item.target_tokens)
            ce = ce_loss(out.logits, list(item.target_tokens))
            if hooks.zero_ce:
                ce = ce * 0.0
            if hooks.skip_diffusion:
                diff = torch.zeros((), dtype=ce.dtype)
                loss = ce
            else:
                c_t = out.c_t.detach() if hooks.detach_diffusion else out.c_t
                diff = _imaginer_term(item, c_t, bundle, plan, diffusion_gen)
                if hooks.detach_diffusion:
                    diff = diff.detach()
                loss = joint_loss(ce, diff, plan.alpha)
            optim.zero_grad()
            loss.backward()
            if hooks.record_grad_norms:
                history.grad_norms.append(_grad_norms(bundle))
            optim.step()
            history.losses.append(float(loss.detach()))
            history.ce_losses.append(float(ce.detach()))
            history.diff_losses.append(float(diff.detach()))
            if run_dir is not None:
                run_dir.log_step(step, float(ce.detach()), float(diff.detach()),
                                 float(loss.detach()))
            step += 1
        if run_dir is not None and (epoch + 1) % plan.checkpoint_every == 0:
            tag = f"{plan.stage}_epoch{epoch + 1}"
            _save_module_checkpoint(
                run_dir.checkpoint_dir(tag),
                {"backbone": bundle.backbone, "bridge": bundle.bridge,
                 "unet": bundle.unet},
                {"stage": plan.stage, "epoch": str(epoch + 1)},
            )
            history.checkpoints.append(tag)
    return history


def evaluate_diffusion(corpus: Sequence[TrainItem], bundle: ModelBundle,
                       plan: TrainPlan, eval_seed: int = 0) -> float:
    """Mean diffusion loss over the corpus with pinned noise/timestep draws.

    The generator is freshly seeded and items are visited in order, so two
    calls see identical draws and differences reflect the weights alone.
    """
    gen = torch.Generator().manual_seed(eval_seed)
    total = 0.0
    with torch.no_grad():
        for item in corpus:
            out = reason(item.assembled, bundle.backbone, bundle.tokenizer,
                         mode="teacher_forced", target=item.target_tokens)
            total += float(_imaginer_term(item, out.c_t, bundle, plan, gen))
    return total / len(corpus)


def _grad_norms(bundle: ModelBundle) -> dict[str, float]:
    def norm_of(params) -> float:
        total = 0.0
        for p in params:
            if p.grad is not None:
                total += float((p.grad.detach() ** 2).sum())
        return total ** 0.5

    return {
        "reasoner": norm_of(bundle.backbone.trainable_parameters()),
        "bridge": norm_of(bundle.bridge.parameters()),
        "adapters": norm_of(bundle.unet.adapter_parameters()),
    }


# ---------------------------------------------------------------------------
# Bundle persistence
# ---------------------------------------------------------------------------

def save_bundle(directory: str | Path, bundle: ModelBundle,
                extra_meta: dict[str, str] | None = None) -> None:
    """Persist every bundle component as named tensors plus dims metadata."""
    from .data import save_state as _save

    directory = Path(directory)
    tensors: dict[str, np.ndarray] = {}
    for prefix, module in (("backbone", bundle.backbone), ("bridge", bundle.bridge),
                           ("unet", bundle.unet), ("mapper", bundle.latent_mapper)):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().numpy()
    tensors["schedule.betas"] = bundle.schedule.betas.astype(np.float32)
    rc = bundle.backbone.cfg
    uc = bundle.unet.cfg
    meta = {
        "reasoner.vocab_size": str(rc.vocab_size),
        "reasoner.d_model": str(rc.d_model),
        "reasoner.heads": str(rc.heads),
        "reasoner.enc_layers": str(rc.enc_layers),
        "reasoner.dec_layers": str(rc.dec_layers),
        "reasoner.ffn_dim": str(rc.ffn_dim),
        "reasoner.patch_grid": str(rc.patch_grid),
        "reasoner.max_enc_len": str(rc.max_enc_len),
        "reasoner.max_dec_len": str(rc.max_dec_len),
        "bridge.d_model": str(bundle.bridge.fc1.in_features),
        "bridge.hidden": str(bundle.bridge.fc1.out_features),
        "bridge.d_cond": str(bundle.bridge.fc2.out_features),
        "unet.latent_channels": str(uc.latent_channels),
        "unet.base_channels": str(uc.base_channels),
        "unet.channel_mult": str(uc.channel_mult),
        "unet.d_cond": str(uc.d_cond),
        "unet.d_k": str(uc.d_k),
        "unet.t_dim": str(uc.t_dim),
        "unet.groups": str(uc.groups),
        "unet.adapter_ratio": str(uc.adapter_ratio),
        "schedule.timesteps": str(bundle.schedule.timesteps),
        "schedule.beta_start": repr(bundle.schedule.cfg.beta_start),
        "schedule.beta_end": repr(bundle.schedule.cfg.beta_end),
        "mapper.latent_size": str(bundle.latent_mapper.latent_size),
    }
    meta.update(extra_meta or {})
    _save(directory, tensors, meta)
    bundle.tokenizer.save(directory / "tokenizer.txt")


def load_bundle(directory: str | Path) -> tuple[ModelBundle, dict[str, str]]:
    from .data import load_state as _load
    from .imaginer import DiffusionConfig, UNetConfig
    from .reasoner import ReasonerConfig

    directory = Path(directory)
    tensors, meta = _load(directory)
    tokenizer = ByteTokenizer.load(directory / "tokenizer.txt")
    backbone = ReasonerBackbone(ReasonerConfig(
        vocab_size=int(meta["reasoner.vocab_size"]),
        d_model=int(meta["reasoner.d_model"]),
        heads=int(meta["reasoner.heads"]),
        enc_layers=int(meta["reasoner.enc_layers"]),
        dec_layers=int(meta["reasoner.dec_layers"]),
        ffn_dim=int(meta["reasoner.ffn_dim"]),
        patch_grid=int(meta["reasoner.patch_grid"]),
        max_enc_len=int(meta["reasoner.max_enc_len"]),
        max_dec_len=int(meta["reasoner.max_dec_len"]),
    ))
    bridge = BridgeLayer(
        d_model=int(meta["bridge.d_model"]),
        d_cond=int(meta["bridge.d_cond"]),
        hidden_dim=int(meta["bridge.hidden"]),
    )
    unet = AdaptedUNet(UNetConfig(
        latent_channels=int(meta["unet.latent_channels"]),
        base_channels=int(meta["unet.base_channels"]),
        channel_mult=int(meta["unet.channel_mult"]),
        d_cond=int(meta["unet.d_cond"]),
        d_k=int(meta["unet.d_k"]),
        t_dim=int(meta["unet.t_dim"]),
        groups=int(meta["unet.groups"]),
        adapter_ratio=int(meta["unet.adapter_ratio"]),
    ))
    mapper = LatentMapper(latent_channels=int(meta["unet.latent_channels"]),
                          latent_size=int(meta["mapper.latent_size"]))
    for prefix, module in (("backbone", backbone), ("bridge", bridge),
                           ("unet", unet), ("mapper", mapper)):
        state = {k[len(prefix) + 1:]: torch.as_tensor(v)
                 for k, v in tensors.items() if k.startswith(f"{prefix}.")}
        module.load_state_dict(state)
    schedule = DiffusionSchedule(DiffusionConfig(
        timesteps=int(meta["schedule.timesteps"]),
        beta_start=float(meta["schedule.beta_start"]),
        beta_end=float(meta["schedule.beta_end"]),
    ))
    bundle = ModelBundle(tokenizer=tokenizer, backbone=backbone, bridge=bridge,
                         unet=unet, schedule=schedule, latent_mapper=mapper)
    return bundle, meta
