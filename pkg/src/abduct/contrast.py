"""Cross-modal causal space: encoders, contrastive loss, hypothesis ranking.

A visual head (2-layer transformer encoder over per-frame features, mean
pooled, projected) and a text head (2-layer MLP over text features) map
segments and hypothesis texts into one joint space. Causal relevance of a
hypothesis is the cosine between (initial + hypothesis) and the final
segment; training pulls the ground-truth explanation above generated hard
negatives with a temperature-scaled softmax loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import Sample, SegmentPartition, load_state, partition_segments, save_state
from .hypgen import FLAG_TOPK_OVERFLOW, Hypothesis, HypothesisSet

_NORM_EPS = 1e-12


class VisualEncoder(nn.Module):
    """Per-frame features -> one joint-space vector per segment."""

    def __init__(self, input_dim: int, model_dim: int = 256, heads: int = 4,
                 ffn_dim: int | None = None, layers: int = 2):
        super().__init__()
        self.input_dim = input_dim
        self.model_dim = model_dim
        self.heads = heads
        self.ffn_dim = ffn_dim or 2 * model_dim
        self.layers = layers
        self.in_proj = nn.Linear(input_dim, model_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=model_dim, nhead=heads,
            dim_feedforward=self.ffn_dim,
            dropout=0.0, batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        self.out_proj = nn.Linear(model_dim, model_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """features: (N, input_dim) frame rows. Returns (model_dim,)."""
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise ValueError(
                f"expected (N, {self.input_dim}) features, got {tuple(features.shape)}"
            )
        hidden = self.encoder(self.in_proj(features).unsqueeze(0))
        return self.out_proj(hidden.mean(dim=1)).squeeze(0)

    def encode_segment(self, segment: Sequence) -> torch.Tensor:
        """Encode a list of events; an empty segment maps to the zero vector."""
        param = next(self.parameters())
        if not segment:
            return torch.zeros(self.model_dim, dtype=param.dtype, device=param.device)
        rows = [np.asarray(e.frame_features, dtype=np.float64) for e in segment]
        feats = torch.as_tensor(np.concatenate(rows, axis=0),
                                dtype=param.dtype, device=param.device)
        return self.forward(feats)


class TextEncoder(nn.Module):
    """Precomputed text features -> joint-space vector via a 2-layer MLP."""

    def __init__(self, input_dim: int, model_dim: int = 256, hidden_dim: int | None = None):
        super().__init__()
        self.input_dim = input_dim
        self.model_dim = model_dim
        self.hidden_dim = hidden_dim or model_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, self.hidden_dim),
            nn.GELU(),
            nn.Linear(self.hidden_dim, model_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)


@dataclass
class CausalSpace:
    """Bundle of the two encoder heads plus the text featurizer they share."""

    visual: VisualEncoder
    text: TextEncoder
    featurizer: Callable[[str], np.ndarray]

    def encode_text(self, text: str) -> torch.Tensor:
        param = next(self.text.parameters())
        feats = torch.as_tensor(np.asarray(self.featurizer(text), dtype=np.float64),
                                dtype=param.dtype, device=param.device)
        return self.text(feats)

    def eval_(self) -> "CausalSpace":
        self.visual.eval()
        self.text.eval()
        return self

    def train_(self) -> "CausalSpace":
        self.visual.train()
        self.text.train()
        return self


@dataclass
class ContrastConfig:
    temperature: float = 0.07
    negatives: int = 100
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")


# ---------------------------------------------------------------------------
# Loss and scoring
# ---------------------------------------------------------------------------

def encode_visual(segment: Sequence, enc: VisualEncoder) -> torch.Tensor:
    """Encode a segment of events; empty segments map to the zero vector."""
    return enc.encode_segment(segment)


def _checked_cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    norm_u = torch.linalg.vector_norm(u)
    norm_v = torch.linalg.vector_norm(v)
    if float(norm_u.detach()) < _NORM_EPS or float(norm_v.detach()) < _NORM_EPS:
        raise ValueError("cosine undefined: zero-norm vector")
    return (u * v).sum() / (norm_u * norm_v)


def contrast_logits(x_initial: torch.Tensor, x_final: torch.Tensor,
                    x_pos: torch.Tensor, x_negs: Sequence[torch.Tensor],
                    tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Temperature-scaled cosines of the positive and each negative composite."""
    pos = _checked_cosine(x_initial + x_pos, x_final) / tau
    negs = torch.stack(
        [_checked_cosine(x_initial + x_neg, x_final) / tau for x_neg in x_negs]
    )
    return pos, negs


def contrast_loss(x_initial: torch.Tensor, x_final: torch.Tensor,
                  x_pos: torch.Tensor, x_negs: Sequence[torch.Tensor],
                  tau: float) -> torch.Tensor:
    """Softmax cross-entropy of the positive composite against M negatives.

    The partition function includes the positive term, so the loss is
    strictly positive and bounded below by 0. Zero-norm composites raise
    instead of being clamped.
    """
    if len(x_negs) < 1:
        raise ValueError("need at least one negative")
    pos, negs = contrast_logits(x_initial, x_final, x_pos, x_negs, tau)
    all_logits = torch.cat([pos.reshape(1), negs])
    return torch.logsumexp(all_logits, dim=0) - pos


def relevance_score(x_initial: torch.Tensor, x_hyp: torch.Tensor,
                    x_final: torch.Tensor) -> float:
    """Causal relevance: cosine of (initial + hypothesis) with final."""
    x_initial = torch.as_tensor(x_initial)
    x_hyp = torch.as_tensor(x_hyp)
    x_final = torch.as_tensor(x_final)
    return float(_checked_cosine(x_initial + x_hyp, x_final))


def select_topk(candidates: HypothesisSet, partition: SegmentPartition,
                space: CausalSpace, k: int) -> HypothesisSet:
    """Score candidates by causal relevance and keep the k best.

    Stable descending sort: ties keep the original candidate order. Asking
    for more than available returns everything with an overflow flag.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return HypothesisSet(hypotheses=(), source_sample_id=candidates.source_sample_id)
    space.eval_()
    with torch.no_grad():
        x_initial = space.visual.encode_segment(partition.initial)
        x_final = space.visual.encode_segment(partition.final)
        scores = [
            relevance_score(x_initial, space.encode_text(h.text), x_final)
            for h in candidates.hypotheses
        ]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    flags = list(candidates.flags)
    if k > len(candidates):
        if FLAG_TOPK_OVERFLOW not in flags:
            flags.append(FLAG_TOPK_OVERFLOW)
    chosen = order[:k]
    return HypothesisSet(
        hypotheses=tuple(
            Hypothesis(text=candidates.hypotheses[i].text,
                       provenance=candidates.hypotheses[i].provenance,
                       score=scores[i])
            for i in chosen
        ),
        source_sample_id=candidates.source_sample_id,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class ContrastTrainResult:
    space: CausalSpace
    epoch_accuracies: list[float]
    best_epoch: int
    skipped_samples: int


def _sample_tensors(sample: Sample, negatives: HypothesisSet, space: CausalSpace):
    partition = partition_segments(sample)
    x_initial = space.visual.encode_segment(partition.initial)
    x_final = space.visual.encode_segment(partition.final)
    x_pos = space.encode_text(sample.explanation)
    x_negs = [space.encode_text(h.text) for h in negatives.hypotheses]
    return x_initial, x_final, x_pos, x_negs


def training_accuracy(samples: Sequence[Sample],
                      negatives: dict[str, HypothesisSet],
                      space: CausalSpace) -> float:
    """Fraction of samples whose positive strictly outranks every negative."""
    space.eval_()
    wins = 0
    with torch.no_grad():
        for sample in samples:
            x_i, x_f, x_pos, x_negs = _sample_tensors(
                sample, negatives[sample.sample_id], space
            )
            pos_score = relevance_score(x_i, x_pos, x_f)
            if all(pos_score > relevance_score(x_i, x_n, x_f) for x_n in x_negs):
                wins += 1
    return wins / len(samples)


def train_contrast(samples: Sequence[Sample],
                   negatives: dict[str, HypothesisSet],
                   cfg: ContrastConfig,
                   space: CausalSpace) -> ContrastTrainResult:
    """Fit the joint space on (sample, hard negatives) pairs.

    Runs ``cfg.epochs`` passes with a seeded shuffle, snapshots the encoder
    weights each epoch, and restores the snapshot with the highest training
    accuracy (earliest epoch on ties). Samples whose final segment is empty
    have no anchor for the loss and are skipped.
    """
    usable = [s for s in samples if s.mask_index < s.num_events - 1
              and s.sample_id in negatives and len(negatives[s.sample_id]) >= 1]
    skipped = len(samples) - len(usable)
    if not usable:
        raise ValueError("no usable samples to train on")
    params = list(space.visual.parameters()) + list(space.text.parameters())
    optim = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    snapshots: list[tuple[dict, dict]] = []
    for _ in range(cfg.epochs):
        space.train_()
        order = rng.permutation(len(usable))
        for idx in order:
            sample = usable[idx]
            x_i, x_f, x_pos, x_negs = _sample_tensors(
                sample, negatives[sample.sample_id], space
            )
            loss = contrast_loss(x_i, x_f, x_pos, x_negs, cfg.temperature)
            optim.zero_grad()
            loss.backward()
            optim.step()
        history.append(training_accuracy(usable, negatives, space))
        snapshots.append((
            {k: v.detach().clone() for k, v in space.visual.state_dict().items()},
            {k: v.detach().clone() for k, v in space.text.state_dict().items()},
        ))
    best_epoch = int(np.argmax(history))
    space.visual.load_state_dict(snapshots[best_epoch][0])
    space.text.load_state_dict(snapshots[best_epoch][1])
    space.eval_()
    return ContrastTrainResult(
        space=space,
        epoch_accuracies=history,
        best_epoch=best_epoch,
        skipped_samples=skipped,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_contrast_checkpoint(directory: str | Path, space: CausalSpace,
                             cfg: ContrastConfig, epoch: int, accuracy: float) -> None:
    tensors = {}
    for prefix, module in (("visual", space.visual), ("text", space.text)):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().numpy()
    meta = {
        "visual_input_dim": str(space.visual.input_dim),
        "visual_heads": str(space.visual.heads),
        "visual_ffn_dim": str(space.visual.ffn_dim),
        "visual_layers": str(space.visual.layers),
        "text_input_dim": str(space.text.input_dim),
        "text_hidden_dim": str(space.text.hidden_dim),
        "model_dim": str(space.visual.model_dim),
        "temperature": repr(cfg.temperature),
        "epoch": str(epoch),
        "accuracy": repr(accuracy),
    }
    save_state(directory, tensors, meta)


def load_contrast_checkpoint(directory: str | Path,
                             featurizer: Callable[[str], np.ndarray]) -> tuple[CausalSpace, dict]:
    tensors, meta = load_state(directory)
    visual = VisualEncoder(
        input_dim=int(meta["visual_input_dim"]),
        model_dim=int(meta["model_dim"]),
        heads=int(meta["visual_heads"]),
        ffn_dim=int(meta["visual_ffn_dim"]),
        layers=int(meta["visual_layers"]),
    )
    text = TextEncoder(
        input_dim=int(meta["text_input_dim"]),
        model_dim=int(meta["model_dim"]),
        hidden_dim=int(meta["text_hidden_dim"]),
    )
    visual.load_state_dict({
        k[len("visual."):]: torch.as_tensor(v)
        for k, v in tensors.items() if k.startswith("visual.")
    })
    text.load_state_dict({
        k[len("text."):]: torch.as_tensor(v)
        for k, v in tensors.items() if k.startswith("text.")
    })
    space = CausalSpace(visual=visual, text=text, featurizer=featurizer).eval_()
    return space, meta
