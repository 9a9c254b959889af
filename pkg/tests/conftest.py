"""Shared builders for synthetic events, samples, and corpora."""

from __future__ import annotations

import numpy as np
import pytest

from abduct.data import Event, Sample


def make_event(event_id: int, n_frames: int = 3, d_img: int = 8, seed: int = 0,
               with_frames: bool = False, frame_size: int = 8,
               caption: str | None = None,
               features: np.ndarray | None = None) -> Event:
    rng = np.random.default_rng(seed * 1000 + event_id)
    if features is None:
        features = rng.standard_normal((n_frames, d_img)).astype(np.float32)
    frames = None
    if with_frames:
        frames = rng.uniform(0.0, 1.0, size=(n_frames, frame_size, frame_size, 3))
        frames = frames.astype(np.float32)
    return Event(event_id=event_id, frame_features=features, frames=frames,
                 caption=caption)


def make_sample(sample_id: str = "s0", n_events: int = 4, mask_index: int = 2,
                explanation: str = "the masked event happens", seed: int = 0,
                with_frames: bool = False, n_frames: int = 3, d_img: int = 8,
                frame_size: int = 8, split: str = "train",
                captions: list[str] | None = None) -> Sample:
    events = tuple(
        make_event(i, n_frames=n_frames, d_img=d_img, seed=seed,
                   with_frames=with_frames, frame_size=frame_size,
                   caption=captions[i] if captions else f"caption for event {i}")
        for i in range(n_events)
    )
    return Sample(sample_id=sample_id, events=events, mask_index=mask_index,
                  explanation=explanation, split=split)


TOPIC_WORDS = [
    "whisk eggs in a bowl", "chop the red onion", "sear the steak in a pan",
    "pour batter on the griddle", "slice the ripe avocado", "boil pasta in salted water",
    "grate parmesan cheese", "knead the bread dough", "peel the garlic cloves",
    "toast the sesame buns", "simmer the tomato sauce", "flip the golden pancake",
    "drain the cooked noodles", "season the roast chicken", "melt butter in a skillet",
    "shred the green cabbage", "stir the curry paste", "roll out the pie crust",
    "glaze the warm donuts", "steam the fresh broccoli",
]


def make_topic_corpus(n_topics: int = 10, samples_per_topic: int = 6,
                      m_negatives: int = 8, d_img: int = 16, n_frames: int = 2,
                      noise: float = 0.1, seed: int = 0):
    """Separable contrastive corpus: visual segments and the true explanation
    share a per-topic latent; negatives come from other topics."""
    from abduct.hypgen import Hypothesis, HypothesisSet, PROVENANCE_NEGATIVE

    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_topics, d_img))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    topics = [TOPIC_WORDS[k % len(TOPIC_WORDS)] + f" variant {k}" for k in range(n_topics)]
    samples: list[Sample] = []
    negatives: dict[str, HypothesisSet] = {}
    for k in range(n_topics):
        for s in range(samples_per_topic):
            events = []
            for pos in range(3):
                feats = centers[k] + noise * rng.standard_normal((n_frames, d_img))
                events.append(Event(event_id=pos, frame_features=feats.astype(np.float32),
                                    caption=f"observation {pos} of {topics[k]}"))
            sid = f"t{k}_s{s}"
            samples.append(Sample(sample_id=sid, events=tuple(events), mask_index=1,
                                  explanation=topics[k]))
            other = [t for t in range(n_topics) if t != k]
            neg_topics = rng.choice(other, size=m_negatives, replace=True)
            negatives[sid] = HypothesisSet(
                hypotheses=tuple(
                    Hypothesis(text=topics[t], provenance=PROVENANCE_NEGATIVE)
                    for t in neg_topics
                ),
                source_sample_id=sid,
            )
    return samples, negatives


def make_video_corpus(n_topics: int = 5, videos_per_topic: int = 2,
                      n_events: int = 3, n_frames: int = 2, frame_size: int = 16,
                      noise: float = 0.05, seed: int = 0,
                      mask_positions: tuple[int, ...] | None = None):
    """Pixel-level topic corpus: every event of a video shows its topic's
    color pattern, and the masked event's explanation names the topic."""
    rng = np.random.default_rng(seed)
    palettes = rng.uniform(0.15, 0.85, size=(n_topics, 2, 2, 3))
    topics = [TOPIC_WORDS[k % len(TOPIC_WORDS)] for k in range(n_topics)]
    samples: list[Sample] = []
    positions = mask_positions if mask_positions is not None else tuple(range(1, n_events - 1)) or (0,)
    for k in range(n_topics):
        for v in range(videos_per_topic):
            events = []
            for pos in range(n_events):
                tile = np.kron(palettes[k], np.ones((frame_size // 2, frame_size // 2, 1)))
                frames = tile[None].repeat(n_frames, axis=0)
                frames = frames + noise * rng.standard_normal(frames.shape)
                frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
                events.append(Event(event_id=pos, frames=frames,
                                    caption=f"the {topics[k]} step {pos}"))
            for h in positions:
                samples.append(Sample(
                    sample_id=f"k{k}_v{v}_m{h}",
                    events=tuple(events),
                    mask_index=h,
                    explanation=topics[k],
                ))
    return samples, topics


def make_bundle(tokenizer, seed: int = 0, d_model: int = 32, d_cond: int = 8,
                latent_channels: int = 2, latent_size: int = 8,
                base_channels: int = 8, timesteps: int = 100):
    """Tiny but fully wired model bundle for pipeline tests."""
    import torch

    from abduct.imaginer import (
        AdaptedUNet, DiffusionConfig, DiffusionSchedule, LatentMapper, UNetConfig,
    )
    from abduct.reasoner import ReasonerBackbone, ReasonerConfig
    from abduct.training import BridgeLayer, ModelBundle

    torch.manual_seed(seed)
    backbone = ReasonerBackbone(ReasonerConfig(
        vocab_size=tokenizer.vocab_size, d_model=d_model, heads=2,
        enc_layers=1, dec_layers=1, ffn_dim=2 * d_model,
        max_enc_len=512, max_dec_len=32,
    ))
    bridge = BridgeLayer(d_model=d_model, d_cond=d_cond)
    unet = AdaptedUNet(UNetConfig(
        latent_channels=latent_channels, base_channels=base_channels,
        channel_mult=2, d_cond=d_cond, d_k=8, t_dim=16, groups=4,
    ))
    schedule = DiffusionSchedule(DiffusionConfig(timesteps=timesteps))
    mapper = LatentMapper(latent_channels=latent_channels,
                          latent_size=latent_size, seed=seed)
    return ModelBundle(tokenizer=tokenizer, backbone=backbone, bridge=bridge,
                       unet=unet, schedule=schedule, latent_mapper=mapper)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
