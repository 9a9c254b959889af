"""Miniature multimodal reasoner: input assembly, backbone, decoding.

The observed video is concatenated into one frame tensor with the masked
slot filled by uniform-random placeholder frames; every frame is stamped
with a 1-based event-index glyph so position information survives in pixel
space. A byte-level tokenizer with a learned merge table feeds a small
encoder-decoder transformer whose decoder hidden states double as the
conditioning signal for the pictorial branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data import Sample
from .hypgen import HypothesisSet

# ---------------------------------------------------------------------------
# Byte-level tokenizer with learned merges
# ---------------------------------------------------------------------------

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
_N_SPECIAL = 3
_MERGE_BASE = 256 + _N_SPECIAL


class ByteTokenizer:
    """Byte vocabulary (0..255) plus PAD/BOS/EOS and learned pair merges."""

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        self.merges = list(tuple(m) for m in merges)
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._expansions: dict[int, tuple[int, int]] = {
            _MERGE_BASE + i: pair for i, pair in enumerate(self.merges)
        }

    @property
    def vocab_size(self) -> int:
        return _MERGE_BASE + len(self.merges)

    @classmethod
    def train(cls, corpus: Iterable[str], num_merges: int = 64) -> "ByteTokenizer":
        """Learn merges by pair frequency; ties resolve to the smaller pair."""
        sequences = [list(text.encode("utf-8")) for text in corpus if text]
        merges: list[tuple[int, int]] = []
        for step in range(num_merges):
            counts: dict[tuple[int, int], int] = {}
            for seq in sequences:
                for a, b in zip(seq, seq[1:]):
                    counts[(a, b)] = counts.get((a, b), 0) + 1
            if not counts:
                break
            best_pair, best_count = min(
                counts.items(), key=lambda kv: (-kv[1], kv[0])
            )
            if best_count < 2:
                break
            merges.append(best_pair)
            new_id = _MERGE_BASE + step
            sequences = [_apply_merge(seq, best_pair, new_id) for seq in sequences]
        return cls(merges)

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        seq = list(text.encode("utf-8"))
        while True:
            best_rank = None
            best_idx = -1
            for i, pair in enumerate(zip(seq, seq[1:])):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_idx = i
            if best_rank is None:
                break
            pair = (seq[best_idx], seq[best_idx + 1])
            seq = _apply_merge(seq, pair, _MERGE_BASE + best_rank)
        if add_bos:
            seq.insert(0, BOS_ID)
        if add_eos:
            seq.append(EOS_ID)
        return seq

    def decode(self, ids: Sequence[int]) -> str:
        out: list[int] = []
        stack = list(ids)[::-1]
        while stack:
            tid = stack.pop()
            if tid in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if tid < 256:
                out.append(tid)
            else:
                a, b = self._expansions[tid]
                stack.append(b)
                stack.append(a)
        return bytes(out).decode("utf-8", errors="replace")

    def save(self, path: str | Path) -> None:
        lines = [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ByteTokenizer":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split()
                merges.append((int(a), int(b)))
        return cls(merges)


def _apply_merge(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


# ---------------------------------------------------------------------------
# Video assembly and event-index overlay
# ---------------------------------------------------------------------------

# 8x8 digit bitmaps; '#' pixels render as 1.0, '.' as 0.0.
_DIGIT_ART = {
    "0": ["..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."],
    "1": ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", ".######."],
    "2": ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."],
    "3": ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."],
    "4": ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."],
    "5": [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    "6": ["..####..", ".#....#.", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    "7": [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    "8": ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    "9": ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", ".#....#.", "..####.."],
}
GLYPH_SIZE = 8
DIGIT_GLYPHS = {
    ch: np.array([[1.0 if c == "#" else 0.0 for c in row] for row in art],
                 dtype=np.float32)
    for ch, art in _DIGIT_ART.items()
}


def default_placeholder_len(sample: Sample) -> int:
    """Mean observed event frame count, rounded, at least 1."""
    counts = [e.num_frames for e in sample.observed_events()]
    return max(1, int(round(float(np.mean(counts)))))


def event_boundaries(sample: Sample, placeholder_len: int) -> list[tuple[int, int, int]]:
    """(event_id, start, end) tiles over the assembled frame axis."""
    bounds = []
    cursor = 0
    for i, event in enumerate(sample.events):
        length = placeholder_len if i == sample.mask_index else event.num_frames
        bounds.append((i, cursor, cursor + length))
        cursor += length
    return bounds


def assemble_video(sample: Sample, placeholder_len: int | None = None,
                   seed: int = 0) -> np.ndarray:
    """Concatenate observed frames with a uniform-random masked slot.

    Total length is the sum of observed frame counts plus placeholder_len;
    the placeholder pixels are drawn i.i.d. uniform [0, 1] from ``seed``.
    """
    if placeholder_len is None:
        placeholder_len = default_placeholder_len(sample)
    if placeholder_len < 1:
        raise ValueError("placeholder_len must be >= 1")
    shapes = {e.frames.shape[1:3] for e in sample.observed_events() if e.frames is not None}
    if not shapes:
        raise ValueError(f"sample {sample.sample_id}: observed events carry no frames")
    if len(shapes) > 1:
        raise ValueError(f"sample {sample.sample_id}: mixed frame sizes {shapes}")
    h, w = next(iter(shapes))
    rng = np.random.default_rng(seed)
    parts: list[np.ndarray] = []
    for i, event in enumerate(sample.events):
        if i == sample.mask_index:
            parts.append(rng.uniform(0.0, 1.0, size=(placeholder_len, h, w, 3))
                         .astype(np.float32))
        else:
            parts.append(event.frames)
    return np.concatenate(parts, axis=0)


def overlay_event_indices(frames: np.ndarray,
                          boundaries: Sequence[tuple[int, int, int]]) -> np.ndarray:
    """Stamp each frame's 1-based event index into its top-left corner.

    The glyph region (including its background) is overwritten wholesale,
    so re-stamping is idempotent. Boundaries must tile the frame axis
    exactly.
    """
    n = frames.shape[0]
    cursor = 0
    for event_id, start, end in boundaries:
        if start != cursor or end <= start:
            raise ValueError(
                f"boundaries must tile frames exactly; got start {start} at cursor {cursor}"
            )
        cursor = end
    if cursor != n:
        raise ValueError(f"boundaries cover {cursor} frames, tensor has {n}")
    out = np.array(frames, copy=True)
    for event_id, start, end in boundaries:
        digits = str(event_id + 1)
        block = np.concatenate([DIGIT_GLYPHS[d] for d in digits], axis=1)
        bh, bw = block.shape
        if bh > frames.shape[1] or bw > frames.shape[2]:
            raise ValueError(
                f"frame {frames.shape[1]}x{frames.shape[2]} too small for glyph {digits!r}"
            )
        out[start:end, :bh, :bw, :] = block[None, :, :, None]
    return out


@dataclass(frozen=True)
class AssembledInput:
    frames: np.ndarray                    # (N, H, W, 3) with overlay applied
    event_index_overlay: np.ndarray       # (N,) event id per frame
    prompt_tokens: tuple[int, ...]


def build_prompt(query: str, captions: Sequence[str], topk: HypothesisSet,
                 tokenizer: ByteTokenizer) -> list[int]:
    """Render the reasoning prompt and tokenize it.

    ``captions`` is the per-event display list (with a "[MASK]" entry at the
    masked slot). An empty hypothesis set omits the hypotheses section.
    """
    template = resources.files("abduct.prompts").joinpath(
        "reasoner_prompt_v1.txt").read_text(encoding="utf-8")
    events = "\n".join(f"{i + 1}. {c}" for i, c in enumerate(captions))
    if len(topk) > 0:
        hyp_lines = "\n".join(f"{i + 1}. {h.text}" for i, h in enumerate(topk.hypotheses))
        hypotheses_section = f"Candidate hypotheses:\n{hyp_lines}\n"
    else:
        hypotheses_section = ""
    prompt = template.format(events=events, hypotheses_section=hypotheses_section,
                             query=query)
    return tokenizer.encode(prompt)


def display_captions(sample: Sample) -> list[str]:
    """Per-event caption list with the masked position shown as [MASK]."""
    out = []
    for i, event in enumerate(sample.events):
        out.append("[MASK]" if i == sample.mask_index else (event.caption or ""))
    return out


def assemble_input(sample: Sample, topk: HypothesisSet, tokenizer: ByteTokenizer,
                   query: str = "What happens at the [MASK] position?",
                   placeholder_len: int | None = None, seed: int = 0) -> AssembledInput:
    if placeholder_len is None:
        placeholder_len = default_placeholder_len(sample)
    frames = assemble_video(sample, placeholder_len, seed)
    bounds = event_boundaries(sample, placeholder_len)
    stamped = overlay_event_indices(frames, bounds)
    per_frame = np.empty(frames.shape[0], dtype=np.int64)
    for event_id, start, end in bounds:
        per_frame[start:end] = event_id
    tokens = build_prompt(query, display_captions(sample), topk, tokenizer)
    return AssembledInput(frames=stamped, event_index_overlay=per_frame,
                          prompt_tokens=tuple(tokens))


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

@dataclass
class ReasonerConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    patch_grid: int = 4
    max_enc_len: int = 512
    max_dec_len: int = 64


def _sinusoidal_positions(length: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), idx / dim)
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angle)
    enc[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return enc.to(dtype)


class ReasonerBackbone(nn.Module):
    """Small encoder-decoder transformer over video tokens + prompt tokens."""

    def __init__(self, cfg: ReasonerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.frame_proj = nn.Linear(cfg.patch_grid * cfg.patch_grid * 3, d)
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.encoder = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(d, cfg.heads, cfg.ffn_dim, dropout=0.0,
                                       batch_first=True, norm_first=True),
            num_layers=cfg.enc_layers,
            enable_nested_tensor=False,
        )
        self.decoder = nn.TransformerDecoder(
            nn.TransformerDecoderLayer(d, cfg.heads, cfg.ffn_dim, dropout=0.0,
                                       batch_first=True, norm_first=True),
            num_layers=cfg.dec_layers,
        )
        self.head = nn.Linear(d, cfg.vocab_size)

    # -- embedding ---------------------------------------------------------
    def _embed_frames(self, frames: np.ndarray) -> torch.Tensor:
        param = next(self.parameters())
        g = self.cfg.patch_grid
        x = torch.as_tensor(np.asarray(frames, dtype=np.float64),
                            dtype=param.dtype, device=param.device)
        x = x.permute(0, 3, 1, 2)                              # (N, 3, H, W)
        x = torch.nn.functional.adaptive_avg_pool2d(x, (g, g))  # (N, 3, g, g)
        return self.frame_proj(x.reshape(x.shape[0], -1))       # (N, d)

    def encode(self, inp: AssembledInput) -> tuple[torch.Tensor, bool]:
        """Build encoder memory from frames + prompt; flags prompt truncation."""
        vision = self._embed_frames(inp.frames)
        tokens = list(inp.prompt_tokens)
        truncated = False
        budget = self.cfg.max_enc_len - vision.shape[0]
        if budget < 1:
            raise ValueError("max_enc_len too small for the video tokens alone")
        if len(tokens) > budget:
            tokens = tokens[:budget]
            truncated = True
        param = next(self.parameters())
        text = self.token_embed(torch.tensor(tokens, dtype=torch.long,
                                             device=param.device))
        seq = torch.cat([vision, text], dim=0)
        seq = seq + _sinusoidal_positions(seq.shape[0], seq.shape[1],
                                          param.dtype).to(param.device)
        memory = self.encoder(seq.unsqueeze(0))
        return memory, truncated

    def decode(self, memory: torch.Tensor, input_ids: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Causal decode over ``input_ids``; returns (hidden, logits)."""
        param = next(self.parameters())
        ids = torch.tensor(list(input_ids), dtype=torch.long, device=param.device)
        emb = self.token_embed(ids)
        emb = emb + _sinusoidal_positions(emb.shape[0], emb.shape[1],
                                          param.dtype).to(param.device)
        mask = nn.Transformer.generate_square_subsequent_mask(
            emb.shape[0], device=param.device, dtype=param.dtype
        )
        hidden = self.decoder(emb.unsqueeze(0), memory, tgt_mask=mask).squeeze(0)
        return hidden, self.head(hidden)

    # -- trainable subset ---------------------------------------------------
    def set_trainable(self, pattern: str | None = None) -> list[str]:
        """Mark parameters whose name contains ``pattern`` as trainable
        (all of them when pattern is None); returns the trainable names."""
        chosen = []
        for name, param in self.named_parameters():
            on = pattern is None or pattern in name
            param.requires_grad_(on)
            if on:
                chosen.append(name)
        return chosen

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


@dataclass
class ReasonerOutput:
    tokens: tuple[int, ...]
    text: str
    c_t: torch.Tensor           # (S, d_model) decoder hidden states
    truncated: bool = False
    logits: torch.Tensor | None = None   # (S, vocab), teacher-forced only


def reason(inp: AssembledInput, backbone: ReasonerBackbone, tokenizer: ByteTokenizer,
           mode: str = "greedy", target: Sequence[int] | None = None,
           max_len: int | None = None) -> ReasonerOutput:
    """Run the backbone over an assembled input.

    greedy: autoregressive argmax decode until EOS or ``max_len``; the
    hidden state that produced each emitted token lands in ``c_t``.
    teacher_forced: requires ``target``; logits/hidden states align
    position-for-position with the target tokens.
    """
    if mode not in ("greedy", "teacher_forced"):
        raise ValueError(f"unknown mode {mode!r}")
    memory, truncated = backbone.encode(inp)
    if mode == "teacher_forced":
        if target is None:
            raise ValueError("teacher_forced mode requires target tokens")
        target = list(target)
        input_ids = [BOS_ID] + target[:-1]
        hidden, logits = backbone.decode(memory, input_ids)
        return ReasonerOutput(tokens=tuple(target), text=tokenizer.decode(target),
                              c_t=hidden, logits=logits, truncated=truncated)
    max_len = max_len or backbone.cfg.max_dec_len
    generated: list[int] = []
    states: list[torch.Tensor] = []
    with torch.no_grad():
        for _ in range(max_len):
            hidden, logits = backbone.decode(memory, [BOS_ID] + generated)
            next_id = int(torch.argmax(logits[-1]))
            states.append(hidden[-1])
            generated.append(next_id)
            if next_id == EOS_ID:
                break
        else:
            truncated = True
    c_t = torch.stack(states) if states else torch.zeros(0, backbone.cfg.d_model)
    return ReasonerOutput(tokens=tuple(generated), text=tokenizer.decode(generated),
                          c_t=c_t, truncated=truncated)


def ce_loss(logits: torch.Tensor, target: Sequence[int] | torch.Tensor,
            pad_id: int = PAD_ID) -> torch.Tensor:
    """Mean token-level negative log-likelihood over non-pad positions."""
    if not torch.is_tensor(target):
        target = torch.tensor(list(target), dtype=torch.long, device=logits.device)
    if logits.shape[0] != target.shape[0]:
        raise ValueError(
            f"logits rows {logits.shape[0]} != target length {target.shape[0]}"
        )
    if bool((target == pad_id).all()):
        raise ValueError("all target positions are padding")
    return nn.functional.cross_entropy(logits, target, ignore_index=pad_id)
