"""Deterministic stand-in embedders for texts and frames.

Production deployments ingest precomputed embeddings from pretrained
encoders; these hash/random-projection versions let fixtures and tests run
fully offline while preserving the one property downstream code relies on:
equal inputs map to equal vectors, distinct inputs map to near-orthogonal
ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _token_split(text: str) -> list[str]:
    return text.lower().split()


def text_features(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Hash token counts into a signed bucket vector, L2-normalized."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float64)
    for token in _token_split(text):
        digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "little") % dim
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec.astype(np.float32)


def frame_features(frames: np.ndarray, dim: int = 64, seed: int = 0,
                   grid: int = 4) -> np.ndarray:
    """Project coarse-pooled pixels of each frame to ``dim`` dimensions.

    frames: (F, H, W, 3) floats. Returns (F, dim) float32, rows normalized.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"frames must have shape (F, H, W, 3), got {frames.shape}")
    f, h, w, _ = frames.shape
    gh, gw = min(grid, h), min(grid, w)
    # Average-pool each frame onto a (gh, gw) grid.
    ys = np.linspace(0, h, gh + 1).astype(int)
    xs = np.linspace(0, w, gw + 1).astype(int)
    pooled = np.empty((f, gh, gw, 3), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            pooled[:, i, j, :] = frames[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1], :].mean(axis=(1, 2))
    flat = pooled.reshape(f, -1)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((flat.shape[1], dim)) / np.sqrt(flat.shape[1])
    out = flat @ proj
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (out / norms).astype(np.float32)
