"""Event-sequence data model, tensor file format, and dataset ingestion.

File formats owned by this module:

* Tensor file (``.avrf``): magic ``AVRF``, u32 little-endian ndim,
  ndim x u64 little-endian dims, float32 little-endian payload, row-major.
* Sample / video documents: line-oriented ``key: value`` records with
  indented ``event:`` blocks. Tensor payloads are referenced by relative
  path and resolved against the document's directory.
* Split manifest: ``#``-prefixed header lines with counts, then one
  tab-separated line per emitted sample (sample_id, video_id, mask_index).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"AVRF"


class SampleFormatError(ValueError):
    """Raised when a document or tensor file cannot be parsed."""


class SampleValidationError(ValueError):
    """Raised when parsed data violates a structural invariant."""


# ---------------------------------------------------------------------------
# Tensor file format
# ---------------------------------------------------------------------------

def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as a float32 little-endian tensor file."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file written by :func:`write_tensor`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise SampleFormatError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
        raw = fh.read(4)
        if len(raw) < 4:
            raise SampleFormatError(f"{path}: truncated header (ndim)")
        ndim = struct.unpack("<I", raw)[0]
        dims = []
        for axis in range(ndim):
            raw = fh.read(8)
            if len(raw) < 8:
                raise SampleFormatError(f"{path}: truncated header (dim {axis})")
            dims.append(struct.unpack("<Q", raw)[0])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = fh.read()
    expected = count * 4
    if len(payload) != expected:
        raise SampleFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for shape {tuple(dims)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    """One event clip: pixel frames and/or precomputed per-frame features."""

    event_id: int
    frame_features: np.ndarray | None = None
    frames: np.ndarray | None = None
    caption: str | None = None

    def __post_init__(self) -> None:
        if self.frames is None and self.frame_features is None:
            raise SampleValidationError(
                f"event {self.event_id}: needs frames or frame_features"
            )
        if self.frames is not None:
            frames = np.asarray(self.frames, dtype=np.float32)
            if frames.ndim != 4 or frames.shape[-1] != 3:
                raise SampleValidationError(
                    f"event {self.event_id}: frames must have shape (F, H, W, 3), got {frames.shape}"
                )
            if frames.shape[0] < 1:
                raise SampleValidationError(f"event {self.event_id}: frame count must be >= 1")
            if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
                raise SampleValidationError(
                    f"event {self.event_id}: pixel values outside [0, 1]"
                )
            object.__setattr__(self, "frames", frames)
        if self.frame_features is not None:
            feats = np.asarray(self.frame_features, dtype=np.float32)
            if feats.ndim != 2:
                raise SampleValidationError(
                    f"event {self.event_id}: frame_features must be 2-D, got shape {feats.shape}"
                )
            if feats.shape[0] < 1:
                raise SampleValidationError(f"event {self.event_id}: frame count must be >= 1")
            object.__setattr__(self, "frame_features", feats)
        if self.frames is not None and self.frame_features is not None:
            if self.frames.shape[0] != self.frame_features.shape[0]:
                raise SampleValidationError(
                    f"event {self.event_id}: frame_features rows "
                    f"{self.frame_features.shape[0]} != frame count {self.frames.shape[0]}"
                )

    @property
    def num_frames(self) -> int:
        if self.frames is not None:
            return int(self.frames.shape[0])
        return int(self.frame_features.shape[0])


@dataclass(frozen=True)
class Sample:
    """An ordered event sequence with one masked (to-be-explained) slot."""

    sample_id: str
    events: tuple[Event, ...]
    mask_index: int
    explanation: str
    split: str = "train"

    def __post_init__(self) -> None:
        object.__setattr__(self, "events", tuple(self.events))
        if len(self.events) < 2:
            raise SampleValidationError(
                f"sample {self.sample_id}: needs at least 2 events, got {len(self.events)}"
            )
        if not 0 <= self.mask_index < len(self.events):
            raise SampleValidationError(
                f"sample {self.sample_id}: mask_index {self.mask_index} out of range "
                f"[0, {len(self.events) - 1}]"
            )
        if self.split == "train" and not self.explanation.strip():
            raise SampleValidationError(
                f"sample {self.sample_id}: explanation must be nonempty for train samples"
            )

    @property
    def num_events(self) -> int:
        return len(self.events)

    def observed_events(self) -> tuple[Event, ...]:
        return tuple(e for i, e in enumerate(self.events) if i != self.mask_index)


@dataclass(frozen=True)
class SegmentPartition:
    """Events before / after the masked slot, plus the masked event itself."""

    initial: tuple[Event, ...]
    masked: Event
    final: tuple[Event, ...]
    process_is_mask: bool


def partition_segments(sample: Sample) -> SegmentPartition:
    """Split a sample's events around the masked position, order preserved."""
    idx = sample.mask_index
    return SegmentPartition(
        initial=sample.events[:idx],
        masked=sample.events[idx],
        final=sample.events[idx + 1:],
        process_is_mask=0 < idx < sample.num_events - 1,
    )


def reconstruct_events(partition: SegmentPartition) -> tuple[Event, ...]:
    """Inverse of :func:`partition_segments`: initial + masked + final."""
    return partition.initial + (partition.masked,) + partition.final


# ---------------------------------------------------------------------------
# Sample documents
# ---------------------------------------------------------------------------

def _parse_document(path: Path) -> tuple[dict, list[dict]]:
    """Parse a key-value document into (top-level fields, event blocks)."""
    top: dict[str, str] = {}
    events: list[dict[str, str]] = []
    current: dict[str, str] | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            indented = line.startswith((" ", "\t"))
            stripped = line.strip()
            if stripped == "event:":
                current = {}
                events.append(current)
                continue
            if ":" not in stripped:
                raise SampleFormatError(f"{path}:{lineno}: expected 'key: value', got {stripped!r}")
            key, _, value = stripped.partition(":")
            key = key.strip()
            value = value.strip()
            if indented:
                if current is None:
                    raise SampleFormatError(
                        f"{path}:{lineno}: field {key!r} outside any event block"
                    )
                current[key] = value
            else:
                top[key] = value
    return top, events


def _require(fields: dict, key: str, path: Path, context: str = "document") -> str:
    if key not in fields:
        raise SampleFormatError(f"{path}: {context} missing field {key!r}")
    return fields[key]


def _load_event(block: dict, index: int, base_dir: Path, path: Path) -> Event:
    ctx = f"event block {index}"
    event_id = int(_require(block, "event_id", path, ctx))
    declared_frames = int(_require(block, "num_frames", path, ctx))
    if not block.get("features_path") and not block.get("frames_path"):
        raise SampleFormatError(
            f"{path}: {ctx} needs features_path or frames_path"
        )
    features = None
    if block.get("features_path"):
        features = read_tensor(base_dir / block["features_path"])
        if features.shape[0] != declared_frames:
            raise SampleValidationError(
                f"{path}: event {event_id}: feature file has {features.shape[0]} rows, "
                f"declared num_frames is {declared_frames}"
            )
    frames = None
    if block.get("frames_path"):
        frames = read_tensor(base_dir / block["frames_path"])
        if frames.shape[0] != declared_frames:
            raise SampleValidationError(
                f"{path}: event {event_id}: frames file has {frames.shape[0]} frames, "
                f"declared num_frames is {declared_frames}"
            )
    return Event(
        event_id=event_id,
        frame_features=features,
        frames=frames,
        caption=block.get("caption") or None,
    )


def load_sample(path: str | Path) -> Sample:
    """Load and validate a sample document, resolving tensor payloads."""
    path = Path(path)
    top, blocks = _parse_document(path)
    split = top.get("split", "train")
    for key in ("sample_id", "num_events", "mask_index"):
        _require(top, key, path)
    if split == "train":
        _require(top, "explanation", path)
    num_events = int(top["num_events"])
    if len(blocks) != num_events:
        raise SampleValidationError(
            f"{path}: declares num_events {num_events} but has {len(blocks)} event blocks"
        )
    events = tuple(
        _load_event(block, i, path.parent, path) for i, block in enumerate(blocks)
    )
    return Sample(
        sample_id=top["sample_id"],
        events=events,
        mask_index=int(top["mask_index"]),
        explanation=top.get("explanation", ""),
        split=split,
    )


def save_sample(sample: Sample, path: str | Path, payload_dir: str = "payload") -> Path:
    """Write a sample document plus its tensor payloads.

    Payloads land under ``<doc dir>/<payload_dir>/`` and are referenced by
    relative path, so a saved sample round-trips through :func:`load_sample`.
    """
    path = Path(path)
    base = path.parent
    out = base / payload_dir
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"sample_id: {sample.sample_id}",
        f"split: {sample.split}",
        f"num_events: {sample.num_events}",
        f"mask_index: {sample.mask_index}",
        f"explanation: {sample.explanation}",
    ]
    for event in sample.events:
        lines.append("event:")
        lines.append(f"  event_id: {event.event_id}")
        lines.append(f"  num_frames: {event.num_frames}")
        if event.caption:
            lines.append(f"  caption: {event.caption}")
        if event.frame_features is not None:
            feat_rel = f"{payload_dir}/{sample.sample_id}_e{event.event_id}_features.avrf"
            write_tensor(base / feat_rel, event.frame_features)
            lines.append(f"  features_path: {feat_rel}")
        if event.frames is not None:
            frames_rel = f"{payload_dir}/{sample.sample_id}_e{event.event_id}_frames.avrf"
            write_tensor(base / frames_rel, event.frames)
            lines.append(f"  frames_path: {frames_rel}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Video documents and split construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    events: tuple[Event, ...]


def load_video(path: str | Path) -> VideoRecord:
    """Load a per-video annotation document (same event-block format)."""
    path = Path(path)
    top, blocks = _parse_document(path)
    video_id = _require(top, "video_id", path)
    num_events = int(_require(top, "num_events", path))
    if len(blocks) != num_events:
        raise SampleValidationError(
            f"{path}: declares num_events {num_events} but has {len(blocks)} event blocks"
        )
    events = tuple(
        _load_event(block, i, path.parent, path) for i, block in enumerate(blocks)
    )
    return VideoRecord(video_id=video_id, events=events)


@dataclass(frozen=True)
class SplitConfig:
    """Describes one split to build from a dataset root."""

    split: str = "train"
    video_ids: tuple[str, ...] | None = None
    out_dir: str | Path | None = None


@dataclass
class SplitResult:
    samples: list[Sample]
    manifest_lines: list[str] = field(default_factory=list)
    skipped_videos: int = 0


def build_var_split(dataset_root: str | Path, config: SplitConfig) -> SplitResult:
    """Expand each video into one sample per maskable event position.

    A video with E >= 2 events yields E samples; smaller videos are skipped
    and counted in the manifest header. The masked event's caption becomes
    the sample's ground-truth explanation.
    """
    root = Path(dataset_root)
    docs = sorted(root.glob("*.video.txt"))
    if config.video_ids is not None:
        wanted = set(config.video_ids)
        docs = [d for d in docs if load_video(d).video_id in wanted]
    samples: list[Sample] = []
    lines: list[str] = []
    skipped = 0
    n_videos = 0
    for doc in docs:
        video = load_video(doc)
        n_videos += 1
        if len(video.events) < 2:
            skipped += 1
            continue
        for h, masked in enumerate(video.events):
            if not (masked.caption or "").strip():
                raise SampleValidationError(
                    f"{doc}: event {masked.event_id} has no caption to use as explanation"
                )
            sample = Sample(
                sample_id=f"{video.video_id}_m{h}",
                events=video.events,
                mask_index=h,
                explanation=masked.caption,
                split=config.split,
            )
            samples.append(sample)
            lines.append(f"{sample.sample_id}\t{video.video_id}\t{h}")
    result = SplitResult(samples=samples, manifest_lines=lines, skipped_videos=skipped)
    if config.out_dir is not None:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for sample in samples:
            save_sample(sample, out_dir / f"{sample.sample_id}.sample.txt")
        header = [
            f"# split: {config.split}",
            f"# videos: {n_videos}",
            f"# skipped: {skipped}",
            f"# samples: {len(samples)}",
        ]
        (out_dir / "manifest.txt").write_text(
            "\n".join(header + lines) + "\n", encoding="utf-8"
        )
    return result


def load_split(split_dir: str | Path) -> list[Sample]:
    """Load every sample document in a directory built by build_var_split."""
    return [load_sample(p) for p in sorted(Path(split_dir).glob("*.sample.txt"))]


# ---------------------------------------------------------------------------
# Checkpoint files (named-tensor bundles)
# ---------------------------------------------------------------------------

def save_state(directory: str | Path, tensors: dict[str, np.ndarray],
               meta: dict[str, str] | None = None) -> None:
    """Write named tensors as one tensor file each plus a text index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index_lines = []
    for name in sorted(tensors):
        fname = f"{name}.avrf"
        write_tensor(directory / fname, tensors[name])
        index_lines.append(f"{name}\t{fname}")
    (directory / "tensors.txt").write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    meta_lines = [f"{k}: {v}" for k, v in sorted((meta or {}).items())]
    (directory / "meta.txt").write_text("\n".join(meta_lines) + "\n", encoding="utf-8")


def load_state(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`save_state`."""
    directory = Path(directory)
    index_path = directory / "tensors.txt"
    if not index_path.exists():
        raise SampleFormatError(f"{directory}: missing tensors.txt index")
    tensors: dict[str, np.ndarray] = {}
    for line in index_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, _, fname = line.partition("\t")
        tensors[name] = read_tensor(directory / fname)
    meta: dict[str, str] = {}
    meta_path = directory / "meta.txt"
    if meta_path.exists():
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    return tensors, meta
