"""Candidate and hard-negative hypothesis generation via a chat client.

The client speaks a minimal chat-completion wire protocol over HTTP, or
replays a recorded fixture when the endpoint is ``mock:<path>``. Fixtures
are ordered lists of ``{request_digest, response_text}`` entries; replay
never touches the network, which keeps the whole pipeline runnable and
bit-reproducible offline.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

API_KEY_ENV = "ABDUCT_LLM_API_KEY"

PROVENANCE_CANDIDATE = "candidate"
PROVENANCE_NEGATIVE = "negative"
PROVENANCE_GROUND_TRUTH = "ground_truth"
_PROVENANCES = (PROVENANCE_CANDIDATE, PROVENANCE_NEGATIVE, PROVENANCE_GROUND_TRUTH)

FLAG_DEFICIENT = "deficient"
FLAG_TOPK_OVERFLOW = "topk_exceeds_candidates"
FLAG_UNSCORED = "unscored_empty_final"


class ChatClientError(RuntimeError):
    """Request failed after exhausting retries."""


class FixtureExhaustedError(ChatClientError):
    """Mock fixture has no recorded reply left for this request."""


class CaptioningError(RuntimeError):
    """Captioning failed for a specific event; aborts the sample."""


def load_prompt(name: str) -> str:
    """Load a versioned prompt template shipped with the package."""
    return resources.files("abduct.prompts").joinpath(name).read_text(encoding="utf-8")


def request_digest(payload: dict) -> str:
    """Stable digest of a request body, used to key fixture entries."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_fixture(path: str | Path) -> list[dict]:
    entries = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValueError(f"{path}: fixture must be a JSON list of entries")
    return entries


def write_fixture(path: str | Path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")


@dataclass
class ChatClient:
    """Chat-completion client; ``mock:<fixture path>`` endpoints replay."""

    endpoint: str
    model_name: str = "gpt-4o-mini"
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self._replies: list[dict] | None = None
        self._cursor = 0
        if self.is_mock:
            fixture_path = self.endpoint[len("mock:"):]
            self._replies = load_fixture(fixture_path)

    @property
    def is_mock(self) -> bool:
        return self.endpoint.startswith("mock:")

    def complete(self, messages: list[dict], temperature: float, n: int = 1) -> str:
        payload = {
            "model": self.model_name,
            "messages": messages,
            "temperature": temperature,
            "n": n,
        }
        if self.is_mock:
            return self._replay(payload)
        return self._post(payload)

    def _replay(self, payload: dict) -> str:
        with self._lock:
            if self._cursor >= len(self._replies):
                raise FixtureExhaustedError(
                    f"fixture exhausted after {len(self._replies)} replies "
                    f"(request digest {request_digest(payload)[:12]})"
                )
            entry = self._replies[self._cursor]
            self._cursor += 1
        if entry.get("error"):
            raise ChatClientError(f"recorded failure: {entry['error']}")
        return entry["response_text"]

    def _post(self, payload: dict) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_err: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - retried, re-raised below
                last_err = exc
                if attempt < self.max_retries:
                    time.sleep(0.5 * (attempt + 1))
        raise ChatClientError(
            f"request failed after {self.max_retries + 1} attempts: {last_err}"
        ) from last_err


# ---------------------------------------------------------------------------
# Hypothesis sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hypothesis:
    text: str
    provenance: str
    score: float | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("hypothesis text must be nonempty")
        if self.provenance not in _PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: tuple[Hypothesis, ...]
    source_sample_id: str
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "hypotheses", tuple(self.hypotheses))
        object.__setattr__(self, "flags", tuple(self.flags))
        n_truth = sum(1 for h in self.hypotheses if h.provenance == PROVENANCE_GROUND_TRUTH)
        if n_truth > 1:
            raise ValueError(f"at most one ground_truth entry allowed, got {n_truth}")

    def texts(self) -> list[str]:
        return [h.text for h in self.hypotheses]

    def __len__(self) -> int:
        return len(self.hypotheses)


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace; the dedup key for generated texts."""
    return re.sub(r"\s+", " ", text.strip().lower())


def save_hypothesis_set(hset: HypothesisSet, path: str | Path) -> None:
    doc = {
        "source_sample_id": hset.source_sample_id,
        "flags": list(hset.flags),
        "hypotheses": [
            {"text": h.text, "provenance": h.provenance, "score": h.score}
            for h in hset.hypotheses
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_hypothesis_set(path: str | Path) -> HypothesisSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return HypothesisSet(
        hypotheses=tuple(
            Hypothesis(text=h["text"], provenance=h["provenance"], score=h.get("score"))
            for h in doc["hypotheses"]
        ),
        source_sample_id=doc["source_sample_id"],
        flags=tuple(doc.get("flags", ())),
    )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def caption_events(observations: list, captioner: ChatClient) -> list[str]:
    """Return one caption per observed event, order-aligned.

    Events that already carry a caption pass through unchanged; the rest are
    sent to the captioner. A client failure aborts with the offending event
    named.
    """
    template = load_prompt("caption_request_v1.txt")
    captions: list[str] = []
    for event in observations:
        if event.caption:
            captions.append(event.caption)
            continue
        prompt = template.format(event_id=event.event_id)
        try:
            captions.append(captioner.complete(
                [{"role": "user", "content": prompt}], temperature=0.2
            ))
        except ChatClientError as exc:
            raise CaptioningError(f"captioning failed for event {event.event_id}: {exc}") from exc
    return captions


def _masked_caption_lines(captions: list[str], mask_index: int) -> str:
    display = list(captions)
    display.insert(mask_index, "[MASK]")
    return "\n".join(f"{i + 1}. {text}" for i, text in enumerate(display))


def generate_candidates(captions: list[str], mask_index: int, client: ChatClient,
                        count: int = 10, temperature: float = 1.4,
                        sample_id: str = "", retry_factor: int = 3) -> HypothesisSet:
    """Sample ``count`` distinct candidate hypotheses for the masked slot.

    Exact duplicates (after whitespace/case normalization) are discarded and
    re-queried until the retry budget (``retry_factor * count`` calls) runs
    out; a short set is returned with a deficiency flag instead of failing.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    template = load_prompt("event_completion_v1.txt")
    prompt = template.format(events=_masked_caption_lines(captions, mask_index))
    messages = [{"role": "user", "content": prompt}]
    seen: set[str] = set()
    hyps: list[Hypothesis] = []
    budget = retry_factor * count
    while len(hyps) < count and budget > 0:
        budget -= 1
        text = client.complete(messages, temperature=temperature).strip()
        key = normalize_text(text)
        if not key or key in seen:
            continue
        seen.add(key)
        hyps.append(Hypothesis(text=text, provenance=PROVENANCE_CANDIDATE))
    flags = (FLAG_DEFICIENT,) if len(hyps) < count else ()
    return HypothesisSet(hypotheses=tuple(hyps), source_sample_id=sample_id, flags=flags)


def generate_negatives(positive: str, captions: list[str], client: ChatClient,
                       m: int = 100, sample_id: str = "",
                       retry_factor: int = 3) -> HypothesisSet:
    """Generate ``m`` hard negatives for a ground-truth explanation.

    Replies equal to the positive (after normalization) are rejected and
    re-queried within the same retry budget policy as candidates.
    """
    if m == 0:
        return HypothesisSet(hypotheses=(), source_sample_id=sample_id)
    if m < 0:
        raise ValueError("m must be >= 0")
    template = load_prompt("negative_generation_v1.txt")
    prompt = template.format(
        positive=positive,
        captions="\n".join(f"{i + 1}. {c}" for i, c in enumerate(captions)),
    )
    messages = [{"role": "user", "content": prompt}]
    pos_key = normalize_text(positive)
    hyps: list[Hypothesis] = []
    budget = retry_factor * m
    while len(hyps) < m and budget > 0:
        budget -= 1
        text = client.complete(messages, temperature=1.0).strip()
        if not text or normalize_text(text) == pos_key:
            continue
        hyps.append(Hypothesis(text=text, provenance=PROVENANCE_NEGATIVE))
    flags = (FLAG_DEFICIENT,) if len(hyps) < m else ()
    return HypothesisSet(hypotheses=tuple(hyps), source_sample_id=sample_id, flags=flags)
