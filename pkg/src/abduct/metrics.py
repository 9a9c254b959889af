"""Corpus-level caption metrics: BLEU@4, ROUGE-L, METEOR-lite, CIDEr.

All metrics share one tokenizer (lowercase, punctuation split off as its
own tokens) and report on a 0-100 scale except CIDEr, which follows the
conventional 0-10 per-pair scale. METEOR is implemented without external
synonym/stemming resources and is reported as ``meteor_lite`` to make the
deviation visible. An embedding-based scorer slot accepts plugins that map
(candidate, reference) text pairs to floats.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

ROUGE_BETA = 1.2          # recall-weighted F, the captioning convention
METEOR_ALPHA = 0.9        # precision weight in the harmonic mean
METEOR_PENALTY_GAMMA = 0.5
CIDER_MAX_N = 4
CIDER_SCALE = 10.0
FLAG_IDF_FLOOR = "idf_add_one_floor"


def tokenize(text: str) -> list[str]:
    """Lowercase tokens with punctuation separated out."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EvalPair:
    candidate: str
    references: tuple[str, ...]
    sample_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "references", tuple(self.references))
        if not self.references:
            raise ValueError(f"pair {self.sample_id!r}: references must be nonempty")


@dataclass
class EvalReport:
    scores: dict[str, float | None]
    per_sample: dict[str, list[float]]
    counts: dict[str, int]
    flags: tuple[str, ...] = ()
    unavailable: dict[str, str] = field(default_factory=dict)

    def render_text(self) -> str:
        width = max(len(k) for k in self.scores) + 2
        lines = [f"pairs: {self.counts.get('pairs', 0)}"]
        for name in sorted(self.scores):
            value = self.scores[name]
            shown = f"{value:.4f}" if value is not None else "unavailable"
            lines.append(f"{name.ljust(width)}{shown}")
        for flag in self.flags:
            lines.append(f"flag: {flag}")
        return "\n".join(lines)

    def write_kv(self, path: str | Path) -> None:
        lines = [f"pairs: {self.counts.get('pairs', 0)}"]
        for name in sorted(self.scores):
            value = self.scores[name]
            lines.append(f"{name}: {value if value is not None else 'unavailable'}")
        for name, err in sorted(self.unavailable.items()):
            lines.append(f"{name}_error: {err}")
        for flag in self.flags:
            lines.append(f"flag: {flag}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU@4
# ---------------------------------------------------------------------------

def bleu4(pairs: Sequence[EvalPair]) -> float:
    """Corpus BLEU with 4-gram geometric mean and brevity penalty, x100.

    No smoothing: any order with zero corpus-level overlap zeroes the score.
    """
    matched = [0] * 4
    total = [0] * 4
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        cand = tokenize(pair.candidate)
        refs = [tokenize(r) for r in pair.references]
        cand_len += len(cand)
        # Closest reference length; ties resolved toward the shorter one.
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())
    if cand_len == 0 or any(t == 0 for t in total) or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_precision)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def _rouge_l_pair(cand: list[str], refs: list[list[str]]) -> float:
    best = 0.0
    for ref in refs:
        lcs = _lcs_len(cand, ref)
        if lcs == 0:
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        beta_sq = ROUGE_BETA ** 2
        score = (1 + beta_sq) * recall * precision / (recall + beta_sq * precision)
        best = max(best, score)
    return best


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    """LCS F-measure, max over references, mean over corpus, x100."""
    if not pairs:
        return 0.0
    scores = [
        _rouge_l_pair(tokenize(p.candidate), [tokenize(r) for r in p.references])
        for p in pairs
    ]
    return 100.0 * sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# METEOR-lite
# ---------------------------------------------------------------------------

def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy exact-unigram alignment preferring chunk continuation."""
    used = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    prev_j = -2
    for i, tok in enumerate(cand):
        choice = -1
        cont = prev_j + 1
        if pairs and pairs[-1][0] == i - 1 and 0 <= cont < len(ref) \
                and not used[cont] and ref[cont] == tok:
            choice = cont
        else:
            for j, r in enumerate(ref):
                if not used[j] and r == tok:
                    choice = j
                    break
        if choice >= 0:
            used[choice] = True
            pairs.append((i, choice))
            prev_j = choice
    return pairs


def _count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev: tuple[int, int] | None = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _meteor_pair(cand: list[str], refs: list[list[str]]) -> float:
    best = 0.0
    for ref in refs:
        aligned = _align(cand, ref)
        m = len(aligned)
        if m == 0 or not cand or not ref:
            continue
        precision = m / len(cand)
        recall = m / len(ref)
        fmean = precision * recall / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
        penalty = METEOR_PENALTY_GAMMA * (_count_chunks(aligned) / m) ** 3
        best = max(best, fmean * (1.0 - penalty))
    return best


def meteor_lite(pairs: Sequence[EvalPair]) -> float:
    """Exact-match unigram METEOR with fragmentation penalty, x100."""
    if not pairs:
        return 0.0
    scores = [
        _meteor_pair(tokenize(p.candidate), [tokenize(r) for r in p.references])
        for p in pairs
    ]
    return 100.0 * sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------

def _cider_idf(pairs: Sequence[EvalPair]) -> tuple[list[dict], bool]:
    """Per-order IDF tables from the reference side of the corpus."""
    n_docs = len(pairs)
    floored = n_docs == 1
    log_total = math.log(n_docs + 1 if floored else n_docs)
    tables: list[dict] = []
    for n in range(1, CIDER_MAX_N + 1):
        df: Counter = Counter()
        for pair in pairs:
            grams: set = set()
            for ref in pair.references:
                grams.update(_ngrams(tokenize(ref), n).keys())
            for gram in grams:
                df[gram] += 1
        tables.append({g: log_total - math.log(c) for g, c in df.items()})
    return tables, floored


def _tfidf_cosine(cand_counts: Counter, ref_counts: Counter, idf: dict) -> float:
    dot = 0.0
    for gram, c in cand_counts.items():
        if gram in ref_counts:
            w = idf.get(gram, 0.0)
            dot += (c * w) * (ref_counts[gram] * w)
    norm_c = math.sqrt(sum((c * idf.get(g, 0.0)) ** 2 for g, c in cand_counts.items()))
    norm_r = math.sqrt(sum((c * idf.get(g, 0.0)) ** 2 for g, c in ref_counts.items()))
    if norm_c == 0.0 or norm_r == 0.0:
        return 0.0
    return dot / (norm_c * norm_r)


def cider(pairs: Sequence[EvalPair]) -> float:
    """TF-IDF n-gram cosine consensus (n=1..4), mean over corpus, x10."""
    if not pairs:
        return 0.0
    tables, _ = _cider_idf(pairs)
    return sum(_cider_pair(p, tables) for p in pairs) / len(pairs)


def _cider_pair(pair: EvalPair, tables: list[dict]) -> float:
    cand = tokenize(pair.candidate)
    score = 0.0
    for n in range(1, CIDER_MAX_N + 1):
        cand_counts = _ngrams(cand, n)
        sims = [
            _tfidf_cosine(cand_counts, _ngrams(tokenize(ref), n), tables[n - 1])
            for ref in pair.references
        ]
        score += sum(sims) / len(sims)
    return CIDER_SCALE * score / CIDER_MAX_N


# ---------------------------------------------------------------------------
# Aggregate evaluation
# ---------------------------------------------------------------------------

PairScorer = Callable[[str, str], float]


def evaluate(pairs: Sequence[EvalPair],
             plugins: dict[str, PairScorer] | None = None) -> EvalReport:
    """Run all built-in metrics plus optional embedding-scorer plugins.

    A plugin that raises is reported as unavailable without affecting the
    built-in scores.
    """
    pairs = list(pairs)
    flags: list[str] = []
    if len(pairs) == 1:
        flags.append(FLAG_IDF_FLOOR)
    scores: dict[str, float | None] = {
        "bleu4": bleu4(pairs),
        "rouge_l": rouge_l(pairs),
        "meteor_lite": meteor_lite(pairs),
        "cider": cider(pairs),
    }
    per_sample: dict[str, list[float]] = {
        "rouge_l": [100.0 * _rouge_l_pair(tokenize(p.candidate),
                                          [tokenize(r) for r in p.references])
                    for p in pairs],
        "meteor_lite": [100.0 * _meteor_pair(tokenize(p.candidate),
                                             [tokenize(r) for r in p.references])
                        for p in pairs],
    }
    if pairs:
        tables, _ = _cider_idf(pairs)
        per_sample["cider"] = [_cider_pair(p, tables) for p in pairs]
    unavailable: dict[str, str] = {}
    for name, scorer in (plugins or {}).items():
        try:
            per_pair = [
                max(scorer(p.candidate, ref) for ref in p.references) for p in pairs
            ]
            scores[name] = sum(per_pair) / len(per_pair) if per_pair else 0.0
            per_sample[name] = per_pair
        except Exception as exc:  # noqa: BLE001 - plugin isolation is the contract
            scores[name] = None
            unavailable[name] = str(exc)
    return EvalReport(
        scores=scores,
        per_sample=per_sample,
        counts={"pairs": len(pairs)},
        flags=tuple(flags),
        unavailable=unavailable,
    )
