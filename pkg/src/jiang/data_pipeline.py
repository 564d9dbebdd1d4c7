"""Corpus machinery: document statistics and quality filters, a pluggable
document embedder, candidate-pool diversity selection, and mixture
sampling over weighted sources.

Stats and embeddings are pure per-document functions (parallel-friendly);
diversity selection is inherently sequential because every round scores
against the pool picked so far.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .tokenizer import Vocabulary, is_cjk

DEFAULT_PUNCTUATION = frozenset(string.punctuation) | frozenset(
    "。，、；：？！「」『』（）《》〈〉【】…—～·“”‘’￥"
)

_ENGLISH_WORD = re.compile(r"[A-Za-z]+")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class DocStats:
    english_word_count: int
    chinese_char_count: int
    char_length: int
    max_punctuationless_run: int


def compute_stats(text: str, punctuation: frozenset[str] = DEFAULT_PUNCTUATION) -> DocStats:
    """English words are maximal ASCII-letter runs; Chinese characters are
    unified-ideograph code points; the run statistic is the longest
    stretch of consecutive non-punctuation characters."""
    longest = 0
    run = 0
    chinese = 0
    for ch in text:
        if ch in punctuation:
            run = 0
        else:
            run += 1
            if run > longest:
                longest = run
        if is_cjk(ch):
            chinese += 1
    return DocStats(
        english_word_count=len(_ENGLISH_WORD.findall(text)),
        chinese_char_count=chinese,
        char_length=len(text),
        max_punctuationless_run=longest,
    )


@dataclass
class Document:
    id: str
    source: str
    text: str
    stats: DocStats | None = None
    verdict: str | None = None

    def ensure_stats(self) -> DocStats:
        if self.stats is None:
            self.stats = compute_stats(self.text)
        return self.stats


# ---------------------------------------------------------------------------
# filtering

@dataclass(frozen=True)
class FilterRules:
    min_chars: int = 50
    max_punctuationless_run: int = 2048
    max_nsfw_terms: int = 3  # strictly more occurrences than this rejects
    min_lang_tokens: int = 20  # English words + Chinese characters
    nsfw_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.min_chars, self.max_punctuationless_run,
               self.max_nsfw_terms, self.min_lang_tokens) <= 0:
            raise PipelineError("filter thresholds must be positive")

    @classmethod
    def load(cls, terms_path, **overrides) -> "FilterRules":
        path = Path(terms_path)
        if not path.exists():
            raise PipelineError(f"NSFW term list not found: {path}")
        terms = tuple(
            line.strip().lower()
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.startswith("#")
        )
        return cls(nsfw_terms=terms, **overrides)

    @classmethod
    def default(cls, **overrides) -> "FilterRules":
        return cls.load(Path(__file__).parent / "data" / "nsfw_terms.txt", **overrides)


def count_nsfw(text: str, terms: Sequence[str]) -> int:
    """Case-insensitive occurrences at word boundaries (a boundary being
    anything that is not an ASCII letter, so CJK terms match inline)."""
    lowered = text.lower()
    total = 0
    for term in terms:
        pattern = r"(?<![A-Za-z])" + re.escape(term) + r"(?![A-Za-z])"
        total += len(re.findall(pattern, lowered))
    return total


REJECT_TOO_SHORT = "too_short"
REJECT_PUNCT_RUN = "punct_run"
REJECT_LANG_COUNT = "lang_count"
REJECT_NSFW = "nsfw"

REJECT_REASONS = (REJECT_TOO_SHORT, REJECT_PUNCT_RUN, REJECT_LANG_COUNT, REJECT_NSFW)


def filter_document(doc: Document, rules: FilterRules) -> str | None:
    """Returns the first-fired reject reason (also stored on the document)
    or None to keep. Rule order: length, punctuation run, language count,
    NSFW occurrences."""
    stats = doc.ensure_stats()
    verdict = None
    if stats.char_length < rules.min_chars:
        verdict = REJECT_TOO_SHORT
    elif stats.max_punctuationless_run > rules.max_punctuationless_run:
        verdict = REJECT_PUNCT_RUN
    elif stats.english_word_count + stats.chinese_char_count < rules.min_lang_tokens:
        verdict = REJECT_LANG_COUNT
    elif count_nsfw(doc.text, rules.nsfw_terms) > rules.max_nsfw_terms:
        verdict = REJECT_NSFW
    doc.verdict = verdict
    return verdict


# ---------------------------------------------------------------------------
# embedding

def _fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h = ((h ^ b) * 0x01000193) & 0xFFFFFFFF
    return h


class HashedTrigramEmbedder:
    """Deterministic, language-agnostic stand-in for a sentence encoder:
    character trigrams hashed into a fixed number of buckets, L2-normalized."""

    def __init__(self, dim: int = 256):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        if not text:
            raise PipelineError("cannot embed an empty document")
        grams = [text[i:i + 3] for i in range(len(text) - 2)] or [text]
        vec = np.zeros(self.dim, dtype=np.float64)
        for g in grams:
            vec[_fnv1a32(g.encode("utf-8")) % self.dim] += 1.0
        return vec / np.linalg.norm(vec)


def embed_document(doc: Document, embedder: Callable[[str], np.ndarray]) -> np.ndarray:
    return embedder(doc.text)


# ---------------------------------------------------------------------------
# diversity selection

@dataclass(frozen=True)
class DiversityConfig:
    target_count: int
    candidate_quantile: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.candidate_quantile <= 1.0:
            raise PipelineError(f"candidate_quantile must be in (0, 1], got {self.candidate_quantile}")
        if self.target_count < 1:
            raise PipelineError("target_count must be >= 1")


def diversity_select(docs: Sequence[tuple[str, np.ndarray]], cfg: DiversityConfig) -> list[str]:
    """Pool-growing selection: seed the pool with one uniform pick, then
    repeatedly draw uniformly from the lowest-similarity decile of the
    remaining documents (similarity to the pool = max cosine over pool
    members, ties broken by id). Deterministic given the seed."""
    if not docs:
        raise PipelineError("diversity_select: no documents")
    if cfg.target_count > len(docs):
        raise PipelineError(
            f"target_count {cfg.target_count} exceeds document count {len(docs)}")
    rng = np.random.default_rng(cfg.seed)
    ids = [doc_id for doc_id, _ in docs]
    vectors = np.stack([np.asarray(vec, dtype=np.float64) for _, vec in docs])

    first = int(rng.integers(len(docs)))
    selected = [first]
    remaining = [i for i in range(len(docs)) if i != first]
    # similarity to the pool so far; refreshed incrementally per new member
    best_sim = vectors[remaining] @ vectors[first] if remaining else np.empty(0)

    while len(selected) < cfg.target_count:
        n_cand = math.ceil(cfg.candidate_quantile * len(remaining))
        order = sorted(range(len(remaining)), key=lambda j: (best_sim[j], ids[remaining[j]]))
        pick_pos = order[int(rng.integers(n_cand))]
        chosen = remaining[pick_pos]
        selected.append(chosen)
        remaining.pop(pick_pos)
        best_sim = np.delete(best_sim, pick_pos)
        if remaining:
            best_sim = np.maximum(best_sim, vectors[remaining] @ vectors[chosen])
    return [ids[i] for i in selected]


# ---------------------------------------------------------------------------
# mixture sampling

# sampling proportions of the pretraining mixture (they sum to 0.9998 as
# published and are normalized to exactly 1 at load)
MIXTURE_DEFAULTS = {
    "chinese_internet": 0.4368,
    "wikipedia": 0.0515,
    "thepile": 0.1773,
    "github": 0.1876,
    "clcf": 0.0963,
    "business_research_reports": 0.0354,
    "ulcf": 0.0138,
    "lccc": 0.0011,
}


@dataclass
class MixtureSpec:
    raw_proportions: dict[str, float]
    tags: tuple[str, ...] = field(init=False)
    proportions: dict[str, float] = field(init=False)

    def __post_init__(self):
        if not self.raw_proportions:
            raise PipelineError("mixture spec has no sources")
        if any(p <= 0 for p in self.raw_proportions.values()):
            raise PipelineError("mixture proportions must be positive")
        total = sum(self.raw_proportions.values())
        self.tags = tuple(sorted(self.raw_proportions))
        self.proportions = {t: self.raw_proportions[t] / total for t in self.tags}

    @classmethod
    def table_defaults(cls) -> "MixtureSpec":
        return cls(dict(MIXTURE_DEFAULTS))

    @classmethod
    def load(cls, path) -> "MixtureSpec":
        props = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tag, _, value = line.partition("=")
            props[tag.strip()] = float(value)
        return cls(props)

    def sample_tag(self, rng: np.random.Generator) -> str:
        u = rng.random()
        acc = 0.0
        for tag in self.tags:
            acc += self.proportions[tag]
            if u < acc:
                return tag
        return self.tags[-1]


def _cycled(items: Iterable[str]) -> Iterator[str]:
    buffered: list[str] = []
    for item in items:
        buffered.append(item)
        yield item
    if not buffered:
        raise PipelineError("mixture source is empty")
    while True:
        yield from buffered


def mixture_sample(sources: Mapping[str, Iterable[str]], spec: MixtureSpec,
                   tokenizer: Vocabulary, total_tokens: int, seed: int = 0,
                   draw_counts: Counter | None = None) -> Iterator[int]:
    """Interleaved token stream: each drawn document comes from source s
    with probability proportional to its spec share; documents are
    tokenized and terminated with the end-of-text token. Sources recycle
    when exhausted. Deterministic given the seed."""
    missing = [t for t in spec.tags if t not in sources]
    if missing:
        raise PipelineError(f"mixture spec names unknown sources: {missing}")
    rng = np.random.default_rng(seed)
    streams = {tag: _cycled(sources[tag]) for tag in spec.tags}
    emitted = 0
    while emitted < total_tokens:
        tag = spec.sample_tag(rng)
        if draw_counts is not None:
            draw_counts[tag] += 1
        ids = tokenizer.encode(next(streams[tag]))
        ids.append(tokenizer.eot_id)
        for token in ids:
            yield token
            emitted += 1
            if emitted >= total_tokens:
                return


# ---------------------------------------------------------------------------
# end-to-end run

def read_jsonl(path) -> Iterator[Document]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            yield Document(id=str(rec["id"]), source=str(rec["source"]), text=str(rec["text"]))


def config_hash(payload: Mapping) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


def pipeline_run(input_dir, rules: FilterRules, cfg: DiversityConfig, output_dir,
                 embedder: Callable[[str], np.ndarray] | None = None) -> dict:
    """Filter every document under input_dir/*.jsonl, embed the keepers,
    run diversity selection independently per source, and write the
    selected documents plus a manifest sufficient to reproduce the run.

    Per-source selection targets are capped at the source's kept count so
    small categories survive. IO failures skip the file and are recorded.
    """
    input_dir = Path(input_dir)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    embedder = embedder or HashedTrigramEmbedder()

    kept: dict[str, list[Document]] = {}
    rejected = Counter()
    total = 0
    skipped_files: list[str] = []
    for path in sorted(input_dir.glob("*.jsonl")):
        try:
            docs = list(read_jsonl(path))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
            skipped_files.append(f"{path.name}: {e}")
            continue
        for doc in docs:
            total += 1
            verdict = filter_document(doc, rules)
            if verdict is None:
                kept.setdefault(doc.source, []).append(doc)
            else:
                rejected[verdict] += 1

    selected_ids: dict[str, list[str]] = {}
    selected_docs: list[Document] = []
    for source in sorted(kept):
        docs = kept[source]
        embedded = [(doc.id, embed_document(doc, embedder)) for doc in docs]
        target = min(cfg.target_count, len(docs))
        per_source = DiversityConfig(target_count=target,
                                     candidate_quantile=cfg.candidate_quantile,
                                     seed=cfg.seed)
        ids = diversity_select(embedded, per_source)
        selected_ids[source] = ids
        by_id = {doc.id: doc for doc in docs}
        selected_docs.extend(by_id[i] for i in ids)

    out_path = output_dir / "selected.jsonl"
    with open(out_path, "w", encoding="utf-8") as fh:
        for doc in selected_docs:
            fh.write(json.dumps({"id": doc.id, "source": doc.source, "text": doc.text},
                                ensure_ascii=False) + "\n")

    manifest = {
        "documents_seen": total,
        "kept": sum(len(v) for v in kept.values()),
        "rejected": {reason: rejected.get(reason, 0) for reason in REJECT_REASONS},
        "selected": selected_ids,
        "seed": cfg.seed,
        "target_count": cfg.target_count,
        "candidate_quantile": cfg.candidate_quantile,
        "skipped_files": skipped_files,
        "config_hash": config_hash({
            "min_chars": rules.min_chars,
            "max_punctuationless_run": rules.max_punctuationless_run,
            "max_nsfw_terms": rules.max_nsfw_terms,
            "min_lang_tokens": rules.min_lang_tokens,
            "nsfw_terms": list(rules.nsfw_terms),
            "target_count": cfg.target_count,
            "candidate_quantile": cfg.candidate_quantile,
            "seed": cfg.seed,
        }),
    }
    with open(output_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return manifest


__all__ = [
    "Document", "DocStats", "FilterRules", "MixtureSpec", "DiversityConfig",
    "HashedTrigramEmbedder", "compute_stats", "filter_document", "count_nsfw",
    "embed_document", "diversity_select", "mixture_sample", "pipeline_run",
    "read_jsonl", "config_hash", "MIXTURE_DEFAULTS", "REJECT_REASONS",
]
