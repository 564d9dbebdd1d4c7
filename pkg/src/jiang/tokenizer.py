"""Byte-level BPE tokenizer with per-character CJK extension.

Ids are laid out append-only: 256 byte tokens, then merge tokens in
training order, then special tokens, then extension tokens. Extending a
vocabulary therefore never moves an existing id, which is what lets
embeddings be resized in place.

Merges are counted and applied inside pre-tokenization units: maximal
runs of non-whitespace single-byte characters, single whitespace bytes,
and each multi-byte UTF-8 character on its own. Keeping multi-byte
characters atomic units means a merge can build up one character's bytes
but never cross characters, so replacing a character with an atomic
extension token can only shorten an encoding (per-character coverage is
the design goal; phrase tokens are deliberately impossible).

Vocabularies are immutable after construction: encode/decode are pure
and safe to call from multiple threads. Training is single-threaded so
tie-breaking stays deterministic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .model import DecoderWeights, replace

END_OF_TEXT = "<|endoftext|>"
N_BYTE_TOKENS = 256

_ASCII_WS = frozenset(b" \t\n\r\x0b\x0c")

# Unified ideograph blocks (base, extension A, and the supplementary
# plane extensions); compatibility ideographs are excluded.
CJK_RANGES = (
    (0x4E00, 0x9FFF),
    (0x3400, 0x4DBF),
    (0x20000, 0x2A6DF),
    (0x2A700, 0x2B73F),
    (0x2B740, 0x2B81F),
    (0x2B820, 0x2CEAF),
    (0x2CEB0, 0x2EBEF),
)


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in CJK_RANGES)


class VocabularyError(ValueError):
    pass


def _segment(data: bytes) -> Iterator[bytes]:
    """Split into merge units: ASCII non-whitespace runs, single
    whitespace bytes, whole multi-byte characters, stray high bytes."""
    n = len(data)
    i = 0
    run_start = -1
    while i < n:
        b = data[i]
        if b < 0x80:
            if b in _ASCII_WS:
                if run_start >= 0:
                    yield data[run_start:i]
                    run_start = -1
                yield data[i:i + 1]
                i += 1
            else:
                if run_start < 0:
                    run_start = i
                i += 1
            continue
        if run_start >= 0:
            yield data[run_start:i]
            run_start = -1
        char_len = 0
        if 0xC2 <= b <= 0xDF:
            char_len = 2
        elif 0xE0 <= b <= 0xEF:
            char_len = 3
        elif 0xF0 <= b <= 0xF4:
            char_len = 4
        if char_len and i + char_len <= n:
            piece = data[i:i + char_len]
            try:
                piece.decode("utf-8")
            except UnicodeDecodeError:
                char_len = 0
            if char_len:
                yield piece
                i += char_len
                continue
        yield data[i:i + 1]  # invalid byte stands alone
        i += 1
    if run_start >= 0:
        yield data[run_start:]


@dataclass(frozen=True)
class Vocabulary:
    merges: tuple[tuple[bytes, bytes], ...]
    specials: tuple[str, ...] = (END_OF_TEXT,)
    extensions: tuple[str, ...] = ()
    _token_bytes: list = field(default_factory=list, repr=False, compare=False)
    _ranks: dict = field(default_factory=dict, repr=False, compare=False)
    _byte_seq_id: dict = field(default_factory=dict, repr=False, compare=False)
    _ext_id: dict = field(default_factory=dict, repr=False, compare=False)
    _special_id: dict = field(default_factory=dict, repr=False, compare=False)
    _unit_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        tokens: list[bytes] = [bytes([i]) for i in range(N_BYTE_TOKENS)]
        for left, right in self.merges:
            tokens.append(left + right)
        for name in self.specials:
            tokens.append(name.encode("utf-8"))
        for ch in self.extensions:
            if len(ch) != 1:
                raise VocabularyError(f"extension entry {ch!r} is not a single character")
            tokens.append(ch.encode("utf-8"))
        self._token_bytes.extend(tokens)
        for rank, pair in enumerate(self.merges):
            self._ranks[pair] = rank
        # first id wins when distinct merges produce identical bytes
        for i in range(N_BYTE_TOKENS + len(self.merges)):
            self._byte_seq_id.setdefault(tokens[i], i)
        base = N_BYTE_TOKENS + len(self.merges)
        for j, name in enumerate(self.specials):
            self._special_id[name] = base + j
        base += len(self.specials)
        for j, ch in enumerate(self.extensions):
            self._ext_id[ch] = base + j

    @property
    def size(self) -> int:
        return len(self._token_bytes)

    @property
    def eot_id(self) -> int:
        return self._special_id[END_OF_TEXT]

    def special_id(self, name: str) -> int:
        return self._special_id[name]

    def token_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < self.size:
            raise VocabularyError(f"token id {token_id} outside [0, {self.size})")
        return self._token_bytes[token_id]

    def is_extension(self, token_id: int) -> bool:
        return token_id >= N_BYTE_TOKENS + len(self.merges) + len(self.specials)

    # -- encoding ----------------------------------------------------------

    def _bpe_unit(self, unit: bytes) -> tuple[int, ...]:
        cached = self._unit_cache.get(unit)
        if cached is not None:
            return cached
        parts = [unit[i:i + 1] for i in range(len(unit))]
        while len(parts) > 1:
            best_rank = None
            best_pair = None
            for pair in zip(parts, parts[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            merged = best_pair[0] + best_pair[1]
            rebuilt = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == best_pair[0] and parts[i + 1] == best_pair[1]:
                    rebuilt.append(merged)
                    i += 2
                else:
                    rebuilt.append(parts[i])
                    i += 1
            parts = rebuilt
        ids = tuple(self._byte_seq_id[p] for p in parts)
        if len(self._unit_cache) > 200_000:
            self._unit_cache.clear()
        self._unit_cache[unit] = ids
        return ids

    def encode_bytes(self, data: bytes) -> list[int]:
        ids: list[int] = []
        for unit in _segment(data):
            if len(unit) > 1:
                ext = self._ext_id.get(unit.decode("utf-8", errors="ignore"))
                if ext is not None:
                    ids.append(ext)
                    continue
            ids.extend(self._bpe_unit(unit))
        return ids

    def encode(self, text: str) -> list[int]:
        return self.encode_bytes(text.encode("utf-8"))

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return b"".join(self.token_bytes(i) for i in ids)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8")

    # -- persistence: text format, hex-escaped merge pairs -------------------

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("JVOC 1\n")
            for left, right in self.merges:
                fh.write(f"{left.hex()} {right.hex()}\n")
            fh.write("EXT\n")
            for ch in self.extensions:
                fh.write(ch + "\n")
            fh.write("SPECIAL\n")
            for name in self.specials:
                fh.write(name + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        merges: list[tuple[bytes, bytes]] = []
        extensions: list[str] = []
        specials: list[str] = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != "JVOC 1":
                raise VocabularyError(f"{path}: bad vocabulary header {header!r}")
            section = "merges"
            for line in fh:
                line = line.rstrip("\n")
                if line == "EXT":
                    section = "ext"
                elif line == "SPECIAL":
                    section = "special"
                elif section == "merges":
                    left, _, right = line.partition(" ")
                    merges.append((bytes.fromhex(left), bytes.fromhex(right)))
                elif section == "ext" and line:
                    extensions.append(line)
                elif section == "special" and line:
                    specials.append(line)
        return cls(tuple(merges), tuple(specials) or (END_OF_TEXT,), tuple(extensions))


# ---------------------------------------------------------------------------
# training

def train_bpe(corpus: str | Iterable[str], target_merges: int) -> Vocabulary:
    """Greedy highest-frequency pair merging with deterministic
    lexicographic tie-breaking; stops early if no pair is left."""
    if target_merges < 0:
        raise VocabularyError(f"target_merges must be >= 0, got {target_merges}")
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    if not texts or all(not t for t in texts):
        raise VocabularyError("empty corpus")

    unit_counts: Counter[bytes] = Counter()
    for text in texts:
        unit_counts.update(u for u in _segment(text.encode("utf-8")) if len(u) > 1)

    # one worklist entry per distinct unit, weighted by its count
    words: list[list[bytes]] = []
    weights: list[int] = []
    for unit, count in sorted(unit_counts.items()):
        words.append([unit[i:i + 1] for i in range(len(unit))])
        weights.append(count)

    pair_counts: Counter[tuple[bytes, bytes]] = Counter()
    pair_words: dict[tuple[bytes, bytes], set[int]] = {}
    for idx, parts in enumerate(words):
        for pair in zip(parts, parts[1:]):
            pair_counts[pair] += weights[idx]
            pair_words.setdefault(pair, set()).add(idx)

    merges: list[tuple[bytes, bytes]] = []
    for _ in range(target_merges):
        best = None
        best_count = 0
        for pair, count in pair_counts.items():
            if count > best_count or (count == best_count and (best is None or pair < best)):
                best, best_count = pair, count
        if best is None or best_count == 0:
            break
        merges.append(best)
        merged = best[0] + best[1]
        for idx in sorted(pair_words.get(best, ())):
            parts = words[idx]
            w = weights[idx]
            rebuilt = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == best[0] and parts[i + 1] == best[1]:
                    rebuilt.append(merged)
                    i += 2
                else:
                    rebuilt.append(parts[i])
                    i += 1
            for pair in zip(parts, parts[1:]):
                pair_counts[pair] -= w
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                members = pair_words.get(pair)
                if members is not None:
                    members.discard(idx)
                    if not members:
                        del pair_words[pair]
            for pair in zip(rebuilt, rebuilt[1:]):
                pair_counts[pair] += w
                pair_words.setdefault(pair, set()).add(idx)
            words[idx] = rebuilt
    return Vocabulary(tuple(merges))


def extend_vocab(vocab: Vocabulary, chars: Iterable[str]) -> Vocabulary:
    """Append an atomic token for every character not yet encodable as a
    single token; idempotent, and existing ids never move."""
    new: list[str] = []
    seen = set(vocab.extensions)
    for ch in chars:
        if len(ch) != 1:
            raise VocabularyError(f"extension entry {ch!r} is not a single character")
        if ch in seen:
            continue
        if len(vocab.encode(ch)) == 1:
            continue
        seen.add(ch)
        new.append(ch)
    if not new:
        return vocab
    return Vocabulary(vocab.merges, vocab.specials, vocab.extensions + tuple(new))


def coverage(vocab: Vocabulary, corpus: str) -> float:
    """Fraction of CJK ideograph occurrences that encode as one token."""
    total = 0
    covered = 0
    single_token: dict[str, bool] = {}
    for ch in corpus:
        if not is_cjk(ch):
            continue
        total += 1
        hit = single_token.get(ch)
        if hit is None:
            hit = len(vocab.encode(ch)) == 1
            single_token[ch] = hit
        covered += hit
    if total == 0:
        raise VocabularyError("coverage undefined: corpus contains no CJK ideographs")
    return covered / total


def vocab_prefix_compatible(old: Vocabulary, new: Vocabulary) -> bool:
    if new.size < old.size:
        return False
    return all(old.token_bytes(i) == new.token_bytes(i) for i in range(old.size))


def resize_embeddings(weights: DecoderWeights, old_vocab: Vocabulary,
                      new_vocab: Vocabulary, seed: int = 0) -> DecoderWeights:
    """Grow the embedding (and untied head) to a prefix-compatible larger
    vocabulary; fresh rows are drawn from the existing rows' normal fit."""
    if not vocab_prefix_compatible(old_vocab, new_vocab):
        raise VocabularyError("new vocabulary does not extend the old one (ids moved)")
    config = weights.config
    if config.vocab_size != old_vocab.size:
        raise VocabularyError(
            f"model vocab_size {config.vocab_size} != old vocabulary size {old_vocab.size}")
    out = weights.copy()
    if new_vocab.size == old_vocab.size:
        return out
    rng = np.random.default_rng(seed)
    grow = new_vocab.size - old_vocab.size
    out.config = replace(config, vocab_size=new_vocab.size)

    def grown(arr: np.ndarray, axis: int) -> np.ndarray:
        mu, sigma = float(arr.mean()), float(arr.std())
        shape = list(arr.shape)
        shape[axis] = grow
        fresh = rng.normal(mu, sigma, size=shape).astype(arr.dtype)
        return np.concatenate([arr, fresh], axis=axis)

    out.params["embed.weight"].data = grown(out.params["embed.weight"].data, axis=0)
    if not config.tied_head:
        out.params["head.weight"].data = grown(out.params["head.weight"].data, axis=1)
    return out


__all__ = [
    "Vocabulary", "VocabularyError", "train_bpe", "extend_vocab", "coverage",
    "resize_embeddings", "vocab_prefix_compatible", "is_cjk", "END_OF_TEXT", "CJK_RANGES",
]
