"""Text tokenizers for the prompt bank.

Two interchangeable implementations:

* ``BpeTokenizer`` -- the byte-pair encoding used by contrastive
  vision-language checkpoints (49152 merges + 256 byte tokens + 2
  sentinels).  Requires the merges file that ships alongside pretrained
  weights; pass its path via ``backbone.bpe_vocab``.
* ``HashTokenizer`` -- a deterministic word-level fallback for randomly
  initialized models (tests, smoke runs).  It has no linguistic merit;
  it only guarantees stable ids for stable words.

Both expose ``encode(text) -> list[int]`` (no sentinels) plus
``sot_id`` / ``eot_id`` / ``pad_id``.
"""

from __future__ import annotations

import gzip
import hashlib
import html
from functools import lru_cache
from pathlib import Path

import regex as re

from .errors import InputError


@lru_cache()
def _bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode map used by the BPE vocab."""
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def _get_pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    pairs = set()
    prev = word[0]
    for ch in word[1:]:
        pairs.add((prev, ch))
        prev = ch
    return pairs


def _clean(text: str) -> str:
    text = html.unescape(html.unescape(text))
    text = re.sub(r"\s+", " ", text)
    return text.strip().lower()


class BpeTokenizer:
    """BPE tokenizer compatible with standard CLIP-family merge files."""

    _PATTERN = re.compile(
        r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
        re.IGNORECASE,
    )

    def __init__(self, merges_path: str | Path):
        merges_path = Path(merges_path)
        if not merges_path.exists():
            raise InputError(f"BPE merges file not found: {merges_path}")
        if merges_path.suffix == ".gz":
            raw = gzip.open(merges_path, "rt", encoding="utf-8").read()
        else:
            raw = merges_path.read_text(encoding="utf-8")
        merge_lines = raw.split("\n")
        # first line is a version header; vocab is capped at 49152-256-2 merges
        merge_lines = merge_lines[1 : 49152 - 256 - 2 + 1]
        merges = [tuple(line.split()) for line in merge_lines if line.strip()]

        self.byte_encoder = _bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        vocab = list(self.byte_encoder.values())
        vocab = vocab + [v + "</w>" for v in vocab]
        for merge in merges:
            vocab.append("".join(merge))
        vocab.extend(["<|startoftext|>", "<|endoftext|>"])
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.bpe_ranks = dict(zip(merges, range(len(merges))))
        self._cache: dict[str, str] = {
            "<|startoftext|>": "<|startoftext|>",
            "<|endoftext|>": "<|endoftext|>",
        }
        self.vocab_size = len(vocab)
        self.sot_id = self.encoder["<|startoftext|>"]
        self.eot_id = self.encoder["<|endoftext|>"]
        self.pad_id = 0

    def _bpe(self, token: str) -> str:
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word: list[str] = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if word[i] == first and i < len(word) - 1 and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        out = " ".join(word)
        self._cache[token] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for token in re.findall(self._PATTERN, _clean(text)):
            token = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self._bpe(token).split(" "))
        return ids


class HashTokenizer:
    """Word-level tokenizer with stable hashed ids; for untrained models."""

    def __init__(self, vocab_size: int):
        if vocab_size < 8:
            raise InputError(f"vocab_size too small for HashTokenizer: {vocab_size}")
        self.vocab_size = vocab_size
        self.pad_id = 0
        self.sot_id = 1
        self.eot_id = 2
        self._span = vocab_size - 3

    def _word_id(self, word: str) -> int:
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        return 3 + int.from_bytes(digest[:8], "big") % self._span

    def encode(self, text: str) -> list[int]:
        return [self._word_id(w) for w in _clean(text).split(" ") if w]


Tokenizer = BpeTokenizer | HashTokenizer
