"""Modeling-unit inventories and the tokenizers that map text onto them.

Five unit kinds are supported:

* ``wordpiece`` -- greedy BPE subwords (orthographic)
* ``char``      -- letters, with word-initial letters kept distinct (orthographic)
* ``phoneme``   -- lexicon pronunciations (phonetic)
* ``pinyin``    -- per-character romanization split into letters and a tone digit (phonetic)
* ``wubi``      -- per-character keystroke codes (logographic)

Every vocabulary reserves id 0 for the CTC blank.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BLANK = "<blank>"
UNK = "<unk>"
MARKER = "▁"
UNIT_KINDS = ("wordpiece", "char", "phoneme", "pinyin", "wubi")

_PUNCT = re.compile(r"[^\w\s']|_")


class UnitError(ValueError):
    """Bad tokenizer input or malformed unit file."""


class OOVError(UnitError):
    """A word or character has no entry in the lexicon / mapping table."""

    def __init__(self, word: str):
        super().__init__(f"out-of-vocabulary: {word!r}")
        self.word = word


def normalize_english(text: str) -> str:
    text = _PUNCT.sub(" ", text.lower())
    return " ".join(text.split())


@dataclass
class UnitVocabulary:
    unit_kind: str
    symbols: list[str]
    blank_id: int = 0
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.unit_kind not in UNIT_KINDS:
            raise UnitError(f"unknown unit kind {self.unit_kind!r}")
        if not self.symbols or self.symbols[0] != BLANK:
            raise UnitError("symbol 0 must be <blank>")
        self._index = {s: i for i, s in enumerate(self.symbols)}
        if len(self._index) != len(self.symbols):
            dup = [s for s, c in Counter(self.symbols).items() if c > 1]
            raise UnitError(f"duplicate symbols: {dup[:5]}")

    @classmethod
    def build(cls, unit_kind: str, symbols: Iterable[str], unk: bool = False) -> "UnitVocabulary":
        body = [s for s in dict.fromkeys(symbols) if s not in (BLANK, UNK)]
        return cls(unit_kind, [BLANK] + ([UNK] if unk else []) + body)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    @property
    def unk_id(self) -> int | None:
        return self._index.get(UNK)

    def id(self, symbol: str) -> int:
        i = self._index.get(symbol)
        if i is None:
            if self.unk_id is None:
                raise OOVError(symbol)
            return self.unk_id
        return i

    def symbol(self, i: int) -> str:
        return self.symbols[i]

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path, unit_kind: str) -> "UnitVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != BLANK:
            raise UnitError(f"{path}: line 1 must be {BLANK}")
        return cls(unit_kind, lines)


# lexicon / mapping tables ---------------------------------------------------

@dataclass
class Lexicon:
    entries: dict[str, list[str]]

    @classmethod
    def load(cls, path) -> "Lexicon":
        entries: dict[str, list[str]] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            word, sep, pron = line.partition("\t")
            if not sep or not pron.split():
                raise UnitError(f"{path}:{lineno}: expected 'word<TAB>PH1 PH2 ...'")
            entries.setdefault(word, pron.split())  # first pronunciation wins
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text(
            "".join(f"{w}\t{' '.join(p)}\n" for w, p in self.entries.items()), encoding="utf-8")

    def phonemes(self) -> list[str]:
        return sorted({ph for pron in self.entries.values() for ph in pron})


@dataclass
class MappingTable:
    entries: dict[str, str]

    @classmethod
    def load(cls, path) -> "MappingTable":
        entries: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            char, sep, code = line.partition("\t")
            code = code.strip()
            if not sep or len(char) != 1 or not code:
                raise UnitError(f"{path}:{lineno}: expected 'char<TAB>code'")
            entries.setdefault(char, code)
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{c}\t{v}\n" for c, v in self.entries.items()),
                              encoding="utf-8")

    def symbols(self) -> list[str]:
        return sorted({s for code in self.entries.values() for s in code})


# BPE -------------------------------------------------------------------------

def _word_symbols(word: str) -> list[str]:
    return [MARKER + word[0]] + list(word[1:])


def base_alphabet(words: Iterable[str]) -> list[str]:
    """Plain and word-initial forms of every character seen in ``words``."""
    chars = sorted({c for w in words for c in w})
    return chars + [MARKER + c for c in chars]


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    alphabet: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}

    def symbols(self) -> list[str]:
        return list(self.alphabet) + [a + b for a, b in self.merges]

    def encode_word(self, word: str) -> list[str]:
        parts = _word_symbols(word)
        while len(parts) > 1:
            ranked = [(self._ranks.get(p, len(self.merges)), i)
                      for i, p in enumerate(zip(parts, parts[1:]))]
            rank, _ = min(ranked)
            if rank == len(self.merges):
                break
            left, right = self.merges[rank]
            merged, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == left and parts[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def save(self, path) -> None:
        lines = [f"#merges {len(self.merges)}"] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, alphabet: Sequence[str] = ()) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#merges "):
            raise UnitError(f"{path}: first line must be '#merges N'")
        n = int(lines[0].split()[1])
        merges = []
        for lineno, line in enumerate(lines[1:n + 1], 2):
            parts = line.split(" ")
            if len(parts) != 2:
                raise UnitError(f"{path}:{lineno}: expected 'left right'")
            merges.append((parts[0], parts[1]))
        if len(merges) != n:
            raise UnitError(f"{path}: header promises {n} merges, found {len(merges)}")
        return cls(merges, list(alphabet))


def train_bpe(corpus: Iterable[str], target_vocab_size: int) -> BpeModel:
    """Learn merges greedily: most frequent adjacent pair first, ties to the smaller pair.

    Training stops once the symbol inventory reaches ``target_vocab_size``
    (blank not counted) or when no pair occurs at least twice.  Pairs whose
    concatenation is already a symbol are never merged, so the inventory grows
    by exactly one per merge.
    """
    word_counts = Counter(w for line in corpus for w in normalize_english(line).split())
    if not word_counts:
        raise UnitError("empty corpus")
    alphabet = base_alphabet(word_counts)
    if target_vocab_size < len(alphabet):
        raise UnitError(f"target vocab {target_vocab_size} < base alphabet {len(alphabet)}")
    words = {tuple(_word_symbols(w)): c for w, c in sorted(word_counts.items())}
    known = set(alphabet)
    merges: list[tuple[str, str]] = []
    while len(known) < target_vocab_size:
        pairs: Counter = Counter()
        for syms, c in words.items():
            for p in zip(syms, syms[1:]):
                pairs[p] += c
        candidates = [(-c, p) for p, c in pairs.items() if c >= 2 and p[0] + p[1] not in known]
        if not candidates:
            break
        _, best = min(candidates)
        merges.append(best)
        known.add(best[0] + best[1])
        words = {_merge_pair(syms, best): c for syms, c in words.items()}
    return BpeModel(merges, alphabet)


def _merge_pair(syms: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
            out.append(syms[i] + syms[i + 1])
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


# tokenizers ---------------------------------------------------------------------

@dataclass
class Tokenizer:
    """Maps normalized text onto one unit vocabulary.

    Build one with the ``for_*`` constructors; they derive the vocabulary from
    the model, lexicon or table unless one is passed explicitly.
    """

    vocab: UnitVocabulary
    bpe: BpeModel | None = None
    lexicon: Lexicon | None = None
    table: MappingTable | None = None

    @property
    def kind(self) -> str:
        return self.vocab.unit_kind

    @classmethod
    def for_wordpiece(cls, bpe: BpeModel, vocab: UnitVocabulary | None = None) -> "Tokenizer":
        return cls(vocab or UnitVocabulary.build("wordpiece", bpe.symbols()), bpe=bpe)

    @classmethod
    def for_char(cls, alphabet: Iterable[str], vocab: UnitVocabulary | None = None) -> "Tokenizer":
        return cls(vocab or UnitVocabulary.build("char", base_alphabet(["".join(alphabet)])))

    @classmethod
    def for_phoneme(cls, lexicon: Lexicon, vocab: UnitVocabulary | None = None) -> "Tokenizer":
        vocab = vocab or UnitVocabulary.build("phoneme", lexicon.phonemes())
        missing = [p for p in lexicon.phonemes() if p not in vocab]
        if missing:
            raise UnitError(f"lexicon phonemes missing from vocabulary: {missing[:5]}")
        return cls(vocab, lexicon=lexicon)

    @classmethod
    def for_table(cls, kind: str, table: MappingTable,
                  vocab: UnitVocabulary | None = None) -> "Tokenizer":
        if kind not in ("pinyin", "wubi"):
            raise UnitError(f"mapping tables serve pinyin/wubi, not {kind!r}")
        return cls(vocab or UnitVocabulary.build(kind, table.symbols()), table=table)

    def symbols_of(self, text: str) -> list[str]:
        kind = self.kind
        if kind in ("pinyin", "wubi"):
            out = []
            for ch in "".join(text.split()):
                code = self.table.entries.get(ch)
                if code is None:
                    raise OOVError(ch)
                out.extend(code)
            return out
        words = normalize_english(text).split()
        if kind == "wordpiece":
            return [s for w in words for s in self.bpe.encode_word(w)]
        if kind == "char":
            return [s for w in words for s in _word_symbols(w)]
        out = []
        for w in words:
            pron = self.lexicon.entries.get(w)
            if pron is None:
                raise OOVError(w)
            out.extend(pron)
        return out

    def tokenize(self, text: str) -> list[int]:
        return [self.vocab.id(s) for s in self.symbols_of(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        if any(i == self.vocab.blank_id for i in ids):
            raise UnitError("blank id in token sequence")
        syms = [self.vocab.symbol(i) for i in ids]
        if self.kind in ("wordpiece", "char"):
            return "".join(syms).replace(MARKER, " ").strip()
        return " ".join(syms)


def tokenize(tokenizer: Tokenizer, text: str) -> list[int]:
    return tokenizer.tokenize(text)


def detokenize(tokenizer: Tokenizer, ids: Sequence[int]) -> str:
    return tokenizer.detokenize(ids)
