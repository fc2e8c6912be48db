"""Synthetic phoneme-grounded corpora, feature/manifest files, and error rates.

Each synthetic utterance is a word sequence.  Words expand to phonemes via a
random lexicon; each phoneme contributes a run of frames equal to its fixed
prototype vector plus gaussian noise.  Spellings are derived from the
phonemes with some per-word ambiguity, so the orthography carries strong but
imperfect pronunciation clues.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .units import Lexicon

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1

ARPABET = ("AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
           "OW OY P R S SH T TH UH UW V W Y Z ZH").split()
LETTERS = "abcdefghijklmnopqrstuvwxyz"


class FormatError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class SynthSpec:
    seed: int = 0
    num_words: int = 40
    num_phonemes: int = 16
    word_len: tuple[int, int] = (2, 5)
    utterance_len: tuple[int, int] = (2, 6)
    frames_per_phoneme: tuple[int, int] = (4, 8)
    feature_dim: int = 16
    noise_std: float = 0.3
    prototype_std: float = 1.0
    num_train: int = 2000
    num_dev: int = 200
    num_test: int = 200

    def __post_init__(self):
        for name in ("word_len", "utterance_len", "frames_per_phoneme"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a non-empty range of positive ints, got {(lo, hi)}")
        if self.num_phonemes < 3:
            raise ValueError("num_phonemes must be >= 3")
        if self.noise_std < 0 or self.prototype_std <= 0:
            raise ValueError("noise_std must be >= 0 and prototype_std > 0")


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    transcript: str
    phonemes: list[str]
    durations: list[int]


@dataclass
class SynthCorpus:
    spec: SynthSpec
    lexicon: Lexicon
    words: list[str]
    phonemes: list[str]
    prototypes: np.ndarray
    splits: dict[str, list[Utterance]]

    def write(self, out_dir) -> dict[str, Path]:
        """Write features, manifests, lexicon and word list; returns the manifest paths."""
        out = Path(out_dir)
        (out / "feats").mkdir(parents=True, exist_ok=True)
        manifests = {}
        for split, utts in self.splits.items():
            rows = []
            for u in utts:
                rel = f"feats/{u.utt_id}.feat"
                write_features(out / rel, u.features)
                rows.append((u.utt_id, rel, u.transcript))
            manifests[split] = out / f"{split}.tsv"
            write_manifest(manifests[split], rows)
        self.lexicon.save(out / "lexicon.txt")
        (out / "words.txt").write_text("".join(w + "\n" for w in self.words), encoding="utf-8")
        (out / "phonemes.txt").write_text("".join(p + "\n" for p in self.phonemes), encoding="utf-8")
        spec_lines = [f"synth.{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
                      for k, v in asdict(self.spec).items()]
        (out / "synth.conf").write_text("\n".join(spec_lines) + "\n", encoding="utf-8")
        return manifests


def _phoneme_names(n: int) -> list[str]:
    return ARPABET[:n] if n <= len(ARPABET) else [f"P{i:02d}" for i in range(n)]


def synthesize(spec: SynthSpec) -> SynthCorpus:
    """Generate a corpus; identical specs give identical corpora."""
    rng = np.random.default_rng(spec.seed)
    phonemes = _phoneme_names(spec.num_phonemes)
    # each phoneme has a main letter and an alternative spelling
    spellings = {}
    for i, ph in enumerate(phonemes):
        alt = LETTERS[rng.integers(26)] + LETTERS[rng.integers(26)]
        spellings[ph] = (LETTERS[i % 26], alt)

    lexicon: dict[str, list[str]] = {}
    prons: set[tuple[str, ...]] = set()
    attempts = 0
    while len(lexicon) < spec.num_words:
        attempts += 1
        if attempts > 1000 * spec.num_words:
            raise ValueError("cannot draw enough distinct words; enlarge word_len or num_phonemes")
        n = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
        pron = tuple(phonemes[j] for j in rng.integers(len(phonemes), size=n))
        word = "".join(spellings[p][int(rng.random() < 0.25)] for p in pron)
        if pron in prons or word in lexicon:
            continue
        prons.add(pron)
        lexicon[word] = list(pron)
    words = list(lexicon)

    prototypes = rng.normal(0.0, spec.prototype_std, size=(len(phonemes), spec.feature_dim))
    ph_index = {p: i for i, p in enumerate(phonemes)}
    splits: dict[str, list[Utterance]] = {}
    for split, count in (("train", spec.num_train), ("dev", spec.num_dev), ("test", spec.num_test)):
        utts = []
        for k in range(count):
            n_words = int(rng.integers(spec.utterance_len[0], spec.utterance_len[1] + 1))
            chosen = [words[j] for j in rng.integers(len(words), size=n_words)]
            phs = [p for w in chosen for p in lexicon[w]]
            durs = rng.integers(spec.frames_per_phoneme[0], spec.frames_per_phoneme[1] + 1,
                                size=len(phs))
            frames = np.repeat(prototypes[[ph_index[p] for p in phs]], durs, axis=0)
            frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
            utts.append(Utterance(f"{split}-{k:05d}", frames.astype(np.float32),
                                  " ".join(chosen), phs, [int(d) for d in durs]))
        splits[split] = utts
    return SynthCorpus(spec, Lexicon(lexicon), words, phonemes, prototypes, splits)


# file formats --------------------------------------------------------------------

def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("features must be a T x m matrix")
    T, m = feats.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<III", FEAT_VERSION, T, m) + feats.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEAT_MAGIC:
        raise FormatError(f"{path}: not a FEAT file")
    version, T, m = struct.unpack("<III", raw[4:16])
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported FEAT version {version}")
    body = raw[16:]
    if len(body) != 4 * T * m:
        raise FormatError(f"{path}: expected {T}x{m} float32 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(T, m).astype(np.float64)


def write_manifest(path, rows: Sequence[tuple[str, str, str]]) -> None:
    Path(path).write_text("".join(f"{u}\t{p}\t{t}\n" for u, p, t in rows), encoding="utf-8")


def read_manifest(path) -> list[tuple[str, Path, str]]:
    """Rows of ``(utt_id, absolute feature path, transcript)``; paths resolve against the manifest's directory."""
    path = Path(path)
    rows, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected utt_id<TAB>path<TAB>transcript")
        utt, rel, text = fields
        if utt in seen:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {utt!r}")
        seen.add(utt)
        feat = path.parent / rel
        if not feat.exists():
            raise DataError(f"{path}:{lineno}: missing feature file {feat}")
        rows.append((utt, feat, text))
    return rows


# metrics -------------------------------------------------------------------------------

class EditCounts(NamedTuple):
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein distance with one traced optimal alignment.

    Insertions are hypothesis tokens with no reference counterpart.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (r != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    sub = ins = dele = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(d[n, m]), int(sub), ins, dele)


def _tokens(text: str, token_mode: str) -> list[str]:
    if token_mode == "word":
        return text.split()
    if token_mode == "char":
        return list("".join(text.split()))
    raise ValueError(f"token_mode must be 'word' or 'char', not {token_mode!r}")


def _align_inputs(refs, hyps) -> list[tuple[str, str]]:
    if isinstance(refs, Mapping) or isinstance(hyps, Mapping):
        if not (isinstance(refs, Mapping) and isinstance(hyps, Mapping)):
            raise DataError("refs and hyps must both be keyed by utt_id or both be lists")
        if set(refs) != set(hyps):
            missing = sorted(set(refs) ^ set(hyps))
            raise DataError(f"utt_id mismatch between refs and hyps: {missing[:5]}")
        return [(refs[k], hyps[k]) for k in refs]
    if len(refs) != len(hyps):
        raise DataError(f"{len(refs)} references but {len(hyps)} hypotheses")
    return list(zip(refs, hyps))


def error_counts(refs, hyps, token_mode: str = "word") -> tuple[EditCounts, int]:
    """Summed edit counts over utterances, and the total reference length."""
    totals = np.zeros(4, dtype=np.int64)
    n_ref = 0
    for ref, hyp in _align_inputs(refs, hyps):
        r, h = _tokens(ref, token_mode), _tokens(hyp, token_mode)
        totals += edit_distance(r, h)
        n_ref += len(r)
    return EditCounts(*map(int, totals)), n_ref


def wer(refs, hyps, token_mode: str = "word") -> float:
    """Corpus error rate: summed edit distance over summed reference length.

    ``token_mode="char"`` gives CER (whitespace ignored).  An empty reference
    set counts errors against a denominator of 1.
    """
    counts, n_ref = error_counts(refs, hyps, token_mode)
    return counts.distance / max(1, n_ref)
