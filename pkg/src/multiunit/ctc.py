"""CTC loss, labeling scores and decoders, all in log space.

Lattices are ``[T, K]`` arrays of per-frame log-probabilities with the blank
at id 0.  The batched forward-backward runs the recursion over all
utterances at once; the ``brute_force_*`` functions enumerate every frame
path and exist only to check the fast routines on tiny inputs.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import Tensor, make_op

BLANK_ID = 0
NEG_INF = -math.inf


class InfeasibleAlignmentError(ValueError):
    """The label sequence cannot be aligned to this many frames."""


@dataclass
class Hypothesis:
    ids: list[int]
    scores: dict[str, float] = field(default_factory=dict)
    text: str | None = None

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]


def collapse(path: Sequence[int], blank: int = BLANK_ID) -> list[int]:
    out, prev = [], None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Shortest lattice able to emit ``labels``: one frame each plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def is_feasible(num_frames: int, labels: Sequence[int]) -> bool:
    return num_frames >= min_frames(labels)


def _extend(labels: Sequence[int]) -> list[int]:
    ext = [BLANK_ID]
    for lab in labels:
        ext += [int(lab), BLANK_ID]
    return ext


def _prepare(lattices: np.ndarray, labels: Sequence[Sequence[int]]):
    B, T, _ = lattices.shape
    S = max(2 * len(lab) + 1 for lab in labels)
    ext = np.zeros((B, S), dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    sizes = np.empty(B, dtype=np.int64)
    for b, lab in enumerate(labels):
        e = _extend(lab)
        ext[b, :len(e)] = e
        sizes[b] = len(e)
        for s in range(2, len(e)):
            skip[b, s] = e[s] != BLANK_ID and e[s] != e[s - 2]
    emit = np.take_along_axis(lattices, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    return ext, skip, sizes, emit


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    out[:, k:] = a[:, :-k]
    return out


def forward_variables(lattices: np.ndarray, labels, lengths=None):
    """Log-space alphas ``[B, T, S]`` and the per-utterance log-likelihood."""
    lattices = np.asarray(lattices, dtype=np.float64)
    B, T, _ = lattices.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    ext, skip, sizes, emit = _prepare(lattices, labels)
    S = ext.shape[1]
    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        has_label = sizes > 1
        alpha[has_label, 0, 1] = emit[has_label, 0, 1]
    two_back = np.where(skip, 0.0, NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[:, t - 1]
            acc = np.logaddexp(prev, _shift(prev, 1))
            acc = np.logaddexp(acc, _shift(prev, 2) + two_back)
            alpha[:, t] = acc + emit[:, t]
    rows = np.arange(B)
    last = alpha[rows, lengths - 1]
    loglik = np.logaddexp(last[rows, sizes - 1], np.where(sizes > 1, last[rows, np.maximum(sizes - 2, 0)], NEG_INF))
    return alpha, loglik, (ext, skip, sizes, emit)


def forward_backward(lattices: np.ndarray, labels, lengths=None):
    """Batched CTC forward-backward.

    Returns ``(loglik[B], occupancy[B, T, K])`` where ``occupancy[b, t, k]`` is
    the posterior probability that frame ``t`` emits symbol ``k`` given the
    labels.  Frames past an utterance's length, and infeasible utterances,
    get zero occupancy.
    """
    lattices = np.asarray(lattices, dtype=np.float64)
    B, T, K = lattices.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    alpha, loglik, (ext, skip, sizes, emit) = forward_variables(lattices, labels, lengths)
    S = ext.shape[1]
    s_idx = np.arange(S)
    final = (s_idx[None, :] == (sizes - 1)[:, None]) | (s_idx[None, :] == (sizes - 2)[:, None])
    init = np.where(final, 0.0, NEG_INF)
    # skip into state s+2 is allowed when skip[s+2]
    two_ahead = np.full((B, S), NEG_INF)
    two_ahead[:, :-2] = np.where(skip[:, 2:], 0.0, NEG_INF)
    beta = np.full((B, T, S), NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(T - 1, -1, -1):
            if t == T - 1:
                rec = np.full((B, S), NEG_INF)
            else:
                nxt = beta[:, t + 1] + emit[:, t + 1]
                rec = np.logaddexp(nxt, _shift_left(nxt, 1))
                rec = np.logaddexp(rec, _shift_left(nxt, 2) + two_ahead)
            at_end = (lengths - 1 == t)[:, None]
            inside = (t < lengths - 1)[:, None]
            beta[:, t] = np.where(at_end, init, np.where(inside, rec, NEG_INF))
    feasible = np.isfinite(loglik)
    with np.errstate(invalid="ignore", over="ignore"):
        gamma = np.exp(alpha + beta - np.where(feasible, loglik, 0.0)[:, None, None])
    gamma[~feasible] = 0.0
    onehot = np.zeros((B, S, K))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    onehot[s_idx[None, :] >= sizes[:, None]] = 0.0
    return loglik, gamma @ onehot


def _shift_left(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    out[:, :-k] = a[:, k:]
    return out


def ctc_loss(lattice: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the pre-softmax logits.

    ``lattice`` holds log-probabilities; since log_softmax is idempotent on
    them, the gradient is the one for logits equal to the lattice itself.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    if any(int(l) == BLANK_ID for l in labels):
        raise ValueError("labels must not contain the blank id")
    if not is_feasible(lattice.shape[0], labels):
        raise InfeasibleAlignmentError(
            f"{len(labels)} labels need {min_frames(labels)} frames, lattice has {lattice.shape[0]}")
    loglik, occ = forward_backward(lattice[None], [list(labels)])
    return -float(loglik[0]), np.exp(lattice) - occ[0]


def ctc_label_score(lattice: np.ndarray, labels: Sequence[int]) -> float:
    """log P(labels | lattice) by the forward algorithm; -inf when infeasible."""
    lattice = np.asarray(lattice, dtype=np.float64)
    if not is_feasible(lattice.shape[0], labels):
        return NEG_INF
    _, loglik, _ = forward_variables(lattice[None], [list(labels)])
    return float(loglik[0])


def ctc_loss_op(logits: Tensor, labels: Sequence[Sequence[int]], lengths) -> Tensor:
    """Per-utterance CTC losses ``[B]`` from padded logits ``[B, T, K]`` (softmax applied inside)."""
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lengths = np.asarray(lengths)
    loglik, occ = forward_backward(logp, labels, lengths)
    valid = (np.arange(x.shape[1])[None, :] < lengths[:, None])[:, :, None]
    local = np.where(valid, np.exp(logp) - occ, 0.0)

    def backward(g):
        return (local * g[:, None, None],)

    return make_op(-loglik, (logits,), backward)


def greedy_decode(lattice: np.ndarray, unit: str = "wordpiece") -> Hypothesis:
    """Best path: per-frame argmax (lowest id on ties), then collapse."""
    lattice = np.asarray(lattice)
    best = lattice.argmax(axis=1)
    score = float(lattice[np.arange(len(best)), best].sum())
    return Hypothesis(collapse(best), {f"ctc_{unit}": score})


def prefix_beam_search(lattice: np.ndarray, beam_width: int = 16, nbest: int = 8,
                       unit: str = "wordpiece", token_limit: int | None = None) -> list[Hypothesis]:
    """CTC prefix beam search returning the ``nbest`` prefixes by total log-mass.

    Each prefix carries two log-masses: paths ending in blank and paths
    ending in its last label.  ``token_limit`` restricts the labels tried at
    each frame to the most probable ones; None tries them all.  Ties are
    broken toward lower token ids, then shorter prefixes.
    """
    if not beam_width >= nbest >= 1:
        raise ValueError("need beam_width >= nbest >= 1")
    lattice = np.asarray(lattice, dtype=np.float64)
    T, K = lattice.shape
    logaddexp = np.logaddexp
    beam: list[tuple[tuple[int, ...], float, float]] = [((), 0.0, NEG_INF)]
    for t in range(T):
        row = lattice[t]
        if token_limit is None or token_limit >= K - 1:
            cands = range(1, K)
        else:
            order = np.argsort(-row[1:], kind="stable")[:token_limit] + 1
            cands = sorted(int(c) for c in order)
        p_blank = row[BLANK_ID]
        nb: dict = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, pb, pnb in beam:
            total = logaddexp(pb, pnb)
            entry = nb[prefix]
            entry[0] = logaddexp(entry[0], total + p_blank)
            last = prefix[-1] if prefix else None
            for c in cands:
                p = row[c]
                ext = nb[prefix + (c,)]
                if c == last:
                    ext[1] = logaddexp(ext[1], pb + p)
                    entry[1] = logaddexp(entry[1], pnb + p)
                else:
                    ext[1] = logaddexp(ext[1], total + p)
        ranked = sorted(((-float(logaddexp(*v)), k) for k, v in nb.items()))[:beam_width]
        beam = [(k, nb[k][0], nb[k][1]) for _, k in ranked]
    final = sorted((-float(logaddexp(pb, pnb)), prefix) for prefix, pb, pnb in beam)[:nbest]
    return [Hypothesis(list(prefix), {f"ctc_{unit}": -neg}) for neg, prefix in final]


# exhaustive oracles ---------------------------------------------------------------

def brute_force_label_score(lattice: np.ndarray, labels: Sequence[int]) -> float:
    """log Σ over every length-T path collapsing to ``labels``."""
    lattice = np.asarray(lattice, dtype=np.float64)
    T, K = lattice.shape
    target = [int(l) for l in labels]
    total = 0.0
    for path in itertools.product(range(K), repeat=T):
        if collapse(path) == target:
            total += math.exp(sum(lattice[t, k] for t, k in enumerate(path)))
    return math.log(total) if total > 0 else NEG_INF


def brute_force_labelings(lattice: np.ndarray) -> dict[tuple[int, ...], float]:
    """Probability mass of every reachable labeling, in the probability domain."""
    lattice = np.asarray(lattice, dtype=np.float64)
    T, K = lattice.shape
    mass: dict[tuple[int, ...], float] = defaultdict(float)
    for path in itertools.product(range(K), repeat=T):
        mass[tuple(collapse(path))] += math.exp(sum(lattice[t, k] for t, k in enumerate(path)))
    return dict(mass)


# N-best files -------------------------------------------------------------------------

def write_nbest(path, nbest: dict[str, list[Hypothesis]], symbol_of) -> None:
    """``utt_id<TAB>rank<TAB>name=value;...<TAB>symbols`` with ranks starting at 1."""
    lines = []
    for utt, hyps in nbest.items():
        for rank, h in enumerate(hyps, 1):
            scores = ";".join(f"{k}={v!r}" for k, v in h.scores.items())
            lines.append(f"{utt}\t{rank}\t{scores}\t{' '.join(symbol_of(i) for i in h.ids)}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_nbest(path, id_of, text_of=None) -> dict[str, list[Hypothesis]]:
    out: dict[str, list[Hypothesis]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        utt, _, score_field, syms = fields
        scores = {}
        for item in filter(None, score_field.split(";")):
            name, _, value = item.partition("=")
            scores[name] = float(value)
        ids = [id_of(s) for s in syms.split()]
        hyp = Hypothesis(ids, scores)
        if text_of is not None:
            hyp.text = text_of(ids)
        out.setdefault(utt, []).append(hyp)
    return out
