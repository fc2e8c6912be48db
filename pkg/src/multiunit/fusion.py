"""N-best rescoring by score interpolation.

The combined score of a hypothesis is its first-pass score plus a weighted
sum of auxiliary scores (a separately trained acoustic model, a tapped head
of the same model, or the attention decoder).  Weights are tuned by grid
search on held-out data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .corpus import DataError, wer
from .ctc import Hypothesis
from .units import OOVError, UnitError

log = logging.getLogger(__name__)

DEFAULT_GRID = [round(0.1 * i, 1) for i in range(11)] + [1.5, 2.0]


@dataclass
class RescoreSpec:
    first_pass: str
    sources: list[tuple[str, float]] = field(default_factory=list)
    length_norm: bool = False

    def __post_init__(self):
        for name, weight in self.sources:
            if not math.isfinite(weight):
                raise ValueError(f"weight for {name!r} must be finite")

    def with_weight(self, name: str, weight: float) -> "RescoreSpec":
        others = [(n, w) for n, w in self.sources if n != name]
        return replace(self, sources=others + [(name, weight)])


def _score(h: Hypothesis, name: str, length_norm: bool) -> float:
    try:
        s = h.scores[name]
    except KeyError:
        raise DataError(f"hypothesis {h.ids[:8]}... has no score {name!r}") from None
    if length_norm:
        s = s / max(1, len(h.ids))
    return s


def combined_score(h: Hypothesis, spec: RescoreSpec) -> float:
    """First-pass score + Σ λ·aux.  A zero weight ignores the source, even at -inf."""
    total = _score(h, spec.first_pass, spec.length_norm)
    for name, weight in spec.sources:
        s = _score(h, name, spec.length_norm)
        if weight != 0.0:
            total += weight * s
    return total


def rescore(nbest: Sequence[Hypothesis], spec: RescoreSpec) -> list[Hypothesis]:
    """Stable re-ranking by combined score, best first.  The input list is not modified."""
    scored = [(combined_score(h, spec), i) for i, h in enumerate(nbest)]
    order = sorted(range(len(nbest)), key=lambda i: -scored[i][0])
    return [nbest[i] for i in order]


def attach_aux_scores(nbest: Sequence[Hypothesis], scorer: Callable[[list[int]], float],
                      unit_tokenize: Callable[[str], list[int]], score_name: str) -> list[Hypothesis]:
    """Copy of ``nbest`` with ``score_name`` added to every hypothesis.

    Each hypothesis text is re-tokenized into the auxiliary unit and scored;
    text the unit cannot express scores -inf.
    """
    out, failed = [], []
    for h in nbest:
        if h.text is None:
            raise DataError("hypothesis has no text to re-tokenize")
        try:
            value = scorer(unit_tokenize(h.text))
        except (OOVError, UnitError) as exc:
            failed.append(str(exc))
            value = -math.inf
        out.append(Hypothesis(list(h.ids), {**h.scores, score_name: float(value)}, h.text))
    if failed:
        log.warning("%s: %d of %d hypotheses scored -inf (%s)", score_name, len(failed), len(out), failed[0])
    return out


def rescored_wer(dev: Sequence[tuple[Sequence[Hypothesis], str]], spec: RescoreSpec,
                 token_mode: str = "word") -> float:
    refs, hyps = [], []
    for nbest, ref in dev:
        refs.append(ref)
        best = rescore(nbest, spec)
        hyps.append(best[0].text if best else "")
    return wer(refs, hyps, token_mode)


def tune_lambda(dev: Sequence[tuple[Sequence[Hypothesis], str]], score_name: str,
                grid: Sequence[float] = DEFAULT_GRID, first_pass: str | None = None,
                base: RescoreSpec | None = None, token_mode: str = "word"):
    """Grid search for the weight of ``score_name`` minimising dev WER.

    ``dev`` pairs each N-best list with its reference text.  Returns
    ``(best_lambda, curve)`` with ``curve`` a list of ``(lambda, wer)`` for
    every grid point.  Ties go to the smaller |λ|.
    """
    if not grid or 0 not in grid:
        raise ValueError("the lambda grid must be non-empty and contain 0")
    if base is None:
        if first_pass is None:
            raise ValueError("need first_pass or a base RescoreSpec")
        base = RescoreSpec(first_pass)
    curve = [(float(lam), rescored_wer(dev, base.with_weight(score_name, lam), token_mode))
             for lam in grid]
    best = min(curve, key=lambda c: (c[1], abs(c[0]), c[0]))
    return best[0], curve


def format_tuning_report(curve: Sequence[tuple[float, float]]) -> str:
    return "lambda\twer\n" + "".join(f"{lam!r}\t{w!r}\n" for lam, w in curve)


def write_top1(path, nbest: Mapping[str, Sequence[Hypothesis]]) -> None:
    """``utt_id<TAB>text`` per utterance, first hypothesis of each list."""
    lines = [f"{utt}\t{hyps[0].text if hyps else ''}" for utt, hyps in nbest.items()]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_top1(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        utt, sep, text = line.partition("\t")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected utt_id<TAB>text")
        out[utt] = text
    return out
