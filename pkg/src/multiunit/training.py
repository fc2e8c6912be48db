"""Training, decoding and layer-sweep drivers shared by the CLI and the tests."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .corpus import read_features, read_manifest, wer
from .ctc import Hypothesis, greedy_decode, prefix_beam_search
from .model import LossBreakdown, ModelConfig, TapSpec, batch_joint_loss, infer, init_params
from .units import OOVError, Tokenizer, normalize_english

log = logging.getLogger(__name__)


@dataclass
class Example:
    utt_id: str
    features: np.ndarray
    text: str
    targets: dict[str, list[int]]


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-5
    optimizer: str = "adam"
    momentum: float = 0.0
    clip_norm: float | None = 5.0
    seed: int = 0
    bucket_batches: int = 8


def make_examples(rows, tokenizers: Mapping[str, Tokenizer], oov: str = "error") -> list[Example]:
    """Tokenize ``(utt_id, features, transcript)`` rows for every unit.

    With ``oov="skip-utterance"`` utterances containing an unknown word are
    dropped and logged instead of raising.
    """
    if oov not in ("error", "skip-utterance"):
        raise ValueError(f"unknown OOV policy {oov!r}")
    out = []
    for utt, feats, text in rows:
        try:
            targets = {u: tok.tokenize(text) for u, tok in tokenizers.items()}
        except OOVError as exc:
            if oov == "error":
                raise OOVError(exc.word) from None
            log.warning("dropping %s: %s", utt, exc)
            continue
        out.append(Example(utt, np.asarray(feats, dtype=np.float64), text, targets))
    return out


def load_examples(manifest, tokenizers: Mapping[str, Tokenizer], oov: str = "error") -> list[Example]:
    rows = [(u, read_features(p), t) for u, p, t in read_manifest(manifest)]
    return make_examples(rows, tokenizers, oov)


def batch_schedule(examples: Sequence[Example], batch_size: int, seed: int,
                   bucket_batches: int = 8) -> Iterator[list[int]]:
    """Endless stream of index batches.

    Each epoch is a fresh permutation cut into pools of ``bucket_batches``
    batches; pools are length-sorted before cutting so padding stays small,
    then the batches of the epoch are shuffled.
    """
    rng = np.random.default_rng([seed, 7])
    lengths = np.array([e.features.shape[0] for e in examples])
    n = len(examples)
    pool = batch_size * max(1, bucket_batches)
    while True:
        perm = rng.permutation(n)
        batches = []
        for start in range(0, n, pool):
            chunk = perm[start:start + pool]
            chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
            batches += [chunk[i:i + batch_size].tolist() for i in range(0, len(chunk), batch_size)]
        for j in rng.permutation(len(batches)):
            yield batches[j]


def _clip(params, max_norm: float | None) -> None:
    if not max_norm:
        return
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale


def train_model(cfg: ModelConfig, examples: Sequence[Example], tcfg: TrainConfig,
                params=None, start_step: int = 0, optimizer: nc.Optimizer | None = None,
                log_rows: list | None = None):
    """Minibatch training of the joint objective.

    Returns ``(params, optimizer, rows)`` where ``rows`` holds one
    ``(step, LossBreakdown)`` per step.  ``start_step`` fast-forwards the
    batch schedule so a run resumed from a checkpoint sees the same batches.
    """
    if not examples:
        raise ValueError("no training examples")
    params = init_params(cfg, tcfg.seed) if params is None else params
    plist = list(params.values())
    opt = optimizer or nc.Optimizer(tcfg.optimizer, tcfg.lr, momentum=tcfg.momentum,
                                    weight_decay=tcfg.weight_decay)
    schedule = batch_schedule(examples, tcfg.batch_size, tcfg.seed, tcfg.bucket_batches)
    for _ in range(start_step):
        next(schedule)
    rows = [] if log_rows is None else log_rows
    for step in range(start_step + 1, tcfg.steps + 1):
        idx = next(schedule)
        batch = [examples[i] for i in idx]
        total, breakdown = batch_joint_loss(cfg, params, [e.features for e in batch],
                                            [e.targets for e in batch])
        for p in plist:
            p.grad = None
        if total.requires_grad:
            total.backward()
        for p in plist:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        _clip(plist, tcfg.clip_norm)
        opt.step(plist)
        rows.append((step, breakdown))
    for p in plist:
        p.grad = None
    return params, opt, rows


def format_loss_rows(rows, tap_keys: Sequence[str]) -> str:
    header = ["step", "total", "backbone_ctc", "aed"] + [f"tap:{k}" for k in tap_keys] + ["utterances", "skipped"]
    lines = ["\t".join(header)]
    for step, b in rows:
        vals = [str(step), repr(b.total), repr(b.backbone_ctc), repr(b.aed)]
        vals += [repr(b.per_tap.get(k, math.nan)) for k in tap_keys]
        vals += [str(b.utterances), str(b.skipped)]
        lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


# decoding -------------------------------------------------------------------------

def decode_examples(cfg: ModelConfig, params, examples: Sequence[Example], tokenizer: Tokenizer,
                    beam: int = 16, nbest: int = 8, batch_size: int = 32,
                    token_limit: int | None = None) -> dict[str, list[Hypothesis]]:
    """First-pass prefix beam search on the primary head; hypotheses carry detokenized text."""
    unit = cfg.primary_unit
    order = sorted(range(len(examples)), key=lambda i: examples[i].features.shape[0])
    out: dict[int, list[Hypothesis]] = {}
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        lat = infer(cfg, params, [examples[i].features for i in idx])
        for i, lp in zip(idx, lat.primary):
            if beam == 1 and nbest == 1:
                hyps = [greedy_decode(lp, unit)]
            else:
                hyps = prefix_beam_search(lp, beam, nbest, unit, token_limit)
            for h in hyps:
                h.text = tokenizer.detokenize(h.ids)
            out[i] = hyps
    return {examples[i].utt_id: out[i] for i in range(len(examples))}


def top1_wer(examples: Sequence[Example], nbest: Mapping[str, list[Hypothesis]],
             token_mode: str = "word") -> float:
    refs = {e.utt_id: normalize_english(e.text) for e in examples}
    hyps = {e.utt_id: (nbest[e.utt_id][0].text if nbest[e.utt_id] else "") for e in examples}
    return wer(refs, hyps, token_mode)


# layer sweep ----------------------------------------------------------------------

@dataclass
class SweepJob:
    layer: int
    seed: int
    cfg: ModelConfig
    tcfg: TrainConfig
    beam: int
    nbest: int
    keep_nbest: bool = False


@dataclass
class SweepRow:
    layer: int
    seed: int
    dev_wer: float
    test_wer: float
    final_loss: float = math.nan
    # first-pass lists, kept only on request for later rescoring
    dev_nbest: dict | None = field(default=None, repr=False, compare=False)
    test_nbest: dict | None = field(default=None, repr=False, compare=False)


def tap_config(base: ModelConfig, unit: str, layer: int, weight: float, vocab_size: int) -> ModelConfig:
    """``base`` with one tap of ``unit`` at ``layer``; layer 0 means no tap."""
    taps = [] if layer == 0 else [TapSpec(unit, layer, weight, vocab_size)]
    return replace(base, taps=taps)


_SWEEP_DATA: dict = {}


def _run_sweep_job(job: SweepJob) -> SweepRow:
    data = _SWEEP_DATA
    params, _, rows = train_model(job.cfg, data["train"], job.tcfg)
    tok = data["tokenizer"]
    dev = decode_examples(job.cfg, params, data["dev"], tok, job.beam, job.nbest, token_limit=job.beam)
    test = decode_examples(job.cfg, params, data["test"], tok, job.beam, job.nbest, token_limit=job.beam)
    row = SweepRow(job.layer, job.seed, top1_wer(data["dev"], dev), top1_wer(data["test"], test),
                   rows[-1][1].total)
    if job.keep_nbest:
        row.dev_nbest, row.test_nbest = dev, test
    return row


def _init_worker(data):
    _SWEEP_DATA.clear()
    _SWEEP_DATA.update(data)


def run_sweep(base: ModelConfig, tcfg: TrainConfig, train: Sequence[Example], dev: Sequence[Example],
              test: Sequence[Example], primary_tokenizer: Tokenizer, unit: str, unit_vocab_size: int,
              layers: Sequence[int], seeds: Sequence[int], weight: float = 0.1,
              beam: int = 16, nbest: int = 8, jobs: int = 1, keep_nbest: bool = False) -> list[SweepRow]:
    """Train and decode one model per (layer, seed); rows come back ordered by (layer, seed)."""
    for layer in layers:
        if not 0 <= layer <= base.num_layers:
            raise ValueError(f"sweep layer {layer} outside 0..{base.num_layers}")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    data = {"train": list(train), "dev": list(dev), "test": list(test), "tokenizer": primary_tokenizer}
    work = [SweepJob(layer, seed, tap_config(base, unit, layer, weight, unit_vocab_size),
                     replace(tcfg, seed=seed), beam, nbest, keep_nbest)
            for layer in sorted(layers) for seed in sorted(seeds)]
    if jobs <= 1:
        _init_worker(data)
        results = []
        for job in work:
            row = _run_sweep_job(job)
            log.info("sweep layer=%d seed=%d dev=%.4f test=%.4f", row.layer, row.seed, row.dev_wer, row.test_wer)
            results.append(row)
        return results
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(data,)) as pool:
        return list(pool.map(_run_sweep_job, work))


def summarize_sweep(rows: Sequence[SweepRow]) -> dict[int, dict[str, float]]:
    """Per-layer mean/min/max of dev and test WER."""
    out: dict[int, dict[str, float]] = {}
    for layer in sorted({r.layer for r in rows}):
        dev = np.array([r.dev_wer for r in rows if r.layer == layer])
        test = np.array([r.test_wer for r in rows if r.layer == layer])
        out[layer] = {"dev_mean": float(dev.mean()), "dev_min": float(dev.min()), "dev_max": float(dev.max()),
                      "test_mean": float(test.mean()), "test_min": float(test.min()),
                      "test_max": float(test.max()), "seeds": len(dev)}
    return out


def format_sweep(rows: Sequence[SweepRow]) -> tuple[str, str]:
    report = ["layer\tseed\tdev_wer\ttest_wer"]
    report += [f"{r.layer}\t{r.seed}\t{r.dev_wer!r}\t{r.test_wer!r}" for r in rows]
    summary = ["layer\tseeds\tdev_mean\tdev_min\tdev_max\ttest_mean\ttest_min\ttest_max"]
    for layer, s in summarize_sweep(rows).items():
        summary.append("\t".join([str(layer), str(s["seeds"])] + [repr(s[k]) for k in (
            "dev_mean", "dev_min", "dev_max", "test_mean", "test_min", "test_max")]))
    return "\n".join(report) + "\n", "\n".join(summary) + "\n"
