"""``multiunit`` command-line interface.

Every command reads an optional ``key = value`` config file (``-c``), then
``--set key=value`` overrides, then its own flags, in increasing priority.
``MULTIUNIT_SEED`` fills any seed left unset by all three.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as rc
from .corpus import error_counts, read_features, read_manifest, synthesize
from .ctc import Hypothesis, ctc_label_score, read_nbest, write_nbest
from .fusion import (DEFAULT_GRID, RescoreSpec, attach_aux_scores, format_tuning_report, rescore,
                     tune_lambda, write_top1)
from .model import ModelConfig, TapSpec, aed_scores, infer, load_checkpoint, save_checkpoint
from .training import (format_loss_rows, format_sweep, decode_examples, load_examples, make_examples,
                       run_sweep, train_model)
from .units import (BpeModel, Lexicon, MappingTable, Tokenizer, UnitVocabulary, normalize_english,
                    train_bpe)

log = logging.getLogger("multiunit")


class CliError(Exception):
    pass


# configuration ----------------------------------------------------------------------

def _resolve(args, flag_keys: dict[str, str]) -> rc.RunConfig:
    values = rc.load_config_file(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set {item!r}: expected key=value")
        values[key.strip()] = value.strip()
    for dest, key in flag_keys.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[key] = str(value)
    return rc.RunConfig.from_mapping(values)


def _need(value: str, key: str) -> Path:
    if not value:
        raise CliError(f"{key} is not set (use a config file, --set {key}=..., or the matching flag)")
    path = Path(value)
    if not path.exists():
        raise CliError(f"{key}: file not found: {path}")
    return path


def _manifest_transcripts(path: Path) -> list[str]:
    return [text for _, _, text in read_manifest(path)]


def build_tokenizer(cfg: rc.RunConfig, unit: str) -> Tokenizer:
    p = cfg.paths
    if unit == "wordpiece":
        bpe = BpeModel.load(_need(p.bpe, "paths.bpe"))
        vocab_path = Path(p.bpe_vocab or p.bpe + ".vocab")
        vocab = UnitVocabulary.load(vocab_path, "wordpiece") if vocab_path.exists() else None
        return Tokenizer.for_wordpiece(bpe, vocab)
    if unit == "phoneme":
        return Tokenizer.for_phoneme(Lexicon.load(_need(p.lexicon, "paths.lexicon")))
    if unit == "char":
        if p.char_vocab:
            vocab = UnitVocabulary.load(_need(p.char_vocab, "paths.char_vocab"), "char")
            return Tokenizer.for_char("", vocab)
        text = _manifest_transcripts(_need(p.train, "paths.train"))
        return Tokenizer.for_char("".join(normalize_english(t).replace(" ", "") for t in text))
    if unit in ("pinyin", "wubi"):
        key = f"paths.{unit}_table"
        return Tokenizer.for_table(unit, MappingTable.load(_need(getattr(p, f"{unit}_table"), key)))
    raise CliError(f"unknown unit {unit!r}")


def model_config(cfg: rc.RunConfig, tokenizers: dict[str, Tokenizer]) -> ModelConfig:
    m = cfg.model
    taps = [TapSpec(u, layer, w, len(tokenizers[u].vocab)) for u, layer, w in rc.parse_taps(m.taps)]
    return ModelConfig(feature_dim=m.feature_dim, model_dim=m.model_dim, num_layers=m.num_layers,
                       heads=m.heads, subsample_factor=m.subsample_factor, kernel_size=m.kernel_size,
                       ff_dim=m.ff_dim, decoder_layers=m.decoder_layers, primary_unit=m.primary_unit,
                       primary_vocab_size=len(tokenizers[m.primary_unit].vocab), taps=taps,
                       aed_weight=m.aed_weight)


def _tokenizers(cfg: rc.RunConfig) -> dict[str, Tokenizer]:
    units = [cfg.model.primary_unit] + [u for u, _, _ in rc.parse_taps(cfg.model.taps)]
    return {u: build_tokenizer(cfg, u) for u in dict.fromkeys(units)}


def _check_dim(examples, mcfg: ModelConfig, source) -> None:
    for e in examples:
        if e.features.shape[1] != mcfg.feature_dim:
            raise CliError(f"{source}: {e.utt_id} has feature dim {e.features.shape[1]}, "
                           f"model.feature_dim is {mcfg.feature_dim}")


def _vocab_path(checkpoint: Path, unit: str) -> Path:
    return checkpoint.parent / f"vocab.{unit}.txt"


def _load_model(path: Path):
    mcfg, params = load_checkpoint(path)
    vpath = _vocab_path(path, mcfg.primary_unit)
    if not vpath.exists():
        raise CliError(f"{path}: missing {vpath.name} next to the checkpoint")
    vocab = UnitVocabulary.load(vpath, mcfg.primary_unit)
    if len(vocab) != mcfg.primary_vocab_size:
        raise CliError(f"{vpath}: {len(vocab)} symbols but checkpoint expects {mcfg.primary_vocab_size}")
    return mcfg, params, vocab


def _feature_rows(manifest: Path):
    return [(u, read_features(p), t) for u, p, t in read_manifest(manifest)]


# commands ----------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args, {"out": "paths.out", "seed": "synth.seed", "num_train": "synth.num_train",
                          "num_dev": "synth.num_dev", "num_test": "synth.num_test"})
    corpus = synthesize(cfg.synth)
    manifests = corpus.write(cfg.paths.out)
    for split, path in manifests.items():
        print(f"{split}\t{len(corpus.splits[split])}\t{path}")
    return 0


def cmd_train_bpe(args) -> int:
    cfg = _resolve(args, {"corpus": "paths.train", "vocab_size": "bpe.vocab_size", "out": "paths.bpe"})
    corpus = _need(cfg.paths.train, "paths.train")
    if not cfg.paths.bpe:
        raise CliError("paths.bpe is not set (the output model path; use --out)")
    bpe = train_bpe(_manifest_transcripts(corpus), cfg.bpe.vocab_size)
    out = Path(cfg.paths.bpe)
    out.parent.mkdir(parents=True, exist_ok=True)
    bpe.save(out)
    vocab = UnitVocabulary.build("wordpiece", bpe.symbols())
    vocab.save(Path(cfg.paths.bpe_vocab or str(out) + ".vocab"))
    print(f"merges\t{len(bpe.merges)}\nvocab\t{len(vocab)}")
    return 0


_TRAIN_FLAGS = {"train": "paths.train", "out": "paths.out", "steps": "train.steps", "seed": "train.seed",
                "lr": "train.lr", "batch_size": "train.batch_size", "primary_unit": "model.primary_unit",
                "taps": "model.taps", "decoder_layers": "model.decoder_layers", "oov": "model.oov"}


def cmd_train(args) -> int:
    cfg = _resolve(args, _TRAIN_FLAGS)
    toks = _tokenizers(cfg)
    mcfg = model_config(cfg, toks)
    manifest = _need(cfg.paths.train, "paths.train")
    examples = load_examples(manifest, toks, cfg.model.oov)
    _check_dim(examples, mcfg, manifest)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    params, _, rows = train_model(mcfg, examples, cfg.train)
    save_checkpoint(mcfg, params, out / "model.ckpt")
    for unit, tok in toks.items():
        tok.vocab.save(out / f"vocab.{unit}.txt")
    (out / "loss.tsv").write_text(format_loss_rows(rows, [t.key for t in mcfg.taps]), encoding="utf-8")
    (out / "run.conf").write_text(_dump_config(cfg), encoding="utf-8")
    print(f"final_total\t{rows[-1][1].total!r}\ncheckpoint\t{out / 'model.ckpt'}")
    return 0


def _dump_config(cfg: rc.RunConfig) -> str:
    lines = []
    for section, values in asdict(cfg).items():
        for key, value in values.items():
            if isinstance(value, (tuple, list)):
                value = ",".join(map(str, value))
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"


def cmd_decode(args) -> int:
    cfg = _resolve(args, {"manifest": "paths.dev", "out": "paths.out", "beam": "decode.beam",
                          "nbest": "decode.nbest"})
    ckpt = _need(args.checkpoint, "--checkpoint")
    mcfg, params, vocab = _load_model(ckpt)
    manifest = _need(cfg.paths.dev, "paths.dev")
    examples = make_examples(_feature_rows(manifest), {})
    _check_dim(examples, mcfg, manifest)
    d = cfg.decode
    if not d.beam >= d.nbest >= 1:
        raise CliError(f"need decode.beam >= decode.nbest >= 1, got {d.beam} and {d.nbest}")
    nbest = decode_examples(mcfg, params, examples, Tokenizer(vocab), d.beam, d.nbest,
                            token_limit=d.token_limit)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nbest(out / "nbest.tsv", nbest, vocab.symbol)
    write_top1(out / "top1.txt", nbest)
    print(f"utterances\t{len(nbest)}\nhypotheses\t{sum(map(len, nbest.values()))}")
    return 0


def _parse_weights(text: str | None) -> list[tuple[str, float]]:
    out = []
    for item in filter(None, (t.strip() for t in (text or "").split(","))):
        name, sep, value = item.partition("=")
        try:
            out.append((name.strip(), float(value)))
        except ValueError:
            raise CliError(f"--weights: bad item {item!r}; expected name=value") from None
        if not sep:
            raise CliError(f"--weights: bad item {item!r}; expected name=value")
    return out


def _attach(nbest, feats, name: str, mcfg, params, aux_models, cfg) -> dict[str, list[Hypothesis]]:
    """Add score ``name`` (aed, tap_<unit>, or ctc_<unit> from an auxiliary checkpoint) to every list."""
    utts = list(nbest)
    if name == "aed":
        if not mcfg.decoder_layers:
            raise CliError("score 'aed' needs a checkpoint with a decoder")
        lat = infer(mcfg, params, [feats[u] for u in utts])
        out = {}
        for u, top in zip(utts, lat.top):
            scores = aed_scores(mcfg, params, top, [h.ids for h in nbest[u]])
            out[u] = [Hypothesis(list(h.ids), {**h.scores, "aed": s}, h.text) for h, s in zip(nbest[u], scores)]
        return out
    kind, _, unit = name.partition("_")
    if kind == "tap":
        tap = mcfg.tap(unit)
        lat = infer(mcfg, params, [feats[u] for u in utts]).taps[tap.key]
    elif kind == "ctc" and unit in aux_models:
        amcfg, aparams = aux_models[unit]
        lat = infer(amcfg, aparams, [feats[u] for u in utts]).primary
    else:
        raise CliError(f"cannot compute score {name!r}: expected aed, tap_<unit>, "
                       f"or ctc_<unit> with a matching --aux-checkpoint")
    tok = build_tokenizer(cfg, unit)
    return {u: attach_aux_scores(nbest[u], lambda ids, lp=lp: ctc_label_score(lp, ids), tok.tokenize, name)
            for u, lp in zip(utts, lat)}


def cmd_rescore(args) -> int:
    cfg = _resolve(args, {"manifest": "paths.dev", "out": "paths.out"})
    mcfg, params, vocab = _load_model(_need(args.checkpoint, "--checkpoint"))
    tok = Tokenizer(vocab)
    nbest = read_nbest(_need(args.nbest, "--nbest"), vocab.id, tok.detokenize)
    first_pass = args.first_pass or f"ctc_{mcfg.primary_unit}"
    weights = _parse_weights(args.weights)
    wanted = list(dict.fromkeys([n for n, _ in weights] + [s for s in (args.scores or "").split(",") if s]))
    missing = [n for n in wanted if any(n not in h.scores for hs in nbest.values() for h in hs)]
    if missing:
        manifest = _need(cfg.paths.dev, "paths.dev")
        feats = {u: f for u, f, _ in _feature_rows(manifest)}
        absent = sorted(set(nbest) - set(feats))
        if absent:
            raise CliError(f"{manifest}: no features for {absent[:5]}")
        aux_models = {}
        for path in args.aux_checkpoint or []:
            amcfg, aparams = load_checkpoint(_need(path, "--aux-checkpoint"))
            aux_models[amcfg.primary_unit] = (amcfg, aparams)
        for name in missing:
            nbest = _attach(nbest, feats, name, mcfg, params, aux_models, cfg)
    spec = RescoreSpec(first_pass, weights, args.length_norm)
    ranked = {u: rescore(hyps, spec) for u, hyps in nbest.items()}
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nbest(out / "nbest.scored.tsv", ranked, vocab.symbol)
    write_top1(out / "top1.txt", ranked)
    print(f"utterances\t{len(ranked)}\nscores\t{','.join(wanted) or '-'}")
    return 0


def _read_refs(path: Path) -> dict[str, str]:
    """References from a manifest (3 columns) or a ``utt<TAB>text`` file."""
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise CliError(f"{path}:{lineno}: expected utt<TAB>text or a manifest row")
        out[fields[0]] = normalize_english(fields[-1])
    return out


def cmd_tune(args) -> int:
    cfg = _resolve(args, {"manifest": "paths.dev"})
    mcfg, _, vocab = _load_model(_need(args.checkpoint, "--checkpoint"))
    nbest = read_nbest(_need(args.nbest, "--nbest"), vocab.id, Tokenizer(vocab).detokenize)
    refs = _read_refs(_need(cfg.paths.dev, "paths.dev"))
    absent = sorted(set(nbest) - set(refs))
    if absent:
        raise CliError(f"{cfg.paths.dev}: no reference for {absent[:5]}")
    grid = [float(x) for x in args.grid.split(",")] if args.grid else DEFAULT_GRID
    base = RescoreSpec(args.first_pass or f"ctc_{mcfg.primary_unit}", _parse_weights(args.weights))
    dev = [(hyps, refs[u]) for u, hyps in nbest.items()]
    best, curve = tune_lambda(dev, args.score, grid, base=base, token_mode=args.mode)
    report = format_tuning_report(curve)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    print(f"best\t{best!r}")
    return 0


def cmd_eval(args) -> int:
    refs = _read_refs(_need(args.ref, "--ref"))
    hyps = _read_refs(_need(args.hyp, "--hyp"))
    counts, n = error_counts(refs, hyps, args.mode)
    rate = counts.distance / max(1, n)
    label = "WER" if args.mode == "word" else "CER"
    print(f"{label}\t{rate:.4f}\nerrors\t{counts.distance}\nref_tokens\t{n}\n"
          f"substitutions\t{counts.substitutions}\ninsertions\t{counts.insertions}\n"
          f"deletions\t{counts.deletions}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args, {**_TRAIN_FLAGS, "dev": "paths.dev", "test": "paths.test", "unit": "sweep.unit",
                          "layers": "sweep.layers", "seeds": "sweep.seeds", "weight": "sweep.weight",
                          "jobs": "sweep.jobs"})
    s = cfg.sweep
    layers, seeds = cfg.int_list(s.layers), cfg.int_list(s.seeds)
    if not seeds:
        raise CliError("sweep.seeds is empty")
    if not layers:
        raise CliError("sweep.layers is empty")
    toks = _tokenizers(cfg)
    prim = toks[cfg.model.primary_unit]
    toks[s.unit] = toks.get(s.unit) or build_tokenizer(cfg, s.unit)
    mcfg = model_config(cfg, toks)
    sets = {}
    for split in ("train", "dev", "test"):
        manifest = _need(getattr(cfg.paths, split), f"paths.{split}")
        sets[split] = load_examples(manifest, toks, cfg.model.oov)
        _check_dim(sets[split], mcfg, manifest)
    rows = run_sweep(mcfg, cfg.train, sets["train"], sets["dev"], sets["test"], prim, s.unit,
                     len(toks[s.unit].vocab), layers, seeds, s.weight, cfg.decode.beam, cfg.decode.nbest,
                     s.jobs)
    report, summary = format_sweep(rows)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.tsv").write_text(report, encoding="utf-8")
    (out / "sweep_summary.tsv").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 0


# argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="multiunit", description="Multi-unit CTC toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-dev", type=int)
    p.add_argument("--num-test", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-bpe", parents=[common], help="learn wordpiece merges from a manifest")
    p.add_argument("--corpus", help="training manifest")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out", help="merge file; the vocabulary goes to <out>.vocab")
    p.set_defaults(func=cmd_train_bpe)

    def train_flags(p):
        p.add_argument("--train")
        p.add_argument("--out")
        p.add_argument("--steps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--primary-unit")
        p.add_argument("--taps", help="unit@layer:weight,...")
        p.add_argument("--decoder-layers", type=int)
        p.add_argument("--oov", choices=("error", "skip-utterance"))

    p = sub.add_parser("train", parents=[common], help="train a model")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="first-pass prefix beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--beam", type=int)
    p.add_argument("--nbest", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("rescore", parents=[common], help="attach auxiliary scores and re-rank")
    p.add_argument("--checkpoint", required=True, help="model that produced the N-best lists")
    p.add_argument("--nbest", required=True)
    p.add_argument("--manifest", help="features of the N-best utterances")
    p.add_argument("--aux-checkpoint", action="append", help="separately trained model (repeatable)")
    p.add_argument("--scores", help="extra score names to attach without weight")
    p.add_argument("--weights", help="name=lambda,... e.g. ctc_phoneme=0.3,aed=0.5")
    p.add_argument("--first-pass")
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("tune-lambda", parents=[common], help="grid-search one rescoring weight")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nbest", required=True, help="scored N-best file")
    p.add_argument("--manifest", help="references")
    p.add_argument("--score", required=True)
    p.add_argument("--grid", help="comma-separated weights; must include 0")
    p.add_argument("--weights", help="fixed weights of the other sources")
    p.add_argument("--first-pass")
    p.add_argument("--mode", choices=("word", "char"), default="word")
    p.add_argument("--report")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", parents=[common], help="word or character error rate")
    p.add_argument("--ref", required=True, help="manifest or utt<TAB>text file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--mode", choices=("word", "char"), default="word")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="train one model per (tap layer, seed)")
    train_flags(p)
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--unit")
    p.add_argument("--layers", help="comma-separated; 0 is the no-tap baseline")
    p.add_argument("--seeds")
    p.add_argument("--weight", type=float)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"multiunit {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
