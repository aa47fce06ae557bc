"""Command-line entry point: ``fnt-lab <subcommand> [options]``.

Exit status: 0 on success, 2 for a bad configuration (the message names the
key), 3 for a missing input file, 1 for any other pipeline error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fnt_lab.adaptation import adapt
from fnt_lab.config import PRESETS, RunConfig, load_config, preset
from fnt_lab.decoding import beam_decode, decode
from fnt_lab.errors import FNTError
from fnt_lab.evaluation import time_adaptation, timing_row, wer, wer_row, write_rows
from fnt_lab.experiment import (adapt_config, cell_seed, decode_options, lm_train_config,
                                make_corpus, markdown_table, model_config, run_experiment,
                                train_config, write_tables)
from fnt_lab.model import init_model, load_model, save_model
from fnt_lab.ngram import build_ngram, load_ngram, save_ngram
from fnt_lab.synthdata import read_dataset, write_dataset
from fnt_lab.tokenizer import Vocabulary, decode as detokenize, encode, load_vocabulary, save_vocabulary
from fnt_lab.training import pretrain_lm, seed_vocab_predictor, train_model

log = logging.getLogger("fnt_lab")

EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


# ---------------------------------------------------------------------------
# helpers


def _require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _read_lines(path: str | Path) -> list[str]:
    return _require(path).read_text(encoding="utf-8").splitlines()


def _write_vocab(v: Vocabulary, directory: Path) -> None:
    save_vocabulary(v, directory / "vocab.txt")
    (directory / "vocab.mode").write_text(v.mode + "\n", encoding="utf-8")


def _read_vocab(directory: str | Path) -> Vocabulary:
    directory = Path(directory)
    mode_file = directory / "vocab.mode"
    mode = mode_file.read_text(encoding="utf-8").strip() if mode_file.exists() else "word"
    return load_vocabulary(_require(directory / "vocab.txt"), mode)


def _vocab_for(path: str | Path) -> Vocabulary:
    """Vocabulary stored next to ``path`` (a directory or a file inside one)."""
    path = _require(path)
    return _read_vocab(path if path.is_dir() else path.parent)


def _strip_uid(lines: list[str]) -> list[str]:
    """Drop a leading ``uid<TAB>`` column when every line carries one."""
    if lines and all("\t" in line for line in lines):
        return [line.split("\t", 1)[1] for line in lines]
    return lines


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.ini")
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    corpus = make_corpus(cfg)
    _write_vocab(corpus.vocab, out)
    write_dataset(out, "train", corpus.train)
    write_dataset(out, "test_general", corpus.test_general)
    write_dataset(out, "test_adapt", corpus.test_adapt)
    (out / "adapt.txt").write_text("\n".join(corpus.adapt_text) + "\n", encoding="utf-8")
    (out / "lm.txt").write_text("\n".join(corpus.lm_text) + "\n", encoding="utf-8")
    print(f"wrote {len(corpus.train)} training utterances to {out}")


def cmd_pretrain_lm(args, cfg: RunConfig) -> None:
    data = _require(args.data)
    v = _read_vocab(data)
    corpus = [encode(v, line) for line in _read_lines(data / "lm.txt")]
    held = [u.tokens for u in read_dataset(_require(data / "test_general.tsv"), v)]
    out = _out_dir(args, cfg)
    mcfg = model_config(cfg, v.size, "fnt_improved")
    lm, report = pretrain_lm(corpus, mcfg, lm_train_config(cfg, cell_seed(cfg.run.seed, "lm")), held)
    save_model(lm, out)
    _write_vocab(v, out)
    (out / "lm_report.txt").write_text(f"perplexity = {report.perplexity!r}\n", encoding="utf-8")
    print(f"held-out perplexity {report.perplexity:.3f}")


def cmd_train(args, cfg: RunConfig) -> None:
    data = _require(args.data)
    v = _read_vocab(data)
    utts = read_dataset(_require(data / "train.tsv"), v)
    tcfg = train_config(cfg, cfg.run.seed)
    m = init_model(model_config(cfg, v.size), cfg.run.seed)
    if tcfg.lm_mode != "none":
        if not args.lm:
            raise FNTError("bad-config", f"train.lm_mode = {tcfg.lm_mode} needs --lm")
        m = seed_vocab_predictor(m, load_model(_require(args.lm)), tcfg.lm_mode)
    out = _out_dir(args, cfg)
    m, tlog = train_model(m, utts, tcfg)
    save_model(m, out)
    _write_vocab(v, out)
    tlog.write_csv(out / "train_log.csv")
    last = tlog.epochs[-1] if tlog.epochs else {}
    print(f"trained {m.config.variant}; final objective {last.get('total', float('nan')):.4f}")


def cmd_adapt(args, cfg: RunConfig) -> None:
    m = load_model(_require(args.model))
    v = _vocab_for(args.model)
    sentences = [encode(v, line) for line in _read_lines(args.text)]
    out = _out_dir(args, cfg)
    adapted, history = adapt(m, sentences, adapt_config(cfg, cfg.run.seed))
    save_model(adapted, out)
    _write_vocab(v, out)
    write_rows(out / "adapt_log.csv", history)
    print(f"adapted on {len(sentences)} sentences")


def cmd_build_ngram(args, cfg: RunConfig) -> None:
    v = _vocab_for(args.vocab)
    sentences = [encode(v, line) for line in _read_lines(args.text)]
    out = _out_dir(args, cfg)
    ng = build_ngram(sentences, v.size, cfg.ngram.order, cfg.ngram.discount)
    save_ngram(ng, out / "ngram.arpa")
    n_tokens = sum(len(s) for s in sentences)
    print(f"{cfg.ngram.order}-gram on {n_tokens} tokens in {ng.build_seconds:.4f} s")


def cmd_decode(args, cfg: RunConfig) -> None:
    m = load_model(_require(args.model))
    v = _vocab_for(args.model)
    utts = read_dataset(_require(args.data), v)
    ngram = load_ngram(_require(args.ngram)) if args.ngram else None
    opts = decode_options(cfg, ngram, args.w)
    out = _out_dir(args, cfg)
    hyp_lines, ref_lines, nbest_lines = [], [], []
    for u in utts:
        if args.nbest:
            hyps = beam_decode(m, u.feats, opts)
            for rank, h in enumerate(hyps, 1):
                nbest_lines.append(f"{u.uid}\t{rank}\t{h.log_score!r}\t{detokenize(v, h.tokens)}")
            best = list(hyps[0].tokens)
        else:
            best = decode(m, u.feats, opts)
        hyp_lines.append(f"{u.uid}\t{detokenize(v, best)}")
        ref_lines.append(f"{u.uid}\t{u.text}")
    (out / "hyp.txt").write_text("\n".join(hyp_lines) + "\n", encoding="utf-8")
    (out / "ref.txt").write_text("\n".join(ref_lines) + "\n", encoding="utf-8")
    if args.nbest:
        (out / "nbest.txt").write_text("\n".join(nbest_lines) + "\n", encoding="utf-8")
    print(f"decoded {len(utts)} utterances")


def cmd_score(args, cfg: RunConfig) -> None:
    refs = _strip_uid(_read_lines(args.ref))
    hyps = _strip_uid(_read_lines(args.hyp))
    report = wer(refs, hyps)
    print(f"WER {report.wer:.2f} (S={report.substitutions} D={report.deletions} "
          f"I={report.insertions} N={report.ref_words})")
    if args.out:
        out = _out_dir(args, cfg)
        write_rows(out / "wer.csv", [wer_row(Path(args.hyp).name, report)])


def cmd_bench_adapt(args, cfg: RunConfig) -> None:
    m = load_model(_require(args.model))
    v = _vocab_for(args.model)
    lines = _read_lines(args.text)
    out = _out_dir(args, cfg)
    acfg = adapt_config(cfg, cfg.run.seed)
    rows = []
    for method in ("finetune", "ngram"):
        rep = time_adaptation(m, lines, method, v, adapt_cfg=acfg, ngram_order=cfg.ngram.order,
                              discount=cfg.ngram.discount)
        rows.append(timing_row(rep))
        print(f"{method}: {rep.seconds_per_1000_words:.5f} s per 1000 words")
    write_rows(out / "timing.csv", rows)


def cmd_experiment(args, cfg: RunConfig) -> None:
    out = _out_dir(args, cfg)
    results = run_experiment(cfg, jobs=args.jobs)
    write_tables(results, out)
    print(markdown_table(results), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pretrain-lm": cmd_pretrain_lm,
    "adapt": cmd_adapt,
    "build-ngram": cmd_build_ngram,
    "decode": cmd_decode,
    "score": cmd_score,
    "bench-adapt": cmd_bench_adapt,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value file overriding the preset")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel experiment cells")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fnt-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    needs_out = {"gen-data", "train", "pretrain-lm", "adapt", "build-ngram", "decode",
                 "bench-adapt", "experiment"}
    subs = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}
    subs["train"].add_argument("--data", required=True, help="gen-data output directory")
    subs["train"].add_argument("--lm", help="external LM checkpoint for seeding")
    subs["pretrain-lm"].add_argument("--data", required=True)
    subs["adapt"].add_argument("--model", required=True)
    subs["adapt"].add_argument("--text", required=True)
    subs["build-ngram"].add_argument("--text", required=True)
    subs["build-ngram"].add_argument("--vocab", required=True, help="vocab.txt or its directory")
    subs["decode"].add_argument("--model", required=True)
    subs["decode"].add_argument("--data", required=True, help="dataset manifest (.tsv)")
    subs["decode"].add_argument("--ngram", help="n-gram file for interpolation")
    subs["decode"].add_argument("--w", type=float, help="interpolation weight")
    subs["decode"].add_argument("--nbest", action="store_true", help="beam search n-best output")
    subs["score"].add_argument("--ref", required=True)
    subs["score"].add_argument("--hyp", required=True)
    subs["bench-adapt"].add_argument("--model", required=True)
    subs["bench-adapt"].add_argument("--text", required=True)
    for name in needs_out:
        subs[name].set_defaults(out_required=True)
    return p


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if getattr(args, "out_required", False) and not args.out:
            raise FNTError("bad-config", "--out is required")
        COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except FNTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if exc.code == "bad-config" else EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
