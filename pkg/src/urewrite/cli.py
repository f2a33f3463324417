"""Command line: gen-data, train, eval, rewrite, attn-dump.

Every command takes an optional ``--config`` (TOML or JSON) with the
sections ``paths``, ``model``, ``train`` and ``synthetic``; command-line
flags override the file.  The resolved configuration is written as
``config.json`` next to the outputs and can be fed back with ``--config``.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings

import numpy as np

from .corpus import (Vocabulary, build_vocab, detokenize, load_jsonl, parse_turn_line,
                     sample_from_dict, save_jsonl, split_corpus)
from .errors import ConfigError, DataError, RewriterError
from .model import ModelConfig, OutputHead
from .synthetic import SyntheticSpec, corpus_stats, generate_synthetic
from .training import TrainConfig

log = logging.getLogger("urewrite")

RUN_DIR_ENV = "UREWRITE_RUN_DIR"

# flag dest -> config key
MODEL_FLAGS = {"head": "head", "d_model": "d_model", "n_heads": "n_heads", "n_layers": "n_layers",
               "d_ff": "d_ff", "dropout": "dropout_rate", "max_positions": "max_positions",
               "max_turns": "max_turns", "lambda_weights": "lambda_weights",
               "position_init": "position_init"}
TRAIN_FLAGS = {"lr": "learning_rate", "batch_size": "batch_size", "epochs": "max_epochs",
               "clip": "grad_clip_norm", "patience": "early_stop_patience", "seed": "seed"}
SYNTH_FLAGS = {"num_samples": "num_samples", "vocab_budget": "vocab_budget", "coref_rate": "coref_rate",
               "omission_rate": "omission_rate", "neither_rate": "neither_rate", "seed": "seed",
               "turn_range": "turn_range"}


def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.endswith(".json"):
            cfg = json.loads(raw.decode("utf-8"))
        else:
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib
            cfg = tomllib.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return cfg


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return dict(sec)


def _overlay(section, args, mapping):
    for dest, key in mapping.items():
        v = getattr(args, dest, None)
        if v is not None:
            section[key] = v
    return section


def _build(cls, section, name):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(section) - known)
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(extra)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{name}] config: {exc}") from None


def resolve_run_dir(args, paths, default):
    """Flag, then the environment override, then the config file, then ``default``."""
    d = getattr(args, "out", None) or os.environ.get(RUN_DIR_ENV) or paths.get("run_dir") or default
    try:
        os.makedirs(d, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {d}: {exc.strerror}") from None
    if not os.access(d, os.W_OK):
        raise ConfigError(f"output directory {d} is not writable")
    return d


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _need(paths, key, flag):
    v = paths.get(key)
    if not v:
        raise ConfigError(f"missing {flag} (or paths.{key} in the config)")
    return v


def _read_samples(path):
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    return load_jsonl(path)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg):
    paths = _overlay(_section(cfg, "paths"), args, {})
    synth = _overlay(_section(cfg, "synthetic"), args, SYNTH_FLAGS)
    if "turn_range" in synth:
        synth["turn_range"] = tuple(synth["turn_range"])
    spec = _build(SyntheticSpec, synth, "synthetic")
    out = resolve_run_dir(args, paths, "data")
    samples = generate_synthetic(spec)
    train, valid, test = split_corpus(samples, seed=spec.seed)
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        save_jsonl(part, os.path.join(out, f"{name}.jsonl"))
    vocab = build_vocab(train)
    vocab.save(os.path.join(out, "vocab.txt"))
    stats = corpus_stats(samples)
    stats.update(vocab_size=len(vocab), train=len(train), valid=len(valid), test=len(test))
    write_json(os.path.join(out, "stats.json"), stats)
    write_json(os.path.join(out, "config.json"),
               {"paths": {"run_dir": out}, "synthetic": dataclasses.asdict(spec)})
    print(f"wrote {len(samples)} samples to {out}: coref {100 * stats['coref_rate']:.1f}% "
          f"omission {100 * stats['omission_rate']:.1f}% neither {100 * stats['neither_rate']:.1f}% "
          f"avg rewrite length {stats['avg_rewrite_length']:.2f}")
    return 0


def cmd_train(args, cfg):
    from .model import RewriterModel
    from .training import train

    paths = _overlay(_section(cfg, "paths"), args, {"data": "data", "vocab": "vocab"})
    data = _need(paths, "data", "--data")
    vocab_path = paths.get("vocab") or os.path.join(data, "vocab.txt")
    if not os.path.exists(vocab_path):
        raise DataError(f"vocabulary file not found: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    tcfg = _build(TrainConfig, _overlay(_section(cfg, "train"), args, TRAIN_FLAGS), "train").validate()
    msec = _overlay(_section(cfg, "model"), args, MODEL_FLAGS)
    msec["vocab_size"] = len(vocab)
    mcfg = _build(ModelConfig, msec, "model").validate()
    out = resolve_run_dir(args, paths, "runs/default")

    tr = _read_samples(os.path.join(data, "train.jsonl"))
    va = _read_samples(os.path.join(data, "valid.jsonl"))
    vocab.save(os.path.join(out, "vocab.txt"))
    write_json(os.path.join(out, "config.json"), {
        "paths": {"data": data, "vocab": vocab_path, "run_dir": out},
        "model": mcfg.to_dict(), "train": dataclasses.asdict(tcfg)})
    model = RewriterModel(mcfg, seed=tcfg.seed)
    log.info("model %s with %d parameters", mcfg.head.value, model.n_parameters())
    res = train(model, vocab, tr, va, tcfg, out_dir=out, resume=args.resume,
                progress=lambda e, a, b, s: print(f"epoch {e} train {a:.4f} valid {b:.4f} ({s:.1f}s)",
                                                  flush=True))
    print(f"best epoch {res.best_epoch} valid loss {res.best_valid:.4f}; checkpoints in {out}")
    return 0


def _load_model(paths, args):
    from .checkpoint import load_checkpoint

    ckpt = _need(paths, "checkpoint", "--checkpoint")
    if not os.path.exists(ckpt):
        raise DataError(f"checkpoint not found: {ckpt}")
    vocab_path = paths.get("vocab") or os.path.join(os.path.dirname(ckpt) or ".", "vocab.txt")
    if not os.path.exists(vocab_path):
        raise DataError(f"vocabulary file not found: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    model, _, _ = load_checkpoint(ckpt, vocab=vocab)
    return model, vocab, ckpt, vocab_path


def cmd_eval(args, cfg):
    from .decoding import beam_search, ids_to_tokens
    from .metrics import evaluate
    from .model import encode_batch

    paths = _overlay(_section(cfg, "paths"), args,
                     {"checkpoint": "checkpoint", "vocab": "vocab", "test": "test"})
    test_path = _need(paths, "test", "--test")
    samples = _read_samples(test_path)
    model, vocab, ckpt, vocab_path = _load_model(paths, args)
    out = resolve_run_dir(args, paths, os.path.dirname(ckpt) or ".")
    beam = args.beam or 4
    outputs = []
    if args.oracle:
        outputs = [list(s.reference) for s in samples]
    else:
        for s in samples:
            best = beam_search(model, vocab, s, beam_size=beam)[0]
            ids = best.tokens[:-1] if best.finished else best.tokens
            oovs = encode_batch([s], vocab, model.config, with_target=False).oovs[0]
            outputs.append(ids_to_tokens(ids, vocab, oovs))
    report = evaluate(samples, outputs)
    tag = "oracle_" if args.oracle else ""
    with open(os.path.join(out, f"{tag}report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, f"{tag}report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.table())
    with open(os.path.join(out, f"{tag}outputs.txt"), "w", encoding="utf-8") as fh:
        for o in outputs:
            fh.write(" ".join(o) + "\n")
    write_json(os.path.join(out, f"{tag}eval_config.json"), {
        "paths": {"checkpoint": ckpt, "vocab": vocab_path, "test": test_path, "run_dir": out},
        "beam": beam, "oracle": bool(args.oracle)})
    sys.stdout.write(report.table())
    return 0


def read_inputs(path):
    """JSONL samples, or lines of ``turn<TAB>...<TAB>utterance``."""
    if path == "-":
        lines = sys.stdin.read().splitlines()
    else:
        if not os.path.exists(path):
            raise DataError(f"input file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    samples = []
    for k, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {k}: malformed JSON ({exc.msg})") from None
            d.setdefault("reference", d.get("utterance", []))
            samples.append(sample_from_dict(d, k))
        else:
            samples.append(parse_turn_line(line))
    return samples


def cmd_rewrite(args, cfg):
    from .decoding import rewrite, write_trace_csv

    paths = _overlay(_section(cfg, "paths"), args, {"checkpoint": "checkpoint", "vocab": "vocab"})
    model, vocab, _, _ = _load_model(paths, args)
    samples = read_inputs(args.input)
    if args.trace:
        os.makedirs(args.trace, exist_ok=True)
    lines = []
    for k, s in enumerate(samples):
        toks, trace = rewrite(model, vocab, s.history, s.utterance, beam_size=args.beam or 4)
        lines.append(detokenize(toks))
        if args.trace:
            with open(os.path.join(args.trace, f"trace_{k:05d}.csv"), "w", newline="",
                      encoding="utf-8") as fh:
                write_trace_csv(trace, fh)
    text = "".join(line + "\n" for line in lines)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_attn_dump(args, cfg):
    from .decoding import heatmap_text, rewrite, write_trace_csv

    paths = _overlay(_section(cfg, "paths"), args, {"checkpoint": "checkpoint", "vocab": "vocab"})
    model, vocab, ckpt, _ = _load_model(paths, args)
    samples = read_inputs(args.input)
    if not 0 <= args.index < len(samples):
        raise DataError(f"--index {args.index} out of range for {len(samples)} samples")
    s = samples[args.index]
    out = resolve_run_dir(args, paths, os.path.dirname(ckpt) or ".")
    _, trace = rewrite(model, vocab, s.history, s.utterance, beam_size=args.beam or 4)
    stem = os.path.join(out, f"attn_{args.index:05d}")
    with open(stem + ".csv", "w", newline="", encoding="utf-8") as fh:
        write_trace_csv(trace, fh)
    text = heatmap_text(trace)
    with open(stem + ".txt", "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    if args.png:
        _render_png(trace, stem + ".png")
    print(text)
    return 0


def _render_png(trace, path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("--png needs matplotlib (pip install 'urewrite[plot]')") from None
    att = np.asarray(trace["attention"])
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * att.shape[1]), max(3, 0.3 * att.shape[0])))
    ax.imshow(att, aspect="auto", cmap="Blues")
    ax.set_xticks(range(len(trace["input_tokens"])))
    ax.set_xticklabels(trace["input_tokens"], fontsize=7)
    ax.set_yticks(range(att.shape[0]))
    ax.set_yticklabels(trace["output_tokens"][:att.shape[0]], fontsize=7)
    with warnings.catch_warnings():
        # the default font has no CJK glyphs; boxes are fine for a quick look
        warnings.simplefilter("ignore", UserWarning)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
    plt.close(fig)


# -- parser ---------------------------------------------------------------------

def _range_pair(text):
    try:
        lo, hi = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected MIN,MAX") from None
    return (lo, hi)


def build_parser():
    p = argparse.ArgumentParser(prog="urewrite", description="Dialogue utterance rewriter.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--out", help=f"{out_help} (else ${RUN_DIR_ENV}, else the config)")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(g)
    g.add_argument("--num-samples", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--vocab-budget", type=int)
    g.add_argument("--coref-rate", type=float)
    g.add_argument("--omission-rate", type=float)
    g.add_argument("--neither-rate", type=float)
    g.add_argument("--turn-range", type=_range_pair, help="MIN,MAX turns including the utterance")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t, "run directory")
    t.add_argument("--data", help="directory with train/valid jsonl and vocab.txt")
    t.add_argument("--vocab")
    t.add_argument("--head", choices=[h.value for h in OutputHead])
    t.add_argument("--d-model", type=int)
    t.add_argument("--n-heads", type=int)
    t.add_argument("--n-layers", type=int)
    t.add_argument("--d-ff", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--max-positions", type=int)
    t.add_argument("--max-turns", type=int)
    t.add_argument("--lambda-weights", choices=["utterance", "history"])
    t.add_argument("--position-init", choices=["sinusoidal", "xavier"])
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--clip", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a test set and score it")
    common(e, "report directory")
    e.add_argument("--checkpoint")
    e.add_argument("--vocab")
    e.add_argument("--test")
    e.add_argument("--beam", type=int)
    e.add_argument("--oracle", action="store_true", help="score the references themselves")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rewrite", help="rewrite utterances from a file")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--vocab")
    r.add_argument("input", help="JSONL or TAB-separated turns ('-' for stdin)")
    r.add_argument("-o", "--output")
    r.add_argument("--beam", type=int)
    r.add_argument("--trace", help="directory for per-sample trace CSVs")
    r.set_defaults(func=cmd_rewrite)

    a = sub.add_parser("attn-dump", help="dump copy attention and λ for one sample")
    common(a)
    a.add_argument("--checkpoint")
    a.add_argument("--vocab")
    a.add_argument("input")
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--beam", type=int)
    a.add_argument("--png", action="store_true", help="also render a PNG (needs matplotlib)")
    a.set_defaults(func=cmd_attn_dump)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config_file(getattr(args, "config", None))
        return args.func(args, cfg)
    except RewriterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
