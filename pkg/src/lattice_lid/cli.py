"""Command-line entry point: gen-corpus, train, evaluate, align, ablate.

A run is described by one JSON config (see ``config.RunConfig``). It is
built from a preset, then an optional ``--config`` file, then ``--set
section.key=value`` overrides and command flags, then ``LATTICE_LID_SEED``.
The resolved config is copied next to every output.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, fields

from . import config as cfgmod
from .corpus import CorpusSpec, generate_corpus, load_corpus, save_corpus

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

CONFIG_NAME = "config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# -- config assembly ---------------------------------------------------

def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _parse_sets(items):
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = _parse_value(raw)
    return out


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()]


def resolve_config(args, overrides=None, environ=None):
    """Preset, then --config file, then --set, then command flags, then the env seed."""
    try:
        cfg = cfgmod.preset(args.preset)
        if args.config:
            cfg = cfgmod.RunConfig.load(args.config, base=cfg)
        layered = _parse_sets(args.set)
        for section, values in (overrides or {}).items():
            layered.setdefault(section, {}).update(values)
        if layered:
            cfg = cfg.replace(**layered)
        return cfg.with_env_seed(environ)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _write_config(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    cfg.save(os.path.join(directory, CONFIG_NAME))


def _read_corpus_or_generate(cfg, path):
    if path:
        return load_corpus(path)
    return generate_corpus(cfg.corpus, cfg.data.n_utts)


def _check_dims(cfg, utts):
    m = cfg.model
    dim = utts[0].features.shape[1]
    if dim != m.input_dim:
        raise UsageError(f"corpus features have {dim} dims but model.input_dim is {m.input_dim}; "
                         f"pass --set model.input_dim={dim}")
    top = max(max(u.tokens) for u in utts)
    if top >= m.n_vocab:
        raise UsageError(f"corpus token id {top} exceeds the model vocabulary ({m.n_vocab}); "
                         "set model.vocab_a / model.vocab_b to match the corpus")


def _select_split(cfg, utts, split):
    if split == "all":
        return utts
    train, valid, test = cfg.data.split(utts)
    return {"train": train, "valid": valid, "test": test}[split]


def _model_path(path):
    from .trainer import FINAL

    if os.path.isdir(path):
        path = os.path.join(path, FINAL)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no model at {path}")
    return path


# -- commands ----------------------------------------------------------

def cmd_gen_corpus(args):
    spec_overrides = {f.name: getattr(args, f.name) for f in fields(CorpusSpec) if getattr(args, f.name) is not None}
    overrides = {"corpus": spec_overrides}
    # keep the model's input and vocabulary sizes in step with the corpus
    synced = {"feature_dim": "input_dim", "vocab_a": "vocab_a", "vocab_b": "vocab_b"}
    model = {synced[k]: v for k, v in spec_overrides.items() if k in synced}
    if model:
        overrides["model"] = model
    if args.n_utts is not None:
        overrides["data"] = {"n_utts": args.n_utts}
    cfg = resolve_config(args, overrides)
    utts = generate_corpus(cfg.corpus, cfg.data.n_utts)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_corpus(utts, args.out, cfg.corpus)
    cfg.save(args.out + ".config.json")
    print(f"wrote {len(utts)} utterances to {args.out}")
    return EXIT_OK


def _train_overrides(args):
    model, train = {}, {}
    if args.variant is not None:
        model["variant"] = args.variant
    if args.alpha is not None:
        model["alpha"] = args.alpha
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.seed is not None:
        train["seed"] = args.seed
    return {k: v for k, v in (("model", model), ("train", train)) if v}


def cmd_train(args):
    from .trainer import train

    cfg = resolve_config(args, _train_overrides(args))
    utts = _read_corpus_or_generate(cfg, args.corpus)
    _check_dims(cfg, utts)
    train_utts, valid_utts, _ = cfg.data.split(utts)
    _write_config(cfg, args.out)
    result = train(cfg, train_utts, valid_utts, args.out, resume=args.resume,
                   log=lambda msg: print(msg, flush=True))
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"out_dir": args.out, "epochs": len(result.metrics), "val_mer": last.get("val_mer")}))
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import evaluate_model
    from .model import load_model

    overrides = {}
    if args.decoder is not None:
        overrides.setdefault("eval", {})["decoder"] = args.decoder
    if args.beam_width is not None:
        overrides.setdefault("eval", {})["beam_width"] = args.beam_width
    cfg = resolve_config(args, overrides)
    model, _ = load_model(_model_path(args.model))
    utts = _select_split(cfg, load_corpus(args.corpus), args.split or cfg.eval.split)
    e = cfg.eval
    report, _, _ = evaluate_model(model, utts, e.decoder, e.beam_width, e.tau, e.boundary_tol)
    report["n_utts"] = len(utts)
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.out:
        _write_config(cfg, os.path.dirname(os.path.abspath(args.out)))
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def cmd_align(args):
    import numpy as np

    from .evaluation import export_posteriorgram, infer
    from .model import load_model

    cfg = resolve_config(args)
    model, _ = load_model(_model_path(args.model))
    utts = _select_split(cfg, load_corpus(args.corpus), args.split or cfg.eval.split)
    if args.limit is not None:
        utts = utts[: args.limit]
    _write_config(cfg, args.out)
    inf = infer(model, utts)
    names = list(model.config.vocab.tokens)
    lid_names = list(model.config.vocab.tokens[i] for i in model.config.vocab.lid_tokens)
    for uid, lp, lid in zip(inf.ids, inf.log_posts, inf.lid_posts):
        export_posteriorgram(np.exp(lp), names, os.path.join(args.out, f"{uid}.final.csv"))
        if lid is not None:
            export_posteriorgram(lid, lid_names, os.path.join(args.out, f"{uid}.lid.csv"))
    print(f"wrote posteriorgrams for {len(utts)} utterances to {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    from .evaluation import format_ablation_table, run_ablation, write_ablation_csv

    ab = {}
    if args.alphas is not None:
        ab["alphas"] = args.alphas
    if args.seeds is not None:
        ab["seeds"] = args.seeds
    if args.variants is not None:
        ab["variants"] = args.variants
    cfg = resolve_config(args, {"ablation": ab} if ab else None)
    if not cfg.ablation.alphas or not cfg.ablation.seeds:
        raise UsageError("ablation needs at least one alpha and one seed")
    for v in cfg.ablation.variants:
        try:
            cfg.replace(model={"variant": v})
        except ValueError as exc:
            raise UsageError(f"invalid ablation variant {v!r}: {exc}") from None
    utts = _read_corpus_or_generate(cfg, args.corpus)
    _check_dims(cfg, utts)
    train_utts, valid_utts, test_utts = cfg.data.split(utts)
    _write_config(cfg, args.out)
    e = cfg.eval
    rows = run_ablation(train_utts, valid_utts, test_utts, cfg, cfg.ablation.alphas, cfg.ablation.seeds, args.out,
                        variants=cfg.ablation.variants or None, decoder=e.decoder, width=e.beam_width, tau=e.tau,
                        tol=e.boundary_tol, log=lambda msg: print(msg, flush=True))
    write_ablation_csv(rows, os.path.join(args.out, "report.csv"))
    print(format_ablation_table(rows))
    return EXIT_OK


# -- parser ------------------------------------------------------------

def _common(p):
    p.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS), help="base configuration")
    p.add_argument("--config", help="JSON config file layered over the preset")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config field (value parsed as JSON when possible)")


def build_parser():
    parser = _Parser(prog="lattice-lid", description="Code-switching CTC with non-peaky LID training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus as JSON Lines")
    _common(p)
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--n-utts", type=int, dest="n_utts")
    defaults = asdict(CorpusSpec())
    for f in fields(CorpusSpec):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(defaults[f.name]), default=None,
                       help=f"corpus {f.name} (default {defaults[f.name]})" if f.name != "seed" else "corpus seed")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model and average its best checkpoints")
    _common(p)
    p.add_argument("--corpus", help="corpus .jsonl (generated from the config when omitted)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant")
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    split_choices = ["all", "train", "valid", "test"]
    p = sub.add_parser("evaluate", help="decode a corpus split and print metrics as JSON")
    _common(p)
    p.add_argument("--model", required=True, help="checkpoint file or run directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=split_choices)
    p.add_argument("--decoder", choices=["beam", "greedy"])
    p.add_argument("--beam-width", type=int, dest="beam_width")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("align", help="export per-utterance posteriorgram CSVs")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=split_choices)
    p.add_argument("--limit", type=int, help="only the first N utterances")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("ablate", help="alpha sweep over variants and seeds, with cached cells")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", type=_float_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--variants", type=_str_list)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lattice-lid {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"lattice-lid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
