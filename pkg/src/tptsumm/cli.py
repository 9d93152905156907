"""Command-line interface.

JSON reports go to stdout, human-readable logs to stderr.  Exit codes:
0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, canonical_json, load_checkpoint, restore, save_checkpoint
from .data import (DataError, Vocabulary, build_vocab, decode_ids, encode_corpus, encode_text, read_corpus)
from .decoding import beam_search, greedy_decode
from .model import ConfigError, ModelConfig, TPTransformer, VARIANTS, count_parameters
from .rng import Rng
from .training import TrainConfig, Trainer

log = logging.getLogger("tptsumm")

DATA_DEFAULTS = {"src_len": 256, "tgt_len": 64}
DECODE_DEFAULTS = {"beam": 4, "alpha": 1.0, "max_len": 64}
CONFIG_SECTIONS = ("model", "train", "data", "decode")


# --- configuration ---------------------------------------------------------------

def load_config(path) -> dict:
    """Read a JSON config with optional ``model``/``train``/``data``/``decode`` sections."""
    cfg = {s: {} for s in CONFIG_SECTIONS}
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError("config", f"cannot read {path} ({e.strerror})") from e
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON in {path} ({e.msg})") from e
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    for key, val in raw.items():
        if key not in CONFIG_SECTIONS:
            raise ConfigError(key, "unknown config section")
        if not isinstance(val, dict):
            raise ConfigError(key, "section must be an object")
        cfg[key] = dict(val)
    for key in cfg["data"]:
        if key not in DATA_DEFAULTS:
            raise ConfigError(f"data.{key}", "unknown field")
    for key in cfg["decode"]:
        if key not in DECODE_DEFAULTS:
            raise ConfigError(f"decode.{key}", "unknown field")
    return cfg


def _model_config(cfg: dict, args, vocab_size=None) -> ModelConfig:
    m = dict(cfg["model"])
    for flag, field in (("variant", "variant"), ("layers", "layers"), ("heads", "heads"),
                        ("dmodel", "d_model"), ("nroles", "n_roles")):
        v = getattr(args, flag, None)
        if v is not None:
            m[field] = v
    if getattr(args, "dmodel", None) is not None or getattr(args, "heads", None) is not None:
        heads = m.get("heads", ModelConfig.heads)
        d_model = m.get("d_model", ModelConfig.d_model)
        if d_model % heads:
            raise ConfigError("d_model", f"{d_model} is not divisible by heads={heads}")
        m["d_k"] = m["d_role"] = d_model // heads
    if vocab_size is not None:
        m["vocab_size"] = vocab_size
    try:
        return ModelConfig.from_dict(m)
    except TypeError as e:
        raise ConfigError("model", str(e)) from e


def _train_config(cfg: dict, args) -> TrainConfig:
    t = dict(cfg["train"])
    if getattr(args, "seed", None) is not None:
        t["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        t["max_steps"] = args.steps
    return TrainConfig.from_dict(t)


def _section(cfg, name, defaults, args, flags=()):
    out = dict(defaults)
    out.update(cfg[name])
    for flag, key in flags:
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _decode_opts(cfg, args) -> dict:
    d = _section(cfg, "decode", DECODE_DEFAULTS, args,
                 (("beam", "beam"), ("alpha", "alpha"), ("max_len", "max_len")))
    if not isinstance(d["beam"], int) or d["beam"] < 1:
        raise ConfigError("beam", "must be an integer >= 1")
    if not isinstance(d["max_len"], int) or d["max_len"] < 1:
        raise ConfigError("max_len", "must be an integer >= 1")
    return d


def _emit(report: dict) -> None:
    sys.stdout.write(canonical_json(report) + "\n")
    sys.stdout.flush()


def _load_model(path):
    ckpt = load_checkpoint(path)
    try:
        model, optimizer, rng = restore(ckpt)
    except ConfigError as e:
        raise CheckpointError(f"{path}: invalid stored config ({e})") from e
    return ckpt, model, optimizer, rng


def _generate(model, ids, opts):
    if opts["beam"] == 1 and opts["alpha"] == 0.0:
        return greedy_decode(model, ids, opts["max_len"])
    return beam_search(model, ids, opts["beam"], opts["max_len"], opts["alpha"])


# --- subcommands ---------------------------------------------------------------------

def cmd_build_vocab(args, cfg):
    vocab = build_vocab(args.corpus, args.size)
    vocab.save(args.out)
    log.info("wrote %d tokens to %s", len(vocab), args.out)
    return {"command": "build-vocab", "size": len(vocab)}


def cmd_train(args, cfg):
    vocab = Vocabulary.load(args.vocab)
    data = _section(cfg, "data", DATA_DEFAULTS, args)
    examples = read_corpus(args.corpus)
    pairs = encode_corpus(examples, vocab, data["src_len"], data["tgt_len"])
    if args.resume:
        ckpt, model, optimizer, rng = _load_model(args.resume)
        tc = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else _train_config(cfg, args)
        if args.steps is not None:
            tc.max_steps = args.steps
        trainer = Trainer(model, pairs, tc, rng=rng or Rng(tc.seed), optimizer=optimizer, step=ckpt.step)
    else:
        mc = _model_config(cfg, args, vocab_size=len(vocab))
        tc = _train_config(cfg, args)
        rng = Rng(tc.seed)
        model = TPTransformer(mc, rng=rng.spawn(0))
        trainer = Trainer(model, pairs, tc, rng=rng)
    extra = {"data": data}

    def maybe_save(tr):
        if tc.checkpoint_every and tr.step % tc.checkpoint_every == 0:
            save_checkpoint(args.out, tr.model, tr.optimizer, tr.rng, tr.step, tc, extra)

    todo = max(0, tc.max_steps - trainer.step) if args.resume else tc.max_steps
    log.info("training %s for %d steps on %d examples", model.config.variant, todo, len(pairs))
    losses = trainer.train(todo, callback=maybe_save)
    save_checkpoint(args.out, trainer.model, trainer.optimizer, trainer.rng, trainer.step, tc, extra)
    report = {"command": "train", "variant": model.config.variant, "steps_run": len(losses),
              "step": trainer.step, "parameters": model.num_parameters(),
              "final_loss": losses[-1] if losses else None, "losses": losses}
    if args.report_dir:
        from .plotting import plot_loss_curve
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "loss.tsv", "w") as f:
            f.write("step\tloss\n")
            for i, l in enumerate(losses, trainer.step - len(losses) + 1):
                f.write(f"{i}\t{l:.6f}\n")
        if losses:
            plot_loss_curve(losses, d / "loss.png", f"{model.config.variant} training loss")
    return report


def _sources(args, cfg, vocab):
    data = _section(cfg, "data", DATA_DEFAULTS, args)
    examples = read_corpus(args.corpus)
    return examples, [encode_text(ex.document, vocab, data["src_len"]) for ex in examples]


def cmd_generate(args, cfg):
    vocab = Vocabulary.load(args.vocab)
    _, model, _, _ = _load_model(args.checkpoint)
    opts = _decode_opts(cfg, args)
    examples, srcs = _sources(args, cfg, vocab)
    outs = [decode_ids(_generate(model, s, opts), vocab) for s in srcs]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            for o in outs:
                f.write(json.dumps({"summary": o}) + "\n")
    return {"command": "generate", "decode": opts, "summaries": outs}


def cmd_evaluate(args, cfg):
    from .rouge import score_texts
    vocab = Vocabulary.load(args.vocab)
    _, model, _, _ = _load_model(args.checkpoint)
    opts = _decode_opts(cfg, args)
    examples, srcs = _sources(args, cfg, vocab)
    outs = [decode_ids(_generate(model, s, opts), vocab) for s in srcs]
    report = score_texts(outs, [ex.summary for ex in examples])
    sys.stderr.write(report.table() + "\n")
    if args.report_dir:
        from .plotting import plot_rouge
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "rouge.txt").write_text(report.table() + "\n")
        with open(d / "rouge.tsv", "w") as f:
            f.write("example\t" + "\t".join(f"{m}-{k}" for m in report.mean for k in "prf") + "\n")
            for i, row in enumerate(report.per_example):
                f.write(f"{i}\t" + "\t".join(f"{row[m][k]:.6f}" for m in report.mean for k in "prf") + "\n")
        plot_rouge(report.mean, d / "rouge.png")
    return {"command": "evaluate", "decode": opts, "mean": report.mean, "warnings": report.warnings,
            "per_example": report.per_example, "summaries": outs}


def cmd_probe_extract(args, cfg):
    from .probing import extract_representations, load_probe_data, save_records
    vocab = Vocabulary.load(args.vocab)
    _, model, _, _ = _load_model(args.checkpoint)
    items = load_probe_data(args.data)
    try:
        records = extract_representations(model, items, args.layer, args.site, args.binding, vocab)
    except ValueError as e:
        raise ConfigError("site" if "site" in str(e) else "layer", str(e)) from e
    save_records(args.out, records, {"layer": args.layer, "site": args.site, "binding": args.binding})
    return {"command": "probe-extract", "records": len(records), "layer": args.layer, "site": args.site,
            "binding": args.binding}


def cmd_probe_train(args, cfg):
    from .probing import load_records, train_probe
    try:
        train, dev = load_records(args.train), load_records(args.dev)
    except CheckpointError as e:
        raise DataError(str(e)) from e
    if not train or not dev:
        raise DataError("probe dumps must be non-empty")
    try:
        res = train_probe(train, dev, kind=args.head, epochs=args.epochs, seed=args.seed or 0)
    except ValueError as e:
        raise DataError(str(e)) from e
    layer, site = train[0].layer, train[0].site
    if args.report_dir:
        from .plotting import plot_probe_f1
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "probe.tsv", "w") as f:
            f.write("epoch\tdev_f1\n")
            for i, v in enumerate(res.history, 1):
                f.write(f"{i}\t{v:.6f}\n")
        plot_probe_f1([{"layer": layer, "site": site, "dev_f1": res.dev_f1}], d / "probe.png")
    return {"command": "probe-train", "layer": layer, "site": site, "head": args.head,
            "dev_f1": res.dev_f1, "train_f1": res.train_f1, "history": res.history, "labels": res.head.labels}


def cmd_analyze_roles(args, cfg):
    from .probing import role_discreteness
    vocab = Vocabulary.load(args.vocab)
    _, model, _, _ = _load_model(args.checkpoint)
    data = _section(cfg, "data", DATA_DEFAULTS, args)
    pairs = encode_corpus(read_corpus(args.corpus), vocab, data["src_len"], data["tgt_len"])
    try:
        rep = role_discreteness(model, pairs, args.layer, args.binding, args.threshold)
    except ValueError as e:
        raise ConfigError("variant" if "variant" in str(e) else "layer", str(e)) from e
    if args.report_dir:
        from .plotting import plot_role_histogram
        d = Path(args.report_dir)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "roles.tsv", "w") as f:
            f.write("bin_low\tbin_high\tcount\n")
            for lo, hi, c in zip(rep.bin_edges[:-1], rep.bin_edges[1:], rep.histogram):
                f.write(f"{lo:.2f}\t{hi:.2f}\t{c}\n")
        plot_role_histogram(rep, d / "roles.png")
    return {"command": "analyze-roles", "layer": args.layer, "binding": args.binding, **rep.to_dict()}


def cmd_count_params(args, cfg):
    if args.full_scale:
        base = ModelConfig.full_scale("baseline")
        if args.vocab_size:
            base = base.replace(vocab_size=args.vocab_size)
    else:
        base = _model_config(cfg, args, vocab_size=args.vocab_size).replace(variant="baseline")
    counts = {v: count_parameters(base.replace(variant=v)) for v in VARIANTS}
    b = counts["baseline"]["total"]
    return {"command": "count-params", "config": base.replace(variant="tpt-d").to_dict(),
            "counts": counts, "delta_vs_baseline": {v: counts[v]["total"] - b for v in VARIANTS if v != "baseline"}}


def cmd_grad_check(args, cfg):
    from .gradcheck import model_grad_check
    variants = [args.variant] if args.variant else list(VARIANTS)
    results = {v: model_grad_check(v, seed=args.seed or 0, coords_per_tensor=args.coords) for v in variants}
    ok = all(r.max_error < 1e-4 for r in results.values())
    return {"command": "grad-check", "max_rel_error": {v: r.max_error for v, r in results.items()},
            "checked": {v: r.checked for v, r in results.items()},
            "skipped_kinks": {v: r.skipped for v, r in results.items()}, "tolerance": 1e-4, "passed": ok}


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tptsumm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False, decode=False, probe=False):
        sp.add_argument("--config", help="JSON config with model/train/data/decode sections")
        sp.add_argument("--seed", type=int)
        if model:
            sp.add_argument("--variant", choices=VARIANTS)
            sp.add_argument("--layers", type=int)
            sp.add_argument("--heads", type=int)
            sp.add_argument("--dmodel", type=int)
            sp.add_argument("--nroles", type=int)
        if decode:
            sp.add_argument("--beam", type=int)
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--max-len", dest="max_len", type=int)
        if probe:
            sp.add_argument("--layer", type=int, required=True)
            sp.add_argument("--binding", default="dec.cross", choices=("enc.self", "dec.self", "dec.cross"))
        return sp

    sp = common(sub.add_parser("build-vocab", help="build a word-level vocabulary"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--size", type=int, default=8000)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_vocab)

    sp = common(sub.add_parser("train", help="train a model"), model=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--steps", type=int, help="total optimizer steps; a resumed run continues up to this count")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--report-dir", dest="report_dir")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("generate", cmd_generate, "generate summaries"),
                                 ("evaluate", cmd_evaluate, "generate and score with ROUGE")):
        sp = common(sub.add_parser(name, help=helptext), decode=True)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--vocab", required=True)
        sp.add_argument("--corpus", required=True)
        if name == "generate":
            sp.add_argument("--out")
        else:
            sp.add_argument("--report-dir", dest="report_dir")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("probe-extract", help="dump decoder representations"), probe=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--data", required=True, help="probe JSON-lines")
    sp.add_argument("--site", required=True, choices=("role", "filler", "tpr", "final"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_probe_extract)

    sp = common(sub.add_parser("probe-train", help="train a probe on dumped representations"))
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev", required=True)
    sp.add_argument("--head", choices=("mlp", "linear"), default="mlp")
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--report-dir", dest="report_dir")
    sp.set_defaults(func=cmd_probe_train)

    sp = common(sub.add_parser("analyze-roles", help="role-attention discreteness report"), probe=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--threshold", type=float, default=0.98)
    sp.add_argument("--report-dir", dest="report_dir")
    sp.set_defaults(func=cmd_analyze_roles)

    sp = common(sub.add_parser("count-params", help="parameter counts per variant"), model=True)
    sp.add_argument("--full-scale", action="store_true", help="use the 6-layer/8-head/512-dim setting")
    sp.add_argument("--vocab-size", dest="vocab_size", type=int)
    sp.set_defaults(func=cmd_count_params)

    sp = common(sub.add_parser("grad-check", help="finite-difference check of the full model"))
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--coords", type=int, default=12, help="coordinates checked per tensor")
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        report = args.func(args, cfg)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 2
    except DataError as e:
        sys.stderr.write(f"data error: {e}\n")
        return 3
    except CheckpointError as e:
        sys.stderr.write(f"checkpoint error: {e}\n")
        return 4
    _emit(report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
