"""Command-line entry point: ``fgt2m <subcommand> [--config FILE] [--section.key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigurationError, FgT2MError, InputError
from .ling_graph import RelationVocab, build_graph, load_conllu
from .toy_dataset import atomic_write_bytes, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("fgt2m")

SUBCOMMANDS = ("gen-data", "train", "sample", "eval", "parse", "plot")
METRIC_LOG_FIELDS = ("iteration", "loss", "r_top1", "r_top3", "fid")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgt2m", description="Text-to-motion diffusion on a toy corpus.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML config file")
        return sp

    sp = add("gen-data", "generate the toy dataset")
    sp.add_argument("--out", help="dataset path (default data.path)")
    sp = add("train", "train a model")
    sp.add_argument("--data", help="dataset path (default data.path)")
    sp.add_argument("--out", help="run directory (default train.out_dir)")
    sp = add("sample", "generate motions for captions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--caption", action="append", default=[])
    sp.add_argument("--conllu", help="CoNLL-U file, one prompt per sentence")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="motion dump (shape header + float32)")
    sp = add("eval", "score a checkpoint on held-out records")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset path (default data.path)")
    sp.add_argument("--out", required=True, help="report path; a .csv twin is written alongside")
    sp = add("parse", "print the dependency tree and graph statistics")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--caption")
    src.add_argument("--conllu")
    sp = add("plot", "convert metric logs to CSV and SVG charts")
    sp.add_argument("logs", nargs="+")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _split_overrides(argv):
    """Separate ``--section.key=value`` / ``--section.key value`` overrides from the rest."""
    rest, overrides, i = [], {}, 0
    while i < len(argv):
        arg = argv[i]
        key = arg[2:].split("=", 1)[0] if arg.startswith("--") else ""
        if "." in key:
            if "=" in arg:
                overrides[key] = arg.split("=", 1)[1]
            elif i + 1 < len(argv):
                overrides[key] = argv[i + 1]
                i += 1
            else:
                raise ConfigurationError(f"override {arg} has no value")
        else:
            rest.append(arg)
        i += 1
    return rest, overrides


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        rest, overrides = _split_overrides(argv)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(rest)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg) or 0
    except (FgT2MError, OSError, KeyError) as e:
        msg = e.strerror if isinstance(e, OSError) and e.strerror else str(e)
        where = f" ({e.filename})" if isinstance(e, OSError) and e.filename else ""
        print(f"error: {msg}{where}".replace("\n", " "), file=sys.stderr)
        return 1


def cmd_gen_data(args, cfg: RunConfig):
    path = args.out or cfg.data.path
    records = generate_dataset(cfg.data.records, cfg.data.frames, cfg.data.seed)
    write_dataset(path, records)
    print(f"wrote {len(records)} records to {path}")


def _load_split(cfg, path):
    from .training import split_records

    records = read_dataset(path or cfg.data.path)
    return split_records(records, cfg.data.holdout, cfg.data.seed)


def _write_metric_log(path, history):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (f"{row[k]:.6f}" if isinstance(row.get(k), float) else row.get(k, ""))
                    for k in METRIC_LOG_FIELDS})
    atomic_write_bytes(path, buf.getvalue().encode())


def cmd_train(args, cfg: RunConfig):
    from .evaluation import evaluate, fit_evaluator
    from .training import save_checkpoint, train

    train_recs, test_recs = _load_split(cfg, args.data)
    out = Path(args.out or cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "config.yaml", cfg.to_yaml().encode())
    history: list[dict] = []
    embedder = None

    def on_log(it, loss, model):
        nonlocal embedder
        row = {}
        final = it == cfg.train.iters
        if cfg.train.eval_every and (it % cfg.train.eval_every == 0 or final) and len(test_recs) >= cfg.eval.pool_size:
            if embedder is None:
                embedder = fit_evaluator(cfg, train_recs, test_recs)
            rep = evaluate(model, embedder, test_recs, cfg, repeats=1, multimodal=False)
            row = {"r_top1": rep["r_top1"], "r_top3": rep["r_top3"], "fid": rep["fid"]}
        history.append({"iteration": it, "loss": loss, **row})
        _write_metric_log(out / "metrics.csv", history)
        return row

    result = train(cfg, train_recs, on_log=on_log)
    save_checkpoint(out / "model.pt", result.model, {"iterations": result.iterations})
    print(f"trained {result.iterations} iterations in {result.seconds:.1f}s; checkpoint {out / 'model.pt'}")


def _prompt_parses(args):
    from .text_frontend import ToyGrammar, toy_parse

    vocab = RelationVocab.default()
    parses = []
    if args.conllu:
        from .ling_graph import read_conllu_sentences

        parses += read_conllu_sentences(Path(args.conllu).read_text(encoding="utf-8"), vocab)
    grammar = ToyGrammar.default()
    parses += [toy_parse(c, grammar) for c in args.caption]
    if not parses:
        raise InputError("no prompts given (use --caption or --conllu)")
    return parses


def cmd_sample(args, cfg: RunConfig):
    from .metrics import write_features
    from .model import encode_parses
    from .training import generate, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    parses = _prompt_parses(args)
    text = encode_parses(parses, model.provider, model.vocab, model.cfg.text.n_max)
    motions = generate(model, text, cfg.data.frames, args.seed).numpy()
    write_features(args.out, motions)
    for p in parses:
        print(" ".join(p.forms))
    print(f"wrote motions {motions.shape} to {args.out}")


def cmd_eval(args, cfg: RunConfig):
    from .evaluation import evaluate, fit_evaluator, write_report
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    train_recs, test_recs = _load_split(cfg, args.data)
    if len(test_recs) < cfg.eval.pool_size:
        raise InputError(f"held-out split has {len(test_recs)} records, need {cfg.eval.pool_size}")
    embedder = fit_evaluator(cfg, train_recs, test_recs)
    report = evaluate(model, embedder, test_recs, cfg)
    out = Path(args.out)
    write_report(report, out, out.with_suffix(".csv"))
    print(f"wrote report to {out}")


def cmd_parse(args, cfg: RunConfig):
    import torch

    from .text_frontend import ToyGrammar, toy_parse

    vocab = RelationVocab.default()
    if args.conllu:
        parse = load_conllu(Path(args.conllu).read_text(encoding="utf-8"), vocab)
    else:
        parse = toy_parse(args.caption, ToyGrammar.default())
    forms = parse.forms
    for i, tok in enumerate(parse.tokens):
        head = "ROOT" if tok.head < 0 else f"{tok.head + 1}:{forms[tok.head]}"
        print(f"{i + 1}\t{tok.form}\t{tok.upos}\t{tok.deprel}\t-> {head}")
    graph = build_graph(parse, torch.zeros(len(parse), 1), vocab)
    n_edges = int(graph.adjacency.sum())
    print(f"nodes={graph.n_nodes} directed_entries={n_edges} "
          f"undirected_edges={(n_edges - graph.n_nodes) // 2} self_loops={graph.n_nodes} depth={parse.depth()}")


def cmd_plot(args, cfg: RunConfig):
    from .plotting import merge_logs, write_svg_charts

    rows = merge_logs(args.logs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    fields = ["run"] + [k for k in rows[0] if k != "run"] if rows else ["run"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_bytes(out / "metrics.csv", buf.getvalue().encode())
    for path in write_svg_charts(rows, out):
        print(path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "parse": cmd_parse,
    "plot": cmd_plot,
}


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
