"""Command-line pipeline: gen-corpus, train, estimate, sweep, project, report.

Every stage reads its inputs from and writes its outputs to the run's output
directory, so stages can be rerun independently.  Outputs are written to a
temporary file and renamed into place.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from lrelab import evaluation as E
from lrelab import model as M
from lrelab.checkpoint import atomic_write_text, load_model, save_model
from lrelab.config import RunConfig, load_config
from lrelab.diff import JacobianMethod
from lrelab.exceptions import ConfigError, InputError, LrelabError
from lrelab.lre import OperatorKind, estimate, save_operator
from lrelab.projection import (
    argmin_beta,
    beta_rows,
    bias_concept_cosine,
    coordinates_csv,
    gs_basis,
    projection_points,
    random_cosine_quantile,
    scatter_svg,
)
from lrelab.relations import (
    N_ICL,
    SubwordTokenizer,
    Vocab,
    parse_bats_dir,
    render_line,
    write_bats_dir,
)
from lrelab.synthetic import generate_synthetic, sample_documents
from lrelab.trainer import lm_accuracy, train, write_curve_csv

log = logging.getLogger("lrelab")

WORKERS_ENV = "LRELAB_WORKERS"

CORPUS = "corpus.txt"
VOCAB = "vocab.txt"
RELATIONS = "relations"
HELDOUT = "heldout.json"
MODEL = "model.lrel"
CURVE = "curve.csv"
TRAIN_SUMMARY = "train_summary.json"
OPERATORS = "operators"
RESULTS = "results.csv"
SUMMARY = "summary.json"
PROJECTION = "projection"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.md"


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(WORKERS_ENV, "must be at least 1")
    return n


def _map(fn, tasks):
    """Ordered map, in a process pool when more than one worker is configured."""
    workers = min(n_workers(), len(tasks))
    if workers <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise InputError(f"{path} not found; run `lrelab {stage}` first")
    return path


# ---------------------------------------------------------------------------
# loading stage outputs


def load_dataset(out: Path):
    vocab = Vocab.from_text(_need(out / VOCAB, "gen-corpus").read_text(encoding="utf-8"))
    categories = parse_bats_dir(_need(out / RELATIONS, "gen-corpus"))
    heldout = json.loads((out / HELDOUT).read_text(encoding="utf-8")) if (out / HELDOUT).exists() else {}
    return vocab, categories, heldout


def load_tokenizer(cfg: RunConfig, vocab):
    return SubwordTokenizer.from_file(cfg.data.tokenizer_path) if cfg.data.tokenizer_path else vocab


def trained_model(out: Path):
    return load_model(_need(out / MODEL, "train"))


# ---------------------------------------------------------------------------
# stages


def cmd_gen_corpus(cfg: RunConfig) -> None:
    out = cfg.output_dir
    if cfg.data.source == "synthetic":
        ds = generate_synthetic(cfg.data.synthetic, cfg.seed)
        corpus, categories, vocab, heldout = ds.corpus, ds.categories, ds.vocab, ds.heldout
    else:
        categories = parse_bats_dir(cfg.data.bats_path)
        words = []
        for cat in categories:
            for p in cat.pairs:
                for o in p.objects:
                    words += render_line(cat.template, p.subject, o)
        vocab = Vocab.build(words)
        corpus = sample_documents(categories, np.random.default_rng(cfg.seed), cfg.data.n_documents)
        heldout = {}
    atomic_write_text(out / CORPUS, "".join(line + "\n" for line in corpus))
    atomic_write_text(out / VOCAB, vocab.to_text())
    atomic_write_text(out / HELDOUT, _json({k: list(v) for k, v in heldout.items()}))
    write_bats_dir(categories, out / RELATIONS)
    log.info("wrote %d documents, %d words, %d relations", len(corpus), len(vocab), len(categories))


def _heldout_accuracy(params, vocab, categories, heldout):
    accs = {}
    for cat in categories:
        held = set(heldout.get(cat.id, ()))
        if not held:
            continue
        seen = [p for p in cat.pairs if p.subject not in held][:N_ICL]
        accs[cat.id] = lm_accuracy(params, vocab, cat, [p for p in cat.pairs if p.subject in held], seen)
    return accs


def cmd_train(cfg: RunConfig) -> None:
    out = cfg.output_dir
    vocab, categories, heldout = load_dataset(out)
    corpus = [l for l in _need(out / CORPUS, "gen-corpus").read_text(encoding="utf-8").splitlines() if l]
    mcfg = dataclasses.replace(cfg.model, vocab_size=len(vocab))
    params = M.build_model(mcfg)
    first = categories[0]

    def evaluate(p):
        accs = _heldout_accuracy(p, vocab, [first], heldout)
        return accs.get(first.id, float("nan"))

    params, curve = train(params, corpus, vocab, cfg.train, evaluate=evaluate)
    save_model(out / MODEL, params)
    atomic_write_text(out / CURVE, write_curve_csv(curve))
    atomic_write_text(out / TRAIN_SUMMARY, _json({
        "heldout_accuracy": _heldout_accuracy(params, vocab, categories, heldout),
        "steps": cfg.train.steps, "vocab_size": len(vocab)}))


def cmd_estimate(cfg: RunConfig) -> None:
    out = cfg.output_dir
    vocab, categories, _ = load_dataset(out)
    params = trained_model(out)
    index = ["relation_id,kind,layer,path\n"]
    for cat in categories:
        run = E.prepare_run(params, vocab, cat, cfg.seed, cfg.lre.n_samples)
        for layer in cfg.lre.layers:
            for kind in cfg.lre.kinds:
                op = estimate(params, vocab, cat, run.train, layer, kind, cfg.lre.beta,
                              JacobianMethod(cfg.lre.method))
                name = f"{cat.id}__{kind}__L{layer}.lrel"
                save_operator(out / OPERATORS / name, op)
                index.append(f"{cat.id},{kind},{layer},{name}\n")
    atomic_write_text(out / OPERATORS / "index.csv", "".join(index))


def _sweep_one(params, vocab, cat, cfg: RunConfig, tokenizer):
    return E.sweep(params, vocab, cat, cfg.lre.kinds, cfg.eval.layer_range, cfg.eval.n_runs,
                   cfg.lre.beta, cfg.seed, cfg.lre.n_samples, JacobianMethod(cfg.lre.method), tokenizer)


def cmd_sweep(cfg: RunConfig) -> None:
    out = cfg.output_dir
    vocab, categories, _ = load_dataset(out)
    params = trained_model(out)
    tokenizer = load_tokenizer(cfg, vocab)
    reports = _map(_sweep_one, [(params, vocab, c, cfg, tokenizer) for c in categories])
    rows, summary = [], []
    for rep in reports:
        rows += E.results_rows(rep)
        summary += list(rep.values())
    atomic_write_text(out / RESULTS, E.format_results_csv(rows))
    atomic_write_text(out / SUMMARY, E.format_summary_json(summary))


def _project_one(params, vocab, cat, cfg: RunConfig):
    layer = cfg.projection.layer if cfg.projection.layer is not None else cfg.lre.layers[0]
    run = E.prepare_run(params, vocab, cat, cfg.seed, cfg.lre.n_samples)
    op = estimate(params, vocab, cat, run.train, layer, OperatorKind.AFFINE, cfg.lre.beta,
                  JacobianMethod(cfg.lre.method))
    trans = estimate(params, vocab, cat, run.train, layer, OperatorKind.TRANSLATION)
    S = np.array([tr.x[layer][pos] for tr, pos in run.traces])
    O = np.array([tr.x[-1][-1] for tr, _ in run.traces])
    sweep_rows = []
    for seed in cfg.projection.seeds:
        basis = gs_basis(op.b, seed)
        for r in beta_rows(params, op, S, O, basis, cfg.projection.betas):
            sweep_rows.append((cat.id, seed, r))
    basis = gs_basis(op.b, cfg.projection.seeds[0])
    subjects = [p.subject for p in run.test]
    pictures = {}
    for beta in cfg.projection.betas:
        pts = projection_points(op, S, O, basis, beta)
        pictures[beta] = (scatter_svg(pts, f"{cat.id}  layer {layer}  beta {beta:g}"),
                          coordinates_csv(pts, subjects))
    cosine = (bias_concept_cosine(op, trans), random_cosine_quantile(op.b, seed=cfg.seed))
    return cat.id, sweep_rows, pictures, cosine


def cmd_project(cfg: RunConfig) -> None:
    out = cfg.output_dir
    vocab, categories, _ = load_dataset(out)
    params = trained_model(out)
    results = _map(_project_one, [(params, vocab, c, cfg) for c in categories])
    sweep_lines = ["relation_id,seed,beta,projected_distance,centroid_distance,full_distance,faithfulness\n"]
    argmin_lines = ["relation_id,seed,argmin_beta\n"]
    cos_lines = ["relation_id,bias_translation_cosine,random_abs_cosine_q99\n"]
    for cat_id, rows, pictures, (cos, q99) in results:
        by_seed = {}
        for _, seed, r in rows:
            sweep_lines.append(f"{cat_id},{seed},{r.beta!r},{r.projected_distance!r},{r.centroid_distance!r},"
                               f"{r.full_distance!r},{r.faithfulness!r}\n")
            by_seed.setdefault(seed, []).append(r)
        for seed, rs in by_seed.items():
            argmin_lines.append(f"{cat_id},{seed},{argmin_beta(rs)!r}\n")
        for beta, (svg, coords) in pictures.items():
            atomic_write_text(out / PROJECTION / f"{cat_id}__beta{beta:g}.svg", svg)
            atomic_write_text(out / PROJECTION / f"{cat_id}__beta{beta:g}.csv", coords)
        cos_lines.append(f"{cat_id},{cos!r},{q99!r}\n")
    atomic_write_text(out / PROJECTION / "beta_sweep.csv", "".join(sweep_lines))
    atomic_write_text(out / PROJECTION / "beta_argmin.csv", "".join(argmin_lines))
    atomic_write_text(out / PROJECTION / "cosine.csv", "".join(cos_lines))


def summarize_results(text: str) -> list:
    """Best-layer faithfulness per (group, relation, kind) from a results CSV.

    Each run contributes its best layer; the table holds the mean over runs,
    with rows ordered by group, relation and kind.
    """
    best = {}
    for row in csv.DictReader(io.StringIO(text)):
        key = (row["group"], row["relation_id"], row["kind"])
        run = best.setdefault(key, {})
        f = float(row["faithfulness"])
        run[row["run_seed"]] = max(run.get(row["run_seed"], f), f)
    kinds = [k.value for k in OperatorKind]
    order = lambda key: (key[0], key[1], kinds.index(key[2]) if key[2] in kinds else len(kinds), key[2])
    return [(*key, float(np.mean(list(best[key].values()))), len(best[key])) for key in sorted(best, key=order)]


def format_report(table) -> tuple:
    lines = ["group,relation_id,kind,best_layer_faithfulness,n_runs\n"]
    lines += [f"{g},{r},{k},{f!r},{n}\n" for g, r, k, f, n in table]
    md = ["| group | relation | kind | best-layer faithfulness | runs |", "|---|---|---|---|---|"]
    md += [f"| {g} | {r} | {k} | {f:.3f} | {n} |" for g, r, k, f, n in table]
    return "".join(lines), "\n".join(md) + "\n"


def cmd_report(cfg: RunConfig) -> None:
    out = cfg.output_dir
    table = summarize_results(_need(out / RESULTS, "sweep").read_text(encoding="utf-8"))
    csv_text, md = format_report(table)
    atomic_write_text(out / REPORT_CSV, csv_text)
    atomic_write_text(out / REPORT_TXT, md)
    sys.stdout.write(md)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "project": cmd_project,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.steps=100 (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        n_workers()
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"lrelab: configuration error: {exc}", file=sys.stderr)
        return 2
    except (LrelabError, OSError) as exc:
        print(f"lrelab: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
