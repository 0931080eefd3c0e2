"""Command-line entry point: ``deepstruct <command> [flags]``.

Exit codes: 0 success, 1 check failure, 2 I/O error, 3 validation or
incompatibility error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import ALPHABET, Dataset, DatasetFormatError, generate_dataset, read_dataset, write_dataset, write_manifest
from .inference import ORACLE_LIMIT, MessageSet, message_pass
from .learning import TrainingDiverged, canonical_strategy, evaluate, gradient_check, run_strategy
from .modelfile import ModelFormatError, read_model, write_model
from .oracles import run_suites
from .region_graph import evaluate_potentials, state_space_size

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_INVALID = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
DEFAULT_ORACLE_SPEC = """\
[network]
hidden = none
[graph]
variables = 5
cardinality = 6
order = 1
"""


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def split_path(directory, name: str) -> Path:
    return Path(directory) / f"{name}.dsd"


def _load_doc(path: str | None, default: str | None = None) -> cfgmod.ModelSpecDoc:
    try:
        if path is None:
            if default is None:
                return cfgmod.ModelSpecDoc()
            return cfgmod.parse(default)
        return cfgmod.load(path)
    except OSError as exc:
        raise CliError(f"cannot read spec {path}: {exc}", EXIT_IO) from None
    except cfgmod.ConfigError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INVALID) from None


def _instantiate(doc: cfgmod.ModelSpecDoc, seed: int | None = None) -> cfgmod.Instance:
    try:
        return cfgmod.instantiate(doc, seed)
    except cfgmod.ConfigError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None


def _read_data(path) -> Dataset:
    try:
        return read_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except DatasetFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    doc = _load_doc(args.spec)
    spec = doc.data if args.seed is None else replace(doc.data, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        splits = generate_dataset(spec)
        for name in SPLITS:
            write_dataset(split_path(out, name), splits[name])
        write_manifest(out / "manifest.tsv", spec, {k: len(v) for k, v in splits.items()})
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_IO) from None
    for name in SPLITS:
        _out(f"{name}\t{len(splits[name])}")
    return EXIT_OK


def _check_compatible(doc: cfgmod.ModelSpecDoc, ds: Dataset, what: str) -> None:
    g, net = doc.graph, doc.network
    if ds.word_length != g.variables:
        raise CliError(f"{what}: word length {ds.word_length} != model variables {g.variables}", EXIT_INVALID)
    if len(ds) and ds.labels.max() >= g.cardinality:
        raise CliError(f"{what}: label {ds.labels.max() + 1} exceeds cardinality {g.cardinality}", EXIT_INVALID)
    pixels = int(np.prod(ds.images.shape[2:]))
    if pixels != net.input_dim:
        raise CliError(f"{what}: {pixels} pixels per character != network input {net.input_dim}", EXIT_INVALID)


def cmd_train(args) -> int:
    doc = _load_doc(args.spec)
    overrides = {}
    if args.strategy:
        try:
            overrides["strategy"] = canonical_strategy(args.strategy)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_INVALID) from None
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        doc.train = replace(doc.train, **overrides)
    inst = _instantiate(doc)
    data_dir = Path(args.data)
    train = _read_data(split_path(data_dir, "train"))
    _check_compatible(doc, train, "train split")
    val = _read_data(split_path(data_dir, "val")) if split_path(data_dir, "val").exists() else None
    text = cfgmod.serialize(doc)
    chash = cfgmod.config_hash(doc)
    log_fh = None
    try:
        log_fh = open(args.log, "a", encoding="utf-8") if args.log else None
    except OSError as exc:
        raise CliError(f"cannot open log {args.log}: {exc}", EXIT_IO) from None

    def log(line: str) -> None:
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    algo = "blended" if args.algo == "blended" else "doubleloop"
    code = EXIT_OK
    try:
        state = run_strategy(train, inst.graph, inst.model, inst.params, doc.train, val=val, algo=algo, log=log)
        params = state.params
    except TrainingDiverged as exc:
        params = exc.last_good
        _out(f"training diverged: {exc}; writing last good parameters")
        code = EXIT_CHECK
    finally:
        if log_fh:
            log_fh.close()
    try:
        write_model(args.out, params, text, chash)
    except OSError as exc:
        raise CliError(f"cannot write model {args.out}: {exc}", EXIT_IO) from None
    if code == EXIT_OK:
        last = state.trace[-1]["objective"] if state.trace else float("nan")
        _out(f"strategy {doc.train.strategy}, {state.iteration} iterations, final batch objective {last:.6f}")
    return code


def _load_model(path) -> tuple[cfgmod.ModelSpecDoc, cfgmod.Instance]:
    try:
        mf = read_model(path)
    except OSError as exc:
        raise CliError(f"cannot read model {path}: {exc}", EXIT_IO) from None
    except ModelFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None
    try:
        doc = cfgmod.parse(mf.config_text)
    except cfgmod.ConfigError as exc:
        raise CliError(f"{path}: embedded spec invalid: {exc}", EXIT_INVALID) from None
    if cfgmod.config_hash(doc) != mf.config_hash:
        raise CliError(f"{path}: config hash does not match the embedded spec", EXIT_INVALID)
    inst = _instantiate(doc)
    if sorted(mf.params.names()) != sorted(inst.params.names()):
        raise CliError(f"{path}: stored tensors do not match the spec's parameters", EXIT_INVALID)
    for name in inst.params.names():
        if mf.params[name].shape != inst.params[name].shape:
            raise CliError(f"{path}: tensor {name} has shape {mf.params[name].shape}", EXIT_INVALID)
    inst.params = mf.params
    return doc, inst


def cmd_eval(args) -> int:
    doc, inst = _load_model(args.model)
    path = Path(args.data)
    if path.is_dir():
        path = split_path(path, "test")
    ds = _read_data(path)
    _check_compatible(doc, ds, str(path))
    acc = evaluate(ds, inst.graph, inst.model, inst.params, doc.train.epsilon, doc.train.eval_sweeps)
    _out(f"word_accuracy\t{acc['word_accuracy']:.2f}")
    _out(f"char_accuracy\t{acc['char_accuracy']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    doc = _load_doc(args.spec)
    seed = doc.train.seed if args.seed is None else args.seed
    inst = _instantiate(doc, seed)
    if state_space_size(inst.graph) > ORACLE_LIMIT:
        raise CliError(f"state space {state_space_size(inst.graph)} too large for gradcheck "
                       f"(bound {ORACLE_LIMIT})", EXIT_INVALID)
    rng = np.random.default_rng([seed, 5])
    n, N, K = args.samples, doc.graph.variables, doc.graph.cardinality
    x = rng.random((n, N, doc.network.input_dim))
    y = rng.integers(0, K, size=(n, N))
    # a few sweeps give a non-trivial, then fixed, set of multipliers
    tables = evaluate_potentials(inst.graph, inst.model, inst.params, x)
    msgs = MessageSet.zeros(inst.graph, n, doc.train.epsilon)
    message_pass(inst.graph, tables, msgs, 3)
    err, worst = gradient_check(x, y, inst.graph, inst.model, inst.params, msgs, args.h, doc.train.loss_augment)
    _out(f"max relative error {err:.3e} (worst parameter: {worst})")
    if err < args.threshold:
        return EXIT_OK
    _out(f"gradient check failed: {worst} exceeds {args.threshold:g}")
    return EXIT_CHECK


def _label(k: int, K: int) -> str:
    return ALPHABET[k] if K <= len(ALPHABET) else str(k)


def format_matrix(table: np.ndarray, top: int = 10) -> list[str]:
    """Aligned grid with letter labels plus the ``top`` largest entries."""
    Ki, Kj = table.shape
    width = max(8, max(len(f"{v:.3f}") for v in table.ravel()) + 1)
    lines = ["  " + "".join(f"{_label(j, Kj):>{width}}" for j in range(Kj))]
    for i in range(Ki):
        lines.append(f"{_label(i, Ki):>2}" + "".join(f"{table[i, j]:>{width}.3f}" for j in range(Kj)))
    order = sorted(((-table[i, j], i, j) for i in range(Ki) for j in range(Kj)))
    lines.append(f"top {min(top, len(order))}:")
    for neg, i, j in order[:top]:
        lines.append(f"{_label(i, Ki)} {_label(j, Kj)} {round(float(-neg), 6)!r}")
    return lines


def cmd_inspect(args) -> int:
    doc, inst = _load_model(args.model)
    classes = list(inst.model.pairwise)
    if args.pairwise_class is not None:
        if args.pairwise_class not in classes:
            raise CliError(f"unknown pairwise class {args.pairwise_class!r}; have {', '.join(classes) or 'none'}",
                           EXIT_INVALID)
        classes = [args.pairwise_class]
    for cls in classes:
        table, _ = inst.model.pairwise[cls].table(inst.params)
        _out(f"pairwise class {cls} ({inst.model.pairwise[cls].kind})")
        for line in format_matrix(np.asarray(table)):
            _out(line)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    doc = _load_doc(args.spec, DEFAULT_ORACLE_SPEC)
    try:
        graph = cfgmod.build_region_graph_from(doc)
    except cfgmod.ConfigError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    try:
        report = run_suites(graph, doc.train.epsilon, args.trials, 0 if args.seed is None else args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    for suite, value in sorted(report.worst.items()):
        _out(f"{suite}\tworst {value:.3e}")
    if report.passed:
        _out(f"PASS: {report.trials} instances")
        return EXIT_OK
    for seed, suite, detail in report.failures:
        _out(f"FAIL {suite} seed={seed}: {detail}")
    _out(f"{len(report.failures)} failure(s); replay one with --seed <seed> --trials 1")
    return EXIT_CHECK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepstruct", description="Deep structured models with blended learning.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help="override the seed from the spec")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "render train/val/test splits")
    p.add_argument("--spec", default=None)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model")
    p.add_argument("--spec", required=True)
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default=None)
    p.add_argument("--algo", choices=("blended", "doubleloop"), default="blended")
    p.add_argument("--log", default=None, help="append tab-separated iteration log here")
    p.add_argument("--iterations", type=int, default=None)

    p = add("eval", cmd_eval, "word and character accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="split file, or a directory (uses its test split)")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the structured objective")
    p.add_argument("--spec", required=True)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)

    p = add("inspect", cmd_inspect, "print learned pairwise tables")
    p.add_argument("--model", required=True)
    p.add_argument("--pairwise-class", default=None)

    p = add("oracle-check", cmd_oracle_check, "inference properties against enumeration")
    p.add_argument("--spec", default=None)
    p.add_argument("--trials", type=int, default=100)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr, flush=True)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
