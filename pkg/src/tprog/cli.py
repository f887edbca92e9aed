"""Command-line entry point: ``tprog <command> ... --out RUN_DIR``.

Exit codes are 0 on success, 1 on a semantic failure (equivalence mismatch
or a metric below ``--min``) and 2 on usage or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__, extract, interp, ir, tasks, train
from .model import CheckpointError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

TABLE_COLUMNS = ["Dataset", "k", "L", "H", "M", "Acc"]
DATASET_NAMES = {
    "icl": "In-context learning",
    "reverse": "Reverse",
    "hist": "Histogram",
    "hist2": "Double hist.",
    "sort": "Sort",
    "most_freq": "Most-Freq",
    "dyck1": "Dyck-1",
    "dyck2": "Dyck-2",
    "conll": "CoNLL",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _manifest(out: Path, command: str, config: dict, seeds, artifacts, start: float) -> Path:
    return _write_json(
        out / "manifest.json",
        {
            "command": command,
            "config": config,
            "seeds": list(seeds),
            "artifacts": sorted(str(a) for a in artifacts),
            "version": __version__,
            "wall_time": round(time.perf_counter() - start, 3),
        },
    )


def _load_data(path) -> tasks.Dataset:
    p = Path(path)
    if not (p / "dataset.json").is_file():
        raise FileNotFoundError(f"{p}: no dataset.json (run `tprog gen` first)")
    return tasks.Dataset.load(p)


def _split(data: tasks.Dataset, name: str):
    rows = data.splits[name]
    if not rows:
        raise UsageError(f"split {name!r} is empty")
    return rows


def _read_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _effective_config(args) -> train.TrainConfig:
    """Profile defaults, then the config file, then explicit flags."""
    d: dict = dict(train.PROFILES[args.profile])
    if args.config:
        d.update(_read_config(args.config))
    flags = {
        "epochs": args.epochs,
        "seeds": args.seeds,
        "n_layers": args.layers,
        "n_heads": args.heads,
        "n_mlps": args.mlps,
        "numerical_split": args.numerical_split,
        "train_samples": args.train_samples,
        "batch_size": args.batch_size,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    try:
        return train.TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    if args.task == "conll":
        if not args.conll:
            raise UsageError("--task conll needs --conll FILE")
        data = tasks.load_conll(args.conll, max_len=args.len or 30)
    else:
        length = args.len or (10 if args.task == "icl" else 8)
        spec = tasks.TaskSpec(args.task, args.vocab, length, args.samples, seed=args.seed)
        data = tasks.generate(spec)
    paths = data.save(out)
    config = {"task": args.task, "vocab": args.vocab, "len": args.len, "samples": args.samples, "seed": args.seed}
    _manifest(out, "gen", config, [args.seed], paths, start)
    print(f"{data.name}: {len(data.train)}/{len(data.val)}/{len(data.test)} examples, k={data.k} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    start = time.perf_counter()
    config = _effective_config(args)
    data = _load_data(args.data)
    out = _out_dir(args)
    best, program, board = train.grid_search(
        config, data, args.metric, grid=args.grid, out_dir=out, base_seed=args.base_seed
    )
    ckpt = out / "best.pt"
    save_checkpoint(best.model, ckpt, {"seed": best.seed, "config": best.config, "dataset": data.name})
    prog_path = out / "program.tp.json"
    ir.save_program(program, prog_path)
    cfg = best.config
    summary = {
        "dataset": data.name,
        "k": data.k,
        "L": cfg["n_layers"],
        "H": cfg["n_heads"],
        "M": cfg["n_mlps"],
        "seed": best.seed,
        "val": best.final_val,
        "test": best.test_metric,
        "metric": args.metric,
        "checkpoint": str(ckpt),
        "program": str(prog_path),
    }
    with open(out / "ledger.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(summary, sort_keys=True) + "\n")
    artifacts = [ckpt, prog_path, out / "ledger.jsonl", out / "runs.jsonl", out / "leaderboard.csv"]
    artifacts += [row["checkpoint"] for row in board if row["checkpoint"]]
    seeds = range(args.base_seed, args.base_seed + config.seeds)
    _manifest(out, "train", {**asdict(config), "grid": args.grid, "data": str(args.data)}, seeds, artifacts, start)
    print(f"best {summary['L']}x{summary['H']}x{summary['M']} seed {best.seed}: val {best.final_val:.4f} "
          f"test {best.test_metric:.4f}")
    return EXIT_OK


def _emission_options(args) -> extract.EmissionOptions:
    compress = not args.no_compress
    return extract.EmissionOptions(
        dialect=args.dialect,
        branch_merge=compress,
        default_fold=compress,
        dead_code=compress,
        type_annotate=not args.raw_values,
        width=args.width,
    )


def cmd_extract(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    model, extra = load_checkpoint(args.checkpoint)
    from .model import discretize

    program = discretize(model)
    opts = _emission_options(args)
    prog_path = out / "program.tp.json"
    ir.save_program(program, prog_path)
    suffix = ".py" if opts.dialect == "py3" else ".txt"
    src_path = out / f"program{suffix}"
    src_path.write_text(extract.emit_source(program, opts), encoding="utf-8")
    full, pruned = extract.line_counts(program, opts.width)
    stats_path = out / "stats.csv"
    extract.write_stats([{"task": extra.get("dataset", ""), "lines_full": full, "lines_pruned": pruned}], stats_path)
    config = {"checkpoint": str(args.checkpoint), **asdict(opts)}
    _manifest(out, "extract", config, [extra.get("seed", 0)], [prog_path, src_path, stats_path], start)
    print(f"{src_path}: {full} lines unpruned, {pruned} pruned")
    return EXIT_OK


def cmd_verify(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    model, _ = load_checkpoint(args.checkpoint)
    program = ir.load_program(args.program)
    rows = _split(_load_data(args.data), args.split)
    report = extract.verify_equivalence(model, program, rows)
    path = _write_json(out / "equivalence.json", {**asdict(report), "passed": report.passed})
    config = {"checkpoint": str(args.checkpoint), "program": str(args.program), "split": args.split}
    _manifest(out, "verify", config, [], [path], start)
    print(f"match_rate {report.match_rate:.6f} over {report.positions} positions")
    if not report.passed:
        e, i, want, got = report.first_mismatch
        print(f"first mismatch: example {e} position {i}: model {want!r}, program {got!r}")
        return EXIT_FAIL
    return EXIT_OK


def per_class_report(program: ir.Program, rows) -> list[dict]:
    counts: dict[str, list[int]] = {}
    for e in rows:
        for y, t in zip(interp.predict(program, e.tokens), e.targets):
            if t is None:
                continue
            c = counts.setdefault(t, [0, 0])
            c[0] += y == t
            c[1] += 1
    return [
        {"class": t, "correct": c, "total": n, "accuracy": c / n} for t, (c, n) in sorted(counts.items())
    ]


def cmd_eval(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    program = ir.load_program(args.program)
    rows = _split(_load_data(args.data), args.split)
    value = train.evaluate(program, rows, args.metric)
    classes = per_class_report(program, rows)
    path = _write_json(out / "eval.json", {"metric": args.metric, "split": args.split, "value": value,
                                           "per_class": classes})
    config = {"program": str(args.program), "split": args.split, "metric": args.metric, "min": args.min}
    _manifest(out, "eval", config, [], [path], start)
    print(f"{args.metric} {value:.4f}")
    for row in classes:
        print(f"  {row['class']}\t{row['correct']}/{row['total']}\t{row['accuracy']:.4f}")
    if args.min is not None and value < args.min:
        print(f"below gate {args.min}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_stats(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    rows = []
    for path in args.programs:
        program = ir.load_program(path)
        full, pruned = extract.line_counts(program, args.width)
        rows.append({"task": Path(path).stem.split(".")[0] if args.names is None else None,
                     "lines_full": full, "lines_pruned": pruned})
    if args.names is not None:
        if len(args.names) != len(rows):
            raise UsageError("--names needs one name per program")
        for row, name in zip(rows, args.names):
            row["task"] = name
    path = out / "stats.csv"
    extract.write_stats(rows, path)
    _manifest(out, "stats", {"programs": [str(p) for p in args.programs], "width": args.width}, [], [path], start)
    for row in rows:
        print(f"{row['task']}\t{row['lines_full']}\t{row['lines_pruned']}")
    return EXIT_OK


def _ledger_rows(paths) -> list[dict]:
    rows = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            path = path / "ledger.jsonl"
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError:
                    raise UsageError(f"{path}:{lineno}: not a JSON line") from None
    return rows


def dump_weights(program: ir.Program, path: Path) -> None:
    """Classifier weights as (variable, value, class, weight) rows."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["variable", "value", "class", "weight"])
        for name, v in program.variables.items():
            for i, row in enumerate(program.classifier.weights[name]):
                label = interp.value_label(program, name, i) if v.kind == ir.CATEGORICAL else "x"
                for cls, weight in zip(program.classifier.classes, row):
                    w.writerow([name, label, cls, repr(float(weight))])


def cmd_report(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    rows = _ledger_rows(args.ledgers)
    table = out / "table.csv"
    artifacts = [table]
    with open(table, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            acc = r.get("test")
            w.writerow({
                "Dataset": DATASET_NAMES.get(r["dataset"], r["dataset"]),
                "k": r["k"],
                "L": r["L"],
                "H": r["H"],
                "M": r["M"],
                "Acc": "" if acc is None else f"{100 * acc:.2f}",
            })
    if args.weights:
        for r in rows:
            if r.get("program") and Path(r["program"]).is_file():
                path = out / f"weights_{r['dataset']}_seed{r['seed']}.csv"
                dump_weights(ir.load_program(r["program"]), path)
                artifacts.append(path)
    _manifest(out, "report", {"ledgers": [str(p) for p in args.ledgers]}, [], artifacts, start)
    print(table.read_text(encoding="utf-8"), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tprog", description="Train, extract and check discrete transformer programs.")
    parser.add_argument("--version", action="version", version=f"tprog {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a task dataset")
    g.add_argument("--task", required=True, choices=tasks.TASKS)
    g.add_argument("--vocab", type=int, default=8, help="content vocabulary size")
    g.add_argument("--len", type=int, default=None, help="maximum input length")
    g.add_argument("--samples", type=int, default=20_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--conll", help="CoNLL file for --task conll")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train (and grid-search) on a generated dataset")
    t.add_argument("--data", required=True, help="directory written by `tprog gen`")
    t.add_argument("--config", help="JSON file of training options")
    t.add_argument("--profile", choices=sorted(train.PROFILES), default="paper")
    t.add_argument("--grid", action="store_true", help="search the layer/head/MLP grid")
    t.add_argument("--seeds", type=int)
    t.add_argument("--base-seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--train-samples", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--mlps", type=int)
    t.add_argument("--numerical-split", choices=["even", "none"])
    t.add_argument("--metric", choices=["token-accuracy", "span-f1"], default="token-accuracy")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="discretize a checkpoint and emit source")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dialect", choices=sorted(extract.DIALECTS), default="py3")
    e.add_argument("--no-compress", action="store_true", help="skip merging, folding and pruning")
    e.add_argument("--raw-values", action="store_true", help="print integer values instead of labels")
    e.add_argument("--width", type=int, default=88)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("verify", help="check a program against its checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--program", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", choices=["train", "val", "test"], default="test")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify)

    ev = sub.add_parser("eval", help="score a program on a split")
    ev.add_argument("--program", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    ev.add_argument("--metric", choices=["token-accuracy", "span-f1"], default="token-accuracy")
    ev.add_argument("--min", type=float, help="exit 1 when the metric falls below this")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="line counts of emitted programs")
    s.add_argument("programs", nargs="+")
    s.add_argument("--names", nargs="+", help="row names (default: file stems)")
    s.add_argument("--width", type=int, default=88)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    r = sub.add_parser("report", help="summary table over run ledgers")
    r.add_argument("ledgers", nargs="+", help="ledger.jsonl files or train run directories")
    r.add_argument("--weights", action="store_true", help="also dump classifier weights per run")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"tprog: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"tprog {args.command}: error: {e}", file=sys.stderr)
    except (OSError, CheckpointError, ir.ProgramFormatError, ValueError) as e:
        print(f"tprog {args.command}: {e}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
