"""Program extraction: compression passes, source emission and equivalence checks.

The passes are pure ``Program -> Program`` rewrites.  None of them changes
what :func:`tprog.interp.run_program` computes; they only change how much
text :func:`emit_source` needs to describe the program.
"""

from __future__ import annotations

import csv
import itertools
import json
from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

from . import interp, ir
from .ir import CATEGORICAL, NUMERICAL, LookupMlpSpec, Program

GROUPED = "grouped_predicates"


@dataclass(frozen=True)
class EmissionOptions:
    dialect: str = "py3"
    branch_merge: bool = True
    default_fold: bool = True
    dead_code: bool = True
    type_annotate: bool = True
    width: int = 88
    prelude: bool = True

    def __post_init__(self):
        if self.dialect not in DIALECTS:
            raise ValueError(f"unknown dialect {self.dialect!r}; registered: {', '.join(sorted(DIALECTS))}")
        if self.width < 20:
            raise ValueError("line width must be at least 20")


# ---------------------------------------------------------------------------
# Passes
# ---------------------------------------------------------------------------


def compress_predicates(p: Program) -> Program:
    """Mark predicates for grouped emission: queries sharing a key become one branch."""
    return p.replace(meta={**p.meta, GROUPED: True})


def _fold_table(m: LookupMlpSpec) -> LookupMlpSpec:
    if m.default is not None or not m.table:
        # already folded; an existing default may cover tuples absent from the table
        return m
    counts = Counter(m.table.values())
    top = max(counts.values())
    default = min(v for v, c in counts.items() if c == top)
    return replace(m, table={k: v for k, v in m.table.items() if v != default}, default=default)


def _collapse_duplicate(m: LookupMlpSpec) -> LookupMlpSpec:
    if len(m.inputs) != 2 or m.inputs[0] != m.inputs[1]:
        return m
    table = {(a,): v for (a, b), v in m.table.items() if a == b}
    return replace(m, inputs=(m.inputs[0],), table=table)


def compress_mlps(p: Program) -> Program:
    """Fold the most frequent output into a default and collapse same-variable inputs."""
    layers = []
    for layer in p.layers:
        mlps = tuple(_fold_table(_collapse_duplicate(m)) for m in layer.mlps)
        layers.append(replace(layer, mlps=mlps))
    return p.replace(layers=tuple(layers))


def annotate_types(p: Program) -> Program:
    """Propagate value labels from a head's value variable to its output."""
    variables = dict(p.variables)
    for layer in p.layers:
        for h in layer.cat_heads:
            labels = variables[h.value].value_labels
            out = variables[h.output]
            if labels is None:
                variables[h.output] = replace(out, value_labels=None)
                continue
            if len(labels) != out.cardinality:
                raise ValueError(
                    f"{h.name}: {len(labels)} labels on {h.value} for an output of cardinality {out.cardinality}"
                )
            variables[h.output] = replace(out, value_labels=tuple(labels))
    return p.replace(variables=variables)


def live_variables(p: Program) -> set[str]:
    """Variables that can reach a non-zero classifier weight."""
    live = {name for name in p.variables if not ir.classifier_dead(p, name)}
    for layer in reversed(p.layers):
        for m in reversed(layer.heads + layer.mlps):
            if m.output in live:
                live.update(v for _, v in ir.module_reads(m))
    return live


def prune_dead(p: Program) -> Program:
    """Drop modules whose outputs never reach the classifier."""
    live = live_variables(p)
    keep = lambda m: m.output in live  # noqa: E731
    layers = tuple(
        ir.Layer(
            tuple(filter(keep, layer.cat_heads)),
            tuple(filter(keep, layer.num_heads)),
            tuple(filter(keep, layer.mlps)),
        )
        for layer in p.layers
    )
    dropped = {m.output for _, m in p.modules()} - live
    variables = {n: v for n, v in p.variables.items() if n not in dropped}
    weights = {n: w for n, w in p.classifier.weights.items() if n not in dropped}
    return p.replace(
        variables=variables, layers=layers, classifier=replace(p.classifier, weights=weights)
    )


def apply_passes(p: Program, opts: EmissionOptions) -> Program:
    if opts.dead_code:
        p = prune_dead(p)
    if opts.branch_merge:
        p = compress_predicates(p)
    if opts.default_fold:
        p = compress_mlps(p)
    if opts.type_annotate:
        p = annotate_types(p)
    return p


# ---------------------------------------------------------------------------
# Shared rendering helpers
# ---------------------------------------------------------------------------


def _short(var: str) -> str:
    if var == "tokens":
        return "token"
    if var == "positions":
        return "position"
    if var.endswith("_outputs"):
        return var[: -len("s")]
    return var


def _labels(p: Program, var: str, annotate: bool):
    v = p.variables[var]
    if annotate and v.kind == CATEGORICAL and v.value_labels is not None:
        return v.value_labels
    return None


def _literal(p: Program, var: str, value: int, annotate: bool) -> str:
    labels = _labels(p, var, annotate)
    return json.dumps(labels[value]) if labels is not None else str(value)


def _tuple_literal(parts: Sequence[str]) -> str:
    return parts[0] if len(parts) == 1 else "(" + ", ".join(parts) + ")"


def _predicate_branches(p: Program, h, grouped: bool, fold: bool):
    """(query literals, key literal) branches and the folded default key literal, if any."""
    pred = h.predicate
    key = lambda k: _literal(p, h.key, k, True)  # noqa: E731
    if grouped:
        groups = pred.groups()
    else:
        groups = [((q,), k) for q, k in enumerate(pred.mapping)]
    default = None
    if fold and groups:
        # the largest group becomes the fall-through branch; ties go to the earliest
        best = max(range(len(groups)), key=lambda i: (len(groups[i][0]), -i))
        default = groups[best][1]
        groups = groups[:best] + groups[best + 1 :]
    return groups, default, key


def _mlp_branches(p: Program, m: LookupMlpSpec, grouped: bool, fold: bool):
    table = dict(m.table)
    default = m.default
    if not fold and default is not None:
        # spell the default out over the full input domain
        sizes = [
            p.variables[v].cardinality + (1 if p.variables[v].kind == NUMERICAL else 0) for v in m.inputs
        ]
        for key in itertools.product(*map(range, sizes)):
            table.setdefault(key, default)
        default = None
    if grouped:
        by_out: dict[int, list] = {}
        for key, out in sorted(table.items()):
            by_out.setdefault(out, []).append(key)
        branches = sorted(((tuple(keys), out) for out, keys in by_out.items()), key=lambda b: b[0][0])
    else:
        branches = [((key,), out) for key, out in sorted(table.items())]
    return branches, default


def _wrapped(head: str, items: Sequence[str], tail: str, indent: str, width: int, brackets="{}") -> list[str]:
    """``head{a, b}tail`` on one line if it fits, else one item per line."""
    one = f"{indent}{head}{brackets[0]}{', '.join(items)}{brackets[1]}{tail}"
    if len(one) <= width:
        return [one]
    out = [f"{indent}{head}{brackets[0]}"]
    out += [f"{indent}    {item}," for item in items]
    out.append(f"{indent}{brackets[1]}{tail}")
    return out


def _arg_names(vars_: Sequence[str]) -> list[str]:
    names = [_short(v) for v in vars_]
    if len(set(names)) < len(names):
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    return names


# ---------------------------------------------------------------------------
# py3 dialect
# ---------------------------------------------------------------------------

PY3_PRELUDE = '''\
import sys


def select_closest(keys, queries, predicate):
    n = len(keys)
    out = []
    for i in range(n):
        best, best_rank = 0, None
        for j in range(i + 1 if CAUSAL else n):
            if not predicate(queries[i], keys[j]):
                continue
            rank = (n + 1, j) if j == i else (abs(i - j), j)
            if best_rank is None or rank < best_rank:
                best, best_rank = j, rank
        out.append(best)
    return out


def select(keys, queries, predicate):
    n = len(keys)
    return [
        [int(predicate(queries[i], keys[j]) and (j <= i or not CAUSAL)) for j in range(n)]
        for i in range(n)
    ]


def aggregate(pattern, values):
    return [values[j] for j in pattern]


def aggregate_sum(pattern, values):
    return [sum(values[j] for j, m in enumerate(row) if m) for row in pattern]


def _argmax(scores):
    best = 0
    for y, s in enumerate(scores):
        if s > scores[best]:
            best = y
    return best


def classify(values, n):
    index = [
        [LABELS[name].index(x) if name in LABELS else x for x in values[name]]
        for name, _ in FEATURES
    ]
    if POOLED:
        columns = []
        for (name, kind), xs in zip(FEATURES, index):
            if kind == "categorical":
                for v in range(len(WEIGHTS[name])):
                    columns.append(sum(1.0 if x == v else 0.0 for x in xs) / n)
            else:
                columns.append(sum(float(x) for x in xs) / n)
        rows = [row for name, _ in FEATURES for row in WEIGHTS[name]]
        scores = [sum(f * r[y] for f, r in zip(columns, rows)) for y in range(len(CLASSES))]
        return [CLASSES[_argmax(scores)]]
    labels = []
    for i in range(n):
        scores = [0.0] * len(CLASSES)
        for (name, kind), xs in zip(FEATURES, index):
            if kind == "categorical":
                for y, w in enumerate(WEIGHTS[name][xs[i]]):
                    scores[y] += w
            else:
                for y, w in enumerate(WEIGHTS[name][0]):
                    scores[y] += w * xs[i]
        labels.append(CLASSES[_argmax(scores)])
    return labels
'''

PY3_MAIN = '''

if __name__ == "__main__":
    for line in sys.stdin:
        if line.strip():
            print("\\t".join(run(line.split())))
'''


class _Py3:
    def __init__(self, p: Program, opts: EmissionOptions):
        self.p = p
        self.o = opts
        self.grouped = bool(p.meta.get(GROUPED))
        self.annotate = opts.type_annotate

    def lit(self, var, value):
        return _literal(self.p, var, value, self.annotate)

    def predicate(self, h, fname) -> list[str]:
        p, w = self.p, self.o.width
        qa, ka = f"q_{_short(h.query)}", f"k_{_short(h.key)}"
        lines = [f"def {fname}({qa}, {ka}):"]
        groups, default, _ = _predicate_branches(p, h, self.grouped, self.o.default_fold)
        key = lambda k: self.lit(h.key, k)  # noqa: E731
        for i, (qs, k) in enumerate(groups):
            kw = "if" if i == 0 else "elif"
            items = [self.lit(h.query, q) for q in qs]
            if len(items) == 1:
                lines.append(f"    {kw} {qa} == {items[0]}:")
            else:
                lines += _wrapped(f"{kw} {qa} in ", items, ":", "    ", w)
            lines.append(f"        return {ka} == {key(k)}")
        if default is not None:
            lines.append(f"    return {ka} == {key(default)}")
        else:
            lines.append(f"    raise ValueError({qa})")
        return lines

    def mlp(self, m: LookupMlpSpec) -> list[str]:
        p, w = self.p, self.o.width
        args = _arg_names(m.inputs)
        lines = [f"def {m.name}({', '.join(args)}):"]
        lines.append(f"    key = {_tuple_literal(args)}")
        branches, default = _mlp_branches(p, m, self.grouped, self.o.default_fold)
        for i, (keys, out) in enumerate(branches):
            items = [_tuple_literal([self.lit(v, x) for v, x in zip(m.inputs, key)]) for key in keys]
            if len(items) == 1:
                lines.append(f"    if key == {items[0]}:")
            else:
                lines += _wrapped("if key in ", items, ":", "    ", w)
            lines.append(f"        return {out}")
        if default is not None:
            lines.append(f"    return {default}")
        else:
            lines.append("    raise ValueError(key)")
        return lines

    def body(self) -> list[str]:
        p = self.p
        lines = ["def run(tokens):"]
        vocab = [json.dumps(t) for t in p.vocab]
        if p.unk is not None:
            lines.append(f"    tokens = [t if t in VOCAB else {json.dumps(p.unk)} for t in tokens]")
        else:
            lines += [
                "    for t in tokens:",
                "        if t not in VOCAB:",
                '            raise ValueError(f"out-of-vocabulary token {t!r}")',
            ]
        lines.append("    n = len(tokens)")
        for name, v in p.variables.items():
            if v.producer == "input-token":
                if v.embedding is not None:
                    lines.append(f"    {name} = [EMBEDDING[{json.dumps(name)}][VOCAB.index(t)] for t in tokens]")
                elif not self.annotate or v.value_labels is None:
                    lines.append(f"    {name} = [VOCAB.index(t) for t in tokens]")
            elif v.producer == "input-position":
                lines.append(f"    {name} = list(range(n))")
            elif v.producer == "input-ones":
                lines.append(f"    {name} = [1] * n")
        for li, layer in enumerate(p.layers):
            for h in layer.cat_heads:
                lines.append(
                    f"    {h.name}_pattern = select_closest({h.key}, {h.query}, predicate_{h.name[5:]})"
                )
                lines.append(f"    {h.output} = aggregate({h.name}_pattern, {h.value})")
            for h in layer.num_heads:
                lines.append(f"    {h.name}_pattern = select({h.key}, {h.query}, num_predicate_{h.name[9:]})")
                lines.append(f"    {h.output} = aggregate_sum({h.name}_pattern, {h.value})")
            for m in layer.mlps:
                if len(m.inputs) == 1:
                    lines.append(f"    {m.output} = [{m.name}(x) for x in {m.inputs[0]}]")
                else:
                    xs = ", ".join(f"x{i}" for i in range(len(m.inputs)))
                    lines.append(f"    {m.output} = [{m.name}({xs}) for {xs} in zip({', '.join(m.inputs)})]")
        values = [f"{json.dumps(n)}: {n}" for n in p.variables]
        lines += _wrapped("return classify(", values, ", n)", "    ", self.o.width)
        return [f"VOCAB = [{', '.join(vocab)}]"] + [""] * 2 + lines

    def tables(self) -> list[str]:
        p = self.p
        c = p.classifier
        out = [f"CAUSAL = {p.causal}", f"POOLED = {c.output_mode == 'mean-pooled'}"]
        out.append(f"CLASSES = [{', '.join(json.dumps(x) for x in c.classes)}]")
        feats = [f"({json.dumps(n)}, {json.dumps(v.kind)})" for n, v in p.variables.items()]
        out += _wrapped("FEATURES = ", feats, "", "", self.o.width, brackets="[]")
        labels = []
        for n in p.variables:
            lab = _labels(p, n, self.annotate)
            if lab is not None:
                labels.append(f"{json.dumps(n)}: [{', '.join(json.dumps(x) for x in lab)}]")
        out += _wrapped("LABELS = ", labels, "", "", self.o.width)
        emb = [
            f"{json.dumps(n)}: {list(v.embedding)}" for n, v in p.variables.items() if v.embedding is not None
        ]
        out.append("EMBEDDING = {" + ", ".join(emb) + "}")
        out.append("WEIGHTS = {")
        for n in p.variables:
            out.append(f"    {json.dumps(n)}: [")
            for row in c.weights[n]:
                out.append(f"        [{', '.join(repr(float(x)) for x in row)}],")
            out.append("    ],")
        out.append("}")
        return out

    def render(self) -> tuple[str, int]:
        """Full text and the number of program lines (no prelude, no weight tables)."""
        program: list[str] = []
        for layer in self.p.layers:
            for h in layer.cat_heads:
                program += self.predicate(h, f"predicate_{h.name[5:]}") + ["", ""]
            for h in layer.num_heads:
                program += self.predicate(h, f"num_predicate_{h.name[9:]}") + ["", ""]
            for m in layer.mlps:
                program += self.mlp(m) + ["", ""]
        program += self.body()
        parts = []
        if self.o.prelude:
            parts.append(PY3_PRELUDE)
        parts.append("\n".join(self.tables()))
        parts.append("\n".join(program))
        text = "\n\n".join(parts) + "\n"
        if self.o.prelude:
            text += PY3_MAIN
        return text, len(program)


# ---------------------------------------------------------------------------
# pseudo dialect
# ---------------------------------------------------------------------------


class _Pseudo(_Py3):
    def predicate(self, h, fname) -> list[str]:
        p, w = self.p, self.o.width
        lines = [f"predicate {fname}(q: {h.query}, k: {h.key})"]
        groups, default, _ = _predicate_branches(p, h, self.grouped, self.o.default_fold)
        for qs, k in groups:
            items = [self.lit(h.query, q) for q in qs]
            lines += _wrapped("  when q in ", items, f" => k = {self.lit(h.key, k)}", "", w)
        if default is not None:
            lines.append(f"  otherwise => k = {self.lit(h.key, default)}")
        lines.append("end")
        return lines

    def mlp(self, m: LookupMlpSpec) -> list[str]:
        p, w = self.p, self.o.width
        lines = [f"table {m.name}({', '.join(m.inputs)})"]
        branches, default = _mlp_branches(p, m, self.grouped, self.o.default_fold)
        for keys, out in branches:
            items = [_tuple_literal([self.lit(v, x) for v, x in zip(m.inputs, key)]) for key in keys]
            lines += _wrapped("  when input in ", items, f" => {out}", "", w)
        if default is not None:
            lines.append(f"  otherwise => {default}")
        lines.append("end")
        return lines

    def body(self) -> list[str]:
        p = self.p
        lines = [f"program (vocab {len(p.vocab)}, max_len {p.max_len}, causal {str(p.causal).lower()})"]
        for name, v in p.variables.items():
            if v.is_input:
                lines.append(f"  input {name} : {v.kind}")
        for li, layer in enumerate(p.layers):
            if not (layer.heads or layer.mlps):
                continue
            lines.append(f"  layer {li}")
            for h in layer.cat_heads:
                lines.append(
                    f"    {h.output} := aggregate(select_closest({h.key}, {h.query}, "
                    f"predicate_{h.name[5:]}), {h.value})"
                )
            for h in layer.num_heads:
                lines.append(
                    f"    {h.output} := aggregate_sum(select({h.key}, {h.query}, "
                    f"num_predicate_{h.name[9:]}), {h.value})"
                )
            for m in layer.mlps:
                lines.append(f"    {m.output} := {m.name}({', '.join(m.inputs)})")
        lines.append(f"  output := classify({', '.join(p.variables)})")
        lines.append("end")
        return lines

    def tables(self) -> list[str]:
        c = self.p.classifier
        out = [f"classifier ({c.output_mode}) classes {', '.join(c.classes)}"]
        for n, v in self.p.variables.items():
            for i, row in enumerate(c.weights[n]):
                label = self.lit(n, i) if v.kind == CATEGORICAL else "value"
                out.append(f"  {n} = {label} : {' '.join(repr(float(x)) for x in row)}")
        out.append("end")
        return out

    def render(self) -> tuple[str, int]:
        program: list[str] = []
        for layer in self.p.layers:
            for h in layer.cat_heads:
                program += self.predicate(h, f"predicate_{h.name[5:]}") + [""]
            for h in layer.num_heads:
                program += self.predicate(h, f"num_predicate_{h.name[9:]}") + [""]
            for m in layer.mlps:
                program += self.mlp(m) + [""]
        program += self.body()
        text = "\n".join(program) + "\n\n" + "\n".join(self.tables()) + "\n"
        return text, len(program)


DIALECTS = {"py3": _Py3, "pseudo": _Pseudo}


def _render(p: Program, opts: EmissionOptions) -> tuple[str, int]:
    problems = ir.validate_program(p)
    if problems:
        raise ValueError("invalid program: " + "; ".join(problems[:3]))
    return DIALECTS[opts.dialect](apply_passes(p, opts), opts).render()


def emit_source(p: Program, opts: EmissionOptions | None = None) -> str:
    """Readable source text for a program after the passes enabled in ``opts``."""
    return _render(p, opts or EmissionOptions())[0]


def line_counts(p: Program, width: int = 88) -> tuple[int, int]:
    """Lines of the py3 emission without and with dead-code pruning.

    Counts include the library functions (``select_closest`` and friends)
    but not the weight tables, which are data rather than program.
    """
    library = len(PY3_PRELUDE.splitlines())
    full = _render(p, EmissionOptions(dead_code=False, width=width, prelude=False))[1]
    pruned = _render(p, EmissionOptions(dead_code=True, width=width, prelude=False))[1]
    return library + full, library + pruned


def write_stats(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["task", "lines_full", "lines_pruned"], extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# Equivalence
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceReport:
    match_rate: float
    positions: int
    mismatches: int
    # (example index, position, model label, program label)
    first_mismatch: tuple[int, int, str, str] | None = None

    @property
    def passed(self) -> bool:
        return self.mismatches == 0


def verify_equivalence(model, p: Program, examples: Sequence) -> EquivalenceReport:
    """Compare the model's hard path with the interpreter on every example."""
    from .model import predict_hard

    if not examples:
        raise ValueError("empty split")
    hard = predict_hard(model, list(examples))
    total = bad = 0
    first = None
    for e_idx, (e, want) in enumerate(zip(examples, hard)):
        got = interp.predict(p, e.tokens)
        for i, (a, b) in enumerate(zip(want, got)):
            total += 1
            if a != b:
                bad += 1
                if first is None:
                    first = (e_idx, i, a, b)
    return EquivalenceReport((total - bad) / total, total, bad, first)
