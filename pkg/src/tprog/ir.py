"""Discrete program representation.

A :class:`Program` is a layered list of attention heads and lookup MLPs that
read named variables and each write one new variable.  Categorical variables
hold integers in ``[0, cardinality)``; numerical variables hold integers in
``[0, cardinality]`` (the cardinality of a numerical variable is its largest
attainable value).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Sequence

CATEGORICAL = "categorical"
NUMERICAL = "numerical"

INPUT_PRODUCERS = ("input-token", "input-position", "input-ones")
FORMAT = "tprog-program"
FORMAT_VERSION = 1


class ProgramFormatError(ValueError):
    """Raised when a serialized program cannot be parsed."""

    def __init__(self, locus: str, message: str):
        super().__init__(f"{locus}: {message}")
        self.locus = locus


@dataclass(frozen=True)
class VariableDecl:
    name: str
    kind: str
    cardinality: int
    producer: str
    value_labels: tuple[str, ...] | None = None
    # factored token embeddings only: token index -> value
    embedding: tuple[int, ...] | None = None

    @property
    def is_input(self) -> bool:
        return self.producer in INPUT_PRODUCERS


@dataclass(frozen=True)
class Predicate:
    """Total map from query value to the single key value it matches."""

    mapping: tuple[int, ...]
    n_keys: int

    def __call__(self, q: int, k: int) -> bool:
        return self.mapping[q] == k

    @property
    def n_queries(self) -> int:
        return len(self.mapping)

    def groups(self) -> list[tuple[tuple[int, ...], int]]:
        """Queries grouped by the key they match, ordered by smallest query."""
        by_key: dict[int, list[int]] = {}
        for q, k in enumerate(self.mapping):
            by_key.setdefault(k, []).append(q)
        return sorted(((tuple(qs), k) for k, qs in by_key.items()), key=lambda g: g[0][0])


@dataclass(frozen=True)
class CatHeadSpec:
    name: str
    query: str
    key: str
    value: str
    predicate: Predicate
    output: str


@dataclass(frozen=True)
class NumHeadSpec:
    name: str
    query: str
    key: str
    value: str
    predicate: Predicate
    output: str


@dataclass(frozen=True)
class LookupMlpSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    table: Mapping[tuple[int, ...], int]
    output: str
    default: int | None = None

    def lookup(self, key: tuple[int, ...]) -> int:
        try:
            return self.table[key]
        except KeyError:
            if self.default is None:
                raise KeyError(f"{self.name}: no entry for {key}") from None
            return self.default


@dataclass(frozen=True)
class ClassifierSpec:
    classes: tuple[str, ...]
    # variable name -> rows of per-class weights; categorical variables have
    # one row per value, numerical variables a single row
    weights: Mapping[str, tuple[tuple[float, ...], ...]]
    output_mode: str = "per-token"


@dataclass(frozen=True)
class Layer:
    cat_heads: tuple[CatHeadSpec, ...] = ()
    num_heads: tuple[NumHeadSpec, ...] = ()
    mlps: tuple[LookupMlpSpec, ...] = ()

    @property
    def heads(self) -> tuple:
        return self.cat_heads + self.num_heads


@dataclass(frozen=True)
class Program:
    vocab: tuple[str, ...]
    max_len: int
    causal: bool
    k: int
    variables: Mapping[str, VariableDecl]
    layers: tuple[Layer, ...]
    classifier: ClassifierSpec
    unk: str | None = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def modules(self) -> Iterator[tuple[int, object]]:
        for i, layer in enumerate(self.layers):
            for m in layer.cat_heads + layer.num_heads + layer.mlps:
                yield i, m

    def var(self, name: str) -> VariableDecl:
        return self.variables[name]

    def replace(self, **changes) -> "Program":
        return replace(self, **changes)


def module_reads(m) -> list[tuple[str, str]]:
    """(role, variable) pairs read by a module."""
    if isinstance(m, (CatHeadSpec, NumHeadSpec)):
        return [("query", m.query), ("key", m.key), ("value", m.value)]
    return [(f"input{i}", v) for i, v in enumerate(m.inputs)]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_program(p: Program) -> list[str]:
    """Return a list of invariant violations; empty means the program is valid."""
    out: list[str] = []
    vars_ = p.variables
    for name, v in vars_.items():
        if name != v.name:
            out.append(f"variable {name}: key does not match declared name {v.name!r}")
        if v.kind not in (CATEGORICAL, NUMERICAL):
            out.append(f"variable {name}: unknown kind {v.kind!r}")
        if v.cardinality < 1:
            out.append(f"variable {name}: cardinality {v.cardinality} < 1")
        if v.value_labels is not None and len(v.value_labels) != v.cardinality:
            out.append(
                f"variable {name}: {len(v.value_labels)} value labels for cardinality {v.cardinality}"
            )
        if v.embedding is not None:
            if len(v.embedding) != len(p.vocab):
                out.append(f"variable {name}: embedding table does not cover the vocabulary")
            elif any(not 0 <= e < v.cardinality for e in v.embedding):
                out.append(f"variable {name}: embedding value out of range")

    factored = any(v.embedding is not None for v in vars_.values())
    if "tokens" not in vars_ and not factored:
        out.append("variable tokens: missing input variable")
    if "positions" not in vars_:
        out.append("variable positions: missing input variable")
    ones = [v for v in vars_.values() if v.producer == "input-ones"]
    has_numerical = any(v.kind == NUMERICAL and not v.is_input for v in vars_.values()) or any(
        layer.num_heads or any(m.kind == NUMERICAL for m in layer.mlps) for layer in p.layers
    )
    if has_numerical and len(ones) != 1:
        out.append(f"variable ones: expected exactly one numerical input, found {len(ones)}")
    for v in ones:
        if v.kind != NUMERICAL or v.cardinality != 1:
            out.append(f"variable {v.name}: ones must be numerical with bound 1")

    # producers, in layer order: name -> (layer, stage) where stage 0 is
    # attention and stage 1 is the MLP sublayer; inputs live at layer -1
    produced: dict[str, tuple[int, int]] = {}
    for name, v in vars_.items():
        if v.is_input:
            produced[name] = (-1, 1)
    for li, layer in enumerate(p.layers):
        for m in layer.heads:
            _claim(out, produced, vars_, m.name, m.output, (li, 0))
        for m in layer.mlps:
            _claim(out, produced, vars_, m.name, m.output, (li, 1))
    for name, v in vars_.items():
        if name not in produced:
            out.append(f"variable {name}: declared but never produced (producer {v.producer!r})")

    for li, layer in enumerate(p.layers):
        for m in layer.heads:
            out += _check_head(p, m, li, produced)
        for m in layer.mlps:
            out += _check_mlp(p, m, li, produced)

    out += _check_classifier(p)
    if p.max_len < 1:
        out.append(f"program: max_len {p.max_len} < 1")
    if p.unk is not None and p.unk not in p.vocab:
        out.append(f"program: unk token {p.unk!r} not in vocabulary")
    return out


def _claim(out, produced, vars_, module, var, where):
    if var not in vars_:
        out.append(f"{module}: output variable {var} is not declared")
        return
    if var in produced:
        out.append(f"{module}: variable {var} is produced more than once")
        return
    if vars_[var].producer != module:
        out.append(f"{module}: variable {var} declares producer {vars_[var].producer!r}")
    produced[var] = where


def _readable(out, name, role, var, produced, before):
    if var not in produced:
        out.append(f"{name}: {role} variable {var} is not declared")
        return False
    if produced[var] >= before:
        out.append(f"{name}: {role} variable {var} is not produced at an earlier stage (acyclicity)")
        return False
    return True


def _check_head(p: Program, m, li, produced) -> list[str]:
    out: list[str] = []
    ok = True
    for role, v in module_reads(m):
        ok &= _readable(out, m.name, role, v, produced, (li, 0))
    if not ok:
        return out
    q, k, val, o = (p.variables[x] for x in (m.query, m.key, m.value, m.output))
    for role, v in (("query", q), ("key", k)):
        if v.kind != CATEGORICAL:
            out.append(f"{m.name}: {role} variable {v.name} must be categorical")
    pred = m.predicate
    if pred.n_queries != q.cardinality:
        out.append(
            f"{m.name}: predicate defined for {pred.n_queries} of {q.cardinality} query values (totality)"
        )
    if pred.n_keys != k.cardinality:
        out.append(f"{m.name}: predicate key range {pred.n_keys} != key cardinality {k.cardinality}")
    for qv, kv in enumerate(pred.mapping):
        if not 0 <= kv < pred.n_keys:
            out.append(f"{m.name}: predicate maps query {qv} to out-of-range key {kv}")
    if isinstance(m, CatHeadSpec):
        if val.kind != CATEGORICAL:
            out.append(f"{m.name}: value variable {val.name} must be categorical")
        if o.kind != CATEGORICAL or o.cardinality != val.cardinality:
            out.append(f"{m.name}: output must be categorical with the value cardinality")
    else:
        if val.kind != NUMERICAL:
            out.append(f"{m.name}: value variable {val.name} must be numerical")
        if o.kind != NUMERICAL or o.cardinality != p.max_len * val.cardinality:
            out.append(
                f"{m.name}: output bound {o.cardinality} != max_len x value bound "
                f"{p.max_len * val.cardinality}"
            )
    return out


def _check_mlp(p: Program, m: LookupMlpSpec, li, produced) -> list[str]:
    out: list[str] = []
    ok = True
    for role, v in module_reads(m):
        ok &= _readable(out, m.name, role, v, produced, (li, 1))
    if not ok:
        return out
    if not m.inputs:
        return out + [f"{m.name}: no input variables"]
    ins = [p.variables[v] for v in m.inputs]
    if any(v.kind != m.kind for v in ins):
        out.append(f"{m.name}: all inputs must be {m.kind}")
    o = p.variables[m.output]
    if o.kind != CATEGORICAL:
        out.append(f"{m.name}: output variable must be categorical")
    sizes = [v.cardinality + (1 if v.kind == NUMERICAL else 0) for v in ins]
    for key, val in m.table.items():
        if len(key) != len(ins) or any(not 0 <= x < n for x, n in zip(key, sizes)):
            out.append(f"{m.name}: table key {key} outside the input domain")
            break
        if not 0 <= val < o.cardinality:
            out.append(f"{m.name}: table value {val} outside [0, {o.cardinality})")
            break
    if m.default is None:
        total = 1
        for n in sizes:
            total *= n
        if len(m.table) != total:
            out.append(f"{m.name}: table covers {len(m.table)} of {total} input tuples and has no default")
    elif not 0 <= m.default < o.cardinality:
        out.append(f"{m.name}: default value {m.default} outside [0, {o.cardinality})")
    return out


def _check_classifier(p: Program) -> list[str]:
    out: list[str] = []
    c = p.classifier
    if c.output_mode not in ("per-token", "mean-pooled"):
        out.append(f"classifier: unknown output mode {c.output_mode!r}")
    n = len(c.classes)
    for name, v in p.variables.items():
        if name not in c.weights:
            out.append(f"classifier: no weights for variable {name}")
            continue
        rows = c.weights[name]
        want = v.cardinality if v.kind == CATEGORICAL else 1
        if len(rows) != want or any(len(r) != n for r in rows):
            out.append(f"classifier: weights for {name} must be {want} x {n}")
    for name in c.weights:
        if name not in p.variables:
            out.append(f"classifier: weights for undeclared variable {name}")
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _var_doc(v: VariableDecl) -> dict:
    d = {"name": v.name, "kind": v.kind, "cardinality": v.cardinality, "producer": v.producer}
    if v.value_labels is not None:
        d["value_labels"] = list(v.value_labels)
    if v.embedding is not None:
        d["embedding"] = list(v.embedding)
    return d


def _head_doc(h) -> dict:
    return {
        "name": h.name,
        "query": h.query,
        "key": h.key,
        "value": h.value,
        "output": h.output,
        "predicate": list(h.predicate.mapping),
        "n_keys": h.predicate.n_keys,
    }


def _mlp_doc(m: LookupMlpSpec) -> dict:
    return {
        "name": m.name,
        "kind": m.kind,
        "inputs": list(m.inputs),
        "output": m.output,
        "default": m.default,
        "table": [[list(k), v] for k, v in sorted(m.table.items())],
    }


def to_document(p: Program) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "vocab": list(p.vocab),
        "max_len": p.max_len,
        "causal": p.causal,
        "k": p.k,
        "unk": p.unk,
        "meta": dict(p.meta),
        "variables": [_var_doc(v) for v in p.variables.values()],
        "layers": [
            {
                "cat_heads": [_head_doc(h) for h in layer.cat_heads],
                "num_heads": [_head_doc(h) for h in layer.num_heads],
                "mlps": [_mlp_doc(m) for m in layer.mlps],
            }
            for layer in p.layers
        ],
        "classifier": {
            "classes": list(p.classifier.classes),
            "output_mode": p.classifier.output_mode,
            "weights": {k: [list(r) for r in v] for k, v in p.classifier.weights.items()},
        },
    }


def serialize(p: Program) -> str:
    """Canonical JSON text: sorted keys, sorted lookup tables, one trailing newline."""
    return json.dumps(to_document(p), sort_keys=True, indent=1) + "\n"


def _get(doc, key, locus, kind=None):
    if not isinstance(doc, dict):
        raise ProgramFormatError(locus, "expected an object")
    if key not in doc:
        raise ProgramFormatError(f"{locus}.{key}" if locus else key, "missing field")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise ProgramFormatError(f"{locus}.{key}" if locus else key, f"expected {kind}")
    return val


def _parse_head(doc, locus, cls):
    g = lambda k, t=None: _get(doc, k, locus, t)  # noqa: E731
    pred = Predicate(tuple(int(x) for x in g("predicate", list)), int(g("n_keys", int)))
    return cls(
        name=g("name", str),
        query=g("query", str),
        key=g("key", str),
        value=g("value", str),
        predicate=pred,
        output=g("output", str),
    )


def _parse_mlp(doc, locus):
    g = lambda k, t=None: _get(doc, k, locus, t)  # noqa: E731
    table = {}
    for i, entry in enumerate(g("table", list)):
        if not (isinstance(entry, list) and len(entry) == 2 and isinstance(entry[0], list)):
            raise ProgramFormatError(f"{locus}.table[{i}]", "expected [[inputs...], output]")
        table[tuple(int(x) for x in entry[0])] = int(entry[1])
    default = g("default")
    return LookupMlpSpec(
        name=g("name", str),
        kind=g("kind", str),
        inputs=tuple(g("inputs", list)),
        table=table,
        output=g("output", str),
        default=None if default is None else int(default),
    )


def from_document(doc: dict) -> Program:
    if not isinstance(doc, dict):
        raise ProgramFormatError("document", "expected an object")
    if doc.get("format") != FORMAT:
        raise ProgramFormatError("format", f"not a {FORMAT} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ProgramFormatError("version", f"unsupported version {doc.get('version')!r}")
    variables = {}
    for i, vd in enumerate(_get(doc, "variables", "", list)):
        loc = f"variables[{i}]"
        labels = vd.get("value_labels") if isinstance(vd, dict) else None
        emb = vd.get("embedding") if isinstance(vd, dict) else None
        v = VariableDecl(
            name=_get(vd, "name", loc, str),
            kind=_get(vd, "kind", loc, str),
            cardinality=_get(vd, "cardinality", loc, int),
            producer=_get(vd, "producer", loc, str),
            value_labels=None if labels is None else tuple(labels),
            embedding=None if emb is None else tuple(emb),
        )
        variables[v.name] = v
    layers = []
    for i, ld in enumerate(_get(doc, "layers", "", list)):
        loc = f"layers[{i}]"
        layers.append(
            Layer(
                cat_heads=tuple(
                    _parse_head(h, f"{loc}.cat_heads[{j}]", CatHeadSpec)
                    for j, h in enumerate(_get(ld, "cat_heads", loc, list))
                ),
                num_heads=tuple(
                    _parse_head(h, f"{loc}.num_heads[{j}]", NumHeadSpec)
                    for j, h in enumerate(_get(ld, "num_heads", loc, list))
                ),
                mlps=tuple(
                    _parse_mlp(m, f"{loc}.mlps[{j}]") for j, m in enumerate(_get(ld, "mlps", loc, list))
                ),
            )
        )
    cd = _get(doc, "classifier", "", dict)
    weights = {
        name: tuple(tuple(float(x) for x in row) for row in rows)
        for name, rows in _get(cd, "weights", "classifier", dict).items()
    }
    classifier = ClassifierSpec(
        classes=tuple(_get(cd, "classes", "classifier", list)),
        weights=weights,
        output_mode=_get(cd, "output_mode", "classifier", str),
    )
    return Program(
        vocab=tuple(_get(doc, "vocab", "", list)),
        max_len=_get(doc, "max_len", "", int),
        causal=_get(doc, "causal", "", bool),
        k=_get(doc, "k", "", int),
        variables=variables,
        layers=tuple(layers),
        classifier=classifier,
        unk=doc.get("unk"),
        meta=doc.get("meta", {}),
    )


def deserialize(text: str) -> Program:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProgramFormatError(f"line {e.lineno} column {e.colno}", e.msg) from None
    return from_document(doc)


def save_program(p: Program, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(p))


def load_program(path) -> Program:
    with open(path, encoding="utf-8") as f:
        return deserialize(f.read())


# ---------------------------------------------------------------------------
# Static statistics
# ---------------------------------------------------------------------------


def read_category(p: Program, var: str) -> str:
    """Coarse origin of a variable: tokens, positions, ones, embedding, attn or mlp."""
    v = p.variables[var]
    if v.producer == "input-token":
        return "tokens" if v.embedding is None else "embedding"
    if v.producer == "input-position":
        return "positions"
    if v.producer == "input-ones":
        return "ones"
    return "mlp" if "mlp" in v.producer else "attn"


def reads_by_layer(p: Program) -> list[dict]:
    """Per layer and head kind, the fraction of heads reading each variable category per role."""
    out = []
    for layer in p.layers:
        entry = {}
        for kind, heads in (("categorical", layer.cat_heads), ("numerical", layer.num_heads)):
            if not heads:
                continue
            roles = {}
            for role in ("key", "query", "value"):
                counts: dict[str, float] = {}
                for h in heads:
                    cat = read_category(p, getattr(h, role))
                    counts[cat] = counts.get(cat, 0) + 1
                roles[role] = {c: n / len(heads) for c, n in sorted(counts.items())}
            entry[kind] = roles
        out.append(entry)
    return out


@dataclass
class ProgramStats:
    line_count_full: int
    line_count_pruned: int
    reads_by_layer: list[dict]


def program_stats(p: Program) -> ProgramStats:
    from .extract import line_counts

    full, pruned = line_counts(p)
    return ProgramStats(full, pruned, reads_by_layer(p))


def classifier_dead(p: Program, var: str) -> bool:
    rows = p.classifier.weights.get(var, ())
    return all(w == 0.0 for row in rows for w in row)

