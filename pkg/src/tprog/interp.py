"""Exact reference semantics for discrete programs.

These functions are deliberately plain Python: they are the oracle the
relaxed model and the extraction passes are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

from .ir import CATEGORICAL, NUMERICAL, LookupMlpSpec, Program

PredicateFn = Callable[[int, int], bool]


def _check_lengths(keys, queries):
    if len(keys) == 0 or len(queries) == 0:
        raise ValueError("empty input")
    if len(keys) != len(queries):
        raise ValueError(f"{len(keys)} keys but {len(queries)} queries")


def select(keys: Sequence, queries: Sequence, predicate: PredicateFn, causal: bool = False) -> list[list[int]]:
    """Binary attention matrix ``M[i][j] = predicate(queries[i], keys[j])``."""
    _check_lengths(keys, queries)
    n = len(keys)
    return [
        [int(predicate(queries[i], keys[j]) and (j <= i or not causal)) for j in range(n)]
        for i in range(n)
    ]


def select_closest(
    keys: Sequence, queries: Sequence, predicate: PredicateFn, causal: bool = False, max_len: int | None = None
) -> list[int]:
    """For each query, the nearest matching key position.

    Matching keys other than the query itself are preferred by distance, and
    the earlier position wins an equal-distance tie.  A lone self-match is
    used only when nothing else matches; with no match at all the query
    attends to position 0.
    """
    _check_lengths(keys, queries)
    n = len(keys)
    if max_len is not None and n > max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {max_len}")
    out = []
    for i in range(n):
        best, best_rank = 0, None
        for j in range(i + 1 if causal else n):
            if not predicate(queries[i], keys[j]):
                continue
            rank = (n + 1, j) if j == i else (abs(i - j), j)
            if best_rank is None or rank < best_rank:
                best, best_rank = j, rank
        out.append(best)
    return out


def aggregate(indices: Sequence[int], values: Sequence) -> list:
    return [values[j] for j in indices]


def aggregate_sum(matrix: Sequence[Sequence[int]], values: Sequence[int]) -> list[int]:
    return [sum(values[j] for j, m in enumerate(row) if m) for row in matrix]


def apply_mlp(
    spec: LookupMlpSpec, inputs: Sequence[tuple[int, ...]], bounds: Sequence[int] | None = None
) -> list[int]:
    """Look up each input tuple; ``bounds`` are the inclusive maxima of the inputs."""
    out = []
    for key in inputs:
        key = tuple(key)
        if bounds is not None:
            for x, b in zip(key, bounds):
                if not 0 <= x <= b:
                    raise ValueError(f"{spec.name}: bound exceeded ({x} not in [0, {b}])")
        out.append(spec.lookup(key))
    return out


@dataclass
class ExecutionTrace:
    values: dict[str, list[int]] = field(default_factory=dict)
    # categorical heads: attended position per query; numerical heads: match matrix
    attention: dict[str, list] = field(default_factory=dict)
    features: list[list[float]] = field(default_factory=list)
    scores: list[list[float]] = field(default_factory=list)


def encode(p: Program, tokens: Sequence[str]) -> list[int]:
    index = {t: i for i, t in enumerate(p.vocab)}
    out = []
    for t in tokens:
        if t in index:
            out.append(index[t])
        elif p.unk is not None:
            out.append(index[p.unk])
        else:
            raise ValueError(f"out-of-vocabulary token {t!r}")
    return out


def _input_values(p: Program, ids: Sequence[int]) -> dict[str, list[int]]:
    values = {}
    for name, v in p.variables.items():
        if v.producer == "input-token":
            values[name] = list(ids) if v.embedding is None else [v.embedding[t] for t in ids]
        elif v.producer == "input-position":
            values[name] = list(range(len(ids)))
        elif v.producer == "input-ones":
            values[name] = [1] * len(ids)
    return values


def execute(p: Program, ids: Sequence[int]) -> ExecutionTrace:
    """Run every layer on encoded token ids and return the trace (no scoring)."""
    n = len(ids)
    if n == 0:
        raise ValueError("empty input")
    if n > p.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {p.max_len}")
    trace = ExecutionTrace(values=_input_values(p, ids))
    vals = trace.values
    for layer in p.layers:
        for h in layer.cat_heads:
            idx = select_closest(vals[h.key], vals[h.query], h.predicate, p.causal, p.max_len)
            trace.attention[h.name] = idx
            vals[h.output] = aggregate(idx, vals[h.value])
        for h in layer.num_heads:
            m = select(vals[h.key], vals[h.query], h.predicate, p.causal)
            trace.attention[h.name] = m
            vals[h.output] = aggregate_sum(m, vals[h.value])
        for m in layer.mlps:
            bounds = [_domain_max(p, v) for v in m.inputs]
            vals[m.output] = apply_mlp(m, list(zip(*(vals[v] for v in m.inputs))), bounds)
    return trace


def _domain_max(p: Program, name: str) -> int:
    v = p.variables[name]
    return v.cardinality if v.kind == NUMERICAL else v.cardinality - 1


def position_scores(p: Program, values: dict[str, list[int]], i: int) -> list[float]:
    c = p.classifier
    scores = [0.0] * len(c.classes)
    for name, v in p.variables.items():
        if v.kind == CATEGORICAL:
            row = c.weights[name][values[name][i]]
            for y, w in enumerate(row):
                scores[y] += w
        else:
            x = values[name][i]
            for y, w in enumerate(c.weights[name][0]):
                scores[y] += w * x
    return scores


def feature_vector(p: Program, values: dict[str, list[int]], i: int) -> list[float]:
    out: list[float] = []
    for name, v in p.variables.items():
        if v.kind == CATEGORICAL:
            one = [0.0] * v.cardinality
            one[values[name][i]] = 1.0
            out += one
        else:
            out.append(float(values[name][i]))
    return out


def _argmax(scores: Sequence[float]) -> int:
    best = 0
    for y, s in enumerate(scores):
        if s > scores[best]:
            best = y
    return best


def run_program(p: Program, tokens: Sequence[str]) -> tuple[list[str], ExecutionTrace]:
    """Labels for a token sequence (one per position, or one when pooled) and the trace."""
    trace = execute(p, encode(p, tokens))
    n = len(tokens)
    c = p.classifier
    trace.features = [feature_vector(p, trace.values, i) for i in range(n)]
    if c.output_mode == "mean-pooled":
        pooled = [sum(col) / n for col in zip(*trace.features)]
        w = _flat_weights(p)
        scores = [sum(f * wr[y] for f, wr in zip(pooled, w)) for y in range(len(c.classes))]
        trace.scores = [scores]
        return [c.classes[_argmax(scores)]], trace
    trace.scores = [position_scores(p, trace.values, i) for i in range(n)]
    return [c.classes[_argmax(s)] for s in trace.scores], trace


def _flat_weights(p: Program) -> list[tuple[float, ...]]:
    rows = []
    for name in p.variables:
        rows += list(p.classifier.weights[name])
    return rows


def predict(p: Program, tokens: Sequence[str]) -> list[str]:
    return run_program(p, tokens)[0]


def value_label(p: Program, name: str, value: int) -> str:
    v = p.variables[name]
    if v.value_labels is not None and v.kind == CATEGORICAL:
        return v.value_labels[value]
    return str(value)


def classifier_feature_report(p: Program, tokens: Sequence[str]) -> list[list[tuple[str, dict[str, float]]]]:
    """Active features per position with their per-class score contributions.

    Features are ordered by the spread between their largest and smallest
    contribution, largest first.
    """
    trace = execute(p, encode(p, tokens))
    c = p.classifier
    report = []
    for i in range(len(tokens)):
        feats = []
        for name, v in p.variables.items():
            x = trace.values[name][i]
            if v.kind == CATEGORICAL:
                contrib = c.weights[name][x]
                label = f"{name}={value_label(p, name, x)}"
            else:
                contrib = tuple(w * x for w in c.weights[name][0])
                label = f"{name}={x}"
            feats.append((label, dict(zip(c.classes, contrib))))
        feats.sort(key=lambda f: -(max(f[1].values()) - min(f[1].values())) if f[1] else 0.0)
        report.append(feats)
    return report


def run_batch(p: Program, lines: Sequence[str]) -> list[str]:
    """Whitespace-tokenized input lines to tab-separated label lines."""
    return ["\t".join(predict(p, line.split())) for line in lines if line.strip()]
