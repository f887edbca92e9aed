import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tprog import ir
from tprog.ir import Layer, Predicate, ProgramFormatError, deserialize, serialize, validate_program
from tprog.model import discretize

from conftest import random_model


def set_head(p, layer, idx, **changes):
    layers = list(p.layers)
    heads = list(layers[layer].cat_heads)
    heads[idx] = replace(heads[idx], **changes)
    layers[layer] = replace(layers[layer], cat_heads=tuple(heads))
    return p.replace(layers=tuple(layers))


class TestValidate:
    def test_icl_shape_is_valid(self, icl_program):
        assert validate_program(icl_program) == []
        assert [len(layer.cat_heads) for layer in icl_program.layers] == [1, 1]

    def test_same_layer_read_is_acyclic_violation(self, icl_program):
        bad = set_head(icl_program, 1, 0, key="attn_1_0_outputs")
        problems = validate_program(bad)
        assert len(problems) == 1 and "acyclicity" in problems[0]

    def test_missing_query_value_is_totality_violation(self, icl_program):
        pred = icl_program.layers[0].cat_heads[0].predicate
        bad = set_head(icl_program, 0, 0, predicate=Predicate(pred.mapping[:-1], pred.n_keys))
        problems = validate_program(bad)
        assert len(problems) == 1 and "totality" in problems[0]

    def test_missing_input_variable(self, icl_program):
        vars_ = {n: v for n, v in icl_program.variables.items() if n != "positions"}
        weights = {n: w for n, w in icl_program.classifier.weights.items() if n != "positions"}
        bad = icl_program.replace(variables=vars_, classifier=replace(icl_program.classifier, weights=weights))
        assert any("positions" in x for x in validate_program(bad))

    def test_value_label_length(self, icl_program):
        v = icl_program.variables["tokens"]
        vars_ = dict(icl_program.variables, tokens=replace(v, value_labels=("a",)))
        assert any("value labels" in x for x in validate_program(icl_program.replace(variables=vars_)))

    def test_output_cardinality_matches_value(self, icl_program):
        v = icl_program.variables["attn_0_0_outputs"]
        vars_ = dict(icl_program.variables, attn_0_0_outputs=replace(v, cardinality=v.cardinality + 1))
        assert validate_program(icl_program.replace(variables=vars_))

    def test_incomplete_table_without_default(self, sort_data):
        for seed in range(40):
            m = random_model(seed, sort_data, n_cat_mlps=1)
            p = discretize(m)
            mlp = p.layers[0].mlps[0]
            assert validate_program(p) == []
            short = dict(list(mlp.table.items())[1:])
            layers = list(p.layers)
            layers[0] = replace(layers[0], mlps=(replace(mlp, table=short),) + layers[0].mlps[1:])
            problems = validate_program(p.replace(layers=tuple(layers)))
            assert any("no default" in x for x in problems)
            return

    def test_numerical_bound(self, sort_data):
        for seed in range(50):
            p = discretize(random_model(seed, sort_data, n_num_heads=1))
            h = p.layers[0].num_heads[0]
            assert p.variables[h.output].cardinality == p.max_len * p.variables[h.value].cardinality
            assert validate_program(p) == []
            v = p.variables[h.output]
            vars_ = dict(p.variables, **{h.output: replace(v, cardinality=v.cardinality - 1)})
            assert any("output bound" in x for x in validate_program(p.replace(variables=vars_)))
            return


class TestSerialize:
    def test_round_trip(self, icl_program):
        assert deserialize(serialize(icl_program)) == icl_program

    def test_canonical(self, icl_program):
        text = serialize(icl_program)
        assert serialize(deserialize(text)) == text

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip_random(self, sort_data, seed):
        p = discretize(random_model(seed, sort_data))
        text = serialize(p)
        back = deserialize(text)
        assert back == p and serialize(back) == text

    def test_canonical_independent_of_dict_order(self, icl_program):
        doc = json.loads(serialize(icl_program))
        doc = {k: doc[k] for k in reversed(list(doc))}
        assert serialize(ir.from_document(doc)) == serialize(icl_program)

    def test_truncated(self, icl_program):
        text = serialize(icl_program)
        with pytest.raises(ProgramFormatError, match="line"):
            deserialize(text[: len(text) // 2])

    def test_missing_field_names_locus(self, icl_program):
        doc = json.loads(serialize(icl_program))
        del doc["layers"][1]["cat_heads"][0]["query"]
        with pytest.raises(ProgramFormatError, match=r"layers\[1\]\.cat_heads\[0\]\.query"):
            ir.from_document(doc)

    def test_wrong_format(self):
        with pytest.raises(ProgramFormatError):
            deserialize('{"format": "other"}')

    def test_file_round_trip(self, tmp_path, icl_program):
        ir.save_program(icl_program, tmp_path / "p.json")
        assert ir.load_program(tmp_path / "p.json") == icl_program


class TestStats:
    def test_icl_reads(self, icl_program):
        layer0 = ir.reads_by_layer(icl_program)[0]["categorical"]
        assert layer0["key"] == {"positions": 1.0}
        assert layer0["query"] == {"positions": 1.0}
        assert layer0["value"] == {"tokens": 1.0}

    def test_empty_layers(self, icl_program):
        assert ir.reads_by_layer(icl_program.replace(layers=())) == []

    def test_line_counts_ordered(self, icl_program):
        s = ir.program_stats(icl_program)
        assert s.line_count_full >= s.line_count_pruned > 0

    def test_categories(self, icl_program):
        assert ir.read_category(icl_program, "tokens") == "tokens"
        assert ir.read_category(icl_program, "attn_0_0_outputs") == "attn"

    def test_feature_width(self, sort_data):
        # (inputs + L*H + L*M) * k categorical features
        m = random_model(3, sort_data, n_layers=2, n_cat_heads=2, n_num_heads=0, n_cat_mlps=1, n_num_mlps=0)
        p = discretize(m)
        cat = [v for v in p.variables.values() if v.kind == ir.CATEGORICAL]
        assert len(cat) * p.k == (2 + 2 * 2 + 2 * 1) * p.k
        assert sum(len(p.classifier.weights[v.name]) for v in cat) == (2 + 2 * 2 + 2 * 1) * p.k


def test_predicate_groups():
    pred = Predicate((2, 0, 2, 1), 3)
    assert pred.groups() == [((0, 2), 2), ((1,), 0), ((3,), 1)]
    assert pred(0, 2) and not pred(0, 1)


def test_layer_heads_order(icl_program):
    layer = icl_program.layers[0]
    assert isinstance(layer, Layer) and layer.heads == layer.cat_heads + layer.num_heads
