import itertools
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tprog import tasks
from tprog.tasks import BOS, EOS, Dataset, TaskSpec, gen_icl, gen_rasp, gold, load_conll, make_example

letters = st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=8)
parens = st.lists(st.sampled_from("()"), min_size=1, max_size=16)
parens2 = st.lists(st.sampled_from("(){}"), min_size=1, max_size=16)


def dyck_oracle(s, pairs):
    # label from first principles: a prefix is T when it reduces to the empty
    # string by deleting matched adjacent pairs, P when it reduces to openers only
    out = []
    for i in range(1, len(s) + 1):
        r = "".join(s[:i])
        while True:
            shorter = r
            for p in pairs:
                shorter = shorter.replace(p, "")
            if shorter == r:
                break
            r = shorter
        if r == "":
            out.append("T")
        elif all(c in {p[0] for p in pairs} for c in r):
            out.append("P")
        else:
            out.append("F")
    return out


class TestGold:
    def test_reverse_example(self):
        assert "".join(gold("reverse", "abbc")) == "cbba"

    def test_hist2_example(self):
        assert "".join(gold("hist2", "abbc")) == "2112"

    def test_dyck2_example(self):
        assert "".join(gold("dyck2", "({})(}")) == "PPPTPF"

    def test_hist_example(self):
        assert gold("hist", "abbc") == ["1", "2", "2", "1"]

    def test_sort_and_most_freq(self):
        assert gold("sort", "cab") == ["a", "b", "c"]
        # ties broken by first position
        assert gold("most_freq", "abbcca") == ["a", "b", "c"]
        assert gold("most_freq", "cbbd") == ["b", "c", "d"]

    def test_icl_figure_examples(self):
        assert gold("icl", list("a1b2b2a"))[-1] == "1"
        assert gold("icl", list("d2c4a2b"))[-1] == "unk"

    def test_invalid_token(self):
        with pytest.raises(ValueError):
            gold("reverse", ["a", "z"], vocab=["a", "b"])
        with pytest.raises(ValueError):
            gold("dyck1", ["(", "x"])

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            gold("nope", ["a"])

    @given(letters)
    def test_reverse_involution(self, s):
        assert gold("reverse", gold("reverse", s)) == s

    @given(letters)
    def test_sort_is_sorted_permutation(self, s):
        out = gold("sort", s)
        assert out == sorted(out) and Counter(out) == Counter(s)

    @given(letters)
    def test_hist_is_multiplicity(self, s):
        assert gold("hist", s) == [str(s.count(t)) for t in s]

    @given(letters)
    def test_hist2_counts_types_with_same_count(self, s):
        c = Counter(s)
        assert gold("hist2", s) == [str(sum(1 for u in c if c[u] == c[t])) for t in s]

    @given(letters)
    def test_most_freq_length(self, s):
        assert len(gold("most_freq", s)) == len(set(s))

    @given(parens)
    def test_dyck1_matches_reduction_oracle(self, s):
        assert gold("dyck1", s) == dyck_oracle(s, ["()"])

    @given(parens2)
    def test_dyck2_matches_reduction_oracle(self, s):
        assert gold("dyck2", s) == dyck_oracle(s, ["()", "{}"])

    @given(parens2)
    def test_dyck_fail_is_absorbing(self, s):
        out = gold("dyck2", s)
        if "F" in out:
            assert set(out[out.index("F"):]) == {"F"}

    @given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=4).flatmap(
        lambda ls: st.tuples(st.just(ls), st.lists(st.sampled_from("0123"), min_size=len(ls), max_size=len(ls)))))
    def test_icl_first_occurrence_is_unk(self, pair):
        ls, ns = pair
        s = [x for ab in zip(ls, ns) for x in ab]
        out = gold("icl", s)
        seen = set()
        for i in range(0, len(s), 2):
            if s[i] not in seen:
                assert out[i] == "unk"
            seen.add(s[i])
        assert all(out[i] is None for i in range(1, len(s), 2))


class TestExamples:
    def test_specials(self):
        e = make_example("reverse", list("abc"))
        assert e.tokens == [BOS, "a", "b", "c", EOS]
        assert e.targets == [None, "c", "b", "a", None]
        e = make_example("hist", list("ab"))
        assert e.tokens == [BOS, "a", "b"]

    def test_most_freq_left_aligned(self):
        e = make_example("most_freq", list("aab"))
        assert e.targets == [None, "a", "b", None]


class TestGenRasp:
    def test_sort_split_sizes_unique(self):
        d = gen_rasp(TaskSpec("sort", 8, 8, seed=3))
        assert (len(d.train), len(d.val), len(d.test)) == (16_000, 2_000, 2_000)
        keys = {tuple(e.tokens) for e in d.train + d.val + d.test}
        assert len(keys) == 20_000
        assert all(len(e.tokens) <= d.max_len for e in d.train)

    def test_exhausts_singletons(self):
        d = gen_rasp(TaskSpec("reverse", 8, 1, n_samples=8, split=(8, 0, 0)))
        assert sorted(e.tokens[1] for e in d.train) == list("abcdefgh")

    def test_domain_too_small(self):
        with pytest.raises(ValueError, match="domain too small"):
            gen_rasp(TaskSpec("reverse", 2, 2, n_samples=7, split=(7, 0, 0)))

    def test_deterministic(self, tmp_path):
        a = gen_rasp(TaskSpec("hist", n_samples=500, seed=9))
        b = gen_rasp(TaskSpec("hist", n_samples=500, seed=9))
        a.save(tmp_path / "a")
        b.save(tmp_path / "b")
        for f in ("train.tsv", "val.tsv", "test.tsv", "dataset.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_dyck_mixture_frequency(self):
        d = gen_rasp(TaskSpec("dyck1", 2, 16, seed=0))
        rows = d.train + d.val + d.test
        frac = sum(e.origin == "dyck" for e in rows) / len(rows)
        assert frac >= 0.40

    def test_dyck_biased_branch_reaches_balance_more_often(self):
        import random

        rng = random.Random(1)
        hits = {"dyck": [0, 0], "uniform": [0, 0]}
        for _ in range(2000):
            s, origin = tasks.sample_dyck(rng, "dyck1", 16)
            assert len(s) == 16
            hits[origin][0] += "T" in gold("dyck1", s)
            hits[origin][1] += 1
        rate = {o: h / n for o, (h, n) in hits.items()}
        assert rate["dyck"] > rate["uniform"] + 0.2

    def test_dyck_cardinality_recorded(self):
        d = gen_rasp(TaskSpec("dyck1", 2, 16, n_samples=100))
        assert d.meta["cardinality"] == 16

    def test_split_mismatch(self):
        with pytest.raises(ValueError):
            TaskSpec("sort", n_samples=10, split=(5, 5, 5))

    def test_roundtrip(self, tmp_path):
        d = gen_rasp(TaskSpec("sort", n_samples=50))
        d.save(tmp_path)
        back = Dataset.load(tmp_path)
        assert back.train == d.train and back.vocab == d.vocab and back.max_len == d.max_len


class TestIcl:
    def test_layout(self):
        d = gen_icl(n=300, seed=0)
        assert d.causal and d.max_len == 10
        for e in d.train:
            assert e.tokens[0] == BOS and len(e.tokens) == 10
            content = e.tokens[1:]
            assert all(t in "abcd" for t in content[0::2])
            assert all(t in "0123" for t in content[1::2])
            assert content[-1] in "abcd"

    def test_mapping_consistent(self):
        for e in gen_icl(n=300, seed=1).train:
            content = e.tokens[1:]
            pairs = {(content[i], content[i + 1]) for i in range(0, len(content) - 1, 2)}
            assert len(pairs) == len({a for a, _ in pairs})

    def test_unique(self):
        d = gen_icl(n=2000, seed=2)
        assert len({tuple(e.tokens) for e in d.train + d.val + d.test}) == 2000


class TestConll:
    def write(self, path, sentences):
        lines = ["-DOCSTART- -X- -X- O", ""]
        for s in sentences:
            lines += [f"{w} NN B-NP {t}" for w, t in s] + [""]
        path.write_text("\n".join(lines))

    def test_digit_substitution(self):
        assert tasks.normalize_word("19.99") == "#.#"

    def test_length_filter_and_tokens(self, tmp_path):
        f = tmp_path / "x.conll"
        long = [("w", "O")] * 31
        self.write(f, [[("Paid", "O"), ("19.99", "O"), ("Bob", "B-PER")], long])
        d = load_conll(f)
        assert len(d.train) == 1
        assert d.train[0].tokens == [BOS, "Paid", "#.#", "Bob", EOS]
        assert d.train[0].targets == [None, "O", "O", "B-PER", None]

    def test_rare_words_unk(self, tmp_path):
        f = tmp_path / "x.conll"
        self.write(f, [[("a", "O"), ("a", "O"), ("b", "O")]])
        d = load_conll(f, vocab_size=1)
        assert d.train[0].tokens[1:4] == ["a", "a", tasks.UNK]

    def test_malformed_line(self, tmp_path):
        f = tmp_path / "x.conll"
        f.write_text("word NN B-NP O\nbroken\n")
        with pytest.raises(ValueError, match=":2:"):
            load_conll(f)

    def test_empty_file(self, tmp_path):
        f = tmp_path / "x.conll"
        f.write_text("")
        assert load_conll(f).train == []


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 4))
def test_domain_size_matches_enumeration(v, n):
    spec = TaskSpec("reverse", v, n, n_samples=1, split=(1, 0, 0))
    count = sum(1 for m in range(1, n + 1) for _ in itertools.product(range(v), repeat=m))
    assert tasks._domain_size(spec, v) == count
