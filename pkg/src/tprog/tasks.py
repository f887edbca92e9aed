"""Data generation and gold labels for the synthetic tasks.

Every task produces :class:`Example` records whose ``tokens`` already carry
the special symbols (``<s>`` and, for sort/reverse, ``</s>``) and whose
``targets`` are aligned per position.  Positions without a target hold
``None`` and are excluded from losses and metrics.
"""

from __future__ import annotations

import itertools
import json
import random
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

RASP_TASKS = ("reverse", "hist", "hist2", "sort", "most_freq", "dyck1", "dyck2")
TASKS = ("icl",) + RASP_TASKS + ("conll",)

ICL_LETTERS = ("a", "b", "c", "d")
ICL_NUMBERS = ("0", "1", "2", "3")
ICL_UNK = "unk"

DYCK_PAIRS = {"dyck1": ["()"], "dyck2": ["()", "{}"]}


@dataclass
class TaskSpec:
    name: str
    vocab_size: int = 8
    max_len: int = 8
    n_samples: int = 20_000
    split: tuple[int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}")
        if self.split is None:
            n_val = n_test = self.n_samples // 10
            self.split = (self.n_samples - n_val - n_test, n_val, n_test)
        if sum(self.split) != self.n_samples:
            raise ValueError(f"split {self.split} does not sum to {self.n_samples}")

    @property
    def uses_eos(self) -> bool:
        return self.name in ("sort", "reverse")

    @property
    def causal(self) -> bool:
        return self.name == "icl"


@dataclass
class Example:
    tokens: list[str]
    targets: list[str | None]
    origin: str | None = None


@dataclass
class Dataset:
    """A generated or loaded task, partitioned into train/val/test."""

    name: str
    vocab: list[str]
    labels: list[str]
    max_len: int
    causal: bool
    train: list[Example]
    val: list[Example]
    test: list[Example]
    meta: dict = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    @property
    def k(self) -> int:
        """Shared categorical cardinality used by models built on this dataset."""
        return max(len(self.vocab), self.max_len)

    def save(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for split, rows in self.splits.items():
            path = out / f"{split}.tsv"
            write_examples(path, rows)
            paths.append(path)
        meta = {
            "name": self.name,
            "vocab": self.vocab,
            "labels": self.labels,
            "max_len": self.max_len,
            "causal": self.causal,
            "meta": self.meta,
        }
        path = out / "dataset.json"
        path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        paths.append(path)
        return paths

    @classmethod
    def load(cls, in_dir: str | Path) -> "Dataset":
        src = Path(in_dir)
        meta = json.loads((src / "dataset.json").read_text())
        splits = {s: read_examples(src / f"{s}.tsv") for s in ("train", "val", "test")}
        return cls(
            name=meta["name"],
            vocab=meta["vocab"],
            labels=meta["labels"],
            max_len=meta["max_len"],
            causal=meta["causal"],
            meta=meta.get("meta", {}),
            **splits,
        )


def write_examples(path: str | Path, rows: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in rows:
            targets = [PAD if t is None else t for t in ex.targets]
            f.write(" ".join(ex.tokens) + "\t" + " ".join(targets) + "\n")


def read_examples(path: str | Path) -> list[Example]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected tokens<TAB>targets")
            tokens, targets = parts[0].split(), parts[1].split()
            if len(tokens) != len(targets):
                raise ValueError(f"{path}:{lineno}: {len(tokens)} tokens but {len(targets)} targets")
            rows.append(Example(tokens, [None if t == PAD else t for t in targets]))
    return rows


# ---------------------------------------------------------------------------
# Gold labelers
# ---------------------------------------------------------------------------


def _dyck_labels(s: Sequence[str], pairs: Sequence[str]) -> list[str]:
    closer = {p[1]: p[0] for p in pairs}
    openers = {p[0] for p in pairs}
    stack: list[str] = []
    failed = False
    out = []
    for tok in s:
        if tok not in openers and tok not in closer:
            raise ValueError(f"invalid token {tok!r} for Dyck language")
        if not failed:
            if tok in openers:
                stack.append(tok)
            elif stack and stack[-1] == closer[tok]:
                stack.pop()
            else:
                failed = True
        out.append("F" if failed else ("T" if not stack else "P"))
    return out


def _most_freq(s: Sequence[str]) -> list[str]:
    counts = Counter(s)
    first = {}
    for i, tok in enumerate(s):
        first.setdefault(tok, i)
    return sorted(counts, key=lambda t: (-counts[t], first[t]))


def _hist2(s: Sequence[str]) -> list[str]:
    counts = Counter(s)
    same = Counter(counts.values())
    return [str(same[counts[t]]) for t in s]


def _icl(s: Sequence[str]) -> list[str | None]:
    out: list[str | None] = []
    seen: dict[str, str] = {}
    for i, tok in enumerate(s):
        if tok in ICL_NUMBERS or not tok.isalpha():
            out.append(None)
            continue
        out.append(seen.get(tok, ICL_UNK))
        if i + 1 < len(s) and tok not in seen:
            seen[tok] = s[i + 1]
    return out


def gold(task: str, tokens: Sequence[str], vocab: Sequence[str] | None = None) -> list[str | None]:
    """Target sequence for a raw input (no special tokens).

    For the per-token tasks the result has one entry per input token; for
    ``most_freq`` it is the (shorter) list of distinct tokens.  If ``vocab`` is
    given, tokens outside it raise ``ValueError``.
    """
    s = list(tokens)
    if vocab is not None:
        bad = [t for t in s if t not in vocab]
        if bad:
            raise ValueError(f"invalid token {bad[0]!r} for task {task}")
    if task == "reverse":
        return s[::-1]
    if task == "hist":
        counts = Counter(s)
        return [str(counts[t]) for t in s]
    if task == "hist2":
        return _hist2(s)
    if task == "sort":
        return sorted(s)
    if task == "most_freq":
        return _most_freq(s)
    if task in DYCK_PAIRS:
        return _dyck_labels(s, DYCK_PAIRS[task])
    if task == "icl":
        return _icl(s)
    raise ValueError(f"no gold labeler for task {task!r}")


def content_vocab(task: str, vocab_size: int) -> list[str]:
    if task in DYCK_PAIRS:
        return [c for p in DYCK_PAIRS[task] for c in p]
    if task == "icl":
        return list(ICL_NUMBERS + ICL_LETTERS)
    if vocab_size <= 26:
        return list(string.ascii_lowercase[:vocab_size])
    return [f"w{i}" for i in range(vocab_size)]


def task_labels(task: str, vocab_size: int, max_len: int) -> list[str]:
    if task in ("reverse", "sort", "most_freq"):
        return content_vocab(task, vocab_size)
    if task in ("hist", "hist2"):
        return [str(i) for i in range(1, max_len + 1)]
    if task in DYCK_PAIRS:
        return ["F", "P", "T"]
    if task == "icl":
        return list(ICL_NUMBERS) + [ICL_UNK]
    raise ValueError(task)


def make_example(task: str, raw: Sequence[str], origin: str | None = None) -> Example:
    """Attach specials to a raw input and align its gold targets."""
    out = gold(task, raw)
    tokens = [BOS] + list(raw)
    if task == "most_freq":
        targets: list[str | None] = [None] + list(out) + [None] * (len(raw) - len(out))
    else:
        targets = [None] + list(out)
    if task in ("sort", "reverse"):
        tokens.append(EOS)
        targets.append(None)
    return Example(tokens, targets, origin)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def _domain_size(spec: TaskSpec, n_tokens: int) -> int:
    if spec.name in DYCK_PAIRS:
        return n_tokens**spec.max_len
    return sum(n_tokens**n for n in range(1, spec.max_len + 1))


def _random_dyck(rng: random.Random, pairs: Sequence[str], max_len: int) -> list[str]:
    n_pairs = rng.randint(0, max_len // 2)
    out: list[str] = []
    stack: list[str] = []
    opened = 0
    while opened < n_pairs or stack:
        can_open = opened < n_pairs
        if can_open and (not stack or rng.random() < 0.5):
            p = rng.choice(pairs)
            out.append(p[0])
            stack.append(p[1])
            opened += 1
        else:
            out.append(stack.pop())
    return out


def sample_dyck(rng: random.Random, task: str, max_len: int) -> tuple[list[str], str]:
    """One Dyck input of length ``max_len`` and whether it came from the biased branch."""
    pairs = DYCK_PAIRS[task]
    alphabet = [c for p in pairs for c in p]
    if rng.random() < 0.5:
        return [rng.choice(alphabet) for _ in range(max_len)], "uniform"
    s = _random_dyck(rng, pairs, max_len)
    s += [rng.choice(alphabet) for _ in range(max_len - len(s))]
    return s, "dyck"


def _split(spec: TaskSpec, rows: list[Example]):
    n_train, n_val, _ = spec.split
    return rows[:n_train], rows[n_train : n_train + n_val], rows[n_train + n_val :]


def gen_rasp(spec: TaskSpec) -> Dataset:
    """Sample ``spec.n_samples`` unique inputs for one of the RASP tasks."""
    if spec.name not in RASP_TASKS:
        raise ValueError(f"{spec.name!r} is not a RASP task")
    alphabet = content_vocab(spec.name, spec.vocab_size)
    if _domain_size(spec, len(alphabet)) < spec.n_samples:
        raise ValueError(
            f"domain too small: cannot draw {spec.n_samples} unique strings "
            f"over {len(alphabet)} tokens with max length {spec.max_len}"
        )
    rng = random.Random(spec.seed)
    seen: set[tuple[str, ...]] = set()
    rows: list[Example] = []
    while len(rows) < spec.n_samples:
        if spec.name in DYCK_PAIRS:
            raw, origin = sample_dyck(rng, spec.name, spec.max_len)
        else:
            n = rng.randint(1, spec.max_len)
            raw, origin = [rng.choice(alphabet) for _ in range(n)], None
        key = tuple(raw)
        if key in seen:
            continue
        seen.add(key)
        rows.append(make_example(spec.name, raw, origin))
    specials = [PAD, BOS] + ([EOS] if spec.uses_eos else [])
    train, val, test = _split(spec, rows)
    return Dataset(
        name=spec.name,
        vocab=specials + alphabet,
        labels=task_labels(spec.name, spec.vocab_size, spec.max_len),
        max_len=spec.max_len + len(specials) - 1,
        causal=False,
        train=train,
        val=val,
        test=test,
        meta={
            "vocab_size": spec.vocab_size,
            "length": spec.max_len,
            "seed": spec.seed,
            "cardinality": max(spec.vocab_size, spec.max_len),
        },
    )


def gen_icl(n: int = 20_000, length: int = 10, seed: int = 0, split=None) -> Dataset:
    """Alternating letter/number sequences where each letter maps to a fixed number.

    ``length`` counts the leading ``<s>``; with the default of 10 every
    sequence ends on a letter.
    """
    spec = TaskSpec("icl", n_samples=n, max_len=length, split=split, seed=seed)
    rng = random.Random(seed)
    seen: set[tuple[str, ...]] = set()
    rows: list[Example] = []
    if _icl_domain_size(length) < n:
        raise ValueError("domain too small for requested number of ICL samples")
    while len(rows) < n:
        mapping = {c: rng.choice(ICL_NUMBERS) for c in ICL_LETTERS}
        raw: list[str] = []
        while len(raw) < length - 1:
            letter = rng.choice(ICL_LETTERS)
            raw.append(letter)
            if len(raw) < length - 1:
                raw.append(mapping[letter])
        key = tuple(raw)
        if key in seen:
            continue
        seen.add(key)
        rows.append(Example([BOS] + raw, [None] + gold("icl", raw)))
    train, val, test = _split(spec, rows)
    return Dataset(
        name="icl",
        vocab=[PAD, BOS] + list(ICL_NUMBERS + ICL_LETTERS),
        labels=task_labels("icl", 0, length),
        max_len=length,
        causal=True,
        train=train,
        val=val,
        test=test,
        meta={"length": length, "seed": seed, "cardinality": length},
    )


def _icl_domain_size(length: int) -> int:
    # each letter sequence admits 4**(distinct letters) number assignments;
    # the trailing letter (odd content length) contributes no number
    n_content = length - 1
    n_letters = (n_content + 1) // 2
    total = 0
    for letters in itertools.product(ICL_LETTERS, repeat=n_letters):
        numbered = set(letters[: n_content // 2])
        total += len(ICL_NUMBERS) ** len(numbered)
    return total


def generate(spec: TaskSpec) -> Dataset:
    if spec.name == "icl":
        return gen_icl(spec.n_samples, spec.max_len, spec.seed, spec.split)
    if spec.name == "conll":
        raise ValueError("conll data is loaded with load_conll, not generated")
    return gen_rasp(spec)


# ---------------------------------------------------------------------------
# CoNLL-2003 ingestion
# ---------------------------------------------------------------------------

_DIGITS = re.compile(r"[0-9]+")
_TAG = re.compile(r"^(O|[BI]-\S+)$")


def normalize_word(word: str) -> str:
    """Collapse every run of digits to a single ``#``."""
    return _DIGITS.sub("#", word)


def read_conll(path: str | Path) -> list[tuple[list[str], list[str]]]:
    """Sentences from a whitespace-column CoNLL file (word first, IOB2 tag last)."""
    sentences = []
    words: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                if words:
                    sentences.append((words, tags))
                    words, tags = [], []
                continue
            if parts[0] == "-DOCSTART-":
                continue
            if len(parts) < 2 or not _TAG.match(parts[-1]):
                raise ValueError(f"{path}:{lineno}: malformed CoNLL line {line.rstrip()!r}")
            words.append(parts[0])
            tags.append(parts[-1])
    if words:
        sentences.append((words, tags))
    return sentences


def load_conll(
    path: str | Path,
    max_len: int = 30,
    vocab_size: int = 10_000,
    vocab: Sequence[str] | None = None,
) -> Dataset:
    """Load one CoNLL file as a dataset whose sentences all sit in ``train``.

    The word vocabulary is the ``vocab_size`` most frequent normalized words
    unless ``vocab`` is supplied (e.g. the training vocabulary when loading
    a test file).
    """
    sentences = [
        ([normalize_word(w) for w in words], tags)
        for words, tags in read_conll(path)
        if len(words) <= max_len
    ]
    if vocab is None:
        counts = Counter(w for words, _ in sentences for w in words)
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[:vocab_size]
        vocab = [PAD, BOS, EOS, UNK] + ranked
    known = set(vocab)
    labels = sorted({t for _, tags in sentences for t in tags})
    rows = []
    for words, tags in sentences:
        tokens = [BOS] + [w if w in known else UNK for w in words] + [EOS]
        rows.append(Example(tokens, [None] + list(tags) + [None]))
    return Dataset(
        name="conll",
        vocab=list(vocab),
        labels=labels,
        max_len=max_len + 2,
        causal=False,
        train=rows,
        val=[],
        test=[],
        meta={"source": str(path), "vocab_size": vocab_size},
    )
