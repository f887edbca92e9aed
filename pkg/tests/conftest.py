import random
import sys

import pytest
import torch

from tprog.model import Architecture, ProgramModel, discretize
from tprog.tasks import gen_icl, generate, TaskSpec

BIG = 10.0


def hand_icl_model(data):
    """Two single-head layers that solve the in-context lookup task.

    Layer 0 copies the previous token to every position; layer 1 finds the
    nearest earlier position whose previous token equals the current token
    and reads the token there (the mapped number).  Unknown letters fall
    back to the BOS column, which the classifier maps to ``unk``.
    """
    arch = Architecture(
        vocab=list(data.vocab), classes=list(data.labels), max_len=data.max_len, k=data.k,
        n_layers=2, causal=True,
    )
    m = ProgramModel(arch, seed=0)
    k = arch.k
    with torch.no_grad():
        l0, l1 = m.layers
        # variables: 0 tokens, 1 positions, 2 attn_0_0_outputs
        g = torch.full_like(l0.cat_gates, -BIG)
        g[0, 0, 1] = g[0, 1, 1] = g[0, 2, 0] = BIG
        l0.cat_gates.copy_(g)
        p = torch.full((k, k), -BIG)
        for q in range(k):
            p[q, max(q - 1, 0)] = BIG
        l0.cat_pred.copy_(p[None])
        g = torch.full_like(l1.cat_gates, -BIG)
        g[0, 0, 0] = g[0, 1, 2] = g[0, 2, 0] = BIG
        l1.cat_gates.copy_(g)
        l1.cat_pred.copy_((torch.eye(k) * 2 * BIG - BIG)[None])
        w = torch.zeros_like(m.classifier)
        off = 3 * k  # attn_1_0_outputs block
        for c, label in enumerate(data.labels):
            tok = data.vocab.index(label) if label != "unk" else data.vocab.index("<s>")
            w[off + tok, c] = 1.0
        m.classifier.copy_(w)
    return m


@pytest.fixture(scope="session")
def icl_data():
    return gen_icl(n=3000, seed=0)


@pytest.fixture(scope="session")
def icl_model(icl_data):
    return hand_icl_model(icl_data)


@pytest.fixture(scope="session")
def icl_program(icl_model):
    return discretize(icl_model)


@pytest.fixture(scope="session")
def sort_data():
    return generate(TaskSpec("sort", 4, 5, n_samples=600, seed=0))


def random_arch(rng: random.Random, data, **over) -> Architecture:
    kw = dict(
        vocab=list(data.vocab), classes=list(data.labels), max_len=data.max_len, k=data.k,
        n_layers=rng.randint(1, 2), n_cat_heads=rng.randint(0, 2), n_num_heads=rng.randint(0, 2),
        n_cat_mlps=rng.randint(0, 1), n_num_mlps=rng.randint(0, 1), causal=data.causal, mlp_hidden=8,
    )
    if kw["n_cat_heads"] + kw["n_num_heads"] == 0:
        kw["n_cat_heads"] = 1
    kw.update(over)
    return Architecture(**kw)


def random_model(seed: int, data, **over) -> ProgramModel:
    """A model with random gates, predicates, MLPs and a non-zero classifier."""
    rng = random.Random(seed)
    m = ProgramModel(random_arch(rng, data, **over), seed=seed)
    with torch.no_grad():
        g = torch.Generator().manual_seed(seed)
        m.classifier.copy_(torch.randn(m.classifier.shape, generator=g))
    return m


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
