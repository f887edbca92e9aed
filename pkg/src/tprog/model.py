"""Relaxed Transformer Program: continuous parameters over discrete structure.

Every module reads variables through gate logits (one distribution over the
variables legal at its position in the layer order) and writes one new
variable.  Three execution modes share the same tensor code:

``train``
    gates, predicate rows, attention rows and MLP outputs are Gumbel-softmax
    samples at temperature ``tau``;
``soft``
    the same with the noise switched off (plain tempered softmax);
``hard``
    every distribution is replaced by the one-hot of its argmax.  This is
    the discretized model and must agree exactly with :func:`discretize`.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ir
from .tasks import PAD, Example

CHECKPOINT_FORMAT = "tprog-checkpoint"
CHECKPOINT_VERSION = 1
IGNORE = -100
_TINY = 1e-20


class CheckpointError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log((-torch.log(u.clamp_min(_TINY))).clamp_min(_TINY))


def gumbel_softmax(logits: torch.Tensor, tau: float, noise: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax((logits + noise) / tau)`` over the last axis; no straight-through."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if noise is not None:
        logits = logits + noise
    return torch.softmax(logits / tau, dim=-1)


def attention_bias(max_len: int) -> torch.Tensor:
    """Distance bias ``b[i, j]``: 1 at distance one, falling linearly to 1/N; 1/N on the diagonal."""
    n = max_len
    d = torch.arange(n)
    dist = (d[:, None] - d[None, :]).abs().double()
    if n > 1:
        b = 1.0 - (dist - 1.0) * (1.0 - 1.0 / n) / (n - 1)
    else:
        b = torch.ones_like(dist)
    b[dist == 0] = 1.0 / n
    return b


@dataclass
class Architecture:
    vocab: list[str]
    classes: list[str]
    max_len: int
    k: int
    n_layers: int = 2
    n_cat_heads: int = 1
    n_num_heads: int = 0
    n_cat_mlps: int = 0
    n_num_mlps: int = 0
    causal: bool = False
    mlp_hidden: int = 64
    n_embed_vars: int = 0
    output_mode: str = "per-token"
    unk: str | None = None
    # "normalized": attention rows proportional to the adjusted scores;
    # "gumbel": Gumbel-softmax over the adjusted scores at the annealed temperature
    attn_relax: str = "normalized"

    def __post_init__(self):
        if self.k < max(self.max_len, 1 if self.n_embed_vars else len(self.vocab)):
            raise ValueError(f"cardinality k={self.k} too small for the vocabulary/positions")
        if self.output_mode not in ("per-token", "mean-pooled"):
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if self.attn_relax not in ("normalized", "sharpened", "gumbel"):
            raise ValueError(f"unknown attention relaxation {self.attn_relax!r}")

    @property
    def numerical(self) -> bool:
        return bool(self.n_num_heads or self.n_num_mlps)

    @property
    def n_cat_inputs(self) -> int:
        return (self.n_embed_vars or 1) + 1

    @property
    def cat_per_layer(self) -> int:
        return self.n_cat_heads + self.n_cat_mlps + self.n_num_mlps

    def cat_available(self, layer: int, stage: int) -> int:
        """Categorical variables readable at (layer, stage); stage 0 = heads, 1 = MLPs."""
        return self.n_cat_inputs + layer * self.cat_per_layer + (self.n_cat_heads if stage else 0)

    def num_available(self, layer: int, stage: int) -> int:
        return 1 + layer * self.n_num_heads + (self.n_num_heads if stage else 0)


@dataclass
class VarInfo:
    name: str
    producer: str
    scale: float = 1.0


@dataclass
class RelaxedTrace:
    cat_states: list[torch.Tensor] = field(default_factory=list)
    num_states: list[torch.Tensor] = field(default_factory=list)
    attention: list[torch.Tensor] = field(default_factory=list)
    logits: torch.Tensor | None = None


def _uniform(shape, fan_in, gen):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen) * 2 - 1) * bound


class LayerParams(nn.Module):
    def __init__(self, arch: Architecture, layer: int, gen: torch.Generator):
        super().__init__()
        k, hc, hn = arch.k, arch.n_cat_heads, arch.n_num_heads
        mc, mn, hid = arch.n_cat_mlps, arch.n_num_mlps, arch.mlp_hidden
        ca, ca_m = arch.cat_available(layer, 0), arch.cat_available(layer, 1)
        na_m = arch.num_available(layer, 1)
        na = arch.num_available(layer, 0)

        def normal(*shape):
            return nn.Parameter(torch.randn(shape, generator=gen))

        self.cat_gates = normal(hc, 3, ca) if hc else None  # query, key, value
        self.cat_pred = normal(hc, k, k) if hc else None
        self.num_gates = normal(hn, 2, ca) if hn else None  # query, key
        self.num_value_gate = normal(hn, na) if hn else None
        self.num_pred = normal(hn, k, k) if hn else None
        if mc:
            self.cat_mlp_gates = normal(mc, 2, ca_m)
            self.cat_w1 = nn.Parameter(_uniform((mc, 2 * k, hid), 2 * k, gen))
            self.cat_b1 = nn.Parameter(_uniform((mc, 1, hid), 2 * k, gen))
            self.cat_w2 = nn.Parameter(_uniform((mc, hid, k), hid, gen))
            self.cat_b2 = nn.Parameter(_uniform((mc, 1, k), hid, gen))
        if mn:
            self.num_mlp_gates = normal(mn, 2, na_m)
            self.num_w1 = nn.Parameter(_uniform((mn, 2, hid), 2, gen))
            self.num_b1 = nn.Parameter(_uniform((mn, 1, hid), 2, gen))
            self.num_w2 = nn.Parameter(_uniform((mn, hid, k), hid, gen))
            self.num_b2 = nn.Parameter(_uniform((mn, 1, k), hid, gen))


class ProgramModel(nn.Module):
    """All continuous parameters of a relaxed program plus its forward pass."""

    def __init__(self, arch: Architecture, seed: int = 0):
        super().__init__()
        self.arch = arch
        gen = torch.Generator().manual_seed(seed)
        k = arch.k
        if arch.n_embed_vars:
            self.embed_logits = nn.Parameter(torch.randn((len(arch.vocab), arch.n_embed_vars, k), generator=gen))
        else:
            self.embed_logits = None
        self.layers = nn.ModuleList(LayerParams(arch, i, gen) for i in range(arch.n_layers))
        self.cat_vars, self.num_vars = self._variables()
        n_feat = len(self.cat_vars) * k + (len(self.num_vars) if arch.numerical else 0)
        self.classifier = nn.Parameter(torch.zeros(n_feat, len(arch.classes)))
        self.register_buffer("bias", attention_bias(arch.max_len).float(), persistent=False)

    # -- variable registry -------------------------------------------------

    def _variables(self):
        a = self.arch
        if a.n_embed_vars:
            cat = [VarInfo(f"var{i}_embeddings", "input-token") for i in range(a.n_embed_vars)]
        else:
            cat = [VarInfo("tokens", "input-token")]
        cat.append(VarInfo("positions", "input-position"))
        num = [VarInfo("ones", "input-ones", 1.0)]
        for l in range(a.n_layers):
            cat += [VarInfo(f"attn_{l}_{h}_outputs", f"attn_{l}_{h}") for h in range(a.n_cat_heads)]
            cat += [VarInfo(f"mlp_{l}_{i}_outputs", f"mlp_{l}_{i}") for i in range(a.n_cat_mlps)]
            cat += [VarInfo(f"num_mlp_{l}_{i}_outputs", f"num_mlp_{l}_{i}") for i in range(a.n_num_mlps)]
            # static worst-case bound, used to scale numerical MLP inputs
            num += [
                VarInfo(f"num_attn_{l}_{h}_outputs", f"num_attn_{l}_{h}", float(a.max_len) ** (l + 1))
                for h in range(a.n_num_heads)
            ]
        return cat, num

    # -- distributions -----------------------------------------------------

    @staticmethod
    def _realize(logits, tau, mode, gen, noise_shape=None):
        if mode == "hard":
            return F.one_hot(logits.argmax(-1), logits.shape[-1]).to(logits.dtype)
        if mode == "soft":
            return gumbel_softmax(logits, tau)
        shape = logits.shape if noise_shape is None else noise_shape
        return gumbel_softmax(logits, tau, gumbel_noise(shape, gen, logits.dtype))

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        ids: torch.Tensor,
        lengths: torch.Tensor,
        tau: float = 1.0,
        mode: str = "train",
        generator: torch.Generator | None = None,
        trace: bool = False,
    ):
        a = self.arch
        if mode not in ("train", "soft", "hard"):
            raise ValueError(f"unknown mode {mode!r}")
        if ids.numel() == 0:
            raise ValueError("empty batch")
        if mode != "hard" and not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        B, n = ids.shape
        if n > a.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {a.max_len}")
        k = a.k
        dtype = self.classifier.dtype
        real = lambda lg, shape=None: self._realize(lg, tau, mode, generator, shape)  # noqa: E731
        rt = RelaxedTrace() if trace else None

        pos = torch.arange(n)
        valid = pos[None, :] < lengths[:, None]  # [B, n] key validity
        mask = valid[:, None, :].expand(B, n, n)
        if a.causal:
            mask = mask & (pos[None, :] <= pos[:, None])[None]
        mask = mask[:, None]  # [B, 1, n, n]
        bias = self.bias[:n, :n].to(dtype)

        if a.n_embed_vars:
            emb = real(self.embed_logits)  # [V, m, k]
            inputs = [emb[ids][:, :, i] for i in range(a.n_embed_vars)]
        else:
            inputs = [F.one_hot(ids, k).to(dtype)]
        inputs.append(F.one_hot(pos, k).to(dtype)[None].expand(B, n, k))
        cat = torch.stack(inputs, dim=2)  # [B, n, V, k]
        num = torch.ones(B, n, 1, dtype=dtype)
        scales = torch.tensor([v.scale for v in self.num_vars], dtype=dtype)
        if rt is not None:
            rt.cat_states += [cat[:, :, i] for i in range(cat.shape[2])]

        for li, lp in enumerate(self.layers):
            new_cat, new_num = [], []
            if a.n_cat_heads:
                out, attn = self._cat_heads(lp, cat, mask, bias, real, mode, tau, generator)
                new_cat.append(out)
                if rt is not None:
                    rt.attention.append(attn)
            if a.n_num_heads:
                new_num.append(self._num_heads(lp, cat, num, mask, real))
            cat_h = torch.cat([cat] + new_cat, dim=2) if new_cat else cat
            num_h = torch.cat([num] + new_num, dim=2) if new_num else num
            if a.n_cat_mlps:
                logits = self._cat_mlp_logits(lp, self._read(cat_h, real(lp.cat_mlp_gates)))
                new_cat.append(real(logits))
            if a.n_num_mlps:
                x = num_h / scales[: num_h.shape[2]]
                logits = self._num_mlp_logits(lp, self._read_num(x, real(lp.num_mlp_gates)))
                new_cat.append(real(logits))
            cat = torch.cat([cat] + new_cat, dim=2) if new_cat else cat
            num = num_h
            if rt is not None:
                for t in new_cat:
                    rt.cat_states += [t[:, :, i] for i in range(t.shape[2])]
                for t in new_num:
                    rt.num_states += [t[:, :, i] for i in range(t.shape[2])]
            if not (torch.isfinite(cat).all() and torch.isfinite(num).all()):
                raise NonFiniteError(f"non-finite state at layer {li}")

        feats = [cat.reshape(B, n, -1)]
        if a.numerical:
            feats.append(num)
        feats = torch.cat(feats, dim=-1)
        if a.output_mode == "mean-pooled":
            w = valid.to(dtype)[..., None]
            feats = (feats * w).sum(1, keepdim=True) / w.sum(1, keepdim=True)
        logits = feats @ self.classifier
        if rt is not None:
            rt.logits = logits
        return logits, rt

    @staticmethod
    def _read(stream, gates):
        # stream [B, n, V, k]; gates [M, R, V'] with V' <= V
        return torch.einsum("bnvk,mrv->bnmrk", stream[:, :, : gates.shape[-1]], gates)

    @staticmethod
    def _read_num(stream, gates):
        return torch.einsum("bnv,mrv->bnmr", stream[:, :, : gates.shape[-1]], gates)

    def _cat_heads(self, lp, cat, mask, bias, real, mode, tau, gen):
        a = self.arch
        g = real(lp.cat_gates)  # [H, 3, V]
        x = self._read(cat, g)  # [B, n, H, 3, k]
        q, key, val = (x[:, :, :, r].transpose(1, 2) for r in range(3))  # [B, H, n, k]
        pred = real(lp.cat_pred)  # [H, k, k]
        scores = (q @ pred[None]) @ key.transpose(-1, -2)  # [B, H, n, n]
        scores = scores * mask
        row_max = scores.max(dim=-1).values
        bos = torch.zeros_like(scores)
        bos[..., 0] = 1.0
        adjusted = (scores + (1.0 - row_max)[..., None] * bos) * bias
        if mode == "hard":
            logits = adjusted.masked_fill(~mask, -1.0)
            attn = F.one_hot(logits.argmax(-1), logits.shape[-1]).to(adjusted.dtype)
        else:
            if a.attn_relax in ("normalized", "sharpened"):
                # the BOS column keeps every row maximum positive; the clamp
                # only removes roundoff from gate mixtures summing to 1 + eps
                attn = (adjusted * mask).clamp_min(0.0)
                attn = attn / attn.amax(-1, keepdim=True)
                if a.attn_relax == "sharpened" and tau < 1.0:
                    attn = attn ** (1.0 / tau)
                attn = attn / attn.sum(-1, keepdim=True)
            else:
                attn = real(adjusted.masked_fill(~mask, float("-inf")))
            attn = attn.masked_fill(~mask, 0.0)
        out = attn @ val  # [B, H, n, k]
        return out.transpose(1, 2), attn

    def _num_heads(self, lp, cat, num, mask, real):
        g = real(lp.num_gates)  # [H, 2, V]
        x = self._read(cat, g)
        q, key = (x[:, :, :, r].transpose(1, 2) for r in range(2))
        pred = real(lp.num_pred)
        scores = ((q @ pred[None]) @ key.transpose(-1, -2)) * mask  # [B, H, n, n]
        gv = real(lp.num_value_gate)  # [H, V]
        val = torch.einsum("bnv,hv->bhn", num[:, :, : gv.shape[-1]], gv)
        out = (scores @ val[..., None])[..., 0]  # [B, H, n]
        return out.transpose(1, 2)

    @staticmethod
    def _cat_mlp_logits(lp, x):
        # x [B, n, M, 2, k] -> logits [B, n, M, k]
        B, n, M = x.shape[:3]
        h = x.reshape(B * n, M, -1).transpose(0, 1)  # [M, Bn, 2k]
        h = torch.relu(torch.baddbmm(lp.cat_b1, h, lp.cat_w1))
        out = torch.baddbmm(lp.cat_b2, h, lp.cat_w2)
        return out.transpose(0, 1).reshape(B, n, M, -1)

    @staticmethod
    def _num_mlp_logits(lp, x):
        B, n, M = x.shape[:3]
        h = x.reshape(B * n, M, -1).transpose(0, 1)
        h = torch.relu(torch.baddbmm(lp.num_b1, h, lp.num_w1))
        out = torch.baddbmm(lp.num_b2, h, lp.num_w2)
        return out.transpose(0, 1).reshape(B, n, M, -1)

    # -- discretization ----------------------------------------------------

    def discretize(self) -> ir.Program:
        return discretize(self)


# ---------------------------------------------------------------------------
# Batching, loss, gradients
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: torch.Tensor
    lengths: torch.Tensor
    targets: torch.Tensor


def encode_batch(arch: Architecture, examples: list[Example], pad_to: int | None = None) -> Batch:
    index = {t: i for i, t in enumerate(arch.vocab)}
    cls = {c: i for i, c in enumerate(arch.classes)}
    unk = index.get(arch.unk) if arch.unk is not None else None
    n = pad_to or max(len(e.tokens) for e in examples)
    ids = np.full((len(examples), n), index.get(PAD, 0), dtype=np.int64)
    targets = np.full((len(examples), n), IGNORE, dtype=np.int64)
    lengths = np.zeros(len(examples), dtype=np.int64)
    for b, e in enumerate(examples):
        for i, t in enumerate(e.tokens):
            if t in index:
                ids[b, i] = index[t]
            elif unk is not None:
                ids[b, i] = unk
            else:
                raise ValueError(f"out-of-vocabulary token {t!r}")
        for i, t in enumerate(e.targets):
            if t is not None:
                targets[b, i] = cls[t]
        lengths[b] = len(e.tokens)
    if arch.output_mode == "mean-pooled":
        # the pooled label sits in the first labelled position
        first = [next((cls[t] for t in e.targets if t is not None), IGNORE) for e in examples]
        targets = np.asarray(first, dtype=np.int64)[:, None]
    return Batch(torch.from_numpy(ids), torch.from_numpy(lengths), torch.from_numpy(targets))


def token_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over labelled positions."""
    if not (targets != IGNORE).any():
        raise ValueError("all positions are masked")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


def loss(
    model: ProgramModel,
    batch: Batch,
    tau: float,
    generator: torch.Generator | None = None,
    samples: int = 1,
    mode: str = "train",
) -> torch.Tensor:
    """Average over ``samples`` independent noise draws of the masked token loss."""
    if samples < 1:
        raise ValueError("need at least one sample")
    total = 0.0
    for _ in range(samples):
        logits, _ = model(batch.ids, batch.lengths, tau, mode, generator)
        total = total + token_loss(logits, batch.targets)
    return total / samples


def gradients(model: ProgramModel, batch: Batch, tau: float, generator=None, samples: int = 1):
    """Gradient of :func:`loss` for every parameter, keyed by parameter name."""
    model.zero_grad(set_to_none=True)
    loss(model, batch, tau, generator, samples).backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def _argmax_rows(t: torch.Tensor) -> list[int]:
    return [int(x) for x in t.argmax(-1).reshape(-1)]


def hard_copy(model: ProgramModel) -> ProgramModel:
    """A float64 copy used for the hard path and for table enumeration."""
    clone = ProgramModel(model.arch)
    clone.load_state_dict(model.state_dict())
    return clone.double().eval()


@torch.no_grad()
def discretize(model: ProgramModel) -> ir.Program:
    """Maximum-likelihood discrete program of a relaxed model."""
    a = model.arch
    m64 = hard_copy(model)
    k = a.k
    variables: dict[str, ir.VariableDecl] = {}
    token_labels = tuple(a.vocab) + tuple(f"<v{i}>" for i in range(len(a.vocab), k))
    if a.n_embed_vars:
        table = m64.embed_logits.argmax(-1)  # [V, m]
        for i in range(a.n_embed_vars):
            name = f"var{i}_embeddings"
            variables[name] = ir.VariableDecl(
                name, ir.CATEGORICAL, k, "input-token", embedding=tuple(int(x) for x in table[:, i])
            )
    else:
        variables["tokens"] = ir.VariableDecl("tokens", ir.CATEGORICAL, k, "input-token", token_labels)
    variables["positions"] = ir.VariableDecl("positions", ir.CATEGORICAL, k, "input-position")
    if a.numerical:
        variables["ones"] = ir.VariableDecl("ones", ir.NUMERICAL, 1, "input-ones")
    cat_names = [v.name for v in model.cat_vars]
    num_names = [v.name for v in model.num_vars]
    num_scale = {v.name: v.scale for v in model.num_vars}

    layers = []
    for li, lp in enumerate(m64.layers):
        cat_heads, num_heads, mlps = [], [], []
        for h in range(a.n_cat_heads):
            qv, kv, vv = (cat_names[i] for i in _argmax_rows(lp.cat_gates[h]))
            name = f"attn_{li}_{h}"
            pred = ir.Predicate(tuple(_argmax_rows(lp.cat_pred[h])), k)
            cat_heads.append(ir.CatHeadSpec(name, qv, kv, vv, pred, f"{name}_outputs"))
            variables[f"{name}_outputs"] = ir.VariableDecl(
                f"{name}_outputs", ir.CATEGORICAL, variables[vv].cardinality, name
            )
        for h in range(a.n_num_heads):
            qv, kv = (cat_names[i] for i in _argmax_rows(lp.num_gates[h]))
            vv = num_names[int(lp.num_value_gate[h].argmax())]
            name = f"num_attn_{li}_{h}"
            pred = ir.Predicate(tuple(_argmax_rows(lp.num_pred[h])), k)
            num_heads.append(ir.NumHeadSpec(name, qv, kv, vv, pred, f"{name}_outputs"))
            variables[f"{name}_outputs"] = ir.VariableDecl(
                f"{name}_outputs", ir.NUMERICAL, a.max_len * variables[vv].cardinality, name
            )
        for i in range(a.n_cat_mlps):
            ins = tuple(cat_names[j] for j in _argmax_rows(lp.cat_mlp_gates[i]))
            name = f"mlp_{li}_{i}"
            keys = [(x, y) for x in range(k) for y in range(k)]
            onehots = torch.zeros(len(keys), 1, 1, 2, k, dtype=torch.float64)
            for r, (x, y) in enumerate(keys):
                onehots[r, 0, 0, 0, x] = 1.0
                onehots[r, 0, 0, 1, y] = 1.0
            onehots = onehots.expand(len(keys), 1, a.n_cat_mlps, 2, k)
            out = m64._cat_mlp_logits(lp, onehots)[:, 0, i].argmax(-1)
            table = {key: int(o) for key, o in zip(keys, out)}
            mlps.append(ir.LookupMlpSpec(name, ir.CATEGORICAL, ins, table, f"{name}_outputs"))
            variables[f"{name}_outputs"] = ir.VariableDecl(f"{name}_outputs", ir.CATEGORICAL, k, name)
        for i in range(a.n_num_mlps):
            ins = tuple(num_names[j] for j in _argmax_rows(lp.num_mlp_gates[i]))
            name = f"num_mlp_{li}_{i}"
            b0, b1 = (variables[v].cardinality for v in ins)
            keys = [(x, y) for x in range(b0 + 1) for y in range(b1 + 1)]
            x = torch.tensor(keys, dtype=torch.float64) / torch.tensor(
                [num_scale[ins[0]], num_scale[ins[1]]], dtype=torch.float64
            )
            x = x[:, None, None, :].expand(len(keys), 1, a.n_num_mlps, 2)
            out = m64._num_mlp_logits(lp, x)[:, 0, i].argmax(-1)
            table = {key: int(o) for key, o in zip(keys, out)}
            mlps.append(ir.LookupMlpSpec(name, ir.NUMERICAL, ins, table, f"{name}_outputs"))
            variables[f"{name}_outputs"] = ir.VariableDecl(f"{name}_outputs", ir.CATEGORICAL, k, name)
        layers.append(ir.Layer(tuple(cat_heads), tuple(num_heads), tuple(mlps)))

    # classifier rows follow the model's feature layout
    W = model.classifier.detach().double().numpy()
    weights = {}
    for i, name in enumerate(cat_names):
        weights[name] = tuple(tuple(float(w) for w in row) for row in W[i * k : (i + 1) * k])
    if a.numerical:
        off = len(cat_names) * k
        for i, name in enumerate(num_names):
            weights[name] = (tuple(float(w) for w in W[off + i]),)
    # order variables as the model lays them out
    order = cat_names + (num_names if a.numerical else [])
    variables = {name: variables[name] for name in order}
    classifier = ir.ClassifierSpec(tuple(a.classes), weights, a.output_mode)
    return ir.Program(
        vocab=tuple(a.vocab),
        max_len=a.max_len,
        causal=a.causal,
        k=k,
        variables=variables,
        layers=tuple(layers),
        classifier=classifier,
        unk=a.unk,
    )


@torch.no_grad()
def predict_hard(model: ProgramModel, examples: list[Example], batch_size: int = 1000) -> list[list[str]]:
    """Labels from the hard (argmax) path of the model, one list per example."""
    m64 = hard_copy(model)
    a = model.arch
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s : s + batch_size]
        b = encode_batch(a, chunk)
        logits, _ = m64(b.ids, b.lengths, mode="hard")
        pred = logits.argmax(-1)
        for e, row in zip(chunk, pred):
            n = 1 if a.output_mode == "mean-pooled" else len(e.tokens)
            out.append([a.classes[int(y)] for y in row[:n]])
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ProgramModel, path, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": asdict(model.arch),
            "state": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[ProgramModel, dict]:
    try:
        with open(path, "rb") as f:
            blob = torch.load(io.BytesIO(f.read()), weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:  # torch raises assorted pickle/zip errors
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing {CHECKPOINT_FORMAT} header")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    model = ProgramModel(Architecture(**blob["arch"]))
    model.load_state_dict(blob["state"])
    return model, blob.get("extra", {})


def init_from_vectors(model: ProgramModel, vectors: dict[str, np.ndarray], seed: int = 0) -> int:
    """Initialize factored embedding logits from per-token vectors by a seeded random projection.

    Returns the number of vocabulary entries that received a vector.
    """
    a = model.arch
    if not a.n_embed_vars:
        raise ValueError("model uses fixed one-hot token embeddings")
    dim = len(next(iter(vectors.values())))
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((dim, a.n_embed_vars * a.k)) / math.sqrt(dim)
    hits = 0
    with torch.no_grad():
        for i, tok in enumerate(a.vocab):
            if tok in vectors:
                z = np.asarray(vectors[tok], dtype=np.float64) @ proj
                model.embed_logits[i] = torch.from_numpy(z.reshape(a.n_embed_vars, a.k)).float()
                hits += 1
    return hits
