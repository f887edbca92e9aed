"""Optimization loop, temperature schedule, grid search and metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import torch

from . import interp
from .ir import Program
from .model import Architecture, ProgramModel, discretize, encode_batch, loss, predict_hard, save_checkpoint
from .tasks import Dataset, Example

log = logging.getLogger(__name__)

PROFILES = {
    "paper": {"epochs": 250, "batch_size": 512, "train_samples": None},
    "desk": {"epochs": 100, "batch_size": 256, "train_samples": 5000},
}


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 512
    learning_rate: float = 0.05
    tau_start: float = 3.0
    tau_end: float = 0.01
    samples: int = 1
    seeds: int = 5
    n_layers: int = 2
    n_heads: int = 4
    n_mlps: int = 2
    numerical_split: str = "even"
    mlp_hidden: int = 64
    n_embed_vars: int = 0
    output_mode: str = "per-token"
    train_samples: int | None = None
    grid_layers: tuple[int, ...] = (2, 3)
    grid_heads: tuple[int, ...] = (4, 8)
    grid_mlps: tuple[int, ...] = (2, 4)
    validate_every: int = 1
    attn_relax: str = "normalized"

    def __post_init__(self):
        if not self.tau_start > self.tau_end > 0:
            raise ValueError("need tau_start > tau_end > 0")
        for name in ("batch_size", "samples", "seeds", "n_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.n_heads < 0 or self.n_mlps < 0:
            raise ValueError("counts must be non-negative")
        if self.numerical_split not in ("even", "none"):
            raise ValueError(f"numerical_split must be 'even' or 'none', got {self.numerical_split!r}")
        for name in ("grid_layers", "grid_heads", "grid_mlps"):
            setattr(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**d)

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r}")
        return cls(**{**PROFILES[name], **overrides})

    def split_modules(self) -> dict[str, int]:
        """Per-layer head/MLP counts after the categorical/numerical split."""
        if self.numerical_split == "none":
            return dict(n_cat_heads=self.n_heads, n_num_heads=0, n_cat_mlps=self.n_mlps, n_num_mlps=0)
        hc = (self.n_heads + 1) // 2
        mc = (self.n_mlps + 1) // 2
        return dict(
            n_cat_heads=hc, n_num_heads=self.n_heads - hc, n_cat_mlps=mc, n_num_mlps=self.n_mlps - mc
        )


@dataclass
class RunRecord:
    config: dict
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    test_metric: float | None = None
    wall_time: float = 0.0
    checkpoint: str | None = None
    failed: bool = False
    error: str | None = None
    model: ProgramModel | None = field(default=None, repr=False, compare=False)

    @property
    def final_val(self) -> float:
        return self.val_metric[-1] if self.val_metric else float("nan")

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("model")
        return d


def temperature(step: int, total_steps: int, tau_start: float = 3.0, tau_end: float = 0.01) -> float:
    """Geometric schedule from ``tau_start`` at step 0 to ``tau_end`` at the last step."""
    if total_steps < 2:
        raise ValueError("the schedule needs at least two steps")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step == total_steps - 1:
        return tau_end
    return tau_start * (tau_end / tau_start) ** (step / (total_steps - 1))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def token_accuracy(pred: Sequence[Sequence[str]], examples: Sequence[Example]) -> float:
    correct = total = 0
    for p, e in zip(pred, examples):
        for y, t in zip(p, e.targets):
            if t is None:
                continue
            total += 1
            correct += y == t
    if total == 0:
        raise ValueError("no labelled positions")
    return correct / total


def iob2_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Chunks as (start, end_exclusive, type); an I- tag that cannot continue opens a chunk."""
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, t = tag.partition("-")
        continues = prefix == "I" and kind == t
        if start is not None and not continues:
            spans.add((start, i, kind))
            start, kind = None, None
        if prefix == "B" or (prefix == "I" and not continues):
            start, kind = i, t
    return spans


def span_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> dict[str, float]:
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        ps, gs = iob2_spans(p), iob2_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def _labelled(pred, examples):
    p_out, g_out = [], []
    for p, e in zip(pred, examples):
        keep = [i for i, t in enumerate(e.targets) if t is not None]
        p_out.append([p[i] for i in keep])
        g_out.append([e.targets[i] for i in keep])
    return p_out, g_out


def evaluate(
    subject: Program | ProgramModel, examples: Sequence[Example], metric: str = "token-accuracy"
) -> float:
    """Metric of a discrete program (or a model's hard path) on labelled examples."""
    if not examples:
        raise ValueError("empty split")
    if metric not in ("token-accuracy", "span-f1"):
        raise ValueError(f"unknown metric {metric!r}")
    if metric == "span-f1" and not any(
        t is not None and t[:2] in ("B-", "I-") for e in examples for t in e.targets
    ):
        raise ValueError("span-f1 needs IOB2-tagged targets")
    if isinstance(subject, ProgramModel):
        pred = predict_hard(subject, list(examples))
    else:
        pred = [interp.predict(subject, e.tokens) for e in examples]
    if metric == "token-accuracy":
        return token_accuracy(pred, examples)
    return span_f1(*_labelled(pred, examples))["f1"]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def build_architecture(config: TrainConfig, data: Dataset) -> Architecture:
    return Architecture(
        vocab=list(data.vocab),
        classes=list(data.labels),
        max_len=data.max_len,
        k=data.k,
        n_layers=config.n_layers,
        causal=data.causal,
        mlp_hidden=config.mlp_hidden,
        n_embed_vars=config.n_embed_vars,
        output_mode=config.output_mode,
        unk=data.meta.get("unk"),
        attn_relax=config.attn_relax,
        **config.split_modules(),
    )


def _train_rows(config: TrainConfig, data: Dataset) -> list[Example]:
    rows = data.train
    if config.train_samples is not None:
        rows = rows[: config.train_samples]
    return rows


def train_model(
    config: TrainConfig,
    data: Dataset,
    seed: int = 0,
    metric: str = "token-accuracy",
    checkpoint_dir: str | Path | None = None,
) -> RunRecord:
    """Train one relaxed model and track the discretized validation metric per epoch."""
    torch.manual_seed(seed)
    start = time.perf_counter()
    record = RunRecord(config=asdict(config), seed=seed)
    model = ProgramModel(build_architecture(config, data), seed=seed)
    rows = _train_rows(config, data)
    batch = encode_batch(model.arch, rows, pad_to=data.max_len)
    n = len(rows)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    noise = torch.Generator().manual_seed(seed + 1)
    order_gen = torch.Generator().manual_seed(seed + 2)
    step = 0
    clip = False
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=order_gen)
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            idx = perm[s * config.batch_size : (s + 1) * config.batch_size]
            tau = temperature(step, total_steps, config.tau_start, config.tau_end) if total_steps > 1 else config.tau_end
            sub = type(batch)(batch.ids[idx], batch.lengths[idx], batch.targets[idx])
            opt.zero_grad(set_to_none=True)
            try:
                value = loss(model, sub, tau, noise, config.samples)
            except FloatingPointError as e:
                return _fail(record, model, start, str(e))
            if not torch.isfinite(value):
                return _fail(record, model, start, f"non-finite loss at step {step}")
            value.backward()
            grads_ok = all(p.grad is None or torch.isfinite(p.grad).all() for p in model.parameters())
            if not grads_ok:
                # NaN guard: drop the bad step and clip from here on
                opt.zero_grad(set_to_none=True)
                clip = True
            else:
                if clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
                opt.step()
            epoch_loss += float(value.detach()) * len(idx)
            step += 1
        record.train_loss.append(epoch_loss / n)
        if (epoch + 1) % config.validate_every == 0 or epoch == config.epochs - 1:
            record.val_metric.append(evaluate(model, data.val, metric) if data.val else float("nan"))
            log.debug("seed %d epoch %d loss %.4f val %.4f", seed, epoch, record.train_loss[-1], record.val_metric[-1])
    if config.epochs == 0 and data.val:
        record.val_metric.append(evaluate(model, data.val, metric))
    record.wall_time = time.perf_counter() - start
    record.model = model
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"seed{seed}.pt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path, {"seed": seed, "config": asdict(config)})
        record.checkpoint = str(path)
    return record


def _fail(record, model, start, msg):
    record.failed = True
    record.error = msg
    record.wall_time = time.perf_counter() - start
    record.model = model
    return record


def finalize(record: RunRecord, data: Dataset, metric: str = "token-accuracy") -> Program:
    """Discretize the trained model and score the program once on the test split."""
    program = discretize(record.model)
    record.test_metric = evaluate(program, data.test, metric)
    return program


# ---------------------------------------------------------------------------
# Multi-seed grid search
# ---------------------------------------------------------------------------


def grid_configs(config: TrainConfig, grid: bool = True) -> list[TrainConfig]:
    if not grid:
        return [config]
    shapes = [(l, h, m) for l in config.grid_layers for h in config.grid_heads for m in config.grid_mlps]
    if not shapes:
        raise ValueError("empty grid")
    out = []
    for l, h, m in shapes:
        d = asdict(config)
        d.update(n_layers=l, n_heads=h, n_mlps=m)
        out.append(TrainConfig.from_dict(d))
    return out


def worker_count() -> int:
    raw = os.environ.get("TP_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TP_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _run_one(args):
    config, data, seed, metric, ckpt = args
    torch.set_num_threads(1)
    try:
        return train_model(config, data, seed, metric, ckpt)
    except (ValueError, FloatingPointError, RuntimeError) as e:
        return RunRecord(config=asdict(config), seed=seed, failed=True, error=str(e))


def _shape(config: dict) -> str:
    return f"{config['n_layers']}x{config['n_heads']}x{config['n_mlps']}"


def grid_search(
    config: TrainConfig,
    data: Dataset,
    metric: str = "token-accuracy",
    grid: bool = True,
    out_dir: str | Path | None = None,
    base_seed: int = 0,
    workers: int | None = None,
) -> tuple[RunRecord, Program, list[dict]]:
    """Train every (shape, seed) pair, pick the best final validation metric.

    Only the selected run is scored on the test split.  Returns the selected
    record, its discrete program and the leaderboard (best first).
    """
    configs = grid_configs(config, grid)
    out = Path(out_dir) if out_dir is not None else None
    jobs = []
    for cfg in configs:
        for s in range(config.seeds):
            ckpt = out / "checkpoints" / _shape(asdict(cfg)) if out is not None else None
            jobs.append((cfg, data, base_seed + s, metric, ckpt))
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "runs.jsonl", "a", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    ok = [r for r in records if not r.failed and not math.isnan(r.final_val)]
    if not ok:
        errors = "; ".join(sorted({str(r.error) for r in records}))
        raise RuntimeError(f"all {len(records)} runs failed: {errors}")
    # stable: ties keep the earlier (smaller shape, smaller seed) run
    ranked = sorted(ok, key=lambda r: -r.final_val)
    best = ranked[0]
    program = finalize(best, data, metric)
    kept = {id(r) for r in ok}
    board = [
        {
            "shape": _shape(r.config),
            "seed": r.seed,
            "val": r.final_val if id(r) in kept else None,
            "test": r.test_metric if r is best else None,
            "wall_time": round(r.wall_time, 3),
            "checkpoint": r.checkpoint,
            "error": r.error,
        }
        for r in ranked + [r for r in records if id(r) not in kept]
    ]
    if out is not None:
        with open(out / "leaderboard.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=["shape", "seed", "val", "test", "wall_time", "checkpoint", "error"])
            w.writeheader()
            for row in board:
                w.writerow(row)
    return best, program, board
