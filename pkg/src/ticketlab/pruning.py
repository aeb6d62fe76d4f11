"""Magnitude pruning of individual weights and importance-based pruning of
whole attention heads and MLP blocks.

Both loops prune a fine-tuned model without retraining between iterations and
stop at the last mask whose dev metric stays at or above ``threshold`` times
the full model's dev metric.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import (
    ConfigurationError,
    ModelConfig,
    SubnetworkMask,
    forward,
    head_param_names,
    is_prunable,
    mlp_param_names,
)
from .tasks import Dataset, TaskSpec
from .training import Checkpoint, FineTunedModel, TrainConfig, _loss, evaluate, fine_tune

HEADS_ONLY = "heads_only"
MLPS_ONLY = "mlps_only"
HEADS_AND_MLPS = "heads_and_mlps"
MODES = (HEADS_ONLY, MLPS_ONLY, HEADS_AND_MLPS)

DEFAULT_THRESHOLD = 0.9
DEFAULT_HEAD_FRACTION = 0.10
DEFAULT_WEIGHT_FRACTION = 0.10


class PruningExhausted(Exception):
    """Nothing left to prune for the requested mode."""


@dataclass
class ImportanceScores:
    head_scores: np.ndarray  # layers x heads; -inf for already pruned heads
    mlp_scores: np.ndarray  # layers; -inf for already pruned MLPs
    sample_count: int


@dataclass
class TraceEntry:
    iteration: int
    surviving_fraction: float
    dev_metric: float
    masked_elements_this_step: int
    subnet_mask: SubnetworkMask | None = None
    weight_mask: dict | None = field(default=None, repr=False)
    phase: str = ""


@dataclass
class PruneTrace:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def append(self, entry: TraceEntry):
        self.entries.append(entry)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "surviving_fraction", "dev_metric", "masked_elements_this_step"])
        for e in self.entries:
            w.writerow([e.iteration, f"{e.surviving_fraction:.6f}", f"{e.dev_metric:.6f}",
                        e.masked_elements_this_step])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PruneTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([TraceEntry(int(r["iteration"]), float(r["surviving_fraction"]),
                               float(r["dev_metric"]), int(r["masked_elements_this_step"]))
                    for r in rows])


# -- structured pruning --------------------------------------------------------

def importance_scores(model: FineTunedModel, dev_data: Dataset | None = None,
                      batch_size: int = 128) -> ImportanceScores:
    """Mean absolute per-sample gradient of the loss w.r.t. each head/MLP gate.

    Each sample gets its own copy of every mask variable, so one backward pass
    over a batch yields per-sample sensitivities.  Pruned elements score -inf.
    """
    data = model.task.dev if dev_data is None else dev_data
    if data is None or len(data) == 0:
        raise ValueError("importance scores need at least one sample")
    cfg = model.config
    mask = model.subnet_mask
    head_sum = np.zeros((cfg.num_layers, cfg.num_heads))
    mlp_sum = np.zeros(cfg.num_layers)
    for s in range(0, len(data), batch_size):
        tokens = data.tokens[s:s + batch_size]
        labels = data.labels[s:s + batch_size]
        b = len(tokens)
        head_gates = Tensor(np.ones((b, cfg.num_layers, cfg.num_heads)), requires_grad=True)
        mlp_gates = Tensor(np.ones((b, cfg.num_layers)), requires_grad=True)
        r = forward(model.params, cfg, mask, model.weight_mask, tokens,
                    head_gates=head_gates, mlp_gates=mlp_gates)
        loss = _loss(model.task, r.logits, labels, reduction="sum")
        loss.backward()
        if head_gates.grad is not None:
            head_sum += np.abs(head_gates.grad).sum(axis=0)
        if mlp_gates.grad is not None:
            mlp_sum += np.abs(mlp_gates.grad).sum(axis=0)
    n = len(data)
    heads = np.where(mask.xi == 1, head_sum / n, -np.inf)
    mlps = np.where(mask.nu == 1, mlp_sum / n, -np.inf)
    return ImportanceScores(heads, mlps, n)


def normalize_head_scores_layerwise(scores: ImportanceScores) -> ImportanceScores:
    """Divide each layer's (unpruned) head scores by their l2 norm.

    All-zero layers stay zero; -inf sentinels and MLP scores are untouched.
    """
    heads = scores.head_scores.copy()
    for l in range(heads.shape[0]):
        live = np.isfinite(heads[l])
        norm = np.sqrt(np.sum(heads[l, live] ** 2))
        if norm > 0:
            heads[l, live] = heads[l, live] / norm
    return ImportanceScores(heads, scores.mlp_scores.copy(), scores.sample_count)


def heads_per_step(config: ModelConfig, fraction: float = DEFAULT_HEAD_FRACTION) -> int:
    return max(1, math.ceil(round(fraction * config.total_heads, 9)))


def _lowest(scores: np.ndarray, alive: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the ``k`` lowest-scoring alive items; ties by index."""
    flat_scores = scores.reshape(-1)
    idx = np.flatnonzero(alive.reshape(-1))
    order = np.lexsort((idx, flat_scores[idx]))
    return idx[order[:k]]


def structured_prune_step(mask: SubnetworkMask, scores: ImportanceScores, mode: str,
                          head_fraction: float = DEFAULT_HEAD_FRACTION) -> SubnetworkMask:
    """Mask the lowest-scoring heads (ceil of ``head_fraction`` of all heads)
    and/or the single lowest-scoring MLP."""
    if mode not in MODES:
        raise ValueError(f"unknown pruning mode {mode!r}")
    new = mask.copy()
    n_heads_alive = int(mask.xi.sum())
    n_mlps_alive = int(mask.nu.sum())
    do_heads = mode in (HEADS_ONLY, HEADS_AND_MLPS) and n_heads_alive > 0
    do_mlps = mode in (MLPS_ONLY, HEADS_AND_MLPS) and n_mlps_alive > 0
    if not (do_heads or do_mlps):
        raise PruningExhausted(mode)
    if do_heads:
        total = mask.xi.size
        k = max(1, math.ceil(round(head_fraction * total, 9)))
        for flat in _lowest(scores.head_scores, mask.xi == 1, k):
            new.xi.reshape(-1)[flat] = 0
    if do_mlps:
        for flat in _lowest(scores.mlp_scores, mask.nu == 1, 1):
            new.nu[flat] = 0
    return new


def structure_param_counts(config: ModelConfig) -> tuple:
    """Parameter count of one head and of one MLP block."""
    d, dh, ff = config.model_dim, config.head_dim, config.ff_dim
    return 4 * d * dh, 2 * d * ff + ff + d


def subnetwork_fraction(mask: SubnetworkMask, config: ModelConfig) -> float:
    """Fraction of head + MLP parameters that survive the mask."""
    per_head, per_mlp = structure_param_counts(config)
    total = per_head * config.total_heads + per_mlp * config.num_layers
    return (per_head * mask.num_heads + per_mlp * mask.num_mlps) / total


def _with_mask(model: FineTunedModel, subnet_mask=None, weight_mask=None) -> FineTunedModel:
    return replace(model,
                   subnet_mask=model.subnet_mask if subnet_mask is None else subnet_mask,
                   weight_mask=model.weight_mask if weight_mask is None else weight_mask)


def _target(full_metric: float, threshold: float) -> float:
    if not np.isfinite(full_metric):
        raise ConfigurationError("full model dev metric is not finite")
    if threshold < 0:
        raise ConfigurationError("threshold must be non-negative")
    return threshold * full_metric


def structured_prune(model: FineTunedModel, mode: str = HEADS_AND_MLPS,
                     threshold: float = DEFAULT_THRESHOLD,
                     head_fraction: float = DEFAULT_HEAD_FRACTION):
    """Iterative score -> normalize -> prune -> re-evaluate on a fine-tuned model.

    In ``heads_and_mlps`` mode, once a joint step would fall below the
    threshold the loop continues with heads alone, then with MLPs alone.
    Returns ``(mask, trace)``; the trace holds the accepted masks only.
    A full model that already misses ``threshold * full`` (any threshold
    above 1 with a positive metric) is returned unpruned.
    """
    if mode not in MODES:
        raise ValueError(f"unknown pruning mode {mode!r}")
    cfg = model.config
    current = SubnetworkMask.full(cfg)
    full_metric = evaluate(_with_mask(model, current))
    target = _target(full_metric, threshold)
    trace = PruneTrace([TraceEntry(0, 1.0, full_metric, 0, current.copy(), phase="full")])
    if full_metric < target:
        return current, trace
    phases = [HEADS_AND_MLPS, HEADS_ONLY, MLPS_ONLY] if mode == HEADS_AND_MLPS else [mode]
    for phase in phases:
        while True:
            probe = _with_mask(model, current)
            scores = normalize_head_scores_layerwise(importance_scores(probe))
            try:
                candidate = structured_prune_step(current, scores, phase, head_fraction)
            except PruningExhausted:
                break
            metric = evaluate(_with_mask(model, candidate))
            if metric < target:
                break
            removed = (current.num_heads - candidate.num_heads) + (current.num_mlps - candidate.num_mlps)
            current = candidate
            trace.append(TraceEntry(len(trace), subnetwork_fraction(current, cfg), metric, removed,
                                    current.copy(), phase=phase))
    return current, trace


def structured_prune_loop(checkpoint: Checkpoint, task: TaskSpec, seed: int,
                          mode: str = HEADS_AND_MLPS, *, train_config: TrainConfig = TrainConfig(),
                          threshold: float = DEFAULT_THRESHOLD,
                          head_fraction: float = DEFAULT_HEAD_FRACTION,
                          finetuned: FineTunedModel | None = None):
    """Fine-tune with ``seed`` (unless ``finetuned`` is given), then s-prune."""
    if finetuned is None:
        finetuned, _ = fine_tune(checkpoint, task, train_config.with_seed(seed))
    return structured_prune(finetuned, mode, threshold, head_fraction)


# -- magnitude pruning -----------------------------------------------------------

def full_weight_mask(params: dict) -> dict:
    """All-ones mask over every prunable (non-embedding body) weight matrix."""
    return {k: np.ones(v.shape, dtype=bool) for k, v in sorted(params.items()) if is_prunable(k, v)}


def count_surviving(weight_mask: dict) -> int:
    return int(sum(int(m.sum()) for m in weight_mask.values()))


def count_total(weight_mask: dict) -> int:
    return int(sum(m.size for m in weight_mask.values()))


def magnitude_prune_step(params: dict, weight_mask: dict, fraction: float = DEFAULT_WEIGHT_FRACTION,
                         basis: str = "remaining") -> dict:
    """Mask the globally smallest-magnitude surviving weights.

    ``basis="remaining"`` prunes ``floor(fraction * surviving)`` weights,
    ``basis="original"`` prunes ``floor(fraction * total)``; at least one
    weight is pruned per step.  Ties resolve by parameter name, then by flat
    index.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    if basis not in ("remaining", "original"):
        raise ValueError(f"unknown basis {basis!r}")
    names = sorted(weight_mask)
    remaining = count_surviving(weight_mask)
    if remaining == 0:
        raise PruningExhausted("no weights left")
    reference = remaining if basis == "remaining" else count_total(weight_mask)
    k = min(remaining, max(1, int(math.floor(fraction * reference + 1e-9))))
    mags, owners, offsets = [], [], []
    for i, name in enumerate(names):
        alive = np.flatnonzero(weight_mask[name].reshape(-1))
        mags.append(np.abs(params[name].reshape(-1)[alive]))
        owners.append(np.full(alive.size, i))
        offsets.append(alive)
    mags = np.concatenate(mags)
    owners = np.concatenate(owners)
    offsets = np.concatenate(offsets)
    pick = np.argsort(mags, kind="stable")[:k]
    new = {name: m.copy() for name, m in weight_mask.items()}
    for o, off in zip(owners[pick], offsets[pick]):
        new[names[o]].reshape(-1)[off] = False
    return new


def magnitude_prune(model: FineTunedModel, threshold: float = DEFAULT_THRESHOLD,
                    fraction: float = DEFAULT_WEIGHT_FRACTION, basis: str = "remaining"):
    """Iteratively mask small weights of a fine-tuned model; returns ``(mask, trace)``.

    As in :func:`structured_prune`, a full model below the target is returned unpruned.
    """
    current = full_weight_mask(model.params)
    total = count_total(current)
    full_metric = evaluate(_with_mask(model, weight_mask=current))
    target = _target(full_metric, threshold)
    trace = PruneTrace([TraceEntry(0, 1.0, full_metric, 0, weight_mask=current, phase="full")])
    if full_metric < target:
        return current, trace
    while True:
        try:
            candidate = magnitude_prune_step(model.params, current, fraction, basis)
        except PruningExhausted:
            break
        metric = evaluate(_with_mask(model, weight_mask=candidate))
        if metric < target:
            break
        removed = count_surviving(current) - count_surviving(candidate)
        current = candidate
        trace.append(TraceEntry(len(trace), count_surviving(current) / total, metric, removed,
                                weight_mask=current, phase="magnitude"))
    return current, trace


def magnitude_prune_loop(checkpoint: Checkpoint, task: TaskSpec, seed: int, *,
                         train_config: TrainConfig = TrainConfig(),
                         threshold: float = DEFAULT_THRESHOLD,
                         fraction: float = DEFAULT_WEIGHT_FRACTION, basis: str = "remaining",
                         finetuned: FineTunedModel | None = None):
    """Fine-tune once with ``seed`` (unless given), then m-prune without rewinding."""
    if finetuned is None:
        finetuned, _ = fine_tune(checkpoint, task, train_config.with_seed(seed))
    return magnitude_prune(finetuned, threshold, fraction, basis)


def block_survival(weight_mask: dict, config: ModelConfig) -> dict:
    """Surviving weight counts per head (L x N_h), per MLP (L) and elsewhere.

    ``heads.sum() + mlps.sum() + other`` equals the total survivor count.
    """
    heads = np.zeros((config.num_layers, config.num_heads), dtype=np.int64)
    head_totals = np.zeros_like(heads)
    mlps = np.zeros(config.num_layers, dtype=np.int64)
    mlp_totals = np.zeros_like(mlps)
    seen = set()
    for l in range(config.num_layers):
        for h in range(config.num_heads):
            for name in head_param_names(l, h):
                if name in weight_mask:
                    heads[l, h] += int(weight_mask[name].sum())
                    head_totals[l, h] += weight_mask[name].size
                    seen.add(name)
        for name in mlp_param_names(l):
            if name in weight_mask:
                mlps[l] += int(weight_mask[name].sum())
                mlp_totals[l] += weight_mask[name].size
                seen.add(name)
    other = sum(int(m.sum()) for k, m in weight_mask.items() if k not in seen)
    return {
        "heads": heads,
        "mlps": mlps,
        "other": other,
        "head_fraction": heads / np.maximum(head_totals, 1),
        "mlp_fraction": mlps / np.maximum(mlp_totals, 1),
    }


def importance_gradient_identity(model: FineTunedModel, tokens, labels) -> tuple:
    """Return (autograd dL/dxi, <head output, dL/dMHAtt>) per head for a batch.

    Both are ``(batch, L, N_h)`` arrays; the second is computed from the
    retained gradient of each layer's multi-head sum.
    """
    cfg = model.config
    b = len(tokens)
    gates = Tensor(np.ones((b, cfg.num_layers, cfg.num_heads)), requires_grad=True)
    r = forward(model.params, cfg, model.subnet_mask, model.weight_mask, tokens, head_gates=gates)
    ctx = r.ctx
    for t in ctx.mhatt_outputs.values():
        t.retain_grad()
    loss = _loss(model.task, r.logits, np.asarray(labels), reduction="sum")
    loss.backward()
    inner = np.zeros_like(gates.values)
    for (l, h), out in ctx.head_outputs.items():
        upstream = ctx.mhatt_outputs[l].grad
        inner[:, l, h] = np.sum(out.values * upstream, axis=(1, 2))
    analytic = gates.grad if gates.grad is not None else np.zeros_like(gates.values)
    return analytic, inner
