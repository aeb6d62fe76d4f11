"""Good / random / bad subnetwork experiments and their baselines.

For every (task, seed) the full model is fine-tuned once; m-pruning and
s-pruning each find a "good" mask on it.  Random and bad masks of the same
size are then sampled, and every mask is evaluated twice: applied to the
fine-tuned model ("pruned") and retrained from the pre-trained weights with
the classifier re-initialised from the same seed ("retrained").
"""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import ModelConfig, SubnetworkMask, init_params
from .pruning import (
    DEFAULT_HEAD_FRACTION,
    DEFAULT_THRESHOLD,
    DEFAULT_WEIGHT_FRACTION,
    HEADS_AND_MLPS,
    PruneTrace,
    count_surviving,
    count_total,
    magnitude_prune,
    structured_prune,
    subnetwork_fraction,
)
from .tasks import TaskSpec
from .training import Checkpoint, FineTunedModel, TrainConfig, evaluate, fine_tune

log = logging.getLogger(__name__)

GOOD, RANDOM, BAD = "good", "random", "bad"
SUPER_SURVIVOR = "super_survivor"
RANDOM_INIT = "random_init_random_prune"
FULL = "full"
KINDS = (GOOD, RANDOM, BAD, SUPER_SURVIVOR, RANDOM_INIT)
RANDOM_INIT_SEED_OFFSET = 100_003
METHODS = ("m", "s")


class DependencyError(RuntimeError):
    """A required upstream artifact (e.g. the good mask) is missing."""


@dataclass(frozen=True)
class ExperimentSettings:
    train: TrainConfig = TrainConfig()
    seeds: tuple = (0, 1, 2, 3, 4)
    threshold: float = DEFAULT_THRESHOLD
    head_fraction: float = DEFAULT_HEAD_FRACTION
    weight_fraction: float = DEFAULT_WEIGHT_FRACTION
    basis: str = "remaining"
    mode: str = HEADS_AND_MLPS
    methods: tuple = METHODS


@dataclass
class ExperimentRecord:
    task: str
    seed: int
    method: str  # "m", "s" or "none"
    kind: str
    size_fraction: float
    pruned_metric: float | None = None
    retrained_metric: float | None = None
    subnet_mask: SubnetworkMask | None = field(default=None, repr=False)
    weight_mask: dict | None = field(default=None, repr=False)
    trace: str | None = None

    @property
    def key(self) -> str:
        return f"{self.task}__seed{self.seed}__{self.method}__{self.kind}"


# -- mask sampling -------------------------------------------------------------

def _choose(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(pool, size=k, replace=False))


def _flatten_weight_mask(mask: dict) -> tuple:
    names = sorted(mask)
    return names, np.concatenate([mask[n].reshape(-1) for n in names])


def _unflatten_weight_mask(names, flat: np.ndarray, like: dict) -> dict:
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = flat[pos:pos + size].reshape(like[n].shape).copy()
        pos += size
    return out


def _random_bits(alive: np.ndarray, rng) -> np.ndarray:
    k = int(alive.sum())
    out = np.zeros(alive.size, dtype=bool)
    out[_choose(rng, np.arange(alive.size), k)] = True
    return out


def _bad_bits(alive: np.ndarray, rng) -> np.ndarray:
    k = int(alive.sum())
    dead = np.flatnonzero(~alive)
    live = np.flatnonzero(alive)
    out = np.zeros(alive.size, dtype=bool)
    if dead.size >= k:
        out[_choose(rng, dead, k)] = True
    else:
        out[dead] = True
        out[_choose(rng, live, k - dead.size)] = True
    return out


def _resample(good, rng, bits_fn):
    if isinstance(good, SubnetworkMask):
        xi = bits_fn(good.xi.reshape(-1) == 1, rng).reshape(good.xi.shape)
        nu = bits_fn(good.nu == 1, rng)
        return SubnetworkMask(xi.astype(np.int8), nu.astype(np.int8))
    names, flat = _flatten_weight_mask(good)
    return _unflatten_weight_mask(names, bits_fn(flat.astype(bool), rng), good)


def sample_random_subnetwork(good_mask, rng: np.random.Generator):
    """Uniformly random mask with the same number of survivors.

    Heads and MLPs are matched separately for a :class:`SubnetworkMask`; a
    weight mask is matched on its total survivor count.
    """
    return _resample(good_mask, rng, _random_bits)


def sample_bad_subnetwork(good_mask, rng: np.random.Generator):
    """Same-size mask drawn from the non-survivors, topped up from survivors."""
    return _resample(good_mask, rng, _bad_bits)


def super_survivors(masks: list) -> SubnetworkMask:
    """Elements that survive in every mask (elementwise AND)."""
    if len(masks) < 2:
        raise ValueError("need at least two masks")
    first = masks[0]
    for m in masks[1:]:
        if m.xi.shape != first.xi.shape or m.nu.shape != first.nu.shape:
            raise ValueError("mask shapes differ")
    xi = np.logical_and.reduce([m.xi == 1 for m in masks])
    nu = np.logical_and.reduce([m.nu == 1 for m in masks])
    return SubnetworkMask(xi.astype(np.int8), nu.astype(np.int8))


def mask_size(mask) -> tuple:
    if isinstance(mask, SubnetworkMask):
        return mask.num_heads, mask.num_mlps
    return (count_surviving(mask),)


def size_fraction(mask, config: ModelConfig) -> float:
    if isinstance(mask, SubnetworkMask):
        return subnetwork_fraction(mask, config)
    return count_surviving(mask) / count_total(mask)


def sampling_rng(task: str, seed: int, method: str, kind: str) -> np.random.Generator:
    tag = zlib.crc32(f"{task}|{method}|{kind}".encode())
    return np.random.default_rng([seed, tag])


# -- evaluation ----------------------------------------------------------------

def success_criterion(retrained_metric: float, full_metrics_per_seed) -> bool:
    """``retrained >= mean(full) - std(full)`` with the sample standard deviation."""
    full = np.asarray(list(full_metrics_per_seed), dtype=np.float64)
    if full.size < 2:
        raise ValueError("need full-model metrics from at least two seeds")
    return bool(retrained_metric >= full.mean() - full.std(ddof=1))


def _apply(model: FineTunedModel, mask) -> FineTunedModel:
    if isinstance(mask, SubnetworkMask):
        return replace(model, subnet_mask=mask, weight_mask=None)
    return replace(model, subnet_mask=SubnetworkMask.full(model.config), weight_mask=mask)


def _retrain(checkpoint: Checkpoint, task: TaskSpec, seed: int, mask, train: TrainConfig,
             body: dict | None = None) -> float:
    tc = train.with_seed(seed)
    if isinstance(mask, SubnetworkMask):
        _, metric = fine_tune(checkpoint, task, tc, subnet_mask=mask, body=body)
    else:
        _, metric = fine_tune(checkpoint, task, tc, weight_mask=mask, body=body)
    return metric


def lth_experiment(checkpoint: Checkpoint, task: TaskSpec, seed: int, method: str, kind: str, *,
                   good_mask=None, finetuned: FineTunedModel | None = None,
                   settings: ExperimentSettings = ExperimentSettings(),
                   retrain: bool = True) -> ExperimentRecord:
    """Evaluate one subnetwork (a) pruned and (b) rewound to pre-trained weights and retrained.

    ``good_mask`` is required for every kind; for ``kind="good"`` it is the
    mask itself, for ``random``/``bad`` it is the size reference.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if good_mask is None:
        raise DependencyError(f"{kind} subnetwork for {task.name}/seed {seed} needs the good mask")
    if finetuned is None:
        finetuned, _ = fine_tune(checkpoint, task, settings.train.with_seed(seed))
    if kind in (GOOD, SUPER_SURVIVOR):
        mask = good_mask
    elif kind == RANDOM:
        mask = sample_random_subnetwork(good_mask, sampling_rng(task.name, seed, method, kind))
    elif kind == BAD:
        mask = sample_bad_subnetwork(good_mask, sampling_rng(task.name, seed, method, kind))
    else:
        raise ValueError(f"unsupported kind {kind!r}")
    pruned = evaluate(_apply(finetuned, mask))
    retrained = _retrain(checkpoint, task, seed, mask, settings.train) if retrain else None
    is_s = isinstance(mask, SubnetworkMask)
    return ExperimentRecord(task.name, seed, method, kind, size_fraction(mask, checkpoint.config),
                            pruned, retrained, mask if is_s else None, None if is_s else mask)


def random_init_baseline(config: ModelConfig, task: TaskSpec, size_reference: dict,
                         settings: ExperimentSettings = ExperimentSettings(),
                         checkpoint_info: dict | None = None) -> list:
    """Fine-tune randomly initialised encoders under random s-masks.

    ``size_reference`` maps seed -> the s-pruned bad mask whose head and MLP
    counts the random mask must match.
    """
    records = []
    for seed, ref in sorted(size_reference.items()):
        rng = sampling_rng(task.name, seed, "s", RANDOM_INIT)
        mask = sample_random_subnetwork(ref, rng)
        body = init_params(config, rng_seed=RANDOM_INIT_SEED_OFFSET + seed)
        ck = Checkpoint(config, body, checkpoint_info or {})
        metric = _retrain(ck, task, seed, mask, settings.train)
        records.append(ExperimentRecord(task.name, seed, "s", RANDOM_INIT,
                                        subnetwork_fraction(mask, config), None, metric, mask))
    return records


# -- orchestration -------------------------------------------------------------

@dataclass
class TaskSeedResult:
    task: str
    seed: int
    full_metric: float
    records: list
    traces: dict  # "m" / "s" -> PruneTrace


def run_task_seed(checkpoint: Checkpoint, task: TaskSpec, seed: int,
                  settings: ExperimentSettings = ExperimentSettings()) -> TaskSeedResult:
    """Full fine-tune, both pruning loops, and good/random/bad for each method."""
    finetuned, full_metric = fine_tune(checkpoint, task, settings.train.with_seed(seed))
    goods, traces = {}, {}
    if "m" in settings.methods:
        goods["m"], traces["m"] = magnitude_prune(finetuned, settings.threshold,
                                                  settings.weight_fraction, settings.basis)
    if "s" in settings.methods:
        goods["s"], traces["s"] = structured_prune(finetuned, settings.mode, settings.threshold,
                                                   settings.head_fraction)
    records = [ExperimentRecord(task.name, seed, "none", FULL, 1.0, full_metric, full_metric)]
    for method, good in goods.items():
        for kind in (GOOD, RANDOM, BAD):
            rec = lth_experiment(checkpoint, task, seed, method, kind, good_mask=good,
                                 finetuned=finetuned, settings=settings)
            rec.trace = f"{task.name}__seed{seed}__{method}.csv"
            records.append(rec)
    log.info("%s seed %d: full %.3f", task.name, seed, full_metric)
    return TaskSeedResult(task.name, seed, full_metric, records, traces)


def super_survivor_records(checkpoint: Checkpoint, task: TaskSpec, good_masks: dict,
                           settings: ExperimentSettings = ExperimentSettings()) -> list:
    """Retrain the all-seeds intersection of the s-pruned good masks, per seed."""
    sup = super_survivors([good_masks[s] for s in sorted(good_masks)])
    out = []
    for seed in sorted(good_masks):
        out.append(lth_experiment(checkpoint, task, seed, "s", SUPER_SURVIVOR, good_mask=sup,
                                  settings=settings))
    return out


@dataclass
class ExperimentResult:
    records: list
    traces: dict  # (task, seed, method) -> PruneTrace
    full_metrics: dict  # task -> {seed: metric}

    def select(self, task=None, method=None, kind=None) -> list:
        return [r for r in self.records
                if (task is None or r.task == task)
                and (method is None or r.method == method)
                and (kind is None or r.kind == kind)]


def _job(args):
    checkpoint, task, seed, settings = args
    return run_task_seed(checkpoint, task, seed, settings)


def run_experiment(checkpoint: Checkpoint, suite: list,
                   settings: ExperimentSettings = ExperimentSettings(),
                   workers: int = 1, super_survivor: bool = True,
                   random_init: bool = True) -> ExperimentResult:
    """The whole protocol over ``suite`` x ``settings.seeds``.

    Jobs are independent per (task, seed); ``workers > 1`` runs them in a
    process pool.  Output order is deterministic either way.
    """
    jobs = [(checkpoint, task, seed, settings) for task in suite for seed in settings.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    records, traces, full = [], {}, {}
    by_task = {t.name: t for t in suite}
    for res in results:
        records.extend(res.records)
        full.setdefault(res.task, {})[res.seed] = res.full_metric
        for method, tr in res.traces.items():
            traces[(res.task, res.seed, method)] = tr
    for name, task in by_task.items():
        task_recs = [r for r in records if r.task == name and r.method == "s"]
        good = {r.seed: r.subnet_mask for r in task_recs if r.kind == GOOD}
        bad = {r.seed: r.subnet_mask for r in task_recs if r.kind == BAD}
        if super_survivor and len(good) >= 2:
            records.extend(super_survivor_records(checkpoint, task, good, settings))
        if random_init and bad:
            records.extend(random_init_baseline(checkpoint.config, task, bad, settings))
    return ExperimentResult(records, traces, full)


def summarize(result: ExperimentResult, metric: str = "retrained_metric") -> dict:
    """(task, method, kind) -> (mean, std over seeds) of the chosen metric."""
    groups: dict = {}
    for r in result.records:
        v = getattr(r, metric)
        if v is None:
            continue
        groups.setdefault((r.task, r.method, r.kind), []).append(v)
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
            for k, v in groups.items()}


def trace_of(result: ExperimentResult, task: str, seed: int, method: str) -> PruneTrace:
    return result.traces[(task, seed, method)]
