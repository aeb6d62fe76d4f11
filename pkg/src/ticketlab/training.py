"""Masked-LM pretraining, fine-tuning under masks, and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import metrics
from .autograd import Tensor
from .encoder import (
    LN_EPS,
    ModelConfig,
    SubnetworkMask,
    _Ctx,
    check_masks,
    copy_params,
    encode,
    forward,
    init_classifier,
    init_params,
    is_task_head,
)
from .tasks import CLS, MASK, SEP, Dataset, TaskSpec

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.beta1,
                           self.beta2, self.adam_eps, seed)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 8000
    batch_size: int = 32
    learning_rate: float = 2e-3
    mask_prob: float = 0.15
    corpus_size: int = 20000
    heldout_size: int = 1000
    seed: int = 0


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Checkpoint:
    """Pre-trained weights (body, embeddings, MLM head) plus the model config."""

    config: ModelConfig
    params: dict
    info: dict = field(default_factory=dict)

    def body(self) -> dict:
        return {k: v for k, v in self.params.items() if not is_task_head(k)}


@dataclass
class FineTunedModel:
    config: ModelConfig
    params: dict
    task: TaskSpec
    subnet_mask: SubnetworkMask
    weight_mask: dict | None = None


# -- masked language modelling -------------------------------------------------

def _init_mlm_head(config: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng([seed, 31337])
    d = config.model_dim
    return {
        "mlm.W": rng.normal(0.0, 0.02, size=(d, d)),
        "mlm.b": np.zeros(d),
        "mlm.ln_gain": np.ones(d),
        "mlm.ln_bias": np.zeros(d),
        "mlm.bias": np.zeros(config.vocab_size),
    }


def _mask_tokens(tokens: np.ndarray, rng: np.random.Generator, prob: float, vocab: int):
    special = (tokens == CLS) | (tokens == SEP)
    chosen = (rng.random(tokens.shape) < prob) & ~special
    inputs = tokens.copy()
    r = rng.random(tokens.shape)
    inputs[chosen & (r < 0.8)] = MASK
    rand_pos = chosen & (r >= 0.8) & (r < 0.9)
    inputs[rand_pos] = rng.integers(4, vocab, size=int(rand_pos.sum()))
    return inputs, chosen


def _mlm_logits(params, config, inputs, positions, trainable=None, rng=None) -> Tensor:
    ctx = _Ctx(params, config, None, trainable, None, None, rng, False)
    hidden = encode(inputs, ctx, SubnetworkMask.full(config))
    flat = hidden.reshape(-1, config.model_dim)[np.flatnonzero(positions.reshape(-1))]
    h = ag.gelu(flat @ ctx["mlm.W"].T + ctx["mlm.b"])
    h = ag.layer_norm(h, ctx["mlm.ln_gain"], ctx["mlm.ln_bias"], LN_EPS)
    return h @ ctx["embeddings.token"].T + ctx["mlm.bias"]


def mlm_accuracy(params: dict, config: ModelConfig, corpus: Dataset, seed: int = 1,
                 mask_prob: float = 0.15) -> float:
    rng = np.random.default_rng([seed, 4242])
    inputs, chosen = _mask_tokens(corpus.tokens, rng, mask_prob, config.vocab_size)
    correct = total = 0
    with ag.no_grad():
        for s in range(0, len(inputs), 256):
            pos = chosen[s:s + 256]
            if not pos.any():
                continue
            logits = _mlm_logits(params, config, inputs[s:s + 256], pos)
            pred = logits.values.argmax(axis=1)
            gold = corpus.tokens[s:s + 256][pos]
            correct += int((pred == gold).sum())
            total += int(pos.sum())
    return correct / max(total, 1)


def unigram_baseline(train: Dataset, heldout: Dataset) -> float:
    """Accuracy of always predicting the most frequent non-special training token."""
    toks = train.tokens[(train.tokens != CLS) & (train.tokens != SEP)]
    majority = np.bincount(toks).argmax()
    held = heldout.tokens[(heldout.tokens != CLS) & (heldout.tokens != SEP)]
    return float(np.mean(held == majority))


def pretrain_mlm(params: dict | None, corpus: Dataset, config: ModelConfig,
                 pretrain_config: PretrainConfig = PretrainConfig()) -> Checkpoint:
    """Masked-LM training on ``corpus``; ``params=None`` starts from a fresh init."""
    pc = pretrain_config
    if params is None:
        params = init_params(config, config.init_seed)
    params = copy_params(params)
    if "mlm.W" not in params:
        params.update(_init_mlm_head(config, pc.seed))
    params.pop("classifier.W", None)
    params.pop("classifier.b", None)
    rng = np.random.default_rng([pc.seed, 555])
    opt = Adam(pc.learning_rate)
    losses = []
    n = len(corpus)
    for step in range(pc.steps):
        idx = rng.integers(0, n, size=pc.batch_size)
        batch = corpus.tokens[idx]
        inputs, chosen = _mask_tokens(batch, rng, pc.mask_prob, config.vocab_size)
        if not chosen.any():
            continue
        trainable = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        logits = _mlm_logits(params, config, inputs, chosen, trainable, rng)
        loss = ag.cross_entropy_logits(logits, batch[chosen])
        if not np.isfinite(loss.item()):
            raise TrainingError(f"MLM loss diverged at step {step}")
        loss.backward()
        opt.step(params, {k: t.grad for k, t in trainable.items() if t.grad is not None})
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("mlm step %d loss %.4f", step, loss.item())
    return Checkpoint(config, params, {"steps": pc.steps, "final_loss": losses[-1] if losses else None})


# -- fine-tuning ---------------------------------------------------------------

def _loss(task: TaskSpec, logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    if task.kind == "regression":
        pred = logits[:, 0]
        return ag.mse(pred, labels.astype(np.float64), reduction)
    return ag.cross_entropy_logits(logits, labels, reduction)


def predict(model: FineTunedModel, data: Dataset, batch_size: int = 256) -> np.ndarray:
    outs = []
    with ag.no_grad():
        for s in range(0, len(data), batch_size):
            r = forward(model.params, model.config, model.subnet_mask, model.weight_mask,
                        data.tokens[s:s + batch_size])
            outs.append(r.logits.values)
    logits = np.concatenate(outs)
    if model.task.kind == "regression":
        return logits[:, 0]
    return logits.argmax(axis=1)


def evaluate(model: FineTunedModel, data: Dataset | None = None) -> float:
    data = model.task.dev if data is None else data
    return metrics.compute(model.task.metric, predict(model, data), data.labels)


def prepare_params(body: dict, config: ModelConfig, task: TaskSpec, seed: int,
                   weight_mask: dict | None) -> dict:
    params = {k: v.copy() for k, v in body.items() if not is_task_head(k)}
    params.update(init_classifier(config, task.num_outputs, seed))
    if weight_mask is not None:
        for name, m in weight_mask.items():
            params[name] = params[name] * m
    return params


def fine_tune(checkpoint: Checkpoint, task: TaskSpec, train_config: TrainConfig = TrainConfig(),
              subnet_mask: SubnetworkMask | None = None, weight_mask: dict | None = None,
              body: dict | None = None):
    """Fine-tune the checkpoint (or an explicit ``body``) on ``task`` under the masks.

    The classifier is freshly initialised from ``train_config.seed``.  Masked
    weights are zeroed up front and receive zero gradient, so they stay zero.
    Returns ``(FineTunedModel, dev_metric)``.
    """
    config = checkpoint.config
    subnet_mask = SubnetworkMask.full(config) if subnet_mask is None else subnet_mask
    source = checkpoint.params if body is None else body
    params = prepare_params(source, config, task, train_config.seed, weight_mask)
    check_masks(config, subnet_mask, weight_mask, params)
    tc = train_config
    rng = np.random.default_rng([tc.seed, 9001])
    opt = Adam(tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)
    data = task.train
    it = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), tc.batch_size):
            idx = order[s:s + tc.batch_size]
            trainable = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            r = forward(params, config, subnet_mask, weight_mask, data.tokens[idx],
                        trainable=trainable, rng=rng)
            loss = _loss(task, r.logits, data.labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at iteration {it}")
            loss.backward()
            opt.step(params, {k: t.grad for k, t in trainable.items() if t.grad is not None})
            if weight_mask is not None:
                for name, m in weight_mask.items():
                    params[name] *= m
            it += 1
    model = FineTunedModel(config, params, task, subnet_mask, weight_mask)
    return model, evaluate(model)


def degenerate_runs(metric_by_seed: dict, points: float = 0.10) -> list:
    """Seeds whose metric falls more than ``points`` below the seed median."""
    med = float(np.median(list(metric_by_seed.values())))
    return sorted(s for s, v in metric_by_seed.items() if v < med - points)
