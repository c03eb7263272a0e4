"""Class-aware training of the per-class-token transformer."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import RunParams
from .model import forward, init_params, save_checkpoint

log = logging.getLogger(__name__)

# names excluded from weight decay: biases, norm affines, tokens, embeddings
_NO_DECAY_SUFFIXES = (".beta", ".gamma", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", "bias")
_NO_DECAY_NAMES = ("class_tokens", "pos_embed")


class InvalidRecordError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        super().__init__(f"training diverged at step {step}: loss = {value}")


def multilabel_soft_margin_loss(scores, labels):
    """Mean over classes (and batch) of the per-class logistic loss.

    ``-(1/C) sum_c [y_c log s(x_c) + (1 - y_c) log s(-x_c)]`` with s the
    logistic function; a batch dimension is averaged.
    """
    scores = ad._as_tensor(scores)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), scores.shape)
    per = ad.log_sigmoid(scores) * y + ad.log_sigmoid(-scores) * (1.0 - y)
    return -per.mean()


def total_loss(record, labels, variant=None):
    """Class-token loss, plus the PatchCAM loss for V2 (unweighted sum).

    Returns (total, loss_cls, loss_patch) where loss_patch is None for V1.
    """
    variant = variant or record.config.variant
    loss_cls = multilabel_soft_margin_loss(record.class_scores_cls, labels)
    if variant == "V1":
        return loss_cls, loss_cls, None
    if record.class_scores_patch is None:
        raise InvalidRecordError("V2 loss needs a record carrying PatchCAM scores")
    loss_patch = multilabel_soft_margin_loss(record.class_scores_patch, labels)
    return loss_cls + loss_patch, loss_cls, loss_patch


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, decay_mask=None):
    """One AdamW update in place on ``params`` (name -> Tensor).

    Weight decay is decoupled: ``p -= lr * wd * p`` is applied alongside the
    bias-corrected adaptive step.  ``decay_mask`` maps names to bool
    (default: decay everything).  Parameters without a gradient are skipped.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        wd = state.weight_decay if (decay_mask is None or decay_mask.get(name, True)) else 0.0
        p.data = p.data - state.lr * (update + wd * p.data)
    return params, state


def default_decay_mask(params):
    return {
        name: not (name.endswith(_NO_DECAY_SUFFIXES) or name in _NO_DECAY_NAMES)
        for name in params
    }


def cosine_lr(step, total_steps, base_lr, min_lr):
    min_lr = min(min_lr, base_lr)
    if total_steps <= 1:
        return base_lr
    frac = min(step / (total_steps - 1), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class LossTrace:
    step: list = field(default_factory=list)
    loss_cls: list = field(default_factory=list)
    loss_patch: list = field(default_factory=list)
    total: list = field(default_factory=list)

    def append(self, step, loss_cls, loss_patch, total):
        self.step.append(step)
        self.loss_cls.append(loss_cls)
        self.loss_patch.append(loss_patch)
        self.total.append(total)

    def write_csv(self, path):
        """Columns step,loss_cls,loss_patch,total; loss_patch empty for V1."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss_cls", "loss_patch", "total"])
            for row in zip(self.step, self.loss_cls, self.loss_patch, self.total):
                w.writerow([row[0], repr(row[1]), "" if row[2] is None else repr(row[2]), repr(row[3])])


def stack_dataset(dataset):
    images = np.stack([s.image for s in dataset])
    labels = np.stack([s.labels for s in dataset]).astype(np.float64)
    return images, labels


def train(dataset, config, run=None, params=None, checkpoint_path=None, progress=None):
    """Train a model; returns (params, LossTrace).

    Mini-batches are drawn from a per-epoch permutation of ``dataset`` using
    a generator seeded with ``run.seed`` (the same seed also initializes the
    parameters unless ``params`` is given).  The learning rate follows a
    per-step cosine decay from ``run.lr`` to ``run.min_lr``.
    """
    run = run or RunParams()
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(run.seed)
    if params is None:
        params = init_params(config, rng)
    images, labels = stack_dataset(dataset)
    n = len(images)
    steps_per_epoch = math.ceil(n / run.batch_size)
    total_steps = steps_per_epoch * run.epochs
    state = OptimizerState(lr=run.lr, weight_decay=run.weight_decay, beta1=run.beta1, beta2=run.beta2, eps=run.eps)
    decay = default_decay_mask(params)
    trace = LossTrace()
    step = 0
    for epoch in range(run.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            # sorted so a batch's reduction order depends only on its members
            idx = np.sort(order[b * run.batch_size:(b + 1) * run.batch_size])
            ad.zero_grad(params.values())
            try:
                # overflow is detected explicitly (NonFiniteError), so silence numpy's warning
                with np.errstate(over="ignore", invalid="ignore"):
                    record = forward(images[idx], params, config)
                    loss, loss_cls, loss_patch = total_loss(record, labels[idx], config.variant)
            except ad.NonFiniteError as exc:
                raise DivergenceError(step, "non-finite activation") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            loss.backward()
            trace.append(step, loss_cls.item(), None if loss_patch is None else loss_patch.item(), value)
            state.lr = cosine_lr(step, total_steps, run.lr, run.min_lr)
            grads = {k: p.grad for k, p in params.items()}
            optimizer_step(params, grads, state, decay)
            step += 1
        if progress is not None:
            progress(epoch, trace)
        log.debug("epoch %d mean loss %.5f", epoch, np.mean(trace.total[-steps_per_epoch:]) if trace.total else float("nan"))
    ad.zero_grad(params.values())
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, config, extra={"run": run.to_dict(), "steps": step})
    return params, trace
