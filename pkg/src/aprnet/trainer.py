"""Mini-batch SGD with a two-step learning-rate schedule, and the lambda sweep."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, instance_labels
from .model import ModelConfig, ModelParams, batch_loss_and_grad, init_params
from .seeding import rng_for, sub_seed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 55
    batch_size: int = 64
    lr_initial: float = 0.001
    lr_final: float = 0.0001
    lr_switch_epoch: int = 50
    momentum: float = 0.9
    lam: float | None = None  # None: use the model config's lambda
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.lr_final <= self.lr_initial:
            raise ValueError("need 0 <= lr_final <= lr_initial")
        if not 0 < self.lr_switch_epoch <= self.epochs:
            raise ValueError("need 0 < lr_switch_epoch <= epochs")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_id: float
    loss_att_mean: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss_total", "loss_id", "loss_att_mean", "seconds"])
        for r in self.rows:
            w.writerow([r.epoch, repr(r.lr), repr(r.loss_total), repr(r.loss_id), repr(r.loss_att_mean),
                        f"{r.seconds:.3f}" if include_time else ""])
        return buf.getvalue()


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    return config.lr_initial if epoch < config.lr_switch_epoch else config.lr_final


def sgd_step(params: ModelParams, grads: ModelParams, lr: float, momentum: float,
             velocity: ModelParams | None = None) -> tuple[ModelParams, ModelParams]:
    """velocity' = momentum*velocity - lr*grad; params' = params + velocity'."""
    if velocity is None:
        velocity = params.zeros_like()
    new_v = [momentum * v - lr * g for v, g in zip(velocity.arrays(), grads.arrays())]
    new_p = [p + v for p, v in zip(params.arrays(), new_v)]
    out_p, out_v = params.copy(), params.zeros_like()
    for dst, src in zip(out_p.arrays(), new_p):
        dst[...] = src
    for dst, src in zip(out_v.arrays(), new_v):
        dst[...] = src
    return out_p, out_v


@dataclass(frozen=True, eq=False)
class TrainingSet:
    x: np.ndarray
    identity: np.ndarray  # class index into ``identities``
    attributes: np.ndarray
    sample_ids: np.ndarray
    identities: list[int]


def training_set(dataset: Dataset) -> TrainingSet:
    samples = dataset.split("train")
    if not samples:
        raise ValueError("dataset has no train split")
    identities = dataset.train_identities()
    index = {ident: k for k, ident in enumerate(identities)}
    labels = [instance_labels(s, dataset.annotations) for s in samples]
    return TrainingSet(
        dataset.features(samples).astype(np.float64),
        np.array([index[s.identity] for s in samples], dtype=np.int64),
        np.asarray(labels, dtype=np.int64).reshape(len(samples), dataset.schema.num_attributes),
        np.array([s.sample_id for s in samples], dtype=np.int64),
        identities,
    )


def _dropout_seed(seed: int, epoch: int) -> int:
    return int(sub_seed(seed, "dropout-epoch", epoch).generate_state(1)[0])


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
          on_step: Callable[[int, int, ModelParams], None] | None = None,
          on_epoch: Callable[[int, ModelParams], None] | None = None,
          init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    data = training_set(dataset)
    return train_arrays(model_config, train_config, data, on_step=on_step, on_epoch=on_epoch, init=init)


def train_arrays(model_config: ModelConfig, train_config: TrainConfig, data: TrainingSet,
                 on_step=None, on_epoch=None, init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    tc = train_config
    lam = model_config.lam if tc.lam is None else tc.lam
    n = len(data.x)
    if tc.batch_size > n:
        raise ValueError(f"batch_size {tc.batch_size} exceeds training set size {n}")
    if len(data.identities) != model_config.num_identities:
        raise ValueError(f"model has {model_config.num_identities} identity classes, "
                         f"training split has {len(data.identities)}")
    # head masking: the model may use a subset (or none) of the annotated attributes
    atts = data.attributes[:, :model_config.num_attributes]

    params = init_params(model_config, tc.seed) if init is None else init.copy()
    velocity = params.zeros_like()
    log = TrainLog()
    step = 0
    for epoch in range(tc.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(tc, epoch)
        order = rng_for(tc.seed, "shuffle", epoch).permutation(n)
        dseed = _dropout_seed(tc.seed, epoch)
        sums = np.zeros(3)
        for lo in range(0, n, tc.batch_size):
            idx = order[lo: lo + tc.batch_size]
            loss, grads = batch_loss_and_grad(
                params, data.x[idx], data.identity[idx], atts[idx], lam,
                dropout_rate=model_config.dropout_rate, train_mode=True,
                seed=dseed, indices=data.sample_ids[idx],
            )
            if tc.weight_decay:
                for g, p in zip(grads.arrays(), params.arrays()):
                    g += tc.weight_decay * p
            params, velocity = sgd_step(params, grads, lr, tc.momentum, velocity)
            sums += len(idx) * np.array([loss.total, loss.l_id, loss.l_att_mean])
            step += 1
            if on_step is not None:
                on_step(epoch, step, params)
        total, l_id, l_att = sums / n
        log.rows.append(EpochRecord(epoch, lr, float(total), float(l_id), float(l_att), time.perf_counter() - start))
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, log


@dataclass(frozen=True)
class SweepRow:
    lam: float
    rank1: float
    mAP: float


@dataclass(frozen=True)
class SweepResult:
    rows: list[SweepRow]
    best_lambda: float
    query_ids: list[int]

    def to_csv(self) -> str:
        lines = ["lambda,rank1,mAP,best"]
        for r in self.rows:
            lines.append(f"{r.lam!r},{r.rank1!r},{r.mAP!r},{int(r.lam == self.best_lambda)}")
        return "\n".join(lines) + "\n"


def sweep_lambda(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
                 lambda_grid: Sequence[float], threads: int = 1) -> SweepResult:
    """Train one model per lambda (identical seeds) and score it on the validation splits."""
    from .evaluation import evaluate_reid

    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if not dataset.split("vquery") or not dataset.split("vgallery"):
        raise ValueError("dataset has no validation query/gallery splits")
    data = training_set(dataset)
    rows = []
    for lam in grid:
        cfg = replace(model_config, lam=lam)
        params, _ = train_arrays(cfg, replace(train_config, lam=None), data)
        report = evaluate_reid(dataset, "vquery", "vgallery", params=params, threads=threads)
        rows.append(SweepRow(lam, report.rank(1), report.mAP))
    best = min(rows, key=lambda r: (-r.rank1, r.lam))
    query_ids = [s.sample_id for s in dataset.split("vquery")]
    return SweepResult(rows, best.lam, query_ids)
