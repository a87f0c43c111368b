"""Per-task sparse pre-adaptation of the backbone under the MI objective."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import cross_entropy_node, embed_node, feature_dim, init_head, sgd_step
from .hosts import HostMethod, fft_finetune
from .mi_objective import Batch, MIObjectiveConfig, mi_loss
from .numerics import Graph, ParamStore, masked_sgd_step
from .sparsity import (
    METHODS,
    Mask,
    accumulate_mi_fisher,
    percent_floor,
    sample_dropout,
    score_baseline,
    select_top_k,
)

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


# Stream tags keep the RNG uses of one (run, task, epoch, batch) coordinate apart.
_PARTITION, _AUGMENT, _DROPOUT, _HEAD = 1, 2, 3, 4


@dataclass(frozen=True)
class MistConfig:
    k_percent: float = 5.0
    d_percent: float = 90.0
    epochs: int = 20
    lr: float = 1e-4
    mi_batch_size: int = 32
    mi_cfg: MIObjectiveConfig = field(default_factory=MIObjectiveConfig)
    scorer: str = "mi_fisher"
    loss: str = "mi"
    fisher_variant: str = "accumulated"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("k_percent", "d_percent"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.mi_batch_size < 2:
            raise ValueError("mi_batch_size must be >= 2")
        if self.scorer not in METHODS:
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.loss not in ("mi", "ce"):
            raise ValueError(f"loss must be 'mi' or 'ce', got {self.loss!r}")


@dataclass
class PreAdaptReport:
    scalars_selected: int
    scalars_updated_per_batch: float
    mi_loss_trace: list[float]
    wall_time: float
    parameter_delta_norm: float
    batches: int = 0
    loss_kind: str = "mi"


def partition(task: Batch, batch_size: int, seed: int) -> list[Batch]:
    """Shuffle ``task`` under ``seed`` and cut it into mini-batches.

    A trailing remainder of a single sample is merged into the previous batch
    because the contrastive loss needs at least two samples.
    """
    n = len(task)
    order = np.random.default_rng(seed).permutation(n)
    cuts = list(range(0, n, batch_size))
    groups = [order[c : c + batch_size] for c in cuts]
    if len(groups) > 1 and len(groups[-1]) < 2:
        tail = groups.pop()
        groups[-1] = np.concatenate([groups[-1], tail])
    return [Batch(task.samples[idx], task.labels[idx]) for idx in groups]


def epoch_batches(task: Batch, cfg: MistConfig, task_index: int, epoch: int) -> list[Batch]:
    parts = partition(task, cfg.mi_batch_size, derive_seed(cfg.seed, task_index, epoch, _PARTITION))
    return [
        b.with_views(derive_seed(cfg.seed, task_index, epoch, bi, _AUGMENT), cfg.mi_cfg)
        for bi, b in enumerate(parts)
    ]


def build_mask(store: ParamStore, task: Batch, cfg: MistConfig, task_index: int = 0) -> Mask:
    """Score parameters on the first-epoch partition and keep the top k%."""
    batches = epoch_batches(task, cfg, task_index, 0)
    if cfg.scorer == "mi_fisher":
        scores = accumulate_mi_fisher(store, batches, cfg.mi_cfg, cfg.fisher_variant)
    else:
        scores = score_baseline(store, batches, cfg.scorer, derive_seed(cfg.seed, task_index, _HEAD))
    return select_top_k(scores, cfg.k_percent)


def pre_adapt(
    store: ParamStore,
    task: Batch,
    cfg: MistConfig,
    task_index: int = 0,
    on_event: Callable[[dict], None] | None = None,
) -> PreAdaptReport:
    """Sparse pre-adaptation of ``store`` on one task, in place.

    Scores every scalar once, keeps the top ``k%`` as the mask, then for each
    epoch and mini-batch takes one SGD step on a fresh random ``(100-d)%`` of
    the mask. With ``cfg.loss == "ce"`` the step follows cross-entropy through
    a temporary head instead of the MI loss (the mask is still built by
    ``cfg.scorer``). Scalars outside the mask are never written.
    """
    start = time.perf_counter()
    before = store.flat_values()
    selected = percent_floor(cfg.k_percent, store.total_count)
    if cfg.epochs == 0:
        return PreAdaptReport(selected, 0.0, [], time.perf_counter() - start, 0.0, 0, cfg.loss)

    mask = build_mask(store, task, cfg, task_index)
    if len(mask) == 0:
        log.warning("empty mask for task %d; pre-adaptation is a no-op", task_index)
        return PreAdaptReport(0, 0.0, [], time.perf_counter() - start, 0.0, 0, cfg.loss)

    head = None
    if cfg.loss == "ce":
        classes = sorted({int(y) for y in task.labels})
        local = {c: i for i, c in enumerate(classes)}
        head = init_head(feature_dim(store), len(classes), derive_seed(cfg.seed, task_index, _HEAD))

    trace, updates = [], []
    for epoch in range(cfg.epochs):
        losses = []
        for bi, b in enumerate(epoch_batches(task, cfg, task_index, epoch)):
            store.zero_grad()
            if head is None:
                g = mi_loss(store, b, cfg.mi_cfg)
            else:
                head.zero_grad()
                g = Graph()
                x = g.input("x", value=b.samples)
                logits = nx.add(nx.matmul(embed_node(g, store, x), g.param(head, "weight")), g.param(head, "bias"))
                g.set_output(cross_entropy_node(logits, [local[int(y)] for y in b.labels], len(classes)))
            loss = float(nx.evaluate(g))
            nx.gradient(g)
            kept = sample_dropout(mask, cfg.d_percent, derive_seed(cfg.seed, task_index, epoch, bi, _DROPOUT))
            n_updated = masked_sgd_step(store, cfg.lr, kept) if len(kept) else 0
            if head is not None:
                sgd_step(head, cfg.lr)
            losses.append(loss)
            updates.append(n_updated)
            if on_event is not None:
                on_event({"task": task_index, "epoch": epoch, "batch": bi, "mi_loss": loss, "updated_scalars": n_updated})
        trace.append(float(np.mean(losses)))
    store.zero_grad()
    delta = float(np.linalg.norm(store.flat_values() - before))
    return PreAdaptReport(
        scalars_selected=len(mask),
        scalars_updated_per_batch=float(np.mean(updates)),
        mi_loss_trace=trace,
        wall_time=time.perf_counter() - start,
        parameter_delta_norm=delta,
        batches=len(updates),
        loss_kind=cfg.loss,
    )


def fft_pre_adapt(
    store: ParamStore, task: Batch, cfg: MistConfig, task_index: int = 0, on_event=None
) -> PreAdaptReport:
    """Full fine-tuning baseline with the same epochs, lr and batching as MIST."""
    start = time.perf_counter()
    before = store.flat_values()
    trace: list[list[float]] = [[] for _ in range(cfg.epochs)]
    updates: list[int] = []

    def batches_for(epoch: int) -> list[Batch]:
        return partition(task, cfg.mi_batch_size, derive_seed(cfg.seed, task_index, epoch, _PARTITION))

    def hook(epoch, bi, loss, n):
        trace[epoch].append(loss)
        updates.append(n)
        if on_event is not None:
            on_event({"task": task_index, "epoch": epoch, "batch": bi, "mi_loss": loss, "updated_scalars": n})

    fft_finetune(store, batches_for, cfg.epochs, cfg.lr, seed=derive_seed(cfg.seed, task_index, _HEAD), on_batch=hook)
    return PreAdaptReport(
        scalars_selected=store.total_count,
        scalars_updated_per_batch=float(np.mean(updates)) if updates else 0.0,
        mi_loss_trace=[float(np.mean(t)) for t in trace if t],
        wall_time=time.perf_counter() - start,
        parameter_delta_norm=float(np.linalg.norm(store.flat_values() - before)),
        batches=len(updates),
        loss_kind="ce",
    )


@dataclass
class TaskResult:
    task_index: int
    report: PreAdaptReport
    host: HostMethod


def run_task(
    store: ParamStore,
    task: Batch,
    cfg: MistConfig,
    host: HostMethod,
    task_index: int = 0,
    on_event=None,
) -> TaskResult:
    """Pre-adapt the backbone, refreeze it, then let the host fit the task."""
    store.trainable = True
    report = pre_adapt(store, task, cfg, task_index, on_event)
    store.trainable = False
    host.fit(store, [task])
    return TaskResult(task_index, report, host)
