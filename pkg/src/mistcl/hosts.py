"""Frozen-backbone host methods: prototypes, a linear probe, and full fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .backbone import cross_entropy_node, embed, embed_node, feature_dim, init_head, sgd_step
from .mi_objective import Batch
from .numerics import Graph, ParamStore

# Fixed-point scale: every finite float64 is an exact integer multiple of 2**-_SCALE_BITS.
_SCALE_BITS = 1130


def _to_fixed(values: np.ndarray) -> np.ndarray:
    mant, expo = np.frexp(values)
    ints = (mant * 2.0**53).astype(np.int64).astype(object)
    shifts = (expo.astype(np.int64) + (_SCALE_BITS - 53)).astype(object)
    return ints * (2 ** shifts)


def _from_fixed(total, count: int) -> float:
    return total / (count << _SCALE_BITS)


@dataclass
class PrototypeStore:
    """Per-class feature means kept as exact sums, so the mean is order-free."""

    sums: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    dim: int | None = None

    def fit(self, features, labels) -> "PrototypeStore":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None, :]
        labels = np.asarray(labels, dtype=np.int64)
        if self.dim is None:
            self.dim = feats.shape[1]
        elif feats.shape[1] != self.dim:
            raise ValueError(f"feature dim {feats.shape[1]} != prototype dim {self.dim}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("prototype features must be finite")
        for c in np.unique(labels):
            rows = _to_fixed(feats[labels == c])
            c = int(c)
            total = rows.sum(axis=0)
            if c in self.sums:
                self.sums[c] = self.sums[c] + total
                self.counts[c] += int((labels == c).sum())
            else:
                self.sums[c] = total
                self.counts[c] = int((labels == c).sum())
        return self

    @property
    def classes(self) -> list[int]:
        return sorted(self.sums)

    def prototype(self, c: int) -> np.ndarray:
        n = self.counts[c]
        return np.array([_from_fixed(s, n) for s in self.sums[c]], dtype=np.float64)

    def matrix(self) -> tuple[list[int], np.ndarray]:
        classes = self.classes
        return classes, np.stack([self.prototype(c) for c in classes])


def fit_prototypes(store: PrototypeStore, features, labels) -> PrototypeStore:
    return store.fit(features, labels)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    return np.divide(a, norm, out=np.zeros_like(a), where=norm > 0)


def classify_batch(store: PrototypeStore, features) -> np.ndarray:
    """Nearest prototype by cosine similarity; ties go to the lowest class id."""
    if not store.sums:
        raise ValueError("prototype store is empty")
    classes, protos = store.matrix()
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[1] != protos.shape[1]:
        raise ValueError(f"feature dim {feats.shape[1]} != prototype dim {protos.shape[1]}")
    cos = _unit_rows(feats) @ _unit_rows(protos).T
    return np.asarray(classes)[np.argmax(cos, axis=1)]


def classify_nearest(store: PrototypeStore, feature) -> int:
    return int(classify_batch(store, feature)[0])


def prototype_accuracy(store: PrototypeStore, features, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy over an empty set")
    return 100.0 * float(np.mean(classify_batch(store, features) == labels))


@dataclass
class LinearHead:
    """Growing linear classifier; one weight row per class seen so far."""

    weight: np.ndarray
    bias: np.ndarray
    classes: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, feature_dim: int) -> "LinearHead":
        return cls(np.zeros((0, feature_dim)), np.zeros(0), [])

    def grow(self, new_classes: Sequence[int], seed: int) -> None:
        new = [int(c) for c in new_classes if int(c) not in self.classes]
        if not new:
            return
        fresh = init_head(self.weight.shape[1], len(new), seed)
        self.weight = np.vstack([self.weight, fresh.value("weight").T])
        self.bias = np.concatenate([self.bias, fresh.value("bias")])
        self.classes.extend(new)

    def predict(self, features) -> np.ndarray:
        logits = np.asarray(features) @ self.weight.T + self.bias
        return np.asarray(self.classes)[np.argmax(logits, axis=1)]


def fit_linear_head(
    head: LinearHead, store: ParamStore, task: Sequence[Batch], epochs: int, lr: float, seed: int = 0
) -> LinearHead:
    """Cross-entropy training of the head on frozen backbone features."""
    batches = list(task)
    head.grow(sorted({int(y) for b in batches for y in b.labels}), seed)
    if epochs == 0:
        return head
    index = {c: i for i, c in enumerate(head.classes)}
    feats = [embed(store, b.samples) for b in batches]
    params = ParamStore()
    params.add("weight", head.weight.T)
    params.add("bias", head.bias)
    for _ in range(epochs):
        for f, b in zip(feats, batches):
            params.zero_grad()
            g = Graph()
            x = g.input("f", value=f)
            logits = nx.add(nx.matmul(x, g.param(params, "weight")), g.param(params, "bias"))
            g.set_output(cross_entropy_node(logits, [index[int(y)] for y in b.labels], len(head.classes)))
            nx.evaluate(g)
            nx.gradient(g, params)
            sgd_step(params, lr)
    head.weight = params.value("weight").T.copy()
    head.bias = params.value("bias").copy()
    return head


def fft_finetune(
    store: ParamStore, task, epochs: int, lr: float, seed: int = 0, on_batch=None
) -> ParamStore:
    """Cross-entropy fine-tuning of every backbone scalar plus a fresh head.

    ``task`` is a sequence of batches reused every epoch, or a callable
    ``epoch -> batches`` for per-epoch reshuffling.
    """
    if epochs == 0 or lr == 0:
        return store
    batches_for = task if callable(task) else (lambda _epoch, fixed=list(task): fixed)
    classes = sorted({int(y) for b in batches_for(0) for y in b.labels})
    local = {c: i for i, c in enumerate(classes)}
    head = init_head(feature_dim(store), len(classes), seed)
    for epoch in range(epochs):
        for bi, b in enumerate(batches_for(epoch)):
            store.zero_grad()
            head.zero_grad()
            g = Graph()
            x = g.input("x", value=b.samples)
            logits = nx.add(nx.matmul(embed_node(g, store, x), g.param(head, "weight")), g.param(head, "bias"))
            g.set_output(cross_entropy_node(logits, [local[int(y)] for y in b.labels], len(classes)))
            loss = float(nx.evaluate(g))
            nx.gradient(g)
            sgd_step(store, lr)
            sgd_step(head, lr)
            if on_batch is not None:
                on_batch(epoch, bi, loss, store.total_count)
    store.zero_grad()
    return store


class HostMethod(Protocol):
    name: str

    def fit(self, store: ParamStore, task: Sequence[Batch]) -> None: ...

    def predict(self, store: ParamStore, samples: np.ndarray) -> np.ndarray: ...


class PrototypeHost:
    """SimpleCIL-style host: class means of frozen features, cosine decision."""

    name = "prototype"

    def __init__(self):
        self.prototypes = PrototypeStore()

    def fit(self, store, task):
        for b in task:
            self.prototypes.fit(embed(store, b.samples), b.labels)

    def predict(self, store, samples):
        return classify_batch(self.prototypes, embed(store, samples))


class LinearHost:
    name = "linear"

    def __init__(self, feature_dim: int, epochs: int = 100, lr: float = 0.1, seed: int = 0):
        self.head = LinearHead.empty(feature_dim)
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self._calls = 0

    def fit(self, store, task):
        self._calls += 1
        fit_linear_head(self.head, store, task, self.epochs, self.lr, seed=self.seed + self._calls)

    def predict(self, store, samples):
        return self.head.predict(embed(store, samples))


def make_host(kind: str, store: ParamStore, seed: int = 0, epochs: int = 100, lr: float = 0.1) -> HostMethod:
    if kind == "prototype":
        return PrototypeHost()
    if kind == "linear":
        return LinearHost(feature_dim(store), epochs=epochs, lr=lr, seed=seed)
    raise ValueError(f"unknown host {kind!r}")
