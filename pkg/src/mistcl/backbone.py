"""Small tanh MLP feature extractor with pretraining and binary checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Graph, Node, ParamStore

MAGIC = b"MISTCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (256,)
    feature_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("backbone needs at least one hidden layer")
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


def init_backbone(cfg: BackboneConfig) -> ParamStore:
    """Glorot-uniform weights and zero biases, drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    for layer, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"layer{layer}.weight", rng.uniform(-s, s, size=(fan_in, fan_out)))
        store.add(f"layer{layer}.bias", np.zeros(fan_out))
    return store


def num_layers(store: ParamStore) -> int:
    return sum(1 for n in store.names() if n.endswith(".weight"))


def input_dim(store: ParamStore) -> int:
    return store.value("layer0.weight").shape[0]


def feature_dim(store: ParamStore) -> int:
    return store.value(f"layer{num_layers(store) - 1}.weight").shape[1]


def embed(store: ParamStore, x) -> np.ndarray:
    """Features for each row of ``x``; tanh on hidden layers, linear output."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != input_dim(store):
        raise ValueError(f"expected {input_dim(store)} input columns, got {h.shape[1]}")
    n = num_layers(store)
    for layer in range(n):
        h = h @ store.value(f"layer{layer}.weight") + store.value(f"layer{layer}.bias")
        if layer < n - 1:
            h = np.tanh(h)
    return h


def embed_node(graph: Graph, store: ParamStore, x: Node, trainable: bool = True) -> Node:
    """Graph version of :func:`embed` with the store's tensors as leaves."""
    n = num_layers(store)
    h = x
    for layer in range(n):
        w = graph.param(store, f"layer{layer}.weight", trainable)
        b = graph.param(store, f"layer{layer}.bias", trainable)
        h = nx.add(nx.matmul(h, w), b)
        if layer < n - 1:
            h = nx.tanh(h)
    return h


def cross_entropy_node(logits: Node, labels: Sequence[int], num_classes: int) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    g = logits.graph
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), np.asarray(labels)] = 1.0
    picked = nx.sum(nx.multiply(nx.log_softmax(logits), g.constant(onehot)))
    return nx.scalar_divide(-picked, float(len(labels)))


def init_head(feature_dim: int, num_classes: int, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    s = np.sqrt(6.0 / (feature_dim + num_classes))
    head = ParamStore()
    head.add("weight", rng.uniform(-s, s, size=(feature_dim, num_classes)))
    head.add("bias", np.zeros(num_classes))
    return head


def sgd_step(store: ParamStore, lr: float) -> None:
    for name, value in store.items():
        value -= lr * store.grad(name)


@dataclass
class PretrainResult:
    store: ParamStore
    loss_trace: list[float] = field(default_factory=list)
    held_out_accuracy: float | None = None


def pretrain(
    store: ParamStore,
    base_data: Sequence,
    epochs: int,
    lr: float,
    seed: int = 0,
    held_out=None,
) -> PretrainResult:
    """Cross-entropy pretraining through a throwaway linear head.

    ``base_data`` is a sequence of batches (anything with ``samples`` and
    ``labels``), visited in the given order every epoch. When ``held_out`` is
    given, the result records nearest-prototype accuracy on it, with
    prototypes fit on all of ``base_data``.
    """
    batches = list(base_data)
    if not batches or all(len(b.labels) == 0 for b in batches):
        raise ValueError("pretrain needs at least one non-empty batch")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    classes = sorted({int(y) for b in batches for y in b.labels})
    local = {c: i for i, c in enumerate(classes)}
    head = init_head(feature_dim(store), len(classes), seed)
    result = PretrainResult(store)
    for _ in range(epochs):
        losses = []
        for b in batches:
            store.zero_grad()
            head.zero_grad()
            g = Graph()
            x = g.input("x", value=b.samples)
            logits = nx.add(
                nx.matmul(embed_node(g, store, x), g.param(head, "weight")), g.param(head, "bias")
            )
            g.set_output(cross_entropy_node(logits, [local[int(y)] for y in b.labels], len(classes)))
            losses.append(float(nx.evaluate(g)))
            nx.gradient(g)
            sgd_step(store, lr)
            sgd_step(head, lr)
        result.loss_trace.append(float(np.mean(losses)))
    store.zero_grad()
    if held_out is not None:
        from .hosts import PrototypeStore, prototype_accuracy

        protos = PrototypeStore()
        for b in batches:
            protos.fit(embed(store, b.samples), b.labels)
        result.held_out_accuracy = prototype_accuracy(protos, embed(store, held_out.samples), held_out.labels)
    return result


# ---------------------------------------------------------------------------
# Checkpoints


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@dataclass
class Checkpoint:
    tensors: list[tuple[str, np.ndarray]]
    version: int
    checksum: int

    def to_store(self) -> ParamStore:
        store = ParamStore()
        for name, arr in self.tensors:
            store.add(name, arr)
        return store


def checkpoint_bytes(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(store))]
    for name, value in store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(store: ParamStore, path) -> Checkpoint:
    data = checkpoint_bytes(store)
    Path(path).write_bytes(data)
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedCheckpointError("file ends inside the magic header")
        raise BadMagicError("not a checkpoint file (bad magic bytes)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedCheckpointError(f"unexpected end of file at byte {len(data)}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8", errors="strict")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        tensors.append((name, arr))
    body_end = pos
    (stored,) = struct.unpack("<Q", take(8))
    if pos != len(data):
        raise ChecksumMismatchError(f"{len(data) - pos} trailing bytes after checksum")
    actual = fnv1a64(data[:body_end])
    if actual != stored:
        raise ChecksumMismatchError(f"checksum {actual:016x} != stored {stored:016x}")
    return Checkpoint(tensors, version, stored)


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> ParamStore:
    return read_checkpoint(path).to_store()
