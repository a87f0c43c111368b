"""Supervised InfoNCE objective over a batch and its augmented views."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import embed_node
from .numerics import Graph, ParamStore


@dataclass(frozen=True)
class MIObjectiveConfig:
    tau: float = 0.5
    aug_noise_sigma: float = 0.1
    aug_mask_prob: float = 0.1
    normalize_features: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.aug_noise_sigma < 0:
            raise ValueError("aug_noise_sigma must be >= 0")
        if not 0.0 <= self.aug_mask_prob <= 1.0:
            raise ValueError("aug_mask_prob must lie in [0, 1]")


@dataclass
class Batch:
    samples: np.ndarray
    labels: np.ndarray
    augmented: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[None, :]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.samples.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.samples.shape[0]} rows")
        if self.augmented is not None:
            self.augmented = np.asarray(self.augmented, dtype=np.float64)
            if self.augmented.shape != self.samples.shape:
                raise ValueError("augmented views must match samples in shape")

    def __len__(self) -> int:
        return len(self.labels)

    def with_views(self, seed: int, cfg: MIObjectiveConfig) -> "Batch":
        return Batch(self.samples, self.labels, augment(self.samples, seed, cfg))


def augment(x, seed: int, cfg: MIObjectiveConfig = MIObjectiveConfig()) -> np.ndarray:
    """Gaussian jitter followed by independent per-coordinate zeroing."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= cfg.aug_mask_prob
    return np.where(keep, x + cfg.aug_noise_sigma * noise, 0.0)


def similarity(f_a, f_b, tau: float, normalize: bool = True) -> float:
    a = np.asarray(f_a, dtype=np.float64)
    b = np.asarray(f_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    if normalize:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValueError("cannot normalize a zero-norm feature")
        a, b = a / na, b / nb
    return float(np.exp(np.dot(a, b) / tau))


def positive_weights(labels: Sequence[int]) -> np.ndarray:
    """``W[i, k] = 1(y_k = y_i) / (3 |B| n_i)`` with ``n_i`` the count of y_i."""
    y = np.asarray(labels)
    pos = (y[:, None] == y[None, :]).astype(np.float64)
    n = pos.sum(axis=1, keepdims=True)
    return pos / (3.0 * len(y) * n)


def mi_loss(store: ParamStore, batch: Batch, cfg: MIObjectiveConfig = MIObjectiveConfig()) -> Graph:
    """Build the graph of the supervised InfoNCE loss for ``batch``.

    Each anchor ``i`` contrasts the three view pairings (x_i, x_k), (x_i, x'_k)
    and (x'_i, x_k) of every same-label sample ``k`` (itself included) against
    the cube of the summed similarities over the whole batch (self included).
    Returns an unevaluated :class:`Graph` whose output is the scalar loss.
    """
    if batch.augmented is None:
        raise ValueError("mi_loss needs a batch with augmented views")
    if len(batch) < 2:
        raise ValueError("mi_loss needs at least two samples")
    g = Graph()
    x = g.input("x", value=batch.samples)
    xp = g.input("x_aug", value=batch.augmented)
    z = embed_node(g, store, x)
    zp = embed_node(g, store, xp)
    if cfg.normalize_features:
        z, zp = nx.l2_normalize(z), nx.l2_normalize(zp)
    s_xx = nx.scalar_divide(z @ z.T, cfg.tau)
    s_xa = nx.scalar_divide(z @ zp.T, cfg.tau)
    s_ax = nx.scalar_divide(zp @ z.T, cfg.tau)
    denom = nx.sum(nx.exp(s_xx) + nx.exp(s_xa) + nx.exp(s_ax), axis=1, keepdims=True)
    log_ratio = (s_xx + s_xa + s_ax) - nx.scale(nx.log(denom), 3.0)
    w = g.constant(positive_weights(batch.labels))
    g.set_output(-nx.sum(nx.multiply(w, log_ratio)))
    return g


def mi_loss_value(store: ParamStore, batch: Batch, cfg: MIObjectiveConfig = MIObjectiveConfig()) -> float:
    return float(nx.evaluate(mi_loss(store, batch, cfg)))
