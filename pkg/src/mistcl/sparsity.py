"""Parameter sensitivity scores, top-k masks, and per-batch gradient dropout."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import cross_entropy_node, embed_node, feature_dim, init_head
from .mi_objective import Batch, MIObjectiveConfig, mi_loss
from .numerics import Graph, ParamStore

log = logging.getLogger(__name__)

METHODS = ("mi_fisher", "grad_magnitude", "l2_norm", "random")


@dataclass
class SensitivityScores:
    values: np.ndarray
    method: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.method not in METHODS:
            raise ValueError(f"unknown scoring method {self.method!r}")
        if np.any(self.values < 0):
            raise ValueError("sensitivity scores must be non-negative")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Mask:
    indices: np.ndarray
    k_percent: float
    total: int

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class DropoutMask:
    kept: np.ndarray
    d_percent: float
    batch_seed: int

    @property
    def indices(self) -> np.ndarray:
        return self.kept

    def __len__(self) -> int:
        return len(self.kept)


def percent_floor(percent: float, n: int) -> int:
    """``floor(percent% * n)`` computed exactly on the decimal value of ``percent``."""
    return int(Fraction(repr(float(percent))) * n // 100)


def _check_percent(name: str, value: float) -> None:
    if not 0 <= value <= 100:
        raise ValueError(f"{name} must lie in [0, 100], got {value}")


def accumulate_mi_fisher(
    store: ParamStore,
    batches: Sequence[Batch],
    cfg: MIObjectiveConfig = MIObjectiveConfig(),
    variant: str = "accumulated",
) -> SensitivityScores:
    """Per-scalar sensitivity of the MI loss.

    ``variant="accumulated"`` adds raw batch gradients and squares the total once.
    ``variant="classical"`` sums squared per-batch gradients instead.
    Parameter values are never modified; gradient buffers are left zeroed.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("accumulate_mi_fisher needs at least one batch")
    if variant not in ("accumulated", "classical"):
        raise ValueError(f"unknown Fisher variant {variant!r}")
    store.zero_grad()
    if variant == "accumulated":
        for b in batches:
            g = mi_loss(store, b, cfg)
            nx.evaluate(g)
            nx.gradient(g, store)
        total = store.flat_grad()
        scores = total * total
    else:
        scores = np.zeros(store.total_count)
        for b in batches:
            store.zero_grad()
            g = mi_loss(store, b, cfg)
            nx.evaluate(g)
            nx.gradient(g, store)
            flat = store.flat_grad()
            scores += flat * flat
    store.zero_grad()
    return SensitivityScores(scores, "mi_fisher")


def ce_gradient(store: ParamStore, batches: Sequence[Batch], head_seed: int = 0) -> np.ndarray:
    """Accumulated cross-entropy gradient of the backbone through a fresh linear head."""
    batches = list(batches)
    classes = sorted({int(y) for b in batches for y in b.labels})
    local = {c: i for i, c in enumerate(classes)}
    head = init_head(feature_dim(store), len(classes), head_seed)
    store.zero_grad()
    for b in batches:
        g = Graph()
        x = g.input("x", value=b.samples)
        logits = nx.add(nx.matmul(embed_node(g, store, x), g.param(head, "weight", False)), g.param(head, "bias", False))
        g.set_output(cross_entropy_node(logits, [local[int(y)] for y in b.labels], len(classes)))
        nx.evaluate(g)
        nx.gradient(g, store)
    total = store.flat_grad()
    store.zero_grad()
    return total


def score_baseline(
    store: ParamStore, batches: Sequence[Batch] | None, method: str, seed: int = 0
) -> SensitivityScores:
    """Baseline scorers: CE gradient magnitude, parameter magnitude, or random."""
    if method == "grad_magnitude":
        if not batches:
            raise ValueError("grad_magnitude scoring needs batches")
        return SensitivityScores(np.abs(ce_gradient(store, batches, seed)), method)
    if method == "l2_norm":
        return SensitivityScores(np.abs(store.flat_values()), method)
    if method == "random":
        return SensitivityScores(np.random.default_rng(seed).random(store.total_count), method)
    raise ValueError(f"unknown baseline method {method!r}")


def select_top_k(scores: SensitivityScores | np.ndarray, k_percent: float) -> Mask:
    """Indices of the ``floor(k% * n)`` largest scores, ties to the lower index."""
    _check_percent("k_percent", k_percent)
    values = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    n = values.size
    keep = percent_floor(k_percent, n)
    if keep == 0:
        log.warning("k=%s%% of %d parameters selects nothing; mask is empty", k_percent, n)
        return Mask(np.zeros(0, dtype=np.int64), k_percent, n)
    order = np.argsort(-values, kind="stable")
    return Mask(np.sort(order[:keep]).astype(np.int64), k_percent, n)


def sample_dropout(mask: Mask, d_percent: float, batch_seed: int) -> DropoutMask:
    """Drop exactly ``floor(d% * |M|)`` mask entries chosen uniformly at random."""
    _check_percent("d_percent", d_percent)
    m = len(mask.indices)
    drop = percent_floor(d_percent, m)
    perm = np.random.default_rng(batch_seed).permutation(m)
    kept = np.sort(np.asarray(mask.indices)[perm[drop:]])
    return DropoutMask(kept.astype(np.int64), d_percent, batch_seed)


def updated_per_batch(total: int, k_percent: float, d_percent: float) -> int:
    m = percent_floor(k_percent, total)
    return m - percent_floor(d_percent, m)


def save_mask(mask: Mask, path) -> None:
    lines = [f"k={mask.k_percent!r} n={mask.total}"]
    lines.extend(str(int(i)) for i in mask.indices)
    Path(path).write_text("\n".join(lines) + "\n")


def load_mask(path) -> Mask:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty mask file")
    header = dict(part.split("=", 1) for part in lines[0].split())
    try:
        k, n = float(header["k"]), int(header["n"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed mask header {lines[0]!r}") from exc
    idx = np.array([int(s) for s in lines[1:] if s.strip()], dtype=np.int64)
    if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= n):
        raise ValueError(f"{path}: indices must be strictly increasing and < {n}")
    return Mask(idx, k, n)
