"""Synthetic class-incremental streams, CL metrics, and experiment protocols."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .backbone import BackboneConfig, embed, init_backbone, input_dim, pretrain
from .hosts import PrototypeStore, make_host, prototype_accuracy
from .mi_objective import Batch
from .mist import MistConfig, PreAdaptReport, derive_seed, fft_pre_adapt, pre_adapt
from .numerics import ParamStore
from .sparsity import updated_per_batch

log = logging.getLogger(__name__)

PROTOCOLS = ("compare", "ablation", "sweep_k", "sweep_d", "batch_size", "erosion")
SWEEP_K = (20.0, 10.0, 5.0, 1.0, 0.1)
SWEEP_D = (0.0, 50.0, 80.0, 90.0, 99.0)
BATCH_SIZES = (4, 32, 64)

# Seed stream tags, distinct from the ones used inside mist.
_STREAM, _PRETRAIN_INIT, _PRETRAIN_HEAD, _ARM, _HOST = 11, 12, 13, 14, 15


# ---------------------------------------------------------------------------
# Streams


@dataclass
class TaskStream:
    tasks: list[Batch]
    tests: list[Batch]
    label_sets: list[list[int]]
    pretrain_train: Batch
    pretrain_eval: Batch
    shift_level: float
    seed: int

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class StreamConfig:
    num_tasks: int = 5
    classes_per_task: int = 4
    samples_per_class: int = 100
    test_samples_per_class: int = 50
    input_dim: int = 64
    shift_level: float = 2.0
    pretrain_classes: int = 24
    separation: float = 3.0

    def __post_init__(self):
        for name in ("num_tasks", "classes_per_task", "samples_per_class", "test_samples_per_class",
                     "input_dim", "pretrain_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.shift_level < 0:
            raise ValueError("shift_level must be >= 0")


def _draw(rng, means: np.ndarray, labels: list[int], per_class: int) -> Batch:
    rows, ys = [], []
    for mean, c in zip(means, labels):
        rows.append(mean + rng.standard_normal((per_class, means.shape[1])))
        ys.extend([c] * per_class)
    return Batch(np.vstack(rows), np.array(ys))


def make_synthetic_stream(
    num_tasks: int = 5,
    classes_per_task: int = 4,
    samples_per_class: int = 100,
    input_dim: int = 64,
    shift_level: float = 2.0,
    seed: int = 0,
    *,
    test_samples_per_class: int = 50,
    pretrain_classes: int = 24,
    separation: float = 3.0,
) -> TaskStream:
    """Unit-variance Gaussian class clusters for pretraining and for T tasks.

    Pretrain classes are labelled ``0..P-1`` and continual classes continue
    from ``P``. Every class mean sits ``separation`` from the origin along its
    own random direction. Continual means are then mapped through a rotation
    ``expm(shift_level * A)`` (``A`` a fixed random skew-symmetric generator)
    and scaled by ``1 + shift_level / 4``, so ``shift_level = 0`` reproduces
    the pretraining regime.
    """
    cfg = StreamConfig(num_tasks, classes_per_task, samples_per_class, test_samples_per_class,
                       input_dim, shift_level, pretrain_classes, separation)
    rng = np.random.default_rng(derive_seed(seed, _STREAM))
    n_cont = num_tasks * classes_per_task
    n_total = pretrain_classes + n_cont
    dirs = rng.standard_normal((n_total, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs

    gen = rng.standard_normal((input_dim, input_dim))
    skew = (gen - gen.T) / (2.0 * np.sqrt(input_dim))
    rotation = expm(shift_level * skew)
    cont_means = (means[pretrain_classes:] @ rotation.T) * (1.0 + shift_level / 4.0)

    pre_labels = list(range(pretrain_classes))
    pretrain_train = _draw(rng, means[:pretrain_classes], pre_labels, samples_per_class)
    pretrain_eval = _draw(rng, means[:pretrain_classes], pre_labels, test_samples_per_class)
    tasks, tests, label_sets = [], [], []
    for t in range(num_tasks):
        labels = list(range(pretrain_classes + t * classes_per_task, pretrain_classes + (t + 1) * classes_per_task))
        m = cont_means[t * classes_per_task : (t + 1) * classes_per_task]
        tasks.append(_draw(rng, m, labels, samples_per_class))
        tests.append(_draw(rng, m, labels, test_samples_per_class))
        label_sets.append(labels)
    return TaskStream(tasks, tests, label_sets, pretrain_train, pretrain_eval, shift_level, seed)


def stream_from_config(cfg: StreamConfig, seed: int) -> TaskStream:
    return make_synthetic_stream(
        cfg.num_tasks, cfg.classes_per_task, cfg.samples_per_class, cfg.input_dim, cfg.shift_level, seed,
        test_samples_per_class=cfg.test_samples_per_class, pretrain_classes=cfg.pretrain_classes,
        separation=cfg.separation,
    )


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricTable:
    R: list[list[float]]
    A: list[float]
    A_T: float
    A_bar: float


def compute_metrics(R) -> MetricTable:
    """Average accuracies from a lower-triangular accuracy matrix (percent).

    ``A_t`` is the mean of row ``t``; ``A_bar`` the mean of all ``A_t``. Sums
    are carried out in exact rational arithmetic and rounded once.
    """
    rows = [list(r) for r in R]
    if not rows:
        raise ValueError("empty accuracy matrix")
    exact_a = []
    for t, row in enumerate(rows, start=1):
        if len(row) < t:
            raise ValueError(f"row {t} has {len(row)} entries, needs {t}")
        if any(v != 0 and not np.isnan(v) for v in row[t:]) and len(row) > t:
            raise ValueError(f"row {t} has entries above the diagonal")
        vals = row[:t]
        if any(not (0.0 <= float(v) <= 100.0) for v in vals):
            raise ValueError(f"row {t} has accuracies outside [0, 100]")
        exact_a.append(sum(Fraction(float(v)) for v in vals) / t)
    a_bar = sum(exact_a) / len(exact_a)
    return MetricTable(
        R=[[float(v) for v in row[: t + 1]] for t, row in enumerate(rows)],
        A=[float(a) for a in exact_a],
        A_T=float(exact_a[-1]),
        A_bar=float(a_bar),
    )


def zero_shot_eval(store: ParamStore, stream: TaskStream) -> float:
    """Nearest-prototype accuracy on the held-out pretrain-domain set."""
    if len(stream.pretrain_eval) == 0:
        raise ValueError("stream has no pretrain evaluation set")
    protos = PrototypeStore().fit(embed(store, stream.pretrain_train.samples), stream.pretrain_train.labels)
    return prototype_accuracy(protos, embed(store, stream.pretrain_eval.samples), stream.pretrain_eval.labels)


# ---------------------------------------------------------------------------
# Runs


@dataclass(frozen=True)
class Arm:
    """One grid point: which pre-adaptation runs before the host each task."""

    name: str
    adapt: str = "none"  # none | sparse | fft
    scorer: str = "mi_fisher"
    loss: str = "mi"
    k_percent: float | None = None
    d_percent: float | None = None
    mi_batch_size: int | None = None


@dataclass
class EfficiencyCounters:
    delta_p: float
    update_flops: float
    batch_time_ms: float


@dataclass
class ArmResult:
    run_id: str
    arm: Arm
    repeat: int
    seed: int
    metrics: MetricTable | None
    zero_shot: list[float]
    reports: list[PreAdaptReport]
    counters: EfficiencyCounters | None
    events: list[dict] = field(default_factory=list)
    error: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "compare"
    stream: StreamConfig = field(default_factory=StreamConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mist: MistConfig = field(default_factory=MistConfig)
    host: str = "prototype"
    host_epochs: int = 100
    host_lr: float = 0.1
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 32
    seed: int = 0
    repeats: int = 1
    jobs: int = 1

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def protocol_arms(protocol: str, mist: MistConfig) -> list[Arm]:
    mist_arm = Arm("mist", "sparse", "mi_fisher", "mi")
    if protocol == "compare":
        return [
            Arm("baseline"),
            mist_arm,
            Arm("grad", "sparse", "grad_magnitude", "ce", d_percent=0.0),
            Arm("rand", "sparse", "random", "ce", d_percent=0.0),
            Arm("l2", "sparse", "l2_norm", "ce", d_percent=0.0),
            Arm("fft", "fft"),
        ]
    if protocol == "ablation":
        return [
            Arm("baseline"),
            Arm("mask_ce", "sparse", "mi_fisher", "ce", d_percent=0.0),
            Arm("mask_mi", "sparse", "mi_fisher", "mi", d_percent=0.0),
            Arm("mask_mi_dropout", "sparse", "mi_fisher", "mi"),
        ]
    if protocol == "sweep_k":
        return [replace(mist_arm, name=f"k={k:g}", k_percent=k) for k in SWEEP_K]
    if protocol == "sweep_d":
        return [replace(mist_arm, name=f"d={d:g}", d_percent=d) for d in SWEEP_D]
    if protocol == "batch_size":
        return [replace(mist_arm, name=f"batch={b}", mi_batch_size=b) for b in BATCH_SIZES]
    if protocol == "erosion":
        return [Arm("baseline"), mist_arm, Arm("fft", "fft")]
    raise ValueError(f"unknown protocol {protocol!r}")


def arm_config(arm: Arm, base: MistConfig, seed: int) -> MistConfig:
    changes = {"seed": seed, "scorer": arm.scorer, "loss": arm.loss}
    if arm.k_percent is not None:
        changes["k_percent"] = arm.k_percent
    if arm.d_percent is not None:
        changes["d_percent"] = arm.d_percent
    if arm.mi_batch_size is not None:
        changes["mi_batch_size"] = arm.mi_batch_size
    return replace(base, **changes)


def loss_flops(batch_size: int, store: ParamStore, loss: str) -> float:
    """Rough forward+backward FLOP count of one loss evaluation."""
    macs = sum(v.size for n, v in store.items() if n.endswith(".weight"))
    views = 2 if loss == "mi" else 1
    feat = store.value(sorted(n for n in store.names() if n.endswith(".weight"))[-1]).shape[1]
    body = 3 * 2 * views * batch_size * macs
    contrast = 3 * 2 * 3 * batch_size * batch_size * feat if loss == "mi" else 0
    return float(body + contrast)


def run_arm(
    arm: Arm,
    stream: TaskStream,
    pretrained: ParamStore,
    cfg: ExperimentConfig,
    repeat: int = 0,
    repeat_seed: int = 0,
) -> ArmResult:
    """Run one method over the whole stream from a copy of the pretrained backbone."""
    store = pretrained.copy()
    run_id = f"{arm.name}/r{repeat}"
    seed = derive_seed(repeat_seed, _ARM)
    mcfg = arm_config(arm, cfg.mist, seed)
    host = make_host(cfg.host, store, seed=derive_seed(repeat_seed, _HOST), epochs=cfg.host_epochs, lr=cfg.host_lr)
    events: list[dict] = []

    def sink(ev: dict) -> None:
        events.append({"run_id": run_id, **ev})

    R: list[list[float]] = []
    zero_shot = [zero_shot_eval(store, stream)]
    reports: list[PreAdaptReport] = []
    for t, task in enumerate(stream.tasks):
        store.trainable = True
        if arm.adapt == "sparse":
            reports.append(pre_adapt(store, task, mcfg, t, sink))
        elif arm.adapt == "fft":
            reports.append(fft_pre_adapt(store, task, mcfg, t, sink))
        store.trainable = False
        host.fit(store, [task])
        R.append([
            100.0 * float(np.mean(host.predict(store, stream.tests[i].samples) == stream.tests[i].labels))
            for i in range(t + 1)
        ])
        zero_shot.append(zero_shot_eval(store, stream))
    counters = None
    if reports:
        batches = sum(r.batches for r in reports)
        delta_p = float(np.mean([r.scalars_updated_per_batch for r in reports]))
        flops = 2.0 * delta_p + loss_flops(mcfg.mi_batch_size, store, "ce" if arm.adapt == "fft" else mcfg.loss)
        ms = 1000.0 * sum(r.wall_time for r in reports) / max(batches, 1)
        counters = EfficiencyCounters(delta_p, flops, ms)
    else:
        counters = EfficiencyCounters(0.0, 0.0, 0.0)
    return ArmResult(run_id, arm, repeat, seed, compute_metrics(R), zero_shot, reports, counters, events)


def prepare(
    cfg: ExperimentConfig, repeat_seed: int, pretrained: ParamStore | None = None
) -> tuple[TaskStream, ParamStore, dict]:
    """Generate the stream and pretrain a backbone for one repeat.

    A ``pretrained`` store (for instance a loaded checkpoint) skips training;
    it is copied, never modified.
    """
    stream = stream_from_config(cfg.stream, repeat_seed)
    if pretrained is not None:
        if input_dim(pretrained) != cfg.stream.input_dim:
            raise ValueError(
                f"checkpoint expects input_dim {input_dim(pretrained)}, stream has {cfg.stream.input_dim}"
            )
        store = pretrained.copy()
        return stream, store, {"pretrain_loss": [], "pretrain_accuracy": zero_shot_eval(store, stream)}
    bcfg = replace(cfg.backbone, input_dim=cfg.stream.input_dim, seed=derive_seed(repeat_seed, _PRETRAIN_INIT) % 2**64)
    store = init_backbone(bcfg)
    order = np.random.default_rng(derive_seed(repeat_seed, _PRETRAIN_HEAD)).permutation(len(stream.pretrain_train))
    bs = cfg.pretrain_batch_size
    batches = [
        Batch(stream.pretrain_train.samples[order[i : i + bs]], stream.pretrain_train.labels[order[i : i + bs]])
        for i in range(0, len(order), bs)
    ]
    result = pretrain(store, batches, cfg.pretrain_epochs, cfg.pretrain_lr,
                      seed=derive_seed(repeat_seed, _PRETRAIN_HEAD), held_out=stream.pretrain_eval)
    info = {"pretrain_loss": result.loss_trace, "pretrain_accuracy": result.held_out_accuracy}
    return stream, store, info


@dataclass
class RunRecord:
    config: ExperimentConfig
    runs: list[ArmResult]
    pretrain: list[dict]
    wall_time: float = 0.0

    def summary(self) -> dict[str, dict[str, float]]:
        """Mean final and average accuracy per arm over repeats."""
        out: dict[str, dict[str, list[float]]] = {}
        for r in self.runs:
            if r.metrics is None:
                continue
            d = out.setdefault(r.arm.name, {"A_T": [], "A_bar": [], "zero_shot_final": []})
            d["A_T"].append(r.metrics.A_T)
            d["A_bar"].append(r.metrics.A_bar)
            d["zero_shot_final"].append(r.zero_shot[-1])
        return {name: {k: float(np.mean(v)) for k, v in d.items()} for name, d in out.items()}


def run_experiment(
    protocol: str | None = None,
    config: ExperimentConfig | None = None,
    on_result: Callable[[ArmResult], None] | None = None,
    pretrained: ParamStore | None = None,
) -> RunRecord:
    """Execute every arm of ``protocol`` for each repeat of ``config``.

    Repeat ``r`` regenerates the stream and the pretrained backbone from
    ``derive_seed(config.seed, r)``. A failing arm is recorded with its error
    and the grid continues.
    """
    cfg = config or ExperimentConfig()
    if protocol is not None and protocol != cfg.protocol:
        cfg = replace(cfg, protocol=protocol)
    start = time.perf_counter()
    arms = protocol_arms(cfg.protocol, cfg.mist)
    jobs, pretrain_info = [], []
    for rep in range(cfg.repeats):
        rep_seed = derive_seed(cfg.seed, rep)
        stream, store, info = prepare(cfg, rep_seed, pretrained)
        pretrain_info.append(info)
        jobs.extend((arm, stream, store, rep, rep_seed) for arm in arms)

    def work(job):
        arm, stream, store, rep, rep_seed = job
        try:
            return run_arm(arm, stream, store, cfg, rep, rep_seed)
        except Exception as exc:  # a failed grid point is recorded, not fatal
            log.exception("arm %s repeat %d failed", arm.name, rep)
            return ArmResult(f"{arm.name}/r{rep}", arm, rep, rep_seed, None, [], [], None, [], repr(exc))

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    if on_result is not None:
        for r in results:
            on_result(r)
    return RunRecord(cfg, results, pretrain_info, time.perf_counter() - start)


def expected_delta_p(total: int, k_percent: float, d_percent: float) -> int:
    return updated_per_batch(total, k_percent, d_percent)


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
