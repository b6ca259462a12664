"""Class-incremental training: task streams, herding memory, NCM prediction, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import LabeledDataset
from .distill import DistillConfig, kd_terms
from .model import L3Model, ModelSnapshot, cross_entropy
from .numerics import NumericError, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """A numeric failure during training, tagged with the global step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.partial: "SequenceResult | None" = None


# -- task streams ------------------------------------------------------------------


@dataclass
class Task:
    X: np.ndarray
    y: np.ndarray  # stream-order class ids
    classes: list[int]


@dataclass
class TaskStream:
    tasks: list[Task]
    class_order: list[int]  # class_order[k] = original label of stream class k
    seed: int

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def route(self, dataset: LabeledDataset) -> list[Task]:
        """Split another dataset (e.g. the test set) along the same class groups."""
        return _route(dataset, self.class_order, [t.classes for t in self.tasks])


def task_group_sizes(num_classes: int, num_tasks: int) -> list[int]:
    if num_tasks < 1:
        raise ValueError("need at least one task")
    if num_tasks > num_classes:
        raise ValueError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    base, extra = divmod(num_classes, num_tasks)
    return [base + (1 if i < extra else 0) for i in range(num_tasks)]


def _route(dataset: LabeledDataset, class_order: list[int], groups: list[list[int]]) -> list[Task]:
    remap = np.full(max(class_order) + 1, -1, dtype=np.int64)
    remap[class_order] = np.arange(len(class_order))
    y_stream = remap[dataset.y]
    tasks = []
    for classes in groups:
        mask = np.isin(y_stream, classes)
        tasks.append(Task(np.array(dataset.X[mask]), y_stream[mask], list(classes)))
    return tasks


def build_task_stream(dataset: LabeledDataset, num_tasks: int, seed: int) -> TaskStream:
    """Shuffle classes by ``seed`` and cut them into contiguous disjoint groups.

    Labels are renumbered in stream order, so task ``t`` owns the ids directly
    after those of task ``t-1`` and the classifier can grow by appending.
    """
    C = dataset.num_classes
    sizes = task_group_sizes(C, num_tasks)
    order = np.random.default_rng(seed).permutation(C).tolist()
    bounds = np.cumsum([0, *sizes])
    groups = [list(range(bounds[i], bounds[i + 1])) for i in range(num_tasks)]
    return TaskStream(_route(dataset, order, groups), order, seed)


# -- exemplar memory -------------------------------------------------------------------


def herding_select(features, quota: int) -> list[int]:
    """Greedy herding: keep the running exemplar mean close to the class mean.

    Ties go to the lowest index. Returns indices in selection order.
    """
    F = np.asarray(features, dtype=np.float64)
    n = F.shape[0]
    if quota > n:
        raise ValueError(f"quota {quota} exceeds the {n} available samples")
    mu = F.mean(axis=0)
    running = np.zeros_like(mu)
    taken = np.zeros(n, dtype=bool)
    order: list[int] = []
    for k in range(quota):
        gaps = np.linalg.norm(mu - (running + F) / (k + 1), axis=1)
        gaps[taken] = np.inf
        j = int(np.argmin(gaps))
        order.append(j)
        taken[j] = True
        running += F[j]
    return order


@dataclass
class Memory:
    capacity: int
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("memory capacity must be >= 0")

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def quota(self, classes_seen: int) -> int:
        q = self.capacity // classes_seen
        if q < 1:
            raise ValueError(
                f"memory capacity {self.capacity} leaves no room for {classes_seen} classes"
            )
        return q

    def data(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.exemplars:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        X = np.concatenate([self.exemplars[c] for c in self.classes])
        y = np.concatenate([np.full(len(self.exemplars[c]), c) for c in self.classes])
        return X, y


def update_memory(memory: Memory, model: L3Model, X_t, y_t) -> None:
    """Shrink stored classes to the new quota, then herd exemplars for new ones."""
    X_t = np.asarray(X_t, dtype=np.float64)
    y_t = np.asarray(y_t)
    new = sorted(set(np.unique(y_t).tolist()) - set(memory.exemplars))
    q = memory.quota(len(memory.exemplars) + len(new))
    for c in memory.classes:
        memory.exemplars[c] = memory.exemplars[c][:q]
    for c in new:
        Xc = X_t[y_t == c]
        with no_grad():
            feats = model.forward_features(Xc).data
        picks = herding_select(feats, min(q, len(Xc)))
        memory.exemplars[c] = Xc[picks]


def class_templates(model: L3Model, memory: Memory) -> tuple[list[int], np.ndarray]:
    classes = memory.classes
    with no_grad():
        mus = [model.forward_features(memory.exemplars[c]).data.mean(axis=0) for c in classes]
    return classes, np.stack(mus)


def ncm_predict(model: L3Model, memory: Memory, X) -> np.ndarray:
    """Nearest class template in feature space; ties go to the lowest class id."""
    missing = [c for c in range(model.num_classes) if len(memory.exemplars.get(c, ())) == 0]
    if missing:
        raise ValueError(f"no exemplars stored for seen classes {missing}")
    classes, mus = class_templates(model, memory)
    with no_grad():
        Z = model.forward_features(np.asarray(X, dtype=np.float64)).data
    d = np.linalg.norm(Z[:, None, :] - mus[None, :, :], axis=2)
    return np.asarray(classes)[np.argmin(d, axis=1)]


def classifier_predict(model: L3Model, X) -> np.ndarray:
    with no_grad():
        return np.argmax(model.forward_logits(np.asarray(X, dtype=np.float64)).data, axis=1)


# -- training ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    clip: float = 10.0
    patience: int = 10
    val_fraction: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    use_kd: bool = True
    kd_scale: float = 1.0
    distill: DistillConfig = field(default_factory=DistillConfig)


@dataclass
class TrainReport:
    epoch_losses: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = 0
    best_val_acc: float | None = None
    steps: int = 0
    max_ridge: float = 0.0
    max_condition: float = 0.0


def _split_validation(y: np.ndarray, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(len(y))
    n_val = int(round(fraction * len(y)))
    if fraction <= 0 or n_val == 0 or n_val == len(y):
        return np.sort(idx), np.zeros(0, dtype=np.int64)
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


def train_task(model: L3Model, old: ModelSnapshot | None, X_t, y_t, memory: Memory | None,
               cfg: TrainConfig, seed: int = 0, step_offset: int = 0) -> TrainReport:
    """Train on one task's data plus replayed exemplars.

    Each step minimizes cross-entropy on the live classifier plus, when an old
    snapshot is given and ``cfg.use_kd`` is set, ``kd_scale`` times the
    subspace distillation loss between old and new features of the batch.
    Gradients are clipped elementwise to ``[-clip, clip]`` before the SGD
    update; the best-validation parameters are restored at the end.
    """
    X_t = np.asarray(X_t, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.int64)
    rng = np.random.default_rng(seed)
    needed = int(y_t.max()) + 1
    if memory is not None and memory.exemplars:
        needed = max(needed, max(memory.exemplars) + 1)
    if needed > model.num_classes:
        model.expand_classifier(needed)

    tr, va = _split_validation(y_t, cfg.val_fraction, rng)
    X_pool, y_pool = X_t[tr], y_t[tr]
    if memory is not None and len(memory):
        Xm, ym = memory.data()
        X_pool = np.concatenate([X_pool, Xm])
        y_pool = np.concatenate([y_pool, ym])
    X_val, y_val = X_t[va], y_t[va]

    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params] if cfg.momentum else None
    use_kd = old is not None and cfg.use_kd
    report = TrainReport()
    best_state = model.state_dict()
    best_acc = -1.0
    stale = 0
    step = step_offset
    N = len(y_pool)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(N)
        sums = {"ce": 0.0, "kd": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            Xb, yb = X_pool[idx], y_pool[idx]
            try:
                feats = model.forward_features(Xb)
                ce = cross_entropy(model.classify(feats), yb)
                loss = ce
                kd_value = 0.0
                if use_kd:
                    with no_grad():
                        old_feats = old.forward_features(Xb)
                    terms = kd_terms(feats, old_feats, model, old, cfg.distill)
                    loss = ce + cfg.kd_scale * terms.loss
                    kd_value = terms.loss.item()
                    for r in terms.reports.values():
                        report.max_ridge = max(report.max_ridge, r.ridge_added)
                        report.max_condition = max(report.max_condition, r.condition_estimate)
                model.zero_grad()
                backward(loss)
            except NumericError as exc:
                raise TrainingError(f"non-finite loss or failed solve: {exc}", step) from exc
            for i, p in enumerate(params):
                if p.grad is None:
                    # not reached by this loss, e.g. the heads before any distillation
                    if not (cfg.weight_decay or velocity is not None):
                        continue
                    g = np.zeros_like(p.data)
                else:
                    g = np.clip(p.grad, -cfg.clip, cfg.clip)
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.data
                if velocity is not None:
                    velocity[i] = cfg.momentum * velocity[i] + g
                    g = velocity[i]
                p.data = p.data - cfg.lr * g
            sums["ce"] += ce.item()
            sums["kd"] += kd_value
            sums["total"] += loss.item()
            batches += 1
            step += 1
        report.epoch_losses.append({k: v / max(batches, 1) for k, v in sums.items()})
        report.epochs_run = epoch + 1

        if len(y_val):
            acc = float(np.mean(classifier_predict(model, X_val) == y_val))
            # ties move the restore point forward but do not reset patience
            stale = 0 if acc > best_acc else stale + 1
            if acc >= best_acc:
                best_acc, best_state = acc, model.state_dict()
                report.best_epoch = epoch + 1
            if stale >= cfg.patience:
                break
    if len(y_val):
        model.load_state_dict(best_state)
        report.best_val_acc = best_acc
    else:
        report.best_epoch = report.epochs_run
    report.steps = step - step_offset
    return report


# -- metrics ---------------------------------------------------------------------------------


@dataclass
class MetricsLedger:
    """acc[t-1][i-1] = accuracy on task i after training task t (1-based tasks)."""

    acc: list[list[float]] = field(default_factory=list)

    def record(self, row: list[float]) -> None:
        if len(row) != len(self.acc) + 1:
            raise ValueError(f"row for task {len(self.acc) + 1} needs {len(self.acc) + 1} entries")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.acc.append([float(a) for a in row])


def compute_metrics(ledger: MetricsLedger, t: int) -> tuple[float, float | None]:
    """Average accuracy and average forgetting after task ``t`` (1-based).

    Forgetting is undefined (None) for ``t = 1``.
    """
    if t < 1 or t > len(ledger.acc):
        raise ValueError(f"no accuracy row for task {t}")
    acc = ledger.acc
    for j in range(t):
        if len(acc[j]) < j + 1:
            raise ValueError(f"missing entries in accuracy row {j + 1}")
    acc_t = sum(acc[t - 1][:t]) / t
    if t == 1:
        return acc_t, None
    gaps = []
    for i in range(t - 1):
        best = max(acc[j][i] for j in range(i, t - 1))
        gaps.append(best - acc[t - 1][i])
    return acc_t, sum(gaps) / (t - 1)


# -- full sequence ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    memory: bool
    kd: bool
    beta: float | None = None  # overrides the distillation beta when set
    single_task: bool = False


METHODS = {
    "l3dmc": MethodSpec(memory=True, kd=True),
    "replay": MethodSpec(memory=True, kd=False),
    "lower_bound": MethodSpec(memory=False, kd=False),
    "euclidean_only": MethodSpec(memory=True, kd=True, beta=0.0),
    "joint": MethodSpec(memory=True, kd=False, single_task=True),
}


@dataclass
class SequenceResult:
    ledger: MetricsLedger
    reports: list[TrainReport]
    memory_sizes: list[int]
    model: L3Model


def run_sequence(model: L3Model, train_tasks: list[Task], test_tasks: list[Task],
                 method: str, cfg: TrainConfig, memory_capacity: int, seed: int,
                 on_task_end=None) -> SequenceResult:
    """Train tasks in order and fill the accuracy ledger.

    After each task the memory is refreshed before evaluation, so the class
    templates for the newest classes exist. Methods without memory predict
    with the classifier head instead of nearest class mean.
    ``on_task_end(t, model)`` is called after each task is evaluated.
    """
    spec = METHODS[method]
    if spec.beta is not None:
        cfg = replace(cfg, distill=replace(cfg.distill, beta=spec.beta))
    cfg = replace(cfg, use_kd=spec.kd)
    memory = Memory(memory_capacity) if spec.memory else None
    ledger = MetricsLedger()
    reports, sizes = [], []
    old: ModelSnapshot | None = None
    step = 0
    for t, task in enumerate(train_tasks):
        try:
            rep = train_task(model, old, task.X, task.y, memory, cfg, seed=_task_seed(seed, t), step_offset=step)
        except TrainingError as err:
            err.partial = SequenceResult(ledger, reports, sizes, model)
            raise
        step += rep.steps
        reports.append(rep)
        if memory is not None:
            update_memory(memory, model, task.X, task.y)
            sizes.append(len(memory))
        row = []
        for test in test_tasks[: t + 1]:
            if len(test.y) == 0:
                raise ValueError(f"test split has no samples for task classes {test.classes}")
            pred = ncm_predict(model, memory, test.X) if memory is not None else classifier_predict(model, test.X)
            row.append(float(np.mean(pred == test.y)))
        ledger.record(row)
        log.info("task %d/%d acc row %s", t + 1, len(train_tasks), ["%.3f" % a for a in row])
        if on_task_end is not None:
            on_task_end(t, model)
        old = model.snapshot()
    return SequenceResult(ledger, reports, sizes, model)


def _task_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])
