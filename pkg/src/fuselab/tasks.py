"""Deterministic families of related synthetic classification tasks.

Each task labels shared-distribution Gaussian inputs by the argmax of its
own two-stage teacher (random projection, tanh, random readout). Teachers
mix a common component with a per-task private component: at overlap 1
every task has the same label function, at overlap 0 the teachers are
independent. Suites are reproducible from their seed alone.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .params import ParamTree

TEACHER_HIDDEN = 16
BALANCE_RETRIES = 10


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer labels."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.ascontiguousarray(np.asarray(self.xs, dtype=np.float64))
        ys = np.ascontiguousarray(np.asarray(self.ys, dtype=np.int64))
        if xs.ndim != 2 or ys.ndim != 1 or xs.shape[0] != ys.shape[0]:
            raise ContractError(
                f"dataset needs matching sample counts, got {xs.shape} and {ys.shape}"
            )
        if ys.size and ys.min() < 0:
            raise ContractError("labels must be non-negative")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def __len__(self) -> int:
        return int(self.ys.shape[0])

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.xs[idx], self.ys[idx])


@dataclass(frozen=True)
class Task:
    """One classification task with disjoint train/val/test splits."""

    id: str
    train: Dataset
    val: Dataset
    test: Dataset
    teacher: ParamTree | None = None


@dataclass(frozen=True)
class TaskSuite:
    tasks: tuple[Task, ...]
    seed: int
    input_dim: int
    num_classes: int
    task_overlap: float

    def task_ids(self) -> list[str]:
        return [t.id for t in self.tasks]

    def by_id(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise ContractError(f"unknown task id {task_id!r}")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])


def _teacher_labels(w: np.ndarray, v: np.ndarray, xs: np.ndarray) -> np.ndarray:
    scores = np.tanh(xs @ w.T) @ v.T
    return np.argmax(scores, axis=1).astype(np.int64)


def make_task_suite(
    n_tasks: int = 4,
    input_dim: int = 16,
    num_classes: int = 3,
    samples_per_split: int = 512,
    task_overlap: float = 0.3,
    seed: int = 0,
) -> TaskSuite:
    """Generate a deterministic suite of related classification tasks.

    ``samples_per_split`` sizes the train split; val and test each get half
    that (at least one sample per class). Teachers are mixed so that
    ``task_overlap`` is the correlation between any two tasks' teacher
    weights. Every split must contain every class; a violating split's
    inputs are redrawn from a fresh sub-seed, at most ten times.
    """
    if n_tasks < 2:
        raise ContractError("a suite needs at least two tasks")
    if not 0.0 <= task_overlap <= 1.0:
        raise ContractError("task_overlap must lie in [0, 1]")
    if samples_per_split < num_classes:
        raise ContractError(
            f"samples_per_split={samples_per_split} cannot cover {num_classes} classes"
        )
    sizes = {
        "train": samples_per_split,
        "val": max(num_classes, samples_per_split // 2),
        "test": max(num_classes, samples_per_split // 2),
    }

    common = _rng(seed, 0)
    w_common = common.standard_normal((TEACHER_HIDDEN, input_dim))
    v_common = common.standard_normal((num_classes, TEACHER_HIDDEN))
    wc = np.sqrt(task_overlap)
    wp = np.sqrt(1.0 - task_overlap)

    tasks = []
    for i in range(n_tasks):
        trng = _rng(seed, 1, i)
        w = wc * w_common + wp * trng.standard_normal((TEACHER_HIDDEN, input_dim))
        v = wc * v_common + wp * trng.standard_normal((num_classes, TEACHER_HIDDEN))
        splits = {}
        for s, name in enumerate(("train", "val", "test")):
            for attempt in range(BALANCE_RETRIES + 1):
                xs = _rng(seed, 2, i, s, attempt).standard_normal((sizes[name], input_dim))
                ys = _teacher_labels(w, v, xs)
                if len(np.unique(ys)) == num_classes:
                    break
            else:
                raise ContractError(
                    f"task {i} split {name!r} missing a class after {BALANCE_RETRIES} retries"
                )
            splits[name] = Dataset(xs, ys)
        teacher = ParamTree({"teacher.w": Tensor(w), "teacher.v": Tensor(v)})
        tasks.append(Task(id=f"task{i}", teacher=teacher, **splits))
    return TaskSuite(
        tasks=tuple(tasks),
        seed=int(seed),
        input_dim=input_dim,
        num_classes=num_classes,
        task_overlap=float(task_overlap),
    )


def teacher_agreement(suite: TaskSuite, n_points: int = 10000, probe_seed: int = 0) -> float:
    """Mean pairwise label agreement of the suite's teachers on shared probes."""
    xs = _rng(probe_seed, 99).standard_normal((n_points, suite.input_dim))
    labels = []
    for t in suite.tasks:
        if t.teacher is None:
            raise ContractError("suite tasks carry no teachers")
        labels.append(_teacher_labels(t.teacher["teacher.w"].array, t.teacher["teacher.v"].array, xs))
    pairs = list(itertools.combinations(range(len(labels)), 2))
    return float(np.mean([np.mean(labels[a] == labels[b]) for a, b in pairs]))


# --- columnar text export / import -------------------------------------------

FORMAT_LINE = "# fuselab-task v1"


def export_task(task: Task, path, suite: TaskSuite, config_digest: str = "") -> None:
    """Write one task as columnar text: header lines, then one sample per row."""
    lines = [FORMAT_LINE]
    lines.append(
        "# "
        + " ".join(
            f"{k}={v}"
            for k, v in [
                ("task_id", task.id),
                ("seed", suite.seed),
                ("input_dim", suite.input_dim),
                ("num_classes", suite.num_classes),
                ("task_overlap", repr(suite.task_overlap)),
                ("train", len(task.train)),
                ("val", len(task.val)),
                ("test", len(task.test)),
                ("config_digest", config_digest or "none"),
            ]
        )
    )
    cols = ["split", "label"] + [f"x{j}" for j in range(suite.input_dim)]
    lines.append(",".join(cols))
    for split_name in ("train", "val", "test"):
        ds: Dataset = getattr(task, split_name)
        for row, label in zip(ds.xs, ds.ys):
            vals = ",".join("%.17g" % v for v in row)
            lines.append(f"{split_name},{int(label)},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_task(path) -> tuple[Task, dict]:
    """Read a task file back; the teacher is not part of the text format."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != FORMAT_LINE:
        raise ContractError(f"{path} is not a task file")
    meta = {}
    for part in text[1].lstrip("# ").split():
        k, _, v = part.partition("=")
        meta[k] = v
    rows = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for line in text[3:]:
        if not line:
            continue
        split, label, rest = line.split(",", 2)
        rows[split][0].append([float(v) for v in rest.split(",")])
        rows[split][1].append(int(label))
    splits = {name: Dataset(np.array(xs), np.array(ys)) for name, (xs, ys) in rows.items()}
    return Task(id=meta["task_id"], teacher=None, **splits), meta
