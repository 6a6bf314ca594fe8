"""Disentanglement grids, loss-landscape interpolation, NTK verification, reports.

The disentanglement error of two task vectors at scaling factors
(l1, l2) is the sum over both tasks of the empirical probability that
the combined model's prediction differs from the single-vector model's
prediction on that task's data. Raw values live in [0, 2]; grids store
the halved value so heatmaps share a [0, 1] scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ResourceLimitError
from .models import LinearizedState, ModelSpec, forward, logits_program, predict_logits
from .params import ParamTree
from .task_vectors import TaskVector
from .tasks import Dataset
from .training import batch_loss_and_grad, ce_logit_gradient, cross_entropy_loss


@dataclass(frozen=True)
class DisentanglementGrid:
    lambda1_axis: np.ndarray
    lambda2_axis: np.ndarray
    xi: np.ndarray       # halved values in [0, 1]
    xi_raw: np.ndarray   # summed per-task disagreement in [0, 2]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.xi.shape != (len(self.lambda1_axis), len(self.lambda2_axis)):
            raise ContractError("grid shape does not match its axes")
        if np.any(self.xi < 0.0) or np.any(self.xi > 1.0):
            raise ContractError("stored disentanglement values must lie in [0, 1]")


@dataclass(frozen=True)
class LandscapeGrid:
    lambda1_axis: np.ndarray
    lambda2_axis: np.ndarray
    loss: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.loss.shape != (len(self.lambda1_axis), len(self.lambda2_axis)):
            raise ContractError("grid shape does not match its axes")
        if not np.all(np.isfinite(self.loss)):
            raise ContractError("landscape losses must be finite")


def _ordered_pair(nu1: TaskVector, l1: float, d1: Dataset, nu2: TaskVector, l2: float, d2: Dataset):
    """Canonical ordering of the two (vector, factor, data) triples.

    Fixes the float summation order of the combined parameters so the
    error is exactly symmetric under swapping the task pair.
    """
    k1 = (nu1.task_id, nu1.delta.digest())
    k2 = (nu2.task_id, nu2.delta.digest())
    if k2 < k1:
        return (nu2, l2, d2), (nu1, l1, d1)
    return (nu1, l1, d1), (nu2, l2, d2)


def _combined_tree(phi0: ParamTree, first: tuple, second: tuple) -> ParamTree:
    (nu_a, l_a, _), (nu_b, l_b, _) = first, second
    return phi0.add(nu_a.delta.scale(l_a)).add(nu_b.delta.scale(l_b))


def _predictions(spec: ModelSpec, theta0: ParamTree, phi0: ParamTree, tree: ParamTree, xs) -> np.ndarray:
    logits = predict_logits(spec, theta0, phi0, tree, xs)
    return np.argmax(logits.array, axis=1)


def disentanglement_error(
    spec: ModelSpec,
    theta0: ParamTree,
    phi0: ParamTree,
    nu1: TaskVector,
    nu2: TaskVector,
    lambda1: float,
    lambda2: float,
    eval_sets: tuple[Dataset, Dataset],
) -> float:
    """Summed per-task prediction disagreement, in [0, 2].

    Each term compares the single-vector model phi0 + l_i * nu_i against
    the combined model phi0 + l1*nu1 + l2*nu2 on task i's data; the
    expectation is the full empirical mean over the provided split.
    """
    d1, d2 = eval_sets
    if len(d1) == 0 or len(d2) == 0:
        raise ContractError("disentanglement eval sets must be non-empty")
    phi0.require_congruent(nu1.delta, "anchor tree and first task vector")
    phi0.require_congruent(nu2.delta, "anchor tree and second task vector")
    first, second = _ordered_pair(nu1, lambda1, d1, nu2, lambda2, d2)
    combined = _combined_tree(phi0, first, second)
    total = 0.0
    for nu, lam, data in (first, second):
        single = phi0.add(nu.delta.scale(lam))
        p_single = _predictions(spec, theta0, phi0, single, data.xs)
        p_combined = _predictions(spec, theta0, phi0, combined, data.xs)
        total += float(np.mean(p_single != p_combined))
    return total


def disentanglement_grid(
    spec: ModelSpec,
    theta0: ParamTree,
    phi0: ParamTree,
    nu1: TaskVector,
    nu2: TaskVector,
    eval_sets: tuple[Dataset, Dataset],
    lambda_range: float | tuple[float, float] = (-1.0, 2.0),
    resolution: int = 21,
    metadata: dict | None = None,
) -> DisentanglementGrid:
    """Disentanglement error over the Cartesian grid of scaling factors.

    A scalar range r means the symmetric box [-r, r]^2; the default box
    is [-1, 2]^2, covering and exceeding the [0, 1]^2 region fusion
    sweeps search. Single-vector predictions depend on one axis only and
    are computed once per axis value; results are identical to calling
    disentanglement_error cell by cell.
    """
    if resolution < 2:
        raise ContractError("grid resolution must be at least 2")
    if isinstance(lambda_range, (int, float)):
        lo, hi = -float(lambda_range), float(lambda_range)
    else:
        lo, hi = float(lambda_range[0]), float(lambda_range[1])
    if not lo < hi:
        raise ContractError(f"empty lambda range [{lo}, {hi}]")
    d1, d2 = eval_sets
    if len(d1) == 0 or len(d2) == 0:
        raise ContractError("disentanglement eval sets must be non-empty")
    phi0.require_congruent(nu1.delta, "anchor tree and first task vector")
    phi0.require_congruent(nu2.delta, "anchor tree and second task vector")
    axis1 = np.linspace(lo, hi, resolution)
    axis2 = np.linspace(lo, hi, resolution)

    singles1 = {}
    singles2 = {}
    for l1 in axis1:
        tree = phi0.add(nu1.delta.scale(float(l1)))
        singles1[float(l1)] = _predictions(spec, theta0, phi0, tree, d1.xs)
    for l2 in axis2:
        tree = phi0.add(nu2.delta.scale(float(l2)))
        singles2[float(l2)] = _predictions(spec, theta0, phi0, tree, d2.xs)

    raw = np.zeros((resolution, resolution))
    for i, l1 in enumerate(axis1):
        for j, l2 in enumerate(axis2):
            first, second = _ordered_pair(nu1, float(l1), d1, nu2, float(l2), d2)
            combined = _combined_tree(phi0, first, second)
            pc1 = _predictions(spec, theta0, phi0, combined, d1.xs)
            pc2 = _predictions(spec, theta0, phi0, combined, d2.xs)
            raw[i, j] = float(np.mean(singles1[float(l1)] != pc1)) + float(
                np.mean(singles2[float(l2)] != pc2)
            )
    meta = {"mode": spec.mode.value, "tasks": [nu1.task_id, nu2.task_id]}
    meta.update(metadata or {})
    return DisentanglementGrid(
        lambda1_axis=axis1, lambda2_axis=axis2, xi=raw / 2.0, xi_raw=raw, metadata=meta
    )


def loss_landscape_grid(
    spec: ModelSpec,
    theta0: ParamTree,
    theta1: ParamTree,
    theta2: ParamTree,
    lambda1_axis,
    lambda2_axis,
    eval_sets: tuple[Dataset, Dataset],
    metadata: dict | None = None,
) -> LandscapeGrid:
    """Joint cross-entropy over the plane theta0 + l1*(theta1-theta0) + l2*(theta2-theta0)."""
    if spec.mode.is_peft:
        raise ContractError("loss landscape interpolation needs full-paradigm trees")
    theta0.require_congruent(theta1, "backbone trees")
    theta0.require_congruent(theta2, "backbone trees")
    d1, d2 = eval_sets
    if len(d1) == 0 or len(d2) == 0:
        raise ContractError("landscape eval sets must be non-empty")
    axis1 = np.asarray(lambda1_axis, dtype=np.float64)
    axis2 = np.asarray(lambda2_axis, dtype=np.float64)
    v1 = theta1.sub(theta0)
    v2 = theta2.sub(theta0)
    loss = np.zeros((axis1.size, axis2.size))
    for i, l1 in enumerate(axis1):
        for j, l2 in enumerate(axis2):
            theta = theta0.add(v1.scale(float(l1))).add(v2.scale(float(l2)))
            total = 0.0
            for data in (d1, d2):
                logits = forward(spec.with_mode("full_ft"), theta0, theta, data.xs)
                total += cross_entropy_loss(logits, data.ys)
            loss[i, j] = total
    meta = dict(metadata or {})
    return LandscapeGrid(lambda1_axis=axis1, lambda2_axis=axis2, loss=loss, metadata=meta)


def normalized_score(absolute: float, single_task: float) -> float:
    """Merged-model score divided by the matching single-task model's score."""
    if single_task <= 0:
        raise ContractError(
            f"single-task reference score must be positive, got {single_task}"
        )
    return float(absolute) / float(single_task)


def ntk_one_step_check(
    spec: ModelSpec,
    theta0: ParamTree,
    lin: LinearizedState,
    xs,
    ys,
    eta: float,
    max_jacobian_samples: int = 64,
    optimizer: str = "sgd",
) -> tuple[np.ndarray, np.ndarray, float]:
    """Verify one-step tangent-model output dynamics against the kernel form.

    The observed delta comes from an actual full-batch SGD step on the
    tangent model; the predicted delta assembles explicit per-sample
    output Jacobians at the anchor into the kernel K(x, x') and applies
    -eta * mean over the batch of K @ (loss gradient). Exact for tangent
    models up to float arithmetic; only plain SGD satisfies the identity.
    """
    if optimizer != "sgd":
        raise ContractError("the one-step output-dynamics identity holds for sgd only")
    if not spec.mode.is_linearized:
        raise ContractError("ntk check applies to linearized paradigms only")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    batch = xs.shape[0]
    if batch > max_jacobian_samples:
        raise ResourceLimitError(
            f"batch of {batch} exceeds the explicit-Jacobian cap {max_jacobian_samples}"
        )
    anchor_flat = lin.phi0.flatten()
    num_params = anchor_flat.size
    num_classes = spec.num_classes

    # Per-sample output Jacobians at the anchor, one VJP per class.
    jac = np.zeros((batch, num_classes, num_params))
    for i in range(batch):
        f_i = logits_program(spec, theta0, xs[i : i + 1], lin.phi0)
        for c in range(num_classes):
            ct = np.zeros((1, num_classes))
            ct[0, c] = 1.0
            jac[i, c] = ad.vjp(f_i, anchor_flat, ct)

    flat = lin.phi.flatten()
    f_batch = logits_program(spec, theta0, xs, lin.phi0)
    value, tangent = ad.jvp(f_batch, anchor_flat, flat - anchor_flat)
    outputs_before = value + tangent
    g = ce_logit_gradient(outputs_before, ys)

    kernel = np.einsum("icp,jdp->ijcd", jac, jac)
    predicted = -eta * np.einsum("ijcd,jd->ic", kernel, g)

    _, grad_flat = batch_loss_and_grad(spec, theta0, anchor_flat, lin.phi0, flat, xs, ys)
    stepped = flat - eta * grad_flat
    value2, tangent2 = ad.jvp(f_batch, anchor_flat, stepped - anchor_flat)
    observed = (value2 + tangent2) - outputs_before

    obs_norm = float(np.linalg.norm(observed))
    if obs_norm == 0.0:
        rel = 0.0 if float(np.linalg.norm(predicted)) == 0.0 else np.inf
    else:
        rel = float(np.linalg.norm(predicted - observed)) / obs_norm
    return predicted, observed, rel


@dataclass(frozen=True)
class ReportRow:
    algorithm: str
    mode: str
    subset_size: int | None  # None pools every subset size
    n_subsets: int
    mean_normalized: float
    std_normalized: float


@dataclass(frozen=True)
class FusionReport:
    rows: tuple[ReportRow, ...]

    def lookup(self, algorithm: str, mode: str, subset_size=None) -> ReportRow:
        for r in self.rows:
            if (r.algorithm, r.mode, r.subset_size) == (algorithm, mode, subset_size):
                return r
        raise KeyError((algorithm, mode, subset_size))


def aggregate_report(results: list[dict]) -> FusionReport:
    """Mean and population std of per-subset normalized scores.

    Each result row needs: algorithm, mode, subset (sequence of ids), and
    mean_normalized_score. Rows group per (algorithm, mode) overall and
    per subset size.
    """
    if not results:
        raise ContractError("report needs at least one subset result")
    groups: dict[tuple, list[float]] = {}
    for r in results:
        size = len(r["subset"])
        score = float(r["mean_normalized_score"])
        groups.setdefault((r["algorithm"], r["mode"], None), []).append(score)
        groups.setdefault((r["algorithm"], r["mode"], size), []).append(score)
    rows = []
    for (algorithm, mode, size) in sorted(
        groups, key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2])
    ):
        scores = np.asarray(groups[(algorithm, mode, size)])
        rows.append(
            ReportRow(
                algorithm=algorithm,
                mode=mode,
                subset_size=size,
                n_subsets=scores.size,
                mean_normalized=float(scores.mean()),
                std_normalized=float(scores.std()),
            )
        )
    return FusionReport(rows=tuple(rows))


# --- CSV / text emission ------------------------------------------------------


def write_grid_csv(axis1, axis2, values, path, meta: str = "") -> None:
    """Matrix CSV whose first row and column carry the axes."""
    lines = []
    if meta:
        lines.append(f"# {meta}")
    lines.append(",".join(["lambda1\\lambda2", *("%.17g" % v for v in axis2)]))
    for l1, row in zip(axis1, values):
        lines.append(",".join(["%.17g" % l1, *("%.17g" % v for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    axis2 = np.array([float(v) for v in lines[0].split(",")[1:]])
    axis1 = []
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        axis1.append(float(parts[0]))
        rows.append([float(v) for v in parts[1:]])
    return np.array(axis1), axis2, np.array(rows)


def write_report_csv(report: FusionReport, path, meta: str = "") -> None:
    lines = []
    if meta:
        lines.append(f"# {meta}")
    lines.append("algorithm,mode,subset_size,n_subsets,mean_normalized,std_normalized")
    for r in report.rows:
        size = "all" if r.subset_size is None else str(r.subset_size)
        lines.append(
            "%s,%s,%s,%d,%.17g,%.17g"
            % (r.algorithm, r.mode, size, r.n_subsets, r.mean_normalized, r.std_normalized)
        )
    Path(path).write_text("\n".join(lines) + "\n")


def format_report_table(report: FusionReport) -> str:
    """Human-readable fixed-width table of the aggregated scores."""
    header = f"{'algorithm':<16} {'mode':<12} {'size':>5} {'n':>4} {'normalized score':>22}"
    lines = [header, "-" * len(header)]
    for r in report.rows:
        size = "all" if r.subset_size is None else str(r.subset_size)
        lines.append(
            f"{r.algorithm:<16} {r.mode:<12} {size:>5} {r.n_subsets:>4} "
            f"{r.mean_normalized:>12.4f} ± {r.std_normalized:.4f}"
        )
    return "\n".join(lines)
