"""Synthetic scenarios, a per-pixel linear model and deterministic full-batch training."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

import numpy as np

from .debuglog import log_event
from .errors import InvalidParameterError, InvalidSpecError
from .fields import DEFAULT_TAU, LabelField, LogitField, Marginal, ProbField, gt_marginal, predicted_marginal, temperature_softmax
from .grad import loss_gradient
from .losses import LossSpec, build_loss, l1_marginal
from .theory import make_rng

DEFAULT_LR = 0.1
DEFAULT_EPOCHS = 500
DEFAULT_LAMBDA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 10.0)
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
LR_GROW = 1.1
LR_SHRINK = 0.5


class ScenarioName(str, Enum):
    BINARY_IMBALANCED = "binary_imbalanced"
    MULTICLASS_DIVERSE = "multiclass_diverse"
    MARGINAL_ONLY = "marginal_only"


@dataclass(frozen=True)
class ScenarioSpec:
    name: ScenarioName
    height: int
    width: int
    num_classes: int
    target_proportions: Marginal
    feature_dim: int
    class_separation: float
    noise_sigma: float
    seed: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "name", ScenarioName(self.name))
        if not isinstance(self.target_proportions, Marginal):
            object.__setattr__(self, "target_proportions", Marginal(np.asarray(self.target_proportions)))
        if self.height < 1 or self.width < 1:
            raise InvalidSpecError(f"grid must be non-empty, got {self.height}x{self.width}")
        if len(self.target_proportions) != self.num_classes:
            raise InvalidSpecError("target_proportions length must equal num_classes")
        if self.feature_dim < self.num_classes:
            raise InvalidSpecError(f"feature_dim must be >= num_classes ({self.num_classes}), got {self.feature_dim}")
        if not (math.isfinite(self.class_separation) and self.class_separation >= 0.0):
            raise InvalidSpecError(f"class_separation must be >= 0, got {self.class_separation!r}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise InvalidSpecError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        if not 0 <= int(self.seed) < 1 << 64:
            raise InvalidSpecError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return dataclasses.replace(self, seed=seed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name.value,
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "target_proportions": [float(v) for v in self.target_proportions.values],
            "feature_dim": self.feature_dim,
            "class_separation": self.class_separation,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }


_DEFAULTS: dict[ScenarioName, dict[str, Any]] = {
    ScenarioName.BINARY_IMBALANCED: dict(
        height=64, width=64, num_classes=2, target_proportions=(0.01, 0.99),
        feature_dim=2, class_separation=1.0, noise_sigma=1.0,
    ),
    ScenarioName.MULTICLASS_DIVERSE: dict(
        height=64, width=64, num_classes=5, target_proportions=(0.50, 0.30, 0.15, 0.04, 0.01),
        feature_dim=5, class_separation=3.0, noise_sigma=1.0,
    ),
    ScenarioName.MARGINAL_ONLY: dict(
        height=32, width=32, num_classes=3, target_proportions=(0.7, 0.2, 0.1),
        feature_dim=3, class_separation=0.0, noise_sigma=1.0,
    ),
}


def default_scenario(name: str | ScenarioName, seed: int = 1, **overrides: Any) -> ScenarioSpec:
    try:
        key = ScenarioName(name)
    except ValueError as exc:
        choices = ", ".join(n.value for n in ScenarioName)
        raise InvalidSpecError(f"unknown scenario {name!r}; choose from {choices}") from exc
    params = {**_DEFAULTS[key], **overrides}
    params["target_proportions"] = Marginal(np.asarray(params["target_proportions"], dtype=np.float64))
    return ScenarioSpec(name=key, seed=seed, **params)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: LabelField

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.num_pixels or not np.all(np.isfinite(self.features)):
            raise InvalidSpecError("features must be finite with one row per pixel")


@dataclass(frozen=True)
class Model:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "Model":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.bias

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias)))


def region_counts(targets: Marginal, num_pixels: int) -> np.ndarray:
    """Largest-remainder rounding of targets * num_pixels; every class gets at least one pixel."""
    raw = targets.values * num_pixels
    counts = np.floor(raw).astype(np.int64)
    short = num_pixels - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise InvalidSpecError(f"class {int(empty[0])} gets no pixel at {num_pixels} pixels")
    return counts


def class_means(num_classes: int, feature_dim: int, separation: float) -> np.ndarray:
    """Simplex-vertex means; every pair sits exactly `separation` apart."""
    means = np.zeros((num_classes, feature_dim))
    means[:, :num_classes] = (np.eye(num_classes) - 1.0 / num_classes) * (separation / math.sqrt(2.0))
    return means


def make_scenario(spec: ScenarioSpec) -> Dataset:
    counts = region_counts(spec.target_proportions, spec.num_pixels)
    centre_rng = make_rng(spec.seed, "scenario:centre")
    cy, cx = centre_rng.uniform(0.0, spec.height), centre_rng.uniform(0.0, spec.width)
    yy, xx = np.divmod(np.arange(spec.num_pixels), spec.width)
    order = np.argsort((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2, kind="stable")
    labels = np.empty(spec.num_pixels, dtype=np.int64)
    start = 0
    # smallest class nearest the centre
    for k in np.argsort(counts, kind="stable"):
        labels[order[start : start + counts[k]]] = k
        start += counts[k]
    g = LabelField(spec.height, spec.width, spec.num_classes, labels)
    noise = make_rng(spec.seed, "scenario:noise").normal(0.0, 1.0, size=(spec.num_pixels, spec.feature_dim))
    means = class_means(spec.num_classes, spec.feature_dim, spec.class_separation)
    return Dataset(means[labels] + spec.noise_sigma * noise, g)


@dataclass(frozen=True)
class Metrics:
    dsc_per_class: tuple[float, ...]
    mean_dsc: float
    iou_per_class: tuple[float, ...]
    mean_iou: float
    marginal_l1_error: float
    region_proportions: tuple[float, ...]

    @property
    def excluded_classes(self) -> tuple[int, ...]:
        return tuple(k for k, v in enumerate(self.dsc_per_class) if math.isnan(v))


def evaluate(p: ProbField, g: LabelField) -> Metrics:
    """Hard-argmax DSC and IoU; a class absent from both prediction and ground truth is excluded (NaN)."""
    pred = p.argmax()
    k = g.num_classes
    inter = np.bincount(g.labels[pred == g.labels], minlength=k).astype(np.float64)
    pred_sizes = np.bincount(pred, minlength=k).astype(np.float64)
    gt_sizes = g.region_sizes().astype(np.float64)
    union = pred_sizes + gt_sizes - inter
    both = pred_sizes + gt_sizes
    with np.errstate(invalid="ignore", divide="ignore"):
        dsc = np.where(both > 0, 2.0 * inter / both, np.nan)
        iou = np.where(union > 0, inter / union, np.nan)
    y = gt_marginal(g)
    return Metrics(
        dsc_per_class=tuple(float(v) for v in dsc),
        mean_dsc=float(np.nanmean(dsc)),
        iou_per_class=tuple(float(v) for v in iou),
        mean_iou=float(np.nanmean(iou)),
        marginal_l1_error=l1_marginal(y, predicted_marginal(p)),
        region_proportions=tuple(float(v) for v in y.values),
    )


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    loss: float
    marginal: tuple[float, ...]
    dsc: tuple[float, ...]
    miou: float
    lr: float


@dataclass(frozen=True)
class TrainTrace:
    rows: tuple[TraceRow, ...]
    model: Model
    status: str
    epochs: int
    metrics: Metrics | None = None

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final_marginal(self) -> tuple[float, ...]:
        return self.rows[-1].marginal if self.rows else ()


def _objective(
    model: Model,
    spec: LossSpec,
    data: Dataset,
    tau: float,
    marginal_tau: float | None,
) -> tuple[float, np.ndarray, np.ndarray] | None:
    """Loss and parameter gradients, or None when anything is non-finite."""
    with np.errstate(over="ignore", invalid="ignore"):
        z = model.logits(data.features)
    if not np.all(np.isfinite(z)):
        return None
    value, grad = loss_gradient(spec, LogitField.like(data.labels, z), data.labels, tau, marginal_tau)
    if not (math.isfinite(value) and np.all(np.isfinite(grad.values))):
        return None
    return value, grad.values.T @ data.features, grad.values.sum(axis=0)


def train(
    model0: Model,
    spec: LossSpec,
    data: Dataset,
    lr: float = DEFAULT_LR,
    epochs: int = DEFAULT_EPOCHS,
    tau: float = DEFAULT_TAU,
    adaptive: bool = False,
    marginal_tau: float | None = None,
) -> TrainTrace:
    """Full-batch gradient descent with a fixed step ``lr``.

    A non-finite loss or gradient stops the run with status ``diverged``. With
    ``adaptive`` a step is kept only if the loss does not increase; the step
    size then grows by LR_GROW, otherwise it shrinks by LR_SHRINK and the
    parameters stay put. ``lr`` is then only the initial step.
    """
    if not (math.isfinite(lr) and lr > 0.0):
        raise InvalidParameterError(f"lr must be > 0, got {lr!r}")
    if epochs < 1:
        raise InvalidParameterError(f"epochs must be >= 1, got {epochs}")
    log_event("train", "start", loss=spec.label(), epochs=epochs, lr=lr, adaptive=adaptive)
    model = model0
    current = _objective(model, spec, data, tau, marginal_tau)
    rows: list[TraceRow] = []
    if current is None:
        log_event("train", "diverged", epoch=0)
        return TrainTrace((), model, "diverged", epochs)
    step = lr
    for epoch in range(1, epochs + 1):
        value, g_w, g_b = current
        proposal = Model(model.weights - step * g_w, model.bias - step * g_b)
        candidate = _objective(proposal, spec, data, tau, marginal_tau) if proposal.is_finite() else None
        if adaptive:
            if candidate is not None and candidate[0] <= value:
                model, current = proposal, candidate
                step *= LR_GROW
            else:
                step *= LR_SHRINK
        else:
            if candidate is None:
                log_event("train", "diverged", epoch=epoch)
                return TrainTrace(tuple(rows), model, "diverged", epochs)
            model, current = proposal, candidate
        rows.append(_trace_row(epoch, current[0], model, data, tau, step))
    p = temperature_softmax(LogitField.like(data.labels, model.logits(data.features)), tau)
    metrics = evaluate(p, data.labels)
    log_event("train", "done", loss=spec.label(), final=current[0], mean_dsc=metrics.mean_dsc)
    return TrainTrace(tuple(rows), model, "ok", epochs, metrics)


def _trace_row(epoch: int, value: float, model: Model, data: Dataset, tau: float, step: float) -> TraceRow:
    p = temperature_softmax(LogitField.like(data.labels, model.logits(data.features)), tau)
    metrics = evaluate(p, data.labels)
    return TraceRow(
        epoch=epoch,
        loss=value,
        marginal=tuple(float(v) for v in predicted_marginal(p).values),
        dsc=metrics.dsc_per_class,
        miou=metrics.mean_iou,
        lr=step,
    )


@dataclass(frozen=True)
class SweepRow:
    loss: str
    lam: float
    seed: int
    status: str
    final_loss: float
    marginal: tuple[float, ...]
    metrics: Metrics | None


def _resolve(entry: str | LossSpec, lam: float | None = None) -> LossSpec:
    if isinstance(entry, LossSpec):
        return entry if lam is None else entry.with_lambda(lam)
    return build_loss(entry, lam)


def _run_one(
    scenario: ScenarioSpec,
    entry: str | LossSpec,
    lam: float,
    seed: int,
    lr: float,
    epochs: int,
    tau: float,
    adaptive: bool,
) -> SweepRow:
    spec = _resolve(entry, lam)
    log_event("sweep", "run", spec=spec.label(), lam=lam, seed=seed)
    data = make_scenario(scenario.with_seed(seed))
    trace = train(Model.zeros(scenario.num_classes, scenario.feature_dim), spec, data, lr, epochs, tau, adaptive)
    final_loss = trace.rows[-1].loss if trace.rows else float("nan")
    return SweepRow(spec.label(), float(lam), seed, trace.status, final_loss, trace.final_marginal, trace.metrics)


def sweep(
    scenario: ScenarioSpec,
    losses: Sequence[str | LossSpec],
    lambdas: Sequence[float] = DEFAULT_LAMBDA_GRID,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    lr: float = DEFAULT_LR,
    epochs: int = DEFAULT_EPOCHS,
    tau: float = DEFAULT_TAU,
    threads: int = 0,
    adaptive: bool = False,
) -> list[SweepRow]:
    """One run per (loss, lambda, seed), returned in that canonical order.

    A loss is a preset name or a LossSpec; lambda reweights the regularizer
    terms of composites and is ignored by leaf losses.
    """
    if not losses or not lambdas or not seeds:
        raise InvalidParameterError("sweep needs non-empty losses, lambdas and seeds")
    for entry in losses:
        _resolve(entry)
    jobs = [(entry, lam, seed) for entry in losses for lam in lambdas for seed in seeds]

    def run(job: tuple[str | LossSpec, float, int]) -> SweepRow:
        return _run_one(scenario, job[0], job[1], job[2], lr, epochs, tau, adaptive)

    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


@dataclass(frozen=True)
class SummaryRow:
    loss: str
    lam: float
    runs: int
    diverged: int
    mean_dsc: tuple[float, float]
    mean_iou: tuple[float, float]
    marginal_l1_error: tuple[float, float]
    p1: tuple[float, float]


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(rows: Sequence[SweepRow]) -> list[SummaryRow]:
    """Mean and standard deviation over seeds for every (loss, lambda), diverged runs left out."""
    groups: dict[tuple[str, float], list[SweepRow]] = {}
    for row in rows:
        groups.setdefault((row.loss, row.lam), []).append(row)
    out = []
    for (name, lam), members in groups.items():
        done = [r for r in members if r.metrics is not None]
        out.append(
            SummaryRow(
                loss=name,
                lam=lam,
                runs=len(members),
                diverged=len(members) - len(done),
                mean_dsc=_mean_std([r.metrics.mean_dsc for r in done]),
                mean_iou=_mean_std([r.metrics.mean_iou for r in done]),
                marginal_l1_error=_mean_std([r.metrics.marginal_l1_error for r in done]),
                p1=_mean_std([r.marginal[0] for r in done]),
            )
        )
    return out
