"""Segmentation losses and label-marginal regularizers.

Every loss is a pure function of a ProbField and a LabelField. Classes are
0-based; in the binary case class 0 is the foreground.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, InvalidSpecError, UndefinedRegionError
from .fields import LabelField, Marginal, ProbField, gt_marginal, predicted_marginal

DEFAULT_EPS = 1e-12
DEFAULT_FOCAL_GAMMA = 2.0
DEFAULT_LAMBDAS = {
    "ours-l1": 1.0,
    "ours-kl": 0.1,
    "dicece": 0.1,
    "logdicece": 0.1,
    "dicebiasce": 0.1,
}


@dataclass(frozen=True)
class Smoothing:
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if not (0.0 < self.eps <= 1e-6):
            raise InvalidParameterError(f"eps must lie in (0, 1e-6], got {self.eps!r}")


_DEFAULT_SMOOTHING = Smoothing()


class LossKind(str, Enum):
    CE_REGION_WEIGHTED = "ce_region_weighted"
    CE_PIXEL_AVG = "ce_pixel_avg"
    FOCAL = "focal"
    LINEAR_DICE = "linear_dice"
    LOG_DICE = "log_dice"
    GDICE = "gdice"
    KL_MARGINAL = "kl_marginal"
    L1_MARGINAL = "l1_marginal"
    DICE_BIAS = "dice_bias"
    COMPOSITE = "composite"


# Terms that only see the prediction through its label marginal.
MARGINAL_KINDS = frozenset({LossKind.KL_MARGINAL, LossKind.L1_MARGINAL, LossKind.DICE_BIAS})
_SPEC_KEYS = {"kind", "gamma", "foreground_only", "terms", "name"}


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    gamma: float = DEFAULT_FOCAL_GAMMA
    foreground_only: bool | None = None
    terms: tuple[tuple["LossSpec", float], ...] = ()
    name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.COMPOSITE:
            if not self.terms:
                raise InvalidSpecError("composite loss needs at least one term")
            for term, weight in self.terms:
                if not isinstance(term, LossSpec):
                    raise InvalidSpecError(f"composite term must be a LossSpec, got {term!r}")
                if not (math.isfinite(weight) and weight >= 0.0):
                    raise InvalidSpecError(f"composite weight must be finite and >= 0, got {weight!r}")
            object.__setattr__(self, "terms", tuple((t, float(w)) for t, w in self.terms))
        elif self.terms:
            raise InvalidSpecError(f"{self.kind.value} takes no terms")
        if self.kind is LossKind.FOCAL and not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise InvalidParameterError(f"focal gamma must be >= 0, got {self.gamma!r}")

    def label(self) -> str:
        return self.name or self.kind.value

    def with_lambda(self, lam: float) -> "LossSpec":
        """Reweight every composite term after the first; leaf specs ignore lam."""
        if self.kind is not LossKind.COMPOSITE or len(self.terms) < 2:
            return self
        head, *rest = self.terms
        return dataclasses.replace(self, terms=(head, *((t, float(lam)) for t, _ in rest)))

    def leaves(self) -> Iterable[tuple["LossSpec", float]]:
        if self.kind is not LossKind.COMPOSITE:
            yield self, 1.0
            return
        for term, weight in self.terms:
            for leaf, inner in term.leaves():
                yield leaf, weight * inner

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"kind": self.kind.value}
        if self.name:
            data["name"] = self.name
        if self.kind is LossKind.FOCAL:
            data["gamma"] = self.gamma
        if self.foreground_only is not None:
            data["foreground_only"] = self.foreground_only
        if self.terms:
            data["terms"] = [{"weight": w, "loss": t.to_dict()} for t, w in self.terms]
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LossSpec":
        if not isinstance(data, dict):
            raise InvalidSpecError(f"loss spec must be an object, got {type(data).__name__}")
        unknown = set(data) - _SPEC_KEYS
        if unknown:
            raise InvalidSpecError(f"unknown loss spec keys: {sorted(unknown)}")
        try:
            kind = LossKind(data["kind"])
        except (KeyError, ValueError) as exc:
            raise InvalidSpecError(f"bad loss kind: {data.get('kind')!r}") from exc
        terms = []
        for entry in data.get("terms", []):
            if not isinstance(entry, dict) or set(entry) != {"weight", "loss"}:
                raise InvalidSpecError(f"composite term must be {{weight, loss}}, got {entry!r}")
            terms.append((cls.from_dict(entry["loss"]), float(entry["weight"])))
        return cls(
            kind=kind,
            gamma=float(data.get("gamma", DEFAULT_FOCAL_GAMMA)),
            foreground_only=data.get("foreground_only"),
            terms=tuple(terms),
            name=data.get("name"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LossSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"loss spec is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class LossReport:
    value: float
    terms: tuple[tuple[str, float, float], ...] = ()
    empty_classes: tuple[int, ...] = field(default=())

    @property
    def has_empty_regions(self) -> bool:
        return bool(self.empty_classes)


def check_pair(p: ProbField, g: LabelField) -> None:
    if p.num_classes != g.num_classes or p.num_pixels != g.num_pixels:
        raise InvalidInputError(
            f"prediction ({p.num_pixels}x{p.num_classes}) does not match labels ({g.num_pixels}x{g.num_classes})"
        )


def _true_class_probs(p: ProbField, g: LabelField) -> np.ndarray:
    return p.probs[np.arange(g.num_pixels), g.labels]


def region_sums(p: ProbField, g: LabelField) -> np.ndarray:
    """Per-class sum of p_ik over the ground-truth region of k."""
    return np.bincount(g.labels, weights=_true_class_probs(p, g), minlength=g.num_classes)


def resolve_foreground_only(flag: bool | None, num_classes: int) -> bool:
    return num_classes == 2 if flag is None else bool(flag)


def dice_classes(g: LabelField, foreground_only: bool | None, skip_empty: bool) -> list[int]:
    fg = resolve_foreground_only(foreground_only, g.num_classes)
    classes = [0] if fg else list(range(g.num_classes))
    sizes = g.region_sizes()
    kept = []
    for k in classes:
        if sizes[k] == 0:
            if skip_empty:
                continue
            raise UndefinedRegionError(k)
        kept.append(k)
    return kept


def ce_region_weighted(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    check_pair(p, g)
    logs = np.log(_true_class_probs(p, g) + smoothing.eps)
    per_class = np.bincount(g.labels, weights=logs, minlength=g.num_classes)
    sizes = g.region_sizes()
    present = sizes > 0
    return float(-np.sum(per_class[present] / sizes[present]))


def ce_pixel_avg(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    check_pair(p, g)
    return float(-np.mean(np.log(_true_class_probs(p, g) + smoothing.eps)))


def focal_loss(
    p: ProbField,
    g: LabelField,
    gamma: float = DEFAULT_FOCAL_GAMMA,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
) -> float:
    if not (math.isfinite(gamma) and gamma >= 0.0):
        raise InvalidParameterError(f"focal gamma must be >= 0, got {gamma!r}")
    check_pair(p, g)
    pt = _true_class_probs(p, g)
    return float(-np.mean((1.0 - pt) ** gamma * np.log(pt + smoothing.eps)))


def dice_coeff(p: ProbField, g: LabelField, k: int, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    check_pair(p, g)
    size = int(g.region_sizes()[k])
    if size == 0:
        raise UndefinedRegionError(k)
    inside = float(region_sums(p, g)[k])
    total = float(p.probs[:, k].sum())
    return 2.0 * inside / (total + size + smoothing.eps)


def _dice_vector(p: ProbField, g: LabelField, classes: list[int], smoothing: Smoothing) -> np.ndarray:
    inside = region_sums(p, g)[classes]
    total = p.probs[:, classes].sum(axis=0)
    sizes = g.region_sizes()[classes]
    return 2.0 * inside / (total + sizes + smoothing.eps)


def linear_dice_loss(
    p: ProbField,
    g: LabelField,
    foreground_only: bool | None = None,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
    skip_empty: bool = False,
) -> float:
    check_pair(p, g)
    classes = dice_classes(g, foreground_only, skip_empty)
    return float(np.sum(1.0 - _dice_vector(p, g, classes, smoothing)))


def log_dice_loss(
    p: ProbField,
    g: LabelField,
    foreground_only: bool | None = None,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
    skip_empty: bool = False,
) -> float:
    check_pair(p, g)
    classes = dice_classes(g, foreground_only, skip_empty)
    return float(-np.sum(np.log(_dice_vector(p, g, classes, smoothing) + smoothing.eps)))


def gdice_loss(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    """Generalized Dice with class weights 1/|region|^2; empty regions are skipped."""
    check_pair(p, g)
    sizes = g.region_sizes().astype(np.float64)
    present = sizes > 0
    weights = np.zeros_like(sizes)
    weights[present] = 1.0 / sizes[present] ** 2
    numer = np.sum(weights * region_sums(p, g))
    denom = np.sum(weights * (p.probs.sum(axis=0) + sizes))
    return float(1.0 - 2.0 * numer / (denom + smoothing.eps))


def kl_marginal(y: Marginal, p: Marginal, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    if len(y) != len(p):
        raise InvalidInputError("marginals differ in length")
    eps = smoothing.eps
    return float(np.sum(y.values * np.log((y.values + eps) / (p.values + eps))))


def l1_marginal(y: Marginal, p: Marginal) -> float:
    if len(y) != len(p):
        raise InvalidInputError("marginals differ in length")
    return float(np.sum(np.abs(y.values - p.values)))


def dice_bias(
    p: ProbField,
    g: LabelField,
    foreground_only: bool | None = None,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
) -> float:
    """Label-marginal bias of log-Dice written on the marginals: sum_k log(p_k + y_k)."""
    check_pair(p, g)
    y = gt_marginal(g).values
    pm = predicted_marginal(p).values
    classes = [0] if resolve_foreground_only(foreground_only, g.num_classes) else list(range(g.num_classes))
    return float(np.sum(np.log(pm[classes] + y[classes] + smoothing.eps)))


def leaf_loss(
    spec: LossSpec,
    p: ProbField,
    g: LabelField,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
    skip_empty: bool = True,
) -> float:
    kind = spec.kind
    if kind is LossKind.CE_REGION_WEIGHTED:
        return ce_region_weighted(p, g, smoothing)
    if kind is LossKind.CE_PIXEL_AVG:
        return ce_pixel_avg(p, g, smoothing)
    if kind is LossKind.FOCAL:
        return focal_loss(p, g, spec.gamma, smoothing)
    if kind is LossKind.LINEAR_DICE:
        return linear_dice_loss(p, g, spec.foreground_only, smoothing, skip_empty)
    if kind is LossKind.LOG_DICE:
        return log_dice_loss(p, g, spec.foreground_only, smoothing, skip_empty)
    if kind is LossKind.GDICE:
        return gdice_loss(p, g, smoothing)
    if kind is LossKind.KL_MARGINAL:
        check_pair(p, g)
        return kl_marginal(gt_marginal(g), predicted_marginal(p), smoothing)
    if kind is LossKind.L1_MARGINAL:
        check_pair(p, g)
        return l1_marginal(gt_marginal(g), predicted_marginal(p))
    if kind is LossKind.DICE_BIAS:
        return dice_bias(p, g, spec.foreground_only, smoothing)
    raise InvalidSpecError(f"{kind.value} is not a leaf loss")


def composite_loss(
    spec: LossSpec,
    p: ProbField,
    g: LabelField,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
    p_marginal: ProbField | None = None,
) -> LossReport:
    """Evaluate any LossSpec; p_marginal (if given) feeds the marginal-only terms."""
    check_pair(p, g)
    if p_marginal is not None:
        check_pair(p_marginal, g)
    total = 0.0
    rows = []
    for leaf, weight in spec.leaves():
        source = p_marginal if (p_marginal is not None and leaf.kind in MARGINAL_KINDS) else p
        value = leaf_loss(leaf, source, g, smoothing, skip_empty=True)
        rows.append((leaf.label(), weight, value))
        if weight != 0.0:
            total += weight * value
    return LossReport(value=total, terms=tuple(rows), empty_classes=g.empty_classes())


_LEAF_PRESETS = {
    "ce": LossKind.CE_PIXEL_AVG,
    "ce-rw": LossKind.CE_REGION_WEIGHTED,
    "focal": LossKind.FOCAL,
    "dice": LossKind.LINEAR_DICE,
    "logdice": LossKind.LOG_DICE,
    "gdice": LossKind.GDICE,
    "kl": LossKind.KL_MARGINAL,
    "l1": LossKind.L1_MARGINAL,
    "dice-bias": LossKind.DICE_BIAS,
}
_COMPOSITE_PRESETS = {
    "dicece": LossKind.LINEAR_DICE,
    "logdicece": LossKind.LOG_DICE,
    "dicebiasce": LossKind.DICE_BIAS,
    "ours-l1": LossKind.L1_MARGINAL,
    "ours-kl": LossKind.KL_MARGINAL,
}
PRESET_NAMES = tuple(_LEAF_PRESETS) + tuple(_COMPOSITE_PRESETS)


def build_loss(name: str, lam: float | None = None) -> LossSpec:
    """Named loss; composites are CE + lam * R, lam defaulting to DEFAULT_LAMBDAS."""
    if name in _LEAF_PRESETS:
        return LossSpec(_LEAF_PRESETS[name], name=name)
    if name not in _COMPOSITE_PRESETS:
        raise InvalidSpecError(f"unknown loss {name!r}; choose from {', '.join(PRESET_NAMES)}")
    weight = DEFAULT_LAMBDAS[name] if lam is None else float(lam)
    ce = LossSpec(LossKind.CE_PIXEL_AVG, name="ce")
    reg = LossSpec(_COMPOSITE_PRESETS[name])
    return LossSpec(LossKind.COMPOSITE, terms=((ce, 1.0), (reg, weight)), name=name)


def is_parametric(name: str) -> bool:
    return name in _COMPOSITE_PRESETS
