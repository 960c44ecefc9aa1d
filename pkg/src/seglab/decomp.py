"""Exact matching/bias decompositions of the CE and Dice losses.

Additive constants are returned explicitly so every identity can be checked to
machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import DegenerateMarginalError, InvalidInputError, UndefinedRegionError
from .fields import LabelField, ProbField, gt_marginal, predicted_marginal
from .losses import Smoothing, check_pair, kl_marginal, region_sums

_DEFAULT_SMOOTHING = Smoothing()


@dataclass(frozen=True)
class Decomposition:
    name: str
    matching_term: float
    bias_term: float
    additive_constant: float
    marginal_bias: float | None = None

    @property
    def total_reconstructed(self) -> float:
        return self.matching_term + self.bias_term + self.additive_constant

    def to_record(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "name": self.name,
            "matching_term": self.matching_term,
            "bias_term": self.bias_term,
            "additive_constant": self.additive_constant,
            "total_reconstructed": self.total_reconstructed,
        }
        if self.marginal_bias is not None:
            record["marginal_bias"] = self.marginal_bias
        return record


def _require_regions(g: LabelField) -> np.ndarray:
    sizes = g.region_sizes()
    empty = g.empty_classes()
    if empty:
        raise UndefinedRegionError(empty[0])
    return sizes.astype(np.float64)


def _require_binary(g: LabelField) -> None:
    if g.num_classes != 2:
        raise InvalidInputError(f"binary decomposition needs K=2, got K={g.num_classes}")


def decompose_log_dice(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> Decomposition:
    """-sum_k log Dice_k = DF + DB + sum_k log(1 / (2 y_k))."""
    check_pair(p, g)
    sizes = _require_regions(g)
    inside = region_sums(p, g)
    y = gt_marginal(g).values
    pm = predicted_marginal(p).values
    matching = float(-np.sum(np.log(inside / sizes + smoothing.eps)))
    bias = float(np.sum(np.log(pm + y)))
    constant = float(np.sum(np.log(1.0 / (2.0 * y))))
    return Decomposition("log_dice", matching, bias, constant)


def decompose_binary_dice(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> Decomposition:
    """Foreground-only form: -log Dice_0 = DF_0 + DB_0 - log 2 - log |region 0|.

    ``marginal_bias`` holds DB_0 - log |pixels|, which equals log(p_0 + y_0).
    """
    _require_binary(g)
    check_pair(p, g)
    size = float(g.region_sizes()[0])
    if size == 0:
        raise UndefinedRegionError(0)
    inside = float(region_sums(p, g)[0])
    total = float(p.probs[:, 0].sum())
    matching = -math.log(inside / size + smoothing.eps)
    bias = math.log(total + size)
    constant = -math.log(2.0) - math.log(size)
    return Decomposition("binary_dice", matching, bias, constant, marginal_bias=bias - math.log(g.num_pixels))


def split_binary_ce(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> tuple[float, float]:
    _require_binary(g)
    check_pair(p, g)
    sizes = _require_regions(g)
    fg = g.region_mask(0)
    ce_fg = -float(np.sum(np.log(p.probs[fg, 0] + smoothing.eps))) / sizes[0]
    ce_bg = -float(np.sum(np.log(p.probs[~fg, 1] + smoothing.eps))) / sizes[1]
    return ce_fg, ce_bg


def mc_conditional_entropy(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    """Monte-Carlo estimate of H(F|K) after the Bayes substitution P(f_i | k) = p_ik / p_k."""
    check_pair(p, g)
    _require_regions(g)
    pm = predicted_marginal(p).values
    zero = np.flatnonzero(pm <= 0.0)
    if zero.size:
        raise DegenerateMarginalError(f"predicted marginal of class {int(zero[0])} is zero")
    eps = smoothing.eps
    pt = p.probs[np.arange(g.num_pixels), g.labels]
    ratios = np.log(pt + eps) - np.log(pm[g.labels] + eps)
    return float(-np.mean(ratios))


def gt_entropy(g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> float:
    y = gt_marginal(g).values
    return float(-np.sum(y * np.log(y + smoothing.eps)))


def decompose_ce(p: ProbField, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> Decomposition:
    """Pixel-averaged CE = H(F|K) + KL(y || p) + H(y)."""
    matching = mc_conditional_entropy(p, g, smoothing)
    bias = kl_marginal(gt_marginal(g), predicted_marginal(p), smoothing)
    return Decomposition("ce", matching, bias, gt_entropy(g, smoothing))
