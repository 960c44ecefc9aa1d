"""Closed-form gradients of every LossSpec with respect to the logits.

dL/dp is derived per loss kind and pushed through the temperature softmax:
dL/dz_ik = tau * p_ik * (G_ik - sum_j p_ij G_ij).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, InvalidSpecError
from .fields import DEFAULT_TAU, LabelField, LogitField, ProbField, gt_marginal, temperature_softmax
from .losses import (
    MARGINAL_KINDS,
    DEFAULT_LAMBDAS,
    LossKind,
    LossSpec,
    Smoothing,
    build_loss,
    composite_loss,
    dice_classes,
    resolve_foreground_only,
)
from .theory import stream_seed

DEFAULT_FD_STEP = 1e-5
GRADCHECK_TOL = 1e-4
KINK_MARGIN = 1e-3
KINK_SHIFT = 1e-3
KINK_MAX_STEPS = 100_000
_DEFAULT_SMOOTHING = Smoothing()


@dataclass(frozen=True)
class GradField:
    height: int
    width: int
    num_classes: int
    values: np.ndarray

    @classmethod
    def like(cls, z: LogitField, values: np.ndarray) -> "GradField":
        return cls(z.height, z.width, z.num_classes, values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def prob_gradient(leaf: LossSpec, probs: np.ndarray, g: LabelField, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> np.ndarray:
    """dL/dp for a leaf loss, shape (pixels, K)."""
    eps = smoothing.eps
    n_pix, k = probs.shape
    mask = g.one_hot()
    sizes = g.region_sizes().astype(np.float64)
    kind = leaf.kind
    out = np.zeros_like(probs)

    if kind is LossKind.CE_REGION_WEIGHTED:
        inv = np.divide(1.0, sizes, out=np.zeros(k), where=sizes > 0)
        return -mask * inv / (probs + eps)
    if kind is LossKind.CE_PIXEL_AVG:
        return -mask / (n_pix * (probs + eps))
    if kind is LossKind.FOCAL:
        rows = np.arange(n_pix)
        pt = probs[rows, g.labels]
        rest = 1.0 - pt
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(rest > 0.0, leaf.gamma * rest ** (leaf.gamma - 1.0), 0.0)
        d_pt = -(-slope * np.log(pt + eps) + rest**leaf.gamma / (pt + eps)) / n_pix
        out[rows, g.labels] = d_pt
        return out
    if kind in (LossKind.LINEAR_DICE, LossKind.LOG_DICE):
        classes = dice_classes(g, leaf.foreground_only, skip_empty=True)
        inside = (probs * mask).sum(axis=0)
        total = probs.sum(axis=0)
        for c in classes:
            denom = total[c] + sizes[c] + eps
            dice = 2.0 * inside[c] / denom
            d_dice = 2.0 * mask[:, c] / denom - 2.0 * inside[c] / denom**2
            out[:, c] = -d_dice if kind is LossKind.LINEAR_DICE else -d_dice / (dice + eps)
        return out
    if kind is LossKind.GDICE:
        weights = np.divide(1.0, sizes**2, out=np.zeros(k), where=sizes > 0)
        numer = np.sum(weights * (probs * mask).sum(axis=0))
        denom = np.sum(weights * (probs.sum(axis=0) + sizes)) + eps
        return -2.0 * (weights * mask / denom - numer * weights / denom**2)

    y = gt_marginal(g).values
    pm = probs.mean(axis=0)
    if kind is LossKind.KL_MARGINAL:
        d_marg = -y / (pm + eps)
    elif kind is LossKind.L1_MARGINAL:
        d_marg = np.sign(pm - y)
    elif kind is LossKind.DICE_BIAS:
        d_marg = 1.0 / (pm + y + eps)
        if resolve_foreground_only(leaf.foreground_only, k):
            d_marg[1:] = 0.0
    else:
        raise InvalidSpecError(f"{kind.value} is not a leaf loss")
    return np.broadcast_to(d_marg / n_pix, probs.shape).copy()


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray, tau: float) -> np.ndarray:
    inner = np.sum(probs * d_probs, axis=1, keepdims=True)
    return tau * probs * (d_probs - inner)


def marginal_gradient(kind: LossKind, y: np.ndarray, p: np.ndarray, smoothing: Smoothing = _DEFAULT_SMOOTHING) -> np.ndarray:
    """dR/dp for a marginal regularizer, taken directly in marginal space."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if kind is LossKind.KL_MARGINAL:
        return -y / (p + smoothing.eps)
    if kind is LossKind.L1_MARGINAL:
        return np.sign(p - y)
    if kind is LossKind.DICE_BIAS:
        return 1.0 / (p + y + smoothing.eps)
    raise InvalidSpecError(f"{kind.value} is not a marginal regularizer")


def _probs(z: LogitField, tau: float, marginal_tau: float | None) -> tuple[ProbField, ProbField | None]:
    p = temperature_softmax(z, tau)
    pm = temperature_softmax(z, marginal_tau) if marginal_tau is not None else None
    return p, pm


def loss_value(
    spec: LossSpec,
    z: LogitField,
    g: LabelField,
    tau: float = DEFAULT_TAU,
    marginal_tau: float | None = None,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
) -> float:
    p, pm = _probs(z, tau, marginal_tau)
    return composite_loss(spec, p, g, smoothing, p_marginal=pm).value


def loss_gradient(
    spec: LossSpec,
    z: LogitField,
    g: LabelField,
    tau: float = DEFAULT_TAU,
    marginal_tau: float | None = None,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
) -> tuple[float, GradField]:
    """Loss value and its analytic gradient; zero-weight composite terms contribute nothing."""
    p, pm = _probs(z, tau, marginal_tau)
    value = composite_loss(spec, p, g, smoothing, p_marginal=pm).value
    grad = np.zeros_like(z.logits)
    for leaf, weight in spec.leaves():
        if weight == 0.0:
            continue
        if pm is not None and leaf.kind in MARGINAL_KINDS:
            source, t = pm, marginal_tau
        else:
            source, t = p, tau
        d_probs = prob_gradient(leaf, source.probs, g, smoothing)
        grad += weight * softmax_backward(source.probs, d_probs, t)
    return value, GradField.like(z, grad)


def central_differences(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    if not h > 0:
        raise InvalidParameterError(f"finite-difference step must be > 0, got {h!r}")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        base = x[idx]
        x[idx] = base + h
        upper = fn(x)
        x[idx] = base - h
        lower = fn(x)
        x[idx] = base
        out[idx] = (upper - lower) / (2.0 * h)
    return out


def finite_diff_gradient(
    spec: LossSpec,
    z: LogitField,
    g: LabelField,
    tau: float = DEFAULT_TAU,
    h: float = DEFAULT_FD_STEP,
    marginal_tau: float | None = None,
    smoothing: Smoothing = _DEFAULT_SMOOTHING,
) -> GradField:
    def fn(values: np.ndarray) -> float:
        return loss_value(spec, LogitField.like(g, values), g, tau, marginal_tau, smoothing)

    return GradField.like(z, central_differences(fn, z.logits, h))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = float(np.max(np.abs(analytic)))
    f = float(np.max(np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric))) / max(1e-8, a, f)


def nudge_off_kinks(
    z: np.ndarray,
    g: LabelField,
    tau: float,
    margin: float = KINK_MARGIN,
    max_steps: int = KINK_MAX_STEPS,
) -> np.ndarray:
    """Shift class-0 logits until every |p_k - y_k| >= margin."""
    y = gt_marginal(g).values
    z = np.array(z, dtype=np.float64)
    for _ in range(max_steps):
        pm = temperature_softmax(LogitField.like(g, z), tau).probs.mean(axis=0)
        if np.min(np.abs(pm - y)) >= margin:
            return z
        z[:, 0] += KINK_SHIFT
    raise InvalidInputError(f"no shift within {max_steps} steps puts the marginal {margin} away from its kinks")


@dataclass(frozen=True)
class GradcheckRow:
    spec_id: str
    instance_seed: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= GRADCHECK_TOL


def _has_kink(spec: LossSpec) -> bool:
    return any(leaf.kind is LossKind.L1_MARGINAL and w != 0.0 for leaf, w in spec.leaves())


def gradcheck_instance(instance_seed: int, tau: float = DEFAULT_TAU, max_pixels: int = 64) -> tuple[LogitField, LabelField]:
    rng = np.random.Generator(np.random.PCG64(instance_seed))
    k = int(rng.integers(2, 4))
    n = int(rng.integers(2 * k, max_pixels + 1))
    labels = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)]))
    g = LabelField(1, n, k, labels)
    z = rng.normal(scale=1.0 / tau, size=(n, k))
    return LogitField.like(g, z), g


def gradcheck(
    spec: LossSpec,
    seed: int = 0,
    num_instances: int = 10,
    tau: float = DEFAULT_TAU,
    h: float = DEFAULT_FD_STEP,
) -> list[GradcheckRow]:
    """Analytic vs central-difference gradients on random instances (K in {2, 3}, at most 64 pixels)."""
    rows = []
    for i in range(num_instances):
        instance_seed = stream_seed(seed, f"gradcheck:{spec.label()}:{i}")
        z, g = gradcheck_instance(instance_seed, tau)
        if _has_kink(spec):
            z = LogitField.like(g, nudge_off_kinks(z.logits, g, tau))
        _, analytic = loss_gradient(spec, z, g, tau)
        numeric = finite_diff_gradient(spec, z, g, tau, h)
        rows.append(GradcheckRow(spec.label(), instance_seed, relative_error(analytic.values, numeric.values)))
    return rows


def gradcheck_specs() -> list[LossSpec]:
    """Every leaf kind (with foreground-only variants) plus the composites at their default weights."""
    specs = [
        LossSpec(LossKind.CE_REGION_WEIGHTED, name="ce-rw"),
        LossSpec(LossKind.CE_PIXEL_AVG, name="ce"),
        LossSpec(LossKind.FOCAL, name="focal"),
        LossSpec(LossKind.LINEAR_DICE, foreground_only=False, name="dice"),
        LossSpec(LossKind.LINEAR_DICE, foreground_only=True, name="dice-fg"),
        LossSpec(LossKind.LOG_DICE, foreground_only=False, name="logdice"),
        LossSpec(LossKind.LOG_DICE, foreground_only=True, name="logdice-fg"),
        LossSpec(LossKind.GDICE, name="gdice"),
        LossSpec(LossKind.KL_MARGINAL, name="kl"),
        LossSpec(LossKind.L1_MARGINAL, name="l1"),
        LossSpec(LossKind.DICE_BIAS, foreground_only=False, name="dice-bias"),
        LossSpec(LossKind.DICE_BIAS, foreground_only=True, name="dice-bias-fg"),
    ]
    specs.extend(build_loss(name, DEFAULT_LAMBDAS[name]) for name in DEFAULT_LAMBDAS)
    return specs


def gradcheck_suite(
    seed: int = 0,
    num_instances: int = 10,
    tau: float = DEFAULT_TAU,
    h: float = DEFAULT_FD_STEP,
) -> list[GradcheckRow]:
    rows: list[GradcheckRow] = []
    for spec in gradcheck_specs():
        rows.extend(gradcheck(spec, seed, num_instances, tau, h))
    return rows
