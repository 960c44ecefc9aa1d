"""Numerical certificates for the Dice/CE bias results and the bias-curve data.

Every check derives its own PRNG stream from (seed, check id), so the outcome
does not depend on the order in which checks run.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .debuglog import log_event
from .decomp import decompose_binary_dice, decompose_ce, decompose_log_dice, split_binary_ce
from .errors import InvalidParameterError
from .fields import LabelField, Marginal, ProbField, gt_marginal, predicted_marginal, softmax_rows
from .losses import DEFAULT_EPS, ce_pixel_avg, ce_region_weighted, linear_dice_loss, log_dice_loss

MASK64 = (1 << 64) - 1
IDENTITY_TOL = 1e-9
EXACT_TOL = 1e-12
STRESS_TOL = 1e-7
LATTICE_MAX_K = 4
DEFAULT_GRID_STEP = 1.0 / 200
DEFAULT_CURVE_POINTS = 99


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def stream_seed(seed: int, stream_id: str) -> int:
    _, out = splitmix64((int(seed) ^ stable_hash64(stream_id)) & MASK64)
    return out


def make_rng(seed: int, stream_id: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, stream_id)))


def random_marginal(rng: np.random.Generator, k: int) -> Marginal:
    values = rng.dirichlet(np.ones(k))
    return Marginal(values / values.sum())


def random_instance(
    rng: np.random.Generator,
    k: int,
    n: int,
    binary: bool = False,
    scale: float = 2.0,
) -> tuple[ProbField, LabelField]:
    """Random soft prediction and labels on a 1 x n strip with every class present."""
    if binary:
        k = 2
    if n < k:
        raise InvalidParameterError(f"need at least {k} pixels for {k} classes, got {n}")
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    labels = rng.permutation(labels)
    g = LabelField(1, n, k, labels)
    probs = softmax_rows(rng.normal(scale=scale, size=(n, k)), 1.0)
    return ProbField.like(g, probs / probs.sum(axis=1, keepdims=True)), g


def constant_region_instance(rng: np.random.Generator, k: int, n: int) -> tuple[ProbField, LabelField]:
    """Prediction whose rows are constant within each ground-truth region."""
    _, g = random_instance(rng, k, n)
    rows = softmax_rows(rng.normal(scale=2.0, size=(k, k)), 1.0)
    rows = rows / rows.sum(axis=1, keepdims=True)
    return ProbField.like(g, rows[g.labels]), g


def db_bias(points: np.ndarray, y: np.ndarray) -> np.ndarray:
    """g(p) = sum_k log(p_k + y_k), evaluated along the last axis."""
    return np.sum(np.log(points + y + DEFAULT_EPS), axis=-1)


def simplex_lattice(k: int, steps: int) -> np.ndarray:
    """All points of the k-simplex whose coordinates are multiples of 1/steps."""
    if k < 1 or steps < 1:
        raise InvalidParameterError(f"bad lattice k={k} steps={steps}")
    rows = np.zeros((1, 0), dtype=np.int64)
    remaining = np.array([steps], dtype=np.int64)
    for _ in range(k - 1):
        counts = remaining + 1
        idx = np.repeat(np.arange(rows.shape[0]), counts)
        starts = np.cumsum(counts) - counts
        offsets = np.arange(idx.size) - np.repeat(starts, counts)
        rows = np.column_stack([rows[idx], offsets])
        remaining = remaining[idx] - offsets
    rows = np.column_stack([rows, remaining])
    return rows / steps


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def _fmt_vec(values: Sequence[float]) -> str:
    return ";".join(_fmt(v) for v in values)


@dataclass(frozen=True)
class CheckReport:
    check_id: str
    parameters: str
    max_violation: float
    passed: bool
    details: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VertexMinReport:
    y: Marginal
    tied_vertices: tuple[int, ...]
    grid_step: float
    argmin_on_grid: Marginal
    min_value: float
    g_at_t: float
    violations: int
    argmin_near_vertex: bool
    check_id: str = "vertex-min"

    @property
    def vertex_t(self) -> Marginal:
        values = np.zeros(len(self.y))
        values[self.tied_vertices[0]] = 1.0
        return Marginal(values)

    @property
    def parameters(self) -> str:
        return f"y={_fmt_vec(self.y.values)} step={_fmt(self.grid_step)}"

    @property
    def max_violation(self) -> float:
        return max(0.0, self.g_at_t - self.min_value)

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.argmin_near_vertex


def _vertex_values(y: np.ndarray) -> np.ndarray:
    return db_bias(np.eye(y.shape[0]), y)


def check_vertex_minimum(y: Marginal, grid_step: float = DEFAULT_GRID_STEP) -> VertexMinReport:
    """Brute-force the lattice of the simplex: g never drops below its value at vertex t."""
    k = len(y)
    if k > LATTICE_MAX_K:
        raise InvalidParameterError(f"lattice check refuses K={k} > {LATTICE_MAX_K}; use check_vertex_minimum_sampled")
    if not (0.0 < grid_step <= 1.0):
        raise InvalidParameterError(f"grid_step must lie in (0, 1], got {grid_step!r}")
    steps = int(round(1.0 / grid_step))
    if abs(steps * grid_step - 1.0) > 1e-9:
        raise InvalidParameterError(f"grid_step {grid_step!r} does not divide 1")
    tied = y.argmax_set()
    g_t = float(np.min(_vertex_values(y.values)[list(tied)]))
    points = simplex_lattice(k, steps)
    values = db_bias(points, y.values)
    best = int(np.argmin(values))
    vertices = np.eye(k)[list(tied)]
    distance = np.min(np.max(np.abs(vertices - points[best]), axis=1))
    return VertexMinReport(
        y=y,
        tied_vertices=tied,
        grid_step=grid_step,
        argmin_on_grid=Marginal(points[best]),
        min_value=float(values[best]),
        g_at_t=g_t,
        violations=int(np.count_nonzero(values < g_t - EXACT_TOL)),
        argmin_near_vertex=bool(distance <= grid_step + EXACT_TOL),
    )


def check_vertex_minimum_random(num_marginals: int = 20, k: int = 3, grid_step: float = DEFAULT_GRID_STEP, seed: int = 0) -> CheckReport:
    rng = make_rng(seed, "vertex-min-random")
    worst = 0.0
    failures = 0
    for _ in range(num_marginals):
        report = check_vertex_minimum(random_marginal(rng, k), grid_step)
        worst = max(worst, report.max_violation)
        failures += 0 if report.passed else 1
    return CheckReport(
        "vertex-min-random",
        f"n={num_marginals} k={k} step={_fmt(grid_step)} seed={seed}",
        worst,
        failures == 0,
        {"failures": failures},
    )


def check_vertex_minimum_sampled(y: Marginal, num_samples: int = 1_000_000, seed: int = 0, chunk: int = 100_000) -> CheckReport:
    """Dirichlet-sampled version for K beyond the lattice limit; a weaker certificate."""
    rng = make_rng(seed, "vertex-min-sampled")
    g_t = float(np.min(_vertex_values(y.values)[list(y.argmax_set())]))
    worst = 0.0
    violations = 0
    remaining = num_samples
    while remaining > 0:
        size = min(chunk, remaining)
        values = db_bias(rng.dirichlet(np.ones(len(y)), size=size), y.values)
        violations += int(np.count_nonzero(values < g_t - EXACT_TOL))
        worst = max(worst, g_t - float(values.min()))
        remaining -= size
    return CheckReport(
        "vertex-min-sampled",
        f"y={_fmt_vec(y.values)} samples={num_samples} seed={seed}",
        max(0.0, worst),
        violations == 0,
        {"violations": violations},
    )


def check_db_concavity(y: Marginal, num_samples: int = 1000, seed: int = 0) -> CheckReport:
    """Jensen interpolation g(a p + (1-a) q) >= a g(p) + (1-a) g(q) on random triples."""
    rng = make_rng(seed, "concavity")
    k = len(y)
    p = rng.dirichlet(np.ones(k), size=num_samples)
    q = rng.dirichlet(np.ones(k), size=num_samples)
    alpha = rng.uniform(0.0, 1.0, size=(num_samples, 1))
    lhs = db_bias(alpha * p + (1.0 - alpha) * q, y.values)
    rhs = alpha[:, 0] * db_bias(p, y.values) + (1.0 - alpha[:, 0]) * db_bias(q, y.values)
    gap = rhs - lhs
    violations = int(np.count_nonzero(gap > EXACT_TOL))
    return CheckReport(
        "concavity",
        f"y={_fmt_vec(y.values)} samples={num_samples} seed={seed}",
        max(0.0, float(gap.max())),
        violations == 0,
        {"violations": violations},
    )


def vertex_ordering_gap(y: Marginal) -> tuple[float, float]:
    """(most negative g(e_k) - g(t), worst mismatch against ln(1+1/y_k) - ln(1+1/y_t))."""
    values = _vertex_values(y.values)
    j = y.argmax_set()[0]
    diffs = values - values[j]
    ratio = np.log(1.0 + y.values + DEFAULT_EPS) - np.log(y.values + DEFAULT_EPS)
    closed = ratio - ratio[j]
    return float(diffs.min()), float(np.max(np.abs(diffs - closed)))


def check_vertex_ordering(num_marginals: int = 20, k: int = 3, seed: int = 0) -> CheckReport:
    rng = make_rng(seed, "vertex-order")
    worst = 0.0
    for _ in range(num_marginals):
        lowest, mismatch = vertex_ordering_gap(random_marginal(rng, k))
        worst = max(worst, -lowest, mismatch)
    return CheckReport(
        "vertex-order",
        f"n={num_marginals} k={k} seed={seed}",
        max(0.0, worst),
        worst <= IDENTITY_TOL,
    )


def check_bounds(num_instances: int = 1000, seed: int = 0, max_pixels: int = 256) -> CheckReport:
    """DF <= region-weighted CE, DF_0 <= CE_0 and log-Dice >= linear Dice, plus the Jensen equality case."""
    rng = make_rng(seed, "bounds")
    worst = 0.0
    violations = 0
    for _ in range(num_instances):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(k, max_pixels + 1))
        p, g = random_instance(rng, k, n)
        gaps = [
            decompose_log_dice(p, g).matching_term - ce_region_weighted(p, g),
            linear_dice_loss(p, g, foreground_only=False) - log_dice_loss(p, g, foreground_only=False),
        ]
        pb, gb = random_instance(rng, 2, n, binary=True)
        gaps.append(decompose_binary_dice(pb, gb).matching_term - split_binary_ce(pb, gb)[0])
        top = max(gaps)
        worst = max(worst, top)
        violations += 1 if top > IDENTITY_TOL else 0
    equality = 0.0
    for _ in range(10):
        k = int(rng.integers(2, 6))
        p, g = constant_region_instance(rng, k, int(rng.integers(k, max_pixels + 1)))
        equality = max(equality, abs(decompose_log_dice(p, g).matching_term - ce_region_weighted(p, g)))
    return CheckReport(
        "bounds",
        f"n={num_instances} maxpix={max_pixels} seed={seed}",
        max(0.0, worst, equality),
        violations == 0 and equality <= EXACT_TOL,
        {"violations": violations, "jensen_equality_gap": equality},
    )


def stress_instance() -> tuple[ProbField, LabelField]:
    """K=3 prediction whose last channel sits at about eps on every pixel."""
    n = 64
    labels = np.array([0] * 40 + [1] * 20 + [2] * 4)
    g = LabelField(8, 8, 3, labels)
    probs = np.empty((n, 3))
    probs[:, 2] = DEFAULT_EPS
    probs[:, 0] = np.where(labels == 0, 0.8, 0.3)
    probs[:, 1] = 1.0 - DEFAULT_EPS - probs[:, 0]
    return ProbField.like(g, probs), g


def ce_identity_residual(p: ProbField, g: LabelField) -> float:
    return abs(ce_pixel_avg(p, g) - decompose_ce(p, g).total_reconstructed)


def check_ce_identity(num_instances: int = 100, seed: int = 0, max_pixels: int = 256) -> CheckReport:
    rng = make_rng(seed, "ce-identity")
    worst = 0.0
    for _ in range(num_instances):
        k = int(rng.integers(2, 6))
        p, g = random_instance(rng, k, int(rng.integers(k, max_pixels + 1)))
        worst = max(worst, ce_identity_residual(p, g))
    _, g = random_instance(rng, 3, 32)
    uniform = ProbField.like(g, np.full((g.num_pixels, 3), 1.0 / 3.0))
    worst = max(worst, ce_identity_residual(uniform, g))
    stress = ce_identity_residual(*stress_instance())
    return CheckReport(
        "ce-identity",
        f"n={num_instances} maxpix={max_pixels} seed={seed}",
        max(worst, stress),
        worst <= IDENTITY_TOL and stress <= STRESS_TOL,
        {"stress_residual": stress},
    )


def check_decompositions(
    num_instances: int = 100,
    seed: int = 0,
    perturb_constant: float = 0.0,
    max_pixels: int = 256,
) -> list[CheckReport]:
    """Reconstruction of log-Dice (multi-class and foreground-only), the marginal form and the CE split.

    ``perturb_constant`` is added to the multi-class additive constant; any nonzero value
    must make that row fail.
    """
    rng = make_rng(seed, "decomp")
    multi = binary = marginal = split = 0.0
    for _ in range(num_instances):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(k, max_pixels + 1))
        p, g = random_instance(rng, k, n)
        dec = decompose_log_dice(p, g)
        rebuilt = dec.total_reconstructed + perturb_constant
        multi = max(multi, abs(log_dice_loss(p, g, foreground_only=False) - rebuilt))

        pb, gb = random_instance(rng, 2, n, binary=True)
        bdec = decompose_binary_dice(pb, gb)
        binary = max(binary, abs(log_dice_loss(pb, gb, foreground_only=True) - bdec.total_reconstructed))
        target = math.log(predicted_marginal(pb)[0] + gt_marginal(gb)[0])
        marginal = max(marginal, abs(bdec.marginal_bias - target))
        ce_fg, ce_bg = split_binary_ce(pb, gb)
        split = max(split, abs(ce_fg + ce_bg - ce_region_weighted(pb, gb)))
    params = f"n={num_instances} maxpix={max_pixels} seed={seed}"
    if perturb_constant:
        params += f" perturb={_fmt(perturb_constant)}"
    return [
        CheckReport("decomp-log-dice", params, multi, multi <= IDENTITY_TOL),
        CheckReport("decomp-binary-dice", params, binary, binary <= IDENTITY_TOL),
        CheckReport("decomp-marginal-form", params, marginal, marginal <= EXACT_TOL),
        CheckReport("decomp-binary-ce", params, split, split <= EXACT_TOL),
    ]


def check_scale_invariance(labels: LabelField, factors: Sequence[int] = (2, 3), grid_step: float = 1.0 / 20) -> CheckReport:
    """Replicating every pixel m times leaves y, g and the minimizing vertex unchanged."""
    y = gt_marginal(labels)
    points = simplex_lattice(labels.num_classes, int(round(1.0 / grid_step)))
    base = db_bias(points, y.values)
    worst = 0.0
    same_vertex = True
    for m in factors:
        scaled = gt_marginal(labels.replicate(m))
        worst = max(worst, float(np.max(np.abs(scaled.values - y.values))))
        worst = max(worst, float(np.max(np.abs(db_bias(points, scaled.values) - base))))
        same_vertex = same_vertex and scaled.argmax_set() == y.argmax_set()
    return CheckReport(
        "scale-invariance",
        f"y={_fmt_vec(y.values)} factors={','.join(str(m) for m in factors)}",
        worst,
        same_vertex and worst <= EXACT_TOL,
    )


@dataclass(frozen=True)
class CurveTable:
    y1: float
    p1: np.ndarray
    db1: np.ndarray
    kl: np.ndarray
    l1: np.ndarray

    def __len__(self) -> int:
        return int(self.p1.shape[0])

    def rows(self) -> Iterator[tuple[float, float, float, float]]:
        for row in zip(self.p1, self.db1, self.kl, self.l1):
            yield tuple(float(v) for v in row)


def bias_curves(y1: float, num_points: int = DEFAULT_CURVE_POINTS) -> CurveTable:
    """Binary label-marginal biases of log-Dice, KL and L1 as functions of the predicted foreground share."""
    if not (math.isfinite(y1) and 0.0 < y1 < 1.0):
        raise InvalidParameterError(f"y1 must lie in (0, 1), got {y1!r}")
    if num_points < 1:
        raise InvalidParameterError(f"need at least one curve point, got {num_points}")
    p1 = np.arange(1, num_points + 1) / (num_points + 1)
    db1 = np.log(p1 + y1)
    kl = y1 * np.log(y1 / p1) + (1.0 - y1) * np.log((1.0 - y1) / (1.0 - p1))
    l1 = 2.0 * np.abs(p1 - y1)
    return CurveTable(y1, p1, db1, kl, l1)


def check_curves(y1: float = 0.1, num_points: int = DEFAULT_CURVE_POINTS) -> CheckReport:
    table = bias_curves(y1, num_points)
    worst = max(0.0, -float(table.kl.min()), -float(np.min(np.diff(table.db1))))
    ok = bool(np.all(np.diff(table.db1) > 0)) and table.kl.min() >= -EXACT_TOL
    return CheckReport("curves", f"y1={_fmt(y1)} points={num_points}", worst, ok)


def _scale_labels() -> LabelField:
    return LabelField(10, 10, 3, np.repeat([0, 1, 2], [70, 20, 10]))


def verification_suite(seed: int = 0, perturb_constant: float = 0.0, threads: int = 0) -> list[CheckReport | VertexMinReport]:
    """Run every certificate; the result order is fixed regardless of threads."""
    y_ref = Marginal(np.array([0.7, 0.2, 0.1]))
    jobs: list[Callable[[], Any]] = [
        lambda: check_vertex_minimum(y_ref),
        lambda: _as_tie_report(check_vertex_minimum(Marginal(np.array([0.5, 0.5]))), "vertex-min-tie"),
        lambda: check_vertex_minimum_random(20, 3, DEFAULT_GRID_STEP, seed),
        lambda: check_vertex_minimum_sampled(Marginal(np.array([0.4, 0.25, 0.2, 0.1, 0.05])), 1_000_000, seed),
        lambda: check_db_concavity(y_ref, 1000, seed),
        lambda: check_vertex_ordering(20, 3, seed),
        lambda: check_bounds(1000, seed),
        lambda: check_ce_identity(100, seed),
        lambda: check_decompositions(100, seed, perturb_constant),
        lambda: check_scale_invariance(_scale_labels()),
        lambda: check_curves(0.1),
    ]
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: job(), jobs))
    else:
        results = [job() for job in jobs]
    reports: list[CheckReport | VertexMinReport] = []
    for result in results:
        reports.extend(result if isinstance(result, list) else [result])
    for report in reports:
        log_event("verify", "check", id=report.check_id, status="PASS" if report.passed else "FAIL")
    return reports


def _as_tie_report(report: VertexMinReport, check_id: str) -> VertexMinReport:
    return VertexMinReport(**{**report.__dict__, "check_id": check_id})
