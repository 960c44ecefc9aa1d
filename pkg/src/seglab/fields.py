"""Dense per-pixel fields, temperature softmax and label marginals.

Pixels are stored row-major as a flat array; a field of K classes holds one
K-vector per pixel. Nothing here uses 2-D adjacency, only membership of a pixel
in a ground-truth region.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

DEFAULT_TAU = 10.0
SIMPLEX_TOL = 1e-9
_TINY = np.finfo(np.float64).tiny
_PGM_COMMENT_RE = re.compile(r"#[^\n]*")


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.setflags(write=False)
    return values


def _check_shape(height: int, width: int, num_classes: int, rows: int) -> None:
    if height < 1 or width < 1:
        raise InvalidInputError(f"grid must be non-empty, got {height}x{width}")
    if num_classes < 2:
        raise InvalidInputError(f"need at least 2 classes, got {num_classes}")
    if rows != height * width:
        raise InvalidInputError(f"expected {height * width} pixels, got {rows}")


def _inverse(perm: Sequence[int], num_classes: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(num_classes)):
        raise InvalidParameterError(f"not a permutation of {num_classes} classes: {perm.tolist()}")
    return perm


@dataclass(frozen=True)
class LabelField:
    height: int
    width: int
    num_classes: int
    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise InvalidInputError("labels must be a flat integer array")
        _check_shape(self.height, self.width, self.num_classes, labels.shape[0])
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidInputError(f"label outside [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    @classmethod
    def from_grid(cls, rows: Sequence[Sequence[int]], num_classes: int | None = None) -> "LabelField":
        grid = np.asarray(rows, dtype=np.int64)
        if grid.ndim != 2:
            raise InvalidInputError("label grid must be two-dimensional")
        if num_classes is None:
            num_classes = max(int(grid.max()) + 1, 2)
        return cls(grid.shape[0], grid.shape[1], num_classes, grid.ravel())

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def to_grid(self) -> np.ndarray:
        return self.labels.reshape(self.height, self.width)

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def region_mask(self, k: int) -> np.ndarray:
        return self.labels == k

    def empty_classes(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.region_sizes() == 0))

    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.num_pixels, self.num_classes))
        out[np.arange(self.num_pixels), self.labels] = 1.0
        return out

    def replicate(self, m: int) -> "LabelField":
        """Repeat every pixel m times along the row."""
        if m < 1:
            raise InvalidParameterError(f"replication factor must be >= 1, got {m}")
        return LabelField(self.height, self.width * m, self.num_classes, np.repeat(self.labels, m))

    def permute_classes(self, perm: Sequence[int]) -> "LabelField":
        perm = _inverse(perm, self.num_classes)
        return LabelField(self.height, self.width, self.num_classes, perm[self.labels])

    def take(self, order: Sequence[int]) -> "LabelField":
        return LabelField(self.height, self.width, self.num_classes, self.labels[np.asarray(order)])


@dataclass(frozen=True)
class LogitField:
    height: int
    width: int
    num_classes: int
    logits: np.ndarray

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != self.num_classes:
            raise InvalidInputError(f"logits must have shape (pixels, {self.num_classes})")
        _check_shape(self.height, self.width, self.num_classes, logits.shape[0])
        if not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits must be finite")
        object.__setattr__(self, "logits", _frozen(logits))

    @classmethod
    def like(cls, labels: LabelField, logits: np.ndarray) -> "LogitField":
        return cls(labels.height, labels.width, labels.num_classes, logits)

    def permute_classes(self, perm: Sequence[int]) -> "LogitField":
        perm = _inverse(perm, self.num_classes)
        out = np.empty_like(self.logits)
        out[:, perm] = self.logits
        return LogitField(self.height, self.width, self.num_classes, out)

    def take(self, order: Sequence[int]) -> "LogitField":
        return LogitField(self.height, self.width, self.num_classes, self.logits[np.asarray(order)])


@dataclass(frozen=True)
class ProbField:
    height: int
    width: int
    num_classes: int
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != self.num_classes:
            raise InvalidInputError(f"probs must have shape (pixels, {self.num_classes})")
        _check_shape(self.height, self.width, self.num_classes, probs.shape[0])
        if not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
            raise InvalidInputError("probabilities must lie in [0, 1]")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > SIMPLEX_TOL:
            raise InvalidInputError("probability rows must sum to 1")
        object.__setattr__(self, "probs", _frozen(probs))

    @classmethod
    def like(cls, labels: LabelField, probs: np.ndarray) -> "ProbField":
        return cls(labels.height, labels.width, labels.num_classes, probs)

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def permute_classes(self, perm: Sequence[int]) -> "ProbField":
        perm = _inverse(perm, self.num_classes)
        out = np.empty_like(self.probs)
        out[:, perm] = self.probs
        return ProbField(self.height, self.width, self.num_classes, out)

    def take(self, order: Sequence[int]) -> "ProbField":
        return ProbField(self.height, self.width, self.num_classes, self.probs[np.asarray(order)])


@dataclass(frozen=True)
class Marginal:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] < 2:
            raise InvalidInputError("a marginal needs at least 2 entries")
        if not np.all(np.isfinite(values)) or values.min() < -SIMPLEX_TOL or values.max() > 1.0 + SIMPLEX_TOL:
            raise InvalidInputError("marginal entries must lie in [0, 1]")
        if abs(values.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError(f"marginal must sum to 1, got {values.sum()!r}")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, k: int) -> float:
        return float(self.values[k])

    def argmax_set(self) -> tuple[int, ...]:
        top = self.values.max()
        return tuple(int(k) for k in np.flatnonzero(self.values == top))


def softmax_rows(z: np.ndarray, tau: float) -> np.ndarray:
    scaled = tau * z
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    expo = np.exp(scaled)
    probs = expo / expo.sum(axis=1, keepdims=True)
    return np.maximum(probs, _TINY)


def temperature_softmax(logits: LogitField, tau: float = DEFAULT_TAU) -> ProbField:
    if not (np.isfinite(tau) and tau > 0):
        raise InvalidParameterError(f"tau must be a positive real, got {tau!r}")
    probs = softmax_rows(logits.logits, tau)
    return ProbField(logits.height, logits.width, logits.num_classes, probs)


def predicted_marginal(probs: ProbField) -> Marginal:
    return Marginal(probs.probs.mean(axis=0))


def gt_marginal(labels: LabelField) -> Marginal:
    return Marginal(labels.region_sizes() / labels.num_pixels)


def one_hot(labels: LabelField) -> ProbField:
    return ProbField.like(labels, labels.one_hot())


def write_pgm(path: Path, labels: LabelField) -> None:
    maxval = max(labels.num_classes - 1, 1)
    grid = labels.to_grid()
    lines = ["P2", f"{labels.width} {labels.height}", str(maxval)]
    lines.extend(" ".join(str(int(v)) for v in row) for row in grid)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path: Path, num_classes: int | None = None) -> LabelField:
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise InvalidInputError(f"{path}: not a plain-text PGM") from exc
    tokens = _PGM_COMMENT_RE.sub(" ", text).split()
    if len(tokens) < 4 or tokens[0] != "P2":
        raise InvalidInputError(f"{path}: missing P2 header")
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:4])
        values = [int(tok) for tok in tokens[4:]]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: non-integer token") from exc
    if len(values) != width * height:
        raise InvalidInputError(f"{path}: expected {width * height} pixels, found {len(values)}")
    if values and max(values) > maxval:
        raise InvalidInputError(f"{path}: pixel value above maxval {maxval}")
    if num_classes is None:
        num_classes = max(maxval + 1, 2)
    return LabelField(height, width, num_classes, np.asarray(values, dtype=np.int64))
