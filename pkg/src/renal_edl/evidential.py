"""Dirichlet evidence, uncertainty grades and the class-weighted digamma loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .specfun import digamma, trigamma

N_GRADES = 5
# Upper edges of grades 1..4; grade 5 is closed at 1.0.
GRADE_EDGES = np.array([0.2, 0.4, 0.6, 0.8])


def _check_evidence(evidence) -> np.ndarray:
    e = np.asarray(evidence, dtype=np.float64)
    if e.ndim != 1 or e.size < 2:
        raise ValidationError(f"evidence must be a vector with at least 2 classes, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise ValidationError("evidence contains non-finite values")
    if np.any(e < 0):
        raise ValidationError("evidence must be non-negative")
    return e


def grade_of(u):
    """Map uncertainty in [0, 1] to an integer grade 1..5.

    Works elementwise on arrays; a scalar returns an int.
    """
    arr = np.asarray(u, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValidationError("uncertainty must lie in [0, 1]")
    g = np.searchsorted(GRADE_EDGES, arr, side="right") + 1
    if arr.ndim == 0:
        return int(g)
    return g.astype(np.int64)


@dataclass(frozen=True)
class EvidentialOutput:
    evidence: np.ndarray
    alpha: np.ndarray
    strength: float
    probs: np.ndarray
    uncertainty: float
    grade: int

    @property
    def num_classes(self) -> int:
        return int(self.evidence.size)

    @property
    def prediction(self) -> int:
        # np.argmax returns the first maximum: ties go to the lowest index.
        return int(np.argmax(self.probs))


def from_evidence(evidence, num_classes: int | None = None) -> EvidentialOutput:
    e = _check_evidence(evidence)
    if num_classes is not None and e.size != num_classes:
        raise ValidationError(f"expected {num_classes} evidence values, got {e.size}")
    alpha = e + 1.0
    strength = float(alpha.sum())
    probs = alpha / strength
    u = e.size / strength
    for arr in (e, alpha, probs):
        arr.setflags(write=False)
    return EvidentialOutput(e, alpha, strength, probs, u, grade_of(u))


def dirichlet_summary(evidence: np.ndarray):
    """Batched version of :func:`from_evidence` for an (N, K) evidence array.

    Returns ``(probs, uncertainty, grade, predicted)``.
    """
    e = np.asarray(evidence, dtype=np.float64)
    alpha = e + 1.0
    strength = alpha.sum(axis=1)
    probs = alpha / strength[:, None]
    u = e.shape[1] / strength
    return probs, u, grade_of(u), np.argmax(probs, axis=1)


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValidationError("class weights must be a vector of finite positive values")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


def class_weights_from_counts(counts) -> ClassWeights:
    c = np.asarray(counts)
    if np.any(c < 1):
        missing = [j for j, n in enumerate(c) if n < 1]
        raise ConfigurationError(f"class weights undefined: no training samples for class(es) {missing}")
    return ClassWeights(1.0 / c.astype(np.float64))


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_evidence: np.ndarray


def evidential_loss(evidence, true_class: int, weights) -> LossResult:
    """Per-subject loss ``w_c * (psi(S) - psi(alpha_c))`` and its evidence gradient.

    ``weights`` may be a :class:`ClassWeights` or a plain sequence; plain
    sequences may contain zeros (used to switch the learning signal off).
    """
    e = _check_evidence(evidence)
    k = e.size
    if not 0 <= int(true_class) < k or int(true_class) != true_class:
        raise ValidationError(f"true_class {true_class} outside [0, {k})")
    w = weights.w if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValidationError(f"expected {k} class weights, got shape {w.shape}")
    c = int(true_class)
    alpha = e + 1.0
    s = alpha.sum()
    wc = w[c]
    value = wc * (digamma(s) - digamma(alpha[c]))
    tri_s = trigamma(s)
    grad = np.full(k, wc * tri_s)
    grad[c] = wc * (tri_s - trigamma(alpha[c]))
    return LossResult(float(value), grad)


def batch_loss(evidence: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    """Mean loss over an (N, K) batch and the gradient of that mean.

    Vectorized form of :func:`evidential_loss` used during training.
    """
    e = np.asarray(evidence, dtype=np.float64)
    n, _ = e.shape
    rows = np.arange(n)
    alpha = e + 1.0
    s = alpha.sum(axis=1)
    a_c = alpha[rows, labels]
    wc = np.asarray(weights, dtype=np.float64)[labels]
    per_subject = wc * (digamma(s) - digamma(a_c))
    grad = np.repeat((wc * trigamma(s))[:, None], e.shape[1], axis=1)
    grad[rows, labels] -= wc * trigamma(a_c)
    return float(per_subject.mean()), grad / n, per_subject
