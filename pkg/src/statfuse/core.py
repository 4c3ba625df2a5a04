"""Domain types and the per-element statistics every fusion method shares.

Array conventions
-----------------
* score maps are float arrays of shape ``(..., K)`` with the class axis last;
  an image is ``(H, W, K)`` and a flat batch of elements is ``(N, K)``.
* label maps are integer arrays of shape ``(...)``.
* confusion matrices are ``(K, K)`` integer arrays indexed
  ``[predicted, ground_truth]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from statfuse.errors import DegenerateError, DomainError, ModelMismatchError, ShapeError
from statfuse.numerics import PROB_FLOOR, clip_probs, ln_gamma, log_sum_exp

#: Default add-count applied to each confusion cell at fusion time.
DEFAULT_SMOOTHING = 1.0

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class ClassSet:
    names: tuple[str, ...]
    ignore_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.names) < 2:
            raise DomainError("a class set needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise DomainError("class names must be unique")
        for name in self.names:
            if not name or any(c in name for c in "\t\n\r"):
                raise DomainError(f"invalid class name {name!r}")
        if self.ignore_index is not None and not 0 <= self.ignore_index < len(self.names):
            raise DomainError(f"ignore_index {self.ignore_index} outside 0..{len(self.names) - 1}")

    @property
    def count(self) -> int:
        return len(self.names)

    @classmethod
    def generic(cls, count: int, ignore_index: int | None = None) -> "ClassSet":
        return cls(tuple(f"class{k}" for k in range(count)), ignore_index)

    def valid_mask(self, gt: np.ndarray) -> np.ndarray:
        """Elements that take part in calibration and metrics."""
        if self.ignore_index is None:
            return np.ones(np.shape(gt), dtype=bool)
        return np.asarray(gt) != self.ignore_index


@dataclass(frozen=True)
class ClassPrior:
    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 1 or abs(np.exp(lp).sum() - 1.0) > 1e-9:
            raise DomainError("prior must be a normalised 1-D vector of log-probabilities")
        object.__setattr__(self, "log_probs", lp)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @classmethod
    def uniform(cls, count: int) -> "ClassPrior":
        return cls(np.full(count, -np.log(count)))

    @classmethod
    def from_probs(cls, probs) -> "ClassPrior":
        p = np.asarray(probs, dtype=np.float64)
        return cls(np.log(p / p.sum()))


@dataclass
class ExpertModel:
    """Calibrated statistics of one expert.

    ``dirichlet`` holds one concentration vector per ground-truth class
    (row ``k`` is the model of the expert's scores given class ``k``), or
    ``None`` before Dirichlet fitting.  ``absent`` lists ground-truth classes
    with no calibration data; their rows are uniform.
    """

    confusion: np.ndarray
    dirichlet: np.ndarray | None = None
    absent: tuple[int, ...] = ()

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        k = self.confusion.shape[0]
        if self.confusion.shape != (k, k):
            raise ShapeError(f"confusion matrix must be square, got {self.confusion.shape}")
        if np.any(self.confusion < 0):
            raise DomainError("confusion counts must be non-negative")
        if self.dirichlet is not None:
            self.dirichlet = np.asarray(self.dirichlet, dtype=np.float64)
            if self.dirichlet.shape != (k, k):
                raise ShapeError(f"Dirichlet parameters must be {k}x{k}, got {self.dirichlet.shape}")
            if not np.all(self.dirichlet > 0) or not np.all(np.isfinite(self.dirichlet)):
                raise DomainError("Dirichlet concentrations must be finite and positive")
        self.absent = tuple(sorted(int(a) for a in self.absent))


@dataclass
class FusionModel:
    class_set: ClassSet
    experts: dict[str, ExpertModel]
    prior: ClassPrior
    beta: float = 0.0
    delta: float = 0.0
    smoothing: float = DEFAULT_SMOOTHING
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        k = self.class_set.count
        if not self.experts:
            raise DomainError("a fusion model needs at least one expert")
        for eid, em in self.experts.items():
            if em.confusion.shape != (k, k):
                raise ShapeError(f"expert {eid!r}: confusion is {em.confusion.shape}, expected {(k, k)}")
        if self.prior.log_probs.shape != (k,):
            raise ShapeError(f"prior has {self.prior.log_probs.size} entries, expected {k}")
        if not 0.0 <= self.beta < 1.0:
            raise DomainError(f"beta must lie in [0, 1), got {self.beta}")
        if self.delta < 0:
            raise DomainError(f"delta must be non-negative, got {self.delta}")
        if self.smoothing < 0:
            raise DomainError("smoothing must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.class_set.count

    @property
    def has_dirichlet(self) -> bool:
        return all(em.dirichlet is not None for em in self.experts.values())

    def expert(self, expert_id: str) -> ExpertModel:
        try:
            return self.experts[expert_id]
        except KeyError:
            raise ModelMismatchError(
                f"model has no expert {expert_id!r} (known: {', '.join(self.experts)})"
            ) from None


def check_scores(y, num_classes: int | None = None, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a score map against the simplex invariant and return it as float64."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim < 1:
        raise ShapeError("score map needs a class axis")
    if num_classes is not None and arr.shape[-1] != num_classes:
        raise ShapeError(f"score map has {arr.shape[-1]} classes, expected {num_classes}")
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise DomainError("scores must be finite and non-negative")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > tol):
        raise DomainError("score vectors must sum to 1")
    return arr


def check_labels(labels, num_classes: int) -> np.ndarray:
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise DomainError(f"label maps must be integer, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise DomainError(f"labels must lie in 0..{num_classes - 1}")
    return arr.astype(np.int64, copy=False)


def conditional_log_table(confusion, smoothing: float = DEFAULT_SMOOTHING, absent=()) -> np.ndarray:
    """``table[out, k] = log p(out | k)`` from a confusion matrix.

    Each column is normalised after adding ``smoothing`` to every cell.
    Columns listed in ``absent`` (classes never seen during calibration)
    are uniform.
    """
    m = np.asarray(confusion, dtype=np.float64) + smoothing
    if len(absent):
        m[:, list(absent)] = 1.0
    col = m.sum(axis=0)
    if np.any(col <= 0):
        bad = int(np.flatnonzero(col <= 0)[0])
        raise DegenerateError(f"confusion column {bad} is empty; enable smoothing")
    with np.errstate(divide="ignore"):
        return np.log(m) - np.log(col)


def conditional_log_likelihood(confusion, out: int, k: int, smoothing: float = DEFAULT_SMOOTHING) -> float:
    """``log p(out | k)`` for a single predicted/ground-truth pair."""
    m = np.asarray(confusion, dtype=np.float64)
    col = m[:, k].sum() + smoothing * m.shape[0]
    if col <= 0:
        raise DegenerateError(f"confusion column {k} is empty; enable smoothing")
    with np.errstate(divide="ignore"):
        return float(np.log(m[out, k] + smoothing) - np.log(col))


def prior_from_confusions(confusions, smoothing: float = 0.0) -> ClassPrior:
    """Class prior proportional to ground-truth occurrences across matrices."""
    confusions = list(confusions)
    if not confusions:
        raise DomainError("need at least one confusion matrix")
    occ = sum(np.asarray(m, dtype=np.float64).sum(axis=0) for m in confusions) + smoothing
    if np.any(occ <= 0):
        bad = int(np.flatnonzero(occ <= 0)[0])
        raise DegenerateError(f"class {bad} never occurs; enable smoothing")
    return ClassPrior(np.log(occ) - log_sum_exp(np.log(occ)))


def dirichlet_log_norm(alpha) -> np.ndarray:
    """``ln Gamma(sum alpha) - sum ln Gamma(alpha)`` over the last axis."""
    a = np.asarray(alpha, dtype=np.float64)
    if not np.all(a > 0):
        raise DomainError("Dirichlet concentrations must be positive")
    return ln_gamma(a.sum(axis=-1)) - np.sum(ln_gamma(a), axis=-1)


def dirichlet_log_pdf(y, alpha):
    """Log density of ``Dirichlet(alpha)`` at score vectors ``y`` (class axis last).

    ``y`` is clipped to ``[PROB_FLOOR, 1]`` and renormalised first.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError("alpha must be a single concentration vector")
    logy = np.log(clip_probs(y))
    if logy.shape[-1] != a.size:
        raise ShapeError(f"scores have {logy.shape[-1]} classes, alpha has {a.size}")
    out = dirichlet_log_norm(a) + logy @ (a - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def dirichlet_log_pdf_table(logy: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Log densities of every class model at once.

    ``logy`` holds pre-clipped log scores ``(..., K)``; ``alphas`` is ``(C, K)``
    with one concentration vector per candidate class.  Returns ``(..., C)``.
    """
    return logy @ (alphas - 1.0).T + dirichlet_log_norm(alphas)


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Class argmax along the last axis; ties resolve to the lowest index."""
    return np.argmax(scores, axis=-1)


__all__ = [
    "ClassSet",
    "ClassPrior",
    "ExpertModel",
    "FusionModel",
    "DEFAULT_SMOOTHING",
    "PROB_FLOOR",
    "argmax_labels",
    "check_labels",
    "check_scores",
    "conditional_log_likelihood",
    "conditional_log_table",
    "dirichlet_log_norm",
    "dirichlet_log_pdf",
    "dirichlet_log_pdf_table",
    "prior_from_confusions",
]
