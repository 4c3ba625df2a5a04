"""Element-wise fusion of aligned expert outputs.

Every function takes a mapping ``expert id -> array`` (or a plain sequence
for the model-free methods) and returns a :class:`FusedResult`.  All work is
per element, so splitting an image into tiles and fusing them separately
gives the same labels as fusing the whole image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from statfuse.core import (
    FusionModel,
    argmax_labels,
    check_labels,
    check_scores,
    conditional_log_table,
    dirichlet_log_pdf_table,
)
from statfuse.errors import DomainError, ModelMismatchError, ShapeError
from statfuse.numerics import log_probs

METHODS = ("bayes", "dirichlet", "average", "variance")


@dataclass
class FusedResult:
    labels: np.ndarray
    scores: np.ndarray | None = None


def _same_shape(arrays, what, trailing=0):
    shapes = {a.shape[: a.ndim - trailing] for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"{what} have mismatching shapes: {sorted(shapes)}")


def _as_items(outputs):
    if isinstance(outputs, Mapping):
        return list(outputs.items())
    return [(str(i), v) for i, v in enumerate(outputs)]


def fuse_bayes(expert_labels: Mapping[str, np.ndarray], model: FusionModel, keep_scores: bool = False) -> FusedResult:
    """Bayes categorical fusion of hard expert decisions.

    Per element and candidate class ``k`` the score is
    ``log p(k) + sum_i log p(out_i | k)`` with the conditionals read from each
    expert's smoothed confusion matrix.
    """
    if not expert_labels:
        raise DomainError("need at least one expert")
    k = model.num_classes
    items = [(eid, check_labels(lab, k)) for eid, lab in expert_labels.items()]
    _same_shape([lab for _, lab in items], "expert label maps")
    score = np.broadcast_to(model.prior.log_probs, items[0][1].shape + (k,)).copy()
    for eid, lab in items:
        em = model.expert(eid)
        score += conditional_log_table(em.confusion, model.smoothing, em.absent)[lab]
    return FusedResult(argmax_labels(score), score if keep_scores else None)


def fuse_dirichlet(expert_scores: Mapping[str, np.ndarray], model: FusionModel, keep_scores: bool = False) -> FusedResult:
    """Dirichlet fusion of full score vectors.

    Per element the score of class ``k`` is
    ``log p(k) + sum_i log Dir(y_i; alpha_i^(k))``.
    """
    if not expert_scores:
        raise DomainError("need at least one expert")
    k = model.num_classes
    items = list(expert_scores.items())
    _same_shape([np.asarray(y) for _, y in items], "expert score maps", trailing=1)
    score = None
    for eid, y in items:
        em = model.expert(eid)
        if em.dirichlet is None:
            raise ModelMismatchError(f"model has no Dirichlet parameters for expert {eid!r}; run fit first")
        y = np.asarray(y)
        if y.shape[-1] != k:
            raise ShapeError(f"expert {eid!r} scores have {y.shape[-1]} classes, model has {k}")
        term = dirichlet_log_pdf_table(log_probs(y), em.dirichlet)
        score = term if score is None else score + term
    score += model.prior.log_probs
    return FusedResult(argmax_labels(score), score if keep_scores else None)


def fuse_average(expert_scores, keep_scores: bool = False) -> FusedResult:
    """Mean of the experts' score vectors, then argmax."""
    items = _as_items(expert_scores)
    if not items:
        raise DomainError("need at least one expert")
    ys = [np.asarray(y, dtype=np.float64) for _, y in items]
    _same_shape(ys, "expert score maps", trailing=0)
    total = ys[0].copy()
    for y in ys[1:]:
        total += y
    mean = total / len(ys)
    return FusedResult(argmax_labels(mean), mean if keep_scores else None)


def certainty(samples) -> tuple[np.ndarray, np.ndarray]:
    """Mean score vector and certainty weight of one Monte-Carlo sample stack.

    ``samples`` is ``(T, ..., K)``.  The weight is the reciprocal of the
    class-averaged unbiased sample variance and is ``inf`` where every
    sample agrees.
    """
    stack = np.asarray(samples, dtype=np.float64)
    if stack.ndim < 2 or stack.shape[0] < 2:
        raise DomainError("a sample stack needs at least two samples")
    mean = stack.mean(axis=0)
    var = stack.var(axis=0, ddof=1).mean(axis=-1)
    with np.errstate(divide="ignore"):
        omega = 1.0 / var
    return mean, omega


def fuse_variance(stacks, keep_scores: bool = False) -> FusedResult:
    """Certainty-weighted mean of per-expert Monte-Carlo means.

    The fused vector is ``sum_i w_i ybar_i`` with ``w_i = omega_i / sum omega``.
    Where one or more experts have zero variance (infinite certainty) the
    result is the plain mean over those experts alone; this covers the
    all-zero case too.  Equal certainties reduce exactly to
    :func:`fuse_average` of the mean maps.
    """
    items = _as_items(stacks)
    if not items:
        raise DomainError("need at least one expert")
    arrays = [np.asarray(s) for _, s in items]
    if any(a.ndim < 2 for a in arrays):
        raise ShapeError("sample stacks must be (T, ..., K)")
    _same_shape([a[0] for a in arrays], "sample stacks")
    means, omegas = zip(*(certainty(a) for a in arrays))
    omega = np.stack(omegas)  # (M, ...)
    ybar = np.stack(means)  # (M, ..., K)

    infinite = np.isinf(omega)
    any_inf = infinite.any(axis=0)
    w = np.where(any_inf, infinite.astype(np.float64), omega)
    w = w / w.sum(axis=0)
    fused = np.zeros_like(ybar[0])
    for i in range(len(arrays)):
        fused += w[i][..., None] * ybar[i]
    # equal certainties: take the average exactly as fuse_average does, so
    # the reduction holds bit for bit rather than up to rounding of 1/M
    equal = np.all(omega == omega[0], axis=0)
    if equal.any():
        total = ybar[0].copy()
        for y in ybar[1:]:
            total += y
        fused = np.where(equal[..., None], total / len(arrays), fused)
    return FusedResult(argmax_labels(fused), fused if keep_scores else None)


def fuse(method: str, inputs, model: FusionModel | None = None, keep_scores: bool = False) -> FusedResult:
    """Dispatch to a fusion method by name.

    ``inputs`` maps expert ids to score maps (``(..., K)``) for every method
    except ``variance``, which takes sample stacks ``(T, ..., K)``.  The
    Bayes method fuses the argmax of each score map.
    """
    if method == "average":
        return fuse_average(inputs, keep_scores)
    if method == "variance":
        return fuse_variance(inputs, keep_scores)
    if model is None:
        raise DomainError(f"method {method!r} needs a calibrated model")
    if method == "bayes":
        labels = {eid: (y if np.issubdtype(np.asarray(y).dtype, np.integer) else argmax_labels(y)) for eid, y in inputs.items()}
        return fuse_bayes(labels, model, keep_scores)
    if method == "dirichlet":
        return fuse_dirichlet(inputs, model, keep_scores)
    raise DomainError(f"unknown fusion method {method!r}; choose from {', '.join(METHODS)}")
