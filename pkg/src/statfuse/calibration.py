"""Per-expert statistics gathered on a development set.

Confusion matrices feed Bayes categorical fusion.  For Dirichlet fusion we
keep, per ground-truth class, the sum of log scores and the element count;
the class mean of log scores is a sufficient statistic for the Dirichlet
likelihood, so fitting never revisits the images.

Two fitters are provided:

* :func:`fit_dirichlet_mle` -- Minka's fixed point
  ``alpha_j <- inv_digamma(digamma(sum(alpha)) + s_j)``.
* :func:`fit_dirichlet_regularized` -- maximises the discriminative,
  norm-penalised objective :func:`regularized_loss` by gradient ascent on
  ``log(alpha)`` with an Armijo backtracking line search, starting from the
  MLE.

Both fitters accept a single statistic ``(K,)`` or a batch ``(B, K)`` and
iterate every row in lockstep, which is how a whole expert (all classes) is
fitted in one call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from statfuse.core import (
    DEFAULT_SMOOTHING,
    ClassSet,
    ExpertModel,
    FusionModel,
    argmax_labels,
    check_labels,
    check_scores,
    dirichlet_log_norm,
    prior_from_confusions,
)
from statfuse.errors import DegenerateError, DomainError, ShapeError
from statfuse.numerics import digamma, inv_digamma, log_probs, log_sum_exp

log = logging.getLogger(__name__)

DEFAULT_BETA_GRID = (0.0, 0.1, 0.2, 0.3, 0.5)
DEFAULT_DELTA_GRID = (0.0, 1e-4, 1e-3, 1e-2, 1e-1)

ARMIJO_C = 1e-4
MAX_LOG_STEP = 2.0  # largest change of any log(alpha) in one step
_MAX_HALVINGS = 60


# ---------------------------------------------------------------------------
# accumulation


def accumulate_confusion(pred, gt, confusion=None, *, num_classes=None, ignore_index=None):
    """Add ``(pred, gt)`` pairs to a confusion matrix indexed ``[pred, gt]``.

    Returns a new matrix; ``confusion`` is not modified.  Elements whose
    ground truth equals ``ignore_index`` are skipped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if confusion is None:
        if num_classes is None:
            raise DomainError("pass either a confusion matrix or num_classes")
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    k = confusion.shape[0]
    pred = check_labels(pred, k).ravel()
    gt = check_labels(gt, k).ravel()
    if ignore_index is not None:
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
    counts = np.bincount(pred * k + gt, minlength=k * k).reshape(k, k)
    return np.asarray(confusion, dtype=np.int64) + counts


@dataclass
class SuffStats:
    """Per ground-truth class sums of log scores.

    ``sum_log[k]`` is the sum of ``log y`` over elements whose ground truth
    is ``k`` and ``counts[k]`` their number.
    """

    sum_log: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "SuffStats":
        return cls(np.zeros((num_classes, num_classes)), np.zeros(num_classes, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.size

    @property
    def total_sum_log(self) -> np.ndarray:
        return self.sum_log.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mean_log(self, k: int) -> np.ndarray:
        if self.counts[k] == 0:
            raise DegenerateError(f"class {k} has no calibration elements")
        return self.sum_log[k] / self.counts[k]

    def merge(self, other: "SuffStats") -> "SuffStats":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge statistics with different class counts")
        return SuffStats(self.sum_log + other.sum_log, self.counts + other.counts)


def subsample_mask(shape, rate: float, seed) -> np.ndarray:
    """Random element mask keeping a fraction ``rate`` of the elements."""
    if not 0.0 < rate <= 1.0:
        raise DomainError(f"subsample rate must lie in (0, 1], got {rate}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.random(shape) < rate


def accumulate_suffstats(scores, gt, acc=None, *, ignore_index=None, mask=None) -> SuffStats:
    """Add the log scores of every labelled element to ``acc``.

    ``scores`` is ``(..., K)``, ``gt`` the matching label map.  ``mask``
    optionally restricts accumulation to a subset of elements.
    """
    y = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt)
    if y.shape[:-1] != gt.shape:
        raise ShapeError(f"scores {y.shape} do not match ground truth {gt.shape}")
    k = y.shape[-1]
    if acc is None:
        acc = SuffStats.empty(k)
    elif acc.num_classes != k:
        raise ShapeError(f"accumulator has {acc.num_classes} classes, scores have {k}")
    gt = check_labels(gt, k).ravel()
    logy = log_probs(y.reshape(-1, k))
    keep = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask).ravel()
    if ignore_index is not None:
        keep = keep & (gt != ignore_index)
    gt, logy = gt[keep], logy[keep]
    sums = np.stack([np.bincount(gt, weights=logy[:, j], minlength=k) for j in range(k)], axis=1)
    return SuffStats(acc.sum_log + sums, acc.counts + np.bincount(gt, minlength=k))


def complement_stats(acc: SuffStats, k: int) -> tuple[np.ndarray, int]:
    """Mean log scores over all elements whose ground truth is *not* ``k``."""
    n_bar = acc.total - int(acc.counts[k])
    if n_bar <= 0:
        raise DegenerateError(f"no calibration elements outside class {k}")
    return (acc.total_sum_log - acc.sum_log[k]) / n_bar, n_bar


# ---------------------------------------------------------------------------
# Dirichlet fitting


@dataclass
class DirichletFit:
    """Result of a Dirichlet fit; fields are per row for batched fits."""

    alpha: np.ndarray
    converged: np.ndarray | bool
    iterations: np.ndarray | int
    loss_history: list[np.ndarray] = field(default_factory=list, repr=False)


def dirichlet_loglik(alpha, s, n: float = 1.0):
    """Dirichlet log-likelihood of data summarised by mean log scores ``s``.

    ``n * (ln Gamma(sum a) - sum ln Gamma(a) + sum (a - 1) s)``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    return n * (dirichlet_log_norm(alpha) + np.sum((alpha - 1.0) * s, axis=-1))


def regularized_loss(alpha, s, s_bar, beta: float = 0.0, delta: float = 0.0):
    """Discriminative, norm-penalised Dirichlet fitting objective (to maximise).

    ``(1 - beta) [ln Gamma(sum a) - sum ln Gamma(a)] - beta sum (a - 1) s_bar
    + sum (a - 1) s - delta sum a^2``, evaluated along the last axis.
    ``beta`` may be an array broadcasting against the leading axes.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(alpha > 0):
        raise DomainError("Dirichlet concentrations must be positive")
    beta = np.asarray(beta, dtype=np.float64)
    am1 = alpha - 1.0
    out = (
        (1.0 - beta) * dirichlet_log_norm(alpha)
        - beta * np.sum(am1 * s_bar, axis=-1)
        + np.sum(am1 * s, axis=-1)
        - delta * np.sum(alpha * alpha, axis=-1)
    )
    return float(out) if np.ndim(out) == 0 else out


def _check_stat(s, name="s"):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim not in (1, 2) or s.shape[-1] < 2:
        raise ShapeError(f"{name} must be (K,) or (B, K) with K >= 2, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DomainError(f"{name} must be finite")
    return s


def _initial_alpha(s):
    # Minka's precision estimate from the mean log scores: with m = softmax(s),
    # s_j - log m_j ~ (1 - 1/m_j) / (2 a0), so a0 ~ (K - 1) / (-2 logsumexp(s)).
    k = s.shape[-1]
    lse = log_sum_exp(s, axis=-1)
    lse = np.asarray(lse)[..., None]
    m = np.exp(s - lse)
    with np.errstate(divide="ignore"):
        a0 = np.where(lse < -1e-12, (k - 1) / (-2.0 * lse), float(k))
    return np.clip(a0, 1e-3, 1e8) * m


def fit_dirichlet_mle(s, n: int = 2, max_iter: int = 1000, tol: float = 1e-8, init=None) -> DirichletFit:
    """Maximum-likelihood concentrations from mean log scores ``s``.

    Runs the fixed point until the largest absolute change in ``alpha`` drops
    below ``tol`` or ``max_iter`` iterations have run.  ``converged`` is
    ``False`` for rows that hit the cap; degenerate data (identical score
    vectors) has no finite maximiser and always ends there.
    """
    s = _check_stat(s)
    if np.any(s >= 0):
        raise DomainError("mean log scores must be negative")
    if n < 2:
        raise DomainError(f"need at least two samples, got {n}")
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    alpha = _initial_alpha(s2) if init is None else np.array(np.atleast_2d(init), dtype=np.float64)
    active = np.ones(s2.shape[0], dtype=bool)
    iterations = np.zeros(s2.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        if not active.any():
            break
        a = alpha[active]
        new = inv_digamma(digamma(a.sum(axis=1, keepdims=True)) + s2[active])
        change = np.max(np.abs(new - a), axis=1)
        alpha[active] = new
        iterations[active] += 1
        idx = np.flatnonzero(active)
        active[idx[change < tol]] = False
    converged = ~active
    if single:
        return DirichletFit(alpha[0], bool(converged[0]), int(iterations[0]))
    return DirichletFit(alpha, converged, iterations)


@dataclass(frozen=True)
class RegularizationConfig:
    beta: float = 0.0
    delta: float = 0.0
    max_iterations: int = 1000
    loss_tolerance: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise DomainError(f"beta must lie in [0, 1), got {self.beta}")
        if self.delta < 0:
            raise DomainError(f"delta must be non-negative, got {self.delta}")
        if self.max_iterations < 1 or self.loss_tolerance <= 0:
            raise DomainError("max_iterations and loss_tolerance must be positive")


def _regularized_grad_log(alpha, s, s_bar, beta, delta):
    # d loss / d log(alpha) = alpha * d loss / d alpha
    total = alpha.sum(axis=-1, keepdims=True)
    dalpha = (1.0 - beta[:, None]) * (digamma(total) - digamma(alpha)) - beta[:, None] * s_bar + s - 2.0 * delta * alpha
    return alpha * dalpha


def _safe_loss(alpha, s, s_bar, beta, delta):
    with np.errstate(over="ignore", invalid="ignore"):
        ok = np.all(np.isfinite(alpha) & (alpha > 0), axis=-1)
        out = np.full(alpha.shape[0], -np.inf)
        if ok.any():
            out[ok] = regularized_loss(alpha[ok], s[ok], s_bar[ok], beta[ok], delta)
    return np.where(np.isfinite(out), out, -np.inf)


def fit_dirichlet_regularized(
    s, s_bar=None, cfg: RegularizationConfig = RegularizationConfig(), init=None, *, record: bool = False
) -> DirichletFit:
    """Maximise :func:`regularized_loss` over positive concentrations.

    Gradient ascent on ``theta = log(alpha)`` keeps every iterate positive.
    Each step starts from twice the previously accepted step length and is
    halved until the Armijo condition holds, so the loss never decreases.
    A row stops when an accepted step improves the loss by less than
    ``cfg.loss_tolerance``, when no ascent step can be found, or at
    ``cfg.max_iterations``.

    ``s_bar`` rows that are ``None``/NaN (no complement data) are fitted with
    ``beta = 0``.  ``init`` defaults to the unregularised MLE.
    """
    s = _check_stat(s)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    b = s2.shape[0]
    beta = np.full(b, cfg.beta)
    if s_bar is None:
        sb = np.zeros_like(s2)
        beta[:] = 0.0
    else:
        sb = np.array(np.atleast_2d(s_bar), dtype=np.float64)
        if sb.shape != s2.shape:
            raise ShapeError(f"complement statistic {sb.shape} does not match {s2.shape}")
        missing = ~np.all(np.isfinite(sb), axis=1)
        beta[missing] = 0.0
        sb[missing] = 0.0
    if init is None:
        alpha = fit_dirichlet_mle(s2, max_iter=cfg.max_iterations).alpha
    else:
        alpha = np.array(np.atleast_2d(init), dtype=np.float64)
        if alpha.shape != s2.shape or not np.all(alpha > 0):
            raise DomainError("init must be positive and match the statistic's shape")
        if cfg.delta == 0.0 and not beta.any() and np.all(s2 < 0):
            # the objective is the plain likelihood: the fixed point is faster
            # and also monotone
            alpha = fit_dirichlet_mle(s2, max_iter=cfg.max_iterations, init=alpha).alpha
    theta = np.log(alpha)
    loss = _safe_loss(alpha, s2, sb, beta, cfg.delta)
    step = np.ones(b)
    active = np.ones(b, dtype=bool)
    converged = np.zeros(b, dtype=bool)
    iterations = np.zeros(b, dtype=np.int64)
    history = [loss.copy()] if record else []

    for _ in range(cfg.max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        grad = _regularized_grad_log(np.exp(theta[idx]), s2[idx], sb[idx], beta[idx], cfg.delta)
        gnorm2 = np.sum(grad * grad, axis=1)
        gmax = np.max(np.abs(grad), axis=1)
        with np.errstate(divide="ignore"):
            t = np.minimum(step[idx], MAX_LOG_STEP / gmax)
        accepted = np.zeros(idx.size, dtype=bool)
        new_loss = np.full(idx.size, -np.inf)
        new_theta = theta[idx].copy()
        pending = gnorm2 > 0
        for _ in range(_MAX_HALVINGS):
            if not pending.any():
                break
            p = np.flatnonzero(pending)
            cand = theta[idx[p]] + t[p, None] * grad[p]
            cand_loss = _safe_loss(np.exp(cand), s2[idx[p]], sb[idx[p]], beta[idx[p]], cfg.delta)
            ok = cand_loss >= loss[idx[p]] + ARMIJO_C * t[p] * gnorm2[p]
            good = p[ok]
            accepted[good] = True
            new_loss[good] = cand_loss[ok]
            new_theta[good] = cand[ok]
            pending[good] = False
            t[p[~ok]] *= 0.5

        iterations[idx] += 1
        improvement = np.where(accepted, new_loss - loss[idx], 0.0)
        theta[idx[accepted]] = new_theta[accepted]
        loss[idx[accepted]] = new_loss[accepted]
        step[idx] = np.where(accepted, 2.0 * t, t)
        done = ~accepted | (improvement < cfg.loss_tolerance)
        converged[idx[done]] = True
        active[idx[done]] = False
        if record:
            history.append(loss.copy())

    alpha = np.exp(theta)
    if single:
        hist = [h[0] for h in history]
        return DirichletFit(alpha[0], bool(converged[0]), int(iterations[0]), hist)
    return DirichletFit(alpha, converged, iterations, history)


# ---------------------------------------------------------------------------
# calibration of whole experts


@dataclass
class Calibration:
    """A calibrated model plus the statistics needed to (re)fit Dirichlet models."""

    model: FusionModel
    stats: dict[str, SuffStats]


def calibrate(
    expert_scores: Mapping[str, Sequence[np.ndarray]],
    gts: Sequence[np.ndarray],
    class_set: ClassSet,
    *,
    smoothing: float = DEFAULT_SMOOTHING,
    subsample: float | None = None,
    seed: int = 0,
) -> Calibration:
    """Build confusion matrices, the class prior and Dirichlet statistics.

    ``expert_scores[e][i]`` is expert ``e``'s ``(H, W, K)`` score map for
    image ``i`` with ground truth ``gts[i]``.  Confusion matrices count every
    labelled element; ``subsample`` thins only the Dirichlet statistics, with
    one deterministic mask per image derived from ``seed``.
    """
    k = class_set.count
    gts = list(gts)
    if not gts:
        raise DomainError("calibration needs at least one image")
    masks = [None] * len(gts)
    if subsample is not None and subsample < 1.0:
        masks = [subsample_mask(np.shape(g), subsample, (seed, i)) for i, g in enumerate(gts)]

    experts: dict[str, ExpertModel] = {}
    stats: dict[str, SuffStats] = {}
    for eid, maps in expert_scores.items():
        maps = list(maps)
        if len(maps) != len(gts):
            raise ShapeError(f"expert {eid!r} has {len(maps)} score maps for {len(gts)} images")
        conf = np.zeros((k, k), dtype=np.int64)
        acc = SuffStats.empty(k)
        for y, g, m in zip(maps, gts, masks):
            y = check_scores(y, k, tol=1e-3)
            conf = accumulate_confusion(argmax_labels(y), g, conf, ignore_index=class_set.ignore_index)
            acc = accumulate_suffstats(y, g, acc, ignore_index=class_set.ignore_index, mask=m)
        experts[eid] = ExpertModel(conf, absent=tuple(np.flatnonzero(conf.sum(axis=0) == 0)))
        stats[eid] = acc

    occurrence = sum(em.confusion.sum(axis=0) for em in experts.values())
    prior_smoothing = 1.0 if np.any(occurrence == 0) else 0.0
    prior = prior_from_confusions([em.confusion for em in experts.values()], smoothing=prior_smoothing)
    model = FusionModel(class_set, experts, prior, smoothing=smoothing)
    return Calibration(model, stats)


@dataclass
class ExpertFit:
    alphas: np.ndarray
    absent: tuple[int, ...]
    fallbacks: tuple[int, ...]
    converged: np.ndarray


def fit_expert(stats: SuffStats, cfg: RegularizationConfig, class_set: ClassSet | None = None) -> ExpertFit:
    """Fit one Dirichlet model per ground-truth class of a single expert.

    Classes with fewer than two calibration elements get uniform
    (all-ones) concentrations.  A class whose regularised fit fails falls
    back to its MLE fit and is listed in ``fallbacks``.
    """
    k = stats.num_classes
    ignore = None if class_set is None else class_set.ignore_index
    fitted = [c for c in range(k) if stats.counts[c] >= 2 and c != ignore]
    absent = tuple(c for c in range(k) if c not in fitted)
    alphas = np.ones((k, k))
    converged = np.ones(k, dtype=bool)
    if not fitted:
        return ExpertFit(alphas, absent, (), converged)

    s = np.stack([stats.mean_log(c) for c in fitted])
    s_bar = np.full_like(s, np.nan)
    for row, c in enumerate(fitted):
        try:
            s_bar[row] = complement_stats(stats, c)[0]
        except DegenerateError:
            pass  # beta is forced to zero for this class
    mle = fit_dirichlet_mle(s, max_iter=cfg.max_iterations)
    fallbacks: list[int] = []
    if cfg.beta == 0.0 and cfg.delta == 0.0:
        result, conv = mle.alpha, mle.converged
    else:
        try:
            reg = fit_dirichlet_regularized(s, s_bar, cfg, init=mle.alpha)
            result, conv = reg.alpha.copy(), reg.converged.copy()
        except (DomainError, FloatingPointError) as exc:
            log.warning("regularised fit failed (%s); using MLE for all classes", exc)
            result, conv = mle.alpha.copy(), mle.converged.copy()
            fallbacks = list(fitted)
        bad = ~np.all(np.isfinite(result) & (result > 0), axis=1)
        for row in np.flatnonzero(bad):
            result[row], conv[row] = mle.alpha[row], mle.converged[row]
            fallbacks.append(fitted[row])
    alphas[fitted] = result
    converged[fitted] = conv
    return ExpertFit(alphas, absent, tuple(sorted(set(fallbacks))), converged)


def fit_model(calib: Calibration, cfg: RegularizationConfig) -> tuple[FusionModel, dict[str, ExpertFit]]:
    """Return a copy of ``calib.model`` carrying fitted Dirichlet parameters."""
    experts = {}
    fits = {}
    for eid, em in calib.model.experts.items():
        if eid not in calib.stats:
            raise DomainError(f"no calibration statistics for expert {eid!r}")
        fit = fit_expert(calib.stats[eid], cfg, calib.model.class_set)
        absent = tuple(sorted(set(em.absent) | set(fit.absent)))
        experts[eid] = ExpertModel(em.confusion, fit.alphas, absent)
        fits[eid] = fit
    model = replace(calib.model, experts=experts, beta=cfg.beta, delta=cfg.delta)
    return model, fits


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridPoint:
    beta: float
    delta: float
    mean_iou: float
    fallbacks: int


@dataclass
class GridSearchResult:
    beta: float
    delta: float
    table: list[GridPoint]

    @property
    def best(self) -> GridPoint:
        return next(p for p in self.table if p.beta == self.beta and p.delta == self.delta)


def evaluate_grid_point(
    calib: Calibration,
    dev_scores: Mapping[str, Sequence[np.ndarray]],
    dev_gt: Sequence[np.ndarray],
    beta: float,
    delta: float,
    max_iterations: int = 1000,
) -> GridPoint:
    """Fit at ``(beta, delta)``, fuse the dev set and score its mean IoU."""
    from statfuse.fusion import fuse_dirichlet
    from statfuse.metrics import evaluate_batch

    cfg = RegularizationConfig(beta=beta, delta=delta, max_iterations=max_iterations)
    model, fits = fit_model(calib, cfg)
    ids = list(model.experts)
    preds = []
    for i in range(len(dev_gt)):
        fused = fuse_dirichlet({eid: dev_scores[eid][i] for eid in ids}, model)
        preds.append(fused.labels)
    report = evaluate_batch(preds, list(dev_gt), model.class_set)
    return GridPoint(beta, delta, report.mean_iou, sum(len(f.fallbacks) for f in fits.values()))


def grid_search(
    dev_scores: Mapping[str, Sequence[np.ndarray]],
    dev_gt: Sequence[np.ndarray],
    class_set: ClassSet,
    beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
    delta_grid: Sequence[float] = DEFAULT_DELTA_GRID,
    *,
    calib: Calibration | None = None,
    max_iterations: int = 1000,
) -> GridSearchResult:
    """Pick ``(beta, delta)`` maximising Dirichlet-fusion mean IoU on the dev set.

    Points are scanned beta-major; ties keep the first point scanned.
    """
    if not beta_grid or not delta_grid:
        raise DomainError("grids must be non-empty")
    if not dev_gt:
        raise DomainError("development set is empty")
    if calib is None:
        calib = calibrate(dev_scores, dev_gt, class_set)
    table = []
    best = None
    for beta in beta_grid:
        for delta in delta_grid:
            point = evaluate_grid_point(calib, dev_scores, dev_gt, float(beta), float(delta), max_iterations)
            log.info("grid beta=%g delta=%g mIoU=%.6f", beta, delta, point.mean_iou)
            table.append(point)
            if best is None or point.mean_iou > best.mean_iou:
                best = point
    return GridSearchResult(best.beta, best.delta, table)
