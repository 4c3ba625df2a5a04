"""Synthetic scenes and experts with known generative models.

An expert is described by one Dirichlet concentration vector per
ground-truth class: an element of class ``k`` receives scores drawn from
``Dirichlet(alpha_true[k])``.  Fitted models can therefore be checked
against the generating parameters.

Randomness
----------
All draws use numpy's Philox-4x64-10 counter-based bit generator seeded
through ``numpy.random.SeedSequence``.  Seeds may be an int or a tuple of
ints.  Score maps draw each image row from its own stream,
``SeedSequence(seed, spawn_key=(row,))``, so rows can be generated in any
order or in parallel with identical results.  Dirichlet vectors are sampled
as K independent ``standard_gamma`` draws normalised to the simplex.

Under-confident experts
-----------------------
An expert with ``flat_prob > 0`` replaces each element's scores, with that
probability, by a draw from the symmetric ``Dirichlet(flat_concentration)``
that carries no information about the class.  The per-class Dirichlet
family cannot represent this mixture, so the likelihood fit is misspecified
and a discriminative weight ``beta > 0`` can beat plain maximum likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from statfuse.core import ClassSet
from statfuse.errors import DomainError

PRESETS = ("complementary", "degraded", "sample_stacks")


def make_rng(seed, row: int | None = None) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, tuple) else seed
    ss = np.random.SeedSequence(entropy, spawn_key=() if row is None else (row,))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ExpertSpec:
    id: str
    generative_alphas: np.ndarray
    flat_prob: float = 0.0
    flat_concentration: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.flat_prob <= 1.0:
            raise DomainError("flat_prob must lie in [0, 1]")
        if self.flat_concentration <= 0:
            raise DomainError("flat_concentration must be positive")
        a = np.asarray(self.generative_alphas, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DomainError(f"generative alphas must be K x K, got {a.shape}")
        if not np.all(a > 0):
            raise DomainError("generative alphas must be positive")
        self.generative_alphas = a

    @property
    def num_classes(self) -> int:
        return self.generative_alphas.shape[0]


@dataclass
class SceneSpec:
    height: int
    width: int
    class_frequencies: np.ndarray
    region_size: int = 16
    seed: int | tuple = 0

    def __post_init__(self):
        f = np.asarray(self.class_frequencies, dtype=np.float64)
        if f.ndim != 1 or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
            raise DomainError("class frequencies must be non-negative and sum to 1")
        if self.height <= 0 or self.width <= 0:
            raise DomainError("scene must have positive area")
        if self.region_size <= 0:
            raise DomainError("region size must be positive")
        self.class_frequencies = f


def generate_scene(spec: SceneSpec) -> np.ndarray:
    """Tile the image with square regions, each of one randomly drawn class."""
    r = spec.region_size
    rows, cols = -(-spec.height // r), -(-spec.width // r)
    rng = make_rng(spec.seed)
    regions = rng.choice(spec.class_frequencies.size, size=(rows, cols), p=spec.class_frequencies)
    full = np.repeat(np.repeat(regions, r, axis=0), r, axis=1)
    return full[: spec.height, : spec.width].astype(np.int64)


def _dirichlet_rows(rng, alphas):
    g = rng.standard_gamma(alphas)
    total = g.sum(axis=-1, keepdims=True)
    dead = total[..., 0] <= 0
    if dead.any():  # every gamma draw underflowed; put the mass on the largest alpha
        g[dead] = np.eye(alphas.shape[-1])[np.argmax(alphas[dead], axis=-1)]
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def simulate_expert(gt, spec: ExpertSpec, seed) -> np.ndarray:
    """Score map ``(H, W, K)`` with ``y ~ Dirichlet(alpha_true[gt])`` per element."""
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise DomainError("ground truth must be an (H, W) label map")
    k = spec.num_classes
    if gt.size and (gt.min() < 0 or gt.max() >= k):
        raise DomainError(f"labels must lie in 0..{k - 1}")
    out = np.empty(gt.shape + (k,))
    flat = np.full((gt.shape[1], k), spec.flat_concentration)
    for row in range(gt.shape[0]):
        rng = make_rng(seed, row)
        out[row] = _dirichlet_rows(rng, spec.generative_alphas[gt[row]])
        if spec.flat_prob > 0:
            hit = rng.random(gt.shape[1]) < spec.flat_prob
            out[row, hit] = _dirichlet_rows(rng, flat)[hit]
    return out


def simulate_samples(gt, spec: ExpertSpec, seed, samples: int, concentration: float) -> np.ndarray:
    """Monte-Carlo stack ``(T, H, W, K)`` around a per-element mean score.

    The mean is drawn as in :func:`simulate_expert`; each of the ``samples``
    draws is ``Dirichlet(concentration * mean + 1e-3)``, so a larger
    concentration means less spread between samples.
    """
    if samples < 2:
        raise DomainError("need at least two samples per element")
    if concentration <= 0:
        raise DomainError("concentration must be positive")
    gt = np.asarray(gt)
    mean = simulate_expert(gt, spec, seed)
    out = np.empty((samples,) + mean.shape)
    for row in range(gt.shape[0]):
        rng = make_rng(seed, gt.shape[0] + row)
        a = concentration * mean[row] + 1e-3
        out[:, row] = _dirichlet_rows(rng, np.broadcast_to(a, (samples,) + a.shape))
    return out


# ---------------------------------------------------------------------------
# presets


def sharp_alphas(k: int, sharpness: float) -> np.ndarray:
    """``1 + sharpness`` on the true class, 1 elsewhere."""
    return np.ones((k, k)) + sharpness * np.eye(k)


def confused_alphas(k: int, sharpness: float, confused, shared: float, tilt: float) -> np.ndarray:
    """Sharp everywhere except a group of classes that share their mass.

    For a ground-truth class inside ``confused`` every member of the group
    receives ``shared`` extra concentration and the true class an extra
    ``tilt``; the expert can barely tell the group apart.
    """
    a = sharp_alphas(k, sharpness)
    group = list(confused)
    for c in group:
        a[c] = 1.0
        a[c, group] += shared
        a[c, c] += tilt
    return a


@dataclass
class Scenario:
    class_set: ClassSet
    experts: list[ExpertSpec]
    dev_gt: list[np.ndarray]
    dev_scores: dict[str, list[np.ndarray]]
    test_gt: list[np.ndarray]
    test_scores: dict[str, list[np.ndarray]]
    test_samples: dict[str, list[np.ndarray]] = field(default_factory=dict)
    sample_concentration: dict[str, float] = field(default_factory=dict)


def preset_experts(preset: str, k: int = 6, sharpness: float = 6.0, flat_prob: float = 0.0) -> list[ExpertSpec]:
    """Expert pair for a named preset.

    ``complementary`` (and ``sample_stacks``): A confuses classes {0, 1},
    B confuses {2, 3}, both sharp elsewhere.  ``degraded``: A sharp on every
    class, B nearly uniform.  ``flat_prob`` makes both experts under-confident
    (see the module notes).
    """
    if k < 4:
        raise DomainError("presets need at least four classes")
    if preset in ("complementary", "sample_stacks"):
        shared = 0.7 * sharpness
        return [
            ExpertSpec("A", confused_alphas(k, sharpness, (0, 1), shared, 1.0), flat_prob),
            ExpertSpec("B", confused_alphas(k, sharpness, (2, 3), shared, 1.0), flat_prob),
        ]
    if preset == "degraded":
        return [
            ExpertSpec("A", sharp_alphas(k, sharpness), flat_prob),
            ExpertSpec("B", sharp_alphas(k, 0.1), flat_prob),
        ]
    raise DomainError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


def build_scenario(
    preset: str,
    seed: int,
    *,
    num_classes: int = 6,
    height: int = 512,
    width: int = 512,
    region_size: int = 16,
    dev_images: int = 1,
    test_images: int = 1,
    sharpness: float = 6.0,
    samples: int = 0,
    flat_prob: float = 0.0,
    experts: list[ExpertSpec] | None = None,
) -> Scenario:
    """Generate dev and test splits for a preset, deterministic in ``seed``."""
    specs = experts if experts is not None else preset_experts(preset, num_classes, sharpness, flat_prob)
    k = specs[0].num_classes
    freqs = np.full(k, 1.0 / k)
    if preset == "sample_stacks" and samples < 2:
        samples = 8
    conc = {spec.id: 40.0 / (1 + i) for i, spec in enumerate(specs)}

    def split(tag, n):
        gts = [generate_scene(SceneSpec(height, width, freqs, region_size, (seed, 0, tag, i))) for i in range(n)]
        scores = {
            spec.id: [simulate_expert(g, spec, (seed, 1, tag, i, e)) for i, g in enumerate(gts)]
            for e, spec in enumerate(specs)
        }
        return gts, scores

    dev_gt, dev_scores = split(0, dev_images)
    test_gt, test_scores = split(1, test_images)
    stacks = {}
    if samples >= 2:
        stacks = {
            spec.id: [simulate_samples(g, spec, (seed, 2, 1, i, e), samples, conc[spec.id]) for i, g in enumerate(test_gt)]
            for e, spec in enumerate(specs)
        }
    return Scenario(
        ClassSet.generic(k),
        specs,
        dev_gt,
        dev_scores,
        test_gt,
        test_scores,
        stacks,
        conc if stacks else {},
    )
