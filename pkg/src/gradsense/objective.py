"""Gradient-matching objectives, subset schedules and the TV prior."""
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from gradsense import autodiff as ad
from gradsense.victim import TargetGradient, batch_mean_gradient

__all__ = [
    "STRATEGIES",
    "SubsetIndexSet",
    "ScheduleSpec",
    "MixParams",
    "adaptive_coefficient",
    "adaptive_coefficient_exact",
    "schedule_subset_size",
    "sample_subset",
    "dlg_loss",
    "subset_loss",
    "tv_prior",
    "magia_total",
    "dlg_total",
    "TV_EPS",
]

STRATEGIES = ("constant", "frac_total", "frac_const", "rev_total", "rev_const")
TV_EPS = 1e-8


@dataclass(frozen=True)
class SubsetIndexSet:
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx or any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0:
            raise ValueError(f"subset indices must be non-empty, nonnegative and strictly increasing: {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def size(self):
        return len(self.indices)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class ScheduleSpec:
    strategy: str = "constant"
    constant_S: int = 2
    E_script: int = 300
    total_iters: int = 300

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; allowed: {', '.join(STRATEGIES)}")
        if self.strategy == "constant" and self.constant_S < 1:
            raise ValueError("constant strategy needs constant_S >= 1")
        if self.strategy in ("frac_const", "rev_const") and self.E_script <= 0:
            raise ValueError("E_script must be positive")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")

    def validate_for(self, B):
        if self.strategy == "constant" and not 0 < self.constant_S <= B:
            raise ValueError(f"constant_S={self.constant_S} outside (0, {B}]")

    @property
    def param(self):
        """The strategy's free parameter (S or E_script), None for the E-tied ones."""
        if self.strategy == "constant":
            return self.constant_S
        if self.strategy in ("frac_const", "rev_const"):
            return self.E_script
        return None


@dataclass(frozen=True)
class MixParams:
    alpha: float = 0.999
    tv_weight: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tv_weight < 0:
            raise ValueError(f"tv_weight must be nonnegative, got {self.tv_weight}")


def _check_range(B, S):
    if not (isinstance(B, (int, np.integer)) and isinstance(S, (int, np.integer))):
        raise TypeError("B and S must be integers")
    if not 1 <= S <= B:
        raise ValueError(f"subset size S={S} outside [1, B={B}]")


def adaptive_coefficient_exact(B, S):
    """``2 C(B-1, S-1) / (C(B, S) S^2)`` as an exact Fraction."""
    _check_range(B, S)
    return Fraction(2 * math.comb(B - 1, S - 1), math.comb(B, S) * S * S)


def adaptive_coefficient(B, S):
    if B > 10_000:
        raise ValueError("B above 10^4 is not supported")
    return float(adaptive_coefficient_exact(B, S))


def _ceil_div(a, b):
    return -(-a // b)


def schedule_subset_size(spec, e, B):
    """Subset size at iteration ``e``, clamped to [1, B].

    Ceilings are taken on exact rationals so e.g. ``ceil(40 * 300/300)`` never
    rounds up to 41.
    """
    if not 0 <= e < spec.total_iters:
        raise ValueError(f"iteration {e} outside [0, {spec.total_iters})")
    if spec.strategy == "constant":
        S = spec.constant_S
    elif spec.strategy == "frac_total":
        S = _ceil_div(B * (e + 1), spec.total_iters)
    elif spec.strategy == "frac_const":
        S = _ceil_div(B * (e + 1), spec.E_script)
    elif spec.strategy == "rev_total":
        S = _ceil_div(B * (spec.total_iters - e), spec.total_iters)
    else:
        S = _ceil_div(B * (spec.E_script - e), spec.E_script)
    return int(min(max(S, 1), B))


def sample_subset(rng, B, S):
    """Uniform S-subset of range(B) without replacement."""
    _check_range(B, S)
    if S == B:
        return SubsetIndexSet(tuple(range(B)))
    return SubsetIndexSet(tuple(sorted(rng.choice(B, size=S, replace=False).tolist())))


def _target(g_star):
    return g_star.g_star if isinstance(g_star, TargetGradient) else np.asarray(g_star, dtype=np.float64)


def dlg_loss(dummy_mean_grad, g_star):
    """Squared Euclidean distance between a dummy gradient and the target."""
    target = _target(g_star)
    dummy = ad.as_node(dummy_mean_grad)
    if dummy.shape != target.shape:
        raise ValueError(f"gradient length mismatch: {dummy.shape} vs {target.shape}")
    diff = ad.sub(dummy, target)
    return ad.sum(ad.mul(diff, diff))


def _dummy_labels(dummy_batch):
    return ad.softmax(dummy_batch.label_logits)


def subset_loss(model, dummy_batch, subset, g_star):
    """Mean dummy gradient over ``subset`` matched against the full-batch target."""
    idx = np.asarray(subset.indices)
    B = dummy_batch.images.shape[0]
    if idx[-1] >= B:
        raise ValueError(f"subset index {idx[-1]} out of range for batch of {B}")
    images = ad.getitem(dummy_batch.images, idx)
    labels = ad.getitem(_dummy_labels(dummy_batch), idx)
    grad = batch_mean_gradient(model, images, labels, create_graph=True)
    return dlg_loss(grad, g_star)


def tv_prior(images):
    """Smoothed isotropic total variation, summed over images and channels.

    Each pixel with at least one forward neighbour contributes
    ``sqrt(dh^2 + dv^2 + eps)``; a missing neighbour difference counts as 0.
    """
    x = ad.as_node(images)
    if x.ndim == 2:
        x = ad.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"tv_prior needs at least 2x2 images, got {h}x{w}")

    def site(*terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.sum(ad.power(ad.add(acc, TV_EPS), 0.5))

    def sq(a):
        return ad.mul(a, a)

    e = Ellipsis
    dh_in = ad.sub(x[e, :-1, 1:], x[e, :-1, :-1])
    dv_in = ad.sub(x[e, 1:, :-1], x[e, :-1, :-1])
    interior = site(sq(dh_in), sq(dv_in))
    # last column: vertical differences only; last row: horizontal only
    right = site(sq(ad.sub(x[e, 1:, -1:], x[e, :-1, -1:])))
    bottom = site(sq(ad.sub(x[e, -1:, 1:], x[e, -1:, :-1])))
    return ad.add(ad.add(interior, right), bottom)


def magia_total(model, dummy_batch, subset, g_star, mix, S=None, B=None):
    """``coef(B, S) * (alpha * full + (1 - alpha) * subset) + tv_weight * TV``."""
    B = dummy_batch.images.shape[0] if B is None else B
    S = subset.size if S is None else S
    labels = _dummy_labels(dummy_batch)
    full = dlg_loss(batch_mean_gradient(model, dummy_batch.images, labels, create_graph=True), g_star)
    local = subset_loss(model, dummy_batch, subset, g_star)
    mixed = ad.add(ad.scale(full, mix.alpha), ad.scale(local, 1.0 - mix.alpha))
    total = ad.scale(mixed, adaptive_coefficient(B, S))
    return ad.add(total, ad.scale(tv_prior(dummy_batch.images), mix.tv_weight))


def dlg_total(model, dummy_batch, g_star, tv_weight=0.0):
    labels = _dummy_labels(dummy_batch)
    full = dlg_loss(batch_mean_gradient(model, dummy_batch.images, labels, create_graph=True), g_star)
    return ad.add(full, ad.scale(tv_prior(dummy_batch.images), tv_weight))
