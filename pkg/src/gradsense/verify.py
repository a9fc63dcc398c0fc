"""Brute-force checks of the combinatorial bound chain.

This is the only module that handles ground-truth per-sample gradients. With
per-sample differences ``d_j = dummy_j - target_j`` the subset discrepancy is
``(1/S^2) ||sum_{j in subset} d_j||^2`` (the complement terms cancel).
"""
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np

from gradsense.objective import adaptive_coefficient, adaptive_coefficient_exact, sample_subset

__all__ = [
    "ENUMERATION_LIMIT",
    "OracleInputs",
    "ChainReport",
    "enumerate_subset_losses",
    "oracle_chain_probe",
    "triangle_step_check",
    "coefficient_identity_check",
    "sampled_subset_mean",
]

ENUMERATION_LIMIT = 12
SLACK = 1e-12


@dataclass
class OracleInputs:
    dummy_grads: np.ndarray
    target_grads: np.ndarray

    def __post_init__(self):
        self.dummy_grads = np.atleast_2d(np.asarray(self.dummy_grads, dtype=np.float64))
        self.target_grads = np.atleast_2d(np.asarray(self.target_grads, dtype=np.float64))
        if self.dummy_grads.shape != self.target_grads.shape:
            raise ValueError(f"shape mismatch: {self.dummy_grads.shape} vs {self.target_grads.shape}")
        if len(self.dummy_grads) > ENUMERATION_LIMIT:
            raise ValueError(f"B={len(self.dummy_grads)} exceeds the enumeration limit {ENUMERATION_LIMIT}")

    @property
    def B(self):
        return len(self.dummy_grads)

    @property
    def differences(self):
        return self.dummy_grads - self.target_grads


@dataclass(frozen=True)
class ChainReport:
    x_tilde: float
    x_tilde_o: float
    x_hat: float
    holds_tilde_le_o: bool
    holds_o_le_hat: bool
    B: int
    S: int


def _check(inputs, S):
    if not 1 <= S <= inputs.B:
        raise ValueError(f"S={S} outside [1, {inputs.B}]")


def _sq(v):
    return float(np.dot(v, v))


def enumerate_subset_losses(inputs, S):
    """Subset discrepancy for every S-subset, in lexicographic order."""
    _check(inputs, S)
    d = inputs.differences
    return [_sq(d[list(c)].sum(axis=0)) / (S * S) for c in combinations(range(inputs.B), S)]


def oracle_chain_probe(inputs, S):
    _check(inputs, S)
    B = inputs.B
    d = inputs.differences
    unnormalised = sum(_sq(d[list(c)].sum(axis=0)) for c in combinations(range(B), S))
    x_tilde = unnormalised / (B * B * math.comb(B, S) * math.comb(B - 1, S - 1))
    x_hat = _sq(inputs.dummy_grads.mean(axis=0) - inputs.target_grads.mean(axis=0))
    x_tilde_o = adaptive_coefficient(B, S) * x_hat
    return ChainReport(
        x_tilde=x_tilde,
        x_tilde_o=x_tilde_o,
        x_hat=x_hat,
        holds_tilde_le_o=x_tilde <= x_tilde_o + SLACK,
        holds_o_le_hat=x_tilde_o <= x_hat + SLACK,
        B=B,
        S=S,
    )


def triangle_step_check(inputs, S):
    """Per subset: ``||sum_sub d||^2 <= 2(||sum_sub dummy - sum_all target||^2 + ||sum_comp target||^2)``."""
    _check(inputs, S)
    dummy, target = inputs.dummy_grads, inputs.target_grads
    d = inputs.differences
    total_target = target.sum(axis=0)
    out = []
    for c in combinations(range(inputs.B), S):
        idx = list(c)
        comp = [j for j in range(inputs.B) if j not in c]
        lhs = _sq(d[idx].sum(axis=0))
        a = _sq(dummy[idx].sum(axis=0) - total_target)
        b = _sq(target[comp].sum(axis=0)) if comp else 0.0
        rhs = 2.0 * (a + b)
        out.append(lhs <= rhs * (1 + SLACK) + SLACK)
    return out


def coefficient_identity_check(B_max=64):
    """Exact check that the adaptive coefficient equals 2/(B S) for 1 <= S <= B <= B_max."""
    if B_max > 64:
        raise ValueError("B_max above 64 is not supported")
    return all(
        adaptive_coefficient_exact(B, S) == Fraction(2, B * S)
        for B in range(1, B_max + 1)
        for S in range(1, B + 1)
    )


def sampled_subset_mean(inputs, S, draws, rng):
    """Monte-Carlo mean of the subset discrepancy under uniform subset sampling."""
    _check(inputs, S)
    d = inputs.differences
    acc = 0.0
    for _ in range(draws):
        idx = list(sample_subset(rng, inputs.B, S).indices)
        acc += _sq(d[idx].sum(axis=0)) / (S * S)
    return acc / draws
