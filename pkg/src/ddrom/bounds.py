"""Probabilistic error bounds for a Gaussian range finder with oversampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SketchBounds:
    expected: float  # bound on E||(I - P_Y) A||
    tail: float  # bound holding with probability >= 1 - failure_probability
    failure_probability: float
    sigma_next: float  # sigma_{k+1}
    tail_mass: float  # (sum_{j>k} sigma_j^2)^{1/2}


def expected_bound(singular_values, k: int, p: int) -> float:
    """(1 + sqrt(k/(p-1))) s_{k+1} + e sqrt(k+p)/p * (sum_{j>k} s_j^2)^{1/2}."""
    if k < 2 or p < 2:
        raise ValueError("expected bound needs k >= 2 and p >= 2")
    s_next, mass = _tail(singular_values, k)
    return (1.0 + math.sqrt(k / (p - 1))) * s_next + math.e * math.sqrt(k + p) / p * mass


def tail_bound(singular_values, k: int, p: int, t: float, u: float) -> float:
    if k < 2 or p < 4:
        raise ValueError("tail bound needs k >= 2 and p >= 4")
    if t < 1 or u < 1:
        raise ValueError("tail bound needs t >= 1 and u >= 1")
    s_next, mass = _tail(singular_values, k)
    c = math.e * math.sqrt(k + p) / (p + 1)
    return (1.0 + t * math.sqrt(3.0 * k / (p + 1))) * s_next + t * c * mass + u * t * c * s_next


def failure_probability(p: int, t: float, u: float) -> float:
    """2 t^{-p} + exp(-u^2/2)."""
    if p < 4 or t < 1 or u < 1:
        raise ValueError("failure probability needs p >= 4, t >= 1 and u >= 1")
    return 2.0 * t ** (-p) + math.exp(-0.5 * u * u)


def _tail(singular_values, k: int):
    s = np.sort(np.asarray(singular_values, dtype=float))[::-1]
    if (s < 0).any():
        raise ValueError("singular values must be non-negative")
    rest = s[k:]
    s_next = float(rest[0]) if rest.size else 0.0
    return s_next, float(np.sqrt(np.sum(rest**2)))


def evaluate_hmt_bounds(singular_values, k: int, p: int, t: float = 2.0, u: float = 5.0) -> SketchBounds:
    s_next, mass = _tail(singular_values, k)
    return SketchBounds(
        expected=expected_bound(singular_values, k, p),
        tail=tail_bound(singular_values, k, p, t, u),
        failure_probability=failure_probability(p, t, u),
        sigma_next=s_next,
        tail_mass=mass,
    )
