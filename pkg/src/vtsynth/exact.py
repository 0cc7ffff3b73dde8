"""Exact rational arithmetic shared by the symbolic encoding and exact replay.

Floats enter the solver as the rational value of their shortest round-trip
decimal representation, so the number the solver reasons about is exactly the
number printed in model files and reports. The exact replay below re-runs the
noise-free loop recurrences in Fractions to settle stealth verdicts whose
floating-point margin is too small to trust.
"""

from __future__ import annotations

from decimal import Decimal
from fractions import Fraction

import numpy as np


def frac(x) -> Fraction:
    """Exact rational from a float/str via its decimal representation."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(Decimal(x))
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(Decimal(repr(float(x))))


def frac_matrix(m) -> list[list[Fraction]]:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return [[frac(v) for v in row] for row in m]


def frac_vector(v) -> list[Fraction]:
    return [frac(x) for x in np.asarray(v, dtype=float).reshape(-1)]


def mat_vec(m: list[list[Fraction]], v: list[Fraction]) -> list[Fraction]:
    return [sum((mij * vj for mij, vj in zip(row, v)), Fraction(0)) for row in m]


def vec_add(*vecs) -> list[Fraction]:
    return [sum(items, Fraction(0)) for items in zip(*vecs)]


def vec_sub(a, b) -> list[Fraction]:
    return [ai - bi for ai, bi in zip(a, b)]


def vec_neg(a) -> list[Fraction]:
    return [-ai for ai in a]


def exact_loop_trace(A, B, C, D, L, K, x1, attack, T: int):
    """Noise-free closed-loop recurrences in exact rationals.

    `attack` is a (T, m) array; x1 a length-n vector. Returns dict with lists
    of Fraction vectors for x, x_hat, u, y, z (index j = step j + 1).
    """
    Af, Bf, Cf, Df = frac_matrix(A), frac_matrix(B), frac_matrix(C), frac_matrix(D)
    Lf, Kf = frac_matrix(L), frac_matrix(K)
    n = len(Af)
    p = len(Bf[0])
    atk = np.atleast_2d(np.asarray(attack, dtype=float))
    x = frac_vector(x1)
    xh = [Fraction(0)] * n
    u = [Fraction(0)] * p
    out = {"x": [], "x_hat": [], "u": [], "y": [], "z": []}
    for j in range(T):
        a_k = frac_vector(atk[j])
        y_k = vec_add(mat_vec(Cf, x), mat_vec(Df, u), a_k)
        z_k = vec_sub(y_k, vec_add(mat_vec(Cf, xh), mat_vec(Df, u)))
        out["x"].append(x)
        out["x_hat"].append(xh)
        out["u"].append(u)
        out["y"].append(y_k)
        out["z"].append(z_k)
        x = vec_add(mat_vec(Af, x), mat_vec(Bf, u))
        xh = vec_add(mat_vec(Af, xh), mat_vec(Bf, u), mat_vec(Lf, z_k))
        u = vec_neg(mat_vec(Kf, xh))
    return out


def exact_norm(vec: list[Fraction], kind: str) -> Fraction:
    """Exact inf- or 1-norm of a Fraction vector (2-norm has no exact form)."""
    absolutes = [v if v >= 0 else -v for v in vec]
    if kind == "inf":
        return max(absolutes)
    if kind == "one":
        return sum(absolutes, Fraction(0))
    raise ValueError(f"no exact evaluation for norm {kind!r}")
