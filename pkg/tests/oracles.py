"""Independent reference implementations used as test oracles.

Written in plain Python (exact rationals, Decimal, explicit loops) without
calling the package code they check.
"""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np


def ternary_oracle(values) -> tuple[list[int], float]:
    flat = [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]
    n = len(flat)
    total = sum((Fraction(abs(v)) for v in flat), Fraction(0))
    delta = 0.7 * (float(total) / n)
    codes = []
    kept = []
    for v in flat:
        if abs(v) > delta:
            codes.append(1 if v > 0 else -1)
            kept.append(abs(v))
        else:
            codes.append(0)
    if not kept:
        return codes, 0.0
    return codes, float(sum((Fraction(k) for k in kept), Fraction(0))) / len(kept)


def _round_half_up(d: Decimal) -> int:
    # Decimal's ROUND_HALF_UP rounds ties away from zero
    return int(d.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def kbit_weight_oracle(values, bits: int) -> list[int]:
    s = 2 ** (bits - 1) - 1
    out = []
    for v in np.asarray(values, dtype=np.float64).ravel():
        c = min(max(Decimal(float(v)), Decimal(-1)), Decimal(1))
        out.append(_round_half_up(c * s))
    return out


def kbit_act_oracle(values, bits: int) -> list[int]:
    s = 2 ** bits - 1
    out = []
    for v in np.asarray(values, dtype=np.float64).ravel():
        c = min(max(Decimal(float(v)), Decimal(0)), Decimal(1))
        out.append(_round_half_up(c * s))
    return out


def conv2d_loops(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Six nested loops, cross-correlation, float64 accumulation."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r, q = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += float(x[b, ch, r, q]) * float(w[o, ch, di, dj])
                    out[b, o, i, j] = acc
    return out


def softmax_row(z) -> list[float]:
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cross_entropy_rows(target, pred) -> float:
    total = 0.0
    for t_row, p_row in zip(target, pred):
        total -= sum(t * math.log(min(max(p, 1e-12), 1.0)) for t, p in zip(t_row, p_row))
    return total / len(target)


def apprentice_loss_oracle(y, z_t, z_a, alpha, beta, gamma, tau) -> float:
    """alpha*H(y, pT) + beta*H(y, pA) + gamma*H(softmax(zT/tau), pA), batch mean."""
    p_t = [softmax_row(r) for r in z_t]
    p_a = [softmax_row(r) for r in z_a]
    soft = [softmax_row([v / tau for v in r]) for r in z_t]
    return (alpha * cross_entropy_rows(y, p_t) + beta * cross_entropy_rows(y, p_a)
            + gamma * cross_entropy_rows(soft, p_a))


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def footprint_oracle(rows, weight_bits, batch: int, act_bits: int = 32) -> float:
    """Bytes = largest input map + largest output map + all weights."""
    ifm = max(r[0] for r in rows) * batch * act_bits / 8
    ofm = max(r[1] for r in rows) * batch * act_bits / 8
    weights = sum(r[2] * b / 8 for r, b in zip(rows, weight_bits))
    return ifm + ofm + weights
