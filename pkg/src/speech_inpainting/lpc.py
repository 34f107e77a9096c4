"""Time-domain gap restoration by forward/backward LPC extrapolation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dsp import ContractError
from .masks import Mask, mask_to_time_gaps

log = logging.getLogger(__name__)

# reflection coefficients are clamped to keep the predictor strictly stable
_MAX_REFLECTION = 1.0 - 1e-9
_PEAK_GUARD = 10.0
_ERR_FLOOR = 1e-12


@dataclass(frozen=True)
class LpcConfig:
    order: int = 32
    context: int = 1024
    method: str = "covariance"
    # None: crossfade over the whole gap
    crossfade: int | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ContractError("LPC order must be positive")
        if self.order >= self.context:
            raise ContractError("LPC order must be smaller than the context length")


def levinson_durbin(r: np.ndarray, order: int) -> tuple[np.ndarray, float]:
    """Solve the Yule-Walker equations; returns (a, prediction error power).

    ``a[0] == 1`` and the predictor is ``x[n] ~ -sum(a[1:] * x[n-1::-1])``.
    """
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = float(r[0])
    floor = _ERR_FLOOR * err
    for i in range(1, order + 1):
        if err <= floor:
            # already a perfect predictor; higher orders only add round-off
            break
        k = -(r[i] + np.dot(a[1:i], r[i - 1:0:-1])) / err
        k = float(np.clip(k, -_MAX_REFLECTION, _MAX_REFLECTION))
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= 1.0 - k * k
    return a, err


def _burg(x: np.ndarray, order: int) -> np.ndarray:
    f = x.copy()
    b = x.copy()
    a = np.zeros(order + 1)
    a[0] = 1.0
    energy = float(np.dot(x, x))
    err = energy / len(x)
    for m in range(order):
        ff, bb = f[m + 1:], b[m:-1]
        den = np.dot(ff, ff) + np.dot(bb, bb)
        if den <= 0 or err <= _ERR_FLOOR * energy / len(x):
            break
        k = float(np.clip(-2.0 * np.dot(ff, bb) / den, -_MAX_REFLECTION, _MAX_REFLECTION))
        a[1:m + 2] = a[1:m + 2] + k * a[m::-1]
        f[m + 1:], b[m + 1:] = ff + k * bb, bb + k * ff
        err *= 1.0 - k * k
    return a


def _stabilize(a: np.ndarray) -> np.ndarray:
    """Reflect poles outside the unit circle inward and cap every radius below 1."""
    roots = np.roots(a)
    radius = np.abs(roots)
    if np.all(radius <= _MAX_REFLECTION):
        return a
    roots = np.where(radius > 1.0, 1.0 / np.conj(roots), roots)
    radius = np.abs(roots)
    roots = np.where(radius > _MAX_REFLECTION, roots / radius * _MAX_REFLECTION, roots)
    return np.real(np.poly(roots))


def _covariance(x: np.ndarray, order: int) -> np.ndarray:
    # least-squares one-step predictor over the whole context, no windowing
    rows = np.column_stack([x[order - k - 1:len(x) - k - 1] for k in range(order)])
    coef, *_ = np.linalg.lstsq(rows, x[order:], rcond=None)
    return _stabilize(np.concatenate([[1.0], -coef]))


def fit_lpc(context: np.ndarray, order: int,
            method: str = "covariance") -> tuple[np.ndarray, bool]:
    """Fit an all-pole predictor to ``context``.

    ``method`` is ``"covariance"`` (default: unwindowed least squares, with
    poles moved inside the unit circle when needed), ``"burg"`` or
    ``"autocorrelation"`` (Hann-windowed Yule-Walker via Levinson-Durbin).
    Every method returns a stable predictor. Returns ``(a, ok)``; ``ok`` is
    False for an all-zero context, in which case ``a`` is the trivial zero
    predictor.
    """
    x = np.asarray(context, dtype=np.float64)
    if len(x) <= order:
        raise ContractError(f"context of {len(x)} samples is too short for order {order}")
    a = np.zeros(order + 1)
    a[0] = 1.0
    if not np.any(x):
        return a, False
    if method == "covariance":
        return _covariance(x, order), True
    if method == "burg":
        return _burg(x, order), True
    if method != "autocorrelation":
        raise ContractError(f"unknown LPC method {method!r}")
    xw = x * np.hanning(len(x))
    full = np.correlate(xw, xw, mode="full")
    r = full[len(x) - 1:len(x) + order]
    a, _ = levinson_durbin(r, order)
    return a, True


def predict(history: np.ndarray, a: np.ndarray, n: int) -> np.ndarray:
    """Run the predictor ``n`` steps past the end of ``history``."""
    order = len(a) - 1
    buf = np.zeros(order + n)
    h = np.asarray(history, dtype=np.float64)[-order:]
    buf[order - len(h):order] = h
    coef = -a[1:][::-1]
    for i in range(n):
        buf[order + i] = np.dot(coef, buf[i:i + order])
    return buf[order:]


def prediction_error(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """One-step prediction residual over ``x`` (first ``order`` samples skipped)."""
    order = len(a) - 1
    x = np.asarray(x, dtype=np.float64)
    pred = -np.convolve(x, a[1:], mode="full")[order - 1:len(x) - 1]
    return x[order:] - pred


def _raised_cosine(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(np.pi * (np.arange(n) + 0.5) / n)


def extrapolate_gap(w: np.ndarray, gap: tuple[int, int], cfg: LpcConfig = LpcConfig(),
                    *, right_limit: int | None = None) -> np.ndarray:
    """Fill ``w[start:end]`` from its surroundings; other samples are untouched.

    ``right_limit`` bounds the right context (e.g. the start of the next gap).
    """
    w = np.asarray(w, dtype=np.float64)
    start, end = gap
    if not 0 <= start <= end <= len(w):
        raise ContractError(f"gap {gap} outside signal of length {len(w)}")
    out = w.copy()
    n = end - start
    if n == 0:
        return out
    right_limit = len(w) if right_limit is None else right_limit
    left = w[max(0, start - cfg.context):start]
    right = w[end:min(right_limit, end + cfg.context)]
    min_ctx = 2 * cfg.order + 1
    fwd = bwd = None
    if len(left) >= min_ctx:
        a, ok = fit_lpc(left, cfg.order, cfg.method)
        fwd = predict(left, a, n) if ok else np.zeros(n)
    if len(right) >= min_ctx:
        rev = right[::-1]
        a, ok = fit_lpc(rev, cfg.order, cfg.method)
        bwd = (predict(rev, a, n) if ok else np.zeros(n))[::-1]
    if fwd is None and bwd is None:
        raise ContractError(f"gap {gap} has too little context on both sides")
    if fwd is None:
        fill = bwd
    elif bwd is None:
        fill = fwd
    else:
        fade = n if cfg.crossfade is None else min(cfg.crossfade, n)
        ramp = np.zeros(n)
        lo = (n - fade) // 2
        ramp[lo:lo + fade] = _raised_cosine(fade)
        ramp[lo + fade:] = 1.0
        fill = (1.0 - ramp) * fwd + ramp * bwd
    peak = np.max(np.abs(np.concatenate([left, right]))) if len(left) + len(right) else 0.0
    limit = _PEAK_GUARD * peak
    fill = np.clip(np.nan_to_num(fill, nan=0.0, posinf=limit, neginf=-limit), -limit, limit)
    out[start:end] = fill
    return out


def inpaint_gaps(w: np.ndarray, gaps, cfg: LpcConfig = LpcConfig()) -> np.ndarray:
    """Zero every gap, then restore them one by one in ascending order."""
    out = np.asarray(w, dtype=np.float64).copy()
    gaps = sorted(gaps)
    for a, b in gaps:
        out[a:b] = 0.0
    for i, gap in enumerate(gaps):
        limit = gaps[i + 1][0] if i + 1 < len(gaps) else len(out)
        out = extrapolate_gap(out, gap, cfg, right_limit=limit)
    return out


def inpaint_time_masks(w: np.ndarray, mask: Mask, cfg: LpcConfig = LpcConfig()) -> np.ndarray:
    """Restore the time gaps of a Time or TimeFreq mask (frequency blocks ignored)."""
    return inpaint_gaps(w, mask_to_time_gaps(mask), cfg)
