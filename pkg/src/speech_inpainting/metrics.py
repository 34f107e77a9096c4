"""Objective speech metrics: a built-in STOI and pluggable PESQ backends."""
from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.signal import resample_poly

from .dsp import SAMPLE_RATE, ContractError, write_wav

# STOI constants
_FS = 10000
_FRAME = 256
_NFFT = 512
_N_BANDS = 15
_MIN_FREQ = 150.0
_SEG = 30  # frames per intermediate segment (384 ms)
_BETA = -15.0
_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


@dataclass
class ScorePair:
    stoi: float
    pesq: Optional[float] = None


def _third_octave_matrix():
    freqs = np.linspace(0, _FS, _NFFT + 1)[:_NFFT // 2 + 1]
    k = np.arange(_N_BANDS)
    centers = _MIN_FREQ * 2.0 ** (k / 3.0)
    low = _MIN_FREQ * 2.0 ** ((2 * k - 1) / 6.0)
    high = _MIN_FREQ * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((_N_BANDS, len(freqs)))
    for i in range(_N_BANDS):
        lo = int(np.argmin((freqs - low[i]) ** 2))
        hi = int(np.argmin((freqs - high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm, centers


_OBM, _CENTERS = _third_octave_matrix()


def _window():
    return np.hanning(_FRAME + 2)[1:-1]


def _frame_signal(x: np.ndarray, hop: int) -> np.ndarray:
    # frame starts 0, hop, ... strictly below len(x) - FRAME, as in the
    # original MATLAB code (a frame ending exactly at the last sample is skipped)
    n = -(-(len(x) - _FRAME) // hop)
    if n <= 0:
        return np.zeros((0, _FRAME))
    idx = np.arange(n)[:, None] * hop + np.arange(_FRAME)
    return x[idx]


def _remove_silent_frames(x, y):
    """Drop frames more than 40 dB below the loudest reference frame."""
    hop = _FRAME // 2
    w = _window()
    xf = _frame_signal(x, hop) * w
    yf = _frame_signal(y, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy - energy.max() + _DYN_RANGE > 0
    xf, yf = xf[keep], yf[keep]
    n = len(xf)
    length = (n - 1) * hop + _FRAME if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + _FRAME] += xf[i]
        ys[i * hop:i * hop + _FRAME] += yf[i]
    return xs, ys


def _band_envelopes(x):
    frames = _frame_signal(x, _FRAME // 2) * _window()
    spec = np.fft.rfft(frames, n=_NFFT, axis=1)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)  # (bands, frames)


def stoi(reference: np.ndarray, degraded: np.ndarray, rate: int = SAMPLE_RATE) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``reference``.

    Returns 1e-5 when fewer than 30 non-silent frames remain, the same
    convention as the widely used Python implementation.
    """
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(degraded, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"signal lengths differ: {x.shape} vs {y.shape}")
    if rate != _FS:
        g = math.gcd(_FS, rate)
        x = resample_poly(x, _FS // g, rate // g)
        y = resample_poly(y, _FS // g, rate // g)
    x, y = _remove_silent_frames(x, y)
    X = _band_envelopes(x)
    Y = _band_envelopes(y)
    n_frames = X.shape[1]
    if n_frames < _SEG:
        return 1e-5
    # all 30-frame windows ending at frames SEG-1 .. n-1
    idx = np.arange(_SEG - 1, n_frames)[:, None] + np.arange(-_SEG + 1, 1)
    xs = X[:, idx]  # (bands, segments, SEG)
    ys = Y[:, idx]
    norm_x = np.linalg.norm(xs, axis=2, keepdims=True)
    norm_y = np.linalg.norm(ys, axis=2, keepdims=True)
    alpha = norm_x / (norm_y + _EPS)
    clip = 10 ** (-_BETA / 20.0)
    yp = np.minimum(ys * alpha, xs * (1 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + _EPS
    return float(np.mean(np.sum(xc * yc, axis=2)))


# --------------------------------------------------------------------------
# PESQ

class PesqUnavailable(RuntimeError):
    """No PESQ backend is registered."""


PesqBackend = Callable[[np.ndarray, np.ndarray, int], float]


def pesq_package_backend(mode: str = "nb") -> Optional[PesqBackend]:
    """Backend wrapping the ``pesq`` package (ITU-T P.862 reference code).

    Returns None when the package is not installed. Scores are the package's
    native scale: raw P.862 for ``mode='nb'``, P.862.2 MOS-LQO for ``'wb'``.
    """
    try:
        from pesq import pesq as _pesq
    except ImportError:
        return None

    def backend(ref, deg, rate):
        return float(_pesq(rate, ref, deg, mode))

    backend.scale = "P.862.2 MOS-LQO" if mode == "wb" else "P.862 raw"
    return backend


class ExecutableBackend:
    """Run an external PESQ program: ``cmd REF.wav DEG.wav RATE`` -> score on stdout.

    The last whitespace-separated token of stdout is parsed as the score.
    """

    def __init__(self, command, timeout: float = 60.0, scale: str = "unknown"):
        self.command = [command] if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.scale = scale

    def __call__(self, ref, deg, rate):
        with tempfile.TemporaryDirectory() as tmp:
            rp, dp = Path(tmp) / "ref.wav", Path(tmp) / "deg.wav"
            write_wav(rp, ref)
            write_wav(dp, deg)
            out = subprocess.run(self.command + [str(rp), str(dp), str(rate)],
                                 capture_output=True, text=True,
                                 timeout=self.timeout, check=True)
        return float(out.stdout.split()[-1])


_default_backend: Optional[PesqBackend] = None
_default_resolved = False


def default_pesq_backend() -> Optional[PesqBackend]:
    global _default_backend, _default_resolved
    if not _default_resolved:
        _default_backend = pesq_package_backend()
        _default_resolved = True
    return _default_backend


def set_default_pesq_backend(backend: Optional[PesqBackend]) -> None:
    global _default_backend, _default_resolved
    _default_backend, _default_resolved = backend, True


def pesq(reference, degraded, backend: Optional[PesqBackend] = None,
         rate: int = SAMPLE_RATE) -> float:
    """Score with ``backend`` (or the default one); raise PesqUnavailable if none."""
    reference = np.asarray(reference, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if reference.shape != degraded.shape:
        raise ContractError("signal lengths differ")
    backend = backend or default_pesq_backend()
    if backend is None:
        raise PesqUnavailable("no PESQ backend registered")
    score = float(backend(reference, degraded, rate))
    if not math.isfinite(score):
        raise RuntimeError("PESQ backend returned a non-finite score")
    return score
