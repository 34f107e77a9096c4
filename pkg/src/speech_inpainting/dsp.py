"""Signal-processing kernel: segmentation, STFT analysis/synthesis,
log-magnitude features, channel normalization, phase reconstruction and
speech-shaped noise.

Time-frequency matrices are stored as ``(frames, bins)`` arrays, 128 x 128.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import soundfile as sf

SAMPLE_RATE = 16000
SEGMENT_LENGTH = 16384  # 1024 ms
WIN_LENGTH = 256
HOP_LENGTH = 128
N_FRAMES = 128
N_BINS = 128
LOG_FLOOR = 1e-9
STD_FLOOR = 1e-6
STATS_FORMAT_VERSION = 1

# Clamp on overlap-add denominators; bounds the gain at the segment edges.
_OLA_FLOOR = 1e-5


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


@dataclass
class LogMagnitude:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_BINS,) or self.std.shape != (N_BINS,):
            raise ContractError("channel stats must hold 128 means and 128 stds")
        if not np.all(self.std > 0):
            raise ContractError("channel std must be strictly positive")

    def save(self, path) -> None:
        payload = {
            "format_version": STATS_FORMAT_VERSION,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path) -> "ChannelStats":
        payload = json.loads(Path(path).read_text())
        version = payload.get("format_version")
        if version != STATS_FORMAT_VERSION:
            raise ContractError(f"unsupported stats format version {version!r}")
        return cls(np.array(payload["mean"]), np.array(payload["std"]))


# --------------------------------------------------------------------------
# audio I/O

def read_wav(path) -> np.ndarray:
    """Read a mono 16 kHz file (WAV or FLAC) as float64 in [-1, 1]."""
    data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    if rate != SAMPLE_RATE:
        raise ContractError(
            f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz "
            "(resample the file first, e.g. with sox or ffmpeg)")
    if data.shape[1] != 1:
        raise ContractError(
            f"{path}: {data.shape[1]} channels, expected mono (downmix first)")
    return data[:, 0]


def write_wav(path, samples: np.ndarray) -> None:
    """Write 16-bit PCM mono WAV at 16 kHz; values are clipped to [-1, 1]."""
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    sf.write(str(path), samples, SAMPLE_RATE, subtype="PCM_16")


def segment(samples: np.ndarray, rate: int = SAMPLE_RATE) -> list[np.ndarray]:
    """Split into consecutive non-overlapping 1024 ms segments.

    The trailing remainder shorter than one segment is dropped.
    """
    if rate != SAMPLE_RATE:
        raise ContractError(f"expected {SAMPLE_RATE} Hz audio, got {rate}")
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples) // SEGMENT_LENGTH
    return [samples[i * SEGMENT_LENGTH:(i + 1) * SEGMENT_LENGTH].copy()
            for i in range(n)]


# --------------------------------------------------------------------------
# STFT

def _frames(samples: np.ndarray) -> np.ndarray:
    padded = np.concatenate([samples, np.zeros(HOP_LENGTH)])
    idx = np.arange(N_FRAMES)[:, None] * HOP_LENGTH + np.arange(WIN_LENGTH)
    return padded[idx]


def stft(seg: np.ndarray) -> np.ndarray:
    """Complex 128x128 spectrogram of a 16384-sample segment.

    The segment is end-padded with one hop of zeros to yield 128 frames,
    and the Nyquist bin is dropped.
    """
    seg = np.asarray(seg, dtype=np.float64)
    if seg.shape != (SEGMENT_LENGTH,):
        raise ContractError(
            f"stft expects {SEGMENT_LENGTH} samples, got shape {seg.shape}")
    spec = np.fft.rfft(_frames(seg) * hann_window(), axis=1)
    return spec[:, :N_BINS]


def _ola_denominator() -> np.ndarray:
    w2 = hann_window() ** 2
    den = np.zeros(SEGMENT_LENGTH + HOP_LENGTH)
    for t in range(N_FRAMES):
        den[t * HOP_LENGTH:t * HOP_LENGTH + WIN_LENGTH] += w2
    return den


_OLA_DEN = _ola_denominator()


def istft_complex(spec: np.ndarray) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`."""
    spec = np.asarray(spec)
    if spec.shape != (N_FRAMES, N_BINS):
        raise ContractError(f"expected 128x128 spectrogram, got {spec.shape}")
    full = np.concatenate([spec, np.zeros((N_FRAMES, 1))], axis=1)
    frames = np.fft.irfft(full, n=WIN_LENGTH, axis=1) * hann_window()
    out = np.zeros(SEGMENT_LENGTH + HOP_LENGTH)
    for t in range(N_FRAMES):
        out[t * HOP_LENGTH:t * HOP_LENGTH + WIN_LENGTH] += frames[t]
    den = _OLA_DEN
    out = out / np.maximum(den, _OLA_FLOOR)
    return out[:SEGMENT_LENGTH]


def istft(mag: LogMagnitude, phase: np.ndarray) -> np.ndarray:
    """Waveform from a denormalized log-magnitude and a phase matrix."""
    if mag.normalized:
        raise ContractError("istft needs a denormalized log-magnitude")
    phase = np.asarray(phase, dtype=np.float64)
    if mag.shape != (N_FRAMES, N_BINS) or phase.shape != (N_FRAMES, N_BINS):
        raise ContractError("istft expects 128x128 magnitude and phase")
    return istft_complex(_to_amplitude(mag.values) * np.exp(1j * phase))


def _to_amplitude(log_values: np.ndarray) -> np.ndarray:
    # log-floor bins map back to exact silence
    amp = np.exp(log_values)
    amp[log_values <= np.log(LOG_FLOOR) + 1e-9] = 0.0
    return amp


def log_magnitude(spec: np.ndarray) -> LogMagnitude:
    return LogMagnitude(np.log(np.maximum(np.abs(spec), LOG_FLOOR)))


def phase(spec: np.ndarray) -> np.ndarray:
    """Angle of each bin, in (-pi, pi]."""
    ph = np.angle(spec)
    ph[ph <= -np.pi] = np.pi
    return ph


def analyze(seg: np.ndarray) -> tuple[LogMagnitude, np.ndarray]:
    spec = stft(seg)
    return log_magnitude(spec), phase(spec)


# --------------------------------------------------------------------------
# normalization

def compute_stats(mags: Iterable[LogMagnitude]) -> ChannelStats:
    """Per-bin mean and population std pooled over every frame of every input."""
    total = np.zeros(N_BINS)
    total_sq = np.zeros(N_BINS)
    count = 0
    shift = None  # first input's channel means, for numerical stability
    for m in mags:
        if m.normalized:
            raise ContractError("compute_stats expects unnormalized inputs")
        if shift is None:
            shift = m.values.mean(axis=0)
        v = m.values - shift
        total += v.sum(axis=0)
        total_sq += (v ** 2).sum(axis=0)
        count += v.shape[0]
    if count == 0:
        raise ContractError("cannot compute stats over an empty corpus")
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return ChannelStats(mean + shift, np.maximum(np.sqrt(var), STD_FLOOR))


def normalize(m: LogMagnitude, stats: ChannelStats) -> LogMagnitude:
    if m.normalized:
        raise ContractError("input is already normalized")
    return LogMagnitude((m.values - stats.mean) / stats.std, normalized=True)


def denormalize(m: LogMagnitude, stats: ChannelStats) -> LogMagnitude:
    if not m.normalized:
        raise ContractError("input is not normalized")
    return LogMagnitude(m.values * stats.std + stats.mean, normalized=False)


# --------------------------------------------------------------------------
# phase reconstruction (local weighted sums)

def spectral_convergence(amp: np.ndarray, spec: np.ndarray) -> float:
    """|| |STFT(ISTFT(spec))| - amp ||_F / ||amp||_F."""
    norm = np.linalg.norm(amp)
    if norm == 0:
        return 0.0
    rebuilt = np.abs(stft(istft_complex(spec)))
    return float(np.linalg.norm(rebuilt - amp) / norm)


def _consistency_kernel(half_width: int) -> np.ndarray:
    """Weights of the STFT(ISTFT(.)) operator restricted to a neighbourhood.

    Returns ``kernel[d + 1, j + half_width]`` for frame offset ``d`` in
    {-1, 0, 1} and bin offset ``j``; interior frames only.
    """
    w = hann_window()
    den = _OLA_DEN[WIN_LENGTH:WIN_LENGTH + HOP_LENGTH]
    synth = w / np.tile(den, WIN_LENGTH // HOP_LENGTH)
    t = np.arange(WIN_LENGTH)
    j = np.arange(-half_width, half_width + 1)
    kernel = np.zeros((3, len(j)), dtype=complex)
    for d in (-1, 0, 1):
        shifted = np.zeros(WIN_LENGTH)
        src = t + d * HOP_LENGTH
        ok = (src >= 0) & (src < WIN_LENGTH)
        shifted[ok] = synth[src[ok]]
        prod = w * shifted
        kernel[d + 1] = (np.exp(-2j * np.pi * np.outer(j, t) / WIN_LENGTH)
                         @ prod) / WIN_LENGTH
    return kernel


def _full_spectrum(half: np.ndarray) -> np.ndarray:
    # 128 kept bins + zero Nyquist -> Hermitian 256-bin spectrum
    nyq = np.zeros((half.shape[0], 1), dtype=complex)
    one_sided = np.concatenate([half, nyq], axis=1)
    return np.concatenate([one_sided, np.conj(one_sided[:, -2:0:-1])], axis=1)


def _vocoder_phase(amp: np.ndarray) -> np.ndarray:
    """Phase-locked vocoder estimate used to start the LWS iterations.

    Each spectral peak's frequency is refined by a parabola through the log
    amplitudes around it; its phase advances by that frequency times the
    hop, and the bins in its region take the peak phase plus pi per bin
    (the linear phase of a window that starts at the frame origin).
    """
    logamp = np.log(np.maximum(amp, LOG_FLOOR))
    bins = np.arange(N_BINS)
    out = np.zeros(amp.shape)
    peak_phase = np.zeros(N_BINS)
    for m in range(amp.shape[0]):
        row = logamp[m]
        inner = (row[1:-1] > row[:-2]) & (row[1:-1] >= row[2:]) & (amp[m, 1:-1] > 0)
        peaks = np.flatnonzero(inner) + 1
        if peaks.size == 0:
            out[m] = out[m - 1] if m else 0.0
            continue
        a, b, c = row[peaks - 1], row[peaks], row[peaks + 1]
        den = a - 2 * b + c
        frac = np.where(den < 0, 0.5 * (a - c) / np.where(den < 0, den, -1.0), 0.0)
        freq = peaks + np.clip(frac, -0.5, 0.5)  # in bins
        # advance per hop: 2*pi*freq*HOP/WIN
        new_peak = peak_phase[peaks] + 2 * np.pi * freq * HOP_LENGTH / WIN_LENGTH
        # regions: nearest peak by bin index
        edges = (peaks[:-1] + peaks[1:]) / 2
        owner = np.searchsorted(edges, bins)
        ph = new_peak[owner] + np.pi * (bins - peaks[owner])
        peak_phase = np.zeros(N_BINS)
        peak_phase[bins] = ph
        out[m] = ph
    return np.angle(np.exp(1j * out))


def reconstruct_phase(mag: LogMagnitude, iterations: int = 100, *,
                      half_width: int = 5, init_phase: np.ndarray | None = None,
                      known: np.ndarray | None = None, seed: int | None = None,
                      history: list | None = None) -> np.ndarray:
    """Estimate a consistent phase field for a denormalized log-magnitude.

    Each sweep replaces the phase of every bin by the phase of the weighted
    sum of its time-frequency neighbours under the (truncated) consistency
    operator, the bin's own contribution excluded. Frames are swept in order
    so that each frame sees already-updated predecessors. A sweep whose
    result is less consistent than the current estimate is replaced by a
    plain projection step, which never increases the inconsistency.

    ``init_phase`` overrides zero-phase initialization (``seed`` draws a
    uniform random one instead). Bins flagged in ``known`` keep their
    initial phase throughout. Without either, iterations start from a
    phase-locked vocoder estimate. ``history``, if given, receives the spectral
    convergence after every iteration.
    """
    if mag.normalized:
        raise ContractError("reconstruct_phase needs a denormalized magnitude")
    amp = _to_amplitude(mag.values)
    if init_phase is not None:
        ph0 = np.asarray(init_phase, dtype=np.float64)
    elif seed is not None:
        ph0 = np.random.default_rng(seed).uniform(-np.pi, np.pi, amp.shape)
    else:
        ph0 = _vocoder_phase(amp)
    fixed = np.zeros(amp.shape, bool) if known is None else np.asarray(known, bool)

    spec = amp * np.exp(1j * ph0)
    if not np.any(amp):
        return phase(spec)
    kernel = _consistency_kernel(half_width)
    kernel[1, half_width] = 0.0  # drop self term
    # bin offsets over the full 256-bin circle
    offs = np.arange(-half_width, half_width + 1)
    signs = (-1.0) ** np.arange(WIN_LENGTH)
    cols = (np.arange(N_BINS)[:, None] - offs[None, :]) % WIN_LENGTH

    err = spectral_convergence(amp, spec)
    for _ in range(iterations):
        cand = spec.copy()
        full = _full_spectrum(cand)
        for m in range(N_FRAMES):
            acc = np.zeros(N_BINS, dtype=complex)
            for d in (-1, 0, 1):
                src = m - d
                if src < 0 or src >= N_FRAMES:
                    continue
                row = full[src] * (signs ** abs(d) if d else 1.0)
                acc += (row[cols] * kernel[d + 1][None, :]).sum(axis=1)
            mag_acc = np.abs(acc)
            upd = (mag_acc > 0) & ~fixed[m]
            new_row = cand[m].copy()
            new_row[upd] = amp[m, upd] * acc[upd] / mag_acc[upd]
            if upd[0]:
                # DC of a real signal is real
                new_row[0] = amp[m, 0] * (1.0 if acc[0].real >= 0 else -1.0)
            cand[m] = new_row
            full[m] = _full_spectrum(new_row[None, :])[0]
        cand_err = spectral_convergence(amp, cand)
        if cand_err > err:
            proj = stft(istft_complex(spec))
            cand = np.where(fixed, spec, amp * np.exp(1j * np.angle(proj)))
            cand_err = spectral_convergence(amp, cand)
            if cand_err > err:
                cand, cand_err = spec, err
        spec, err = cand, cand_err
        if history is not None:
            history.append(err)
    return phase(spec)


# --------------------------------------------------------------------------
# noise synthesis

def speech_shaped_noise_fill(orig: LogMagnitude, valid: np.ndarray,
                             seed: int = 0) -> LogMagnitude:
    """Replace masked bins with the log-magnitude of speech-shaped noise.

    The noise in each frequency channel is complex Gaussian whose expected
    power equals the mean power of that channel in ``orig``.
    """
    if orig.normalized:
        raise ContractError("speech-shaped fill works in the denormalized domain")
    valid = np.asarray(valid, bool)
    if valid.shape != orig.shape:
        raise ContractError("mask and magnitude shapes differ")
    if valid.all():
        return LogMagnitude(orig.values.copy())
    rng = np.random.default_rng(seed)
    power = np.mean(np.exp(2.0 * orig.values), axis=0)
    noise = (rng.standard_normal(orig.shape) + 1j * rng.standard_normal(orig.shape))
    noise *= np.sqrt(power / 2.0)[None, :]
    filled = np.log(np.maximum(np.abs(noise), LOG_FLOOR))
    return LogMagnitude(np.where(valid, orig.values, filled))
