"""Parametric time-frequency masks and the fills applied under them.

Masks are ``(frames, bins)`` boolean arrays with ``True`` marking valid bins.
A "time" block removes whole frames, a "frequency" block whole bins.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import (HOP_LENGTH, LOG_FLOOR, N_BINS, N_FRAMES, ChannelStats,
                  ContractError, LogMagnitude, denormalize, normalize,
                  speech_shaped_noise_fill)

MIN_BLOCK = 3
MAX_BLOCKS = 4
MAX_COVERAGE = 0.6
EVAL_SIZES = (0.10, 0.20, 0.30, 0.40)
RANDOM_AREA_TOLERANCE = 0.02
MASK_FORMAT_VERSION = 1


class MaskKind(enum.Enum):
    TIME = "Time"
    TIME_FREQ = "TimeFreq"
    RANDOM = "Random"


class FillMode(enum.Enum):
    ZEROS = "Zeros"
    WHITE_NOISE = "WhiteNoise"
    ADDITIVE_NOISE = "AdditiveNoise"
    SPEECH_SHAPED = "SpeechShaped"


class UnsupportedMaskError(ContractError):
    """The operation has no meaning for this mask kind."""


@dataclass(frozen=True)
class MaskSpec:
    kind: MaskKind
    coverage: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        if not 0.0 <= self.coverage <= MAX_COVERAGE:
            raise ContractError(
                f"coverage {self.coverage} outside [0, {MAX_COVERAGE}]")


@dataclass
class Mask:
    valid: np.ndarray
    spec: MaskSpec
    # (frame_start, frame_end, bin_start, bin_end) per block, half-open
    blocks: list = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return float(1.0 - self.valid.mean())

    def time_blocks(self) -> list[tuple[int, int]]:
        """Runs of frames in which every bin is masked."""
        return _runs(~self.valid.any(axis=1))

    def freq_blocks(self) -> list[tuple[int, int]]:
        """Runs of bins masked in every frame."""
        return _runs(~self.valid.any(axis=0))

    def save(self, path) -> None:
        lines = [f"# speech-inpainting mask v{MASK_FORMAT_VERSION}",
                 f"kind={self.spec.kind.value}",
                 f"coverage={self.spec.coverage!r}",
                 f"seed={self.spec.seed}"]
        lines += ["".join("1" if v else "0" for v in row) for row in self.valid]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Mask":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# speech-inpainting mask v"):
            raise ContractError(f"{path}: not a mask file")
        version = int(lines[0].rsplit("v", 1)[1])
        if version != MASK_FORMAT_VERSION:
            raise ContractError(f"{path}: unsupported mask format version {version}")
        header = dict(line.split("=", 1) for line in lines[1:4])
        rows = lines[4:4 + N_FRAMES]
        valid = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
        if valid.shape != (N_FRAMES, N_BINS):
            raise ContractError(f"{path}: mask body is not 128x128")
        spec = MaskSpec(MaskKind(header["kind"]), float(header["coverage"]),
                        int(header["seed"]))
        return cls(valid, spec)


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], flags, [False]]).astype(int)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def _composition(rng, total: int, parts: int) -> np.ndarray:
    """Uniform random composition of ``total`` into ``parts`` non-negative ints."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total + parts - 1, parts - 1, replace=False))
    bounds = np.concatenate([[-1], cuts, [total + parts - 1]])
    return np.diff(bounds) - 1


def _sample_blocks_1d(rng, masked: int, length: int = N_FRAMES) -> list[tuple[int, int]]:
    """1-4 disjoint, non-adjacent blocks of >= 3 bins totalling ``masked``."""
    if masked <= 0:
        return []
    masked = max(masked, MIN_BLOCK)
    max_blocks = min(MAX_BLOCKS, masked // MIN_BLOCK,
                     (length - masked) + 1)  # room for separators
    n_blocks = int(rng.integers(1, max_blocks + 1))
    sizes = MIN_BLOCK + _composition(rng, masked - MIN_BLOCK * n_blocks, n_blocks)
    free = length - masked
    # n_blocks - 1 interior gaps need at least one valid bin each
    gaps = _composition(rng, free - (n_blocks - 1), n_blocks + 1)
    gaps[1:-1] += 1
    blocks, pos = [], 0
    for k in range(n_blocks):
        pos += int(gaps[k])
        blocks.append((pos, pos + int(sizes[k])))
        pos += int(sizes[k])
    return blocks


def _sample_random_rects(rng, coverage: float):
    target = coverage * N_FRAMES * N_BINS
    tol = RANDOM_AREA_TOLERANCE * N_FRAMES * N_BINS
    for _ in range(1000):
        n = int(rng.integers(1, MAX_BLOCKS + 1))
        shares = rng.dirichlet(np.ones(n)) * target
        aspect = np.exp(rng.uniform(np.log(0.25), np.log(4.0), n))
        centers = rng.uniform(0, 1, (n, 2))
        scale = 1.0
        for _refine in range(30):
            rects = []
            for k in range(n):
                h = np.sqrt(shares[k] * aspect[k]) * scale
                w = np.sqrt(shares[k] / aspect[k]) * scale
                h = int(np.clip(round(h), MIN_BLOCK, N_FRAMES))
                w = int(np.clip(round(w), MIN_BLOCK, N_BINS))
                t0 = int(round(centers[k, 0] * (N_FRAMES - h)))
                f0 = int(round(centers[k, 1] * (N_BINS - w)))
                rects.append((t0, t0 + h, f0, f0 + w))
            valid = np.ones((N_FRAMES, N_BINS), bool)
            for t0, t1, f0, f1 in rects:
                valid[t0:t1, f0:f1] = False
            area = (~valid).sum()
            if abs(area - target) <= tol:
                return valid, rects
            scale *= np.sqrt(target / max(area, 1))
    raise RuntimeError("could not place random mask blocks")  # pragma: no cover


def sample_mask(spec: MaskSpec) -> Mask:
    """Draw a mask of the requested kind and coverage, deterministic in seed."""
    valid = np.ones((N_FRAMES, N_BINS), dtype=bool)
    if spec.coverage == 0:
        return Mask(valid, spec, [])
    rng = np.random.default_rng(spec.seed)
    n_masked = int(round(spec.coverage * N_FRAMES))
    blocks = []
    if spec.kind is MaskKind.TIME:
        for a, b in _sample_blocks_1d(rng, n_masked, N_FRAMES):
            valid[a:b, :] = False
            blocks.append((a, b, 0, N_BINS))
    elif spec.kind is MaskKind.TIME_FREQ:
        for a, b in _sample_blocks_1d(rng, n_masked, N_FRAMES):
            valid[a:b, :] = False
            blocks.append((a, b, 0, N_BINS))
        n_bins = int(round(spec.coverage * N_BINS))
        for a, b in _sample_blocks_1d(rng, n_bins, N_BINS):
            valid[:, a:b] = False
            blocks.append((0, N_FRAMES, a, b))
    else:
        valid, blocks = _sample_random_rects(rng, spec.coverage)
    return Mask(valid, spec, blocks)


@dataclass(frozen=True)
class MaskSizeSampler:
    """Truncated normal distribution of training mask coverage."""
    mu: float = 0.294
    sigma: float = 0.099
    low: float = 0.0235
    high: float = MAX_COVERAGE

    def sample(self, rng: np.random.Generator) -> float:
        while True:
            x = rng.normal(self.mu, self.sigma)
            if self.low <= x <= self.high:
                return float(x)


def sample_training_size(sampler: MaskSizeSampler, seed) -> float:
    if isinstance(seed, np.random.Generator):
        return sampler.sample(seed)
    return sampler.sample(np.random.default_rng(seed))


def apply_mask(m: LogMagnitude, ph: np.ndarray, mask: Mask, mode: FillMode,
               *, stats: ChannelStats | None = None, additive_snr_db: float = -15.0,
               seed: int = 0) -> tuple[LogMagnitude, np.ndarray]:
    """Corrupt a log-magnitude/phase pair under ``mask``.

    Valid bins are returned bit-identical. Masked phase is set to 0. Fill
    values depend on ``mode``:

    - ZEROS: 0 in the normalized domain, the log floor otherwise.
    - WHITE_NOISE: standard normal draws in the normalized domain (mapped
      through ``stats`` when ``m`` is denormalized).
    - ADDITIVE_NOISE: original plus Gaussian noise scaled so that the
      signal-to-noise ratio over the masked bins is ``additive_snr_db``.
    - SPEECH_SHAPED: see :func:`dsp.speech_shaped_noise_fill`.
    """
    mode = FillMode(mode)
    valid = mask.valid
    if m.shape != valid.shape or np.shape(ph) != valid.shape:
        raise ContractError("mask, magnitude and phase shapes differ")
    values = m.values
    hole = ~valid
    rng = np.random.default_rng(seed)

    if mode is FillMode.ZEROS:
        fill = 0.0 if m.normalized else np.log(LOG_FLOOR)
        out = np.where(valid, values, fill)
    elif mode is FillMode.WHITE_NOISE:
        z = rng.standard_normal(values.shape)
        if not m.normalized:
            if stats is None:
                raise ContractError("white-noise fill of a denormalized input needs stats")
            z = denormalize(LogMagnitude(z, normalized=True), stats).values
        out = np.where(valid, values, z)
    elif mode is FillMode.ADDITIVE_NOISE:
        sig_power = float(np.mean(values[hole] ** 2)) if hole.any() else 0.0
        std = np.sqrt(sig_power / 10 ** (additive_snr_db / 10.0))
        out = np.where(valid, values, values + std * rng.standard_normal(values.shape))
    elif mode is FillMode.SPEECH_SHAPED:
        if m.normalized:
            if stats is None:
                raise ContractError("speech-shaped fill of a normalized input needs stats")
            filled = speech_shaped_noise_fill(denormalize(m, stats), valid, seed)
            out = normalize(filled, stats).values
        else:
            out = speech_shaped_noise_fill(m, valid, seed).values
        out = np.where(valid, values, out)
    else:  # pragma: no cover
        raise ContractError(f"unknown fill mode {mode!r}")
    new_phase = np.where(valid, ph, 0.0)
    return LogMagnitude(out, normalized=m.normalized), new_phase


def masked_snr_db(clean: np.ndarray, corrupted: np.ndarray, valid: np.ndarray) -> float:
    """SNR over the masked bins, treating ``corrupted - clean`` as the noise."""
    hole = ~np.asarray(valid, bool)
    noise = corrupted[hole] - clean[hole]
    return float(10 * np.log10(np.sum(clean[hole] ** 2) / np.sum(noise ** 2)))


def mask_to_time_gaps(mask: Mask) -> list[tuple[int, int]]:
    """Sample intervals ``[start, end)`` of fully masked frame runs."""
    if mask.spec.kind is MaskKind.RANDOM:
        raise UnsupportedMaskError("time gaps are undefined for random masks")
    return [(a * HOP_LENGTH, b * HOP_LENGTH) for a, b in mask.time_blocks()]
