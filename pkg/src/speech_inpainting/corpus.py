"""LibriSpeech-layout ingestion, vocabularies and word samples for
extractor pretraining."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .dsp import (HOP_LENGTH, N_BINS, N_FRAMES, SEGMENT_LENGTH, SAMPLE_RATE,
                  ChannelStats, ContractError, LogMagnitude, log_magnitude,
                  normalize, read_wav, stft)

log = logging.getLogger(__name__)

AUDIO_SUFFIXES = (".flac", ".wav")
VOCAB_SIZE = 1000
MIN_WORD_LETTERS = 4
MAX_WORD_SECONDS = SEGMENT_LENGTH / SAMPLE_RATE
# alignment times are rounded; tolerate ends up to 1 ms past the audio
_ROUNDING_SLACK = SAMPLE_RATE // 1000

# SpecAugment limits
MAX_FREQ_MASKS, MAX_FREQ_WIDTH = 2, 15
MAX_TIME_MASKS, MAX_TIME_WIDTH = 2, 20


class ManifestError(ContractError):
    pass


class WordTooLong(ContractError):
    """The word does not fit in one 128-frame sample; skip it."""


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    transcript: str
    split: str


@dataclass(frozen=True)
class WordSegment:
    utterance_id: str
    word: str
    start: float
    end: float

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ContractError(f"bad word span {self.start}..{self.end}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Vocabulary:
    words: list
    short: bool = False

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path, expected_size: int = VOCAB_SIZE) -> "Vocabulary":
        words = [w for w in Path(path).read_text().split("\n") if w]
        return cls(words, short=len(words) < expected_size)


# --------------------------------------------------------------------------
# manifests

def canonical_split(name: str) -> str:
    """Map a LibriSpeech directory name such as ``dev-clean`` to train/test/dev."""
    for split in ("train", "test", "dev"):
        if name.lower().startswith(split):
            return split
    raise ManifestError(f"cannot tell whether {name!r} is a train, test or dev split")


def _split_dir(root: Path, split: str) -> Path:
    return root / split if (root / split).is_dir() else root


def build_manifest(root, split: str) -> list[UtteranceRecord]:
    """One record per utterance of a LibriSpeech-style tree, sorted by id.

    ``root`` may be the corpus root (containing ``split/``) or the split
    directory itself. Utterances without a transcript line are skipped with
    a warning.
    """
    base = _split_dir(Path(root), split)
    if not base.is_dir():
        raise ManifestError(f"{base} is not a directory")
    split = canonical_split(split)
    transcripts: dict[str, str] = {}
    for trans in sorted(base.rglob("*.trans.txt")):
        for line in trans.read_text().splitlines():
            if line.strip():
                uid, _, text = line.strip().partition(" ")
                transcripts[uid] = text
    records: dict[str, UtteranceRecord] = {}
    for path in sorted(base.rglob("*")):
        if path.suffix.lower() not in AUDIO_SUFFIXES or not path.is_file():
            continue
        uid = path.stem
        if uid in records:
            raise ManifestError(f"duplicate utterance id {uid!r} ({path})")
        if uid not in transcripts:
            log.warning("no transcript for %s; excluded", uid)
            continue
        records[uid] = UtteranceRecord(uid, str(path), transcripts[uid], split)
    return [records[k] for k in sorted(records)]


def write_manifest(records: Iterable[UtteranceRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    seen = set()
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = UtteranceRecord(**json.loads(line))
            if rec.id in seen:
                raise ManifestError(f"duplicate utterance id {rec.id!r} in {path}")
            seen.add(rec.id)
            records.append(rec)
    return records


def read_alignments(path) -> list[WordSegment]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(WordSegment(d["utterance_id"], d["word"], float(d["start"]),
                                   float(d["end"])))
    return out


def write_alignments(segments: Iterable[WordSegment], path) -> None:
    with open(path, "w") as fh:
        for ws in segments:
            fh.write(json.dumps(asdict(ws)) + "\n")


def iter_segments(records: Iterable[UtteranceRecord]):
    """Yield ``(segment_id, samples)`` for every 1024 ms segment of every record."""
    from .dsp import segment
    for rec in records:
        for k, seg in enumerate(segment(read_wav(rec.audio_path))):
            yield f"{rec.id}_{k:03d}", seg


# --------------------------------------------------------------------------
# vocabulary

_TOKEN = re.compile(r"[^\s]+")


def normalize_word(token: str) -> str | None:
    """Case-folded letters of ``token`` after dropping apostrophes, or None."""
    w = token.lower().replace("'", "")
    return w if w.isalpha() else None


def build_vocabulary(records: Iterable[UtteranceRecord], size: int = VOCAB_SIZE,
                     split: str | None = "train") -> Vocabulary:
    """Most frequent words of at least four letters; ties broken alphabetically.

    Only records of ``split`` are counted (all records if ``split`` is None).
    """
    counts: Counter = Counter()
    for rec in records:
        if split is not None and rec.split != split:
            continue
        for tok in _TOKEN.findall(rec.transcript):
            w = normalize_word(tok)
            if w and len(w) >= MIN_WORD_LETTERS:
                counts[w] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[:size]]
    if len(words) < size:
        log.warning("short vocabulary: %d of %d words", len(words), size)
    return Vocabulary(words, short=len(words) < size)


# --------------------------------------------------------------------------
# word samples

def word_frames(n_samples: int) -> int:
    return -(-n_samples // HOP_LENGTH)


def extract_word_sample(audio: np.ndarray, ws: WordSegment, stats: ChannelStats,
                        seed: int) -> np.ndarray:
    """Normalized 128x128 log-magnitude of one word at a random frame offset.

    The word occupies its natural number of frames; every other frame is 0.
    """
    a = int(round(ws.start * SAMPLE_RATE))
    b = int(round(ws.end * SAMPLE_RATE))
    if b - len(audio) <= _ROUNDING_SLACK:
        b = min(b, len(audio))
    if b > len(audio) or a < 0 or a >= b:
        raise ContractError(f"word {ws.word!r} lies outside its utterance")
    clip = np.asarray(audio[a:b], dtype=np.float64)
    if len(clip) > SEGMENT_LENGTH:
        raise WordTooLong(f"word {ws.word!r} lasts {ws.duration:.3f} s")
    n = min(word_frames(len(clip)), N_FRAMES)
    padded = np.zeros(SEGMENT_LENGTH)
    padded[:len(clip)] = clip
    content = normalize(log_magnitude(stft(padded)), stats).values[:n]
    offset = int(np.random.default_rng(seed).integers(0, N_FRAMES - n + 1))
    out = np.zeros((N_FRAMES, N_BINS))
    out[offset:offset + n] = content
    return out


def word_sample_set(records, alignments, vocab: Vocabulary, stats: ChannelStats,
                    seed: int = 0, max_per_word: int | None = None):
    """Build ``(X, labels)`` arrays for every aligned vocabulary word."""
    by_id = {r.id: r for r in records}
    cache: dict[str, np.ndarray] = {}
    xs, ys, per_word = [], [], Counter()
    for i, ws in enumerate(alignments):
        word = normalize_word(ws.word)
        if word not in vocab or ws.utterance_id not in by_id:
            continue
        if max_per_word is not None and per_word[word] >= max_per_word:
            continue
        if ws.duration > MAX_WORD_SECONDS:
            continue
        rec = by_id[ws.utterance_id]
        if rec.id not in cache:
            cache = {rec.id: read_wav(rec.audio_path)}  # alignments are grouped by utterance
        try:
            xs.append(extract_word_sample(cache[rec.id], ws, stats, seed * 1_000_003 + i))
        except WordTooLong:
            continue
        ys.append(vocab.index[word])
        per_word[word] += 1
    if not xs:
        return np.zeros((0, N_FRAMES, N_BINS)), np.zeros(0, dtype=np.int64)
    return np.stack(xs), np.array(ys, dtype=np.int64)


def spec_augment(m: LogMagnitude | np.ndarray, seed: int) -> np.ndarray:
    """Zero up to two frequency bands (<=15 bins) and two time spans (<=20 frames)."""
    if isinstance(m, LogMagnitude):
        if not m.normalized:
            raise ContractError("spec_augment expects a normalized input")
        values = m.values
    else:
        values = np.asarray(m)
    out = values.copy()
    rng = np.random.default_rng(seed)
    for _ in range(int(rng.integers(0, MAX_FREQ_MASKS + 1))):
        width = int(rng.integers(0, MAX_FREQ_WIDTH + 1))
        f0 = int(rng.integers(0, N_BINS - width + 1))
        out[:, f0:f0 + width] = 0.0
    for _ in range(int(rng.integers(0, MAX_TIME_MASKS + 1))):
        width = int(rng.integers(0, MAX_TIME_WIDTH + 1))
        t0 = int(rng.integers(0, N_FRAMES - width + 1))
        out[t0:t0 + width, :] = 0.0
    return out
