"""Synthetic read-speech corpora for offline experiments.

Generates a LibriSpeech-style directory tree (``speaker/chapter/*.wav`` plus
``*.trans.txt``) and a JSON-lines word alignment file, using the espeak-ng
engine shipped by the ``espeakng-loader`` wheel. Each "speaker" is a fixed
voice/variant/rate/pitch combination.
"""
from __future__ import annotations

import ctypes
import json
import math
import re
import threading
from pathlib import Path

import numpy as np
from scipy.signal import butter, resample_poly, sosfiltfilt

from .dsp import SAMPLE_RATE, write_wav

_NOUNS = """
house garden river mountain window letter morning evening table kitchen
village forest market teacher doctor sister brother mother father friend
captain soldier horse carriage winter summer autumn spring country city
street bridge church school office station harbour island valley meadow
candle mirror picture journey answer question story family neighbour
husband daughter company dinner breakfast supper paper pocket basket
ribbon flower orchard cottage parlour library chamber corner distance
silence weather shadow moment evening thunder lantern blanket fortune
promise voice power money person people water hands heart world
""".split()

_VERBS = """
opened carried watched followed answered remembered noticed wanted
gathered painted visited finished entered crossed reached believed
dropped pulled pushed helped called turned looked waited walked talked
brought thought found heard kept left made said told took wrote
""".split()

_ADJECTIVES = """
little great small large quiet gentle bright yellow silver golden
ancient modern narrow heavy simple strange proud happy lovely dreadful
careful famous honest humble patient pleasant sudden tender violent
broken hidden distant empty crowded early later wooden
""".split()

_ADVERBS = """
quickly slowly quietly gently finally nearly really often always never
perhaps surely softly suddenly together almost
""".split()

_NAMES = """
Elinor Marianne Edward Willoughby Margaret Henry Thomas Charlotte Lucy
Robert John William Mary Anne Jane
""".split()

_TEMPLATES = [
    "the {adj} {noun} {verb} the {noun2}",
    "{name} {verb} the {adj} {noun} {adv}",
    "{name} and {name2} {verb} the {noun} near the {noun2}",
    "the {noun} was {adj} and the {noun2} was {adj2}",
    "{adv} the {adj} {noun} {verb} her {noun2}",
    "when the {noun} {verb} the {noun2}, {name} {verb2} the {adj} {noun3}",
    "every {noun} in the {noun2} was {adj}",
    "{name} {verb} that the {noun} had {verb2} the {adj} {noun2}",
    "there was a {adj} {noun} in the {noun2} that {name} {verb}",
    "her {noun} {verb} the {adj} {noun2} {adv} in the {noun3}",
]


class SentenceGenerator:
    """Seeded generator of simple English sentences."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def _pick(self, words):
        return words[self.rng.integers(len(words))]

    def sentence(self) -> str:
        tpl = _TEMPLATES[self.rng.integers(len(_TEMPLATES))]
        return tpl.format(
            adj=self._pick(_ADJECTIVES), adj2=self._pick(_ADJECTIVES),
            noun=self._pick(_NOUNS), noun2=self._pick(_NOUNS),
            noun3=self._pick(_NOUNS), verb=self._pick(_VERBS),
            verb2=self._pick(_VERBS), adv=self._pick(_ADVERBS),
            name=self._pick(_NAMES), name2=self._pick(_NAMES))

    def utterance(self, n_sentences: int) -> str:
        return ". ".join(self.sentence() for _ in range(n_sentences)) + "."


class _Event(ctypes.Structure):
    _fields_ = [("type", ctypes.c_int), ("unique_identifier", ctypes.c_uint),
                ("text_position", ctypes.c_int), ("length", ctypes.c_int),
                ("audio_position", ctypes.c_int), ("sample", ctypes.c_int),
                ("user_data", ctypes.c_void_p), ("id", ctypes.c_int * 2)]


_WORD = re.compile(r"[A-Za-z']+")

_CALLBACK = ctypes.CFUNCTYPE(ctypes.c_int, ctypes.POINTER(ctypes.c_short),
                             ctypes.c_int, ctypes.POINTER(_Event))
_EVENT_WORD = 1
_AUDIO_SYNCHRONOUS = 2


class Espeak:
    """Minimal synchronous binding to libespeak-ng (process-global engine)."""

    _lock = threading.Lock()
    _instance = None

    def __init__(self):
        import espeakng_loader

        self.lib = ctypes.cdll.LoadLibrary(espeakng_loader.get_library_path())
        data = espeakng_loader.get_data_path().encode()
        self.rate = self.lib.espeak_Initialize(_AUDIO_SYNCHRONOUS, 0, data, 0)
        if self.rate <= 0:
            raise RuntimeError("espeak-ng failed to initialize")
        self._chunks: list[np.ndarray] = []
        self._words: list[tuple[int, int, int]] = []
        self._cb = _CALLBACK(self._on_audio)
        self.lib.espeak_SetSynthCallback(self._cb)

    @classmethod
    def get(cls) -> "Espeak":
        with cls._lock:
            if cls._instance is None:
                cls._instance = cls()
            return cls._instance

    def _on_audio(self, wav, n, events):
        if n > 0:
            self._chunks.append(np.ctypeslib.as_array(wav, (n,)).copy())
        i = 0
        while events[i].type != 0:
            ev = events[i]
            if ev.type == _EVENT_WORD:
                self._words.append((ev.text_position, ev.length, ev.audio_position))
            i += 1
        return 0

    def synthesize(self, text: str, voice: str = "en-us", rate: int = 160,
                   pitch: int = 50):
        """Return (samples at 16 kHz, [(word, start_s, end_s), ...])."""
        with self._lock:
            self._chunks, self._words = [], []
            if self.lib.espeak_SetVoiceByName(voice.encode()) != 0:
                raise ValueError(f"unknown espeak voice {voice!r}")
            self.lib.espeak_SetParameter(1, rate, 0)   # espeakRATE
            self.lib.espeak_SetParameter(3, pitch, 0)  # espeakPITCH
            raw = text.encode()
            self.lib.espeak_Synth(raw, len(raw) + 1, 0, 0, 0, 0, None, None)
            chunks, words = self._chunks, self._words
        audio = (np.concatenate(chunks) if chunks else np.zeros(0)) / 32768.0
        audio = resample_poly(audio, SAMPLE_RATE, self.rate)
        duration = len(audio) / SAMPLE_RATE
        # reported text positions drift by a character after punctuation, so
        # each event takes the next token that has not ended before it
        tokens = [(m.start() + 1, m.end(), m.group()) for m in _WORD.finditer(text)]
        spans, j = [], 0
        for k, (pos, length, ms) in enumerate(words):
            while j < len(tokens) and tokens[j][1] < pos:
                j += 1
            if j == len(tokens):
                break
            word = tokens[j][2]
            j += 1
            start = ms / 1000.0
            end = words[k + 1][2] / 1000.0 if k + 1 < len(words) else duration
            end = min(end, duration)
            if word and end > start:
                spans.append((word, start, end))
        return audio, spans


_VOICES = ["en-us", "en", "en-gb-x-rp", "en-gb-scotland", "en-029", "en-us-nyc"]
_VARIANTS = ["m1", "m2", "m3", "m4", "m7", "f1", "f2", "f3", "f4", "f5",
             "klatt", "klatt2", "klatt4", "adam", "john", "linda"]


def speaker_voice(speaker: int) -> tuple[str, int, int]:
    """Deterministic (voice, rate, pitch) for a synthetic speaker id."""
    rng = np.random.default_rng(10_000 + speaker)
    voice = f"{_VOICES[speaker % len(_VOICES)]}+{_VARIANTS[rng.integers(len(_VARIANTS))]}"
    return voice, int(rng.integers(140, 190)), int(rng.integers(30, 70))


def build_corpus(root, n_speakers: int = 4, chapters_per_speaker: int = 2,
                 utterances_per_chapter: int = 5, sentences_per_utterance: int = 3,
                 seed: int = 0, speaker_offset: int = 0,
                 noise_floor_db: float = -60.0, bandwidth_hz: float = 7000.0) -> Path:
    """Write a LibriSpeech-layout corpus of synthetic speech under ``root``.

    Also writes ``root/alignments.jsonl`` (one word segment per line). A
    low-level white noise floor is added so silent stretches are not
    digitally zero. The result is low-passed at ``bandwidth_hz``, since
    read-speech recordings carry almost no energy near the Nyquist frequency.
    Returns ``root``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    engine = Espeak.get()
    gen = SentenceGenerator(seed)
    rng = np.random.default_rng(seed + 1)
    noise_rms = 10 ** (noise_floor_db / 20.0)
    lowpass = butter(8, bandwidth_hz, fs=SAMPLE_RATE, output="sos")
    with open(root / "alignments.jsonl", "w") as align:
        for s in range(n_speakers):
            spk = speaker_offset + s
            voice, rate, pitch = speaker_voice(spk)
            spk_id = str(100 + spk)
            for c in range(chapters_per_speaker):
                chap_id = str(1000 + c)
                chap_dir = root / spk_id / chap_id
                chap_dir.mkdir(parents=True, exist_ok=True)
                lines = []
                for u in range(utterances_per_chapter):
                    utt_id = f"{spk_id}-{chap_id}-{u:04d}"
                    text = gen.utterance(sentences_per_utterance)
                    audio, spans = engine.synthesize(text, voice, rate, pitch)
                    audio = 0.5 * audio / max(np.abs(audio).max(), 1e-9)
                    audio = audio + noise_rms * rng.standard_normal(len(audio))
                    audio = sosfiltfilt(lowpass, audio)
                    write_wav(chap_dir / f"{utt_id}.wav", audio)
                    lines.append(f"{utt_id} {text.upper().replace('.', '').replace(',', '')}")
                    for word, start, end in spans:
                        align.write(json.dumps({"utterance_id": utt_id,
                                                "word": word.lower(),
                                                "start": round(start, 4),
                                                "end": math.floor(end * 1e4) / 1e4}) + "\n")
                (chap_dir / f"{spk_id}-{chap_id}.trans.txt").write_text(
                    "\n".join(lines) + "\n")
    return root
