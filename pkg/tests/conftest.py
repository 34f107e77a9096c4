import os
from pathlib import Path

import numpy as np
import pytest

from speech_inpainting import corpus, dsp


def _have_espeak():
    try:
        import espeakng_loader  # noqa: F401
        return True
    except ImportError:
        return False


def speech_root(tmp_path_factory, name="speech", **kwargs) -> Path:
    """A LibriSpeech-layout speech corpus: real data if configured, else synthetic."""
    env = os.environ.get("LIBRISPEECH_ROOT")
    if env and Path(env, "dev-clean").is_dir():
        return Path(env) / "dev-clean"
    if not _have_espeak():
        pytest.skip("no speech corpus: set LIBRISPEECH_ROOT or install espeakng-loader")
    from speech_inpainting.synth import build_corpus
    root = tmp_path_factory.mktemp(name)
    defaults = dict(n_speakers=3, chapters_per_speaker=1, utterances_per_chapter=3,
                    seed=7, speaker_offset=20)
    defaults.update(kwargs)
    return build_corpus(root, **defaults)


@pytest.fixture(scope="session")
def speech_corpus(tmp_path_factory):
    return speech_root(tmp_path_factory)


@pytest.fixture(scope="session")
def speech_segments(speech_corpus):
    """At least 20 one-second speech segments as ``(id, samples)`` pairs."""
    records = corpus.build_manifest(speech_corpus, "dev")
    segs = []
    for sid, seg in corpus.iter_segments(records):
        segs.append((sid, seg))
        if len(segs) >= 40:
            break
    assert len(segs) >= 20
    return segs


@pytest.fixture(scope="session")
def speech_stats(speech_segments):
    return dsp.compute_stats(dsp.analyze(s)[0] for _, s in speech_segments)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
