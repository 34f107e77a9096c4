"""Shared helper: a small synthetic speech corpus for the demos."""
import tempfile
from pathlib import Path

from speech_inpainting import corpus
from speech_inpainting.synth import build_corpus


def demo_segments(n_speakers=2, utterances=6, seed=0, split="dev"):
    """Synthesize a few utterances and return ``(root, [(segment_id, samples), ...])``."""
    root = Path(tempfile.mkdtemp(prefix="si-demo-"))
    build_corpus(root, n_speakers=n_speakers, chapters_per_speaker=1,
                 utterances_per_chapter=utterances, seed=seed)
    return root, list(corpus.iter_segments(corpus.build_manifest(root, split)))
