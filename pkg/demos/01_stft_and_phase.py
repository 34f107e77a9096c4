"""From waveform to 128x128 log-magnitude and back.

A one-second segment becomes a (frames, bins) log-magnitude plus phase.
Resynthesis with the true phase is near lossless; discarding the phase and
estimating it with LWS gives a usable but imperfect waveform.
"""
import numpy as np

from _corpus import demo_segments
from speech_inpainting import dsp, metrics

_, segments = demo_segments(n_speakers=1, utterances=2)
sid, x = segments[0]
mag, ph = dsp.analyze(x)
print(f"segment {sid}: {len(x)} samples -> log-magnitude {mag.values.shape}")

y = dsp.istft(mag, ph)
inner = slice(256, -256)
snr = 10 * np.log10(np.sum(x[inner] ** 2) / np.sum((x - y)[inner] ** 2))
print(f"round trip with true phase: {snr:.1f} dB SNR")

history = []
est = dsp.reconstruct_phase(mag, 100, history=history)
z = dsp.istft(mag, est)
print(f"LWS phase: spectral convergence {history[0]:.3f} -> {history[-1]:.3f}, "
      f"STOI {metrics.stoi(x, z):.3f}")
