"""Speech inpainting on 128x128 STFT log-magnitudes.

Submodules: ``dsp`` (STFT, normalization, phase reconstruction), ``masks``,
``corpus``, ``unet``, ``feature_loss``, ``lpc``, ``metrics``, ``training``,
``evaluation`` and ``cli``. Torch-backed modules are imported lazily so the
signal-processing half works without loading torch.
"""

__version__ = "0.1.0"
