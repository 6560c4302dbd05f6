"""Translate 4D tongue-motion fields into 64x64 mel spectrograms.

Subpackages and modules:

- ``numerics``: reverse-mode autodiff, convolutions, windowed attention, gradient checks
- ``dsp``: STFT, mel filterbank, dB normalization, Griffin-Lim, WAV I/O
- ``model``: frame encoder, temporal modules, decoder, discriminator, presets
- ``training``: losses, Adam, the adversarial loop, checkpoint files
- ``data``: synthetic paired data, crops, leave-one-out splits, tensor files
- ``metrics``: Corr2D, spectral/waveform proxies, reports, attention timing
- ``cli``: the ``motion2spec`` command
"""

__version__ = "0.1.0"

from .errors import Motion2SpecError  # noqa: F401
