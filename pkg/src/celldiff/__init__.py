"""Conditional diffusion over batches of single-cell expression profiles.

Submodules: ``autodiff`` (tape-based reverse-mode engine), ``kernels``
(energy distance and finite-feature kernel utilities), ``diffusion``
(noise schedule and DDIM sampling), ``model`` (two-stream transformer
denoiser), ``train``, ``data``, ``metrics``, ``baselines`` and ``cli``.
"""

__version__ = "0.1.0"
