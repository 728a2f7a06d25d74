"""Cover selection for learned image steganography, at desk scale.

Modules: ``tensor`` (reverse-mode autodiff), ``corpus`` (synthetic corpora and
PNG I/O), ``codec`` (iterative encoder and decoder), ``diffusion`` (DDIM),
``gan``, ``selection`` (latent optimization), ``analysis`` (variance maps and
waterfilling), ``metrics``, ``channels`` (JPEG, Gaussian, steganalysis) and
``cli``.
"""

__version__ = "0.1.0"
