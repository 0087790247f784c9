"""Single-image super-resolution with sparse low-rank expert mixing.

The package is self-contained: a small reverse-mode autodiff core on
numpy buffers, the network blocks built on it, complexity accounting,
bicubic/PSNR/SSIM evaluation tooling, a desk-scale trainer, and a CLI.
"""

__version__ = "0.1.0"
