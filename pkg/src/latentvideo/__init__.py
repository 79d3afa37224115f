"""Desk-scale latent video diffusion toolkit.

A small, CPU-friendly stack for turning image denoising diffusion models
into video generators: variance-preserving schedules, a toy latent
autoencoder with video-fine-tuned decoder, temporal alignment layers over
a frozen spatial U-Net, masked prediction/interpolation conditioning with
context guidance, a noise-augmented video upsampler, DDIM sampling, and
Frechet-style proxy metrics.
"""

__version__ = "0.1.0"
