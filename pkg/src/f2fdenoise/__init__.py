"""Model-blind video denoising by frame-to-frame fine-tuning of a small residual CNN."""

__version__ = "0.1.0"
