"""Desk-scale prompt-adapter fine-tuning for a toy text-conditioned
diffusion model, with dataset tooling and a statistical evaluation harness."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward  # noqa: F401
