"""Plugin contracts for the frozen components the pipeline consumes.

Production backbones (latent diffusion U-Nets, VAE codecs, CLIP-style
encoders, face recognition networks, 3D reconstruction models) are large
pretrained checkpoints. This package never loads them directly; it talks
to them through the small protocols below. `facepersona.toys` provides
deterministic desk-scale implementations of every protocol so the full
pipeline can run and be tested without any external weights.

All protocol implementations must be frozen: calling them never mutates
their parameters, and identical inputs yield identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch


@runtime_checkable
class TextEncoder(Protocol):
    """Tokenizer + frozen token-embedding table + contextualizer.

    `embed_dim` is the token-embedding width (identifier word vectors
    must match it); `max_length` bounds the post-injection sequence.
    """

    embed_dim: int
    max_length: int

    def tokenize(self, text: str) -> list[int]:
        """Map text to vocabulary ids. Empty text gives an empty list."""
        ...

    def embed_tokens(self, token_ids: Sequence[int]) -> torch.Tensor:
        """Look up frozen vocabulary embeddings, shape [len(ids), embed_dim]."""
        ...

    def contextualize(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Run the frozen sequence model over raw token embeddings."""
        ...


def encode_text(encoder: TextEncoder, text: str) -> torch.Tensor:
    """Tokenize, embed and contextualize `text` with a frozen encoder."""
    ids = encoder.tokenize(text)
    return encoder.contextualize(encoder.embed_tokens(ids))


@runtime_checkable
class NoisePredictor(Protocol):
    """Denoising network: predicts the noise in a latent at timestep t."""

    def __call__(self, z_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        """Return the predicted noise, same shape as `z_t`."""
        ...


@runtime_checkable
class LatentCodec(Protocol):
    """Autoencoder between image space and the latent diffusion space."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Image [3, H, W] in [0, 1] to latent [C, h, w]."""
        ...

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent [C, h, w] back to an image [3, H, W] in [0, 1]."""
        ...


@runtime_checkable
class ExpressionExtractor(Protocol):
    """Frozen 3D-reconstruction front end exposing expression coefficients.

    Implementations raise on failure (no face, bad resolution); the
    wrapper in `facepersona.expression` converts that into a typed
    `ExpressionExtractionError`.
    """

    dim: int

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        """Return a finite vector of length `dim` for an aligned face image."""
        ...


@runtime_checkable
class FaceEmbedder(Protocol):
    """Recognition model slot with built-in detection, for evaluation.

    Returns None when no face is detected in the image; the identity
    metric maps that to its documented fallback.
    """

    def embed(self, image: torch.Tensor) -> Optional[np.ndarray]:
        ...


@runtime_checkable
class ImageTextEncoder(Protocol):
    """Joint image/text embedding model used by the text-fidelity metrics."""

    def encode_image(self, image: torch.Tensor) -> np.ndarray:
        ...

    def encode_text(self, text: str) -> np.ndarray:
        ...


@dataclass(frozen=True)
class SigmoidCalibration:
    """Scale and bias constants of a sigmoid-calibrated similarity model."""

    scale: float
    bias: float
