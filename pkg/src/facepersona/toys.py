"""Deterministic desk-scale implementations of every frozen interface.

These stand in for the production backbones (latent diffusion U-Net,
VAE, CLIP-style encoders, 3D reconstruction, recognition models) so the
complete pipeline runs in seconds on a laptop. Every component is
seeded at construction, frozen, and reproducible across processes: the
tokenizer hashes words with sha256, never Python's salted hash.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import FrozenStack, NoiseScheduler
from .encoder import EncoderConfig, MultiScaleIdentityEncoder, TransformerLayer
from .errors import InputShapeError
from .interfaces import FaceEmbedder, ImageTextEncoder, SigmoidCalibration


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def _freeze_seeded(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize all parameters from a private generator and freeze."""
    g = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        else:
            fan_in = p.shape[-1] if p.ndim <= 2 else int(np.prod(p.shape[1:]))
            nn.init.normal_(p, std=1.0 / math.sqrt(max(fan_in, 1)), generator=g)
    module.requires_grad_(False)
    module.eval()
    return module


class TinyTextEncoder(nn.Module):
    """Hash tokenizer, frozen embedding table, one-layer contextualizer."""

    def __init__(self, embed_dim: int = 32, max_length: int = 77,
                 vocab_size: int = 4096, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim
        self.max_length = max_length
        self.vocab_size = vocab_size
        self.table = nn.Embedding(vocab_size, embed_dim)
        self.pos = nn.Parameter(torch.zeros(max_length, embed_dim))
        self.block = TransformerLayer(embed_dim, heads=4, mlp_ratio=2.0)
        _freeze_seeded(self, seed)
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            self.pos.copy_(0.02 * torch.randn(max_length, embed_dim, generator=g))

    def tokenize(self, text: str) -> list[int]:
        return [_stable_hash(w) % self.vocab_size for w in text.split()]

    def embed_tokens(self, token_ids) -> torch.Tensor:
        if len(token_ids) == 0:
            return torch.zeros(0, self.embed_dim)
        return self.table(torch.as_tensor(list(token_ids), dtype=torch.long))

    def contextualize(self, embeddings: torch.Tensor) -> torch.Tensor:
        if embeddings.shape[0] == 0:
            return embeddings
        x = embeddings + self.pos[: embeddings.shape[0]].to(embeddings.dtype)
        return self.block(x.unsqueeze(0)).squeeze(0)


class TinyDenoiser(nn.Module):
    """Frozen linear-ish noise predictor conditioned on the pooled prompt.

    Gradients flow through it into the conditioning, which is what
    mapper training needs; its own parameters never change.
    """

    def __init__(self, latent_shape: tuple[int, int, int], cond_dim: int,
                 num_timesteps: int, seed: int = 0):
        super().__init__()
        c, h, w = latent_shape
        self.latent_shape = latent_shape
        self.num_timesteps = num_timesteps
        self.mix = nn.Conv2d(c, c, kernel_size=3, padding=1)
        self.cond_proj = nn.Linear(cond_dim, c * h * w)
        self.time_proj = nn.Linear(2, c)
        _freeze_seeded(self, seed)

    def forward(self, z_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        if tuple(z_t.shape) != self.latent_shape:
            raise InputShapeError(
                f"latent shape {tuple(z_t.shape)} != configured {self.latent_shape}"
            )
        pooled = cond.mean(dim=0) if cond.ndim == 2 and cond.shape[0] > 0 else (
            torch.zeros(self.cond_proj.in_features, dtype=z_t.dtype)
        )
        tau = 2.0 * math.pi * t / self.num_timesteps
        tfeat = torch.tensor([math.sin(tau), math.cos(tau)], dtype=z_t.dtype)
        per_channel = self.time_proj(tfeat)[:, None, None]
        cond_term = self.cond_proj(pooled).reshape(self.latent_shape)
        return self.mix(z_t.unsqueeze(0)).squeeze(0) + per_channel + cond_term


class TinyLatentCodec(nn.Module):
    """Frozen strided-conv autoencoder between images and latents."""

    def __init__(self, latent_channels: int = 2, downsample: int = 8, seed: int = 0):
        super().__init__()
        self.downsample = downsample
        self.enc = nn.Conv2d(3, latent_channels, kernel_size=downsample, stride=downsample)
        self.dec = nn.ConvTranspose2d(latent_channels, 3, kernel_size=downsample,
                                      stride=downsample)
        _freeze_seeded(self, seed)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise InputShapeError(f"expected [3, H, W] image, got {tuple(image.shape)}")
        with torch.no_grad():
            return self.enc(image.unsqueeze(0)).squeeze(0)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return torch.sigmoid(self.dec(latent.unsqueeze(0)).squeeze(0))


class TinyExpressionExtractor(nn.Module):
    """Frozen projection of the pooled image standing in for 3D coefficients."""

    def __init__(self, dim: int = 16, pool: int = 8, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.pool = pool
        self.proj = nn.Linear(3 * pool * pool, dim)
        _freeze_seeded(self, seed)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise InputShapeError(f"expected [3, H, W] image, got {tuple(image.shape)}")
        with torch.no_grad():
            pooled = F.adaptive_avg_pool2d(image.unsqueeze(0), self.pool).flatten()
            return self.proj(pooled)


class ZeroExpressionExtractor:
    """Stub extractor: always the zero vector."""

    def __init__(self, dim: int = 16):
        self.dim = dim

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return torch.zeros(self.dim)


class TinyFaceEmbedder:
    """Recognition-slot stand-in with a trivial detector.

    Blank images (near-zero variance) count as "no face detected" and
    return None, exercising the metric fallback path.
    """

    def __init__(self, dim: int = 32, pool: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.pool = pool
        self.matrix = rng.standard_normal((dim, 3 * pool * pool)) / math.sqrt(3 * pool * pool)

    def embed(self, image: torch.Tensor) -> Optional[np.ndarray]:
        if float(image.std()) < 1e-6:
            return None
        pooled = F.adaptive_avg_pool2d(image.unsqueeze(0).float(), self.pool)
        vec = self.matrix @ pooled.flatten().numpy()
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class TinyImageTextEncoder:
    """Joint image/text embedder for the text-fidelity metric slots.

    Text embeddings are averages of per-word pseudo-random unit
    vectors keyed by a stable hash, so the same caption embeds the same
    way in every process.
    """

    def __init__(self, dim: int = 32, pool: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.pool = pool
        self.seed = seed
        self.matrix = rng.standard_normal((dim, 3 * pool * pool)) / math.sqrt(3 * pool * pool)

    def encode_image(self, image: torch.Tensor) -> np.ndarray:
        pooled = F.adaptive_avg_pool2d(image.unsqueeze(0).float(), self.pool)
        vec = self.matrix @ pooled.flatten().numpy()
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def encode_text(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            return np.zeros(self.dim)
        acc = np.zeros(self.dim)
        for w in words:
            wrng = np.random.default_rng((_stable_hash(w) + self.seed) % (2**63))
            acc += wrng.standard_normal(self.dim)
        norm = np.linalg.norm(acc)
        return acc / norm if norm > 0 else acc


@dataclass
class EvalComponents:
    """Evaluation-side interfaces: three identity slots + text metrics."""

    face_embedders: dict[str, FaceEmbedder]
    image_text: ImageTextEncoder
    siglip_image_text: ImageTextEncoder
    siglip_calibration: SigmoidCalibration


@dataclass(frozen=True)
class ToyStackConfig:
    """Dimensions of the toy pipeline; defaults run in seconds."""

    image_size: int = 32
    latent_channels: int = 2
    downsample: int = 8
    text_embed_dim: int = 32
    expression_dim: int = 16
    num_timesteps: int = 50

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.image_size // self.downsample
        return (self.latent_channels, side, side)


def build_toy_stack(
    seed: int = 0,
    cfg: ToyStackConfig = ToyStackConfig(),
    identity_encoder: MultiScaleIdentityEncoder | None = None,
    encoder_cfg: EncoderConfig | None = None,
) -> FrozenStack:
    """Assemble a frozen toy stack; pass a pretrained identity encoder to reuse it."""
    if identity_encoder is None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            identity_encoder = MultiScaleIdentityEncoder(
                encoder_cfg or EncoderConfig(
                    num_layers=4, depth_set=(1, 2, 3, 4), embed_dim=32,
                    image_size=cfg.image_size, patch_size=cfg.image_size // 4,
                )
            )
        identity_encoder.requires_grad_(False)
        identity_encoder.eval()
    return FrozenStack(
        identity_encoder=identity_encoder,
        expression_extractor=TinyExpressionExtractor(dim=cfg.expression_dim, seed=seed + 11),
        text_encoder=TinyTextEncoder(embed_dim=cfg.text_embed_dim, seed=seed + 12),
        denoiser=TinyDenoiser(cfg.latent_shape, cfg.text_embed_dim,
                              cfg.num_timesteps, seed=seed + 13),
        codec=TinyLatentCodec(cfg.latent_channels, cfg.downsample, seed=seed + 14),
        scheduler=NoiseScheduler(num_timesteps=cfg.num_timesteps),
    )


def build_toy_eval(seed: int = 0, dim: int = 32) -> EvalComponents:
    """Three seeded identity slots plus image/text metric encoders."""
    return EvalComponents(
        face_embedders={
            "adaface": TinyFaceEmbedder(dim=dim, seed=seed + 21),
            "sphereface": TinyFaceEmbedder(dim=dim, seed=seed + 22),
            "facenet": TinyFaceEmbedder(dim=dim, seed=seed + 23),
        },
        image_text=TinyImageTextEncoder(dim=dim, seed=seed + 24),
        siglip_image_text=TinyImageTextEncoder(dim=dim, seed=seed + 25),
        siglip_calibration=SigmoidCalibration(scale=4.0, bias=-1.0),
    )
