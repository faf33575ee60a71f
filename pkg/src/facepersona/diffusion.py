"""Forward noising, training losses, and the personalization train step.

The train step composes the whole pipeline for a batch: frozen identity
and expression features, expression dropout, mapping into the text
space, prompt injection, forward noising, and one of three objectives:

* reconstruction: plain noise-prediction regression,
* masked reconstruction: the same regression restricted to the face
  region of the latent,
* class-guided denoising regularization: the prediction must match the
  true noise inside the face mask and the (detached) class-prompt
  prediction outside it.

Only the mapper networks and the unconditional expression vector
receive gradients; every other component is frozen.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .encoder import MultiScaleIdentityEncoder
from .errors import ConfigError, InputShapeError, NumericError, TimestepError
from .expression import compose_condition, extract_expression
from .interfaces import ExpressionExtractor, LatentCodec, NoisePredictor, TextEncoder, encode_text
from .mapper import FaceMapper, PromptTemplate, inject_identifier, map_to_identifier


class NoiseScheduler:
    """Discrete variance-preserving forward process.

    Cumulative signal coefficients are indexed 0..num_timesteps with
    index 0 meaning "clean" (coefficient exactly 1); training draws
    timesteps uniformly from 1..num_timesteps.
    """

    def __init__(
        self,
        num_timesteps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
    ):
        if num_timesteps < 1:
            raise ConfigError(f"num_timesteps must be >= 1, got {num_timesteps}")
        self.num_timesteps = num_timesteps
        betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
        cumprod = torch.cumprod(1.0 - betas, dim=0)
        self.alphas_cumprod = torch.cat([torch.ones(1, dtype=torch.float64), cumprod])

    def signal_coeff(self, t: int) -> float:
        """sqrt of the cumulative signal fraction at timestep t."""
        self._check(t)
        return math.sqrt(float(self.alphas_cumprod[t]))

    def noise_coeff(self, t: int) -> float:
        """sqrt of the cumulative noise fraction at timestep t."""
        self._check(t)
        return math.sqrt(1.0 - float(self.alphas_cumprod[t]))

    def sigma(self, t: int) -> float:
        """Noise-to-signal ratio at timestep t (0 at t=0)."""
        self._check(t)
        ac = float(self.alphas_cumprod[t])
        return math.sqrt((1.0 - ac) / ac)

    def _check(self, t: int) -> None:
        if not 0 <= t <= self.num_timesteps:
            raise TimestepError(
                f"timestep {t} outside [0, {self.num_timesteps}]"
            )


@dataclass
class NoisyLatent:
    """A noised latent together with everything that produced it."""

    z_t: torch.Tensor
    t: int
    eps: torch.Tensor
    z0: torch.Tensor


def add_noise(
    z0: torch.Tensor, t: int, eps: torch.Tensor, scheduler: NoiseScheduler
) -> NoisyLatent:
    """Apply the closed-form forward process at timestep t."""
    if eps.shape != z0.shape:
        raise InputShapeError(f"noise shape {tuple(eps.shape)} != latent {tuple(z0.shape)}")
    if not torch.isfinite(eps).all():
        raise NumericError("noise contains non-finite values")
    z_t = scheduler.signal_coeff(t) * z0 + scheduler.noise_coeff(t) * eps
    return NoisyLatent(z_t=z_t, t=t, eps=eps, z0=z0)


def sample_timestep(scheduler: NoiseScheduler, rng: torch.Generator) -> int:
    """Draw a training timestep uniformly from 1..num_timesteps."""
    return int(torch.randint(1, scheduler.num_timesteps + 1, (1,), generator=rng))


def downsample_mask(pixel_mask: torch.Tensor, latent_shape: tuple[int, int]) -> torch.Tensor:
    """Reduce a binary pixel mask to latent resolution.

    A latent cell is foreground iff at least half of the pixels in its
    block are foreground.
    """
    if pixel_mask.ndim != 2:
        raise InputShapeError(f"pixel mask must be 2-D, got {tuple(pixel_mask.shape)}")
    vals = torch.unique(pixel_mask)
    if not all(float(v) in (0.0, 1.0) for v in vals):
        raise InputShapeError("pixel mask must be binary (0/1)")
    H, W = pixel_mask.shape
    h, w = latent_shape
    if H % h != 0 or W % w != 0:
        raise InputShapeError(
            f"latent shape {latent_shape} does not evenly divide pixel shape {(H, W)}"
        )
    blocks = pixel_mask.reshape(h, H // h, w, W // w).to(torch.float64)
    frac = blocks.mean(dim=(1, 3))
    return (frac >= 0.5).to(pixel_mask.dtype)


@dataclass
class SegmentationMask:
    """Foreground face mask at pixel and latent resolution."""

    pixel: torch.Tensor
    latent: torch.Tensor

    @classmethod
    def from_pixel(cls, pixel: torch.Tensor, latent_shape: tuple[int, int]) -> "SegmentationMask":
        return cls(pixel=pixel, latent=downsample_mask(pixel, latent_shape))


def _check_prediction(eps_hat: torch.Tensor, shape: torch.Size) -> None:
    if eps_hat.shape != shape:
        raise InputShapeError(
            f"denoiser output shape {tuple(eps_hat.shape)} != latent {tuple(shape)}"
        )
    if not torch.isfinite(eps_hat).all():
        raise NumericError("denoiser produced non-finite values")


def reconstruction_loss(
    nl: NoisyLatent, cond: torch.Tensor, denoiser: NoisePredictor
) -> torch.Tensor:
    """Element-averaged squared error between true and predicted noise."""
    eps_hat = denoiser(nl.z_t, nl.t, cond)
    _check_prediction(eps_hat, nl.eps.shape)
    return ((nl.eps - eps_hat) ** 2).mean()


def masked_reconstruction_loss(
    nl: NoisyLatent, cond: torch.Tensor, mask: torch.Tensor, denoiser: NoisePredictor
) -> torch.Tensor:
    """Noise regression restricted to the masked region.

    The average still runs over all elements, so shrinking the mask
    shrinks the loss rather than renormalizing it.
    """
    _check_mask(mask, nl.z_t)
    eps_hat = denoiser(nl.z_t, nl.t, cond)
    _check_prediction(eps_hat, nl.eps.shape)
    return (((nl.eps - eps_hat) * mask) ** 2).mean()


def cgdr_loss(
    nl: NoisyLatent,
    cond_identity: torch.Tensor,
    cond_class: torch.Tensor,
    mask: torch.Tensor,
    denoiser: NoisePredictor,
) -> torch.Tensor:
    """Class-guided denoising regularization.

    Both predictions run on the same noisy latent. The identity-prompt
    prediction is regressed onto a composite target: the true noise
    inside the mask and the class-prompt prediction outside it. The
    class-prompt prediction acts as a fixed teacher signal; no gradient
    flows through it.
    """
    _check_mask(mask, nl.z_t)
    eps_hat = denoiser(nl.z_t, nl.t, cond_identity)
    _check_prediction(eps_hat, nl.eps.shape)
    eps_hat_class = denoiser(nl.z_t, nl.t, cond_class)
    _check_prediction(eps_hat_class, nl.eps.shape)
    eps_hat_class = eps_hat_class.detach()
    target = nl.eps * mask + eps_hat_class * (1.0 - mask)
    return ((eps_hat - target) ** 2).mean()


def _check_mask(mask: torch.Tensor, z: torch.Tensor) -> None:
    if mask.shape[-2:] != z.shape[-2:]:
        raise InputShapeError(
            f"mask spatial shape {tuple(mask.shape[-2:])} != latent {tuple(z.shape[-2:])}"
        )


@dataclass(frozen=True)
class TrainStepConfig:
    """Personalization-stage training settings."""

    loss_kind: str = "cgdr"  # cgdr | reconstruction | masked_reconstruction
    class_prompt: str = "A photo of a person"
    identity_prompt_template: str = "A photo of S*"
    drop_prob: float = 0.2
    lr: float = 1e-5
    batch_size: int = 32

    def __post_init__(self):
        if self.loss_kind not in ("cgdr", "reconstruction", "masked_reconstruction"):
            raise ConfigError(f"unknown loss_kind '{self.loss_kind}'")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError(f"drop_prob must be in [0, 1], got {self.drop_prob}")


@dataclass
class FrozenStack:
    """All frozen components the train step and sampler consume."""

    identity_encoder: MultiScaleIdentityEncoder
    expression_extractor: ExpressionExtractor
    text_encoder: TextEncoder
    denoiser: NoisePredictor
    codec: LatentCodec
    scheduler: NoiseScheduler


@dataclass
class TrainState:
    """Trainable state: the mapper bundle and its optimizer."""

    mapper: FaceMapper
    optimizer: torch.optim.Optimizer

    @classmethod
    def create(cls, mapper: FaceMapper, lr: float) -> "TrainState":
        return cls(mapper=mapper, optimizer=torch.optim.Adam(mapper.parameters(), lr=lr))


@dataclass
class LossReport:
    """Scalar diagnostics of one training step."""

    loss: float
    grad_norm: float
    loss_kind: str


def training_step(
    batch: Sequence[tuple[torch.Tensor, torch.Tensor]],
    state: TrainState,
    cfg: TrainStepConfig,
    frozen: FrozenStack,
    rng: torch.Generator,
) -> tuple[TrainState, LossReport]:
    """Run one optimization step of the mapper on a batch.

    Per sample: extract frozen identity and expression features, apply
    expression dropout, map to the identifier pair, inject it into the
    identity prompt template, noise the encoded latent at a uniform
    timestep, and evaluate the configured loss. Gradients reach only the
    mapper networks and the unconditional expression vector.

    All randomness is drawn from `rng` in a fixed order: one seed for
    the mapper's dropout layers, then per sample the expression-dropout
    draw, the timestep, and the noise. Re-running with an identically
    seeded generator reproduces the step exactly.

    Args:
        batch: list of (image [3,H,W] in [0,1], pixel mask [H,W] binary).
        state: mapper + optimizer; updated in place and returned.
        cfg: loss kind, prompts, dropout probability.
        frozen: frozen component stack.
        rng: generator owned by the training loop.

    Returns:
        The state and a LossReport with the batch loss and gradient norm.
    """
    if not batch:
        raise InputShapeError("empty batch")
    template = PromptTemplate(cfg.identity_prompt_template)
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=rng)))
    state.mapper.train()
    cond_class = encode_text(frozen.text_encoder, cfg.class_prompt).detach()

    losses = []
    for idx, (image, pixel_mask) in enumerate(batch):
        try:
            with torch.no_grad():
                identity = frozen.identity_encoder.extract(image)
                z0 = frozen.codec.encode(image)
            v_exp = extract_expression(image, frozen.expression_extractor)
            cond_vec = compose_condition(
                identity,
                v_exp,
                state.mapper.uncond_expression,
                mode="train",
                rng=rng,
                drop_prob=cfg.drop_prob,
            )
            ident = map_to_identifier(cond_vec, state.mapper)
            cond_identity = inject_identifier(template, ident, frozen.text_encoder)

            t = sample_timestep(frozen.scheduler, rng)
            eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
            nl = add_noise(z0, t, eps, frozen.scheduler)

            if cfg.loss_kind == "reconstruction":
                loss = reconstruction_loss(nl, cond_identity, frozen.denoiser)
            else:
                mask = downsample_mask(pixel_mask, tuple(z0.shape[-2:]))
                if cfg.loss_kind == "masked_reconstruction":
                    loss = masked_reconstruction_loss(nl, cond_identity, mask, frozen.denoiser)
                else:
                    loss = cgdr_loss(nl, cond_identity, cond_class, mask, frozen.denoiser)
        except Exception as exc:
            raise type(exc)(f"sample {idx}: {exc}") from exc
        losses.append(loss)

    batch_loss = torch.stack(losses).mean()
    state.optimizer.zero_grad()
    batch_loss.backward()
    grad_sq = 0.0
    for p in state.mapper.parameters():
        if p.grad is not None:
            grad_sq += float(p.grad.pow(2).sum())
    state.optimizer.step()
    return state, LossReport(
        loss=float(batch_loss.item()), grad_norm=math.sqrt(grad_sq), loss_kind=cfg.loss_kind
    )


def train_mapper(
    samples: Sequence[tuple[torch.Tensor, torch.Tensor]],
    state: TrainState,
    cfg: TrainStepConfig,
    frozen: FrozenStack,
    steps: int,
    seed: int,
    loss_csv: Optional[str] = None,
    log_every: int = 1,
) -> list[LossReport]:
    """Drive `training_step` for a number of steps over a sample pool.

    Batches are drawn with replacement from `samples` using a generator
    derived from `seed`; the same seed replays the identical run. When
    `loss_csv` is given, (step, loss, grad_norm) rows are appended.
    """
    rng = torch.Generator().manual_seed(seed)
    batch_rng = torch.Generator().manual_seed(seed + 1)
    reports = []
    writer = None
    handle = None
    if loss_csv is not None:
        new_file = not os.path.exists(loss_csv)
        handle = open(loss_csv, "a", newline="")
        writer = csv.writer(handle)
        if new_file:
            writer.writerow(["step", "loss", "grad_norm"])
    try:
        for step in range(steps):
            take = min(cfg.batch_size, len(samples))
            idx = torch.randint(0, len(samples), (take,), generator=batch_rng)
            batch = [samples[int(i)] for i in idx]
            state, report = training_step(batch, state, cfg, frozen, rng)
            reports.append(report)
            if writer is not None and step % log_every == 0:
                writer.writerow([step, repr(report.loss), repr(report.grad_norm)])
    finally:
        if handle is not None:
            handle.close()
    return reports
