"""Identity-conditioned generation.

A classifier-free-guided ancestral Euler loop over the discrete noise
schedule. Besides the default path (injected identifier, learned
unconditional expression) it provides delayed subject conditioning
(class word for the earliest steps, identifier afterwards) and
expression-conditional generation from a reference image.

Scheduler convention (pinned): the loop runs in noise-to-signal space.
sigma(t) = sqrt((1 - a_t) / a_t) for the cumulative signal fraction
a_t; the denoiser is called on x / sqrt(sigma^2 + 1) so it always sees
a variance-preserving latent; each update steps to sigma_down and adds
fresh noise of size sigma_up with
sigma_up^2 = sigma_next^2 * (sigma^2 - sigma_next^2) / sigma^2 and
sigma_down^2 = sigma_next^2 - sigma_up^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .diffusion import FrozenStack, NoiseScheduler
from .errors import (
    ConfigError,
    ExpressionExtractionError,
    InputShapeError,
    MissingReferenceError,
    StageError,
)
from .expression import compose_condition, extract_expression
from .interfaces import NoisePredictor, encode_text
from .mapper import FaceMapper, PromptTemplate, inject_identifier, map_to_identifier


@dataclass(frozen=True)
class InferenceConfig:
    """Denoising-loop settings."""

    num_steps: int = 30
    guidance_scale: float = 7.0
    scheduler_kind: str = "euler_ancestral"
    dsc_alpha: float = 0.8
    class_word: str = "a person"
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.scheduler_kind != "euler_ancestral":
            raise ConfigError(f"unknown scheduler_kind '{self.scheduler_kind}'")
        if not 0.0 <= self.dsc_alpha <= 1.0:
            raise ConfigError(f"dsc_alpha must be in [0, 1], got {self.dsc_alpha}")


def cfg_noise(
    z_t: torch.Tensor,
    t: int,
    cond: torch.Tensor,
    uncond: torch.Tensor,
    scale: float,
    denoiser: NoisePredictor,
) -> torch.Tensor:
    """Classifier-free-guided noise estimate.

    Extrapolates from the unconditional prediction towards the
    conditional one: eps_u + scale * (eps_c - eps_u).
    """
    eps_c = denoiser(z_t, t, cond)
    eps_u = denoiser(z_t, t, uncond)
    if eps_c.shape != z_t.shape or eps_u.shape != z_t.shape:
        raise InputShapeError("denoiser output shape differs from latent shape")
    return eps_u + scale * (eps_c - eps_u)


def _loop_timesteps(scheduler: NoiseScheduler, num_steps: int) -> list[int]:
    """num_steps timesteps from the top of the schedule down to 1."""
    T = scheduler.num_timesteps
    if num_steps == 1:
        return [T]
    return [int(round(T - i * (T - 1) / (num_steps - 1))) for i in range(num_steps)]


def _denoise_loop(
    latent_shape: torch.Size,
    cond_for_step: Callable[[int], torch.Tensor],
    uncond: torch.Tensor,
    cfg: InferenceConfig,
    denoiser: NoisePredictor,
    scheduler: NoiseScheduler,
    generator: torch.Generator,
) -> torch.Tensor:
    """Run the ancestral Euler loop; exactly num_steps updates."""
    timesteps = _loop_timesteps(scheduler, cfg.num_steps)
    sigmas = [scheduler.sigma(t) for t in timesteps] + [0.0]
    x = sigmas[0] * torch.randn(latent_shape, generator=generator)
    for i, t in enumerate(timesteps):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        z_in = x / math.sqrt(sigma**2 + 1.0)
        eps = cfg_noise(z_in, t, cond_for_step(i), uncond, cfg.guidance_scale, denoiser)
        denoised = x - sigma * eps
        var_ratio = max(0.0, (sigma**2 - sigma_next**2) / sigma**2)
        sigma_up = min(sigma_next, sigma_next * math.sqrt(var_ratio))
        sigma_down = math.sqrt(max(0.0, sigma_next**2 - sigma_up**2))
        d = (x - denoised) / sigma
        x = x + d * (sigma_down - sigma)
        if sigma_next > 0:
            x = x + sigma_up * torch.randn(latent_shape, generator=generator)
    return x


def _prepare_identifier_cond(
    face_image: torch.Tensor,
    template: PromptTemplate,
    frozen: FrozenStack,
    mapper: FaceMapper,
    expression_reference: Optional[torch.Tensor],
) -> torch.Tensor:
    """Identity conditioning with either the learned or a reference expression."""
    mapper.eval()
    with torch.no_grad():
        identity = frozen.identity_encoder.extract(face_image)
        if expression_reference is None:
            cond_vec = compose_condition(
                identity, None, mapper.uncond_expression, mode="inference_uncond"
            )
        else:
            v_exp = extract_expression(expression_reference, frozen.expression_extractor)
            cond_vec = compose_condition(
                identity, v_exp, mapper.uncond_expression, mode="inference_cond"
            )
        ident = map_to_identifier(cond_vec, mapper)
        return inject_identifier(template, ident, frozen.text_encoder)


def _run(
    face_image: torch.Tensor,
    cond_for_step: Callable[[int], torch.Tensor],
    cfg: InferenceConfig,
    frozen: FrozenStack,
) -> torch.Tensor:
    """Shared denoise-and-decode driver over prepared conditionings."""
    try:
        with torch.no_grad():
            latent_shape = frozen.codec.encode(face_image).shape
            uncond = encode_text(frozen.text_encoder, "")
    except Exception as exc:
        raise StageError("encode", exc) from exc
    generator = torch.Generator().manual_seed(cfg.seed)
    try:
        with torch.no_grad():
            latent = _denoise_loop(
                latent_shape, cond_for_step, uncond, cfg,
                frozen.denoiser, frozen.scheduler, generator,
            )
    except Exception as exc:
        raise StageError("denoise", exc) from exc
    try:
        with torch.no_grad():
            return frozen.codec.decode(latent)
    except Exception as exc:
        raise StageError("decode", exc) from exc


def generate(
    face_image: torch.Tensor,
    template: PromptTemplate,
    cfg: InferenceConfig,
    frozen: FrozenStack,
    mapper: FaceMapper,
) -> torch.Tensor:
    """Generate an image of the given face under the prompt template.

    Deterministic for a fixed seed; the expression slot uses the learned
    unconditional vector.
    """
    try:
        cond = _prepare_identifier_cond(face_image, template, frozen, mapper, None)
    except Exception as exc:
        raise StageError("map", exc) from exc
    return _run(face_image, lambda _i: cond, cfg, frozen)


@dataclass
class DscResult:
    """Delayed-subject-conditioning output with its switch diagnostics."""

    image: torch.Tensor
    switch_step: int
    schedule: list[str] = field(default_factory=list)  # "class" or "identifier" per step


def dsc_generate(
    face_image: torch.Tensor,
    template: PromptTemplate,
    cfg: InferenceConfig,
    frozen: FrozenStack,
    mapper: FaceMapper,
) -> DscResult:
    """Generate with the class word standing in for the identifier early on.

    The fraction `dsc_alpha` of the loop uses the identifier; the first
    ceil((1 - alpha) * num_steps) steps use the template with the
    placeholder replaced by the class word.
    """
    switch_step = math.ceil((1.0 - cfg.dsc_alpha) * cfg.num_steps)
    with torch.no_grad():
        cond_class = encode_text(frozen.text_encoder, template.with_class_word(cfg.class_word))
    try:
        cond_identity = _prepare_identifier_cond(face_image, template, frozen, mapper, None)
    except Exception as exc:
        raise StageError("map", exc) from exc
    schedule = ["class" if i < switch_step else "identifier" for i in range(cfg.num_steps)]

    def cond_for_step(i: int) -> torch.Tensor:
        return cond_class if schedule[i] == "class" else cond_identity

    image = _run(face_image, cond_for_step, cfg, frozen)
    return DscResult(image=image, switch_step=switch_step, schedule=schedule)


def expression_conditional_generate(
    face_image: torch.Tensor,
    expression_reference_image: torch.Tensor,
    template: PromptTemplate,
    cfg: InferenceConfig,
    frozen: FrozenStack,
    mapper: FaceMapper,
) -> torch.Tensor:
    """Generate with the expression taken from a reference image.

    A failed extraction on the reference surfaces as
    MissingReferenceError rather than a generic stage failure.
    """
    try:
        cond = _prepare_identifier_cond(
            face_image, template, frozen, mapper, expression_reference_image
        )
    except ExpressionExtractionError as exc:
        raise MissingReferenceError(
            f"expression extraction failed on the reference image: {exc}"
        ) from exc
    except Exception as exc:
        raise StageError("map", exc) from exc
    return _run(face_image, lambda _i: cond, cfg, frozen)
