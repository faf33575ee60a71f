"""Condition-to-word mapping and prompt injection.

Two independent MLPs project the [identity, expression] condition into
the text-embedding space as a pair of word vectors. Prompts carry a
single literal placeholder token which expands, at the embedding layer
of the frozen text encoder, into those two vectors; everything else in
the sequence comes from the frozen vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, InputShapeError, SequenceLengthError, TemplateError
from .expression import ConditionVector, UnconditionalExpressionVector
from .interfaces import TextEncoder

PLACEHOLDER = "S*"


@dataclass(frozen=True)
class MapperConfig:
    """Widths and regularization of the two mapping networks."""

    condition_dim: int
    text_embed_dim: int
    hidden_dim: int | None = None  # defaults to condition_dim
    dropout: float = 0.1
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.condition_dim < 1 or self.text_embed_dim < 1:
            raise ConfigError("condition_dim and text_embed_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.condition_dim


class MappingNetwork(nn.Module):
    """Two (linear, dropout, LeakyReLU) blocks plus a final projection.

    Linear biases start at zero, so a zero condition vector maps to the
    final layer's bias in evaluation mode.
    """

    def __init__(self, cfg: MapperConfig):
        super().__init__()
        h = cfg.hidden
        self.net = nn.Sequential(
            nn.Linear(cfg.condition_dim, h),
            nn.Dropout(cfg.dropout),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.Linear(h, h),
            nn.Dropout(cfg.dropout),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.Linear(h, cfg.text_embed_dim),
        )
        for module in self.net:
            if isinstance(module, nn.Linear):
                nn.init.zeros_(module.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class IdentifierEmbedding:
    """The two text-space word vectors that stand for the injected face."""

    s1: torch.Tensor
    s2: torch.Tensor


class FaceMapper(nn.Module):
    """Trainable bundle: both mapping networks plus the unconditional vector.

    These are the only parameters updated when personalizing a frozen
    text-to-image stack.
    """

    def __init__(self, cfg: MapperConfig, expression_dim: int):
        super().__init__()
        self.cfg = cfg
        self.net1 = MappingNetwork(cfg)
        self.net2 = MappingNetwork(cfg)
        self.uncond_expression = UnconditionalExpressionVector(expression_dim)

    @property
    def expression_dim(self) -> int:
        return self.uncond_expression.dim


def map_to_identifier(cond: ConditionVector, mapper: FaceMapper) -> IdentifierEmbedding:
    """Project a condition vector into the two identifier word embeddings."""
    values = cond.values
    if values.shape[-1] != mapper.cfg.condition_dim:
        raise ConfigError(
            f"condition width {values.shape[-1]} != mapper input {mapper.cfg.condition_dim}"
        )
    return IdentifierEmbedding(s1=mapper.net1(values), s2=mapper.net2(values))


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt containing exactly one identifier placeholder."""

    text: str

    def __post_init__(self):
        n = self.text.count(PLACEHOLDER)
        if n != 1:
            raise TemplateError(
                f"template must contain exactly one '{PLACEHOLDER}', found {n}: {self.text!r}"
            )

    def split(self) -> tuple[str, str]:
        """Text before and after the placeholder."""
        prefix, suffix = self.text.split(PLACEHOLDER)
        return prefix.strip(), suffix.strip()

    def with_class_word(self, class_word: str) -> str:
        """The template with the placeholder replaced by a plain class word."""
        return self.text.replace(PLACEHOLDER, class_word)


def inject_identifier(
    template: PromptTemplate,
    ident: IdentifierEmbedding,
    text_encoder: TextEncoder,
) -> torch.Tensor:
    """Build the conditioning sequence for a prompt with the face injected.

    The placeholder position contributes the two identifier embeddings,
    in order; all other positions are frozen vocabulary embeddings. The
    assembled sequence then runs through the encoder's contextualization.

    Returns:
        Contextualized sequence [L, embed_dim] where L is the base
        tokenized length plus one (one placeholder token becomes two
        embeddings).
    """
    for name, vec in (("s1", ident.s1), ("s2", ident.s2)):
        if vec.shape != (text_encoder.embed_dim,):
            raise InputShapeError(
                f"{name} has shape {tuple(vec.shape)}, expected ({text_encoder.embed_dim},)"
            )
    prefix, suffix = template.split()
    parts = []
    prefix_ids = text_encoder.tokenize(prefix) if prefix else []
    suffix_ids = text_encoder.tokenize(suffix) if suffix else []
    if prefix_ids:
        parts.append(text_encoder.embed_tokens(prefix_ids))
    parts.append(torch.stack([ident.s1, ident.s2]))
    if suffix_ids:
        parts.append(text_encoder.embed_tokens(suffix_ids))
    sequence = torch.cat(parts, dim=0)
    if sequence.shape[0] > text_encoder.max_length:
        raise SequenceLengthError(
            f"injected sequence length {sequence.shape[0]} exceeds "
            f"max_length {text_encoder.max_length}"
        )
    return text_encoder.contextualize(sequence)
