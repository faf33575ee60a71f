"""Expression guidance: expression features and conditional dropout.

Expression coefficients come from a frozen, pluggable 3D-reconstruction
front end. During training the expression feature is dropped with a
fixed probability and replaced by a learnable unconditional vector, so
that at inference the model can generate with free (text-driven)
expressions by default, or follow a reference expression on demand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import torch
import torch.nn as nn

from .encoder import MultiScaleIdentityFeature
from .errors import (
    ConfigError,
    ExpressionExtractionError,
    InputShapeError,
    MissingReferenceError,
    NumericError,
)
from .interfaces import ExpressionExtractor

DROP_PROB = 0.2

ConditionMode = Literal["train", "inference_uncond", "inference_cond"]


@dataclass
class ExpressionFeature:
    """Expression coefficient vector of one face image."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 1:
            raise InputShapeError(f"expression feature must be 1-D, got {self.values.shape}")
        if not torch.isfinite(self.values).all():
            raise NumericError("expression feature contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class UnconditionalExpressionVector(nn.Module):
    """The learnable stand-in used whenever the real expression is dropped.

    Zero-initialized; updated only on steps where at least one sample
    takes the drop branch.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.vector = nn.Parameter(torch.zeros(dim))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


@dataclass
class ConditionVector:
    """Concatenated [identity, expression] conditioning of one sample."""

    values: torch.Tensor
    used_unconditional: bool


def extract_expression(
    image: torch.Tensor, extractor: ExpressionExtractor
) -> ExpressionFeature:
    """Run the frozen expression extractor on an aligned face image.

    Extractor failures (no face, unsupported resolution) surface as
    ExpressionExtractionError carrying the extractor's message.
    """
    try:
        values = extractor(image)
    except Exception as exc:  # noqa: BLE001 - plugin boundary
        raise ExpressionExtractionError(str(exc)) from exc
    values = torch.as_tensor(values)
    if values.shape != (extractor.dim,):
        raise InputShapeError(
            f"extractor returned shape {tuple(values.shape)}, expected ({extractor.dim},)"
        )
    return ExpressionFeature(values=values)


def compose_condition(
    v_id: MultiScaleIdentityFeature | torch.Tensor,
    v_exp: Optional[ExpressionFeature],
    uncond: UnconditionalExpressionVector,
    mode: ConditionMode,
    rng: Optional[torch.Generator] = None,
    drop_prob: float = DROP_PROB,
) -> ConditionVector:
    """Build the [identity, expression] condition for one sample.

    train: with probability `drop_prob` the expression feature is
    replaced by the learnable unconditional vector (per-sample,
    independent draws from `rng`). inference_uncond: always the
    unconditional vector, the default generation path.
    inference_cond: always the supplied reference expression.

    The identity part always comes first; a sample never mixes the real
    and unconditional expression.
    """
    identity = v_id.concatenated if isinstance(v_id, MultiScaleIdentityFeature) else v_id
    if identity.ndim != 1:
        raise InputShapeError(f"identity part must be 1-D, got {identity.shape}")
    if v_exp is not None and v_exp.dim != uncond.dim:
        raise ConfigError(
            f"expression width {v_exp.dim} != unconditional width {uncond.dim}"
        )

    if mode == "train":
        if rng is None:
            raise ConfigError("train mode requires a seeded generator")
        if v_exp is None:
            raise MissingReferenceError("train mode requires an extracted expression")
        dropped = bool(torch.rand((), generator=rng) < drop_prob)
        tail = uncond.vector if dropped else v_exp.values
        return ConditionVector(torch.cat([identity, tail]), used_unconditional=dropped)
    if mode == "inference_uncond":
        return ConditionVector(torch.cat([identity, uncond.vector]), used_unconditional=True)
    if mode == "inference_cond":
        if v_exp is None:
            raise MissingReferenceError(
                "expression-conditional mode requires a reference expression"
            )
        return ConditionVector(torch.cat([identity, v_exp.values]), used_unconditional=False)
    raise ConfigError(f"unknown condition mode '{mode}'")
