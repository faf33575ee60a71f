"""Multi-scale identity encoder.

A ViT-style face encoder with feature taps at a configurable set of
depths. During pretraining an additive-angular-margin loss is applied to
the concatenation of all tap features, so shallow taps become identity
discriminative instead of carrying pose/background nuisance. The module
also provides the triplet-based similarity-distribution analysis and its
verification AUC used to compare tap quality across encoders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, EmptyInputError, InputShapeError, NumericError, SamplingError

_COS_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture and margin-loss settings for the identity encoder.

    `depth_set` lists the transformer layers whose classifier-token
    outputs are tapped; the concatenation of all taps is the identity
    feature. Margin `m` (radians) and scale `s` follow the standard
    additive-angular-margin defaults when unspecified.
    """

    num_layers: int = 12
    depth_set: tuple[int, ...] = (3, 6, 9, 12)
    embed_dim: int = 64
    num_identities: int = 2
    margin: float = 0.5
    scale: float = 64.0
    image_size: int = 32
    patch_size: int = 8
    num_heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be positive, got {self.num_layers}")
        if not self.depth_set:
            raise ConfigError("depth_set must be non-empty")
        if any(d2 <= d1 for d1, d2 in zip(self.depth_set, self.depth_set[1:])):
            raise ConfigError(f"depth_set must be strictly increasing, got {self.depth_set}")
        if self.depth_set[0] < 1 or self.depth_set[-1] > self.num_layers:
            raise ConfigError(
                f"depth_set entries must lie in [1, {self.num_layers}], got {self.depth_set}"
            )
        if not 0.0 < self.margin < math.pi / 2:
            raise ConfigError(f"margin must be in (0, pi/2), got {self.margin}")
        if self.scale <= 0.0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.num_identities < 2:
            raise ConfigError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")

    @property
    def feature_dim(self) -> int:
        """Width of the concatenated multi-scale feature."""
        return len(self.depth_set) * self.embed_dim


@dataclass
class MultiScaleIdentityFeature:
    """Per-tap identity vectors plus their in-order concatenation."""

    per_level: list[torch.Tensor]
    depths: tuple[int, ...]

    def __post_init__(self):
        if len(self.per_level) != len(self.depths):
            raise InputShapeError("one feature vector per tap depth required")

    @property
    def concatenated(self) -> torch.Tensor:
        return torch.cat(list(self.per_level), dim=-1)

    def level(self, depth: int) -> torch.Tensor:
        """Feature vector at one tap depth."""
        try:
            idx = self.depths.index(depth)
        except ValueError:
            raise ConfigError(f"depth {depth} is not a tap depth {self.depths}") from None
        return self.per_level[idx]


class MarginHead(nn.Module):
    """Class-weight matrix of the margin softmax; one column per identity."""

    def __init__(self, feature_dim: int, num_identities: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(feature_dim, num_identities))
        nn.init.xavier_uniform_(self.weight)

    @property
    def num_identities(self) -> int:
        return self.weight.shape[1]

    def cosines(self, features: torch.Tensor) -> torch.Tensor:
        """Cosine between each (normalized) feature and each weight column."""
        w = F.normalize(self.weight, dim=0)
        v = F.normalize(features, dim=-1)
        return v @ w


class TransformerLayer(nn.Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x


class MultiScaleIdentityEncoder(nn.Module):
    """ViT-style encoder tapping the classifier token at several depths.

    The tap at depth d is the classifier-token output of layer d,
    L2-normalized per level; the identity feature is the concatenation
    over the configured depth set.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        num_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch_embed = nn.Conv2d(
            3, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
            for _ in range(cfg.num_layers)
        )

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Per-tap classifier-token features, each [B, embed_dim], unit norm."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise InputShapeError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise InputShapeError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, "
                f"got {images.shape[2]}x{images.shape[3]}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        taps = []
        want = set(self.cfg.depth_set)
        for depth, layer in enumerate(self.layers, start=1):
            x = layer(x)
            if depth in want:
                taps.append(F.normalize(x[:, 0], dim=-1))
        return taps

    def extract(self, image: torch.Tensor) -> MultiScaleIdentityFeature:
        """Multi-scale feature for a single [3, H, W] image (no gradients)."""
        if image.ndim != 3:
            raise InputShapeError(f"expected a [3, H, W] image, got {tuple(image.shape)}")
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                taps = self.forward(image.unsqueeze(0))
        finally:
            self.train(was_training)
        return MultiScaleIdentityFeature(
            per_level=[t[0] for t in taps], depths=tuple(self.cfg.depth_set)
        )


def extract_multiscale_identity(
    image: torch.Tensor, encoder: MultiScaleIdentityEncoder
) -> MultiScaleIdentityFeature:
    """Extract the per-tap and concatenated identity feature of one image."""
    return encoder.extract(image)


def margin_softmax_loss(
    features: torch.Tensor,
    labels: torch.Tensor,
    head: MarginHead,
    margin: float,
    scale: float,
) -> torch.Tensor:
    """Additive-angular-margin softmax loss on arbitrary feature vectors.

    The margin is added to the target-class *angle* only; the scale
    multiplies every logit. Features and weight columns are normalized
    inside, so the loss is invariant to positive rescaling of either.

    cos(theta + margin) stops being monotone once theta exceeds
    pi - margin; past that point the target logit switches to the
    standard linear fallback cos(theta) - margin*sin(margin), which
    removes the degenerate optimum at theta = pi without affecting the
    formula anywhere cosines are moderate.

    Args:
        features: [B, D] or [D] raw (unnormalized) feature vectors.
        labels: [B] or scalar integer class indices.
        head: weight matrix with one column per class.
        margin: angular margin in radians.
        scale: logit scale.

    Returns:
        Mean negative log-probability of the target classes (scalar tensor).
    """
    squeeze = features.ndim == 1
    if squeeze:
        features = features.unsqueeze(0)
        labels = torch.as_tensor(labels).reshape(1)
    labels = labels.long()
    if not torch.isfinite(features).all():
        raise NumericError("identity features contain non-finite values")
    if labels.min() < 0 or labels.max() >= head.num_identities:
        raise IndexError(
            f"label out of range [0, {head.num_identities}): {labels.tolist()}"
        )
    cos = head.cosines(features).clamp(-_COS_CLAMP, _COS_CLAMP)
    target_cos = cos.gather(1, labels.view(-1, 1)).squeeze(1)
    with_margin = torch.cos(torch.acos(target_cos) + margin)
    wrap_threshold = math.cos(math.pi - margin)
    target_logit = torch.where(
        target_cos > wrap_threshold,
        with_margin,
        target_cos - margin * math.sin(margin),
    )
    one_hot = F.one_hot(labels, head.num_identities).to(cos.dtype)
    logits = scale * (one_hot * target_logit.unsqueeze(1) + (1.0 - one_hot) * cos)
    return F.cross_entropy(logits, labels)


def multiscale_arcface_loss(
    feature: MultiScaleIdentityFeature | torch.Tensor,
    label: int | torch.Tensor,
    head: MarginHead,
    cfg: EncoderConfig,
) -> torch.Tensor:
    """Margin-softmax loss over the concatenated multi-scale identity vector."""
    vec = feature.concatenated if isinstance(feature, MultiScaleIdentityFeature) else feature
    if vec.shape[-1] != head.weight.shape[0]:
        raise InputShapeError(
            f"feature width {vec.shape[-1]} != head rows {head.weight.shape[0]}"
        )
    label_t = torch.as_tensor(label)
    return margin_softmax_loss(vec, label_t, head, cfg.margin, cfg.scale)


@dataclass
class SimilarityDistribution:
    """Cosine similarity scores of same/different identity pairs at one tap."""

    same_scores: list[float]
    diff_scores: list[float]
    layer: int

    def __post_init__(self):
        eps = 1e-6
        for s in list(self.same_scores) + list(self.diff_scores):
            if not -1.0 - eps <= s <= 1.0 + eps:
                raise ValueError(f"cosine score outside [-1, 1]: {s}")


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(F.cosine_similarity(a.reshape(1, -1), b.reshape(1, -1)).item())


def similarity_distribution(
    gallery: Mapping[str, Sequence[MultiScaleIdentityFeature]],
    layer: int,
    seed: int,
) -> SimilarityDistribution:
    """Sample one anchor/positive/negative triplet per identity.

    For every identity (in sorted key order) an anchor and a distinct
    positive are drawn uniformly from its images, and a negative is
    drawn uniformly from the pooled images of all other identities.
    Cosines are computed on the requested tap depth.

    Args:
        gallery: identity -> list of extracted features (>= 2 each).
        layer: tap depth at which similarities are measured.
        seed: RNG seed; fixed seed gives identical output.
    """
    identities = sorted(gallery)
    if len(identities) < 2:
        raise SamplingError(f"need >= 2 identities, got {len(identities)}")
    for ident in identities:
        if len(gallery[ident]) < 2:
            raise SamplingError(
                f"identity '{ident}' has {len(gallery[ident])} image(s); need >= 2"
            )
    rng = np.random.default_rng(seed)
    same, diff = [], []
    for ident in identities:
        feats = gallery[ident]
        a_idx, p_idx = rng.choice(len(feats), size=2, replace=False)
        others = [(o, j) for o in identities if o != ident for j in range(len(gallery[o]))]
        n_ident, n_idx = others[rng.integers(len(others))]
        anchor = feats[a_idx].level(layer)
        same.append(_cosine(anchor, feats[p_idx].level(layer)))
        diff.append(_cosine(anchor, gallery[n_ident][n_idx].level(layer)))
    return SimilarityDistribution(same_scores=same, diff_scores=diff, layer=layer)


def roc_auc(dist: SimilarityDistribution) -> float:
    """Probability that a random same-score exceeds a random diff-score.

    Ties count 0.5. Computed by sorting the diff scores and counting,
    per same score, how many diff scores lie strictly below / tie.
    """
    same = np.asarray(dist.same_scores, dtype=np.float64)
    diff = np.asarray(dist.diff_scores, dtype=np.float64)
    if same.size == 0 or diff.size == 0:
        raise EmptyInputError("both same and diff score lists must be non-empty")
    diff_sorted = np.sort(diff)
    below = np.searchsorted(diff_sorted, same, side="left")
    below_or_eq = np.searchsorted(diff_sorted, same, side="right")
    wins = float(below.sum())
    ties = float((below_or_eq - below).sum())
    return (wins + 0.5 * ties) / (same.size * diff.size)


@dataclass(frozen=True)
class PretrainConfig:
    """Identity-encoder pretraining settings.

    Full-scale defaults (30 epochs, batch 1024, lr 1e-3) are recorded for
    provenance only; desk-scale runs override `steps` and `batch_size`.
    """

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    epochs: int = 30
    full_scale_batch_size: int = 1024
    loss_mode: str = "multiscale"  # or "deepest": margin loss on the last tap only
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in ("multiscale", "deepest"):
            raise ConfigError(f"unknown loss_mode '{self.loss_mode}'")


@dataclass
class PretrainResult:
    encoder: MultiScaleIdentityEncoder
    head: MarginHead
    losses: list[float] = field(default_factory=list)


def pretrain_identity_encoder(
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: EncoderConfig,
    train_cfg: PretrainConfig,
) -> PretrainResult:
    """Train an encoder + margin head on a labeled face set.

    In "multiscale" mode the margin loss sees the concatenated tap
    vector; in "deepest" mode it sees only the deepest tap (the control
    configuration for tap-quality comparisons). Batches are drawn with a
    seeded generator, so runs are reproducible.
    """
    torch.manual_seed(train_cfg.seed)
    encoder = MultiScaleIdentityEncoder(cfg)
    feat_dim = cfg.feature_dim if train_cfg.loss_mode == "multiscale" else cfg.embed_dim
    head = MarginHead(feat_dim, cfg.num_identities)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.lr)
    sampler = torch.Generator().manual_seed(train_cfg.seed)
    n = images.shape[0]
    losses = []
    encoder.train()
    for _ in range(train_cfg.steps):
        idx = torch.randint(0, n, (min(train_cfg.batch_size, n),), generator=sampler)
        taps = encoder(images[idx])
        if train_cfg.loss_mode == "multiscale":
            feats = torch.cat(taps, dim=-1)
        else:
            feats = taps[-1]
        loss = margin_softmax_loss(feats, labels[idx], head, cfg.margin, cfg.scale)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    encoder.eval()
    return PretrainResult(encoder=encoder, head=head, losses=losses)


def gallery_from_images(
    encoder: MultiScaleIdentityEncoder,
    images: torch.Tensor,
    labels: torch.Tensor,
) -> dict[str, list[MultiScaleIdentityFeature]]:
    """Group extracted features by identity label."""
    gallery: dict[str, list[MultiScaleIdentityFeature]] = {}
    for i in range(images.shape[0]):
        gallery.setdefault(str(int(labels[i])), []).append(encoder.extract(images[i]))
    return gallery
