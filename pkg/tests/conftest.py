import pytest
import torch

from facepersona.encoder import EncoderConfig, PretrainConfig, pretrain_identity_encoder
from facepersona.synthetic import make_identity_dataset
from facepersona.toys import ToyStackConfig, build_toy_eval, build_toy_stack

# Toy dimensions shared across the suite: 32px images, 2x4x4 latents,
# 32-wide text space, 16-wide expression coefficients.
STACK_CFG = ToyStackConfig()
ENCODER_CFG = EncoderConfig(
    num_layers=4, depth_set=(1, 2, 3, 4), embed_dim=32,
    image_size=32, patch_size=8, num_identities=16, scale=16.0,
)


@pytest.fixture(scope="session")
def toy_stack():
    return build_toy_stack(seed=0, cfg=STACK_CFG, encoder_cfg=ENCODER_CFG)


@pytest.fixture(scope="session")
def toy_eval():
    return build_toy_eval(seed=0)


@pytest.fixture(scope="session")
def face_batch():
    """16 identities x 4 variations of procedural faces with masks."""
    images, labels, masks = make_identity_dataset(16, 4, size=32, seed=0)
    return images, labels, masks


@pytest.fixture(scope="session")
def trained_encoder(face_batch):
    """A briefly trained multi-scale encoder (shared; ~30 s once)."""
    images, labels, _ = face_batch
    result = pretrain_identity_encoder(
        images, labels, ENCODER_CFG,
        PretrainConfig(steps=500, batch_size=32, lr=1e-3, loss_mode="multiscale", seed=0),
    )
    return result.encoder


def condition_dim() -> int:
    return ENCODER_CFG.feature_dim + STACK_CFG.expression_dim


@pytest.fixture()
def fresh_mapper():
    from facepersona.mapper import FaceMapper, MapperConfig

    torch.manual_seed(7)
    return FaceMapper(
        MapperConfig(condition_dim=condition_dim(), text_embed_dim=STACK_CFG.text_embed_dim),
        expression_dim=STACK_CFG.expression_dim,
    )
