import numpy as np
import pytest
import torch

from anchorvid.anchor_pipeline.index import build_index
from anchorvid.backbone import AudioFeatures, Conditions, DiTModel, ModelConfig
from anchorvid.latent_world import AnchorSet, LatentVideo
from anchorvid.roles import GLOBAL_ROLE, AnchorRole
from anchorvid.rope3d import RopeConfig
from anchorvid.superset_sampler import SourceVideo
from anchorvid.synth_world import gen_episode


def assert_close(actual, expected, rtol=1e-9, atol=1e-9):
    if isinstance(actual, LatentVideo):
        actual = actual.data
    if isinstance(expected, LatentVideo):
        expected = expected.data
    torch.testing.assert_close(actual, expected, rtol=rtol, atol=atol)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(
        blocks=2,
        model_dim=8,
        heads=1,
        head_dim=8,
        timestep_embed_dim=8,
        mlp_ratio=2.0,
    )
    values.update(overrides)
    return ModelConfig(**values)


def randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Replace every parameter (zero-initialized ones included) with seeded noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


@pytest.fixture
def tiny_model() -> DiTModel:
    torch.manual_seed(0)
    model = DiTModel(tiny_model_config(), RopeConfig(head_dim=8)).double()
    return randomize(model)


def random_video(frames, height=4, width=4, channels=4, seed=0, dtype=torch.float64) -> LatentVideo:
    gen = torch.Generator().manual_seed(seed)
    return LatentVideo(torch.randn(frames, height, width, channels, generator=gen, dtype=dtype))


@pytest.fixture
def small_conditions() -> Conditions:
    """4x4 first frame, text, 8 audio frames (2 windows) and three anchors."""
    anchors = AnchorSet.from_items(
        [
            (GLOBAL_ROLE, random_video(1, seed=11)),
            (AnchorRole.viewpoint("back"), random_video(1, width=2, seed=12)),
            (AnchorRole.expression("happy"), random_video(1, height=2, width=2, seed=13)),
        ]
    )
    gen = torch.Generator().manual_seed(14)
    return Conditions(
        first_frame=random_video(1, seed=10),
        text_ids=(2, 3),
        audio=AudioFeatures(torch.randn(8, 8, generator=gen, dtype=torch.float64)),
        anchors=anchors,
    )


@pytest.fixture(scope="session")
def mixed_episode():
    return gen_episode(seed=3, duration_s=40.0, scenario="mixed")


@pytest.fixture(scope="session")
def turn_episode():
    return gen_episode(seed=4, duration_s=20.0, scenario="turn_around")


@pytest.fixture(scope="session")
def idle_episode():
    return gen_episode(seed=5, duration_s=10.0, scenario="idle")


@pytest.fixture(scope="session")
def mixed_source(mixed_episode) -> SourceVideo:
    return SourceVideo(mixed_episode, build_index(mixed_episode, seed=0))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
