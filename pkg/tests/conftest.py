from dataclasses import replace

import pytest
import torch

from wsidistill.config import Config, DataConfig, EncoderConfig, TrainConfig, ViewConfig
from wsidistill.pyramid import SyntheticSpec, generate_synthetic_pyramid, load_manifest

torch.set_num_threads(1)


def tiny_model(**overrides) -> EncoderConfig:
    base = dict(variant_name="tiny", image_size=16, patch_size=4, embed_dim=8, depth=1, heads=2, mlp_ratio=2.0,
                head_hidden=16, head_bottleneck=8, out_dim=4, projector_hidden=8)
    return EncoderConfig(**{**base, **overrides})


def tiny_config(root=None, **train) -> Config:
    views = ViewConfig(global_size=16, local_size=8, n_local=2, shuffle_grid=2, multiscale_size=32)
    t = TrainConfig(**{"batch_size": 2, "epochs": 2, "warmup_epochs": 1, "dtype": "float64", **train})
    return Config(data=DataConfig(root=str(root) if root else "", samples_per_slide=2), views=views,
                  model=tiny_model(), train=t).validate()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_synthetic_pyramid(SyntheticSpec(num_slides=4, level0_size=256, tile_size=64, seed=3), root)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus):
    return load_manifest(tiny_corpus)


@pytest.fixture
def cfg(tiny_corpus):
    return tiny_config(tiny_corpus)


def with_train(cfg: Config, **kw) -> Config:
    return replace(cfg, train=replace(cfg.train, **kw))
