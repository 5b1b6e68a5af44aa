import numpy as np
import pytest

from pah.config import RunConfig
from pah.datasets import make_synthetic_tasks
from pah.model import ModelDims, PahModel


def tiny_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    cfg.epochs = 1
    cfg.data.num_tasks = 3
    cfg.data.classes_per_task = 2
    cfg.data.samples_per_class = 6
    cfg.data.test_samples_per_class = 4
    cfg.data.channels, cfg.data.height, cfg.data.width = 1, 6, 6
    cfg.data.template_grid = 2
    cfg.model.hidden, cfg.model.feature_dim, cfg.model.hyper_hidden = 12, 5, 8
    cfg.model.proto_h = cfg.model.proto_w = 3
    for key, value in overrides.items():
        section, _, name = key.rpartition("__")
        setattr(getattr(cfg, section) if section else cfg, name, value)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_tasks():
    rng = np.random.default_rng(3)
    return make_synthetic_tasks(3, 2, 6, (1, 6, 6), rng, noise=0.5, test_samples_per_class=4, template_grid=2)


@pytest.fixture
def small_dims():
    return ModelDims(channels=1, height=6, width=6, num_classes=2, hidden=12, feature_dim=5,
                     hyper_hidden=8, proto_h=3, proto_w=3)


@pytest.fixture
def small_model(small_dims):
    model = PahModel.create(small_dims, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(1)
    model.register_task(1, [rng.normal(size=(1, 3, 3)) for _ in range(2)])
    return model
