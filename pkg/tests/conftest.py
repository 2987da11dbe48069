import numpy as np
import pytest

from taskfuse import params as pp
from taskfuse import taskbench as tb
from taskfuse import tinyvit as tv


def small_model_config(**overrides):
    """A deliberately tiny architecture for gradient checks and oracles."""
    kw = dict(image_size=8, patch_size=4, embed_dim=8, num_layers=2,
              num_heads=2, mlp_dim=12, num_classes=3, seed=7)
    kw.update(overrides)
    return tv.ModelConfig(**kw)


def toy_param_set(groups=None, hash_="cfg0"):
    if groups is None:
        groups = {"patch_embed": np.array([1.5, -2.0]), "head": np.array([0.5])}
    tags = {}
    for name in groups:
        tags[name] = name if name in pp.GROUP_TAGS else "mlp"
    return pp.ParameterSet(groups=groups, tags=tags, model_config_hash=hash_)


@pytest.fixture(scope="session")
def model_cfg():
    return small_model_config()


@pytest.fixture(scope="session")
def seeded_params(model_cfg):
    return tv.init_model(model_cfg)


@pytest.fixture(scope="session")
def tiny_task(model_cfg):
    spec = tb.TaskSpec(task_id="stripes", generator_kind="stripes",
                       num_classes=model_cfg.num_classes, samples_train=96,
                       samples_test=48, samples_fewshot_per_class=10, seed=3)
    return spec, tb.generate_task(spec, model_cfg)
