from pathlib import Path
from typing import Any

import pytest
import yaml

from maskfed.models.vit import ModelConfig, ParamSet, init_params
from maskfed.utils.datasets import LabeledImage, synth_dataset
from maskfed.utils.utils import ExperimentConfig


@pytest.fixture(scope="session")
def desk_config() -> ModelConfig:
    return ModelConfig()


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(
        image_h=4,
        image_w=4,
        channels=1,
        patch=2,
        embed_dim=4,
        heads=2,
        blocks=1,
        mlp_hidden=6,
        classes=3,
    )


@pytest.fixture(scope="session")
def attack_config() -> ModelConfig:
    """Attack-exact model whose z0 system is overdetermined (S+1 <= D) and
    whose patch embedding has full row rank (P*P*C <= D). A second block
    spreads the loss gradient over every token."""
    return ModelConfig(
        image_h=4,
        image_w=4,
        channels=1,
        patch=2,
        embed_dim=8,
        heads=2,
        blocks=2,
        mlp_hidden=8,
        classes=3,
        first_block_pre_ln_identity=True,
        first_block_residual=False,
    )


@pytest.fixture
def tiny_params(tiny_config: ModelConfig) -> ParamSet:
    return init_params(tiny_config, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config: ModelConfig) -> list[LabeledImage]:
    return synth_dataset(
        classes=tiny_config.classes,
        per_class=6,
        h=tiny_config.image_h,
        w=tiny_config.image_w,
        c=tiny_config.channels,
        seed=11,
    )


@pytest.fixture
def tiny_config_dict(tmp_path: Path) -> dict[str, Any]:
    return {
        "model": {
            "image_h": 4,
            "image_w": 4,
            "channels": 1,
            "patch": 2,
            "embed_dim": 8,
            "heads": 2,
            "blocks": 1,
            "mlp_hidden": 8,
            "classes": 3,
        },
        "federation": {
            "num_clients": 3,
            "epochs": 2,
            "batch_size": 2,
            "learning_rate": 0.05,
        },
        "policies": ["none", "per-epoch:0.5"],
        "dataset": {
            "kind": "synth",
            "classes": 3,
            "per_class": 4,
            "test_per_class": 2,
        },
        "attack": {
            "seeds": [0, 1],
            "policies": ["none", "fixed-position", "per-epoch:0.5"],
        },
        "analysis": {
            "epochs": 4,
            "clients": 3,
            "zero_probs": [0.5],
            "trials": 2000,
        },
        "output_dir": (tmp_path / "out").as_posix(),
        "seed": 7,
    }


@pytest.fixture
def temp_config(tiny_config_dict: dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfig.from_dict(tiny_config_dict)


@pytest.fixture
def config_file(tmp_path: Path, tiny_config_dict: dict[str, Any]) -> Path:
    path = tmp_path / "config.yaml"
    with open(path, "w") as file:
        yaml.dump(tiny_config_dict, file)
    return path
