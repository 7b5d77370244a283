import os
from pathlib import Path

import numpy as np
import pytest
import torch

from cfsteer.models import ConvClassifier, DiffusionSchedule, TinyUNet
from cfsteer.synthspur import FactorSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(FactorSpec(), 64, seed=11)


@pytest.fixture(scope="session")
def tiny_classifier():
    torch.manual_seed(0)
    f = ConvClassifier(num_classes=2, width=4, feature_dim=8, image_size=32).double()
    f.eval()
    for p in f.parameters():
        p.requires_grad_(False)
    return f


@pytest.fixture(scope="session")
def tiny_denoiser():
    torch.manual_seed(1)
    net = TinyUNet(base=4, emb_dim=8)
    # the output conv is zero-initialized; give it weights so the chain is non-trivial
    torch.nn.init.normal_(net.out.weight, std=0.05)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@pytest.fixture(scope="session")
def short_schedule():
    return DiffusionSchedule.linear(10, 1e-4, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CACHE = os.environ.get("CFSTEER_TEST_CACHE", str(Path(__file__).resolve().parents[1] / ".artifacts"))


@pytest.fixture(scope="session")
def desk_config():
    """Desk-scale configuration; trained models are cached under CFSTEER_TEST_CACHE."""
    from cfsteer.pipeline import RunConfig

    return RunConfig(cache_dir=CACHE).validate()


@pytest.fixture(scope="session")
def desk_artifacts(desk_config):
    from cfsteer.pipeline.artifacts import load_artifacts

    return load_artifacts(desk_config)


@pytest.fixture(scope="session")
def desk_run(desk_config, desk_artifacts, tmp_path_factory):
    """One full run at the default configuration; returns (run_dir, report)."""
    from cfsteer.pipeline import run_experiment

    return run_experiment(desk_config, desk_artifacts, tmp_path_factory.mktemp("desk") / "run")
