import numpy as np
import pytest

from latent_gaze.config import RunConfig
from latent_gaze.synth_eye import generate_dataset, load_arrays


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two train subjects and one test subject; enough for plumbing tests."""
    root = tmp_path_factory.mktemp("tiny")
    splits = generate_dataset(2, 1, 24, 7, root, test_samples_per_subject=40, workers=1)
    return root, splits


@pytest.fixture(scope="session")
def tiny_arrays(tiny_dataset):
    _, splits = tiny_dataset
    return load_arrays(splits.train), load_arrays(splits.test)


@pytest.fixture
def quick_cfg():
    return RunConfig().with_overrides(
        train={"epochs": 1, "batch_size": 16, "seed": 3},
        calibration={"steps": 5},
        steering={"steps": 20, "batch_size": 16, "max_decoder_mae": 180.0},
        bench={"runs": 20, "warmup": 2},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_arrays):
    """A briefly trained checkpoint; poor accuracy but a real gaze head."""
    from latent_gaze.training import train

    cfg = RunConfig().with_overrides(train={"epochs": 3, "batch_size": 16, "seed": 3})
    return train(tiny_arrays[0], cfg).checkpoint
