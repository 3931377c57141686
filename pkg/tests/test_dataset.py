import numpy as np
import pandas as pd
import pytest

from src.dataset import (INDEX_COLUMNS, TrainingDatasetLoader, generate_sample, random_path, simulate_patch,
                         split_assignment, write_training_dataset)
from src.exceptions import DomainError
from src.models import AberrationFunction

from tests.conftest import WAVELENGTH


@pytest.fixture
def dataset_config(desk_config):
    desk_config.dataset.speckle = False
    desk_config.phantom.noise_fraction = 0.0
    return desk_config


def test_split_is_four_to_one():
    labels = split_assignment(10, 4, seed=0)
    assert (labels == "train").sum() == 8
    assert (labels == "val").sum() == 2
    np.testing.assert_array_equal(labels, split_assignment(10, 4, seed=0))


def test_random_path_is_centered_and_straight(rng):
    path = random_path(rng, (1e-3, 2e-3), 8, 500.0)
    np.testing.assert_allclose(path.mean(axis=0), [1e-3, 2e-3], atol=1e-15)
    np.testing.assert_allclose(np.diff(path, n=2, axis=0), 0.0, atol=1e-15)
    speed = np.hypot(*(path[1] - path[0])) * 500.0
    assert 5e-3 <= speed <= 20e-3


def test_simulated_patch_dims(probe, scheme):
    positions = np.array([[0.0, 30 * WAVELENGTH], [0.1 * WAVELENGTH, 30 * WAVELENGTH]])
    ab = AberrationFunction.identity(probe.num_elements)
    patch = simulate_patch(probe, scheme, ab, positions, 9)
    assert patch.dims == (3, 2, 9, probe.num_elements)
    assert np.all(np.abs(patch.data[:, :, 4, :]) > 0)


def test_samples_are_deterministic(dataset_config):
    patch_a, ab_a = generate_sample(dataset_config, 3)
    patch_b, ab_b = generate_sample(dataset_config, 3)
    np.testing.assert_array_equal(patch_a.data, patch_b.data)
    np.testing.assert_array_equal(ab_a.values, ab_b.values)
    assert patch_a.dims == dataset_config.patch_dims()
    assert patch_a.track_ref == 3


def test_write_and_load_dataset(tmp_path, dataset_config):
    index = write_training_dataset(tmp_path, dataset_config, count=10, workers=2)
    assert list(index.columns) == INDEX_COLUMNS
    loader = TrainingDatasetLoader(tmp_path)
    assert loader.counts == {"train": 8, "val": 2}
    train_set = loader.split("train")
    assert len(train_set) == 8
    patch, ab = train_set[0]
    assert patch.dims == (3, 8, 9, 16)
    assert len(ab) == 16
    reference, truth = generate_sample(dataset_config, int(patch.track_ref))
    np.testing.assert_array_equal(patch.data, reference.data)
    np.testing.assert_array_equal(ab.values, truth.values)


def test_loader_rejects_broken_index(tmp_path, dataset_config):
    write_training_dataset(tmp_path, dataset_config, count=2)
    index = pd.read_csv(tmp_path / "index.csv")
    index.loc[0, "split"] = "test"
    index.to_csv(tmp_path / "index.csv", index=False)
    with pytest.raises(DomainError):
        TrainingDatasetLoader(tmp_path)


def test_loader_rejects_missing_files(tmp_path, dataset_config):
    write_training_dataset(tmp_path, dataset_config, count=2)
    (tmp_path / "patch_00001.ulmt").unlink()
    with pytest.raises(DomainError):
        TrainingDatasetLoader(tmp_path)


def test_loader_needs_index(tmp_path):
    with pytest.raises(DomainError):
        TrainingDatasetLoader(tmp_path)
