import numpy as np
import pytest
import torch

from loreun.datasets import ArrayDataset, make_synthetic_images

torch.set_num_threads(1)


def balanced_dataset(n_train=5000, n_test=100, num_classes=10, shape=(1, 2, 2), seed=0):
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    labels = np.arange(n) % num_classes
    feats = rng.random((n, *shape), dtype=np.float32)
    mask = np.zeros(n, bool)
    mask[:n_train] = True
    return ArrayDataset(feats, labels, mask, num_classes)


@pytest.fixture(scope="session")
def small_images():
    """A 2k-train CIFAR-shaped synthetic set."""
    return make_synthetic_images(n_train=2000, n_test=400, size=16, seed=3)


@pytest.fixture(scope="session")
def digits():
    from loreun.datasets import load_digits_dataset
    return load_digits_dataset(seed=0)


@pytest.fixture(scope="session")
def trained_ddpm(digits):
    """Toy class-conditional DDPM on 8x8 digits (about a minute on one CPU thread)."""
    from loreun.diffusion import DiffusionConfig, train_diffusion
    return train_diffusion(digits, digits.train_indices, DiffusionConfig())[0]


@pytest.fixture(scope="session")
def digit_classifier(digits):
    from loreun.models import train_external_classifier
    return train_external_classifier(digits)[0]


@pytest.fixture(scope="session")
def small_classifier(small_images):
    from loreun.models import TrainConfig, train_classifier
    return train_classifier(small_images, small_images.train_indices, TrainConfig(epochs=15, seed=0))[0]


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one pass/fail line for the run summary."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
