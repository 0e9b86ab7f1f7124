import numpy as np
import pytest
import torch

from roigan.data import PhantomSpec, generate_phantom_dataset, load_dataset


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(n_anatomies=10)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("phantoms")
    manifest = generate_phantom_dataset(small_spec, root, seed=7)
    return load_dataset(manifest)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    # keeps tests that build modules without explicit seeding reproducible
    torch.manual_seed(0)
    np.random.seed(0)
