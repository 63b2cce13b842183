import numpy as np
import pytest

from jedi_defense.entropy import WindowGeometry, fit_clean_stats
from jedi_defense.imagecore import gen_scene
from jedi_defense.mask_ae import SparseAEModel, generate_training_masks, train_sae

MODEL_COUNT = 2000
MODEL_EPOCHS = 500
MODEL_SEED = 0


@pytest.fixture(scope="session")
def trained_model(request) -> SparseAEModel:
    """The default 64-grid model, trained once and kept in the pytest cache."""
    cache_dir = request.config.cache.mkdir("jedi-sae")
    path = cache_dir / f"model-n{MODEL_COUNT}-e{MODEL_EPOCHS}-s{MODEL_SEED}.json"
    if path.exists():
        return SparseAEModel.load(path)
    data = generate_training_masks(MODEL_COUNT, grid=64, seed=MODEL_SEED)
    model = train_sae(data, epochs=MODEL_EPOCHS, seed=MODEL_SEED)
    model.save(path)
    return model


@pytest.fixture(scope="session")
def clean_stats():
    images = [gen_scene(224, 224, seed=10_000 + i).image for i in range(30)]
    return fit_clean_stats(images, WindowGeometry(8, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
