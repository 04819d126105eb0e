import numpy as np
import pytest
import torch

torch.set_num_threads(1)

import helpers  # noqa: E402  (pins NLDH_CACHE before nldh artifact work)
from nldh.pipeline import HidingModel  # noqa: E402


@pytest.fixture(scope="session")
def small_images():
    """Cheap 160px images for unit tests (large enough for one latent tile)."""
    from nldh.sampledata import synth_corpus

    return synth_corpus(6, size=160, seed=21)


@pytest.fixture(scope="session")
def desk_codec():
    return helpers.desk_codec()


@pytest.fixture(scope="session")
def val_images():
    return helpers.corpus()[1]


@pytest.fixture(scope="session")
def eval_images():
    return helpers.eval_corpus()


@pytest.fixture(scope="session")
def stego_checkpoint():
    return helpers.desk_stego_checkpoint()


@pytest.fixture(scope="session")
def watermark_checkpoint():
    return helpers.desk_watermark_checkpoint()


@pytest.fixture(scope="session")
def stego_model(stego_checkpoint):
    return HidingModel(
        stego_checkpoint.codec(),
        stego_checkpoint.message_model("best"),
        mode="steganography",
        trained=True,
    )


@pytest.fixture(scope="session")
def watermark_model(watermark_checkpoint):
    return HidingModel(
        watermark_checkpoint.codec(),
        watermark_checkpoint.message_model("best"),
        mode="watermark",
        trained=True,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
