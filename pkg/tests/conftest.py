import numpy as np
import pytest
import torch

from dcic.transforms import ChannelPlan, CodecModel, ConditioningFlags


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_plan():
    return ChannelPlan.tiny()


@pytest.fixture
def tiny_model(tiny_plan):
    torch.manual_seed(0)
    model = CodecModel(tiny_plan, ConditioningFlags())
    model.eval()
    return model


@pytest.fixture
def baseline_model(tiny_plan):
    torch.manual_seed(0)
    model = CodecModel(tiny_plan, ConditioningFlags.baseline())
    model.eval()
    return model


@pytest.fixture
def image_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corpus_dir(tmp_path):
    from dcic.data import make_corpus
    folder = tmp_path / "corpus"
    make_corpus(folder, 5, 128, 128, 99)
    return folder
