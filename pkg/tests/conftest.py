import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

import pytest

from regioncap import lm as lm_mod
from regioncap import scenegen as sg


@pytest.fixture(scope="session")
def lm_corpus():
    return sg.lm_text_corpus(7, 4000, sg.SceneConfig())


@pytest.fixture(scope="session")
def pretrained_lm(lm_corpus):
    """Frozen grammar LM shared across the whole session (trains once)."""
    params, ppl = lm_mod.pretrain_lm(
        lm_corpus, lm_mod.LMConfig(),
        lm_mod.LMTrainConfig(steps=1200, seed=0))
    return params, ppl
