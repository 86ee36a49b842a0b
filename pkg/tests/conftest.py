import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # oracles.py and helpers

from octpad.oct_core import get_bscan
from octpad.synth_phantom import PhantomConfig, gen_bonafide

torch.set_num_threads(2)

# small phantom used by extraction-level tests: fits 256x256 patches but is
# quick to generate and scan
SMALL_PHANTOM = PhantomConfig(dims=(320, 4, 384), seed=11)


@pytest.fixture(scope="session")
def bona_volume():
    vol, mask = gen_bonafide(SMALL_PHANTOM)
    return vol, mask


@pytest.fixture(scope="session")
def bona_bscans(bona_volume):
    vol, _ = bona_volume
    return [get_bscan(vol, y) for y in range(vol.n_bscans)]


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
