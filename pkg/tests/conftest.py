import numpy as np
import pytest

from mrfica import dictgen, epg, phantom


@pytest.fixture(scope="session")
def seq60():
    """Short 60-point sequence shared by the cheaper tests."""
    return epg.SequenceParams(epg.default_flip_train(60, 7))


@pytest.fixture(scope="session")
def small_grid():
    """Coarse grid (~300 entries) for quick dictionary tests."""
    return dictgen.expand_grid(dictgen.GridSpec.desk_scale(20))


@pytest.fixture(scope="session")
def small_dict(seq60, small_grid):
    return dictgen.build_dictionary(seq60, small_grid)


@pytest.fixture(scope="session")
def small_phantom(small_grid):
    ph = phantom.generate_phantom(24, 24, seed=5)
    t1v = np.unique(small_grid[:, 0])
    t2v = np.unique(small_grid[:, 1])
    return phantom.snap_to_grid(ph, t1v, t2v)


@pytest.fixture(scope="session")
def small_image(small_phantom, seq60):
    return phantom.synthesize_image(small_phantom, seq60)
