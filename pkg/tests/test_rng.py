import numpy as np
import pytest
from pydantic import ValidationError

from app.core.rng import ALGORITHM, RandomStream, derive_stream


def test_same_stream_same_draws():
    a = RandomStream(seed=99).derive(3).generator().random(5)
    b = RandomStream(seed=99).derive(3).generator().random(5)
    np.testing.assert_array_equal(a, b)


def test_substreams_are_distinct():
    master = RandomStream(seed=99)
    a = master.derive(0).generator().random(5)
    b = master.derive(1).generator().random(5)
    c = master.generator().random(5)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_derive_stream_matches_method():
    master = RandomStream(seed=5)
    assert derive_stream(master, 4) == master.derive(4)
    assert master.derive(4).path == (4,)
    assert master.algorithm == ALGORITHM


def test_rejects_unknown_algorithm():
    with pytest.raises(ValidationError):
        RandomStream(algorithm="mt19937", seed=1)


def test_rejects_negative_seed_and_labels():
    with pytest.raises(ValidationError):
        RandomStream(seed=-1)
    with pytest.raises(ValidationError):
        RandomStream(seed=1, path=(-3,))
