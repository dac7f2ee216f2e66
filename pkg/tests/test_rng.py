import numpy as np
from hypothesis import given, settings, strategies as st

from mvhomog.rng import NoiseStream, ZeroNoise


def test_same_address_same_draws():
    a = NoiseStream(7, "W").normal(3, (5, 2))
    b = NoiseStream(7, "W").normal(3, (5, 2))
    assert np.array_equal(a, b)


def test_draws_independent_of_call_order():
    s = NoiseStream(1, "W")
    later_first = s.normal(10, (4, 1))
    s.normal(0, (4, 1))
    assert np.array_equal(later_first, NoiseStream(1, "W").normal(10, (4, 1)))


def test_tags_steps_and_seeds_separate_streams():
    base = NoiseStream(0, "W").normal(0, 16)
    assert not np.array_equal(base, NoiseStream(0, "V").normal(0, 16))
    assert not np.array_equal(base, NoiseStream(0, "W").normal(1, 16))
    assert not np.array_equal(base, NoiseStream(1, "W").normal(0, 16))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_leading_rows_do_not_depend_on_block_size(n1, n2):
    s = NoiseStream(3, "paths")
    a, b = s.normal(5, (n1, 3)), s.normal(5, (n2, 3))
    k = min(n1, n2)
    assert np.array_equal(a[:k], b[:k])


def test_increment_variance():
    inc = NoiseStream(0, "W").increments(0, 200_000, 1, 0.01)
    assert abs(inc.var() - 0.01) < 3e-4
    assert abs(inc.mean()) < 1e-3


def test_child_stream_is_distinct_and_stable():
    s = NoiseStream(4, "W")
    assert s.child("a").tag == "W/a"
    assert np.array_equal(s.child("a").normal(0, 3), NoiseStream(4, "W/a").normal(0, 3))


def test_zero_noise():
    assert not ZeroNoise().increments(0, 3, 2, 0.1).any()
