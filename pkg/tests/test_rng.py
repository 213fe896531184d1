import numpy as np

from deepsim.rng import Streams, stream


def test_same_name_same_sequence():
    assert np.array_equal(stream(3, "data").random(5), stream(3, "data").random(5))


def test_names_and_seeds_are_independent():
    a = stream(3, "data").random(5)
    assert not np.array_equal(a, stream(3, "dropout").random(5))
    assert not np.array_equal(a, stream(4, "data").random(5))


def test_using_one_stream_does_not_shift_another():
    s1, s2 = Streams(0), Streams(0)
    s1["dropout"].random(100)
    assert np.array_equal(s1["data"].random(3), s2["data"].random(3))


def test_state_round_trip():
    s = Streams(9)
    s["eps"].random(7)
    state = s.get_state()
    expected = s["eps"].random(4)
    t = Streams(9)
    t.set_state(state)
    assert np.array_equal(t["eps"].random(4), expected)
