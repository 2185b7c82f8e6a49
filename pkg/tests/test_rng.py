import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from thermo_billiards.errors import InvalidState
from thermo_billiards.rng import RngStream, stream_block

u64 = st.integers(min_value=0, max_value=2**64 - 1)


@settings(max_examples=25, deadline=None)
@given(seed=u64, sid=u64)
def test_raw_matches_numpy_philox(seed, sid):
    ref = np.random.Philox(key=np.array([seed, sid], dtype=np.uint64)).random_raw(11)
    assert np.array_equal(RngStream(seed, sid).raw(11), ref)


def test_counter_threading_is_concatenation():
    a = RngStream(3, 9)
    parts = np.concatenate([a.uniforms(5), a.uniforms(7), a.uniforms(1)])
    assert np.array_equal(parts, RngStream(3, 9).uniforms(13))
    assert a.counter == 13


def test_uniforms_open_interval_and_uniform():
    u = RngStream(1, 2).uniforms(200_000)
    assert u.min() > 0 and u.max() < 1
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_distinct_streams_differ():
    a = RngStream(5, 0).uniforms(1000)
    b = RngStream(5, 1).uniforms(1000)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_normals_one_draw_each():
    r = RngStream(8, 1)
    z = r.normals(100_000)
    assert r.counter == 100_000
    assert abs(z.mean()) < 0.02 and abs(z.var() - 1) < 0.02


def test_bad_seed():
    with pytest.raises(InvalidState):
        RngStream(-1)
    with pytest.raises(InvalidState):
        RngStream(0, 2**64)


def test_stream_blocks_disjoint():
    assert stream_block(2) - stream_block(1) == 2**40
