"""Randomized invariance and round-trip properties."""

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invariantlab import fileformat
from invariantlab.datagen import Normalizer, SplitSpec
from invariantlab.evalreport import pearson_r2, spearman
from invariantlab.invariants import alignment_loss, consistency_loss

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(3, 40), elements=finite)
SETTINGS = settings(max_examples=60, deadline=None)


def _spread(x):
    return np.ptp(x) > 1e-3 * max(1.0, np.abs(x).max())


@SETTINGS
@given(vectors, st.floats(0.1, 100) | st.floats(-100, -0.1), finite, st.integers(0, 2**31))
def test_r2_affine_invariant(a, scale, shift, seed):
    assume(_spread(a))
    b = a + np.random.default_rng(seed).standard_normal(a.size) * np.ptp(a)
    assume(_spread(b))
    assert abs(pearson_r2(a, b) - pearson_r2(scale * a + shift, b)) <= 1e-9


@SETTINGS
@given(arrays(np.float64, st.integers(3, 40), elements=st.integers(-30, 30)),
       st.integers(0, 2**31))
def test_spearman_monotone_invariant(a, seed):
    # integer samples so the monotone maps below cannot round distinct values together
    b = np.random.default_rng(seed).permutation(a)
    assume(_spread(a))
    assert spearman(np.exp(a), b) == spearman(a, b)
    assert spearman(a ** 3, b) == spearman(a, b)


@SETTINGS
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 4)), elements=finite),
       st.sampled_from(["raw", "minmax", "standardize"]))
def test_normalizer_round_trip(x, mode):
    assume(all(_spread(col) for col in x.T))
    norm = Normalizer(mode).fit(x)
    np.testing.assert_allclose(norm.inverse_transform(norm.transform(x)), x,
                               rtol=1e-9, atol=1e-9 * np.abs(x).max())
    back = Normalizer.from_dict(norm.to_dict())
    assert back.transform(x).tobytes() == norm.transform(x).tobytes()


@SETTINGS
@given(st.integers(2, 500), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_is_a_partition(n, frac, seed):
    train, val = SplitSpec(frac, seed).indices(n)
    assert len(train) and len(val)
    assert np.array_equal(np.sort(np.concatenate([train, val])), np.arange(n))


@SETTINGS
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 10)), elements=finite),
       st.floats(0.01, 100))
def test_consistency_scales_and_ignores_row_shifts(values, c):
    base = consistency_loss(values)
    assert np.isclose(consistency_loss(c * values), c * c * base, rtol=1e-9, atol=1e-9)
    shifts = np.arange(values.shape[0], dtype=np.float64)[:, None]
    assert np.isclose(consistency_loss(values + shifts), base, rtol=1e-9, atol=1e-6)


@SETTINGS
@given(vectors, st.floats(0.1, 100), finite, st.integers(0, 2**31))
def test_alignment_affine_invariant(f0, scale, shift, seed):
    e0 = np.random.default_rng(seed).standard_normal(f0.size)
    assume(_spread(f0))
    got = alignment_loss(scale * f0 + shift, e0)
    assert abs(got - alignment_loss(f0, e0)) <= 1e-8


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(1, 4)),
              elements=st.floats(allow_nan=True, allow_infinity=True)),
       st.dictionaries(st.text(max_size=5), st.integers(), max_size=3))
def test_container_round_trip(tmp_path_factory, payload, meta):
    path = tmp_path_factory.mktemp("c") / "x.bin"
    fileformat.write_container(path, fileformat.DATASET_MAGIC, meta, [payload])
    got_meta, got = fileformat.read_container(path, fileformat.DATASET_MAGIC)
    assert got_meta == meta
    assert got[0].shape == payload.shape and got[0].tobytes() == payload.tobytes()
