import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradharmony.errors import DimensionError, ManifestError
from gradharmony.linalg import ShapeManifest, cosine_similarity, dot, flatten, reshape

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_dot_examples():
    assert dot([1, 0], [0, 1]) == 0
    assert dot([1, 2], [3, 4]) == 11
    with pytest.raises(DimensionError):
        dot([1, 2], [1, 2, 3])
    with pytest.raises(DimensionError):
        dot([], [])


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_dot_self_nonnegative(x):
    d = dot(x, x)
    assert d >= 0
    # zero only for the zero vector, unless every square underflows
    if np.max(np.abs(x)) > 1e-150:
        assert d > 0
    if not np.any(x):
        assert d == 0


@pytest.mark.parametrize(
    "a, b, expected",
    [([1, 0], [0, 1], 0.0), ([1, 1], [2, 2], 1.0), ([1, 0], [-1, 0], -1.0)],
)
def test_cosine_examples(a, b, expected):
    c = cosine_similarity(a, b)
    assert c.value == pytest.approx(expected, abs=1e-15)
    assert not c.degenerate


def test_cosine_degenerate_flag():
    c = cosine_similarity([0.0, 0.0], [1.0, 2.0])
    assert c == (0.0, True)
    assert cosine_similarity([1e-13, 0], [1, 0]).degenerate
    assert not cosine_similarity([1e-13, 0], [1, 0], eps=1e-14).degenerate
    with pytest.raises(DimensionError):
        cosine_similarity([1.0], [1.0, 2.0])


@settings(max_examples=200)
@given(
    st.integers(1, 12).flatmap(lambda n: st.tuples(
        arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))),
    st.floats(1e-3, 1e3),
)
def test_cosine_properties(pair, scale):
    a, b = pair
    c = cosine_similarity(a, b)
    if c.degenerate:
        return
    assert -1.0 <= c.value <= 1.0
    assert c.value == pytest.approx(cosine_similarity(b, a).value, abs=1e-12)
    scaled = cosine_similarity(scale * a, b)
    if not scaled.degenerate:  # scaling can cross the absolute degeneracy threshold
        assert c.value == pytest.approx(scaled.value, abs=1e-9)


def manifest_27():
    return ShapeManifest.from_pairs([("w", (2, 2)), ("b", (3,))])


def test_flatten_order_and_length():
    m = manifest_27()
    flat = flatten({"b": np.array([5.0, 6, 7]), "w": np.array([[1.0, 2], [3, 4]])}, m)
    np.testing.assert_array_equal(flat, [1, 2, 3, 4, 5, 6, 7])


def test_flatten_errors():
    m = manifest_27()
    with pytest.raises(ManifestError):
        flatten({}, m)
    with pytest.raises(ManifestError):
        flatten({"w": np.zeros((2, 2))}, m)
    with pytest.raises(ManifestError):
        flatten({"w": np.zeros((2, 2)), "b": np.zeros(3), "x": np.zeros(1)}, m)
    with pytest.raises(ManifestError):
        flatten({"w": np.zeros((2, 3)), "b": np.zeros(3)}, m)


def test_reshape_examples():
    m = manifest_27()
    out = reshape(np.arange(7.0), m)
    assert set(out) == {"w", "b"}
    np.testing.assert_array_equal(out["w"], [[0, 1], [2, 3]])
    np.testing.assert_array_equal(out["b"], [4, 5, 6])
    with pytest.raises(ManifestError):
        reshape(np.arange(6.0), m)


def test_manifest_validation():
    with pytest.raises(ManifestError):
        ShapeManifest.from_pairs([("a", (2,)), ("a", (3,))])
    with pytest.raises(ManifestError):
        ShapeManifest.from_pairs([("a", (0,))])
    with pytest.raises(ManifestError):
        ShapeManifest.from_pairs([])


@settings(max_examples=100)
@given(st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=5),
       st.integers(0, 2**32 - 1))
def test_flatten_reshape_round_trip(shapes, seed):
    m = ShapeManifest.from_pairs([(f"t{i}", s) for i, s in enumerate(shapes)])
    rng = np.random.default_rng(seed)
    tensors = {name: rng.standard_normal(dims) for name, dims in m.entries}
    back = reshape(flatten(tensors, m), m)
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])
    flat = rng.standard_normal(m.size)
    np.testing.assert_array_equal(flatten(reshape(flat, m), m), flat)
