import numpy as np
import pytest
from hypothesis import given, strategies as st

from birads_net.lexicon import (
    CATEGORIES,
    DESCRIPTOR_ARITY,
    TRAINABLE_CATEGORIES,
    BiradsCategory,
    DescriptorLabels,
    EchoPattern,
    LexiconError,
    Margin,
    Orientation,
    Posterior,
    Shape,
    TumorClass,
    category_to_likelihood,
    encode_labels,
    likelihood_to_category,
)


def test_enum_encodings_are_stable():
    assert [s.value for s in Shape] == ["oval", "round", "irregular"]
    assert [o.value for o in Orientation] == ["parallel", "not_parallel"]
    assert [e.code for e in EchoPattern] == list(range(6))
    assert [p.value for p in Posterior] == ["none", "enhancement", "shadowing", "combined"]
    assert DESCRIPTOR_ARITY == (3, 2, 2, 6, 4)


def test_category_total_order():
    labels = ["0", "1", "2", "3", "4A", "4B", "4C", "5", "6"]
    cats = [CATEGORIES[c] for c in labels]
    assert sorted(reversed(cats)) == cats
    assert CATEGORIES["4A"] < CATEGORIES["4B"] <= CATEGORIES["4B"] < CATEGORIES["5"]
    assert BiradsCategory.parse("4b") == CATEGORIES["4B"]


@pytest.mark.parametrize(
    "label, expected",
    [("2", 0.0), ("3", 0.01), ("4A", 0.06), ("4B", 0.30), ("4C", 0.725), ("5", 0.975)],
)
def test_median_likelihood(label, expected):
    assert category_to_likelihood(label) == expected


@pytest.mark.parametrize("label", ["0", "1", "6"])
def test_undefined_likelihood(label):
    with pytest.raises(LexiconError, match="no numeric likelihood"):
        category_to_likelihood(label)


def test_likelihood_strictly_increasing_over_trainable():
    values = [category_to_likelihood(c) for c in TRAINABLE_CATEGORIES]
    assert all(a < b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize(
    "value, label",
    [(0.30, "4B"), (0.0, "3"), (0.975, "5"), (0.02, "3"), (0.10, "4A"), (0.50, "4B"), (0.95, "4C"), (0.9501, "5"), (1.0, "5")],
)
def test_likelihood_to_category_bins(value, label):
    assert likelihood_to_category(value).label == label


def test_round_trip():
    for cat in TRAINABLE_CATEGORIES:
        assert likelihood_to_category(category_to_likelihood(cat)) == cat


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_decoding_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert likelihood_to_category(lo) <= likelihood_to_category(hi)


def test_encode_benign_example(benign_labels):
    y = encode_labels(benign_labels, "3", TumorClass.BENIGN)
    assert y.likelihood == 0.01
    np.testing.assert_array_equal(y.subtypes, [0, 0, 0, 0])
    np.testing.assert_array_equal(y.shape, [1, 0, 0])
    np.testing.assert_array_equal(y.tumor, [1, 0])


def test_encode_malignant_example(malignant_labels):
    y = encode_labels(malignant_labels, "5", TumorClass.MALIGNANT)
    assert y.subtypes[3] == 1
    assert y.likelihood == 0.975
    np.testing.assert_array_equal(y.tumor, [0, 1])
    np.testing.assert_array_equal(y.margin, [0, 1])
    np.testing.assert_array_equal(y.posterior, [0, 0, 1, 0])
    assert len(y.as_list()) == 11


def test_encode_rejects_contradictory_margin():
    labels = DescriptorLabels(
        Shape.OVAL, Orientation.PARALLEL, Margin(True, spiculated=True), EchoPattern.ANECHOIC, Posterior.NONE
    )
    with pytest.raises(LexiconError):
        encode_labels(labels, "3", 0)


def test_encode_rejects_empty_subtypes():
    labels = DescriptorLabels(
        Shape.OVAL, Orientation.PARALLEL, Margin(False), EchoPattern.ANECHOIC, Posterior.NONE
    )
    with pytest.raises(LexiconError):
        encode_labels(labels, "3", 0)


@pytest.mark.parametrize("label", ["0", "2", "6"])
def test_encode_rejects_untrainable_category(benign_labels, label):
    with pytest.raises(LexiconError):
        encode_labels(benign_labels, label, 0)


@given(
    st.sampled_from(list(Shape)),
    st.sampled_from(list(Orientation)),
    st.lists(st.booleans(), min_size=4, max_size=4),
    st.sampled_from(list(EchoPattern)),
    st.sampled_from(list(Posterior)),
    st.sampled_from([c.label for c in TRAINABLE_CATEGORIES]),
)
def test_one_hots_sum_to_one(shape, orientation, flags, echo, posterior, category):
    margin = Margin(not any(flags), *flags)
    y = encode_labels(DescriptorLabels(shape, orientation, margin, echo, posterior), category, 1)
    for vec, n in zip((y.shape, y.orientation, y.margin, y.echo, y.posterior), DESCRIPTOR_ARITY):
        assert vec.shape == (n,)
        assert vec.sum() == 1.0
