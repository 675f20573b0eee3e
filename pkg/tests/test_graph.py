import numpy as np
import pytest

from cchmm import autodiff as ad
from cchmm.graph import RegionGraph, graph_conv, normalize_adjacency
from cchmm.errors import ValidationError


def dense_oracle(w):
    # textbook evaluation, no degree floor tricks
    d = w.sum(axis=1)
    d_inv_sqrt = np.diag(1.0 / np.sqrt(d))
    return np.eye(len(w)) + d_inv_sqrt @ w @ d_inv_sqrt


def test_isolated_regions_reduce_to_identity():
    np.testing.assert_array_equal(normalize_adjacency(np.zeros((2, 2))), np.eye(2))


def test_two_region_pair():
    got = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(got, dense_oracle(np.array([[0.0, 1.0], [1.0, 0.0]])))
    np.testing.assert_allclose(got, np.ones((2, 2)), atol=1e-15)


def test_normalization_cancels_scale():
    got = normalize_adjacency(np.array([[0.0, 2.0], [2.0, 0.0]]))
    np.testing.assert_allclose(got, np.ones((2, 2)), atol=1e-15)


def test_scale_invariance_random():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = rng.integers(2, 8)
        w = rng.uniform(0, 1, size=(n, n))
        w = (w + w.T) / 2
        np.fill_diagonal(w, 0.0)
        c = rng.uniform(0.1, 10)
        np.testing.assert_allclose(
            normalize_adjacency(c * w), normalize_adjacency(w), atol=1e-12
        )


def test_rejects_negative_and_asymmetric():
    with pytest.raises(ValidationError, match=r"negative entry .* \(0, 1\)"):
        normalize_adjacency(np.array([[0.0, -1.0], [-1.0, 0.0]]))
    with pytest.raises(ValidationError, match="asymmetric"):
        normalize_adjacency(np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_region_graph_rejects_nonzero_diagonal():
    with pytest.raises(ValidationError, match="diagonal"):
        RegionGraph(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_graph_conv_identity_operator():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(4, 3))
    out = graph_conv(
        ad.constant(np.eye(4)),
        ad.constant(x),
        ad.constant(np.eye(3)),
        ad.constant(np.zeros(3)),
    )
    np.testing.assert_array_equal(out.data, x)


def test_graph_conv_zero_input_broadcasts_bias():
    out = graph_conv(
        ad.constant(np.eye(3)),
        ad.constant(np.zeros((3, 2))),
        ad.constant(np.zeros((2, 4))),
        ad.constant([1.0, 2.0, 3.0, 4.0]),
    )
    np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))


def test_graph_conv_hand_product():
    out = graph_conv(
        ad.constant(np.ones((2, 2))),
        ad.constant([[1.0], [3.0]]),
        ad.constant([[1.0]]),
        ad.constant([0.0]),
    )
    np.testing.assert_array_equal(out.data, [[4.0], [4.0]])


def test_graph_conv_linear_in_features():
    rng = np.random.default_rng(2)
    g = normalize_adjacency(
        (lambda m: np.where(np.eye(4) > 0, 0.0, (m + m.T) / 2))(rng.uniform(0, 1, (4, 4)))
    )
    w = rng.uniform(-1, 1, size=(3, 2))
    x1 = rng.uniform(-1, 1, size=(4, 3))
    x2 = rng.uniform(-1, 1, size=(4, 3))
    a, b = 0.7, -1.3
    zero_bias = ad.constant(np.zeros(2))

    def conv(x):
        return graph_conv(ad.constant(g), ad.constant(x), ad.constant(w), zero_bias).data

    np.testing.assert_allclose(conv(a * x1 + b * x2), a * conv(x1) + b * conv(x2), atol=1e-12)


def test_graph_conv_permutation_equivariance():
    rng = np.random.default_rng(3)
    n = 5
    raw = rng.uniform(0, 1, size=(n, n))
    raw = (raw + raw.T) / 2
    np.fill_diagonal(raw, 0.0)
    x = rng.uniform(-1, 1, size=(n, 3))
    w = rng.uniform(-1, 1, size=(3, 2))
    b = rng.uniform(-1, 1, size=2)
    perm = rng.permutation(n)

    def conv(adj, feats):
        return graph_conv(
            ad.constant(normalize_adjacency(adj)),
            ad.constant(feats),
            ad.constant(w),
            ad.constant(b),
        ).data

    np.testing.assert_allclose(
        conv(raw[np.ix_(perm, perm)], x[perm]), conv(raw, x)[perm], atol=1e-12
    )


def test_graph_conv_batched_matches_per_sample():
    rng = np.random.default_rng(4)
    g = np.eye(3) + 0.1
    np.fill_diagonal(g, 1.0)
    x = rng.uniform(-1, 1, size=(4, 3, 2))
    w = rng.uniform(-1, 1, size=(2, 5))
    b = rng.uniform(-1, 1, size=5)
    batched = graph_conv(ad.constant(g), ad.constant(x), ad.constant(w), ad.constant(b))
    for i in range(4):
        single = graph_conv(
            ad.constant(g), ad.constant(x[i]), ad.constant(w), ad.constant(b)
        )
        np.testing.assert_allclose(batched.data[i], single.data, atol=1e-14)
