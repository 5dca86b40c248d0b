import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prune_forge.errors import DimensionError, ParameterError
from prune_forge.tensor import (
    F32,
    F64,
    SeededRng,
    elementwise,
    matmul,
    splitmix64_scalar,
    uniform_init,
)

# first outputs of SplitMix64 seeded with 1234567 (reference implementation)
SPLITMIX_REF = [
    6457827717110365317,
    3203168211198807973,
    9817491932198370423,
    4593380528125082431,
    16408922859458223821,
]


def test_splitmix_reference_stream():
    rng = SeededRng(1234567)
    assert [rng.next_u64() for _ in range(5)] == SPLITMIX_REF


@given(st.integers(0, 2**64 - 1), st.integers(1, 50))
def test_vectorised_block_matches_scalar_steps(seed, n):
    state, expected = seed, []
    for _ in range(n):
        state, out = splitmix64_scalar(state)
        expected.append(out)
    rng = SeededRng(seed)
    assert [int(x) for x in rng.u64(n)] == expected
    assert rng.state == state


def test_matmul_identity_and_hand_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(matmul(a, np.array([[5.0], [6.0]])), [[17.0], [39.0]])
    np.testing.assert_array_equal(matmul(a, np.zeros((2, 3))), np.zeros((2, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 2), F32), np.zeros((2, 2), F64))


def _rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_matmul_associative_and_distributive():
    rng = SeededRng(11)
    for _ in range(10):
        a, b, c = (rng.uniform((6, 6), -1, 1) for _ in range(3))
        assert _rel(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10
        assert _rel(matmul(a, b + c), matmul(a, b) + matmul(a, c)) < 1e-10


def test_uniform_init_is_deterministic_and_bounded():
    a = uniform_init((2, 2), 0.1, SeededRng(7))
    b = uniform_init((2, 2), 0.1, SeededRng(7))
    assert a.tobytes() == b.tobytes()
    big = uniform_init((1000, 1000), 0.1, SeededRng(3), dtype=F64)
    assert np.abs(big).max() <= 0.1


def test_uniform_init_mean_bound():
    # sd of the mean of 1e6 U(-0.5, 0.5) draws is 2.9e-4; 0.01 is ~35 sigma
    x = uniform_init((10**6,), 0.5, SeededRng(5), dtype=F64)
    assert abs(x.mean()) < 0.01


def test_uniform_init_rejects_bad_scale():
    with pytest.raises(ParameterError):
        uniform_init((2,), 0.0, SeededRng(0))


def test_elementwise():
    z = np.zeros((3, 2))
    np.testing.assert_array_equal(elementwise("tanh", z), z)
    np.testing.assert_array_equal(elementwise("sigmoid", z), np.full((3, 2), 0.5))
    np.testing.assert_array_equal(elementwise("add", np.array([1, 2.0]), np.array([3, 4.0])), [4, 6])
    with pytest.raises(DimensionError):
        elementwise("mul", np.zeros(2), np.zeros(3))


def test_sigmoid_matches_logistic_formula():
    x = np.linspace(-30, 30, 301)
    np.testing.assert_allclose(elementwise("sigmoid", x), 1 / (1 + np.exp(-x)), rtol=1e-12, atol=1e-15)


@settings(max_examples=30)
@given(st.integers(0, 2**32))
def test_normal_draws_are_finite(seed):
    z = SeededRng(seed).normal(1001)
    assert np.isfinite(z).all() and z.shape == (1001,)


def test_permutation_is_a_permutation():
    p = SeededRng(9).permutation(100)
    assert sorted(p.tolist()) == list(range(100))
