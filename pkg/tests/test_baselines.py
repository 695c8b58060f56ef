"""Row-coefficient forms of soup, task arithmetic, DARE, TIES, and Fisher."""

import numpy as np
import pytest

import mergeqp as mq


def _updates(*mats):
    return [mq.ResidualUpdate(1, np.asarray(m, dtype=float), task_id=k) for k, m in enumerate(mats)]


def test_soup_is_plain_average():
    ups = _updates([[2.0, 4.0]], [[0.0, 0.0]])
    assert np.array_equal(mq.soup(ups), [[1.0, 2.0]])
    assert np.all(mq.soup_coefficients(4, 3) == 0.25)


def test_task_arithmetic_scalar_and_per_task():
    ups = _updates([[1.0, 0.0]], [[0.0, 2.0]])
    assert np.array_equal(mq.task_arithmetic(ups, 0.5), [[0.5, 1.0]])
    assert np.array_equal(mq.task_arithmetic(ups, [1.0, 0.25]), [[1.0, 0.5]])


def test_combine_row_coefficients_loops(rng):
    ups = _updates(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    coeffs = rng.normal(size=(2, 3))
    got = mq.combine_row_coefficients(ups, coeffs)
    want = np.zeros((3, 2))
    for k in range(2):
        for i in range(3):
            want[i] += coeffs[k, i] * ups[k].delta[i]
    assert np.allclose(got, want, atol=1e-12)


def test_dare_coefficients_row_level_mask():
    c = mq.dare_coefficients(2, 6, keep_prob=0.5, seed=3)
    assert c.shape == (2, 6)
    # every entry is either dropped or rescaled by 1/p
    assert set(np.unique(c)) <= {0.0, 2.0}
    assert np.array_equal(c, mq.dare_coefficients(2, 6, keep_prob=0.5, seed=3))
    assert np.all(mq.dare_coefficients(2, 6, keep_prob=1.0, seed=0) == 1.0)


def test_dare_keep_prob_bounds():
    with pytest.raises(ValueError):
        mq.dare_coefficients(1, 3, keep_prob=0.0, seed=0)
    with pytest.raises(ValueError):
        mq.dare_coefficients(1, 3, keep_prob=1.5, seed=0)


def test_ties_worked_example():
    # density 2/3 keeps ceil(2) = 2 rows per task by row norm
    a = [[3.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
    b = [[-1.0, 0.0], [4.0, 0.0], [0.1, 0.0]]
    ups = _updates(a, b)
    coeffs = mq.ties_coefficients(ups, 2 / 3)
    # task a trims its weakest row (norm 1), task b trims row 2 (norm 0.1)
    # row 0: a (+3) and b (-1) both kept, election picks the positive side
    # row 1: only b survives the trim
    # row 2: only a survives the trim
    assert np.array_equal(coeffs[:, 0], [1.0, 0.0])
    assert np.array_equal(coeffs[:, 1], [0.0, 1.0])
    assert np.array_equal(coeffs[:, 2], [1.0, 0.0])
    merged = mq.ties_rowwise(ups, 2 / 3)
    assert np.allclose(merged, [[3.0, 0.0], [4.0, 0.0], [2.0, 0.0]])


def test_ties_sign_election_prefers_heavier_side():
    ups = _updates([[1.0]], [[-5.0]])
    coeffs = mq.ties_coefficients(ups, 1.0)
    # negative mass dominates, positive row is discarded
    assert np.array_equal(coeffs, [[0.0], [1.0]])


def test_ties_exact_cancellation_breaks_toward_first_task():
    ups = _updates([[2.0, 0.0]], [[-2.0, 0.0]])
    coeffs = mq.ties_coefficients(ups, 1.0)
    assert np.array_equal(coeffs, [[1.0], [0.0]])


def test_ties_zero_rows_yield_zero_coefficients():
    ups = _updates([[0.0, 0.0]], [[0.0, 0.0]])
    assert np.all(mq.ties_coefficients(ups, 1.0) == 0.0)


def test_fisher_merge_hand_example():
    thetas = [np.array([[0.0]]), np.array([[4.0]])]
    fishers = [np.array([[1.0]]), np.array([[3.0]])]
    merged = mq.fisher_merge(thetas, fishers)
    assert np.isclose(merged[0, 0], 3.0)


def test_fisher_uniform_weights_reduce_to_mean(rng):
    thetas = [rng.normal(size=(2, 3)) for _ in range(3)]
    ones = [np.ones((2, 3))] * 3
    assert np.allclose(mq.fisher_merge(thetas, ones), np.mean(thetas, axis=0), atol=1e-12)


def test_fisher_zero_information_falls_back_to_mean():
    thetas = [np.array([[2.0]]), np.array([[6.0]])]
    zeros = [np.zeros((1, 1))] * 2
    assert np.isclose(mq.fisher_merge(thetas, zeros)[0, 0], 4.0)


def test_fisher_delta_weighted_combination(rng):
    ups = _updates(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    fishers = [np.abs(rng.normal(size=(2, 2))) + 0.1 for _ in range(2)]
    got = mq.fisher_delta(ups, fishers)
    den = fishers[0] + fishers[1]
    want = (fishers[0] * ups[0].delta + fishers[1] * ups[1].delta) / den
    assert np.allclose(got, want, atol=1e-12)


def test_baseline_delta_dispatch(rng):
    ups = _updates(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    assert np.array_equal(mq.baseline_delta("soup", ups), mq.soup(ups))
    assert np.array_equal(
        mq.baseline_delta("ta", ups, {"lambdas": 0.5}), mq.task_arithmetic(ups, 0.5)
    )
    assert np.array_equal(
        mq.baseline_delta("dare", ups, {"keep_prob": 0.5, "seed": 7}),
        mq.dare_row_uniform(ups, 0.5, seed=7),
    )
    assert np.array_equal(
        mq.baseline_delta("ties", ups, {"density": 0.5}), mq.ties_rowwise(ups, 0.5)
    )
    with pytest.raises(ValueError):
        mq.baseline_delta("stack", ups)
    with pytest.raises(ValueError):
        mq.baseline_delta("fisher", ups, {})
