# tests/test_structured_map.py

import itertools

import numpy as np
import pytest

from src.gumbel_sampling import make_rng, sample_gumbel
from src.structured_map import (
    MAX_ENUMERATION_BITS,
    CapacityError,
    PairwisePotentials,
    SolverPreconditionError,
    all_assignments,
    assignment_scores,
    brute_force_map,
    decoder_lowdim_approx,
    edge_list,
    exact_log_partition,
    maxflow_map,
    score,
    structured_map,
    structured_perturbed_argmax,
    two_hot,
)
from src.tensor_autodiff import ContractError, bce_rows, init_mlp, mlp_values


def _random_potentials(rng, n, supermodular=True, density=0.5):
    edges = {}
    for i, j in edge_list(n):
        if rng.random() < density:
            alpha = rng.exponential(1.0) if supermodular else rng.normal(scale=1.5)
            edges[(i, j)] = alpha
    return PairwisePotentials(n, rng.normal(scale=2.0, size=(n, 2)), edges)


class TestPotentials:
    def test_edges_normalized_and_merged(self):
        p = PairwisePotentials(3, np.zeros((3, 2)), {(2, 0): 1.0, (0, 2): 0.5})
        assert p.edges == {(0, 2): 1.5}

    def test_invalid_edge(self):
        with pytest.raises(ContractError):
            PairwisePotentials(3, np.zeros((3, 2)), {(1, 1): 1.0})
        with pytest.raises(ContractError):
            PairwisePotentials(3, np.zeros((3, 2)), {(0, 3): 1.0})

    def test_unary_shape(self):
        with pytest.raises(ContractError):
            PairwisePotentials(3, np.zeros((2, 2)))

    def test_json_round_trip(self, rng):
        p = _random_potentials(rng, 5, supermodular=False)
        q = PairwisePotentials.from_json(p.to_json())
        np.testing.assert_array_equal(q.unary, p.unary)
        assert q.edges == p.edges

    def test_score(self):
        p = PairwisePotentials(2, np.array([[0.0, 1.0], [0.5, -1.0]]), {(0, 1): 2.0})
        assert score(p, [1, 1]) == pytest.approx(1.0 - 1.0 + 2.0)
        assert score(p, [1, 0]) == pytest.approx(1.5)
        assert score(p, [0, 0], gumbel=np.ones((2, 2))) == pytest.approx(2.5)


class TestBruteForce:
    def test_ties_go_to_smallest_vector(self):
        np.testing.assert_array_equal(brute_force_map(PairwisePotentials(4, np.zeros((4, 2)))), [0, 0, 0, 0])

    def test_capacity(self):
        with pytest.raises(CapacityError):
            brute_force_map(PairwisePotentials(MAX_ENUMERATION_BITS + 1, np.zeros((MAX_ENUMERATION_BITS + 1, 2))))

    def test_matches_itertools_enumeration(self, rng):
        p = _random_potentials(rng, 6, supermodular=False)
        best = max(itertools.product([0, 1], repeat=6), key=lambda z: score(p, z))
        assert score(p, brute_force_map(p)) == pytest.approx(score(p, best), abs=1e-12)

    def test_all_assignments_order(self):
        np.testing.assert_array_equal(all_assignments(2), [[0, 0], [0, 1], [1, 0], [1, 1]])


class TestMaxflow:
    @pytest.mark.slow
    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for trial in range(500):
            n = int(rng.integers(2, 13))
            p = _random_potentials(rng, n, supermodular=True, density=rng.uniform(0.2, 1.0))
            gumbel = sample_gumbel((n, 2), make_rng(trial)) if trial % 2 else None
            expected = score(p, brute_force_map(p, gumbel), gumbel)
            got = score(p, maxflow_map(p, gumbel), gumbel)
            assert got == pytest.approx(expected, abs=1e-9), f"trial {trial}, n={n}"

    def test_rejects_negative_couplings(self):
        p = PairwisePotentials(2, np.zeros((2, 2)), {(0, 1): -0.5})
        with pytest.raises(SolverPreconditionError, match="brute_force_map"):
            maxflow_map(p)

    def test_no_edges_reduces_to_unary_argmax(self):
        p = PairwisePotentials(3, np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.5]]))
        np.testing.assert_array_equal(maxflow_map(p), [0, 1, 1])

    def test_strong_coupling_turns_bits_on_together(self):
        p = PairwisePotentials(2, np.array([[0.0, -1.0], [0.0, -1.0]]), {(0, 1): 5.0})
        np.testing.assert_array_equal(maxflow_map(p), [1, 1])

    def test_dispatch(self, rng):
        general = _random_potentials(rng, 5, supermodular=False, density=1.0)
        general.edges[(0, 1)] = -1.0
        np.testing.assert_array_equal(structured_map(general), brute_force_map(general))

    @pytest.mark.slow
    def test_uncoupled_perturbed_maps_have_logistic_marginals(self, rng):
        p = PairwisePotentials(3, rng.normal(scale=1.5, size=(3, 2)))
        draws = 4000
        stream = make_rng(17)
        bits = np.array([structured_map(p, sample_gumbel((3, 2), stream)) for _ in range(draws)])
        expected = 1.0 / (1.0 + np.exp(p.unary[:, 0] - p.unary[:, 1]))
        tolerance = 4 * np.sqrt(expected * (1 - expected) / draws)
        assert np.all(np.abs(bits.mean(axis=0) - expected) < tolerance)


class TestPartition:
    def test_log_partition_matches_enumeration(self, rng):
        p = _random_potentials(rng, 8, supermodular=False)
        exact = np.logaddexp.reduce(np.array([score(p, z) for z in itertools.product([0, 1], repeat=8)]))
        assert exact_log_partition(p) == pytest.approx(exact, abs=1e-10)

    def test_zero_potentials(self):
        assert exact_log_partition(PairwisePotentials(5, np.zeros((5, 2)))) == pytest.approx(5 * np.log(2.0))

    def test_bounded_below_by_best_score(self, rng):
        p = _random_potentials(rng, 7, supermodular=False)
        assert exact_log_partition(p) >= assignment_scores(p).max()

    def test_saturated_unaries_reach_the_bound(self):
        unary = np.array([[0.0, 50.0], [50.0, 0.0], [0.0, 50.0], [50.0, 0.0]])
        p = PairwisePotentials(4, unary, {(0, 2): 1.0})
        assert exact_log_partition(p) == pytest.approx(assignment_scores(p).max(), abs=1e-12)

    def test_uniform_unary_shift(self, rng):
        p = _random_potentials(rng, 6, supermodular=False)
        shifted = p.with_unary(p.unary + 2.5)
        assert exact_log_partition(shifted) == pytest.approx(exact_log_partition(p) + 6 * 2.5, abs=1e-10)
        np.testing.assert_array_equal(brute_force_map(shifted), brute_force_map(p))
        supermodular = _random_potentials(rng, 6)
        np.testing.assert_array_equal(
            maxflow_map(supermodular.with_unary(supermodular.unary - 1.0)), maxflow_map(supermodular)
        )

    def test_assignment_scores_order(self, rng):
        p = _random_potentials(rng, 4)
        scores = assignment_scores(p)
        for row, z in enumerate(all_assignments(4)):
            assert scores[row] == pytest.approx(score(p, z), abs=1e-12)


class TestLowDimApproximation:
    def test_two_hot_layout(self):
        np.testing.assert_array_equal(two_hot([1, 0]), [0.0, 1.0, 1.0, 0.0])
        assert two_hot(np.zeros((3, 4))).shape == (3, 8)

    def test_flip_table(self, rng):
        n, pixels = 4, 6
        decoder = init_mlp("decoder", [2 * n, 5, pixels], ["relu", "identity"], rng)
        x = (rng.random(pixels) < 0.5).astype(float)
        z = np.array([1, 0, 0, 1])
        table = decoder_lowdim_approx(decoder, x, z)

        def f(bits):
            return -bce_rows(mlp_values(decoder, two_hot(bits)[None, :]), x[None, :])[0]

        for i in range(n):
            assert table[i, z[i]] == pytest.approx(f(z), abs=1e-12)
            flipped = z.copy()
            flipped[i] ^= 1
            assert table[i, 1 - z[i]] == pytest.approx(f(flipped), abs=1e-12)

    def test_rejects_non_binary(self, rng):
        decoder = init_mlp("decoder", [4, 3], ["identity"], rng)
        with pytest.raises(ContractError):
            decoder_lowdim_approx(decoder, np.zeros(3), np.array([0, 2]))

    def test_zero_eps_matches_map(self, rng):
        p = _random_potentials(rng, 6)
        g = sample_gumbel((6, 2), make_rng(1))
        np.testing.assert_array_equal(
            structured_perturbed_argmax(p, rng.normal(size=(6, 2)), 0.0, g), structured_map(p, g)
        )

    def test_large_eps_follows_f_tilde(self):
        p = PairwisePotentials(3, np.zeros((3, 2)), {(0, 1): 0.1})
        f_tilde = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(structured_perturbed_argmax(p, f_tilde, 100.0), [1, 0, 1])
