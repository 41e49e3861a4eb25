"""Tests for the server decision core."""
import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.exceptions import ContractViolationError, InvalidInputError, NumericStateError
from src.feedback_graph import FeedbackGraph, generate_feedback_graph
from src.models import RateSchedule
from src.server import (
    RoundDecision,
    ServerState,
    combine,
    compute_pmf,
    decide,
    draw_node,
    ensemble_predict,
    ensemble_weights,
    estimate_ensemble_loss,
    estimate_losses,
    estimate_model_loss,
    expected_round_loss,
    inverse_q_bar,
    node_ensemble_losses,
    observation_probabilities,
    observation_probability,
    resolve_rates,
    update_weights,
)
from tests.conftest import offset_catalog


def state_with(w, u, eta=0.1, xi=0.2):
    return ServerState(w=w, u=u, eta=eta, xi=xi)


def random_state_and_graph(rng, size):
    w = rng.uniform(0.05, 2.0, size)
    u = rng.uniform(0.05, 2.0, size)
    costs = rng.uniform(0.1, 1.0, size)
    costs[0] = 1.0
    budget = float(rng.uniform(1.0, costs.sum()))
    graph = generate_feedback_graph(w, costs, budget)
    return state_with(w, u, xi=float(rng.uniform(0.01, 0.9))), graph


def decision_for(state, graph, drawn):
    pmf = compute_pmf(state, graph.dominating_set)
    transmitted = graph.out_neighbors[drawn]
    return RoundDecision(
        pmf=pmf, drawn=drawn, transmitted=transmitted, ensemble_weights=ensemble_weights(state.w, transmitted)
    )


class TestServerState:
    """Test ServerState construction."""

    def test_initial_weights(self):
        state = ServerState.initial(4, eta=0.1, xi=0.1)
        np.testing.assert_array_equal(state.w, np.ones(4))
        np.testing.assert_array_equal(state.u, np.ones(4))
        assert state.round == 1
        assert state.size == 4

    def test_no_models(self):
        with pytest.raises(InvalidInputError):
            ServerState.initial(0, eta=0.1, xi=0.1)

    @pytest.mark.parametrize("w", [[1.0, 0.0], [1.0, np.inf], [1.0, -1.0]])
    def test_weights_must_be_positive(self, w):
        with pytest.raises(ValidationError):
            state_with(w, [1.0, 1.0])

    def test_exploration_rate_below_one(self):
        with pytest.raises(ValidationError):
            ServerState.initial(2, eta=0.1, xi=1.0)


class TestComputePmf:
    """Test the node sampling distribution."""

    def test_uniform_without_exploration(self):
        pmf = compute_pmf(state_with(np.ones(4), np.ones(4), xi=0.0), (0,))
        np.testing.assert_allclose(pmf, np.full(4, 0.25))

    def test_hand_evaluated(self):
        pmf = compute_pmf(state_with([1.0, 1.0], [3.0, 1.0], xi=0.5), (0, 1))
        np.testing.assert_allclose(pmf, [0.625, 0.375])

    def test_heavy_exploration_concentrates_on_dominating_set(self):
        pmf = compute_pmf(state_with(np.ones(5), np.ones(5), xi=0.999), (1, 3))
        assert pmf[1] + pmf[3] >= 0.999

    @pytest.mark.parametrize("seed", range(20))
    def test_exploration_floor(self, seed):
        rng = np.random.default_rng(seed)
        state, graph = random_state_and_graph(rng, int(rng.integers(1, 10)))
        pmf = compute_pmf(state, graph.dominating_set)
        assert math.fsum(pmf) == pytest.approx(1.0, abs=1e-12)
        for d in graph.dominating_set:
            assert pmf[d] >= state.xi / len(graph.dominating_set)

    @pytest.mark.parametrize("seed", range(50))
    def test_every_model_observed_above_floor(self, seed):
        """Domination lifts q_k above xi / |D| for models outside D as well."""
        rng = np.random.default_rng(100 + seed)
        state, graph = random_state_and_graph(rng, int(rng.integers(2, 13)))
        q = observation_probabilities(graph, compute_pmf(state, graph.dominating_set))
        assert q.min() > state.xi / len(graph.dominating_set)

    def test_observation_floor_on_a_star(self):
        """Leaves outside D = {0} are observed through the hub."""
        graph = FeedbackGraph.build(1, [(0, 1, 2, 3), (1,), (2,), (3,)], dominating_set=[0])
        state = state_with(np.ones(4), np.array([0.01, 1.0, 1.0, 1.0]), xi=0.4)
        q = observation_probabilities(graph, compute_pmf(state, graph.dominating_set))
        assert q[1:].min() > 0.4
        assert q[0] == pytest.approx(0.4 + 0.6 * 0.01 / 3.01)

    def test_scale_invariance(self):
        u = np.array([0.3, 1.2, 0.5])
        first = compute_pmf(state_with(np.ones(3), u), (0, 2))
        second = compute_pmf(state_with(np.ones(3), 1e-150 * u), (0, 2))
        np.testing.assert_allclose(first, second, rtol=1e-12)

    def test_empty_dominating_set(self):
        with pytest.raises(ContractViolationError):
            compute_pmf(ServerState.initial(2, 0.1, 0.1), ())


class TestDrawNode:
    """Test inverse-CDF sampling."""

    def test_degenerate_pmf(self):
        rng = np.random.default_rng(0)
        assert {draw_node(np.array([1.0, 0.0, 0.0]), rng) for _ in range(100)} == {0}

    def test_same_state_same_draw(self):
        pmf = np.array([0.2, 0.5, 0.3])
        first = [draw_node(pmf, np.random.default_rng(5)) for _ in range(3)]
        assert len(set(first)) == 1

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        draws = 100_000
        counts = np.bincount([draw_node(np.full(4, 0.25), rng) for _ in range(draws)], minlength=4)
        sigma = math.sqrt(draws * 0.25 * 0.75)
        assert np.all(np.abs(counts - draws / 4) <= 4 * sigma)

    def test_zero_mass_node_never_drawn(self):
        rng = np.random.default_rng(2)
        pmf = np.array([0.5, 0.0, 0.5])
        assert 1 not in {draw_node(pmf, rng) for _ in range(1000)}


class TestObservationProbability:
    """Test q_k."""

    def test_complete_graph(self):
        graph = FeedbackGraph.build(1, [[0, 1, 2]] * 3)
        np.testing.assert_allclose(observation_probabilities(graph, np.array([0.2, 0.3, 0.5])), [1.0, 1.0, 1.0])

    def test_self_loops_only(self):
        graph = FeedbackGraph.build(1, [[0], [1], [2]])
        pmf = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(observation_probabilities(graph, pmf), pmf)

    def test_star(self):
        graph = FeedbackGraph.build(1, [[0, 1, 2], [1], [2]])
        assert observation_probability(graph, np.array([0.5, 0.25, 0.25]), 1) == pytest.approx(0.75)


class TestEnsemble:
    """Test ensemble weights and predictions."""

    def test_singleton_is_the_model(self):
        catalog = offset_catalog([0.1, 0.3])
        state = ServerState.initial(2, 0.1, 0.1)
        assert ensemble_predict(state, (1,), catalog, [0.2]) == pytest.approx(0.5)

    def test_equal_weights_average(self):
        catalog = offset_catalog([0.2, 0.6])
        state = ServerState.initial(2, 0.1, 0.1)
        assert ensemble_predict(state, (0, 1), catalog, [0.0]) == pytest.approx(0.4)

    def test_weighted_combination(self):
        mixture = ensemble_weights(np.array([2.0, 1.0]), (0, 1))
        assert float(combine(mixture, np.array([0.9, 0.3]))) == pytest.approx(0.7)

    def test_order_follows_transmitted(self):
        np.testing.assert_allclose(ensemble_weights(np.array([1.0, 3.0, 4.0]), (2, 0)), [0.8, 0.2])

    def test_empty_ensemble(self):
        with pytest.raises(ContractViolationError):
            ensemble_weights(np.ones(3), ())

    def test_scale_invariance(self):
        w = np.array([0.2, 0.5, 1.3])
        np.testing.assert_allclose(ensemble_weights(w, (0, 1, 2)), ensemble_weights(1e-200 * w, (0, 1, 2)))

    def test_decide_transmits_out_neighborhood(self):
        graph = FeedbackGraph.build(1, [[0, 1], [1], [2, 1]])
        decision = decide(ServerState.initial(3, 0.1, 0.2), graph, np.random.default_rng(0))
        assert decision.transmitted == graph.out_neighbors[decision.drawn]
        assert decision.ensemble_weights.sum() == pytest.approx(1.0)


class TestLossEstimates:
    """Test the importance-sampling estimates."""

    def test_unobserved_model(self):
        assert estimate_model_loss(0.0, 0.5, False) == 0.0

    def test_observed_model(self):
        assert estimate_model_loss(0.8, 0.5, True) == pytest.approx(1.6)

    def test_undrawn_node(self):
        assert estimate_ensemble_loss(0.0, 0.3, False) == 0.0

    def test_drawn_node(self):
        assert estimate_ensemble_loss(0.6, 0.3, True) == pytest.approx(2.0)

    def test_zero_probability(self):
        with pytest.raises(NumericStateError):
            estimate_model_loss(0.5, 0.0, True)

    @pytest.mark.parametrize("seed", range(200))
    def test_unbiased_with_known_second_moment(self, seed):
        """Exact expectation over the node draw: E[l_k] = L_k, E[l_k^2] = L_k^2 / q_k,
        and the same for node ensembles with p_k in place of q_k."""
        rng = np.random.default_rng(1000 + seed)
        size = int(rng.integers(1, 8))
        state, graph = random_state_and_graph(rng, size)
        member = rng.uniform(0.0, 3.0, size)
        node_losses = rng.uniform(0.0, 3.0, size)
        pmf = compute_pmf(state, graph.dominating_set)
        q = observation_probabilities(graph, pmf)

        first_model, second_model = np.zeros(size), np.zeros(size)
        first_node, second_node = np.zeros(size), np.zeros(size)
        for drawn in range(size):
            if pmf[drawn] == 0:
                continue
            model_est, node_est = estimate_losses(graph, decision_for(state, graph, drawn), member, node_losses[drawn])
            first_model += pmf[drawn] * model_est
            second_model += pmf[drawn] * model_est ** 2
            first_node += pmf[drawn] * node_est
            second_node += pmf[drawn] * node_est ** 2

        np.testing.assert_allclose(first_model, member, rtol=1e-9)
        np.testing.assert_allclose(second_model, member ** 2 / q, rtol=1e-9)
        reachable = pmf > 0
        np.testing.assert_allclose(first_node[reachable], node_losses[reachable], rtol=1e-9)
        np.testing.assert_allclose(second_node[reachable], node_losses[reachable] ** 2 / pmf[reachable], rtol=1e-9)


class TestUpdateWeights:
    """Test the multiplicative weight update."""

    def test_zero_estimates_leave_weights(self):
        state = state_with([0.5, 2.0], [1.0, 3.0])
        updated = update_weights(state, np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(updated.w, state.w)
        np.testing.assert_array_equal(updated.u, state.u)
        assert updated.round == 2

    def test_exponential_step(self):
        updated = update_weights(state_with([1.0], [1.0], eta=0.1), np.array([2.0]), np.array([0.0]))
        assert updated.w[0] == pytest.approx(0.818731, abs=1e-6)
        assert updated.u[0] == 1.0

    def test_rescale_keeps_ratios(self):
        state = state_with([1e-200, 1e-210], [1.0, 1.0])
        updated = update_weights(state, np.zeros(2), np.zeros(2))
        assert updated.w.max() == pytest.approx(1.0)
        assert updated.w[1] / updated.w[0] == pytest.approx(1e-10)

    def test_negative_estimate(self):
        state = state_with([1.0, 1.0], [1.0, 1.0]).model_copy(update={"round": 7})
        with pytest.raises(NumericStateError) as excinfo:
            update_weights(state, np.array([-1.0, 0.0]), np.zeros(2))
        assert excinfo.value.round_index == 7
        assert "[round 7]" in str(excinfo.value)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolationError):
            update_weights(state_with([1.0, 1.0], [1.0, 1.0]), np.zeros(3), np.zeros(2))

    def test_large_estimates_stay_positive(self):
        updated = update_weights(state_with([1.0, 1.0], [1.0, 1.0], eta=1.0), np.array([1e4, 0.0]), np.zeros(2))
        assert updated.w[0] > 0
        assert updated.w[1] == 1.0


class TestExpectedLoss:
    """Test the conditional expectation of the ensemble loss."""

    def test_degenerate_pmf(self):
        assert expected_round_loss(np.array([0.0, 1.0]), np.array([0.2, 0.4])) == pytest.approx(0.4)

    def test_uniform_pmf(self):
        assert expected_round_loss(np.array([0.5, 0.5]), np.array([0.2, 0.4])) == pytest.approx(0.3)

    def test_matches_simulated_draws(self):
        """Monte-Carlo over node draws, run the way a round runs."""
        rng = np.random.default_rng(4)
        weights = np.array([1.0, 0.4, 2.0])
        graph = FeedbackGraph.build(1, [[0, 1], [1, 2], [2]])
        predictions = np.array([[0.1, 0.9, 0.4], [0.5, 0.2, 0.8], [0.3, 0.3, 0.3]])
        targets = np.array([0.2, 0.6, 0.5])
        per_node = node_ensemble_losses(weights, graph, predictions, targets)
        state = state_with(weights, [0.7, 1.1, 0.4], xi=0.3)
        pmf = compute_pmf(state, graph.dominating_set)

        draws = 100_000
        samples = per_node[[draw_node(pmf, rng) for _ in range(draws)]]
        standard_error = samples.std() / math.sqrt(draws)
        assert abs(samples.mean() - expected_round_loss(pmf, per_node)) <= 3 * standard_error

    def test_node_losses_by_hand(self):
        graph = FeedbackGraph.build(1, [[0, 1], [1]])
        predictions = np.array([[0.0], [1.0]])
        losses = node_ensemble_losses(np.array([1.0, 3.0]), graph, predictions, np.array([0.5]))
        np.testing.assert_allclose(losses, [0.0625, 0.25])

    def test_inverse_q_bar(self):
        graph = FeedbackGraph.build(1, [[0, 1], [1]])
        values = inverse_q_bar(np.array([1.0, 3.0]), graph, np.array([0.5, 1.0]))
        np.testing.assert_allclose(values, [(1.0 / 0.5 + 3.0 / 1.0) / 4.0, 1.0])


class TestResolveRates:
    """Test learning and exploration rates."""

    def test_one_over_sqrt_t(self):
        assert resolve_rates("one-over-sqrt-T", RateSchedule.ONE_OVER_SQRT_T, 400, 22) == (0.05, 0.05)

    def test_explicit_values(self):
        assert resolve_rates(0.2, 0.0, 100, 3) == (0.2, 0.0)

    def test_theorem_schedule(self):
        eta, xi = resolve_rates("theorem-1", "theorem-1", 2000, 22)
        assert eta == pytest.approx(math.sqrt(math.log(22) / 2000))
        assert xi == pytest.approx(math.log(22) ** 0.75 * 2000 ** -0.25)

    def test_theorem_schedule_caps_exploration(self):
        _, xi = resolve_rates("theorem-1", "theorem-1", 10, 22)
        assert xi == 0.5

    def test_single_model(self):
        eta, xi = resolve_rates("theorem-1", "theorem-1", 100, 1)
        assert eta == pytest.approx(0.1)
        assert xi == 0.0

    def test_short_horizons_keep_exploration_below_one(self):
        for rounds in (0, 1):
            eta, xi = resolve_rates("one-over-sqrt-T", "one-over-sqrt-T", rounds, 5)
            assert eta == 1.0
            assert xi == pytest.approx(1.0 / math.sqrt(2.0))

    @pytest.mark.parametrize("eta,xi", [(0.0, 0.1), (0.1, 1.0), (-0.5, 0.1)])
    def test_invalid_values(self, eta, xi):
        with pytest.raises(InvalidInputError):
            resolve_rates(eta, xi, 100, 3)
