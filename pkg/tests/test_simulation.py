"""Tests for the feedback-graph round loop and the trace CSV."""
import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.data import normalize_minmax, synthetic_dataset
from src.exceptions import BandwidthInfeasibleError, ConfigError, ContractViolationError, InvalidInputError, SizingError
from src.models import Algorithm, RateSchedule, SplitPlan, SyntheticSpec
from src.rng import substream
from src.server import ServerState, resolve_rates
from src.simulation import (
    TRACE_COLUMNS,
    check_jensen,
    client_count,
    prepare_experiment,
    run_experiment,
    run_round,
    select_clients,
    trace_frame,
    write_trace,
)

OFFSETS = [0.05, 0.1, 0.2, 0.3, 0.5]
PARAM_COUNTS = [10, 5, 3, 8, 2]


class TestClientCount:
    """Test N_t."""

    def test_floor_of_bandwidth_ratio(self):
        assert client_count(10.0, 1.0, 4, n_max=5) == 2

    def test_cap_binds(self):
        assert client_count(1000.0, 1.0, 4, n_max=5) == 5

    def test_tiny_loss_size(self):
        assert client_count(1.0, 1e-300, 3, n_max=5) == 5

    def test_infeasible(self):
        with pytest.raises(BandwidthInfeasibleError):
            client_count(1.0, 1.0, 1, n_max=5)

    @pytest.mark.parametrize("bandwidth,loss_bandwidth,degree", [(0.0, 1.0, 1), (1.0, -1.0, 1), (10.0, 1.0, 0)])
    def test_invalid_arguments(self, bandwidth, loss_bandwidth, degree):
        with pytest.raises(InvalidInputError):
            client_count(bandwidth, loss_bandwidth, degree, n_max=5)


class TestSelectClients:
    """Test uniform client selection."""

    def test_all_clients(self):
        assert select_clients(6, 6, np.random.default_rng(0)) == tuple(range(6))

    def test_sorted_and_distinct(self):
        chosen = select_clients(5, 50, np.random.default_rng(1))
        assert list(chosen) == sorted(set(chosen))
        assert len(chosen) == 5

    def test_same_stream_same_set(self):
        assert select_clients(4, 30, substream(3, "client_selection")) == \
            select_clients(4, 30, substream(3, "client_selection"))

    def test_single_client_frequencies(self):
        rng = np.random.default_rng(2)
        draws, total = 100_000, 10
        counts = np.bincount([select_clients(1, total, rng)[0] for _ in range(draws)], minlength=total)
        sigma = math.sqrt(draws * 0.1 * 0.9)
        assert np.all(np.abs(counts - draws / total) <= 4 * sigma)

    @pytest.mark.parametrize("n_t", [0, 11])
    def test_out_of_range(self, n_t):
        with pytest.raises(SizingError):
            select_clients(n_t, 10, np.random.default_rng(0))


class TestSettings:
    """Test SimulationSettings validation."""

    def test_cap_above_client_count(self, make_settings):
        with pytest.raises(ValidationError):
            make_settings(3.0, clients=4, n_max=5)


class TestPrepareExperiment:
    """Test experiment preparation."""

    def test_predictions_cover_stream(self, make_catalog, make_experiment):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=10)
        assert experiment.predictions.shape == (5, len(experiment.stream))
        np.testing.assert_allclose(experiment.predictions[2], experiment.stream.features.ravel() + 0.2)

    def test_catalog_dimension_mismatch(self, make_catalog):
        dataset = normalize_minmax(synthetic_dataset(SyntheticSpec(feature_count=2, sample_count=50), 0))
        with pytest.raises(ConfigError) as excinfo:
            prepare_experiment(dataset, SplitPlan(seed=0, rounds=2, clients=2), catalog=make_catalog([0.0]))
        assert excinfo.value.key == "zoo_file"


class TestRunRound:
    """Test a single learning round."""

    def run_first_round(self, experiment, settings):
        state = ServerState.initial(experiment.model_count, eta=0.1, xi=0.1)
        return run_round(
            state, experiment, None, 1, settings,
            substream(experiment.seed, "node_draw"), substream(experiment.seed, "client_selection"),
        )

    def test_single_model(self, make_catalog, make_experiment, make_settings):
        """With K = 1 the ensemble is the model and every estimate is exact."""
        experiment = make_experiment(make_catalog([0.2]), rounds=1)
        state, graph, record = self.run_first_round(experiment, make_settings(1.0))

        assert record.drawn == 0
        assert record.transmitted == (0,)
        np.testing.assert_allclose(record.pmf, [1.0])
        np.testing.assert_allclose(record.client_predictions, record.client_targets + 0.2)
        assert record.model_estimates[0] == pytest.approx(record.member_losses[0])
        assert record.ensemble_estimates[0] == pytest.approx(record.realized_ensemble_loss)
        assert record.expected_ensemble_loss == pytest.approx(record.realized_ensemble_loss)
        assert state.round == 2
        assert graph.out_neighbors == ((0,),)

    def test_oracle_losses(self, make_catalog, make_experiment, make_settings):
        """On y = x data model k loses exactly its offset squared per client."""
        experiment = make_experiment(make_catalog(OFFSETS), rounds=1)
        _, _, record = self.run_first_round(experiment, make_settings(2.0))
        expected = record.n_clients * np.square(OFFSETS)
        np.testing.assert_allclose(record.oracle_losses, expected)
        for k, loss in record.member_losses.items():
            assert loss == pytest.approx(expected[k])

    def test_ensemble_loss_bounded_by_members(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS, PARAM_COUNTS), rounds=1)
        _, _, record = self.run_first_round(experiment, make_settings(1.5))
        mixture_bound = max(record.member_losses.values())
        assert record.realized_ensemble_loss <= mixture_bound + 1e-12

    def test_bandwidth_failure_names_round(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=1)
        with pytest.raises(BandwidthInfeasibleError) as excinfo:
            self.run_first_round(experiment, make_settings(2.0, bandwidth=1.0))
        assert excinfo.value.round_index == 1


class TestRunExperiment:
    """Test full runs of the feedback-graph learner."""

    def test_budget_never_exceeded(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS, PARAM_COUNTS), rounds=60)
        trace = run_experiment(experiment, make_settings(1.5), eta=0.2, xi=0.2)
        assert trace.rounds == 60
        assert all(record.transmitted_cost <= 1.5 for record in trace.records)
        assert all(not record.over_budget for record in trace.records)

    def test_full_budget_sends_everything(self, make_catalog, make_experiment, make_settings):
        catalog = make_catalog(OFFSETS, PARAM_COUNTS)
        experiment = make_experiment(catalog, rounds=30)
        total = math.fsum(catalog.costs)
        trace = run_experiment(experiment, make_settings(total), eta=0.2, xi=0.2)
        for record in trace.records:
            assert sorted(record.transmitted) == list(range(5))
            assert record.transmitted_cost == pytest.approx(total)
            assert record.transmitted_cost <= total

    def test_bandwidth_limits_clients(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=20)
        trace = run_experiment(experiment, make_settings(3.0, bandwidth=12.0), eta=0.1, xi=0.1)
        for record in trace.records:
            assert record.n_clients == min(5, math.floor(12.0 / (len(record.transmitted) + 1)))

    def test_weights_favor_the_best_model(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=200)
        records = []
        run_experiment(experiment, make_settings(1.0), eta=0.5, xi=0.3, records=records)
        late = [r.drawn for r in records[-50:]]
        assert max(set(late), key=late.count) == 0

    def test_oracle_matrix(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=7)
        trace = run_experiment(experiment, make_settings(2.0), eta=0.1, xi=0.1)
        assert trace.oracle_losses.shape == (7, 5)
        assert trace.algorithm is Algorithm.EFL_FG

    def test_oracle_off(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=3)
        trace = run_experiment(experiment, make_settings(2.0, oracle=False), eta=0.1, xi=0.1)
        assert trace.oracle_losses is None
        assert all(record.oracle_losses is None for record in trace.records)

    def test_callbacks(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=5)
        updates, graphs = [], []
        run_experiment(
            experiment, make_settings(2.0), eta=0.1, xi=0.1,
            progress_callback=updates.append, graph_sink=graphs.append,
        )
        assert [g.round for g in graphs] == [1, 2, 3, 4, 5]
        assert updates[-1] == {"progress": 1.0, "t": 5, "algorithm": "efl-fg", "status": "complete"}

    def test_zero_rounds(self, make_catalog, make_experiment, make_settings, tmp_path):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=0)
        trace = run_experiment(experiment, make_settings(2.0), eta=1.0, xi=0.5)
        assert trace.rounds == 0
        path = write_trace(trace.records, tmp_path / "trace.csv")
        assert path.read_text() == ",".join(TRACE_COLUMNS) + "\n"

    def test_same_seed_same_bytes(self, make_catalog, make_experiment, make_settings, tmp_path):
        paths = []
        for name in ("first.csv", "second.csv"):
            experiment = make_experiment(make_catalog(OFFSETS, PARAM_COUNTS), seed=4, rounds=40)
            trace = run_experiment(experiment, make_settings(1.5), eta=0.2, xi=0.2)
            paths.append(write_trace(trace.records, tmp_path / name, estimate_columns=True))
        assert paths[0].read_bytes() == paths[1].read_bytes()


class TestTraceFrame:
    """Test the trace CSV layout."""

    @pytest.fixture
    def records(self, make_catalog, make_experiment, make_settings):
        experiment = make_experiment(make_catalog(OFFSETS), rounds=4)
        return run_experiment(experiment, make_settings(2.0), eta=0.1, xi=0.1).records

    def test_columns(self, records):
        frame = trace_frame(records)
        assert list(frame.columns) == TRACE_COLUMNS
        assert frame["t"].tolist() == [1, 2, 3, 4]
        assert (frame["algorithm"] == "efl-fg").all()

    def test_running_mse(self, records):
        frame = trace_frame(records)
        errors = [record.squared_error_mean for record in records]
        assert frame["mse_t"].iloc[-1] == pytest.approx(np.mean(errors))

    def test_estimate_columns(self, records):
        frame = trace_frame(records, estimate_columns=True)
        assert [f"est_model_{k}" for k in range(5)] == [c for c in frame.columns if c.startswith("est_model_")]
        assert "est_ensemble_4" in frame.columns

    def test_transmitted_list(self, records):
        frame = trace_frame(records)
        assert frame["transmitted"].iloc[0] == ";".join(str(k) for k in records[0].transmitted)

    def test_csv_reads_back(self, records, tmp_path):
        path = write_trace(records, tmp_path / "trace.csv")
        frame = pd.read_csv(path)
        assert len(frame) == 4
        assert frame["alpha"].notna().all()


class TestJensenCheck:
    """Test the ensemble-versus-members guarantee."""

    def test_convex_combination_passes(self):
        check_jensen(np.array([0.5, 0.5]), np.array([[0.1, 0.9], [0.7, 0.2]]), np.array([0.3, 0.4]), t=1)

    def test_violation_detected(self):
        with pytest.raises(ContractViolationError) as excinfo:
            check_jensen(np.array([2.0]), np.array([[0.5]]), np.array([0.0]), t=9)
        assert excinfo.value.round_index == 9


@pytest.mark.slow
class TestDefaultZooBudget:
    """Test the hard budget with the heterogeneous-cost default zoo."""

    @pytest.mark.parametrize("seed", range(5))
    def test_budget_never_exceeded(self, make_zoo_experiment, make_settings, seed):
        experiment = make_zoo_experiment(feature_count=4, seed=seed)
        assert len(set(np.round(experiment.costs, 6))) > 2
        settings = make_settings(3.0, clients=100, n_max=10, oracle=False, alpha_diagnostic=False)
        eta, xi = resolve_rates(RateSchedule.ONE_OVER_SQRT_T, RateSchedule.ONE_OVER_SQRT_T, 2000, experiment.model_count)
        trace = run_experiment(experiment, settings, eta=eta, xi=xi)

        assert trace.rounds == 2000
        for record in trace.records:
            assert record.transmitted_cost <= 3.0
            assert math.fsum(experiment.costs[k] for k in record.transmitted) <= 3.0
