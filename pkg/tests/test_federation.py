import numpy as np
import pytest

from fedspeech import (AggregationScheme, ClientState, ClientUpdate, TrainConfig,
                       aggregate, he_init, local_round, run_federated_training,
                       train_model)
from fedspeech.errors import ProtocolError, TrainingError
from fedspeech.federation import aggregation_weights
from fedspeech.network import LayerSpec

from conftest import tiny_stack


def scalar_update(site_id, value, count):
    specs = (LayerSpec(1, 1, False, "none"),)
    params = he_init(specs, np.random.default_rng(0))
    params.layers[0].weights[:] = value
    params.layers[0].biases[:] = value
    return ClientUpdate(site_id=site_id, params=params, sample_count=count)


def make_client(site_id, seed, n=24, dim=6):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n, dim))
    labels = rng.integers(0, 2, n)
    return ClientState(site_id=site_id, features=features, labels=labels,
                       rng=np.random.default_rng(seed + 1000))


class TestAggregate:
    def test_single_update_is_identity(self):
        params = he_init(tiny_stack(), np.random.default_rng(1))
        forwarded = aggregate([ClientUpdate("a", params.copy(), 17)])
        for (_, got), (_, want) in zip(forwarded.named_arrays(), params.named_arrays()):
            assert np.array_equal(got, want)

    def test_equal_counts_arithmetic_mean(self):
        out = aggregate([scalar_update("a", 1.0, 5), scalar_update("b", 3.0, 5)])
        assert out.layers[0].weights[0, 0] == 2.0

    def test_weighted_mean_counts_one_three(self):
        out = aggregate([scalar_update("a", 0.0, 1), scalar_update("b", 4.0, 3)])
        assert out.layers[0].weights[0, 0] == 3.0

    def test_uniform_scheme(self):
        out = aggregate([scalar_update("a", 0.0, 1), scalar_update("b", 4.0, 3)],
                        AggregationScheme("uniform"))
        assert out.layers[0].weights[0, 0] == 2.0

    def test_order_invariance_bit_exact(self):
        rng = np.random.default_rng(5)
        updates = []
        for i, site in enumerate(["sx", "sa", "sm"]):
            params = he_init(tiny_stack(), np.random.default_rng(i))
            updates.append(ClientUpdate(site, params, int(rng.integers(1, 50))))
        baseline = aggregate(updates)
        for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
            shuffled = aggregate([updates[i] for i in perm])
            for (_, a), (_, b) in zip(baseline.named_arrays(), shuffled.named_arrays()):
                assert np.array_equal(a, b)

    def test_equal_counts_weighted_equals_uniform_bitwise(self):
        updates = [ClientUpdate(s, he_init(tiny_stack(), np.random.default_rng(i)), 37)
                   for i, s in enumerate("abc")]
        weighted = aggregate(updates, AggregationScheme("weighted_by_samples"))
        uniform = aggregate(updates, AggregationScheme("uniform"))
        for (_, a), (_, b) in zip(weighted.named_arrays(), uniform.named_arrays()):
            assert np.array_equal(a, b)

    def test_weights_sum_to_one(self):
        updates = [scalar_update(s, 0.0, c) for s, c in (("a", 7), ("b", 11), ("c", 23))]
        for scheme in ("weighted_by_samples", "uniform"):
            weights = aggregation_weights(updates, AggregationScheme(scheme))
            assert abs(sum(weights) - 1.0) <= 1e-12

    def test_running_var_clamped(self):
        params = he_init(tiny_stack(), np.random.default_rng(1))
        params.layers[0].running_var[:] = 1e-15
        out = aggregate([ClientUpdate("a", params, 3)])
        assert np.all(out.layers[0].running_var >= 1e-12)

    def test_empty_round_rejected(self):
        with pytest.raises(ProtocolError):
            aggregate([])

    def test_shape_mismatch_names_site(self):
        good = ClientUpdate("alpha", he_init(tiny_stack(8), np.random.default_rng(0)), 3)
        bad = ClientUpdate("omega", he_init(tiny_stack(9), np.random.default_rng(0)), 3)
        with pytest.raises(ProtocolError, match="omega"):
            aggregate([good, bad])

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ProtocolError):
            AggregationScheme("median")


class TestLocalRound:
    def test_sample_count_and_determinism(self):
        specs = tiny_stack(6)
        global_params = he_init(specs, np.random.default_rng(0))
        results = []
        for _ in range(2):
            client = make_client("s1", seed=7)
            update, loss = local_round(client, global_params, TrainConfig())
            results.append((update, loss))
        assert results[0][0].sample_count == 24
        assert results[0][1] == results[1][1]
        for (_, a), (_, b) in zip(results[0][0].params.named_arrays(),
                                  results[1][0].params.named_arrays()):
            assert np.array_equal(a, b)

    def test_global_params_not_mutated(self):
        specs = tiny_stack(6)
        global_params = he_init(specs, np.random.default_rng(0))
        before = [arr.copy() for _, arr in global_params.named_arrays()]
        local_round(make_client("s1", 7), global_params, TrainConfig())
        for (_, arr), old in zip(global_params.named_arrays(), before):
            assert np.array_equal(arr, old)

    def test_zero_learning_rate_keeps_weights(self):
        specs = tiny_stack(6)
        global_params = he_init(specs, np.random.default_rng(0))
        update, _ = local_round(make_client("s1", 7), global_params,
                                TrainConfig(learning_rate=0.0, weight_decay=0.0))
        for got, want in zip(update.params.layers, global_params.layers):
            assert np.array_equal(got.weights, want.weights)
            assert np.array_equal(got.biases, want.biases)
        # batchnorm running statistics still move
        assert not np.array_equal(update.params.layers[0].running_mean,
                                  global_params.layers[0].running_mean)

    def test_too_small_client_rejected(self):
        client = make_client("tiny-site", 3, n=1)
        with pytest.raises(TrainingError, match="tiny-site"):
            local_round(client, he_init(tiny_stack(6), np.random.default_rng(0)),
                        TrainConfig())


class TestRunFederatedTraining:
    def test_single_client_equals_local_training(self):
        specs = tiny_stack(6)
        cfg = TrainConfig(epochs=7)
        rounds = 7
        client = make_client("solo", seed=11, n=20)
        fed_params, telemetry = run_federated_training(
            [make_client("solo", seed=11, n=20)], specs, rounds, cfg,
            init_rng=np.random.default_rng(99))
        local_params, _ = train_model(
            specs, client.features, client.labels, cfg,
            init_rng=np.random.default_rng(99),
            shuffle_rng=np.random.default_rng(11 + 1000), epochs=rounds)
        for (_, a), (_, b) in zip(fed_params.named_arrays(), local_params.named_arrays()):
            assert np.array_equal(a, b)
        assert len(telemetry) == rounds

    def test_telemetry_shape_and_weights(self):
        specs = tiny_stack(6)
        clients = [make_client("a", 1, n=10), make_client("b", 2, n=30)]
        _, telemetry = run_federated_training(clients, specs, rounds=3,
                                              cfg=TrainConfig(),
                                              init_rng=np.random.default_rng(0))
        assert len(telemetry) == 3 * 2
        by_site = {t.site_id: t.weight for t in telemetry}
        assert by_site["a"] == pytest.approx(0.25, abs=1e-15)
        assert by_site["b"] == pytest.approx(0.75, abs=1e-15)

    def test_identical_clients_match_single_client(self):
        specs = tiny_stack(6)
        cfg = TrainConfig(epochs=4)

        def clients(n_clients):
            return [make_client(f"c{i}", seed=5, n=16) for i in range(n_clients)]

        # every client holds the same data and rng seed, so the aggregate of a
        # round equals any single client's update
        many, _ = run_federated_training(clients(3), specs, 4, cfg,
                                         init_rng=np.random.default_rng(1))
        one, _ = run_federated_training(clients(1), specs, 4, cfg,
                                        init_rng=np.random.default_rng(1))
        for (_, a), (_, b) in zip(many.named_arrays(), one.named_arrays()):
            assert np.allclose(a, b, atol=1e-12, rtol=0)

    def test_bn_stats_freeze_flag(self):
        specs = tiny_stack(6)
        params, _ = run_federated_training(
            [make_client("a", 1)], specs, 2, TrainConfig(),
            init_rng=np.random.default_rng(3), aggregate_bn_stats=False)
        assert np.all(params.layers[0].running_mean == 0.0)
        assert np.all(params.layers[0].running_var == 1.0)

    def test_client_failure_aborts_with_context(self):
        clients = [make_client("ok", 1), make_client("degenerate", 2, n=1)]
        with pytest.raises(TrainingError, match="degenerate"):
            run_federated_training(clients, tiny_stack(6), 2, TrainConfig(),
                                   init_rng=np.random.default_rng(0))

    def test_empty_client_list_rejected(self):
        with pytest.raises(ProtocolError):
            run_federated_training([], tiny_stack(6), 1, TrainConfig())
