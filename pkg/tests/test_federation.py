"""Protocol engine: schedules, client updates, aggregation, full rounds."""

import math

import numpy as np
import pytest

import fedcg.tensor as T
from fedcg import serialize
from fedcg.data import generate_synthetic_dataset, partition
from fedcg.federation import (FedCGUpload, RoundConfig, gamma_schedule, make_client,
                              make_server, run_round, run_seed, weighted_average)
from fedcg.models import ModelSpec


@pytest.fixture(autouse=True)
def float64_mode():
    T.set_default_dtype(np.float64)
    yield


SPEC = ModelSpec(image_channels=1, classes=3, noise_dim=8,
                 generator_channels=(16, 12, 10), discriminator_channels=(8, 10))


def tiny_setup(clients=2, samples_per_class=12, seed=0, **config_kwargs):
    defaults = dict(rounds=2, local_epochs=1, batch_size=8, server_iters=4,
                    server_batch=8, patience=10)
    defaults.update(config_kwargs)
    config = RoundConfig(**defaults)
    dataset = generate_synthetic_dataset(SPEC.classes, samples_per_class,
                                         image_shape=(1, 32, 32), seed=seed)
    part = partition(dataset, clients, scheme="iid", seed=seed)
    return dataset, part, config


class TestGammaSchedule:
    def test_endpoints(self):
        assert gamma_schedule(0, 100) == 0.0
        assert gamma_schedule(99, 100) == 1.0

    def test_linear_midpoint(self):
        assert gamma_schedule(50, 100) == pytest.approx(50 / 99)

    def test_monotone_both_kinds(self):
        for kind in ("linear", "cosine"):
            values = [gamma_schedule(r, 40, kind) for r in range(40)]
            assert values[0] == 0.0 and values[-1] == 1.0
            assert all(a <= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            gamma_schedule(5, 5)

    def test_single_round_degenerate(self):
        assert gamma_schedule(0, 1) == 0.0


class TestWeightedAverage:
    def test_two_equal_clients(self):
        out = weighted_average([{"p": np.array([0.0])}, {"p": np.array([2.0])}], [0.5, 0.5])
        assert out["p"][0] == 1.0

    def test_identical_params_fixed_point(self):
        params = {"w": np.random.default_rng(0).standard_normal((3, 3))}
        out = weighted_average([{k: v.copy() for k, v in params.items()} for _ in range(3)],
                               [0.2, 0.5, 0.3])
        np.testing.assert_allclose(out["w"], params["w"], rtol=1e-15)

    def test_hand_arithmetic(self):
        out = weighted_average([{"p": np.array([1.0])}, {"p": np.array([2.0])},
                                {"p": np.array([10.0])}], [0.5, 0.3, 0.2])
        assert out["p"][0] == pytest.approx(3.1, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        sets = [{"w": rng.standard_normal(4)} for _ in range(3)]
        weights = [0.2, 0.3, 0.5]
        a = weighted_average(sets, weights)
        order = [2, 0, 1]
        b = weighted_average([sets[i] for i in order], [weights[i] for i in order])
        np.testing.assert_allclose(a["w"], b["w"], atol=1e-15)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            weighted_average([{"p": np.zeros(1)}], [0.9])


class TestClientUpdates:
    def test_fedcg_upload_structurally_lacks_private_nets(self):
        fields = {f.name for f in FedCGUpload.__dataclass_fields__.values()}
        assert fields == {"client_id", "num_samples", "generator", "classifier"}

    def test_gamma_zero_matches_plain_classification_bitwise(self):
        dataset, part, config = tiny_setup()
        seed = 11
        # fedcg stage-1 at gamma 0 vs fedavg client on identical download
        c_fedcg = make_client(0, SPEC, dataset, part, config, seed)
        c_plain = make_client(0, SPEC, dataset, part, config, seed)
        server = make_server(SPEC, config, seed)
        from fedcg.federation import client_update_baseline, client_update_fedcg

        download_cg = server.fedcg_download()
        upload_cg, m_cg = client_update_fedcg(c_fedcg, download_cg, 0.0, config, 0, seed)
        download_avg = server.baseline_params(include_extractor=True)
        # fedsplit replaces only the classifier, matching fedcg stage 1
        upload_bl, m_bl = client_update_baseline(c_plain, download_avg, "fedsplit",
                                                 config, 0, seed)
        assert m_cg["loss_cls"] == m_bl["loss_cls"]
        for k, v in upload_cg.classifier.items():
            np.testing.assert_array_equal(v, upload_bl.params[f"C.{k}"])

    def test_fedsplit_upload_contains_only_classifier(self):
        dataset, part, config = tiny_setup()
        client = make_client(0, SPEC, dataset, part, config, 3)
        server = make_server(SPEC, config, 3)
        from fedcg.federation import client_update_baseline

        upload, _ = client_update_baseline(client, server.baseline_params(False),
                                           "fedsplit", config, 0, 3)
        assert all(k.startswith("C.") for k in upload.params)

    def test_local_uploads_nothing(self):
        dataset, part, config = tiny_setup()
        client = make_client(0, SPEC, dataset, part, config, 4)
        from fedcg.federation import client_update_baseline

        upload, metrics = client_update_baseline(client, None, "local", config, 0, 4)
        assert upload is None
        assert math.isfinite(metrics["loss_cls"])


class TestReductionIdentities:
    def run_strategy(self, strategy, seed=21, **extra):
        dataset, part, config = tiny_setup(**extra)
        clients = [make_client(cid, SPEC, dataset, part, config, seed)
                   for cid in range(part.num_clients)]
        server = make_server(SPEC, config, seed)
        states = []
        for r in range(config.rounds):
            run_round(clients, server, strategy, r, config, seed)
            states.append({f"c{c.client_id}.{k}": v
                           for c in clients for k, v in c.bundle.named_state().items()})
        return states

    def test_fedprox_mu_zero_equals_fedavg(self):
        a = self.run_strategy("fedavg")
        b = self.run_strategy("fedprox", mu_prox=0.0)
        for sa, sb in zip(a, b):
            for k in sa:
                assert np.array_equal(sa[k], sb[k]), k

    def test_fedavg_dp_degenerate_equals_fedavg(self):
        a = self.run_strategy("fedavg")
        b = self.run_strategy("fedavg_dp", dp_noise_variance=0.0, dp_clip=math.inf)
        for sa, sb in zip(a, b):
            for k in sa:
                assert np.array_equal(sa[k], sb[k]), k

    def test_fedavg_dp_noise_changes_params(self):
        a = self.run_strategy("fedavg")
        b = self.run_strategy("fedavg_dp", dp_noise_variance=1e-4, dp_clip=math.inf)
        assert any(not np.array_equal(a[-1][k], b[-1][k]) for k in a[-1]
                   if k.endswith("conv1.weight"))

    def test_dp_clip_bounds_delta_norm(self):
        dataset, part, config = tiny_setup(dp_noise_variance=0.0, dp_clip=0.05)
        seed = 5
        client = make_client(0, SPEC, dataset, part, config, seed)
        server = make_server(SPEC, config, seed)
        from fedcg.federation import client_update_baseline

        download = server.baseline_params(True)
        upload, _ = client_update_baseline(client, download, "fedavg_dp", config, 0, seed)
        delta_sq = sum(float(np.sum((upload.params[k] - download[k]) ** 2))
                       for k in upload.params)
        assert math.sqrt(delta_sq) <= 0.05 + 1e-12


class TestServerAggregation:
    def test_identical_uploads_distillation_fixed_point(self):
        dataset, part, config = tiny_setup(server_iters=20)
        seed = 31
        server = make_server(SPEC, config, seed)
        client = make_client(0, SPEC, dataset, part, config, seed)
        upload = FedCGUpload(client_id=0, num_samples=10,
                             generator=client.bundle.generator.state(),
                             classifier=client.bundle.classifier.state())
        uploads = [FedCGUpload(cid, 10, {k: v.copy() for k, v in upload.generator.items()},
                               {k: v.copy() for k, v in upload.classifier.items()})
                   for cid in range(3)]
        before_g = {k: v.copy() for k, v in server.global_generator.state().items()}
        from fedcg.federation import server_aggregate_fedcg

        metrics = server_aggregate_fedcg(uploads, server, config, 0, seed)
        assert metrics["kl_first"] <= 1e-9
        # parameters stay at the average (== the shared upload) up to tiny drift
        for k, v in server.global_generator.state().items():
            drift = np.max(np.abs(v - upload.generator[k]))
            assert drift < 1e-6, (k, drift)

    def test_single_client_degenerate_ensemble(self):
        dataset, part, config = tiny_setup(server_iters=3)
        seed = 32
        server = make_server(SPEC, config, seed)
        client = make_client(0, SPEC, dataset, part, config, seed)
        upload = FedCGUpload(0, 12, client.bundle.generator.state(),
                             client.bundle.classifier.state())
        from fedcg.federation import server_aggregate_fedcg

        metrics = server_aggregate_fedcg([upload], server, config, 0, seed)
        assert metrics["kl_first"] <= 1e-9

    def test_divergent_clients_kl_decreases(self):
        dataset, part, config = tiny_setup(server_iters=60)
        seed = 33
        server = make_server(SPEC, config, seed)
        uploads = []
        for cid in range(2):
            client = make_client(cid, SPEC, dataset, part, config, seed + cid)
            uploads.append(FedCGUpload(cid, 10, client.bundle.generator.state(),
                                       client.bundle.classifier.state()))
        from fedcg.federation import server_aggregate_fedcg

        metrics = server_aggregate_fedcg(uploads, server, config, 0, seed)
        assert metrics["kl_last"] <= metrics["kl_first"]


class TestRunRound:
    def test_local_leaves_server_untouched(self):
        dataset, part, config = tiny_setup()
        seed = 41
        clients = [make_client(cid, SPEC, dataset, part, config, seed) for cid in range(2)]
        server = make_server(SPEC, config, seed)
        before = {k: v.copy() for k, v in server.global_classifier.state().items()}
        before.update({f"E.{k}": v.copy() for k, v in server.global_extractor.state().items()})
        run_round(clients, server, "local", 0, config, seed)
        after = {k: v for k, v in server.global_classifier.state().items()}
        after.update({f"E.{k}": v for k, v in server.global_extractor.state().items()})
        for k in before:
            assert np.array_equal(before[k], after[k])

    def test_single_client_fedavg_global_equals_client(self):
        dataset, part, config = tiny_setup(clients=1)
        seed = 42
        clients = [make_client(0, SPEC, dataset, part, config, seed)]
        server = make_server(SPEC, config, seed)
        run_round(clients, server, "fedavg", 0, config, seed)
        for k, v in server.global_classifier.state().items():
            np.testing.assert_array_equal(v, clients[0].bundle.classifier.state()[k])

    def test_parallel_equals_sequential(self):
        seed = 43
        outcomes = []
        for workers in (1, 2):
            dataset, part, config = tiny_setup(clients=3, samples_per_class=15)
            clients = [make_client(cid, SPEC, dataset, part, config, seed)
                       for cid in range(3)]
            server = make_server(SPEC, config, seed)
            for r in range(2):
                run_round(clients, server, "fedcg", r, config, seed, max_workers=workers)
            outcomes.append({
                "G": server.global_generator.state(),
                "C": server.global_classifier.state(),
            })
        for part_name in ("G", "C"):
            for k in outcomes[0][part_name]:
                assert np.array_equal(outcomes[0][part_name][k], outcomes[1][part_name][k]), \
                    (part_name, k)


class TestPrivacyBoundary:
    def test_no_private_parameters_cross_the_wire(self):
        dataset, part, config = tiny_setup()
        seed = 51
        spec = SPEC
        result = run_seed(dataset, part, spec, config, "fedcg", seed, collect_uploads=True)
        seen_any = False
        for round_uploads in result.uploads_log:
            for upload in round_uploads:
                seen_any = True
                blob = serialize.dump_bytes(upload.named_tensors())
                names = serialize.load_bytes(blob).keys()
                assert names, "empty upload"
                for name in names:
                    assert name.startswith(("G.", "C.")), name
                    assert not name.startswith(("E.", "D."))
        assert seen_any

    def test_run_seed_reports_metrics_rows(self):
        dataset, part, config = tiny_setup()
        result = run_seed(dataset, part, SPEC, config, "fedavg", 7)
        metrics = {m for (_, _, m, _) in result.records}
        assert {"loss_cls", "val_accuracy", "test_accuracy",
                "best_test_accuracy", "mean_best_test_accuracy"} <= metrics

    def test_run_seed_deterministic(self):
        dataset, part, config = tiny_setup()
        a = run_seed(dataset, part, SPEC, config, "fedcg", 9)
        b = run_seed(dataset, part, SPEC, config, "fedcg", 9)
        assert a.records == b.records
