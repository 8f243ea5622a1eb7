import numpy as np
import pytest

from fedprint.data import synth_blobs, partition_iid
from fedprint.federation import (
    ArchitectureMismatchError,
    ClientState,
    EmptyShardError,
    ServerState,
    aggregate,
    local_update,
    make_clients,
    run_round,
    update_rate,
)
from fedprint.nn import ModelParams, accuracy, init_params


def blob_world(seed=1, classes=4, per_class=30, dim=8, clients=3, epochs=1,
               lr=0.1, momentum=0.0):
    ds = synth_blobs(classes, per_class, dim, 0.08, seed=seed)
    part = partition_iid(ds, clients, seed=seed)
    cs = make_clients(ds, part.assignments, epochs, lr, momentum, 16, train_seed=seed)
    server = ServerState(init_params((dim, 16, classes), np.random.default_rng(seed)))
    return ds, cs, server


class TestLocalUpdate:
    def test_zero_epochs_returns_global_params(self):
        ds, clients, server = blob_world(epochs=0)
        out = local_update(clients[0], server.global_params)
        assert out == server.global_params

    def test_identical_shards_and_seeds_identical_params(self):
        ds, _, server = blob_world()
        idx = np.arange(20)
        a = ClientState(id=7, dataset=ds, indices=idx, epochs_per_round=2, lr=0.1)
        b = ClientState(id=7, dataset=ds, indices=idx, epochs_per_round=2, lr=0.1)
        a.bind_rng(99)
        b.bind_rng(99)
        pa = local_update(a, server.global_params)
        pb = local_update(b, server.global_params)
        assert pa == pb

    def test_empty_shard_raises(self):
        ds, _, server = blob_world()
        c = ClientState(id=0, dataset=ds, indices=np.array([], dtype=int),
                        epochs_per_round=1, lr=0.1)
        c.bind_rng(1)
        with pytest.raises(EmptyShardError):
            local_update(c, server.global_params)

    def test_single_client_converges(self):
        # Same centers for train and eval: carve a held-out split per class.
        full = synth_blobs(5, 80, 32, 0.1, seed=5)
        train_idx, eval_idx = [], []
        for k in range(5):
            train_idx.extend(range(k * 80, k * 80 + 60))
            eval_idx.extend(range(k * 80 + 60, (k + 1) * 80))
        train, ev = full.subset(np.array(train_idx)), full.subset(np.array(eval_idx))
        client = ClientState(
            id=0, dataset=train, indices=np.arange(len(train)), epochs_per_round=1,
            lr=0.1, momentum=0.9,
        )
        client.bind_rng(6)
        server = ServerState(init_params((32, 32, 5), np.random.default_rng(7)))
        for _ in range(40):
            server.global_params = local_update(client, server.global_params)
        model = server.model
        assert accuracy(model, ev.samples, ev.labels) >= 0.95


class TestAggregate:
    def test_identical_uploads_bitexact(self):
        params = init_params((6, 4), np.random.default_rng(8))
        agg = aggregate([params.copy() for _ in range(5)])
        assert agg == params

    def test_two_point_mean(self):
        zeros = ModelParams(
            [(np.zeros((3, 2), np.float32), np.zeros(2, np.float32))]
        )
        twos = ModelParams(
            [(np.full((3, 2), 2.0, np.float32), np.full(2, 2.0, np.float32))]
        )
        agg = aggregate([zeros, twos])
        assert np.all(agg.layers[0][0] == 1.0)
        assert np.all(agg.layers[0][1] == 1.0)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(9)
        uploads = [init_params((5, 7, 3), np.random.default_rng(10 + i))
                   for i in range(5)]
        agg = aggregate(uploads)
        # scalar-loop mean oracle
        for li in range(2):
            for part in range(2):
                shape = uploads[0].layers[li][part].shape
                flat_up = [u.layers[li][part].ravel() for u in uploads]
                got = agg.layers[li][part].ravel()
                for j in range(got.size):
                    expect = sum(float(f[j]) for f in flat_up) / 5.0
                    assert abs(float(got[j]) - expect) < 1e-6

    def test_architecture_mismatch(self):
        a = init_params((5, 3), np.random.default_rng(11))
        b = init_params((5, 4), np.random.default_rng(12))
        with pytest.raises(ArchitectureMismatchError):
            aggregate([a, b])

    def test_empty_uploads(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_linearity_power_of_two_exact(self):
        uploads = [init_params((4, 6, 3), np.random.default_rng(20 + i))
                   for i in range(3)]
        doubled = [
            ModelParams([(2.0 * w, 2.0 * b) for w, b in u.layers]) for u in uploads
        ]
        lhs = aggregate(doubled)
        base = aggregate(uploads)
        rhs = ModelParams([(2.0 * w, 2.0 * b) for w, b in base.layers])
        assert lhs == rhs

    def test_linearity_general_scalar_close(self):
        a = 0.3
        uploads = [init_params((4, 6, 3), np.random.default_rng(30 + i))
                   for i in range(3)]
        scaled = [
            ModelParams(
                [(np.float32(a) * w, np.float32(a) * b) for w, b in u.layers]
            )
            for u in uploads
        ]
        lhs = aggregate(scaled).flat()
        rhs = a * aggregate(uploads).flat()
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_weighted_mode(self):
        zeros = ModelParams([(np.zeros((2, 2), np.float32), np.zeros(2, np.float32))])
        fours = ModelParams([(np.full((2, 2), 4.0, np.float32), np.full(2, 4.0, np.float32))])
        agg = aggregate([zeros, fours], weights=[3.0, 1.0])
        assert np.all(agg.layers[0][0] == 1.0)


class TestRunRound:
    def test_zero_epochs_zero_update_rate(self):
        ds, clients, server = blob_world(epochs=0)
        record = run_round(server, clients, ds)
        assert record.update_rate == 0.0
        assert record.round == 1

    def test_round_advances_and_gmc_in_range(self):
        ds, clients, server = blob_world()
        r1 = run_round(server, clients, ds)
        r2 = run_round(server, clients, ds)
        assert (r1.round, r2.round) == (1, 2)
        assert 0.0 <= r1.gmc <= 1.0

    def test_update_rate_definition(self):
        old = init_params((3, 2), np.random.default_rng(40))
        new = ModelParams([(w + 1.0, b + 1.0) for w, b in old.layers])
        expect = float(
            np.linalg.norm(new.flat().astype(np.float64) - old.flat().astype(np.float64))
            / np.linalg.norm(old.flat().astype(np.float64))
        )
        assert np.isclose(update_rate(old, new), expect)

    def test_deterministic_rounds(self):
        def do():
            ds, clients, server = blob_world(seed=3)
            out = []
            for _ in range(3):
                out.append(run_round(server, clients, ds).gmc)
            return out, server.global_params

        (gmc1, p1), (gmc2, p2) = do(), do()
        assert gmc1 == gmc2
        assert p1 == p2

    def test_update_rate_trace_decays_on_blobs(self):
        # Early rounds move a lot; late rounds level off.
        ds = synth_blobs(10, 100, 96, 0.1, seed=13)
        part = partition_iid(ds, 5, seed=13)
        clients = make_clients(ds, part.assignments, 1, 0.05, 0.9, 32, train_seed=13)
        server = ServerState(init_params((96, 64, 10), np.random.default_rng(13)))
        rates = [run_round(server, clients, ds).update_rate for _ in range(80)]
        kernel = np.ones(9) / 9
        smoothed = np.convolve(rates, kernel, mode="valid")
        peak_at = int(np.argmax(smoothed))
        assert peak_at < 20
        assert smoothed[-1] < 0.5 * smoothed[peak_at]
        late = smoothed[len(smoothed) // 2 :]
        assert np.std(late) < 0.25 * smoothed[peak_at]
