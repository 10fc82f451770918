import json

import numpy as np
import pytest

import pdadmm.trainer as trainer_mod
from pdadmm.data import random_dataset
from pdadmm.diagnostics import descent_constants, lagrangian
from pdadmm.state import HyperParams, NetworkSpec, init_state
from pdadmm.trainer import (
    PHASES,
    NonFiniteError,
    TrainConfig,
    benchmark,
    metrics_record,
    run_iteration,
    train,
)


def states_equal(a, b):
    if a.spec != b.spec:
        return False
    for blk_a, blk_b in zip(a.layers, b.layers):
        for name in ("W", "b", "z", "p", "q", "u"):
            x, y = getattr(blk_a, name), getattr(blk_b, name)
            if (x is None) != (y is None):
                return False
            if x is not None and not np.array_equal(x, y):
                return False
    return True


class TestTrainConfig:
    def test_rejects_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            TrainConfig(epochs=1, mode="async")

    def test_rejects_bad_workers(self):
        with pytest.raises(ValueError, match="workers"):
            TrainConfig(epochs=1, workers=0)

    def test_growth_epochs_strictly_increasing(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            TrainConfig(epochs=5, growth_schedule=((3, 1), (3, 1)))
        with pytest.raises(ValueError, match="strictly increasing"):
            TrainConfig(epochs=5, growth_schedule=((0, 1),))


class TestRunIteration:
    def test_strict_descent_above_threshold(self, tiny_state, hp):
        assert hp.rho > descent_constants(hp).rho_threshold
        before = lagrangian(tiny_state, hp)
        _, metrics = run_iteration(tiny_state, hp, lagrangian_pre=before)
        assert metrics.lagrangian < before
        assert metrics.descent_gap >= -1e-8

    @pytest.mark.parametrize("workers", [2, 4, 8])
    def test_parallel_matches_serial_bitwise(self, tiny_state, hp, workers):
        serial_state, serial_m = run_iteration(tiny_state, hp)
        parallel_state, parallel_m = run_iteration(
            tiny_state, hp, mode="parallel", workers=workers
        )
        assert states_equal(serial_state, parallel_state)
        assert serial_m.lagrangian == parallel_m.lagrangian
        assert serial_m.objective == parallel_m.objective
        assert serial_m.per_layer_residual_sq == parallel_m.per_layer_residual_sq
        assert serial_m.tau == parallel_m.tau
        assert serial_m.theta == parallel_m.theta
        assert serial_m.step_quantity == parallel_m.step_quantity

    def test_input_state_never_mutated(self, tiny_state, hp):
        before = [
            (blk.W.copy(), blk.b.copy(), blk.z.copy(), blk.p.copy())
            for blk in tiny_state.layers
        ]
        run_iteration(tiny_state, hp)
        for blk, (W, b, z, p) in zip(tiny_state.layers, before):
            assert np.array_equal(blk.W, W)
            assert np.array_equal(blk.b, b)
            assert np.array_equal(blk.z, z)
            assert np.array_equal(blk.p, p)

    def test_worker_failure_aborts_without_commit(self, tiny_state, hp, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("injected failure")

        monkeypatch.setattr(trainer_mod, "update_q", boom)
        snapshot = [
            None if blk.q is None else blk.q.copy() for blk in tiny_state.layers
        ]
        with pytest.raises(RuntimeError, match="injected failure"):
            run_iteration(tiny_state, hp, mode="parallel", workers=4)
        for blk, q in zip(tiny_state.layers, snapshot):
            if q is not None:
                assert np.array_equal(blk.q, q)

    def test_phase_timings_recorded(self, tiny_state, hp):
        _, metrics = run_iteration(tiny_state, hp)
        assert tuple(metrics.phase_ns) == PHASES
        assert all(v >= 0 for v in metrics.phase_ns.values())

    def test_timing_suppressed(self, tiny_state, hp):
        _, metrics = run_iteration(tiny_state, hp, collect_timing=False)
        assert metrics.phase_ns is None

    def test_unknown_mode_rejected(self, tiny_state, hp):
        with pytest.raises(ValueError, match="mode"):
            run_iteration(tiny_state, hp, mode="pipelined")


class TestTrain:
    def test_zero_epochs_identity(self, tiny_state, hp):
        final, history = train(tiny_state, TrainConfig(epochs=0), hp)
        assert final is tiny_state
        assert history == []

    def test_equivalent_to_repeated_iterations(self, tiny_state, hp):
        manual = tiny_state
        for _ in range(5):
            manual, _ = run_iteration(manual, hp)
        trained, history = train(tiny_state, TrainConfig(epochs=5), hp)
        assert states_equal(manual, trained)
        assert len(history) == 5
        assert [m.epoch for m in history] == [1, 2, 3, 4, 5]

    def test_monotone_lagrangian(self, tiny_state, hp):
        _, history = train(tiny_state, TrainConfig(epochs=40), hp)
        lags = [lagrangian(tiny_state, hp)] + [m.lagrangian for m in history]
        assert all(b <= a + 1e-8 for a, b in zip(lags, lags[1:]))

    def test_c_k_is_running_minimum(self, tiny_state, hp):
        _, history = train(tiny_state, TrainConfig(epochs=20), hp)
        best = np.inf
        for m in history:
            best = min(best, m.step_quantity)
            assert m.c_k == best
        cs = [m.c_k for m in history]
        assert all(b <= a for a, b in zip(cs, cs[1:]))

    def test_growth_schedule_applied(self):
        dataset = random_dataset(n_features=6, n_samples=30, n_classes=3, seed=4)
        spec = NetworkSpec((6, 8, 8, 3))
        state = init_state(spec, dataset, seed=0)
        hp = HyperParams(rho=1.0, nu=0.1)
        final, history = train(
            state, TrainConfig(epochs=6, growth_schedule=((4, 2),)), hp
        )
        assert len(final.layers) == 5
        assert len(history) == 6

    def test_metrics_sink_schema(self, tiny_state, hp, tmp_path):
        path = tmp_path / "metrics.jsonl"
        train(tiny_state, TrainConfig(epochs=3, metrics_path=str(path)), hp)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        for line in lines:
            record = json.loads(line)
            assert list(record) == [
                "epoch",
                "F",
                "lagrangian",
                "residual_norm_sq_total",
                "per_layer_residuals",
                "train_accuracy",
                "phase_times_ns",
                "c_k",
                "descent_gap",
                "certificates",
            ]
            assert set(record["phase_times_ns"]) == set(PHASES)
            cert = record["certificates"]
            assert cert["satisfied"] is True
            assert cert["dual_identity_max"] <= 1e-8

    def test_no_timing_drops_field_and_is_reproducible(self, tiny_state, hp, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        cfg1 = TrainConfig(epochs=3, metrics_path=str(p1), no_timing=True)
        cfg2 = TrainConfig(epochs=3, metrics_path=str(p2), no_timing=True)
        train(tiny_state, cfg1, hp)
        train(tiny_state, cfg2, hp)
        assert "phase_times_ns" not in json.loads(p1.read_text().splitlines()[0])
        assert p1.read_bytes() == p2.read_bytes()

    def test_certificates_off_leaves_nulls(self, tiny_state, hp, tmp_path):
        path = tmp_path / "metrics.jsonl"
        train(
            tiny_state,
            TrainConfig(epochs=2, metrics_path=str(path), check_certificates=False),
            hp,
        )
        record = json.loads(path.read_text().splitlines()[0])
        assert record["c_k"] is None
        assert record["descent_gap"] is None
        assert record["certificates"] is None

    def test_non_finite_objective_aborts(self, tiny_state, hp, monkeypatch):
        monkeypatch.setattr(trainer_mod, "objective_F", lambda *a, **k: float("inf"))
        with pytest.raises(NonFiniteError) as err:
            train(tiny_state, TrainConfig(epochs=2, check_certificates=False), hp)
        assert err.value.report["epoch"] == 1


class TestMetricsRecord:
    def test_round_trips_through_json(self, tiny_state, hp):
        _, metrics = run_iteration(tiny_state, hp)
        metrics.epoch = 1
        metrics.c_k = metrics.step_quantity
        record = json.loads(json.dumps(metrics_record(metrics, hp)))
        assert record["F"] == metrics.objective
        assert record["certificates"]["rhs"] == metrics.step_quantity


@pytest.fixture(scope="module")
def warmed_process():
    # Stabilize CPU frequency, allocator pools, and BLAS setup before any
    # timing assertion; measured warm-up epochs alone do not cover these
    # process-wide cold-start effects.
    hp = HyperParams(rho=1.0, nu=0.1)
    dataset = random_dataset(320, 600, 10, seed=0)
    spec = NetworkSpec((320,) * 4 + (10,))
    trainer_mod._timed_epochs(spec, dataset, hp, 3, "serial", 1, seed=0)
    trainer_mod._timed_epochs(spec, dataset, hp, 3, "parallel", 2, seed=0)


class TestBenchmark:
    def test_rejects_too_few_repetitions(self, hp):
        with pytest.raises(ValueError, match="repetitions"):
            benchmark([2], [16], hp, repetitions=2)

    def test_single_worker_speedup_near_one(self, warmed_process):
        hp = HyperParams(rho=1.0, nu=0.1)
        rows = benchmark(
            [3], [320], hp, repetitions=5, workers_list=[1], n_samples=600, seed=0
        )
        assert len(rows) == 1
        row = rows[0]
        assert set(row) == {
            "layers",
            "width",
            "workers",
            "serial_mean_s",
            "parallel_mean_s",
            "speedup",
        }
        # A single worker does the serial work plus pool submit overhead.
        assert 0.85 <= row["speedup"] <= 1.15

    def test_serial_self_comparison(self, warmed_process):
        # Two independent serial measurements of the same cell agree to 10%.
        hp = HyperParams(rho=1.0, nu=0.1)
        dataset = random_dataset(320, 600, 10, seed=0)
        spec = NetworkSpec((320,) * 4 + (10,))
        t1 = trainer_mod._timed_epochs(spec, dataset, hp, 5, "serial", 1, seed=0)
        t2 = trainer_mod._timed_epochs(spec, dataset, hp, 5, "serial", 1, seed=0)
        assert 0.9 <= t1 / t2 <= 1.1
