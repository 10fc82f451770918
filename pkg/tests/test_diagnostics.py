import numpy as np
import pytest

from pdadmm.data import random_dataset
from pdadmm.diagnostics import (
    DESCENT_SLACK,
    IterationMetrics,
    accuracy,
    check_descent,
    check_rate,
    check_stationarity,
    descent_constants,
    dual_identity_gap,
    initial_metrics,
    lagrangian,
    objective_F,
    residuals,
    risk,
)
from pdadmm.state import HyperParams, LayerBlock, NetState, NetworkSpec, init_state
from pdadmm.trainer import TrainConfig, run_iteration, train


def random_state(rng, widths=(5, 6, 7, 3), n=4):
    """Fully random (not forward-consistent) iterate."""
    spec = NetworkSpec(widths)
    layers = []
    for idx in range(spec.n_layers):
        n_in, n_out = widths[idx], widths[idx + 1]
        last = idx == spec.n_layers - 1
        layers.append(
            LayerBlock(
                W=rng.standard_normal((n_out, n_in)),
                b=rng.standard_normal(n_out),
                z=rng.standard_normal((n_out, n)),
                p=rng.standard_normal((n_in, n)) if idx else rng.random((n_in, n)),
                q=None if last else rng.standard_normal((n_out, n)),
                u=None if last else rng.standard_normal((n_out, n)),
            )
        )
    y = np.zeros((widths[-1], n))
    y[rng.integers(0, widths[-1], size=n), np.arange(n)] = 1.0
    return NetState(spec=spec, layers=layers, y=y).validate()


def reference_objective(state, hp):
    """Straightforward recomputation with plain numpy."""
    total = risk(state)
    for idx, blk in enumerate(state.layers):
        lin = blk.z - blk.W @ blk.p - blk.b[:, None]
        total += 0.5 * hp.nu * float(np.sum(lin**2))
        if idx < len(state.layers) - 1:
            act = blk.q - np.maximum(blk.z, 0.0)
            total += 0.5 * hp.nu * float(np.sum(act**2))
    return total


def reference_lagrangian(state, hp):
    total = reference_objective(state, hp)
    for idx in range(len(state.layers) - 1):
        r = state.layers[idx + 1].p - state.layers[idx].q
        total += float(np.sum(state.layers[idx].u * r)) + 0.5 * hp.rho * float(
            np.sum(r**2)
        )
    return total


class TestObjective:
    def test_forward_consistent_equals_risk(self, tiny_state, hp):
        assert objective_F(tiny_state, hp) == risk(tiny_state)

    def test_matches_reference_on_random_state(self, hp):
        state = random_state(np.random.default_rng(0))
        assert objective_F(state, hp) == pytest.approx(
            reference_objective(state, hp), rel=1e-12
        )

    def test_penalty_linear_in_nu(self):
        state = random_state(np.random.default_rng(1))
        hp1 = HyperParams(rho=1.0, nu=0.2)
        hp2 = HyperParams(rho=1.0, nu=0.4)
        r = risk(state)
        assert objective_F(state, hp2) - r == pytest.approx(
            2.0 * (objective_F(state, hp1) - r), rel=1e-12
        )


class TestLagrangian:
    def test_init_equals_objective(self, tiny_state, hp):
        assert lagrangian(tiny_state, hp) == objective_F(tiny_state, hp)

    def test_matches_reference_on_random_state(self, hp):
        state = random_state(np.random.default_rng(2))
        assert lagrangian(state, hp) == pytest.approx(
            reference_lagrangian(state, hp), rel=1e-12
        )

    def test_perturbing_input_copy_raises_by_quadratic(self, tiny_state, hp):
        # With zero duals, adding delta to p_2 adds (rho/2)||delta||^2 via
        # the boundary penalty and (nu/2)||W delta||^2 via the linear map.
        rng = np.random.default_rng(3)
        base = lagrangian(tiny_state, hp)
        blk = tiny_state.layers[1]
        delta = rng.standard_normal(blk.p.shape) * 0.1
        perturbed_layers = list(tiny_state.layers)
        perturbed_layers[1] = LayerBlock(
            W=blk.W, b=blk.b, z=blk.z, p=blk.p + delta, q=blk.q, u=blk.u
        )
        perturbed = NetState(spec=tiny_state.spec, layers=perturbed_layers, y=tiny_state.y)
        expected = (
            base
            + 0.5 * hp.rho * float(np.sum(delta**2))
            + 0.5 * hp.nu * float(np.sum((blk.W @ delta) ** 2))
        )
        assert lagrangian(perturbed, hp) == pytest.approx(expected, rel=1e-12)


class TestDescentConstants:
    def test_reference_values(self):
        consts = descent_constants(HyperParams(rho=1.0, nu=0.1))
        assert consts.C1 == pytest.approx(0.03, abs=1e-15)
        assert consts.C2 == pytest.approx(0.43, abs=1e-15)
        assert consts.rho_threshold == pytest.approx(0.4, abs=1e-15)

    def test_small_nu_threshold(self):
        # Both branches of the threshold: 4 nu S^2 = 4e-4 dominates
        # (sqrt(17)+1) nu / 2 ~ 2.5616e-4, and rho = 1e-4 sits below it.
        consts = descent_constants(HyperParams(rho=1e-4, nu=1e-4))
        assert consts.rho_threshold == pytest.approx(4e-4, rel=1e-12)
        assert 0.5 * (np.sqrt(17.0) + 1.0) * 1e-4 == pytest.approx(2.5616e-4, rel=1e-4)
        assert 1e-4 < consts.rho_threshold

    def test_positive_above_threshold(self):
        for nu in (0.05, 0.5, 2.0):
            consts = descent_constants(HyperParams(rho=1.0, nu=nu))
            if 1.0 > consts.rho_threshold:
                assert consts.C1 > 0 and consts.C2 > 0


class TestCheckDescent:
    def test_satisfied_over_seeded_run(self, tiny_state, hp):
        state = tiny_state
        prev = initial_metrics(state, hp)
        for _ in range(50):
            state, metrics = run_iteration(state, hp, lagrangian_pre=prev.lagrangian)
            cert = check_descent(prev, metrics, hp)
            assert cert.satisfied
            assert cert.lhs >= cert.rhs - DESCENT_SLACK
            prev = metrics

    def test_requires_step_quantity(self, hp):
        m = IterationMetrics(
            epoch=1,
            objective=1.0,
            lagrangian=1.0,
            accuracy=0.5,
            per_layer_residual_sq=[0.0],
            residual_sq_total=0.0,
        )
        with pytest.raises(ValueError, match="step quantity"):
            check_descent(m, m, hp)


class TestCheckRate:
    def test_constant_history(self):
        cert = check_rate([2.5, 2.5, 2.5])
        assert cert.c == [2.5, 2.5, 2.5]
        assert cert.nonincreasing

    def test_running_minimum(self):
        cert = check_rate([3.0, 5.0, 1.0, 4.0])
        assert cert.c == [3.0, 3.0, 1.0, 1.0]
        assert cert.nonincreasing
        assert cert.k_c == [3.0, 6.0, 3.0, 4.0]

    def test_needs_two_points(self):
        with pytest.raises(ValueError, match="two iterations"):
            check_rate([1.0])

    def test_trend_on_short_run(self, tiny_state, hp):
        _, history = train(tiny_state, TrainConfig(epochs=40), hp)
        cert = check_rate([m.step_quantity for m in history])
        assert cert.nonincreasing
        assert cert.k_c[-1] < cert.k_c[3]


class TestCheckStationarity:
    def test_gradient_identities_after_iteration(self, tiny_state, hp):
        state1, _ = run_iteration(tiny_state, hp)
        u_old = [blk.u for blk in state1.layers[:-1]]
        state2, _ = run_iteration(state1, hp)

        from pdadmm.linalg import relu

        for idx in range(len(state2.layers) - 1):
            blk = state2.layers[idx]
            du = blk.u - u_old[idx]
            r = state2.layers[idx + 1].p - blk.q
            # The output-copy gradient equals the negated dual step, and
            # the dual gradient (the residual) equals du / rho.
            grad_q = hp.nu * (blk.q - relu(blk.z)) - blk.u - hp.rho * r
            assert np.abs(grad_q + du).max() <= 1e-10
            assert np.abs(r - du / hp.rho).max() <= 1e-10

    def test_max_norm_shrinks_along_run(self, tiny_state, hp):
        state = tiny_state
        norms = {}
        for k in range(1, 61):
            state, _ = run_iteration(state, hp)
            if k in (5, 60):
                norms[k] = check_stationarity(state, hp)["max"]
        assert norms[60] < norms[5]

    def test_report_fields(self, tiny_state, hp):
        report = check_stationarity(tiny_state, hp)
        assert set(report) == {"p", "W", "b", "q", "residual", "max"}
        assert report["max"] == max(
            report[k] for k in ("p", "W", "b", "q", "residual")
        )


class TestResidualsAccuracy:
    def test_init_residuals_zero(self, tiny_state):
        assert residuals(tiny_state) == [0.0, 0.0, 0.0]

    def test_untrained_ten_class_accuracy_near_chance(self):
        dataset = random_dataset(n_features=30, n_samples=2000, n_classes=10, seed=5)
        spec = NetworkSpec((30, 32, 32, 10))
        state = init_state(spec, dataset, seed=1)
        assert abs(accuracy(state) - 0.1) <= 0.05

    def test_residual_total_matches_recomputation(self, hp):
        state = random_state(np.random.default_rng(7))
        per_layer = residuals(state)
        oracle = [
            float(np.sum((state.layers[i + 1].p - state.layers[i].q) ** 2))
            for i in range(len(state.layers) - 1)
        ]
        assert sum(per_layer) == pytest.approx(sum(oracle), rel=1e-12)

    def test_accuracy_on_explicit_batch(self, tiny_state):
        acc = accuracy(
            tiny_state,
            features=tiny_state.layers[0].p,
            labels=tiny_state.y,
        )
        assert acc == accuracy(tiny_state)


class TestDualIdentity:
    def test_holds_after_every_iteration(self, tiny_state, hp):
        state = tiny_state
        for _ in range(20):
            state, metrics = run_iteration(state, hp)
            assert dual_identity_gap(state, hp) <= 1e-8
            assert metrics.dual_gap <= 1e-8


class TestBoundedness:
    def test_states_stay_bounded_on_desk_run(self, tiny_state, hp):
        state, history = train(tiny_state, TrainConfig(epochs=60), hp)
        lags = [m.lagrangian for m in history]
        assert all(np.isfinite(v) for v in lags)
        assert min(lags) > -1e300
        worst = max(
            float(np.abs(arr).max())
            for blk in state.layers
            for arr in (blk.W, blk.b, blk.z, blk.p)
        )
        assert worst < 1e8

    def test_steps_shrink_between_run_ends(self, tiny_state, hp):
        _, history = train(tiny_state, TrainConfig(epochs=60), hp)
        quantities = [m.step_quantity for m in history]
        assert np.mean(quantities[-10:]) < np.mean(quantities[:10])
