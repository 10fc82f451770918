"""Training orchestration: six barrier-separated phases per iteration.

Within a phase every layer's task reads only arrays committed at earlier
barriers and stages one new array, so the tasks are independent and a
thread pool can run them in any order without changing the result. New
values are committed at the barrier; a failing task aborts the iteration
before anything is committed to the returned state, leaving the input
state untouched.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .diagnostics import (
    IterationMetrics,
    accuracy,
    descent_constants,
    descent_quantity,
    dual_identity_gap,
    initial_metrics,
    lagrangian,
    objective_F,
)
from .linalg import frob_sq, matmul
from .solvers import (
    PhiContext,
    update_W,
    update_b,
    update_p,
    update_q,
    update_u,
    update_z_hidden,
    update_z_output,
)
from .state import LayerBlock, NetState, NetworkSpec, activation_fn, grow_network, init_state

logger = logging.getLogger("pdadmm")

PHASES = ("p", "W", "b", "z", "q", "u")

MODES = ("serial", "parallel")


class NonFiniteError(RuntimeError):
    """Objective or iterate became non-finite; carries a diagnostic report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class TrainConfig:
    """Run shape: epoch budget, execution mode, growth schedule, sinks."""

    epochs: int
    mode: str = "serial"
    workers: int = 1
    growth_schedule: tuple = ()
    check_certificates: bool = True
    metrics_path: str = None
    no_timing: bool = False
    growth_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        schedule = tuple((int(e), int(n)) for e, n in self.growth_schedule)
        object.__setattr__(self, "growth_schedule", schedule)
        epochs = [e for e, _ in schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])) or any(e < 1 for e in epochs):
            raise ValueError("growth epochs must be >= 1 and strictly increasing")
        if any(n < 1 for _, n in schedule):
            raise ValueError("growth layer counts must be >= 1")


def _run_phase(tasks, pool):
    if pool is None:
        return [task() for task in tasks]
    futures = [pool.submit(task) for task in tasks]
    return [f.result() for f in futures]


def run_iteration(
    state,
    hp,
    mode="serial",
    workers=1,
    *,
    pool=None,
    lagrangian_pre=None,
    collect_certificates=True,
    collect_timing=True,
):
    """Apply one full iteration and return the new state plus its metrics.

    Phases run in the fixed order p, W, b, z, q, then residual-and-dual.
    Serial and parallel execution commit identical arrays because each
    phase's tasks are pure functions of the previous barriers' snapshot.

    ``lagrangian_pre`` lets a caller that already knows the incoming
    Lagrangian value avoid one evaluation; it is only consulted when
    certificates are collected.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    own_pool = None
    if mode == "parallel" and pool is None:
        own_pool = pool = ThreadPoolExecutor(max_workers=workers)
    try:
        return _iterate(
            state,
            hp,
            pool if mode == "parallel" else None,
            lagrangian_pre,
            collect_certificates,
            collect_timing,
        )
    finally:
        if own_pool is not None:
            own_pool.shutdown()


def _iterate(state, hp, pool, lagrangian_pre, collect_certificates, collect_timing):
    n_layers = len(state.layers)
    last = n_layers - 1
    f = activation_fn(state.spec)
    y = state.y

    W = [blk.W for blk in state.layers]
    b = [blk.b for blk in state.layers]
    z = [blk.z for blk in state.layers]
    p = [blk.p for blk in state.layers]
    q = [blk.q for blk in state.layers]
    u = [blk.u for blk in state.layers]

    tau_seeds = state.tau_seeds or [hp.tau_init] * (n_layers - 1)
    theta_seeds = state.theta_seeds or [hp.theta_init] * n_layers

    if collect_certificates and lagrangian_pre is None:
        lagrangian_pre = lagrangian(state, hp)

    phase_ns = {}
    gaps = []

    def clock(name, runner):
        t0 = time.perf_counter_ns()
        runner()
        if collect_timing:
            phase_ns[name] = time.perf_counter_ns() - t0

    # Phase 1: input copies of layers 2..L.
    tau_used = [None] * (n_layers - 1)
    dp_sq = [0.0] * (n_layers - 1)

    def p_task(idx):
        ctx = PhiContext(
            nu=hp.nu, rho=hp.rho, z=z[idx], W=W[idx], p=p[idx], b=b[idx],
            q_prev=q[idx - 1], u_prev=u[idx - 1],
        )
        res = update_p(ctx, tau_seeds[idx - 1], hp.backtrack_growth)
        return idx, res, frob_sq(res.new_point - p[idx])

    def p_phase():
        results = _run_phase(
            [lambda idx=idx: p_task(idx) for idx in range(1, n_layers)], pool
        )
        for idx, res, d_sq in results:
            p[idx] = res.new_point
            tau_used[idx - 1] = res.step_coeff
            dp_sq[idx - 1] = d_sq
            gaps.append(res.surrogate_gap)

    clock("p", p_phase)

    # Phase 2: weights of every layer, against the fresh input copies.
    theta_used = [None] * n_layers
    dW_sq = [0.0] * n_layers

    def w_task(idx):
        ctx = PhiContext(
            nu=hp.nu, rho=hp.rho, z=z[idx], W=W[idx], p=p[idx], b=b[idx],
            q_prev=None if idx == 0 else q[idx - 1],
            u_prev=None if idx == 0 else u[idx - 1],
        )
        res = update_W(ctx, theta_seeds[idx], hp.backtrack_growth)
        return idx, res, frob_sq(res.new_point - W[idx])

    def w_phase():
        results = _run_phase(
            [lambda idx=idx: w_task(idx) for idx in range(n_layers)], pool
        )
        for idx, res, d_sq in results:
            W[idx] = res.new_point
            theta_used[idx] = res.step_coeff
            dW_sq[idx] = d_sq
            gaps.append(res.surrogate_gap)

    clock("W", w_phase)

    # Phase 3: exact intercept minimizers.
    db_sq = [0.0] * n_layers

    def b_task(idx):
        new_b = update_b(z[idx], W[idx], p[idx])
        return idx, new_b, frob_sq(new_b - b[idx])

    def b_phase():
        for idx, new_b, d_sq in _run_phase(
            [lambda idx=idx: b_task(idx) for idx in range(n_layers)], pool
        ):
            b[idx] = new_b
            db_sq[idx] = d_sq

    clock("b", b_phase)

    # Phase 4: score matrices; hidden layers in closed form, the output
    # layer by the accelerated gradient loop.
    dz_sq = [0.0] * n_layers

    def z_task(idx):
        a = matmul(W[idx], p[idx]) + b[idx][:, None]
        if idx < last:
            new_z = update_z_hidden(a, z[idx], q[idx])
        else:
            new_z = update_z_output(
                a, z[idx], y, hp.nu, hp.fista_max_iters, hp.fista_tol
            )
        return idx, new_z, frob_sq(new_z - z[idx])

    def z_phase():
        for idx, new_z, d_sq in _run_phase(
            [lambda idx=idx: z_task(idx) for idx in range(n_layers)], pool
        ):
            z[idx] = new_z
            dz_sq[idx] = d_sq

    clock("z", z_phase)

    # Phase 5: output copies.
    dq_sq = [0.0] * (n_layers - 1)

    def q_task(idx):
        new_q = update_q(p[idx + 1], u[idx], f(z[idx]), hp.rho, hp.nu)
        return idx, new_q, frob_sq(new_q - q[idx])

    def q_phase():
        for idx, new_q, d_sq in _run_phase(
            [lambda idx=idx: q_task(idx) for idx in range(last)], pool
        ):
            q[idx] = new_q
            dq_sq[idx] = d_sq

    clock("q", q_phase)

    # Phase 6: residuals and dual ascent.
    resid_sq = [0.0] * (n_layers - 1)

    def u_task(idx):
        new_u, r = update_u(u[idx], p[idx + 1], q[idx], hp.rho)
        return idx, new_u, frob_sq(r)

    def u_phase():
        for idx, new_u, r_sq in _run_phase(
            [lambda idx=idx: u_task(idx) for idx in range(last)], pool
        ):
            u[idx] = new_u
            resid_sq[idx] = r_sq

    clock("u", u_phase)

    layers = [
        LayerBlock(W=W[i], b=b[i], z=z[i], p=p[i], q=q[i], u=u[i])
        if i < last
        else LayerBlock(W=W[i], b=b[i], z=z[i], p=p[i])
        for i in range(n_layers)
    ]
    new_state = NetState(
        spec=state.spec,
        layers=layers,
        y=y,
        tau_seeds=[t * hp.backtrack_shrink for t in tau_used],
        theta_seeds=[t * hp.backtrack_shrink for t in theta_used],
    )

    lagrangian_post = lagrangian(new_state, hp)
    metrics = IterationMetrics(
        epoch=0,
        objective=objective_F(new_state, hp),
        lagrangian=lagrangian_post,
        accuracy=accuracy(new_state),
        per_layer_residual_sq=resid_sq,
        residual_sq_total=float(sum(resid_sq)),
        lagrangian_pre=lagrangian_pre,
        phase_ns=phase_ns if collect_timing else None,
        tau=tau_used,
        theta=theta_used,
    )
    if collect_certificates:
        metrics.step_sq = {"p": dp_sq, "W": dW_sq, "b": db_sq, "z": dz_sq, "q": dq_sq}
        metrics.step_quantity = descent_quantity(tau_used, theta_used, metrics.step_sq, hp)
        metrics.descent_gap = (lagrangian_pre - lagrangian_post) - metrics.step_quantity
        metrics.dual_gap = dual_identity_gap(new_state, hp)
        metrics.surrogate_gap_max = max(gaps) if gaps else 0.0
    return new_state, metrics


def metrics_record(metrics, hp, no_timing=False):
    """JSON-ready record for the metrics sink (one line per epoch)."""
    record = {
        "epoch": metrics.epoch,
        "F": metrics.objective,
        "lagrangian": metrics.lagrangian,
        "residual_norm_sq_total": metrics.residual_sq_total,
        "per_layer_residuals": list(metrics.per_layer_residual_sq),
        "train_accuracy": metrics.accuracy,
    }
    if not no_timing:
        record["phase_times_ns"] = metrics.phase_ns
    record["c_k"] = metrics.c_k
    record["descent_gap"] = metrics.descent_gap
    if metrics.step_quantity is None:
        record["certificates"] = None
    else:
        consts = descent_constants(hp)
        lhs = metrics.lagrangian_pre - metrics.lagrangian
        record["certificates"] = {
            "C1": consts.C1,
            "C2": consts.C2,
            "rho_threshold": consts.rho_threshold,
            "lhs": lhs,
            "rhs": metrics.step_quantity,
            "satisfied": bool(lhs >= metrics.step_quantity - 1e-8),
            "dual_identity_max": metrics.dual_gap,
            "surrogate_gap_max": metrics.surrogate_gap_max,
            "lagrangian_pre": metrics.lagrangian_pre,
        }
    return record


def train(state, config, hp):
    """Run the configured number of epochs, growing the network on schedule.

    Returns the final state and per-epoch metrics history. When a metrics
    path is configured, one JSON record per epoch is appended as it is
    produced. A non-finite objective aborts with a diagnostic report.
    """
    consts = descent_constants(hp)
    if hp.rho <= consts.rho_threshold:
        logger.warning(
            "rho=%g is at or below the descent threshold %g; monotone descent "
            "is not guaranteed for this run",
            hp.rho,
            consts.rho_threshold,
        )

    history = []
    pool = None
    sink = None
    try:
        if config.mode == "parallel":
            pool = ThreadPoolExecutor(max_workers=config.workers)
        if config.metrics_path:
            sink = open(config.metrics_path, "w", encoding="utf-8")

        lag_pre = lagrangian(state, hp) if config.check_certificates else None
        c_best = np.inf
        schedule = list(config.growth_schedule)
        for epoch in range(1, config.epochs + 1):
            while schedule and schedule[0][0] == epoch:
                _, extra = schedule.pop(0)
                state = grow_network(state, extra, seed=config.growth_seed + epoch)
                lag_pre = lagrangian(state, hp) if config.check_certificates else None
            state, metrics = run_iteration(
                state,
                hp,
                mode=config.mode,
                workers=config.workers,
                pool=pool,
                lagrangian_pre=lag_pre,
                collect_certificates=config.check_certificates,
                collect_timing=not config.no_timing,
            )
            metrics.epoch = epoch
            if config.check_certificates:
                c_best = min(c_best, metrics.step_quantity)
                metrics.c_k = float(c_best)
            if not np.isfinite(metrics.objective) or not np.isfinite(metrics.lagrangian):
                raise NonFiniteError(
                    f"objective became non-finite at epoch {epoch}",
                    report={
                        "epoch": epoch,
                        "F": metrics.objective,
                        "lagrangian": metrics.lagrangian,
                        "residual_norm_sq_total": metrics.residual_sq_total,
                    },
                )
            history.append(metrics)
            lag_pre = metrics.lagrangian
            if sink is not None:
                sink.write(json.dumps(metrics_record(metrics, hp, config.no_timing)))
                sink.write("\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
        if pool is not None:
            pool.shutdown()
    return state, history


def _timed_epochs(spec, dataset, hp, repetitions, mode, workers, seed):
    state = init_state(spec, dataset, seed)
    pool = ThreadPoolExecutor(max_workers=workers) if mode == "parallel" else None
    try:
        # Warm-up epoch: excluded from the mean.
        state, _ = run_iteration(
            state, hp, mode=mode, workers=workers, pool=pool,
            collect_certificates=False, collect_timing=False,
        )
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            state, _ = run_iteration(
                state, hp, mode=mode, workers=workers, pool=pool,
                collect_certificates=False, collect_timing=False,
            )
            times.append(time.perf_counter() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return float(np.mean(times))


def benchmark(
    layer_counts,
    widths,
    hp,
    repetitions,
    workers_list=(1,),
    n_samples=1000,
    n_classes=10,
    seed=0,
):
    """Serial-vs-parallel epoch timing over a (layers x width x workers) grid.

    Each cell times ``repetitions`` epochs per mode after one excluded
    warm-up epoch, on a synthetic full batch of ``n_samples``. Serial and
    parallel runs start from the same seed and therefore do identical
    numeric work. Returns one row dict per cell.
    """
    if repetitions < 3:
        raise ValueError(f"repetitions must be >= 3, got {repetitions}")
    rows = []
    for n_hidden in layer_counts:
        for width in widths:
            dataset = data_mod.random_dataset(width, n_samples, n_classes, seed)
            spec = NetworkSpec((width,) * (n_hidden + 1) + (n_classes,))
            serial_mean = _timed_epochs(
                spec, dataset, hp, repetitions, "serial", 1, seed
            )
            for workers in workers_list:
                parallel_mean = _timed_epochs(
                    spec, dataset, hp, repetitions, "parallel", workers, seed
                )
                speedup = serial_mean / parallel_mean
                if speedup < 1.0 and n_hidden >= 4 and width >= 256:
                    logger.warning(
                        "parallel epochs slower than serial (%.2fx) on a "
                        "%d-layer width-%d net; expected >= 1",
                        speedup,
                        n_hidden,
                        width,
                    )
                rows.append(
                    {
                        "layers": n_hidden,
                        "width": width,
                        "workers": workers,
                        "serial_mean_s": serial_mean,
                        "parallel_mean_s": parallel_mean,
                        "speedup": speedup,
                    }
                )
    return rows
