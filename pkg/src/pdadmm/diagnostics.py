"""Objective, residual, and certificate computations.

Everything here is a read-only function of a state snapshot. The
certificate types turn the training theory into runtime checks: a descent
certificate compares the per-iteration drop of the augmented Lagrangian
against its certified lower bound, and a rate certificate tracks the
running minimum of that bound, whose decay is the algorithm's rate
statement.
"""

from dataclasses import dataclass, field

import numpy as np

from .linalg import frob_sq, matmul, softmax_cross_entropy
from .solvers import PhiContext, grad_phi
from .state import activation_fn

# Slack for the descent inequality; absorbs float accumulation across the
# per-layer sums.
DESCENT_SLACK = 1e-8

# Ceiling for the dual identity ||u - nu (q - f(z))||_inf after a full
# iteration.
DUAL_IDENTITY_TOL = 1e-8


@dataclass
class IterationMetrics:
    """Everything recorded about one training iteration."""

    epoch: int
    objective: float
    lagrangian: float
    accuracy: float
    per_layer_residual_sq: list
    residual_sq_total: float
    lagrangian_pre: float = None
    phase_ns: dict = None
    tau: list = None
    theta: list = None
    step_sq: dict = None
    step_quantity: float = None
    descent_gap: float = None
    dual_gap: float = None
    surrogate_gap_max: float = None
    c_k: float = None


@dataclass(frozen=True)
class DescentConstants:
    """Coefficients of the guaranteed-descent inequality and the penalty
    threshold above which both are positive."""

    C1: float
    C2: float
    rho_threshold: float


@dataclass(frozen=True)
class DescentCertificate:
    """One evaluated descent inequality: observed drop vs certified bound."""

    C1: float
    C2: float
    rho_threshold: float
    lhs: float
    rhs: float
    satisfied: bool

    @property
    def slack(self):
        return self.lhs - self.rhs


@dataclass(frozen=True)
class RateCertificate:
    """Running minimum of the descent bound and its k-weighted trend."""

    c: list
    k_c: list

    @property
    def nonincreasing(self):
        return all(b <= a for a, b in zip(self.c, self.c[1:]))


def risk(state):
    """Plain risk of the current output scores against the labels."""
    out = state.layers[-1]
    loss, _ = softmax_cross_entropy(out.z, state.y)
    return loss


def objective_F(state, hp):
    """Relaxed training objective: risk plus the two penalty families."""
    f = activation_fn(state.spec)
    total = risk(state)
    penalty = 0.0
    for idx, blk in enumerate(state.layers):
        penalty += frob_sq(blk.z - matmul(blk.W, blk.p) - blk.b[:, None])
        if idx < len(state.layers) - 1:
            penalty += frob_sq(blk.q - f(blk.z))
    return total + 0.5 * hp.nu * penalty


def lagrangian(state, hp):
    """Augmented Lagrangian: objective plus dual pairings and boundary
    penalties on the residuals ``p_{l+1} - q_l``."""
    total = objective_F(state, hp)
    for idx in range(len(state.layers) - 1):
        blk = state.layers[idx]
        r = state.layers[idx + 1].p - blk.q
        total += float(np.sum(blk.u * r)) + 0.5 * hp.rho * frob_sq(r)
    return total


def residuals(state):
    """Per-boundary squared residual norms ``||p_{l+1} - q_l||^2``."""
    return [
        frob_sq(state.layers[idx + 1].p - state.layers[idx].q)
        for idx in range(len(state.layers) - 1)
    ]


def accuracy(state, features=None, labels=None):
    """Classification accuracy of a fresh feed-forward pass.

    Uses only the trained weights and intercepts: ``z = W p + b``,
    ``p_next = f(z)``, prediction is the columnwise argmax of the final
    scores. Defaults to the training inputs and labels held by the state.
    """
    f = activation_fn(state.spec)
    p = state.layers[0].p if features is None else np.asarray(features, dtype=np.float64)
    y = state.y if labels is None else np.asarray(labels, dtype=np.float64)
    for idx, blk in enumerate(state.layers):
        z = matmul(blk.W, p) + blk.b[:, None]
        if idx < len(state.layers) - 1:
            p = f(z)
    pred = np.argmax(z, axis=0)
    truth = np.argmax(y, axis=0)
    return float(np.mean(pred == truth))


def dual_identity_gap(state, hp):
    """Largest entrywise violation of ``u = nu (q - f(z))`` over all
    boundaries; zero up to float noise after every full iteration."""
    f = activation_fn(state.spec)
    worst = 0.0
    for idx in range(len(state.layers) - 1):
        blk = state.layers[idx]
        gap = np.abs(blk.u - hp.nu * (blk.q - f(blk.z))).max()
        worst = max(worst, float(gap))
    return worst


def descent_constants(hp):
    """Descent coefficients ``C1 = nu/2 - 2 nu^2 S^2 / rho`` and
    ``C2 = rho/2 - 2 nu^2 / rho - nu/2``, plus the threshold
    ``max(4 nu S^2, (sqrt(17) + 1) nu / 2)`` above which both are
    positive."""
    s2 = hp.lipschitz_S**2
    c1 = 0.5 * hp.nu - 2.0 * hp.nu**2 * s2 / hp.rho
    c2 = 0.5 * hp.rho - 2.0 * hp.nu**2 / hp.rho - 0.5 * hp.nu
    threshold = max(4.0 * hp.nu * s2, 0.5 * (np.sqrt(17.0) + 1.0) * hp.nu)
    return DescentConstants(C1=c1, C2=c2, rho_threshold=threshold)


def descent_quantity(tau, theta, step_sq, hp):
    """Certified lower bound on one iteration's Lagrangian drop.

    ``tau`` aligns with the stepped input copies (layers 2..L), ``theta``
    with all layers; ``step_sq`` holds per-layer squared step norms for
    every variable family, with the final entry of ``"z"`` belonging to
    the output layer.
    """
    consts = descent_constants(hp)
    dz = step_sq["z"]
    total = 0.5 * sum(t * s for t, s in zip(tau, step_sq["p"]))
    total += 0.5 * sum(t * s for t, s in zip(theta, step_sq["W"]))
    total += 0.5 * hp.nu * sum(step_sq["b"])
    total += consts.C1 * sum(dz[:-1])
    total += 0.5 * hp.nu * dz[-1]
    total += consts.C2 * sum(step_sq["q"])
    return total


def check_descent(metrics_prev, metrics_cur, hp):
    """Evaluate the descent inequality between two consecutive iterations."""
    consts = descent_constants(hp)
    lhs = metrics_prev.lagrangian - metrics_cur.lagrangian
    rhs = metrics_cur.step_quantity
    if rhs is None:
        raise ValueError("current metrics carry no step quantity; was certificate "
                         "collection enabled?")
    return DescentCertificate(
        C1=consts.C1,
        C2=consts.C2,
        rho_threshold=consts.rho_threshold,
        lhs=lhs,
        rhs=rhs,
        satisfied=bool(lhs >= rhs - DESCENT_SLACK),
    )


def check_rate(step_quantities):
    """Running minimum of the descent bound over a run.

    The minimum is nonincreasing by construction; its k-weighted sequence
    ``k * c_k`` trending down is the finite-sample view of the decay-rate
    guarantee.
    """
    if len(step_quantities) < 2:
        raise ValueError("rate certificate needs at least two iterations")
    c = []
    best = np.inf
    for q in step_quantities:
        best = min(best, q)
        c.append(best)
    k_c = [(k + 1) * val for k, val in enumerate(c)]
    return RateCertificate(c=c, k_c=k_c)


def check_stationarity(state, hp):
    """Gradient norms of the augmented Lagrangian at the current iterate.

    Returns a dict of Frobenius norms over the stacked per-layer
    gradients for the smooth families (p, W, b, q), the residual norm
    (the dual gradient), and their maximum.
    """
    f = activation_fn(state.spec)
    sq = {"p": 0.0, "W": 0.0, "b": 0.0, "q": 0.0, "residual": 0.0}
    for idx, blk in enumerate(state.layers):
        ctx = PhiContext(
            nu=hp.nu,
            rho=hp.rho,
            z=blk.z,
            W=blk.W,
            p=blk.p,
            b=blk.b,
            q_prev=None if idx == 0 else state.layers[idx - 1].q,
            u_prev=None if idx == 0 else state.layers[idx - 1].u,
        )
        if idx > 0:
            sq["p"] += frob_sq(grad_phi(ctx, "p"))
        sq["W"] += frob_sq(grad_phi(ctx, "W"))
        sq["b"] += frob_sq(grad_phi(ctx, "b"))
        if idx < len(state.layers) - 1:
            r = state.layers[idx + 1].p - blk.q
            grad_q = hp.nu * (blk.q - f(blk.z)) - blk.u - hp.rho * r
            sq["q"] += frob_sq(grad_q)
            sq["residual"] += frob_sq(r)
    norms = {name: float(np.sqrt(val)) for name, val in sq.items()}
    norms["max"] = max(norms.values())
    return norms


def initial_metrics(state, hp):
    """Metrics of an iterate before any iteration has run."""
    per_layer = residuals(state)
    return IterationMetrics(
        epoch=0,
        objective=objective_F(state, hp),
        lagrangian=lagrangian(state, hp),
        accuracy=accuracy(state),
        per_layer_residual_sq=per_layer,
        residual_sq_total=float(sum(per_layer)),
    )
