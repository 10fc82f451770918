"""Per-layer subproblem solvers.

Each solver minimizes one variable family against a frozen snapshot of
everything else: prox-linear steps with backtracked curvature for the
input and weight blocks, exact minimizers for the intercept, activation
copy and output copy, and an accelerated gradient loop for the final
layer's score matrix.
"""

from dataclasses import dataclass, replace

import numpy as np

from .linalg import frob_sq, matmul, softmax_columns

# Certification accepts a surrogate shortfall up to this absolute slack;
# it protects the search from float cancellation near stationary points.
SURROGATE_GAP_TOL = 1e-10

# A step coefficient past this bound without certification means the layer
# state is effectively non-finite.
STEP_COEFF_CAP = 1e12


@dataclass(frozen=True)
class PhiContext:
    """Inputs of one layer's coupling function.

    For the first layer (fixed input) ``q_prev`` and ``u_prev`` are None
    and the function reduces to the linear-map penalty alone.
    """

    nu: float
    rho: float
    z: np.ndarray
    W: np.ndarray
    p: np.ndarray
    b: np.ndarray
    q_prev: np.ndarray = None
    u_prev: np.ndarray = None

    def __post_init__(self):
        n_out, n_in = self.W.shape
        n = self.p.shape[1]
        if self.p.shape != (n_in, n):
            raise ValueError(f"p shape {self.p.shape} does not match W {self.W.shape}")
        if self.z.shape != (n_out, n):
            raise ValueError(f"z shape {self.z.shape} does not match W and p")
        if self.b.shape != (n_out,):
            raise ValueError(f"b shape {self.b.shape} does not match W {self.W.shape}")
        if (self.q_prev is None) != (self.u_prev is None):
            raise ValueError("q_prev and u_prev must be given together")
        if self.q_prev is not None:
            if self.q_prev.shape != self.p.shape or self.u_prev.shape != self.p.shape:
                raise ValueError("q_prev/u_prev shapes must match p")

    @property
    def first_layer(self):
        return self.q_prev is None


def eval_phi(ctx):
    """Value of the layer coupling function at the context point.

    ``(nu/2) ||z - W p - b 1^T||^2`` plus, past the first layer, the dual
    pairing ``<u_prev, p - q_prev>`` and the quadratic boundary penalty
    ``(rho/2) ||p - q_prev||^2``.
    """
    resid = ctx.z - matmul(ctx.W, ctx.p) - ctx.b[:, None]
    val = 0.5 * ctx.nu * frob_sq(resid)
    if not ctx.first_layer:
        gap = ctx.p - ctx.q_prev
        val += float(np.sum(ctx.u_prev * gap)) + 0.5 * ctx.rho * frob_sq(gap)
    return val


def grad_phi(ctx, wrt):
    """Gradient of the coupling function with respect to one variable.

    ``wrt`` is ``"p"``, ``"W"`` or ``"b"``. The first layer has no p
    gradient: its input copy is the fixed data matrix.
    """
    resid = ctx.z - matmul(ctx.W, ctx.p) - ctx.b[:, None]
    if wrt == "p":
        if ctx.first_layer:
            raise ValueError("first layer's input copy is fixed; no p gradient exists")
        return -ctx.nu * matmul(ctx.W.T, resid) + ctx.u_prev + ctx.rho * (ctx.p - ctx.q_prev)
    if wrt == "W":
        return -ctx.nu * matmul(resid, ctx.p.T)
    if wrt == "b":
        return -ctx.nu * resid.sum(axis=1)
    raise ValueError(f"unknown gradient target {wrt!r}")


@dataclass(frozen=True)
class BacktrackResult:
    """Certified prox-linear step: new point, step coefficient, and the
    surrogate shortfall ``phi(new) - U(new)`` (non-positive up to float
    slack)."""

    new_point: np.ndarray
    step_coeff: float
    surrogate_gap: float


def _backtrack(ctx, wrt, seed_coeff, growth):
    x0 = ctx.p if wrt == "p" else ctx.W
    phi0 = eval_phi(ctx)
    grad = grad_phi(ctx, wrt)
    if not np.any(grad):
        return BacktrackResult(new_point=x0, step_coeff=seed_coeff, surrogate_gap=0.0)
    coeff = seed_coeff
    while True:
        candidate = x0 - grad / coeff
        step = candidate - x0
        surrogate = phi0 + float(np.sum(grad * step)) + 0.5 * coeff * frob_sq(step)
        phi_new = eval_phi(replace(ctx, **{wrt: candidate}))
        gap = phi_new - surrogate
        if gap <= SURROGATE_GAP_TOL:
            return BacktrackResult(new_point=candidate, step_coeff=coeff, surrogate_gap=gap)
        coeff *= growth
        if coeff > STEP_COEFF_CAP:
            raise FloatingPointError(
                f"{wrt}-step coefficient exceeded {STEP_COEFF_CAP:g} without "
                "certification; the layer state is likely non-finite"
            )


def update_p(ctx, tau_seed, growth=2.0):
    """Prox-linear input-copy step with backtracked curvature.

    Grows the coefficient by ``growth`` from ``tau_seed`` until the
    majorization check ``phi(p+) <= U(p+; tau)`` certifies, then returns
    the certified step. Only valid past the first layer.
    """
    if ctx.first_layer:
        raise ValueError("first layer's input copy is fixed and is never stepped")
    return _backtrack(ctx, "p", tau_seed, growth)


def update_W(ctx, theta_seed, growth=2.0):
    """Prox-linear weight step with backtracked curvature.

    The boundary terms of the coupling function do not involve W, so the
    certification compares the linear-map penalty alone; the accepted
    point and coefficient are identical, with less float cancellation.
    """
    reduced = ctx if ctx.first_layer else replace(ctx, q_prev=None, u_prev=None)
    return _backtrack(reduced, "W", theta_seed, growth)


def update_b(z, W, p):
    """Exact intercept minimizer: the row mean of ``z - W p`` over samples.

    Coincides with a prox-linear step whose coefficient carries the batch
    factor; with one sample it is exactly the plain step.
    """
    return np.asarray((z - matmul(W, p)).mean(axis=1))


def update_z_hidden(a, z_prev, q):
    """Closed-form relu-layer score update.

    Entrywise minimizer of ``(z - a)^2 + (q - max(z, 0))^2 + (z - z_prev)^2``:
    the negative branch caps ``(a + z_prev)/2`` at zero, the nonnegative
    branch floors ``(a + q + z_prev)/3`` at zero, and the branch with the
    smaller objective wins, ties going to the nonnegative branch.
    """
    neg = np.minimum((a + z_prev) / 2.0, 0.0)
    pos = np.maximum((a + q + z_prev) / 3.0, 0.0)

    def value(c):
        return (c - a) ** 2 + (q - np.maximum(c, 0.0)) ** 2 + (c - z_prev) ** 2

    return np.where(value(pos) <= value(neg), pos, neg)


def update_z_output(a, z_prev, y, nu, max_iters, tol, risk_grad=None):
    """Accelerated gradient solve of the output-layer score subproblem.

    Minimizes ``R(z; y) + (nu/2) ||z - a||^2`` starting from ``z_prev``,
    with momentum weights ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`` and
    constant step ``1 / (1 + nu)`` (the softmax cross-entropy gradient is
    1-Lipschitz and the quadratic adds ``nu``). Stops when the full
    objective's gradient norm falls to ``tol`` or after ``max_iters``
    momentum steps.

    ``risk_grad`` overrides the risk gradient (test hook); the default is
    the softmax cross-entropy gradient against ``y``.
    """
    if risk_grad is None:
        def risk_grad(z):
            return softmax_columns(z) - y

    step = 1.0 / (1.0 + nu)
    x_prev = z_prev
    x = z_prev
    momentum = z_prev
    t = 1.0
    for _ in range(max_iters):
        g = risk_grad(momentum) + nu * (momentum - a)
        x_new = momentum - step * g
        if not np.all(np.isfinite(x_new)):
            raise FloatingPointError("output-layer score iterate became non-finite")
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        momentum = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x_prev, x, t = x, x_new, t_new
        g_x = risk_grad(x) + nu * (x - a)
        if np.sqrt(frob_sq(g_x)) <= tol:
            break
    return x


def update_q(p_next, u, fz, rho, nu):
    """Closed-form output-copy update: the weighted average
    ``(rho p_next + u + nu f(z)) / (rho + nu)``."""
    return (rho * p_next + u + nu * fz) / (rho + nu)


def update_u(u, p_next, q_new, rho):
    """Dual ascent on the boundary constraint.

    Returns the updated dual and the residual ``p_next - q_new`` it was
    driven by.
    """
    r = p_next - q_new
    return u + rho * r, r
