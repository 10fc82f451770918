"""Network architecture and the full ADMM iterate.

The iterate is partitioned by layer. Layer ``l`` (1-based in the math,
index ``l-1`` here) owns its weights ``W``, intercept ``b``, linear-map
copy ``z``, input copy ``p``, and, for every layer except the last, the
output copy ``q`` and the dual variable ``u`` coupling it to the next
layer's input. Arrays are treated as immutable: updates always build new
arrays, so snapshots of a state are free.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import matmul, relu

ACTIVATIONS = ("relu",)
LOSSES = ("softmax_cross_entropy",)

CHECKPOINT_MAGIC = b"PDMM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture contract: layer widths n_0..n_L plus activation/loss kinds."""

    layer_widths: tuple
    activation: str = "relu"
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError(
                f"need at least two layers (three widths), got widths {widths}"
            )
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def input_width(self):
        return self.layer_widths[0]

    @property
    def output_width(self):
        return self.layer_widths[-1]


@dataclass(frozen=True)
class HyperParams:
    """Penalty weights, step-search controls, and theory constants.

    ``lipschitz_S`` bounds the activation's Lipschitz coefficient and
    ``subgrad_bound_M`` its subgradient norm; both are 1 for relu.
    """

    rho: float
    nu: float
    tau_init: float = 1.0
    theta_init: float = 1.0
    backtrack_growth: float = 2.0
    backtrack_shrink: float = 0.9
    fista_max_iters: int = 50
    fista_tol: float = 1e-8
    lipschitz_S: float = 1.0
    subgrad_bound_M: float = 1.0

    def __post_init__(self):
        for name in (
            "rho",
            "nu",
            "tau_init",
            "theta_init",
            "fista_tol",
            "lipschitz_S",
            "subgrad_bound_M",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.backtrack_growth > 1:
            raise ValueError(f"backtrack_growth must exceed 1, got {self.backtrack_growth}")
        if not 0 < self.backtrack_shrink < 1:
            raise ValueError(
                f"backtrack_shrink must lie in (0, 1), got {self.backtrack_shrink}"
            )
        if self.fista_max_iters < 1:
            raise ValueError("fista_max_iters must be at least 1")


@dataclass
class LayerBlock:
    """Per-layer slice of the iterate. ``q`` and ``u`` are None for the last layer."""

    W: np.ndarray
    b: np.ndarray
    z: np.ndarray
    p: np.ndarray
    q: np.ndarray = None
    u: np.ndarray = None


@dataclass
class NetState:
    """Full iterate: spec, per-layer blocks, labels, and solver step seeds.

    ``tau_seeds``/``theta_seeds`` are the per-layer starting points for the
    step-coefficient searches; None means "not yet initialized" and is
    replaced with the hyperparameter defaults on first use.
    """

    spec: NetworkSpec
    layers: list
    y: np.ndarray
    tau_seeds: list = None
    theta_seeds: list = None

    @property
    def n_samples(self):
        return self.y.shape[1]

    def validate(self):
        widths = self.spec.layer_widths
        n = self.n_samples
        if len(self.layers) != self.spec.n_layers:
            raise ValueError(
                f"expected {self.spec.n_layers} layer blocks, got {len(self.layers)}"
            )
        if self.y.shape != (self.spec.output_width, n):
            raise ValueError(f"label matrix shape {self.y.shape} does not match spec")
        for idx, blk in enumerate(self.layers):
            n_in, n_out = widths[idx], widths[idx + 1]
            last = idx == len(self.layers) - 1
            checks = [
                ("W", blk.W, (n_out, n_in)),
                ("b", blk.b, (n_out,)),
                ("z", blk.z, (n_out, n)),
                ("p", blk.p, (n_in, n)),
            ]
            if not last:
                checks += [("q", blk.q, (n_out, n)), ("u", blk.u, (n_out, n))]
            for name, arr, shape in checks:
                if arr is None or arr.shape != shape:
                    got = None if arr is None else arr.shape
                    raise ValueError(
                        f"layer {idx + 1}: {name} has shape {got}, expected {shape}"
                    )
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"layer {idx + 1}: {name} contains non-finite entries")
            if last and (blk.q is not None or blk.u is not None):
                raise ValueError("last layer must not carry q or u")
        return self


def activation_fn(spec):
    """The layer nonlinearity named by the spec."""
    if spec.activation == "relu":
        return relu
    raise ValueError(f"unknown activation {spec.activation!r}")


def _he_weights(rng, n_out, n_in):
    return rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)


def init_state(spec, dataset, seed):
    """Forward-consistent initial iterate.

    Weights are Gaussian scaled by sqrt(2/fan_in), intercepts zero. The
    linear and activation copies are filled by a forward pass
    (``z = W p + b``, ``q = f(z)``, next ``p = q``) and duals start at
    zero, so every penalty term and residual is exactly zero and the
    augmented Lagrangian equals the plain risk at iteration 0.
    """
    features = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels_onehot, dtype=np.float64)
    if features.shape[0] != spec.input_width:
        raise ValueError(
            f"dataset has {features.shape[0]} features but the network expects "
            f"{spec.input_width}"
        )
    if y.shape[0] != spec.output_width:
        raise ValueError(
            f"dataset has {y.shape[0]} classes but the network expects "
            f"{spec.output_width}"
        )
    if features.shape[1] != y.shape[1]:
        raise ValueError("feature and label sample counts differ")

    rng = np.random.default_rng(seed)
    widths = spec.layer_widths
    f = activation_fn(spec)
    layers = []
    p = features
    for idx in range(spec.n_layers):
        n_in, n_out = widths[idx], widths[idx + 1]
        W = _he_weights(rng, n_out, n_in)
        b = np.zeros(n_out)
        z = matmul(W, p) + b[:, None]
        last = idx == spec.n_layers - 1
        if last:
            layers.append(LayerBlock(W=W, b=b, z=z, p=p))
        else:
            q = f(z)
            u = np.zeros_like(q)
            layers.append(LayerBlock(W=W, b=b, z=z, p=p, q=q, u=u))
            p = q
    return NetState(spec=spec, layers=layers, y=y).validate()


def grow_network(state, extra_layers, seed, dataset=None):
    """Insert hidden layers immediately before the output layer.

    Inserted layers take the width of the previously-last hidden layer and
    are filled forward-consistently from its current output copy, with
    fresh duals at zero, so the new boundaries carry zero residuals. The
    output layer keeps its weights (its input width is unchanged) and has
    its input and linear copies refreshed by the same forward pass.
    """
    if extra_layers < 0:
        raise ValueError(f"extra_layers must be >= 0, got {extra_layers}")
    if extra_layers == 0:
        return state
    if dataset is not None:
        feats = np.asarray(dataset.features)
        if feats.shape[0] != state.spec.input_width or feats.shape[1] != state.n_samples:
            raise ValueError("dataset does not match the state being grown")

    spec = state.spec
    hidden_width = spec.layer_widths[-2]
    new_widths = (
        spec.layer_widths[:-1] + (hidden_width,) * extra_layers + (spec.layer_widths[-1],)
    )
    new_spec = replace(spec, layer_widths=new_widths)
    f = activation_fn(spec)
    rng = np.random.default_rng(seed)

    layers = list(state.layers[:-1])
    p = layers[-1].q
    for _ in range(extra_layers):
        W = _he_weights(rng, hidden_width, hidden_width)
        b = np.zeros(hidden_width)
        z = matmul(W, p) + b[:, None]
        q = f(z)
        layers.append(LayerBlock(W=W, b=b, z=z, p=p, q=q, u=np.zeros_like(q)))
        p = q

    out = state.layers[-1]
    W_out, b_out = out.W, out.b
    if W_out.shape[1] != hidden_width:
        W_out = _he_weights(rng, spec.output_width, hidden_width)
        b_out = np.zeros(spec.output_width)
    z_out = matmul(W_out, p) + b_out[:, None]
    layers.append(LayerBlock(W=W_out, b=b_out, z=z_out, p=p))

    return NetState(spec=new_spec, layers=layers, y=state.y).validate()


def _layer_arrays(state):
    """Per-layer matrices in declaration order (q/u absent for the last layer)."""
    out = []
    for idx, blk in enumerate(state.layers):
        arrays = [blk.W, blk.b, blk.z, blk.p]
        if idx < len(state.layers) - 1:
            arrays += [blk.q, blk.u]
        out.append(arrays)
    return out


def save_checkpoint(state, path):
    """Write a versioned little-endian checkpoint.

    Layout: magic ``PDMM``, u32 version, u32 width count, u64 widths,
    u8 activation code, u8 loss code, u64 sample count, then per-layer
    matrices (W, b, z, p, q, u; q/u omitted for the last layer) as raw
    float64, then the label matrix as a trailer so a state round-trips
    bit-exactly without the original dataset.
    """
    state.validate()
    spec = state.spec
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(spec.layer_widths)))
        fh.write(struct.pack(f"<{len(spec.layer_widths)}Q", *spec.layer_widths))
        fh.write(struct.pack("<BB", ACTIVATIONS.index(spec.activation), LOSSES.index(spec.loss)))
        fh.write(struct.pack("<Q", state.n_samples))
        for arrays in _layer_arrays(state):
            for arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.y, dtype="<f8").tobytes())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n_widths,) = struct.unpack("<I", _read_exact(fh, 4, "width count"))
        widths = struct.unpack(f"<{n_widths}Q", _read_exact(fh, 8 * n_widths, "widths"))
        act_code, loss_code = struct.unpack("<BB", _read_exact(fh, 2, "kind codes"))
        try:
            spec = NetworkSpec(
                layer_widths=widths,
                activation=ACTIVATIONS[act_code],
                loss=LOSSES[loss_code],
            )
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"invalid checkpoint spec: {exc}") from exc
        (n_samples,) = struct.unpack("<Q", _read_exact(fh, 8, "sample count"))

        def read_matrix(shape, what):
            count = int(np.prod(shape))
            data = _read_exact(fh, 8 * count, what)
            return np.frombuffer(data, dtype="<f8").reshape(shape).copy()

        layers = []
        for idx in range(len(widths) - 1):
            n_in, n_out = widths[idx], widths[idx + 1]
            W = read_matrix((n_out, n_in), f"layer {idx + 1} W")
            b = read_matrix((n_out,), f"layer {idx + 1} b")
            z = read_matrix((n_out, n_samples), f"layer {idx + 1} z")
            p = read_matrix((n_in, n_samples), f"layer {idx + 1} p")
            if idx < len(widths) - 2:
                q = read_matrix((n_out, n_samples), f"layer {idx + 1} q")
                u = read_matrix((n_out, n_samples), f"layer {idx + 1} u")
                layers.append(LayerBlock(W=W, b=b, z=z, p=p, q=q, u=u))
            else:
                layers.append(LayerBlock(W=W, b=b, z=z, p=p))
        y = read_matrix((widths[-1], n_samples), "labels")
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    return NetState(spec=spec, layers=layers, y=y).validate()
