import os

# Pin BLAS thread pools before numpy loads anywhere: bitwise determinism
# checks and speedup measurements assume the package's layer-level
# parallelism is the only concurrency in play.
for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from pdadmm.data import random_dataset
from pdadmm.state import HyperParams, NetworkSpec, init_state


def naive_matmul(a, b):
    """Triple-loop product with ascending inner-index accumulation."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


@pytest.fixture
def tiny_state():
    """Forward-consistent 3-hidden-layer state on a small random batch."""
    dataset = random_dataset(n_features=12, n_samples=40, n_classes=3, seed=11)
    spec = NetworkSpec((12, 16, 16, 16, 3))
    return init_state(spec, dataset, seed=7)


@pytest.fixture
def hp():
    return HyperParams(rho=1.0, nu=0.1)
