import numpy as np
import pytest

from feddeepgmm.data import ClientShard
from feddeepgmm.nn import IDENTITY, LEAKY_RELU, MlpSpec, ParamVector, init_params


def random_shard(rng, n, client_id=0):
    x = rng.normal(0.0, 2.0, size=n)
    z = rng.uniform(-3.0, 3.0, size=(n, 2))
    y = x + rng.normal(size=n)
    return ClientShard(client_id, x, y, z, np.arange(n))


def random_params(spec, rng, scale=0.7):
    return ParamVector(rng.normal(0.0, scale, size=spec.n_params), spec)


@pytest.fixture
def small_specs():
    return MlpSpec((1, 4, 3, 1), LEAKY_RELU, 0.1), MlpSpec((2, 5, 1), LEAKY_RELU, 0.1)


@pytest.fixture
def linear_specs():
    return MlpSpec((1, 1), IDENTITY), MlpSpec((2, 1), IDENTITY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(fun, w, h=1e-6):
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.shape[0]):
        e = np.zeros_like(w)
        e[i] = h
        out[i] = (fun(w + e) - fun(w - e)) / (2 * h)
    return out


def central_diff4(fun, w, h=1e-4):
    """Fourth-order central stencil: truncation O(h^4), roundoff O(eps / h)."""
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.shape[0]):
        e = np.zeros_like(w)
        e[i] = h
        out[i] = (8 * (fun(w + e) - fun(w - e)) - (fun(w + 2 * e) - fun(w - 2 * e))) / (12 * h)
    return out


def per_coord_rel_err(g, fd, floor=1e-6):
    return float(np.max(np.abs(np.asarray(g) - fd) / np.maximum(np.abs(fd), floor)))


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))
