"""Small builders and a finite-difference oracle shared by the test modules."""

import numpy as np

from forler.approximator import init_params, mlp_header
from forler.envs import Batch
from forler.losses import CriticPair


def continuous_batch(rng, B=6, sd=3, ad=2, terminal_frac=0.3):
    return Batch(rng.normal(size=(B, sd)), rng.uniform(-0.9, 0.9, size=(B, ad)), rng.normal(size=B),
                 rng.normal(size=(B, sd)), (rng.random(B) < terminal_frac).astype(np.float64))


def tabular_batch(rng, B=6, S=4, A=3):
    eye = np.eye(S)
    return Batch(eye[rng.integers(S, size=B)], rng.integers(A, size=(B, 1)).astype(np.float64),
                 rng.normal(size=B), eye[rng.integers(S, size=B)],
                 (rng.random(B) < 0.3).astype(np.float64))


def net(rng, n_in, n_out, hidden=(5,), out_act="identity", scale=1.0):
    return init_params(mlp_header(n_in, n_out, hidden, "tanh", out_act), rng, final_scale=scale)


def critic_pair(rng, n_in, n_out=1, hidden=(5,)):
    heads = [net(rng, n_in, n_out, hidden) for _ in range(4)]
    return CriticPair(*heads)


def central_difference(f, params, eps=1e-6):
    """Numerical gradient of the scalar ``f(params)`` w.r.t. every parameter."""
    v = params.values
    g = np.zeros_like(v)
    for i in range(v.size):
        up, dn = v.copy(), v.copy()
        up[i] += eps
        dn[i] -= eps
        g[i] = (f(params.with_values(up)) - f(params.with_values(dn))) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)), np.max(np.abs(b))))
