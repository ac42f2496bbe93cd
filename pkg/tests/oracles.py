"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from settlerpinn import autodiff as ad
from settlerpinn import mlp


def central_grad(f, x, h):
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_error(a, b, floor_frac=1e-3):
    """Elementwise relative error, the denominator floored at ``floor_frac`` of the largest reference entry."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = np.maximum(np.abs(b), floor_frac * np.abs(b).max() + 1e-300)
    return np.abs(a - b) / den


def random_model(seed, dims=(4, 6, 5, 3), output_activation="sigmoid"):
    """Small network whose parameters have magnitudes in [1e-3, 1] with random signs."""
    rng = np.random.default_rng(seed)
    lb = rng.uniform(-1.0, 0.0, dims[0])
    ub = lb + rng.uniform(0.5, 2.0, dims[0])
    names_in = tuple(f"x{i}" for i in range(dims[0]))
    names_in = ("t",) + names_in[1:]
    m = mlp.xavier_init(dims, seed, input_lb=lb, input_ub=ub, output_activation=output_activation,
                        input_names=names_in, output_names=tuple(f"y{i}" for i in range(dims[-1])),
                        output_lo=rng.uniform(-1, 0, dims[-1]), output_hi=rng.uniform(1, 2, dims[-1]))
    mag = 10.0 ** rng.uniform(-3, 0, m.n_params)
    return m.with_flat(mag * rng.choice([-1.0, 1.0], m.n_params)), rng


def random_loss(model, rng, n_rows=5):
    """Data misfit plus a squared time-derivative term (exercises forward-over-reverse)."""
    x = model.input_lb + rng.random((n_rows, model.layer_dims[0])) * (model.input_ub - model.input_lb)
    target = rng.normal(size=(n_rows, model.layer_dims[-1]))
    c = rng.uniform(0.1, 1.0)

    def loss(params):
        y, dy = mlp.jvp_time(model, x, params)
        return ad.mean(ad.square(y - target)) + c * ad.mean(ad.square(dy))

    return loss
