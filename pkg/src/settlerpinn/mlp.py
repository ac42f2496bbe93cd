"""Dense feed-forward networks used as settler surrogates.

One record type serves the PINN, the vanilla network and the small
outlet-DPZ regressor.  Input normalization onto ``[-1, 1]`` and the affine
rescaling of the output head are stored in the record so that the trainer, the
rollout code and the filter cannot disagree about units.

Derivatives:

* :func:`jvp_time` / :func:`input_jacobian` - forward mode through the input
  normalization (a tangent is pushed alongside the primal values).
* :func:`grad_params` - reverse mode over the parameters via
  :mod:`settlerpinn.autodiff`.  If the loss contains :func:`jvp_time` terms the
  tangent computation is on the tape as well, giving the mixed second
  derivatives that the physics loss needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import ConfigurationError

MAGIC = "settlerpinn-mlp"
FORMAT_VERSION = 1
FILE_SUFFIX = ".mlp.json"

ACTIVATIONS = ("tanh", "sigmoid", "identity")

PINN_INPUTS = ("t", "h_hp0", "h_dp0", "q_in")
PINN_OUTPUTS = ("h_hp", "h_dp", "q_bot", "q_top", "q_c", "q_s")


class ModelFormatError(ValueError):
    """Malformed, truncated or incompatible model file."""


@dataclass(frozen=True, eq=False)
class MlpModel:
    layer_dims: tuple
    weights: tuple  # (fan_in, fan_out) per layer
    biases: tuple
    input_lb: np.ndarray
    input_ub: np.ndarray
    output_lo: np.ndarray
    output_hi: np.ndarray
    hidden_activation: str = "tanh"
    output_activation: str = "sigmoid"
    input_names: tuple = PINN_INPUTS
    output_names: tuple = PINN_OUTPUTS
    seed: int = 0
    stage: str = "init"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ConfigurationError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ConfigurationError(f"layer {i}: parameter shapes do not match layer_dims")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        if self.input_lb.shape != (dims[0],) or self.input_ub.shape != (dims[0],):
            raise ConfigurationError("input bounds must have one entry per input")
        if np.any(self.input_lb >= self.input_ub):
            raise ConfigurationError("input bounds require lb < ub")
        if self.output_lo.shape != (dims[-1],) or self.output_hi.shape != (dims[-1],):
            raise ConfigurationError("output range must have one entry per output")
        if len(self.input_names) != dims[0] or len(self.output_names) != dims[-1]:
            raise ConfigurationError("input/output names must match layer_dims")
        object.__setattr__(self, "layer_dims", dims)

    # -- parameter vector views -----------------------------------------
    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def with_flat(self, vec, **changes) -> "MlpModel":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ConfigurationError(f"expected {self.n_params} parameters, got {vec.size}")
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[k:k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(vec[k:k + b.size].copy())
            k += b.size
        return replace(self, weights=tuple(weights), biases=tuple(biases), **changes)

    def output_index(self, name: str) -> int:
        return self.output_names.index(name)

    def input_index(self, name: str) -> int:
        return self.input_names.index(name)


def xavier_init(layer_dims, seed, *, input_lb, input_ub, output_lo=None, output_hi=None,
                hidden_activation="tanh", output_activation="sigmoid",
                input_names=PINN_INPUTS, output_names=PINN_OUTPUTS) -> MlpModel:
    """Glorot-normal weights, ``N(0, 2/(fan_in + fan_out))``, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigurationError("layer_dims needs at least two positive entries")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    n_out = dims[-1]
    return MlpModel(
        layer_dims=tuple(dims),
        weights=tuple(weights),
        biases=tuple(biases),
        input_lb=np.asarray(input_lb, dtype=float),
        input_ub=np.asarray(input_ub, dtype=float),
        output_lo=np.zeros(n_out) if output_lo is None else np.asarray(output_lo, dtype=float),
        output_hi=np.ones(n_out) if output_hi is None else np.asarray(output_hi, dtype=float),
        hidden_activation=hidden_activation,
        output_activation=output_activation,
        input_names=tuple(input_names),
        output_names=tuple(output_names),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _activate(kind, z, dz):
    if kind == "tanh":
        a = ad.tanh(z)
        return a, (None if dz is None else (1.0 - a * a) * dz)
    if kind == "sigmoid":
        a = ad.sigmoid(z)
        return a, (None if dz is None else a * (1.0 - a) * dz)
    return z, dz


def evaluate(model: MlpModel, x, params=None, tangent=None):
    """Primal output and (optionally) a forward-mode tangent.

    ``x`` has shape ``(batch, n_in)`` in model units.  ``tangent`` is the input
    direction, same shape as ``x`` (or broadcastable).  ``params`` may replace
    the stored parameters with ``Var`` objects for differentiation.
    """
    if params is None:
        params = model.params
    if not isinstance(x, ad.Var):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
    span = model.input_ub - model.input_lb
    a = (x - model.input_lb) * (2.0 / span) - 1.0
    da = None
    if tangent is not None:
        tangent = ad.value(tangent) if not isinstance(tangent, ad.Var) else tangent
        da = tangent * (2.0 / span)
        if not isinstance(da, ad.Var):
            da = np.broadcast_to(da, ad.value(x).shape).copy()
    n_layers = len(model.layer_dims) - 1
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        z = a @ w + b
        dz = None if da is None else da @ w
        kind = model.hidden_activation if i < n_layers - 1 else model.output_activation
        a, da = _activate(kind, z, dz)
    rng = model.output_hi - model.output_lo
    y = model.output_lo + rng * a
    dy = None if da is None else rng * da
    return y, dy


def forward(model: MlpModel, x, params=None):
    """Network outputs for inputs ``x`` (model units)."""
    return evaluate(model, x, params)[0]


def jvp_time(model: MlpModel, x, params=None, time_input="t"):
    """Outputs and their derivative with respect to the time input (per second)."""
    seed = np.zeros(len(model.input_names))
    seed[model.input_index(time_input)] = 1.0
    return evaluate(model, x, params, tangent=seed)


def input_jacobian(model: MlpModel, x, rows=None, cols=None) -> np.ndarray:
    """Jacobian of selected outputs w.r.t. selected inputs at a single point.

    ``rows`` / ``cols`` are output / input names or indices.  One forward-mode
    pass per column.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    rows = _indices(rows, model.output_names)
    cols = _indices(cols, model.input_names)
    jac = np.empty((len(rows), len(cols)))
    for k, c in enumerate(cols):
        seed = np.zeros(x.shape[1])
        seed[c] = 1.0
        _, dy = evaluate(model, x, tangent=seed)
        jac[:, k] = dy[0, rows]
    return jac


def _indices(sel, names):
    if sel is None:
        return list(range(len(names)))
    return [names.index(s) if isinstance(s, str) else int(s) for s in sel]


def grad_params(model: MlpModel, loss_fn):
    """Value and flat parameter gradient of ``loss_fn(params)``.

    ``loss_fn`` receives the parameters as ``Var`` objects (same order as
    ``model.params``) and must return a scalar built from the primitives in
    :mod:`settlerpinn.autodiff`.
    """
    pvars = [ad.Var(p) for p in model.params]
    loss = loss_fn(pvars)
    grads = ad.grad(loss, pvars)
    return float(ad.value(loss)), np.concatenate([g.ravel() for g in grads])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def serialize(model: MlpModel) -> bytes:
    payload = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "hidden_activation": model.hidden_activation,
        "output_activation": model.output_activation,
        "input_names": list(model.input_names),
        "output_names": list(model.output_names),
        "input_lb": model.input_lb.tolist(),
        "input_ub": model.input_ub.tolist(),
        "output_lo": model.output_lo.tolist(),
        "output_hi": model.output_hi.tolist(),
        "seed": model.seed,
        "stage": model.stage,
        "meta": model.meta,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    # json writes floats with repr(), which round-trips exactly
    return json.dumps(payload, indent=1).encode("utf-8")


def deserialize(blob: bytes) -> MlpModel:
    try:
        payload = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot parse model file: {exc}") from None
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise ModelFormatError("not a settlerpinn model file")
    if payload.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {payload.get('version')!r}")
    try:
        return MlpModel(
            layer_dims=tuple(payload["layer_dims"]),
            weights=tuple(np.array(w, dtype=float).reshape(len(w), -1) for w in payload["weights"]),
            biases=tuple(np.array(b, dtype=float) for b in payload["biases"]),
            input_lb=np.array(payload["input_lb"], dtype=float),
            input_ub=np.array(payload["input_ub"], dtype=float),
            output_lo=np.array(payload["output_lo"], dtype=float),
            output_hi=np.array(payload["output_hi"], dtype=float),
            hidden_activation=payload["hidden_activation"],
            output_activation=payload["output_activation"],
            input_names=tuple(payload["input_names"]),
            output_names=tuple(payload["output_names"]),
            seed=int(payload["seed"]),
            stage=payload["stage"],
            meta=payload.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise ModelFormatError(f"shape mismatch: {exc}") from None
        raise ModelFormatError(f"incomplete model file: {exc}") from None


def save_model(model: MlpModel, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, serialize(model))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
