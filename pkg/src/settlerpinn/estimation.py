"""Ensemble state estimation with a trained settler surrogate.

The surrogate is split into two models:

* transition ``f(x, u) = heights(t = 1; x, u)``,
* measurement ``h(x, u) = (q_bot, q_top)(t = 0; x, u)``,

both evaluated with the initial heights ``x`` as network inputs.  Jacobians
with respect to ``x`` are forward-mode tangents of the network.

The filter runs in scaled units (heights / separator height, flows / flow
scale).  ``P``, ``W`` and ``R`` are therefore dimensionless; results are
converted back to meters in :class:`EstimationRun` accessors.  Each member
filters its own state; only the process noise ``W`` couples the members, via
the spread of their predictions from the shared mean estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import mlp
from .core import ConfigurationError, SettlerConfig, SettlerState

log = logging.getLogger(__name__)

HEIGHTS = ("h_hp", "h_dp")
FLOWS = ("q_bot", "q_top")
STATE_INPUTS = ("h_hp0", "h_dp0")
MAX_CONDITION = 1e12
PSD_TOL = 1e-12


class FilterStepError(RuntimeError):
    """A member cannot continue (non-finite prediction or Jacobian)."""


# ---------------------------------------------------------------------------
# surrogate evaluation
# ---------------------------------------------------------------------------


def _row(t, x, u):
    return np.array([t, x[0], x[1], u])


def _outputs_and_jacobian(model: mlp.MlpModel, t, x, u, outputs):
    """Selected outputs at one point and their Jacobian w.r.t. the initial heights.

    Both tangent directions go through one batched evaluation.
    """
    row = _row(t, x, u)
    batch = np.vstack([row, row])
    tangent = np.zeros_like(batch)
    for k, name in enumerate(STATE_INPUTS):
        tangent[k, model.input_index(name)] = 1.0
    y, dy = mlp.evaluate(model, batch, tangent=tangent)
    idx = [model.output_index(n) for n in outputs]
    return y[0, idx], dy[:, idx].T


def transition(model, x, u, jacobian=True):
    """Heights after one second from heights ``x`` under inlet flow ``u`` (scaled)."""
    if jacobian:
        return _outputs_and_jacobian(model, 1.0, x, u, HEIGHTS)
    y = mlp.forward(model, _row(1.0, x, u))
    return y[0, [model.output_index(n) for n in HEIGHTS]]


def measurement(model, x, u, jacobian=True):
    """Outlet flows at ``t = 0`` for heights ``x`` (scaled)."""
    if jacobian:
        return _outputs_and_jacobian(model, 0.0, x, u, FLOWS)
    y = mlp.forward(model, _row(0.0, x, u))
    return y[0, [model.output_index(n) for n in FLOWS]]


def state_bounds(config: SettlerConfig, kind="extrapolation"):
    """Scaled (lower, upper) height bounds used for clipping and sampling."""
    hs = config.scaling.h_scale
    b = config.bounds
    lb = np.array([b.get("h_hp", kind).lb, b.get("h_dp", kind).lb]) / hs
    ub = np.array([b.get("h_hp", kind).ub, b.get("h_dp", kind).ub]) / hs
    return lb, ub


def _clip(x, bounds):
    if bounds is None:
        return x, False
    lb, ub = bounds
    clipped = np.clip(x, lb, ub)
    return clipped, bool(np.any(clipped != x))


# ---------------------------------------------------------------------------
# filter algebra
# ---------------------------------------------------------------------------


@dataclass
class FilterState:
    """Estimate and covariances of one member, all in scaled units."""

    x: np.ndarray
    P: np.ndarray
    W: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    R: np.ndarray = field(default_factory=lambda: 2.5e-7 * np.eye(2))
    K: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(2)
        self.P = np.asarray(self.P, dtype=float).reshape(2, 2)
        self.W = np.asarray(self.W, dtype=float).reshape(2, 2)
        self.R = np.asarray(self.R, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(self.x)) or not np.all(np.isfinite(self.P)):
            raise ValueError("filter state must be finite")

    @classmethod
    def initial(cls, x0, config: SettlerConfig) -> "FilterState":
        fc = config.filter
        return cls(x=np.asarray(x0, dtype=float), P=np.diag(fc.p0), R=fc.r * np.eye(2))

    def state(self, config: SettlerConfig) -> SettlerState:
        hs = config.scaling.h_scale
        return SettlerState(float(self.x[0] * hs), float(self.x[1] * hs))


def solve_2x2(A, B):
    """``B @ inv(A)`` for a 2x2 ``A`` through the adjugate.

    Raises ``np.linalg.LinAlgError`` when ``A`` is singular or its condition
    number exceeds ``MAX_CONDITION``.
    """
    A = np.asarray(A, dtype=float)
    a, b, c, d = A[0, 0], A[0, 1], A[1, 0], A[1, 1]
    det = a * d - b * c
    adj = np.array([[d, -b], [-c, a]])
    norm_a = np.abs(A).sum(axis=1).max()
    norm_adj = np.abs(adj).sum(axis=1).max()
    if det == 0 or not np.isfinite(det) or norm_a * norm_adj / abs(det) > MAX_CONDITION:
        raise np.linalg.LinAlgError("innovation covariance is singular or ill-conditioned")
    return np.asarray(B, dtype=float) @ adj / det


def joseph_update(P, K, H, R):
    """``(I - K H) P (I - K H)^T + K R K^T``, symmetrized."""
    A = np.eye(P.shape[0]) - K @ H
    out = A @ P @ A.T + K @ R @ K.T
    return 0.5 * (out + out.T)


def covariance_ok(P, tol=PSD_TOL) -> bool:
    return (np.max(np.abs(P - P.T)) < tol) and (np.linalg.eigvalsh(P).min() >= -tol)


def predict(fs: FilterState, model, u, bounds=None) -> tuple[FilterState, bool]:
    """Propagate estimate and covariance one second.

    Returns the predicted state and whether the mean had to be clipped into
    ``bounds``.
    """
    x_in, clipped_in = _clip(fs.x, bounds)
    if clipped_in:
        log.info("estimate outside bounds, clipped before prediction")
    x, F = transition(model, x_in, u)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(F))):
        raise FilterStepError("non-finite transition or Jacobian")
    x, clipped = _clip(x, bounds)
    P = F @ fs.P @ F.T + fs.W
    P = 0.5 * (P + P.T)
    return replace(fs, x=x, P=P), clipped or clipped_in


def update(fs: FilterState, model, u, y) -> tuple[FilterState, np.ndarray, bool]:
    """Measurement update with the Joseph form.

    Returns ``(state, predicted measurement, applied)``; ``applied`` is False
    when the innovation covariance was too ill-conditioned and the prediction
    was kept.
    """
    y_hat, H = measurement(model, fs.x, u)
    if not (np.all(np.isfinite(y_hat)) and np.all(np.isfinite(H))):
        raise FilterStepError("non-finite measurement model or Jacobian")
    S = H @ fs.P @ H.T + fs.R
    try:
        K = solve_2x2(S, fs.P @ H.T)
    except np.linalg.LinAlgError as exc:
        log.warning("update skipped: %s", exc)
        return fs, y_hat, False
    x = fs.x + K @ (np.asarray(y, dtype=float) - y_hat)
    P = joseph_update(fs.P, K, H, fs.R)
    return replace(fs, x=x, P=P, K=K), y_hat, True


def adaptive_W(models, x_mean, u, attenuation=100.0):
    """Sample covariance of the members' one-second predictions from ``x_mean``, over ``attenuation``."""
    if len(models) < 2:
        raise ConfigurationError("adaptive process noise needs at least two members")
    preds = np.array([transition(m, x_mean, u, jacobian=False) for m in models])
    return spread_covariance(preds, attenuation)


def spread_covariance(preds, attenuation=100.0):
    """Unbiased sample covariance of the rows of ``preds``, divided by ``attenuation``.

    Deviations are taken from the first row before centering, so identical
    rows give an exactly zero matrix.
    """
    d = preds - preds[0]
    d = d - d.mean(axis=0)
    return d.T @ d / ((len(preds) - 1) * attenuation)


# ---------------------------------------------------------------------------
# initial state and open-loop rollout
# ---------------------------------------------------------------------------


def initial_state_search(models, y0, u0, n_samples=100, seed=0, bounds=None):
    """Best of ``n_samples`` uniform height candidates by squared flow mismatch.

    ``models`` is one model or an ensemble (mismatch of the ensemble-mean flows).
    Everything is in scaled units; ``bounds`` are the scaled (lower, upper)
    heights to sample from.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if isinstance(models, mlp.MlpModel):
        models = [models]
    lb, ub = bounds
    rng = np.random.default_rng(seed)
    cand = lb + rng.random((n_samples, 2)) * (ub - lb)
    x = np.column_stack([np.zeros(n_samples), cand, np.full(n_samples, float(u0))])
    flows = np.mean([mlp.forward(m, x)[:, [m.output_index(n) for n in FLOWS]] for m in models], axis=0)
    err = ((flows - np.asarray(y0, dtype=float)) ** 2).sum(axis=1)
    return cand[int(np.argmin(err))]


@dataclass
class Rollout:
    members: np.ndarray  # (n_members, n_steps + 1, 2), scaled heights
    clipped: np.ndarray  # (n_members, n_steps + 1) bool

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)


def chain_forward(models, x0, u_schedule, bounds=None) -> Rollout:
    """Open-loop chained rollout: each segment's end state starts the next one.

    All members are advanced together in one batched network call per step.
    """
    if isinstance(models, mlp.MlpModel):
        models = [models]
    u_schedule = np.asarray(u_schedule, dtype=float)
    n = len(u_schedule)
    out = np.empty((len(models), n + 1, 2))
    flags = np.zeros((len(models), n + 1), dtype=bool)
    for i, m in enumerate(models):
        x = np.asarray(x0, dtype=float)
        out[i, 0] = x
        idx = [m.output_index(name) for name in HEIGHTS]
        for k in range(n):
            y = mlp.forward(m, _row(1.0, x, u_schedule[k]))[0, idx]
            x, flags[i, k + 1] = _clip(y, bounds)
            out[i, k + 1] = x
        if flags[i].any():
            log.info("member %d: rollout clipped to bounds at %d steps", i, int(flags[i].sum()))
    return Rollout(out, flags)


# ---------------------------------------------------------------------------
# filter loop
# ---------------------------------------------------------------------------


@dataclass
class EstimationRun:
    """Per-step filter record of one member (scaled units).

    Step ``k`` holds the prior ``x_prior[k] = x_{k|k-1}``, the posterior
    ``x_post[k] = x_{k|k}``, the covariances after the update, the process
    noise used, the gain, the predicted and measured flows and the control
    ``u[k]`` applied over ``[k, k+1)``.  Step 0 is the initial state (prior =
    posterior = search result).
    """

    x_prior: np.ndarray
    x_post: np.ndarray
    P: np.ndarray
    W: np.ndarray
    K: np.ndarray
    y_pred: np.ndarray
    y_meas: np.ndarray
    u: np.ndarray
    clipped: np.ndarray
    update_skipped: np.ndarray
    failed_at: int = None

    @classmethod
    def allocate(cls, n):
        nan2 = np.full((n, 2), np.nan)
        nan22 = np.full((n, 2, 2), np.nan)
        return cls(nan2.copy(), nan2.copy(), nan22.copy(), nan22.copy(), nan22.copy(), nan2.copy(),
                   nan2.copy(), np.full(n, np.nan), np.zeros(n, dtype=bool), np.zeros(n, dtype=bool))

    def heights_m(self, config: SettlerConfig) -> np.ndarray:
        return self.x_post * config.scaling.h_scale


@dataclass
class EnsembleEstimate:
    members: list
    mean: np.ndarray  # (n, 2) mean posterior over active members, scaled
    active: np.ndarray  # (n, n_members) bool

    def heights_m(self, config: SettlerConfig) -> np.ndarray:
        return self.mean * config.scaling.h_scale


def run_filter(models, u, y, config: SettlerConfig, x0=None, W=None, seed=0,
               search_bounds=None, clip_bounds="extrapolation") -> EnsembleEstimate:
    """Filter a measured trajectory with every member of the ensemble.

    ``u`` (n,) and ``y`` (n, 2) are scaled inlet and outlet flows at 1 s
    resolution; ``u[k]`` is applied over ``[k, k+1)``.  The prediction to step
    ``k`` and the measurement model at step ``k`` both use ``u[k-1]``.
    ``x0`` (scaled heights) skips the initial-state search.  ``W`` fixes the
    process noise (required for a single member).  Per step, the mean of the
    active members' last estimates gives the shared adaptive ``W``; a member
    whose step fails is dropped from the mean from then on.
    """
    if isinstance(models, mlp.MlpModel):
        models = [models]
    models = list(models)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(u)
    if y.shape != (n, 2):
        raise ConfigurationError("y must have shape (len(u), 2)")
    if W is None and len(models) < 2:
        raise ConfigurationError("a single-member filter needs an explicit W")
    fc = config.filter
    bounds = state_bounds(config, clip_bounds) if fc.clip_to_bounds and clip_bounds else None
    sb = search_bounds if search_bounds is not None else state_bounds(config, "extrapolation")
    if x0 is None:
        x0 = initial_state_search(models, y[0], u[0], fc.n_init_samples, seed, sb)
    x0 = np.asarray(x0, dtype=float)

    runs = [EstimationRun.allocate(n) for _ in models]
    states = [FilterState.initial(x0, config) for _ in models]
    active = np.zeros((n, len(models)), dtype=bool)
    active[0] = True
    for r, fs in zip(runs, states):
        r.x_prior[0] = r.x_post[0] = fs.x
        r.P[0], r.W[0], r.K[0] = fs.P, fs.W, fs.K
        r.y_meas[0], r.u[0] = y[0], u[0]
    mean = np.empty((n, 2))
    mean[0] = x0
    alive = list(range(len(models)))
    for k in range(1, n):
        u_prev = u[k - 1]
        if W is None:
            preds = {}
            for i in list(alive):
                preds[i] = transition(models[i], mean[k - 1], u_prev, jacobian=False)
                if not np.all(np.isfinite(preds[i])):
                    log.warning("member %d dropped at step %d: non-finite prediction", i, k)
                    runs[i].failed_at = k
                    alive.remove(i)
            W_k = (spread_covariance(np.array([preds[i] for i in alive]), fc.w_attenuation)
                   if len(alive) >= 2 else np.zeros((2, 2)))
        else:
            W_k = np.asarray(W, dtype=float)
        for i in list(alive):
            r = runs[i]
            try:
                prior, clipped = predict(replace(states[i], W=W_k), models[i], u_prev, bounds)
                post, y_hat, applied = update(prior, models[i], u_prev, y[k])
                if not covariance_ok(post.P):
                    raise FilterStepError("covariance lost symmetry or positive semi-definiteness")
            except (FilterStepError, ValueError) as exc:
                log.warning("member %d dropped at step %d: %s", i, k, exc)
                r.failed_at = k
                alive.remove(i)
                continue
            states[i] = post
            r.x_prior[k], r.x_post[k] = prior.x, post.x
            r.P[k], r.W[k], r.K[k] = post.P, W_k, post.K if applied else np.zeros((2, 2))
            r.y_pred[k], r.y_meas[k], r.u[k] = y_hat, y[k], u[k]
            r.clipped[k], r.update_skipped[k] = clipped, not applied
        if not alive:
            raise FilterStepError(f"all members failed by step {k}")
        active[k, alive] = True
        mean[k] = np.mean([states[i].x for i in alive], axis=0)
    return EnsembleEstimate(runs, mean, active)


# ---------------------------------------------------------------------------
# outlet-DPZ regression
# ---------------------------------------------------------------------------


@dataclass
class OutletFit:
    model: mlp.MlpModel
    train_rmse: float
    val_rmse: float
    epochs: int
    best_epoch: int
    early_stopped: bool


def outlet_dpz_train(avg_h_dp, outlet_h_dp, val_avg=None, val_outlet=None, val_fraction=0.2, seed=0,
                     max_epochs=1000, patience=30, lr=3e-2) -> OutletFit:
    """Fit the [1, 16, 8, 1] map from average to outlet DPZ height (meters).

    Validation data are either given explicitly or the trailing
    ``val_fraction`` of the series.  Full-batch Adam; training stops when the
    validation error has not improved for ``patience`` epochs and the best
    parameters are restored.
    """
    from .training import AdamState, adam_step

    x = np.asarray(avg_h_dp, dtype=float).ravel()
    t = np.asarray(outlet_h_dp, dtype=float).ravel()
    if x.shape != t.shape:
        raise ConfigurationError("average and outlet series differ in length")
    if val_avg is None:
        n_val = int(round(val_fraction * len(x)))
        x, xv, t, tv = x[:len(x) - n_val], x[len(x) - n_val:], t[:len(t) - n_val], t[len(t) - n_val:]
    else:
        xv, tv = np.asarray(val_avg, dtype=float).ravel(), np.asarray(val_outlet, dtype=float).ravel()
    if len(x) + len(xv) < 50:
        raise ConfigurationError("outlet-DPZ training needs at least 50 points")
    use_es = len(xv) >= patience
    if not use_es:
        log.warning("validation set smaller than the patience window; early stopping disabled")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        hi = lo + 1e-6
    t_lo, t_hi = float(t.min()), float(t.max())
    if t_hi <= t_lo:
        t_hi = t_lo + 1e-6
    model = mlp.xavier_init((1, 16, 8, 1), seed, input_lb=[lo], input_ub=[hi], output_lo=[t_lo],
                            output_hi=[t_hi], output_activation="identity", input_names=("avg_h_dp",),
                            output_names=("outlet_h_dp",))
    model = replace(model, meta={"kind": "outlet_dpz"})
    X, T = x[:, None], t[:, None]

    def rmse(m, xs, ts):
        if len(xs) == 0:
            return float("nan")
        return float(np.sqrt(np.mean((mlp.forward(m, xs[:, None])[:, 0] - ts) ** 2)))

    def mse(params):
        d = mlp.forward(model, X, params) - T
        return ad.mean(ad.square(d))

    theta = model.flat()
    state = AdamState.zeros(theta.size)
    best = (rmse(model, xv, tv) if use_es else np.inf, theta.copy(), 0)
    since = 0
    epoch = 0
    stopped = False
    for epoch in range(1, max_epochs + 1):
        _, g = mlp.grad_params(model.with_flat(theta), mse)
        theta, state = adam_step(theta, g, lr, state)
        if use_es:
            v = rmse(model.with_flat(theta), xv, tv)
            if v < best[0]:
                best, since = (v, theta.copy(), epoch), 0
            else:
                since += 1
                if since >= patience:
                    stopped = True
                    break
    if use_es:
        theta = best[1]
    fitted = model.with_flat(theta, stage="finetune")
    return OutletFit(fitted, rmse(fitted, x, t), rmse(fitted, xv, tv), epoch,
                     best[2] if use_es else epoch, stopped)


@dataclass
class OutletPrediction:
    values: np.ndarray
    extrapolated: np.ndarray


def outlet_dpz_predict(model: mlp.MlpModel, avg_h_dp) -> OutletPrediction:
    """Outlet DPZ height (meters) for average DPZ heights, flagging inputs outside the training range."""
    x = np.asarray(avg_h_dp, dtype=float).ravel()
    if len(x) == 0:
        return OutletPrediction(np.zeros(0), np.zeros(0, dtype=bool))
    flags = (x < model.input_lb[0]) | (x > model.input_ub[0])
    return OutletPrediction(mlp.forward(model, x[:, None])[:, 0], flags)
