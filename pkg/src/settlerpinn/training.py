"""Loss assembly, loss balancing, optimizers and the two-stage training pipeline.

All losses work in scaled units (heights / separator height, flows / reference
flow) and accept ``params`` as ``Var`` objects so that :func:`mlp.grad_params`
can differentiate them.  Time derivatives of the network come from the
forward-mode tangent in :func:`mlp.jvp_time`, so the physics loss carries the
mixed second derivatives on the tape.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np
from scipy.optimize import line_search
from scipy.stats import qmc

from . import autodiff as ad
from . import mlp
from .core import ConfigurationError, SettlerConfig
from .mechanistic import SegmentDataset, TrajectoryDataset, volume_balance_rates

log = logging.getLogger(__name__)

MEASURED = ("h_hp", "h_dp", "q_bot", "q_top")
INTERNAL = ("q_c", "q_s")
IDW_SMOOTHING = 0.5
IDW_CLAMP = (1e-3, 1e6)
# one L-BFGS epoch is one optimizer step of up to this many inner iterations
LBFGS_ITERS_PER_EPOCH = 20


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    lambda_1: float = 1.0  # data
    lambda_2: float = 1.0  # physics
    lambda_g: float = 1.0  # algebraic vs differential residuals
    lambda_z: float = 1.0  # internal flows

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class TrainSchedule:
    stage: str
    adam_epochs: int
    adam_lr: float
    lbfgs_iters: int  # L-BFGS epochs, see LBFGS_ITERS_PER_EPOCH
    idw_enabled: bool
    idw_period: int
    n_out: int

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.n_out not in (4, 6):
            raise ConfigurationError("n_out must be 4 or 6")
        if self.adam_epochs < 0 or self.lbfgs_iters < 0 or self.adam_lr <= 0:
            raise ConfigurationError("epochs must be >= 0 and lr > 0")
        if self.idw_enabled and self.idw_period < 1:
            raise ConfigurationError("idw_period must be >= 1")

    @classmethod
    def pretrain(cls, **kw):
        # IDW stays available but is off by default: the rebalanced weights
        # fit the flows at the expense of the height dynamics
        return replace(cls("pretrain", 2000, 1e-3, 300, False, 5, 6), **kw)

    @classmethod
    def finetune(cls, **kw):
        return replace(cls("finetune", 1000, 1e-4, 200, False, 5, 4), **kw)

    @classmethod
    def desk_pretrain(cls, **kw):
        return cls.pretrain(**{"adam_epochs": 500, "lbfgs_iters": 50, **kw})

    @classmethod
    def desk_finetune(cls, **kw):
        # no L-BFGS: on noisy heights it fits the noise in the state inputs
        return cls.finetune(**{"adam_epochs": 250, "lbfgs_iters": 0, **kw})


@dataclass
class DataRows:
    """Supervised rows in scaled units.

    ``x`` holds the network inputs ``(t, h_hp0, h_dp0, q_in)``, ``y`` the
    measured targets ``(h_hp, h_dp, q_bot, q_top)`` and ``z`` the internal
    flows ``(q_c, q_s)`` when known.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray = None

    def __len__(self):
        return len(self.x)


@dataclass
class CollocationSet:
    physics: np.ndarray  # (M, 4): t, h_hp0, h_dp0, q_in
    init: np.ndarray  # (K, 4) with t = 0


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def input_bounds(config: SettlerConfig, kind="extrapolation"):
    """Lower/upper network input bounds ``(t, h_hp0, h_dp0, q_in)`` in scaled units."""
    sc, b = config.scaling, config.bounds
    lb = [0.0, b.get("h_hp", kind).lb / sc.h_scale, b.get("h_dp", kind).lb / sc.h_scale,
          b.get("q_in", kind).lb / sc.q_scale]
    ub = [1.0, b.get("h_hp", kind).ub / sc.h_scale, b.get("h_dp", kind).ub / sc.h_scale,
          b.get("q_in", kind).ub / sc.q_scale]
    return np.array(lb), np.array(ub)


def new_model(config: SettlerConfig, seed, kind="pinn", hidden=(32, 32)) -> mlp.MlpModel:
    """Freshly initialized PINN (6 outputs) or VNN (4 measurable outputs).

    The sigmoid head maps heavy-phase height onto ``(0, 0.6)`` and DPZ height
    onto ``(0, 0.4)`` (scaled), so the summed height stays below the separator
    height; flows map onto ``(0, 1)``.
    """
    if kind not in ("pinn", "vnn"):
        raise ConfigurationError(f"unknown model kind {kind!r}")
    names = mlp.PINN_OUTPUTS if kind == "pinn" else MEASURED
    hi = np.array([0.6, 0.4] + [1.0] * (len(names) - 2))
    lb, ub = input_bounds(config)
    model = mlp.xavier_init((4, *hidden, len(names)), seed, input_lb=lb, input_ub=ub,
                            output_lo=np.zeros(len(names)), output_hi=hi, output_names=names)
    return replace(model, meta={"kind": kind})


def rows_from_segments(ds: SegmentDataset, config: SettlerConfig) -> DataRows:
    """Every grid point of every segment becomes one row."""
    hs, qs = config.scaling.h_scale, config.scaling.q_scale
    n, m = len(ds), len(ds.t)
    x = np.column_stack([
        np.tile(ds.t, n),
        np.repeat(ds.h_hp0 / hs, m),
        np.repeat(ds.h_dp0 / hs, m),
        np.repeat(ds.q_in / qs, m),
    ]) if n else np.zeros((0, 4))
    g = ds.grid
    y = np.column_stack([g["h_hp"].ravel() / hs, g["h_dp"].ravel() / hs,
                         g["q_bot"].ravel() / qs, g["q_top"].ravel() / qs]) if n else np.zeros((0, 4))
    z = np.column_stack([g["q_c"].ravel() / qs, g["q_s"].ravel() / qs]) if n else np.zeros((0, 2))
    return DataRows(x, y, z)


def rows_from_trajectory(traj: TrajectoryDataset, config: SettlerConfig) -> DataRows:
    """Two rows per 1 s step: ``t = 0`` (initial state) and ``t = 1`` (next state).

    The measured heights at ``tau_k`` serve as both the initial-state input
    and the ``t = 0`` target; flows are the ones held over the step.
    """
    hs, qs = config.scaling.h_scale, config.scaling.q_scale
    n = len(traj) - 1
    if n < 1:
        return DataRows(np.zeros((0, 4)), np.zeros((0, 4)))
    h_hp, h_dp = traj.h_hp / hs, traj.h_dp / hs
    q_in, q_bot, q_top = traj.q_in[:n] / qs, traj.q_bot[:n] / qs, traj.q_top[:n] / qs
    x0 = np.column_stack([np.zeros(n), h_hp[:n], h_dp[:n], q_in])
    x1 = x0.copy()
    x1[:, 0] = 1.0
    y0 = np.column_stack([h_hp[:n], h_dp[:n], q_bot, q_top])
    y1 = np.column_stack([h_hp[1:], h_dp[1:], q_bot, q_top])
    return DataRows(np.vstack([x0, x1]), np.vstack([y0, y1]))


def sample_collocation(n_physics, n_init, config: SettlerConfig, seed=0, kind="extrapolation") -> CollocationSet:
    """Latin-hypercube collocation points inside the given bound box."""
    lb, ub = input_bounds(config, kind)
    rng = np.random.default_rng(seed)

    def draw(n, d):
        if n == 0:
            return np.zeros((0, d))
        return qmc.LatinHypercube(d=d, seed=rng).random(n)

    phys = lb + draw(n_physics, 4) * (ub - lb)
    init = lb + draw(n_init, 4) * (ub - lb)
    init[:, 0] = 0.0
    return CollocationSet(phys, init)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _squared_sum(diff):
    return ad.sum(ad.square(diff))


def data_terms(model, rows: DataRows, n_out, params=None, need_internal=True):
    """Unweighted ``(measured, internal)`` data terms, each already divided by ``n_out*N``."""
    if n_out not in (4, 6):
        raise ConfigurationError("n_out must be 4 or 6")
    if len(rows) == 0:
        return 0.0, 0.0
    pred = mlp.forward(model, rows.x, params)
    norm = 1.0 / (n_out * len(rows))
    cols = [model.output_index(n) for n in MEASURED]
    meas = _squared_sum(pred[:, cols] - rows.y) * norm
    internal = 0.0
    if n_out == 6:
        if rows.z is None:
            raise ConfigurationError("n_out = 6 needs internal-flow targets")
        if need_internal:
            icols = [model.output_index(n) for n in INTERNAL]
            internal = _squared_sum(pred[:, icols] - rows.z) * norm
    return meas, internal


def loss_data(model, rows: DataRows, n_out, lambda_z, params=None):
    meas, internal = data_terms(model, rows, n_out, params, need_internal=lambda_z != 0)
    return meas + lambda_z * internal if lambda_z != 0 else meas


def physics_terms(model, points, config: SettlerConfig, params=None):
    """Unweighted ``(differential, algebraic)`` residual terms, each divided by ``3M``."""
    if len(points) == 0:
        return 0.0, 0.0
    hs, qs = config.scaling.h_scale, config.scaling.q_scale
    y, dy = mlp.jvp_time(model, points, params)
    idx = {n: model.output_index(n) for n in mlp.PINN_OUTPUTS}
    h_hp, h_dp = y[:, idx["h_hp"]], y[:, idx["h_dp"]]
    q_bot, q_top = y[:, idx["q_bot"]], y[:, idx["q_top"]]
    q_c, q_s = y[:, idx["q_c"]], y[:, idx["q_s"]]
    q_in = points[:, 3]
    f_hp, f_dp = volume_balance_rates(
        h_hp * hs, h_dp * hs, q_in * qs, q_bot * qs, q_c * qs, q_s * qs,
        config.geometry, config.dispersion.epsilon_dp, guard=True,
    )
    r_hp = dy[:, idx["h_hp"]] - f_hp * (1.0 / hs)
    r_dp = dy[:, idx["h_dp"]] - f_dp * (1.0 / hs)
    norm = 1.0 / (3 * len(points))
    ode = (_squared_sum(r_hp) + _squared_sum(r_dp)) * norm
    alg = _squared_sum(q_in - q_bot - q_top) * norm
    return ode, alg


def loss_physics(model, points, lambda_g, config: SettlerConfig, params=None):
    ode, alg = physics_terms(model, points, config, params)
    return lambda_g * alg + ode


def loss_init(model, points, params=None):
    """Squared mismatch of both heights at ``t = 0``, divided by ``2K``."""
    if len(points) == 0:
        return 0.0
    pred = mlp.forward(model, points, params)
    cols = [model.output_index("h_hp"), model.output_index("h_dp")]
    return _squared_sum(pred[:, cols] - points[:, 1:3]) * (1.0 / (2 * len(points)))


def loss_terms(model, rows, colloc: CollocationSet, config, n_out, params=None, physics=True):
    """All unweighted loss terms: ``meas``, ``int``, ``ode``, ``alg``, ``init``."""
    meas, internal = data_terms(model, rows, n_out, params)
    ode, alg = physics_terms(model, colloc.physics, config, params) if physics else (0.0, 0.0)
    return {"meas": meas, "int": internal, "ode": ode, "alg": alg, "init": loss_init(model, colloc.init, params)}


def combine(terms, w: LossWeights):
    """``lambda_1*data + lambda_2*physics + init`` from unweighted terms."""
    data = terms["meas"] + w.lambda_z * terms["int"]
    phys = terms["ode"] + w.lambda_g * terms["alg"]
    return w.lambda_1 * data + w.lambda_2 * phys + terms["init"]


def total_loss(model, rows, colloc, config, n_out, weights: LossWeights, params=None, physics=True):
    return combine(loss_terms(model, rows, colloc, config, n_out, params, physics), weights)


# ---------------------------------------------------------------------------
# inverse Dirichlet weighting
# ---------------------------------------------------------------------------


def idw_weights(stds, previous=None, smoothing=IDW_SMOOTHING, clamp=IDW_CLAMP):
    """``max(std)/std_i`` per term, blended with ``previous`` and clamped.

    A zero (or non-finite) std keeps the previous weight (1 if none).
    """
    stds = np.asarray(stds, dtype=float)
    prev = np.ones_like(stds) if previous is None else np.asarray(previous, dtype=float)
    valid = np.isfinite(stds) & (stds > 0)
    if not valid.any():
        return prev.copy()
    with np.errstate(over="ignore"):  # tiny stds overflow to inf and are clamped below
        raw = np.where(valid, stds[valid].max() / np.where(valid, stds, 1.0), prev)
    new = np.where(valid, smoothing * prev + (1.0 - smoothing) * raw, prev)
    return np.clip(new, *clamp)


def idw_update(term_grads: dict, previous: LossWeights, smoothing=IDW_SMOOTHING) -> LossWeights:
    """New loss weights from the parameter gradients of the unweighted terms.

    The rule of :func:`idw_weights` is applied on two levels, following the
    nesting of the total loss.  Inside each group the secondary residual is
    balanced against the primary one (``lambda_z``: internal flows against
    measured outputs, ``lambda_g``: algebraic against differential).  Then the
    data and physics groups, each with its new inner weight, are balanced
    against each other and the initial-condition term, whose weight stays 1.
    """
    p = previous
    std = lambda k: float(np.std(term_grads[k]))  # noqa: E731
    lz, lg = p.lambda_z, p.lambda_g
    if "int" in term_grads:
        lz = idw_weights([std("meas"), std("int")], [1.0, lz], smoothing)[1]
    if "alg" in term_grads:
        lg = idw_weights([std("ode"), std("alg")], [1.0, lg], smoothing)[1]
    groups = {"data": term_grads["meas"] + lz * term_grads.get("int", 0.0),
              "init": term_grads.get("init", 0.0 * term_grads["meas"])}
    prev = [p.lambda_1, 1.0]
    if "ode" in term_grads:
        groups["physics"] = term_grads["ode"] + lg * term_grads.get("alg", 0.0)
        prev.append(p.lambda_2)
    new = idw_weights([np.std(g) for g in groups.values()], prev, smoothing)
    l1 = new[0]
    l2 = new[2] if "ode" in term_grads else p.lambda_2
    return LossWeights(*(float(np.clip(v, *IDW_CLAMP)) for v in (l1, l2, lg, lz)))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(theta, grad, lr, state: AdamState, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; a non-finite gradient skips the step."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        return theta, state
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), state


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    history: list
    n_iter: int
    message: str


def lbfgs_optimize(fun, x0, max_iters, m=10, c1=1e-4, c2=0.9, max_ls=25, gtol=1e-9) -> LbfgsResult:
    """Limited-memory BFGS with a strong Wolfe line search.

    ``fun(x)`` returns ``(f, grad)``.  The line search is scipy's strong Wolfe
    search (bracketing plus zoom); the two-loop recursion and the history
    bookkeeping live here.  The best iterate seen is always returned.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    best_x, best_f = x.copy(), f
    history = [f]
    s_hist, y_hist = [], []
    cache = {}

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fun(z)
        return cache[key]

    message = "max_iters reached"
    k = 0
    for k in range(max_iters):
        if not np.isfinite(f):
            message = "non-finite loss"
            break
        if np.linalg.norm(g) < gtol:
            message = "gradient norm below tolerance"
            break
        alpha = None
        # unit trial step; without curvature pairs the steepest-descent step is
        # shortened so that its first trial moves by at most one in l1 norm
        for attempt in range(2):
            if s_hist:
                d = -_two_loop(g, s_hist, y_hist)
                if g @ d >= 0:
                    s_hist.clear()
                    y_hist.clear()
            if not s_hist:
                d = -g * min(1.0, 1.0 / np.abs(g).sum())
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                alpha, _, _, f_new, _, g_new = line_search(
                    lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, d, gfk=g, old_fval=f,
                    c1=c1, c2=c2, maxiter=max_ls,
                )
            if alpha is not None and g_new is not None and np.isfinite(f_new):
                break
            alpha = None
            if not s_hist:
                break
            s_hist.clear()
            y_hist.clear()
        if alpha is None:
            message = "line search failed"
            break
        x_new = x + alpha * d
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * (y @ y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > m:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
        history.append(best_f)
    else:
        k = max_iters
    return LbfgsResult(best_x, float(best_f), history, k, message)


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return q


# ---------------------------------------------------------------------------
# training pipeline
# ---------------------------------------------------------------------------


class TrainingError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class StageResult:
    model: mlp.MlpModel
    weights: LossWeights
    history: list = field(default_factory=list)
    adam_skipped: int = 0
    lbfgs_message: str = ""


def _uses_physics(model):
    return "q_c" in model.output_names


def train_stage(model: mlp.MlpModel, schedule: TrainSchedule, rows: DataRows, colloc: CollocationSet,
                config: SettlerConfig, weights: LossWeights = None) -> StageResult:
    """Adam (with optional IDW every ``idw_period`` epochs) followed by L-BFGS.

    Weights are frozen during L-BFGS.  A VNN (no internal-flow outputs) trains
    without the physics term.  Fine-tuning forces ``lambda_z = 0``.
    """
    physics = _uses_physics(model)
    n_out = schedule.n_out if physics else 4
    w = weights or LossWeights()
    if schedule.stage == "finetune" or n_out == 4:
        w = replace(w, lambda_z=0.0)
    if not physics:
        w = replace(w, lambda_2=0.0)
    names = ["meas", "init"] + (["int"] if n_out == 6 else []) + (["ode", "alg"] if physics else [])

    def terms_at(params):
        return loss_terms(model, rows, colloc, config, n_out, params, physics)

    def components(terms, weights_now):
        v = {k: float(ad.value(t)) for k, t in terms.items()}
        return {
            "total": float(ad.value(combine(terms, weights_now))),
            "data": v["meas"] + weights_now.lambda_z * v["int"],
            "physics": v["ode"] + weights_now.lambda_g * v["alg"],
            "init": v["init"],
        }

    def value_and_grad(theta, weights_now, per_term=False):
        pvars = [ad.Var(p) for p in model.with_flat(theta).params]
        terms = terms_at(pvars)
        total = combine(terms, weights_now)
        grads = None
        if per_term:
            grads = {n: _flat(ad.grad(terms[n], pvars)) for n in names}
        g = _flat(ad.grad(total, pvars))
        return terms, float(ad.value(total)), g, grads

    history = []
    theta = model.flat()
    state = AdamState.zeros(theta.size)
    for epoch in range(schedule.adam_epochs):
        idw_now = schedule.idw_enabled and epoch % schedule.idw_period == 0
        terms, f, g, term_grads = value_and_grad(theta, w, per_term=idw_now)
        if idw_now:
            w = idw_update(term_grads, w)
            if not physics:
                w = replace(w, lambda_2=0.0)
            if n_out == 4:
                w = replace(w, lambda_z=0.0)
            terms, f, g, _ = value_and_grad(theta, w)
        rec = {"epoch": epoch, "phase": "adam", **components(terms, w), **asdict(w)}
        history.append(rec)
        if not np.isfinite(f):
            raise TrainingError(f"non-finite loss at Adam epoch {epoch}", history)
        theta, state = adam_step(theta, g, schedule.adam_lr, state)

    def fun(z):
        _, f, g, _ = value_and_grad(z, w)
        return f, g

    message = ""
    if schedule.lbfgs_iters > 0:
        res = lbfgs_optimize(fun, theta, schedule.lbfgs_iters * LBFGS_ITERS_PER_EPOCH)
        theta, message = res.x, res.message
        log.info("L-BFGS stopped after %d iterations: %s", res.n_iter, message)
    terms = terms_at(model.with_flat(theta).params)
    history.append({"epoch": schedule.adam_epochs + schedule.lbfgs_iters, "phase": "final",
                    **components(terms, w), **asdict(w)})
    if not np.isfinite(history[-1]["total"]):
        raise TrainingError("non-finite loss after L-BFGS", history)
    meta = dict(model.meta, loss_weights=asdict(w))
    trained = model.with_flat(theta, stage=schedule.stage, meta=meta)
    return StageResult(trained, w, history, state.skipped, message)


def _flat(grads):
    return np.concatenate([np.asarray(g).ravel() for g in grads])


@dataclass
class PipelineData:
    """Everything a member needs: pretraining rows, fine-tuning rows and collocation sets."""

    pretrain_rows: DataRows
    finetune_rows: DataRows
    colloc_pretrain: CollocationSet
    colloc_finetune: CollocationSet


@dataclass
class MemberResult:
    seed: int
    model: mlp.MlpModel = None
    pretrained: mlp.MlpModel = None
    histories: dict = field(default_factory=dict)
    error: str = None


def train_member(seed, data: PipelineData, config: SettlerConfig, kind="pinn", two_stage=True,
                 pretrain: TrainSchedule = None, finetune: TrainSchedule = None) -> MemberResult:
    """One ensemble member through the configured pipeline.

    ``two_stage=False`` is the non-pretrained ablation: the fresh network is
    trained on the fine-tuning rows only, with the pretraining optimizer
    schedule (``n_out = 4``).
    """
    pretrain = pretrain or TrainSchedule.desk_pretrain()
    finetune = finetune or TrainSchedule.desk_finetune()
    model = new_model(config, seed, kind)
    out = MemberResult(seed)
    if two_stage:
        pre = train_stage(model, pretrain, data.pretrain_rows, data.colloc_pretrain, config)
        out.pretrained = pre.model
        out.histories["pretrain"] = pre.history
        fine = train_stage(pre.model, finetune, data.finetune_rows, data.colloc_finetune, config,
                           weights=pre.weights)
    else:
        single = replace(pretrain, stage="finetune", n_out=4)
        fine = train_stage(model, single, data.finetune_rows, data.colloc_finetune, config)
    out.histories["finetune"] = fine.history
    out.model = fine.model
    return out


def resume_stage(model: mlp.MlpModel, schedule: TrainSchedule, rows: DataRows, colloc: CollocationSet,
                 config: SettlerConfig) -> StageResult:
    """One stage starting from the loss weights stored with ``model`` (unit weights if none)."""
    stored = model.meta.get("loss_weights")
    return train_stage(model, schedule, rows, colloc, config, weights=LossWeights(**stored) if stored else None)


def _guarded_member(seed, data, config, member_kw):
    try:
        return train_member(seed, data, config, **member_kw)
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("member %d failed: %s", seed, exc)
        return MemberResult(seed, error=str(exc))


def map_members(fn, tasks, jobs=1):
    """``[fn(t) for t in tasks]``, spread over worker processes when ``jobs > 1``.

    Members share no state, so the result does not depend on ``jobs``.
    """
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def train_ensemble(n_members, data: PipelineData, config: SettlerConfig, base_seed=0, min_survival=0.8,
                   jobs=1, **member_kw):
    """Members differ only in their initialization seed ``base_seed + i``.

    Failed members are recorded; the ensemble is returned if at least
    ``min_survival`` of them finished.
    """
    if n_members < 1:
        raise ConfigurationError("n_members must be >= 1")
    task = partial(_guarded_member, data=data, config=config, member_kw=member_kw)
    results = map_members(task, range(base_seed, base_seed + n_members), jobs)
    check_survival(results, n_members, min_survival)
    return results


def check_survival(results, n_members, min_survival=0.8):
    ok = [r for r in results if getattr(r, "error", None) is None]
    if len(ok) < min_survival * n_members:
        raise TrainingError(f"only {len(ok)} of {n_members} members finished")
    return ok
