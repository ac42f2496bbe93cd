"""Command line interface, ``settlerpinn <command> [options]``.

Every command writes its outputs atomically plus a run manifest next to them
(argv, working directory, config digest, seeds, package versions, input and
output hashes); ``replay`` reruns a manifest and checks the output hashes.

Failures print one JSON object ``{"error": <category>, "message": ...}`` on
stderr and exit with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import contextlib
import io as _stdio
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from . import estimation as es
from . import io
from . import mechanistic as mm
from . import mlp
from . import training as tr
from .core import ConfigurationError, SettlerState, load_config

log = logging.getLogger("settlerpinn")

CONFIG_ENV = "SETTLERPINN_CONFIG"
EXIT_CODES = {"internal": 1, "usage": 2, "config": 3, "input": 4, "numerical": 5, "io": 6, "mismatch": 7}


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def error_category(exc) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigurationError):
        return "config"
    if isinstance(exc, (io.CsvFormatError, mlp.ModelFormatError, mm.DomainError, json.JSONDecodeError,
                        FileNotFoundError, IsADirectoryError, NotADirectoryError)):
        return "input"
    if isinstance(exc, (mm.DivergenceError, mm.SingularityError, tr.TrainingError, es.FilterStepError,
                        np.linalg.LinAlgError, FloatingPointError)):
        return "numerical"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


@dataclass
class RunRecord:
    """What a command did, for its manifest."""

    manifest_at: Path
    outputs: list
    inputs: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    result: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _pair(text):
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _segments_file(path):
    path = Path(path)
    return path / "segments.csv" if path.is_dir() else path


def _metrics_path(out):
    return Path(out).with_suffix(".metrics.json")


def _stage_schedule(args, stage):
    if stage == "pretrain":
        s = tr.TrainSchedule.desk_pretrain() if args.desk else tr.TrainSchedule.pretrain()
    else:
        s = tr.TrainSchedule.desk_finetune() if args.desk else tr.TrainSchedule.finetune()
    changes = {}
    if args.adam_epochs is not None:
        changes["adam_epochs"] = args.adam_epochs
    if args.lbfgs_epochs is not None:
        changes["lbfgs_iters"] = args.lbfgs_epochs
    if args.idw is not None:
        changes["idw_enabled"] = args.idw
    return replace(s, **changes)


def _collocation(args, config, default_seed):
    n_physics = args.n_physics if args.n_physics is not None else (2000 if args.desk else 10000)
    n_init = args.n_init if args.n_init is not None else (200 if args.desk else 1000)
    seed = default_seed if args.colloc_seed is None else args.colloc_seed
    return tr.sample_collocation(n_physics, n_init, config, seed=seed), {"collocation": seed}


def _fit(model, schedule, rows, colloc, config):
    """Worker task: one stage for one member; failures come back as messages."""
    try:
        return tr.resume_stage(model, schedule, rows, colloc, config), None
    except (tr.TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, str(exc)


def _train_and_save(models, schedule, rows, colloc, config, args, out, info):
    results = tr.map_members(partial(_fit, schedule=schedule, rows=rows, colloc=colloc, config=config),
                             models, args.jobs)
    seeds = [m.seed for m in models]
    failed = {str(s): err for s, (_, err) in zip(seeds, results) if err is not None}
    for s, err in failed.items():
        log.warning("member %s failed: %s", s, err)
    tr.check_survival([r for r, _ in results if r is not None], len(models), args.min_survival)
    kept = [(s, r) for s, (r, _) in zip(seeds, results) if r is not None]
    hist_cols = ("member", "epoch", "total", "data", "physics", "init", "lambda_1", "lambda_2", "lambda_g",
                 "lambda_z")
    hist = {c: [] for c in hist_cols}
    loss = []
    for i, (_, r) in enumerate(kept):
        for rec in r.history:
            hist["member"].append(i)
            for c in hist_cols[1:]:
                hist[c].append(rec[c])
        loss.append({"initial": r.history[0]["total"], "final": r.history[-1]["total"],
                     "lbfgs": r.lbfgs_message})
    out = Path(out)
    io.save_ensemble(out, [r.model for _, r in kept], {
        **info, "seeds": [s for s, _ in kept], "failed": failed, "schedule": asdict(schedule), "loss": loss})
    io.write_table(out / "history.csv", hist_cols, hist)
    return {"members": len(kept), "failed": len(failed)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(args, config):
    ds = mm.generate_pretrain_dataset(args.segments, config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "segments.csv"
    io.write_segments(path, ds)
    return RunRecord(out, [path], seeds={"segments": args.seed},
                     result={"segments": len(ds), "dropped": int(getattr(ds, "n_dropped", 0) or 0)})


def cmd_make_twin(args, config):
    sched_file = Path(args.schedule) if args.schedule else io.schedule_path(args.trajectory)
    sched = io.read_schedule(sched_file)
    if len(sched) == 0:
        raise CliError("input", f"{sched_file}: empty schedule")
    initial = SettlerState(*args.initial) if args.initial else mm.steady_state(sched[0], config)
    traj = mm.simulate_trajectory(initial, sched, config, noise_h=args.noise_h, noise_q=args.noise_q,
                                  seed=args.seed)
    if args.detections:
        traj.detections = mm.detection_heights(traj.true("h_dp"), noise=args.noise_h, seed=args.seed + 1)
    io.write_trajectory(args.out, traj)
    result = {"steps": len(traj)}
    if traj.diverged_at is not None:
        result["diverged_at_s"] = traj.diverged_at
    return RunRecord(Path(args.out), [args.out], [sched_file], {"noise": args.seed}, result)


def cmd_pretrain(args, config):
    data = _segments_file(args.data)
    rows = tr.rows_from_segments(io.read_segments(data), config)
    colloc, seeds = _collocation(args, config, default_seed=2)
    schedule = _stage_schedule(args, "pretrain")
    models = [tr.new_model(config, args.seed + i, args.kind) for i in range(args.members)]
    info = {"stage": "pretrain", "kind": args.kind}
    result = _train_and_save(models, schedule, rows, colloc, config, args, args.out, info)
    return RunRecord(Path(args.out), [args.out], [data], {**seeds, "members": args.seed}, result)


def cmd_finetune(args, config):
    traj = io.read_trajectory(args.data)
    rows = tr.rows_from_trajectory(traj, config)
    colloc, seeds = _collocation(args, config, default_seed=3)
    inputs = [args.data]
    if args.pretrained:
        models = io.load_ensemble(args.pretrained)
        if args.members is not None:
            models = models[:args.members]
        schedule = _stage_schedule(args, "finetune")
        info = {"stage": "finetune", "kind": models[0].meta.get("kind", "pinn"), "pretrained": True}
        inputs.append(args.pretrained)
    else:
        # ablation: fresh networks, the pretraining optimizer schedule on the fine-tuning rows
        n = 40 if args.members is None else args.members
        models = [tr.new_model(config, args.seed + i, args.kind) for i in range(n)]
        schedule = replace(_stage_schedule(args, "pretrain"), stage="finetune", n_out=4)
        info = {"stage": "finetune", "kind": args.kind, "pretrained": False}
        seeds["members"] = args.seed
    result = _train_and_save(models, schedule, rows, colloc, config, args, args.out, info)
    return RunRecord(Path(args.out), [args.out], inputs, seeds, result)


def _load_run_inputs(args, config):
    models = io.load_ensemble(args.models)
    traj = io.read_trajectory(args.trajectory)
    if len(traj) < 2:
        raise CliError("input", f"{args.trajectory}: need at least two time steps")
    sc = config.scaling
    return models, traj, traj.q_in / sc.q_scale, sc


def _write_metrics(out, trajectory_path):
    report = io.metrics_from_tables(out, trajectory_path)
    path = _metrics_path(out)
    io.atomic_write_text(path, report.to_json())
    return path, {v: m.rmse for v, m in report.ensemble.items()}


def cmd_simulate(args, config):
    models, traj, u, sc = _load_run_inputs(args, config)
    seeds = {}
    if args.initial == "measured":
        x0 = np.array([traj.h_hp[0], traj.h_dp[0]]) / sc.h_scale
    elif args.initial == "truth":
        if not traj.truth:
            raise CliError("input", f"{args.trajectory}: no truth columns for --initial truth")
        x0 = np.array([traj.truth["h_hp"][0], traj.truth["h_dp"][0]]) / sc.h_scale
    else:
        y0 = np.array([traj.q_bot[0], traj.q_top[0]]) / sc.q_scale
        x0 = es.initial_state_search(models, y0, u[0], config.filter.n_init_samples, args.seed,
                                     es.state_bounds(config))
        seeds["search"] = args.seed
    bounds = es.state_bounds(config) if config.filter.clip_to_bounds else None
    ro = es.chain_forward(models, x0, u[:-1], bounds=bounds)
    io.write_rollout(args.out, traj.tau, traj.q_in, ro.members * sc.h_scale, ro.clipped, traj.truth)
    outputs, result = [args.out], {}
    if traj.truth:
        path, result["rmse_m"] = _write_metrics(args.out, args.trajectory)
        outputs.append(path)
    return RunRecord(Path(args.out), outputs, [args.models, args.trajectory], seeds, result)


def cmd_estimate(args, config):
    models, traj, u, sc = _load_run_inputs(args, config)
    y = np.column_stack([traj.q_bot, traj.q_top]) / sc.q_scale
    x0 = None if args.x0 is None else np.array(args.x0) / sc.h_scale
    est = es.run_filter(models, u, y, config, x0=x0, seed=args.seed)
    io.write_estimate(args.out, traj.tau, traj.q_in, est, sc.h_scale, sc.q_scale, traj.truth)
    outputs = [args.out]
    result = {"dropped_members": [i for i, r in enumerate(est.members) if r.failed_at is not None]}
    if traj.truth:
        path, result["rmse_m"] = _write_metrics(args.out, args.trajectory)
        outputs.append(path)
    return RunRecord(Path(args.out), outputs, [args.models, args.trajectory], {"search": args.seed}, result)


def cmd_outlet_dpz(args, config):
    if args.train:
        avg, out = io.read_outlet_pairs(args.train)
        inputs = [args.train]
        val = (None, None)
        if args.val:
            val = io.read_outlet_pairs(args.val)
            inputs.append(args.val)
        fit = es.outlet_dpz_train(avg, out, *val, seed=args.seed, max_epochs=args.max_epochs,
                                  patience=args.patience)
        mlp.save_model(fit.model, args.out)
        result = {k: v for k, v in asdict(fit).items() if k != "model"}
        return RunRecord(Path(args.out), [args.out], inputs, {"init": args.seed}, result)
    if not args.input:
        raise CliError("usage", "outlet-dpz --predict needs --input")
    model = mlp.load_model(args.predict)
    header, d = io.read_table(args.input)
    col = "avg_h_dp_m" if "avg_h_dp_m" in header else "h_dp_m"
    if col not in header:
        raise io.CsvFormatError(args.input, 1, "need an avg_h_dp_m or h_dp_m column")
    pred = es.outlet_dpz_predict(model, d[col])
    cols = (["tau_s"] if "tau_s" in header else []) + list(io.OUTLET_PREDICT_COLUMNS)
    data = {"avg_h_dp_m": d[col], "outlet_h_dp_m": pred.values, "extrapolated": pred.extrapolated}
    if "tau_s" in header:
        data["tau_s"] = d["tau_s"]
    io.write_table(args.out, cols, data)
    return RunRecord(Path(args.out), [args.out], [args.predict, args.input],
                     result={"extrapolated": int(pred.extrapolated.sum())})


def cmd_evaluate(args, config):
    report = io.metrics_from_tables(args.pred, args.truth, threshold=args.threshold)
    io.atomic_write_text(args.out, report.to_json())
    return RunRecord(Path(args.out), [args.out], [args.pred, args.truth],
                     result={v: m.rmse for v, m in report.ensemble.items()})


_PLOT_VARIABLES = (("h_hp_m", "heavy-phase height / mm"), ("h_dp_m", "DPZ height / mm"))


def plot_run(run_dir, out_dir) -> list:
    """Figure tables and SVGs for every rollout or filter table in ``run_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "settlerpinn", "svg.fonttype": "none"}):
        for table in sorted(Path(run_dir).glob("*.csv")):
            header, d = io.read_table(table)
            for var, label in _PLOT_VARIABLES:
                members = [c for c in header if c.startswith(var + "_") and c[len(var) + 1:].isdigit()]
                if "tau_s" not in header or var not in header or not members:
                    continue
                tau = d["tau_s"]
                cols, data = ["tau_s"], {"tau_s": tau}
                truth = d.get("true_" + var)
                if truth is not None:
                    cols.append("truth")
                    data["truth"] = truth
                cols.append("mean")
                data["mean"] = d[var]
                for c in members:
                    name = "member_" + c[len(var) + 1:]
                    cols.append(name)
                    data[name] = d[c]
                stem = f"{table.stem}_{var[:-2]}"
                io.write_table(out_dir / f"{stem}.csv", cols, data)

                fig, ax = plt.subplots(figsize=(6.0, 3.2))
                for c in members:
                    ax.plot(tau, 1e3 * d[c], color="tab:blue", alpha=0.2, lw=0.6)
                if truth is not None:
                    ax.plot(tau, 1e3 * truth, color="black", lw=1.2, label="truth")
                ax.plot(tau, 1e3 * d[var], color="tab:red", lw=1.2, label="ensemble mean")
                ax.set_xlabel("time / s")
                ax.set_ylabel(label)
                ax.legend(frameon=False, fontsize=8)
                fig.tight_layout()
                buf = _stdio.BytesIO()
                fig.savefig(buf, format="svg", metadata={"Date": None})
                plt.close(fig)
                io.atomic_write_bytes(out_dir / f"{stem}.svg", buf.getvalue())
                written += [out_dir / f"{stem}.csv", out_dir / f"{stem}.svg"]
    return written


def cmd_plot(args, config):
    if not Path(args.run).is_dir():
        raise CliError("input", f"{args.run}: not a directory")
    written = plot_run(args.run, args.out)
    if not written:
        log.warning("no rollout or filter tables with member columns in %s", args.run)
    return RunRecord(Path(args.out), [args.out], [args.run], result={"figures": len(written) // 2})


def cmd_replay(args, config):
    try:
        manifest = io.read_manifest(args.manifest)
    except (ValueError, KeyError) as exc:
        raise CliError("input", str(exc)) from None
    with _chdir(manifest.get("cwd", ".")):
        code = main(manifest["argv"])
        if code != 0:
            raise CliError("mismatch", f"replayed command exited with code {code}")
        changed = sorted(p for p, h in manifest["outputs"].items()
                         if (args.all_outputs or p.endswith(".csv"))
                         and (not Path(p).exists() or io.file_sha256(p) != h))
    if changed and args.check:
        raise CliError("mismatch", f"outputs differ from the manifest: {changed}")
    print(json.dumps({"replayed": manifest["command"], "changed": changed}))
    return None


@contextlib.contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help=f"TOML config file (default: ${CONFIG_ENV}, else built-in defaults)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")

    training = _Parser(add_help=False)
    training.add_argument("--out", required=True, help="output ensemble directory")
    training.add_argument("--seed", type=int, default=0, help="member i uses initialization seed SEED+i")
    training.add_argument("--kind", choices=("pinn", "vnn"), default="pinn",
                          help="vnn drops the physics loss and the internal-flow outputs")
    training.add_argument("--desk", action="store_true",
                          help="desk-scale schedule and collocation sizes instead of the full ones")
    training.add_argument("--adam-epochs", type=int)
    training.add_argument("--lbfgs-epochs", type=int,
                          help=f"L-BFGS epochs of up to {tr.LBFGS_ITERS_PER_EPOCH} iterations each")
    idw = training.add_mutually_exclusive_group()
    idw.add_argument("--idw", dest="idw", action="store_true", default=None, help="enable loss balancing")
    idw.add_argument("--no-idw", dest="idw", action="store_false")
    training.add_argument("--n-physics", type=int, help="physics collocation points")
    training.add_argument("--n-init", type=int, help="initial-condition collocation points")
    training.add_argument("--colloc-seed", type=int)
    training.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    training.add_argument("--min-survival", type=float, default=0.8,
                          help="fail unless this fraction of members finishes")

    parser = _Parser(prog="settlerpinn", description=__doc__.split("\n\n")[0],
                     epilog=f"Exit codes: {', '.join(f'{v} {k}' for k, v in EXIT_CODES.items())}.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help, parents=(common,)):
        p = sub.add_parser(name, help=help, description=help, parents=list(parents))
        p.set_defaults(func=func)
        return p

    p = add("generate-data", cmd_generate_data, "simulate 1 s mechanistic segments for pretraining")
    p.add_argument("--segments", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (segments.csv)")

    p = add("make-twin", cmd_make_twin, "synthetic measured trajectory for a piecewise-constant inlet schedule")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--schedule", help="schedule CSV (start_s, end_s, q_in_m3s)")
    src.add_argument("--trajectory", type=int, choices=sorted(mm.REFERENCE_TRAJECTORIES),
                     help="shipped schedule number")
    p.add_argument("--noise-h", type=float, default=0.0, help="height noise std, m")
    p.add_argument("--noise-q", type=float, default=0.0, help="flow noise std, m^3/s")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--initial", type=_pair, help="H_HP,H_DP in m (default: steady state of the first level)")
    p.add_argument("--detections", action="store_true", help="add the eight detection-height columns")
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "pretrain an ensemble on mechanistic segments", (common, training))
    p.add_argument("--data", required=True, help="segments.csv or the generate-data output directory")
    p.add_argument("--members", type=int, default=40)

    p = add("finetune", cmd_finetune, "fine-tune an ensemble on a measured trajectory (or train from scratch)",
            (common, training))
    p.add_argument("--data", required=True, help="trajectory CSV")
    p.add_argument("--pretrained", help="pretrained ensemble directory; omit for the non-pretrained ablation")
    p.add_argument("--members", type=int, help="number of members (default: all pretrained, else 40)")

    p = add("simulate", cmd_simulate, "open-loop chained rollout of an ensemble")
    p.add_argument("--models", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--initial", choices=("measured", "truth", "search"), default="measured")
    p.add_argument("--seed", type=int, default=0, help="seed of the initial-state search")
    p.add_argument("--out", required=True)

    p = add("estimate", cmd_estimate, "ensemble extended Kalman filter on measured outlet flows")
    p.add_argument("--models", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--x0", type=_pair, help="H_HP,H_DP in m (default: initial-state search)")
    p.add_argument("--seed", type=int, default=0, help="seed of the initial-state search")
    p.add_argument("--out", required=True)

    p = add("outlet-dpz", cmd_outlet_dpz, "train or apply the average-to-outlet DPZ height network")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--train", metavar="DATA", help="avg_h_dp_m/outlet_h_dp_m table or trajectory with h_4_3")
    mode.add_argument("--predict", metavar="MODEL")
    p.add_argument("--val", help="validation table (default: trailing 20 %% of the training data)")
    p.add_argument("--input", help="table with avg_h_dp_m or h_dp_m (for --predict)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "error metrics of a prediction table against a trajectory")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--threshold", type=float, default=0.005, help="convergence threshold, m")
    p.add_argument("--out", required=True)

    p = add("plot", cmd_plot, "figure tables and SVGs for the rollout and filter tables in a directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)

    p = add("replay", cmd_replay, "rerun a command from its manifest and compare the outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-check", dest="check", action="store_false", help="report differences only")
    p.add_argument("--all-outputs", action="store_true", help="compare every output, not only CSV tables")
    return parser


def _fail(exc) -> int:
    category = error_category(exc)
    if category == "internal":
        log.debug("unexpected error", exc_info=exc)
    print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc)
    if not logging.getLogger().handlers:
        logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel([logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)])
    recorded = list(argv)
    try:
        config_path = args.config or os.environ.get(CONFIG_ENV) or None
        if config_path and not args.config:
            recorded += ["--config", config_path]
        config = load_config(config_path)
        run = args.func(args, config)
        if run is not None:
            inputs = list(run.inputs) + ([config_path] if config_path else [])
            manifest = io.build_manifest(args.command, recorded, config.digest(), run.seeds, inputs, run.outputs)
            manifest["cwd"] = os.getcwd()
            manifest["result"] = run.result
            io.write_manifest(manifest, run.manifest_at)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        return _fail(exc)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
