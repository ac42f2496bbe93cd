"""File formats, preprocessing, metrics and run manifests.

All tables are comma-separated with a mandatory header row and a decimal
point.  Floats are written with ``repr`` (shortest round-trip form), so a
write/read cycle is value-identical and reruns produce byte-identical files.
Every write goes to a temporary file in the target directory first and is
then renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
import logging
import os
import platform
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, mlp
from .mechanistic import DETECTION_NAMES, GRID_FIELDS, SegmentDataset, TrajectoryDataset

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("tau_s", "q_in_m3s", "q_bot_m3s", "q_top_m3s", "h_hp_m", "h_dp_m")
DETECTION_COLUMNS = DETECTION_NAMES
TRUTH_COLUMNS = ("true_h_hp_m", "true_h_dp_m", "true_q_bot_m3s", "true_q_top_m3s", "true_q_c_m3s",
                 "true_q_s_m3s")
SCHEDULE_COLUMNS = ("start_s", "end_s", "q_in_m3s")
SEGMENT_COLUMNS = ("segment", "t_s", "h_hp0_m", "h_dp0_m", "q_in_m3s", "q_bot0_m3s", "h_hp_m", "h_dp_m",
                   "q_bot_m3s", "q_top_m3s", "q_c_m3s", "q_s_m3s")
ROLLOUT_COLUMNS = ("tau_s", "q_in_m3s", "h_hp_m", "h_dp_m", "n_clipped")
ESTIMATE_COLUMNS = ("tau_s", "q_in_m3s", "q_bot_m3s", "q_top_m3s", "h_hp_m", "h_dp_m", "h_hp_prior_m",
                    "h_dp_prior_m", "q_bot_pred_m3s", "q_top_pred_m3s", "var_h_hp_m2", "cov_h_hp_dp_m2",
                    "var_h_dp_m2", "n_active", "n_clipped")
OUTLET_TRAIN_COLUMNS = ("avg_h_dp_m", "outlet_h_dp_m")
OUTLET_PREDICT_COLUMNS = ("avg_h_dp_m", "outlet_h_dp_m", "extrapolated")
SCHEMA_VERSION = 1


class CsvFormatError(ValueError):
    """Malformed table; ``line`` is 1-based (the header is line 1)."""

    def __init__(self, path, line, message):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {message}" if line else f"{path}: {message}")


# ---------------------------------------------------------------------------
# atomic writes and hashes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generic tables
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def table_text(columns, data: dict) -> str:
    n = len(data[columns[0]]) if columns else 0
    for c in columns:
        if len(data[c]) != n:
            raise ValueError(f"column {c!r} has {len(data[c])} rows, expected {n}")
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for i in range(n):
        w.writerow([_fmt(data[c][i]) for c in columns])
    return buf.getvalue()


def write_table(path, columns, data: dict) -> None:
    atomic_write_text(path, table_text(list(columns), data))


def read_table(path, required=()) -> tuple[list, dict]:
    """Header and float columns of a table; empty cells read as NaN."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CsvFormatError(path, 0, f"not UTF-8 text ({exc.reason})") from None
    rows = list(csv.reader(_stdio.StringIO(text)))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise CsvFormatError(path, 1, "missing header row")
    header = [c.strip() for c in rows[0]]
    if len(set(header)) != len(header):
        raise CsvFormatError(path, 1, "duplicate column names")
    missing = [c for c in required if c not in header]
    if missing:
        raise CsvFormatError(path, 1, f"missing columns {missing}")
    cols = {c: [] for c in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        for c, cell in zip(header, row):
            cell = cell.strip()
            try:
                cols[c].append(float(cell) if cell else np.nan)
            except ValueError:
                raise CsvFormatError(path, lineno, f"column {c!r}: not a number: {cell!r}") from None
    return header, {c: np.array(v, dtype=float) for c, v in cols.items()}


def _check_increasing(path, tau):
    if len(tau) and not np.all(np.isfinite(tau)):
        raise CsvFormatError(path, 2 + int(np.argmin(np.isfinite(tau))), "tau_s must be a number")
    bad = np.nonzero(np.diff(tau) <= 0)[0]
    if len(bad):
        raise CsvFormatError(path, int(bad[0]) + 3, "tau_s must be strictly increasing")


# ---------------------------------------------------------------------------
# trajectories, schedules, segment datasets
# ---------------------------------------------------------------------------


def write_trajectory(path, traj: TrajectoryDataset) -> None:
    cols = list(TRAJECTORY_COLUMNS)
    data = {"tau_s": traj.tau, "q_in_m3s": traj.q_in, "q_bot_m3s": traj.q_bot, "q_top_m3s": traj.q_top,
            "h_hp_m": traj.h_hp, "h_dp_m": traj.h_dp}
    if traj.detections:
        for c in DETECTION_COLUMNS:
            if c in traj.detections:
                cols.append(c)
                data[c] = traj.detections[c]
    truth = dict(traj.truth or {})
    if traj.q_c is not None:
        truth.setdefault("q_c", traj.q_c)
        truth.setdefault("q_s", traj.q_s)
    for c in TRUTH_COLUMNS:
        key = c[len("true_"):].rsplit("_", 1)[0]
        if key in truth:
            cols.append(c)
            data[c] = truth[key]
    write_table(path, cols, data)


def read_trajectory(path) -> TrajectoryDataset:
    header, d = read_table(path, TRAJECTORY_COLUMNS)
    _check_increasing(path, d["tau_s"])
    truth = {c[len("true_"):].rsplit("_", 1)[0]: d[c] for c in TRUTH_COLUMNS if c in header}
    det = {c: d[c] for c in DETECTION_COLUMNS if c in header}
    q_c, q_s = truth.pop("q_c", None), truth.pop("q_s", None)
    return TrajectoryDataset(
        tau=d["tau_s"], q_in=d["q_in_m3s"], q_bot=d["q_bot_m3s"], q_top=d["q_top_m3s"],
        h_hp=d["h_hp_m"], h_dp=d["h_dp_m"], q_c=q_c, q_s=q_s, truth=truth or None,
        detections=det or None,
    )


def write_schedule(path, levels_m3s, hold_s) -> None:
    levels = np.asarray(levels_m3s, dtype=float)
    start = np.arange(len(levels)) * float(hold_s)
    write_table(path, SCHEDULE_COLUMNS, {"start_s": start, "end_s": start + hold_s, "q_in_m3s": levels})


def read_schedule(path) -> np.ndarray:
    """Per-second inlet flow (m^3/s) from a piecewise-constant schedule table."""
    _, d = read_table(path, SCHEDULE_COLUMNS)
    start, end, q = d["start_s"], d["end_s"], d["q_in_m3s"]
    if len(start) == 0:
        return np.zeros(0)
    for i in range(len(start)):
        line = i + 2
        if not (np.isfinite(start[i]) and np.isfinite(end[i]) and np.isfinite(q[i])):
            raise CsvFormatError(path, line, "empty cell")
        if start[i] != int(start[i]) or end[i] != int(end[i]) or end[i] <= start[i]:
            raise CsvFormatError(path, line, "start_s/end_s must be whole seconds with end > start")
        if q[i] < 0:
            raise CsvFormatError(path, line, "q_in_m3s must be >= 0")
        if i and start[i] != end[i - 1]:
            raise CsvFormatError(path, line, "levels must be contiguous")
    return np.repeat(q, (end - start).astype(int))


def schedule_path(trajectory: int) -> Path:
    """Shipped schedule file of a reference trajectory."""
    return Path(__file__).parent / "data" / "schedules" / f"trajectory_{int(trajectory)}.csv"


def write_segments(path, ds: SegmentDataset) -> None:
    n, m = len(ds), len(ds.t)
    data = {
        "segment": np.repeat(np.arange(n), m),
        "t_s": np.tile(ds.t, n),
        "h_hp0_m": np.repeat(ds.h_hp0, m),
        "h_dp0_m": np.repeat(ds.h_dp0, m),
        "q_in_m3s": np.repeat(ds.q_in, m),
        "q_bot0_m3s": np.repeat(ds.q_bot, m),
    }
    for f in GRID_FIELDS:
        unit = "_m" if f.startswith("h_") else "_m3s"
        data[f + unit] = ds.grid[f].ravel()
    write_table(path, SEGMENT_COLUMNS, data)


def read_segments(path) -> SegmentDataset:
    _, d = read_table(path, SEGMENT_COLUMNS)
    seg = d["segment"]
    if len(seg) == 0:
        return SegmentDataset.empty()
    ids, counts = np.unique(seg, return_counts=True)
    m = int(counts[0])
    if np.any(counts != m) or not np.array_equal(seg, np.repeat(np.arange(len(ids)), m)):
        raise CsvFormatError(path, 0, "segments must be numbered 0..n-1 with equal grid length, in order")
    n = len(ids)

    def grid(c):
        return d[c].reshape(n, m)

    first = slice(None, None, m)
    return SegmentDataset(
        t=d["t_s"][:m].copy(), h_hp0=d["h_hp0_m"][first], h_dp0=d["h_dp0_m"][first],
        q_in=d["q_in_m3s"][first], q_bot=d["q_bot0_m3s"][first],
        grid={f: grid(f + ("_m" if f.startswith("h_") else "_m3s")) for f in GRID_FIELDS},
    )


# ---------------------------------------------------------------------------
# rollouts and filter runs
# ---------------------------------------------------------------------------


def _member_columns(data, cols, members_m):
    """Append ``h_hp_m_NNN`` and ``h_dp_m_NNN`` columns from an (n_members, n, 2) array in meters."""
    for j, name in enumerate(("h_hp_m", "h_dp_m")):
        for i in range(members_m.shape[0]):
            c = f"{name}_{i:03d}"
            cols.append(c)
            data[c] = members_m[i, :, j]


def _truth_columns(data, cols, truth, n):
    for name in ("h_hp", "h_dp"):
        if truth and name in truth:
            c = f"true_{name}_m"
            cols.append(c)
            data[c] = np.asarray(truth[name], dtype=float)[:n]


def write_rollout(path, tau, q_in, members_m, clipped, truth=None) -> None:
    """Open-loop rollout table: ensemble mean, member heights and optional truth (meters)."""
    members_m = np.asarray(members_m, dtype=float)
    n = members_m.shape[1]
    cols = list(ROLLOUT_COLUMNS)
    mean = members_m.mean(axis=0)
    data = {"tau_s": np.asarray(tau, dtype=float)[:n], "q_in_m3s": np.asarray(q_in, dtype=float)[:n],
            "h_hp_m": mean[:, 0], "h_dp_m": mean[:, 1], "n_clipped": np.asarray(clipped).sum(axis=0)}
    _member_columns(data, cols, members_m)
    _truth_columns(data, cols, truth, n)
    write_table(path, cols, data)


def write_estimate(path, tau, q_in, est, h_scale, q_scale, truth=None) -> None:
    """Filter table, one row per step (fixed leading columns, see ``ESTIMATE_COLUMNS``).

    Ensemble columns average the members active at that step; covariances
    are converted to m^2.
    """
    runs = est.members
    n = len(est.mean)

    def stack(attr):
        return np.array([getattr(r, attr) for r in runs])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN steps (step 0, failed members)
        prior = np.nanmean(stack("x_prior"), axis=0) * h_scale
        y_pred = np.nanmean(stack("y_pred"), axis=0) * q_scale
        P = np.nanmean(stack("P"), axis=0) * h_scale ** 2
    y_meas = runs[0].y_meas * q_scale
    clipped = stack("clipped")
    data = {
        "tau_s": np.asarray(tau, dtype=float)[:n], "q_in_m3s": np.asarray(q_in, dtype=float)[:n],
        "q_bot_m3s": y_meas[:, 0], "q_top_m3s": y_meas[:, 1],
        "h_hp_m": est.mean[:, 0] * h_scale, "h_dp_m": est.mean[:, 1] * h_scale,
        "h_hp_prior_m": prior[:, 0], "h_dp_prior_m": prior[:, 1],
        "q_bot_pred_m3s": y_pred[:, 0], "q_top_pred_m3s": y_pred[:, 1],
        "var_h_hp_m2": P[:, 0, 0], "cov_h_hp_dp_m2": P[:, 0, 1], "var_h_dp_m2": P[:, 1, 1],
        "n_active": est.active.sum(axis=1), "n_clipped": clipped.sum(axis=0),
    }
    cols = list(ESTIMATE_COLUMNS)
    _member_columns(data, cols, stack("x_post") * h_scale)
    _truth_columns(data, cols, truth, n)
    write_table(path, cols, data)


def read_outlet_pairs(path):
    """Average/outlet DPZ pairs from an outlet table or a trajectory with detection heights.

    A trajectory contributes its ``h_dp_m`` column as the average and the
    last detection position ``h_4_3`` as the outlet height.
    """
    header, d = read_table(path)
    if all(c in header for c in OUTLET_TRAIN_COLUMNS):
        avg, out = d["avg_h_dp_m"], d["outlet_h_dp_m"]
    elif "h_dp_m" in header and "h_4_3" in header:
        avg, out = d["h_dp_m"], d["h_4_3"]
    else:
        raise CsvFormatError(path, 1, "need avg_h_dp_m/outlet_h_dp_m or h_dp_m/h_4_3 columns")
    keep = np.isfinite(avg) & np.isfinite(out)
    return avg[keep], out[keep]


# ---------------------------------------------------------------------------
# ensembles on disk
# ---------------------------------------------------------------------------


def save_ensemble(directory, models, info: dict = None) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob(f"member_*{mlp.FILE_SUFFIX}"):
        stale.unlink()
    names = []
    for i, m in enumerate(models):
        name = f"member_{i:03d}{mlp.FILE_SUFFIX}"
        mlp.save_model(m, directory / name)
        names.append(name)
    index = {"schema": SCHEMA_VERSION, "members": names, **(info or {})}
    atomic_write_text(directory / "ensemble.json", json.dumps(index, indent=1, sort_keys=True))
    return [directory / n for n in names]


def load_ensemble(directory) -> list:
    directory = Path(directory)
    index_path = directory / "ensemble.json"
    if index_path.exists():
        names = json.loads(index_path.read_text())["members"]
    else:
        names = sorted(p.name for p in directory.glob(f"*{mlp.FILE_SUFFIX}"))
    if not names:
        raise FileNotFoundError(f"no models in {directory}")
    return [mlp.load_model(directory / n) for n in names]


# ---------------------------------------------------------------------------
# preprocessing of irregular height channels
# ---------------------------------------------------------------------------


@dataclass
class Preprocessed:
    tau: np.ndarray
    channels: dict  # name -> values on tau (NaN outside the channel's coverage)
    average: np.ndarray  # mean of the available averaged channels per step
    bridged: dict  # name -> bool, True where no raw sample lies within max_gap
    dropped: list = field(default_factory=list)


def preprocess(channels: dict, average_over=None, max_gap=1.0) -> Preprocessed:
    """Interpolate irregular samples onto the whole-second grid and average positions.

    ``channels`` maps a name to ``(tau, values)``.  Each channel is linearly
    interpolated inside its own sampled range and left NaN outside it.  Grid
    points farther than ``max_gap`` seconds from any raw sample are flagged as
    bridged.  ``average`` is the mean over ``average_over`` (default: all
    channels) of the channels available at each step.
    """
    usable, dropped = {}, []
    for name, (tau, val) in channels.items():
        tau, val = np.asarray(tau, dtype=float), np.asarray(val, dtype=float)
        ok = np.isfinite(tau) & np.isfinite(val)
        tau, val = tau[ok], val[ok]
        if len(tau) < 2:
            log.warning("channel %s has fewer than two samples and is dropped", name)
            dropped.append(name)
            continue
        order = np.argsort(tau, kind="stable")
        usable[name] = (tau[order], val[order])
    if not usable:
        return Preprocessed(np.zeros(0), {}, np.zeros(0), {}, dropped)
    t0 = np.ceil(min(t[0] for t, _ in usable.values()))
    t1 = np.floor(max(t[-1] for t, _ in usable.values()))
    grid = np.arange(t0, t1 + 1.0)
    out, bridged = {}, {}
    for name, (tau, val) in usable.items():
        v = np.interp(grid, tau, val, left=np.nan, right=np.nan)
        out[name] = v
        idx = np.clip(np.searchsorted(tau, grid), 1, len(tau) - 1)
        nearest = np.minimum(np.abs(grid - tau[idx - 1]), np.abs(tau[idx] - grid))
        bridged[name] = np.isfinite(v) & (nearest > max_gap)
    names = [n for n in (average_over or list(out)) if n in out]
    stack = np.array([out[n] for n in names]) if names else np.full((1, len(grid)), np.nan)
    count = np.isfinite(stack).sum(axis=0)
    total = np.nansum(stack, axis=0)
    average = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return Preprocessed(grid, out, average, bridged, dropped)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def convergence_step(error, threshold):
    """First step after which ``|error| < threshold`` holds to the end, or ``None``."""
    bad = ~(np.abs(np.asarray(error, dtype=float)) < threshold)
    if not bad.any():
        return 0
    last = int(np.nonzero(bad)[0][-1])
    return None if last == len(bad) - 1 else last + 1


@dataclass
class VariableMetrics:
    rmse: float
    max_abs: float
    convergence: object  # step index or "never"


@dataclass
class MetricsReport:
    threshold: float
    n_steps: int
    ensemble: dict  # variable -> VariableMetrics
    members: dict = field(default_factory=dict)  # variable -> list[VariableMetrics]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _metrics(err, threshold):
    err = np.asarray(err, dtype=float)
    c = convergence_step(err, threshold)
    return VariableMetrics(float(np.sqrt(np.mean(err ** 2))) if len(err) else 0.0,
                           float(np.max(np.abs(err))) if len(err) else 0.0,
                           "never" if c is None else c)


def compute_metrics(pred: dict, truth: dict, members: dict = None, threshold=0.005) -> MetricsReport:
    """Errors of ensemble-mean (``pred``) and per-member predictions against ``truth``."""
    ens, per = {}, {}
    n = 0
    for name, p in pred.items():
        t = np.asarray(truth[name], dtype=float)
        p = np.asarray(p, dtype=float)
        if p.shape != t.shape:
            raise ValueError(f"{name}: prediction has {p.shape}, truth {t.shape}")
        n = len(t)
        ens[name] = _metrics(p - t, threshold)
        if members and name in members:
            per[name] = [_metrics(np.asarray(m, dtype=float) - t, threshold) for m in members[name]]
    return MetricsReport(float(threshold), n, ens, per)


def metrics_from_tables(pred_path, truth_path, variables=("h_hp_m", "h_dp_m"), threshold=0.005) -> MetricsReport:
    """Compare a prediction table against a trajectory table on their common steps.

    Truth columns ``true_<var>`` are preferred over the measured ``<var>``.
    Member columns are named ``<var>_NNN``.
    """
    ph, p = read_table(pred_path, ("tau_s",))
    th, t = read_table(truth_path, ("tau_s",))
    common, ip, it = np.intersect1d(p["tau_s"], t["tau_s"], return_indices=True)
    if len(common) == 0:
        raise ValueError("prediction and truth share no time stamps")
    pred, truth, members = {}, {}, {}
    for v in variables:
        if v not in ph:
            continue
        tcol = "true_" + v if "true_" + v in th else v
        if tcol not in th:
            raise CsvFormatError(truth_path, 1, f"missing column {v!r}")
        pred[v], truth[v] = p[v][ip], t[tcol][it]
        mcols = sorted(c for c in ph if c.startswith(v + "_") and c[len(v) + 1:].isdigit())
        if mcols:
            members[v] = [p[c][ip] for c in mcols]
    if not pred:
        raise CsvFormatError(pred_path, 1, f"none of {list(variables)} present")
    return compute_metrics(pred, truth, members, threshold)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def environment_versions() -> dict:
    import scipy

    return {"settlerpinn": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def build_manifest(command, argv, config_digest, seeds: dict, inputs=(), outputs=()) -> dict:
    def hashes(paths):
        out = {}
        for p in paths:
            p = Path(p)
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            for q in files:
                if q.name.endswith(".manifest.json") or q.name == "manifest.json":
                    continue
                out[str(q)] = file_sha256(q)
        return out

    return {
        "schema": SCHEMA_VERSION,
        "command": command,
        "argv": list(argv),
        "config_sha256": config_digest,
        "seeds": seeds,
        "versions": environment_versions(),
        "inputs": hashes(inputs),
        "outputs": hashes(outputs),
    }


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(manifest: dict, out) -> Path:
    path = manifest_path(out)
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != SCHEMA_VERSION or "argv" not in data:
        raise ValueError(f"{path}: not a run manifest")
    return data
