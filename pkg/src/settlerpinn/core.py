"""Domain types, configuration, variable bounds and unit scaling.

Physical units (m, m^3/s) are only used at the I/O boundary.  Everything the
networks and the filter see is in *scaled* units: heights divided by the
separator height and flows divided by a reference flow rate.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy import special

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class ConfigurationError(ValueError):
    """Raised for invalid configuration values (bounds, variants, sizes)."""


def _check_finite(obj, names):
    for name in names:
        value = getattr(obj, name)
        if not math.isfinite(value):
            raise ValueError(f"{type(obj).__name__}.{name} must be finite, got {value!r}")


def _check_nonnegative(obj, names):
    for name in names:
        if getattr(obj, name) < 0:
            raise ValueError(f"{type(obj).__name__}.{name} must be >= 0")


# ---------------------------------------------------------------------------
# Configuration records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SettlerGeometry:
    length: float = 1.0  # m, effective length set by the weir
    radius: float = 0.1  # m

    def __post_init__(self):
        if not (self.length > 0 and self.radius > 0):
            raise ConfigurationError("geometry: length and radius must be > 0")

    @property
    def height_sep(self) -> float:
        return 2.0 * self.radius


@dataclass(frozen=True)
class PhysicalProperties:
    """Saturated water / 1-octanol at 30 degC."""

    rho_heavy: float = 996.0  # kg/m^3
    rho_light: float = 825.0  # kg/m^3
    eta_hp: float = 0.82e-3  # Pa s
    gamma: float = 8.2e-3  # N/m

    def __post_init__(self):
        for name in ("rho_heavy", "rho_light", "eta_hp", "gamma"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"properties: {name} must be > 0")
        if self.delta_rho <= 0:
            raise ConfigurationError("properties: rho_heavy must exceed rho_light")

    @property
    def delta_rho(self) -> float:
        return self.rho_heavy - self.rho_light


@dataclass(frozen=True)
class DispersionParams:
    epsilon_in: float = 0.5  # feed phase fraction
    epsilon_dp: float = 0.9  # DPZ hold-up
    d32_in: float = 0.5e-3  # m, only used by the synthetic submodels
    sigma_selfsimilar: float = 0.32
    n_swarm: float = 2.0

    def __post_init__(self):
        if not 0 < self.epsilon_in < 1:
            raise ConfigurationError("dispersion: 0 < epsilon_in < 1 required")
        if not 0 < self.epsilon_dp <= 1:
            raise ConfigurationError("dispersion: 0 < epsilon_dp <= 1 required")
        if not self.d32_in > 0:
            raise ConfigurationError("dispersion: d32_in must be > 0")


@dataclass(frozen=True)
class ScalingConstants:
    h_scale: float = 0.2  # m, separator height
    q_scale: float = 1e-3  # m^3/s

    def __post_init__(self):
        if not (self.h_scale > 0 and self.q_scale > 0):
            raise ConfigurationError("scaling constants must be > 0")


@dataclass(frozen=True)
class Bound:
    lb: float
    ub: float

    def __post_init__(self):
        if not self.lb < self.ub:
            raise ConfigurationError(f"bound requires lb < ub, got [{self.lb}, {self.ub}]")

    def contains(self, other: "Bound") -> bool:
        return self.lb <= other.lb and other.ub <= self.ub


BOUND_VARIABLES = ("h_hp", "h_dp", "q_in", "q_top", "q_bot")

# Operating ranges of the pilot plant, heights in m and flows in m^3/s.
_INTERPOLATION = {
    "h_hp": (0.071, 0.091),
    "h_dp": (0.023, 0.059),
    "q_in": (0.245e-3, 0.563e-3),
    "q_top": (0.105e-3, 0.286e-3),
    "q_bot": (0.117e-3, 0.295e-3),
}
_EXTRAPOLATION = {
    "h_hp": (0.067, 0.100),
    "h_dp": (0.019, 0.069),
    "q_in": (0.175e-3, 0.644e-3),
    "q_top": (0.069e-3, 0.321e-3),
    "q_bot": (0.083e-3, 0.356e-3),
}


@dataclass(frozen=True)
class VariableBounds:
    interpolation: Mapping[str, Bound]
    extrapolation: Mapping[str, Bound]

    def __post_init__(self):
        for name in BOUND_VARIABLES:
            if name not in self.interpolation or name not in self.extrapolation:
                raise ConfigurationError(f"bounds: missing variable {name!r}")
            if not self.extrapolation[name].contains(self.interpolation[name]):
                raise ConfigurationError(
                    f"bounds: interpolation interval of {name!r} must lie inside extrapolation interval"
                )

    @classmethod
    def default(cls) -> "VariableBounds":
        return cls(
            interpolation={k: Bound(*v) for k, v in _INTERPOLATION.items()},
            extrapolation={k: Bound(*v) for k, v in _EXTRAPOLATION.items()},
        )

    def get(self, name: str, kind: str = "extrapolation") -> Bound:
        table = {"interpolation": self.interpolation, "extrapolation": self.extrapolation}[kind]
        return table[name]


@dataclass(frozen=True)
class SubmodelSpec:
    """Coalescence / sedimentation closure used by the mechanistic model.

    Variants and their parameters (SI units):

    ``constant``
        ``q_c``, ``q_s`` in m^3/s.
    ``affine``
        ``q_s = s0 + s1*h_HP`` and ``q_c = c0 + c1*h_HP + c2*h_DP``.
    ``saturating``
        ``q_s = k_s*A(h_HP)*(1 - h_HP/2r)**n_swarm`` and
        ``q_c = k_c*A(h_HP + h_DP)*h_DP/(h_DP + h_half)`` where ``A(h)`` is the
        horizontal interface area at height ``h``.
    """

    variant: str = "saturating"
    params: Mapping[str, float] = field(default_factory=dict)

    DEFAULTS = {
        "constant": {"q_c": 0.0, "q_s": 0.0},
        "affine": {"s0": 0.0, "s1": 0.0, "c0": 0.0, "c1": 0.0, "c2": 0.0},
        # calibrated with settlerpinn.mechanistic.calibrate_saturating
        "saturating": {"k_s": 0.0031126529936266628, "k_c": 0.00984065108710947, "h_half": 0.34195528702336997},
    }

    def __post_init__(self):
        if self.variant not in self.DEFAULTS:
            raise ConfigurationError(f"unknown submodel variant {self.variant!r}")
        unknown = set(self.params) - set(self.DEFAULTS[self.variant])
        if unknown:
            raise ConfigurationError(f"unknown parameters for {self.variant!r}: {sorted(unknown)}")

    def value(self, name: str) -> float:
        return float(self.params.get(name, self.DEFAULTS[self.variant][name]))

    def resolved(self) -> dict:
        out = dict(self.DEFAULTS[self.variant])
        out.update({k: float(v) for k, v in self.params.items()})
        return out


@dataclass(frozen=True)
class ValveLaw:
    """Bottom-outlet flow set by the interface-level valve of the synthetic twin.

    The valve splits the inlet flow smoothly,
    ``q_bot = q_in * expit(logit(1 - epsilon_in) + sharpness*(h_HP + dpz_weight*h_DP - target))``,
    around a level target that drops linearly with throughput,
    ``target = setpoint - setpoint_slope*(q_in - q_ref)``.  The flow is
    evaluated at the start of each 1 s control interval and held constant.
    """

    sharpness: float = 250.0  # 1/m
    setpoint: float = 0.0835  # m
    setpoint_slope: float = 90.0  # m per m^3/s
    q_ref: float = 1.5 / 3600.0  # m^3/s
    dpz_weight: float = 0.0

    def level_target(self, q_in):
        return self.setpoint - self.setpoint_slope * (q_in - self.q_ref)

    def __call__(self, h_hp, h_dp, q_in, epsilon_in: float):
        level = h_hp + self.dpz_weight * h_dp - self.level_target(q_in)
        return q_in * special.expit(special.logit(1.0 - epsilon_in) + self.sharpness * level)


@dataclass(frozen=True)
class FilterConfig:
    p0: tuple = (1e-4, 1e-4)  # initial covariance diagonal, scaled heights^2
    r: float = 2.5e-7  # measurement variance, scaled flows^2
    w_attenuation: float = 100.0
    n_init_samples: int = 100
    clip_to_bounds: bool = True

    def __post_init__(self):
        if len(self.p0) != 2 or min(self.p0) < 0:
            raise ConfigurationError("filter: p0 must be two non-negative values")
        if not (self.r > 0 and self.w_attenuation > 0):
            raise ConfigurationError("filter: r and w_attenuation must be > 0")


@dataclass(frozen=True)
class SettlerConfig:
    geometry: SettlerGeometry = field(default_factory=SettlerGeometry)
    properties: PhysicalProperties = field(default_factory=PhysicalProperties)
    dispersion: DispersionParams = field(default_factory=DispersionParams)
    scaling: ScalingConstants = field(default_factory=ScalingConstants)
    bounds: VariableBounds = field(default_factory=VariableBounds.default)
    submodel: SubmodelSpec = field(default_factory=SubmodelSpec)
    valve: ValveLaw = field(default_factory=ValveLaw)
    filter: FilterConfig = field(default_factory=FilterConfig)

    def to_dict(self) -> dict:
        d = {
            "geometry": dataclasses.asdict(self.geometry),
            "properties": dataclasses.asdict(self.properties),
            "dispersion": dataclasses.asdict(self.dispersion),
            "scaling": dataclasses.asdict(self.scaling),
            "submodel": {"variant": self.submodel.variant, **self.submodel.resolved()},
            "valve": dataclasses.asdict(self.valve),
            "filter": {**dataclasses.asdict(self.filter), "p0": list(self.filter.p0)},
        }
        for kind in ("interpolation", "extrapolation"):
            table = self.bounds.interpolation if kind == "interpolation" else self.bounds.extrapolation
            d[f"bounds.{kind}"] = {k: [b.lb, b.ub] for k, b in table.items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def config_from_dict(data: Mapping[str, Any]) -> SettlerConfig:
    """Build a config from nested mappings; missing keys keep their defaults."""

    def section(cls, key):
        values = dict(data.get(key, {}))
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigurationError(f"[{key}]: {exc}") from None

    sub = dict(data.get("submodel", {}))
    variant = sub.pop("variant", "saturating")
    filt = dict(data.get("filter", {}))
    if "p0" in filt:
        filt["p0"] = tuple(float(v) for v in filt["p0"])

    bounds = VariableBounds.default()
    tables = {"interpolation": dict(bounds.interpolation), "extrapolation": dict(bounds.extrapolation)}
    raw_bounds = data.get("bounds", {})
    for kind in tables:
        overrides = raw_bounds.get(kind, {}) if isinstance(raw_bounds, Mapping) else {}
        overrides = {**overrides, **data.get(f"bounds.{kind}", {})}
        for name, pair in overrides.items():
            if name not in BOUND_VARIABLES:
                raise ConfigurationError(f"bounds: unknown variable {name!r}")
            tables[kind][name] = Bound(float(pair[0]), float(pair[1]))

    try:
        return SettlerConfig(
            geometry=section(SettlerGeometry, "geometry"),
            properties=section(PhysicalProperties, "properties"),
            dispersion=section(DispersionParams, "dispersion"),
            scaling=section(ScalingConstants, "scaling"),
            bounds=VariableBounds(**tables),
            submodel=SubmodelSpec(variant, sub),
            valve=section(ValveLaw, "valve"),
            filter=FilterConfig(**filt),
        )
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path: str | Path | None = None) -> SettlerConfig:
    """Read a TOML config file. ``None`` returns the embedded defaults."""
    if path is None:
        return SettlerConfig()
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    return config_from_dict(data)


def dump_config(config: SettlerConfig) -> str:
    """Serialize a config to TOML text that :func:`load_config` reads back."""
    lines = []
    d = config.to_dict()
    for sec in ("geometry", "properties", "dispersion", "scaling", "submodel", "valve", "filter"):
        lines.append(f"[{sec}]")
        for key, value in d[sec].items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    for kind in ("interpolation", "extrapolation"):
        lines.append(f"[bounds.{kind}]")
        for key, (lb, ub) in d[f"bounds.{kind}"].items():
            lines.append(f"{key} = [{lb!r}, {ub!r}]")
        lines.append("")
    return "\n".join(lines)


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


# ---------------------------------------------------------------------------
# State / measurement records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SettlerState:
    h_hp: float  # m
    h_dp: float  # m

    def __post_init__(self):
        _check_finite(self, ("h_hp", "h_dp"))
        _check_nonnegative(self, ("h_hp", "h_dp"))

    def admissible(self, geometry: SettlerGeometry) -> bool:
        return self.h_hp + self.h_dp <= geometry.height_sep

    def as_array(self) -> np.ndarray:
        return np.array([self.h_hp, self.h_dp])


@dataclass(frozen=True)
class ControlInput:
    q_in: float  # m^3/s

    def __post_init__(self):
        _check_finite(self, ("q_in",))
        _check_nonnegative(self, ("q_in",))


@dataclass(frozen=True)
class FlowMeasurement:
    q_bot: float  # m^3/s
    q_top: float  # m^3/s

    def __post_init__(self):
        _check_finite(self, ("q_bot", "q_top"))
        _check_nonnegative(self, ("q_bot", "q_top"))

    def as_array(self) -> np.ndarray:
        return np.array([self.q_bot, self.q_top])


@dataclass(frozen=True)
class InternalFlows:
    q_c: float  # m^3/s, coalescence
    q_s: float  # m^3/s, sedimentation

    def __post_init__(self):
        _check_finite(self, ("q_c", "q_s"))
        _check_nonnegative(self, ("q_c", "q_s"))


# ---------------------------------------------------------------------------
# Normalization and scaling
# ---------------------------------------------------------------------------


def normalize(value, lb, ub):
    """Affine map of ``[lb, ub]`` onto ``[-1, 1]``."""
    if not np.all(np.asarray(lb) < np.asarray(ub)):
        raise ConfigurationError("normalize requires lb < ub")
    return 2.0 * (value - lb) / (ub - lb) - 1.0


def denormalize(value, lb, ub):
    if not np.all(np.asarray(lb) < np.asarray(ub)):
        raise ConfigurationError("denormalize requires lb < ub")
    return lb + 0.5 * (value + 1.0) * (ub - lb)


_DEFAULT_SCALING = ScalingConstants()


def scale_height(h, scaling: ScalingConstants = _DEFAULT_SCALING):
    return h / scaling.h_scale


def unscale_height(h, scaling: ScalingConstants = _DEFAULT_SCALING):
    return h * scaling.h_scale


def scale_flow(q, scaling: ScalingConstants = _DEFAULT_SCALING):
    return q / scaling.q_scale


def unscale_flow(q, scaling: ScalingConstants = _DEFAULT_SCALING):
    return q * scaling.q_scale
