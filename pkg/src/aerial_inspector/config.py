"""Mission configuration: one TOML file with a section per subsystem.

Every section is checked against the fields of the object it builds, so a
misspelt key is an error rather than a silently ignored value.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import MpcParams
from .localization.models import AnchorSet, LocalizationError, UwbNoiseModel, ImuNoise
from .mission import SimConfig
from .planner import PlannerParams, PlanningError
from .structures import StructureError, TurbineSpec
from .vehicle import VehicleParams, WindModel

SECTIONS = ("structure", "planner", "anchors", "uwb", "vehicle", "controller", "wind", "sim", "output")
_SIM_EXTRA = {"camera_rate": 10.0, "imu_noise": True}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MissionConfig:
    path: str
    sections: frozenset
    turbine: TurbineSpec | None
    cloud_path: str | None
    solid_path: str | None
    planner: PlannerParams | None
    anchors: AnchorSet | None
    uwb: UwbNoiseModel
    vehicle: VehicleParams
    controller: MpcParams
    wind: WindModel
    sim: SimConfig
    camera_rate: float
    output_dir: str
    resolved: dict

    @property
    def seed(self):
        return self.sim.seed

    @property
    def config_hash(self):
        """SHA-256 of the canonical resolved configuration (seed override included)."""
        text = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def require(self, *names):
        missing = [n for n in names if n not in self.sections]
        if missing:
            raise ConfigError(f"{self.path}: missing section(s) {', '.join('[' + m + ']' for m in missing)}")


def _coerce(section, key, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"{where}: expected a list of numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported value")


def _fields(cls, exclude=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = dataclasses.MISSING
    return out


def _build(cls, section, table, exclude=(), extra=None):
    """Instantiate ``cls`` from a TOML table; returns ``(object, extras, resolved)``."""
    fields = _fields(cls, exclude)
    extra = dict(extra or {})
    unknown = sorted(set(table) - set(fields) - set(extra))
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")
    kwargs, extras = {}, dict(extra)
    for key, value in table.items():
        default = extra[key] if key in extra else fields[key]
        if default is dataclasses.MISSING:
            default = 0.0
        coerced = _coerce(section, key, value, default)
        if key in extra:
            extras[key] = coerced
        else:
            kwargs[key] = coerced
    missing = [k for k, d in fields.items() if d is dataclasses.MISSING and k not in kwargs]
    if missing:
        raise ConfigError(f"[{section}]: missing required key(s) {', '.join(missing)}")
    try:
        obj = cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(obj).items()
                if k not in exclude}
    resolved.update({k: v for k, v in extras.items()})
    return obj, extras, resolved


def _resolve_path(base, value):
    return value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))


def load_anchor_file(filename):
    """Anchors from a CSV file with header ``id,x,y,z``."""
    anchors = []
    header_seen = False
    try:
        fh = open(filename, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read anchor file {filename}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in text.split(",")]
            if not header_seen:
                if fields != ["id", "x", "y", "z"]:
                    raise ConfigError(f"{filename}:{lineno}: expected header id,x,y,z")
                header_seen = True
                continue
            if len(fields) != 4:
                raise ConfigError(f"{filename}:{lineno}: expected 4 fields")
            try:
                anchors.append((fields[0], [float(v) for v in fields[1:]]))
            except ValueError:
                raise ConfigError(f"{filename}:{lineno}: malformed coordinate") from None
    return anchors


def _anchors(table, base):
    if "file" in table:
        if len(table) != 1:
            raise ConfigError("[anchors]: 'file' cannot be combined with inline anchors")
        if not isinstance(table["file"], str):
            raise ConfigError("[anchors] file: expected a string")
        entries = load_anchor_file(_resolve_path(base, table["file"]))
    else:
        entries = []
        for key, value in table.items():
            if (not isinstance(value, list) or len(value) != 3
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
                raise ConfigError(f"[anchors] {key}: expected [x, y, z]")
            entries.append((key, [float(v) for v in value]))
    try:
        anchors = AnchorSet(tuple(entries))
    except LocalizationError as exc:
        raise ConfigError(f"[anchors]: {exc}") from None
    return anchors, {aid: list(pos) for aid, pos in entries}


def load_config(path, seed=None, out_dir=None):
    """Parse and validate a mission file; ``seed``/``out_dir`` override the file values."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {', '.join(unknown)}")
    for name, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: '{name}' must be a [section]")
    resolved = {}

    turbine = cloud_path = solid_path = None
    if "structure" in data:
        st = dict(data["structure"])
        if "cloud" in st:
            for key in st:
                if key not in ("cloud", "solid"):
                    raise ConfigError(f"[structure]: '{key}' cannot be combined with 'cloud'")
                if not isinstance(st[key], str):
                    raise ConfigError(f"[structure] {key}: expected a string")
            cloud_path = _resolve_path(base, st["cloud"])
            solid_path = _resolve_path(base, st["solid"]) if "solid" in st else None
            resolved["structure"] = {"cloud": st["cloud"], "solid": st.get("solid")}
        else:
            turbine, _, resolved["structure"] = _build(TurbineSpec, "structure", st)
            try:
                turbine.validate()
            except StructureError as exc:
                raise ConfigError(f"[structure]: {exc}") from None

    planner = None
    if "planner" in data:
        planner, _, resolved["planner"] = _build(PlannerParams, "planner", data["planner"])
        try:
            planner.validate()
        except PlanningError as exc:
            raise ConfigError(f"[planner]: {exc}") from None

    anchors = None
    if "anchors" in data:
        anchors, resolved["anchors"] = _anchors(data["anchors"], base)

    uwb, _, resolved["uwb"] = _build(UwbNoiseModel, "uwb", data.get("uwb", {}))
    vehicle, _, resolved["vehicle"] = _build(VehicleParams, "vehicle", data.get("vehicle", {}))
    wind, _, resolved["wind"] = _build(WindModel, "wind", data.get("wind", {}))

    sim_table = dict(data.get("sim", {}))
    if seed is not None:
        sim_table["seed"] = int(seed)
    sim, extras, resolved["sim"] = _build(SimConfig, "sim", sim_table, exclude=("imu_noise",), extra=_SIM_EXTRA)
    if not extras["imu_noise"]:
        sim = dataclasses.replace(sim, imu_noise=ImuNoise(0.0, 0.0, 0.0, 0.0), initial_biases=False)
    if not sim.dt > 0.0 or sim.dt > 0.02:
        raise ConfigError("[sim] dt: must lie in (0, 0.02] s")
    if sim.warmup < 0.0 or extras["camera_rate"] <= 0.0 or sim.heading_rate <= 0.0:
        raise ConfigError("[sim]: warmup must be >= 0, camera_rate and heading_rate > 0")
    if sim.controller not in ("mpc", "pd"):
        raise ConfigError("[sim] controller: expected 'mpc' or 'pd'")

    ctrl, _, resolved["controller"] = _build(MpcParams, "controller", data.get("controller", {}),
                                             exclude=("t_s",))
    controller = dataclasses.replace(ctrl, t_s=sim.dt)
    if controller.angular_rate_weight <= 0.0 or controller.horizon <= 0.0:
        raise ConfigError("[controller]: angular_rate_weight and horizon must be > 0")

    out_table = data.get("output", {})
    unknown = sorted(set(out_table) - {"directory"})
    if unknown:
        raise ConfigError(f"[output]: unknown key(s) {', '.join(unknown)}")
    directory = out_dir if out_dir is not None else out_table.get("directory", "out")
    if not isinstance(directory, str):
        raise ConfigError("[output] directory: expected a string")
    # the output location does not change results, so it stays out of the hash

    return MissionConfig(
        path=path, sections=frozenset(data), turbine=turbine, cloud_path=cloud_path, solid_path=solid_path,
        planner=planner, anchors=anchors, uwb=uwb, vehicle=vehicle, controller=controller, wind=wind,
        sim=sim, camera_rate=extras["camera_rate"], output_dir=directory, resolved=resolved,
    )
