"""Run configuration and the flat ``key = value`` file format.

Files look like::

    [noise]
    q = 1.0          # process noise scale q
    [matcher]
    gate = 0.5       # correspondence gate epsilon [m]

Section headers are optional groupings; ``#`` starts a comment. Every
error carries the offending line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .ekf import MeasurementNoise
from .errors import ConfigError
from .geometry import Pose
from .preintegration import NoiseParams


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, str, int]]:
    """Return ``{key: (section, raw value, line number)}``."""
    out: dict[str, tuple[str, str, int]] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        out[key] = (section, value, lineno)
    return out


def _convert(kind: str, value: str):
    if kind == "float":
        return float(value)
    if kind == "int":
        return int(value)
    if kind == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if kind == "vec3":
        v = [float(x) for x in value.replace(",", " ").split()]
        if len(v) != 3:
            raise ValueError(value)
        return tuple(v)
    if kind == "pose":
        v = [float(x) for x in value.replace(",", " ").split()]
        if len(v) != 7:
            raise ValueError(value)
        return tuple(v)
    if kind == "str":
        return value
    raise AssertionError(kind)


def apply_kv(target, entries: dict[str, tuple[str, str, int]], source: str):
    """Return a copy of dataclass ``target`` with ``entries`` applied."""
    known = {f.name: f for f in fields(target)}
    updates = {}
    for key, (_, value, lineno) in entries.items():
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        kind = known[key].metadata.get("kind", "float")
        try:
            updates[key] = _convert(kind, value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: invalid {kind} for '{key}': {value!r}") from None
    try:
        return dataclasses.replace(target, **updates)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _f(default, section, comment="", kind="float"):
    return field(default=default, metadata={"section": section, "comment": comment, "kind": kind})


def pose_from_tuple(v) -> Pose:
    """``(x, y, z, qx, qy, qz, qw)`` to a :class:`Pose`."""
    from scipy.spatial.transform import Rotation

    return Pose(Rotation.from_quat(v[3:]).as_matrix(), np.array(v[:3]))


IDENTITY_POSE = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class KlioConfig:
    q: float = _f(1.0, "noise", "process noise scale q (Q = q I)")
    sigma_p_sq: float = _f(100.0, "noise", "pose measurement scale sigma_p^2")
    sigma_v_sq: float = _f(0.1, "noise", "velocity measurement variance sigma_v^2")
    sigma_omega_sq: float = _f(0.1, "noise", "gyro bias measurement variance sigma_omega^2")
    sigma_a_sq: float = _f(0.1, "noise", "accel bias measurement variance sigma_a^2")
    sigma0: float = _f(1.0, "noise", "initial covariance Sigma_0 = sigma0 I")
    gravity: tuple = _f((0.0, 0.0, -9.81), "noise", "gravity vector g [m/s^2]", "vec3")

    voxel_resolution: float = _f(0.1, "matcher", "voxel filter resolution r [m]")
    gate: float = _f(0.5, "matcher", "correspondence gate epsilon [m]")
    max_iterations: int = _f(30, "matcher", "Gauss-Newton iteration cap", "int")
    k_neighbors: int = _f(20, "matcher", "neighbours per covariance estimate", "int")

    gamma_th: float = _f(0.8, "mapping", "keyframe threshold gamma_th")
    num_keyframes: int = _f(20, "mapping", "keyframes per local map N", "int")

    imu_buffer_capacity: int = _f(4000, "pipeline", "IMU ring buffer size", "int")
    max_imu_gap: float = _f(0.5, "pipeline", "largest tolerated IMU gap [s]")
    min_scan_points: int = _f(100, "pipeline", "minimum points after downsampling", "int")
    init_duration: float = _f(1.0, "pipeline", "accelerometer window for gravity alignment [s]")
    extrinsics: tuple = _f(IDENTITY_POSE, "pipeline", "T_imu_lidar as x y z qx qy qz qw", "pose")
    output_extrinsics: tuple = _f(IDENTITY_POSE, "pipeline",
                                  "T_imu_output applied before writing poses", "pose")

    def __post_init__(self):
        checks = {
            "q": self.q > 0,
            "voxel_resolution": self.voxel_resolution > 0,
            "gate": self.gate > 0,
            "gamma_th": 0.0 <= self.gamma_th <= 1.0,
            "num_keyframes": self.num_keyframes >= 1,
            "k_neighbors": self.k_neighbors >= 4,
            "max_iterations": self.max_iterations >= 1,
            "imu_buffer_capacity": self.imu_buffer_capacity >= 1,
            "sigma0": self.sigma0 > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid value for {', '.join(bad)}")
        MeasurementNoise(self.sigma_p_sq, self.sigma_v_sq, self.sigma_omega_sq, self.sigma_a_sq)

    @property
    def noise_params(self) -> NoiseParams:
        return NoiseParams(self.q, np.array(self.gravity), self.max_imu_gap)

    @property
    def measurement_noise(self) -> MeasurementNoise:
        return MeasurementNoise(self.sigma_p_sq, self.sigma_v_sq, self.sigma_omega_sq,
                                self.sigma_a_sq)

    @property
    def extrinsics_pose(self) -> Pose:
        return pose_from_tuple(self.extrinsics)

    @property
    def output_pose(self) -> Pose:
        return pose_from_tuple(self.output_extrinsics)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> KlioConfig:
        return apply_kv(cls(), parse_kv(text, source), source)

    @classmethod
    def load(cls, path) -> KlioConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        lines = []
        section = None
        for f in fields(self):
            meta = f.metadata
            if meta["section"] != section:
                section = meta["section"]
                if lines:
                    lines.append("")
                lines.append(f"[{section}]")
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = " ".join(repr(float(v)) for v in value)
            lines.append(f"{f.name} = {value}  # {meta['comment']}")
        return "\n".join(lines) + "\n"
