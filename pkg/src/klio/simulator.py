"""Synthetic ground truth: trajectories, IMU streams and raycast LiDAR sweeps.

Worlds are made of rectangular planar patches so every ray has an exact
analytic hit. Trajectories are smooth closed-form curves whose first and
second derivatives are available analytically; the IMU model inverts the
strapdown kinematics, ``accel = Rᵀ (a - g)`` and ``gyro = ω_body``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .config import IDENTITY_POSE, _f, apply_kv, parse_kv, pose_from_tuple
from .errors import ConfigError
from .geometry import Pose
from .pointcloud import ScanCloud
from .preintegration import DEFAULT_GRAVITY, ImuSample, NavState, PreintegrationTrajectory

TranslationFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]
AttitudeFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def _euler_zyx(yaw, pitch, roll) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    r = np.empty(np.shape(yaw) + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


def _body_rates(angles: np.ndarray, rates: np.ndarray) -> np.ndarray:
    _, pitch, roll = angles.T
    dyaw, dpitch, droll = rates.T
    return np.stack(
        [
            droll - dyaw * np.sin(pitch),
            dpitch * np.cos(roll) + dyaw * np.sin(roll) * np.cos(pitch),
            -dpitch * np.sin(roll) + dyaw * np.cos(roll) * np.cos(pitch),
        ],
        axis=-1,
    )


@dataclass
class AnalyticTrajectory:
    """Pose curve ``t -> (R(t), p(t))`` with analytic derivatives.

    ``translation(t)`` returns position, velocity and acceleration; and
    ``attitude(t)`` returns ZYX Euler angles ``(yaw, pitch, roll)`` and their
    time derivatives, all as ``(N, 3)`` arrays for an ``(N,)`` time array.
    """

    translation: TranslationFn
    attitude: AttitudeFn
    name: str = "custom"

    def kinematics(self, t) -> dict[str, np.ndarray]:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        p, v, a = self.translation(t)
        angles, rates = self.attitude(t)
        return {
            "position": p,
            "velocity": v,
            "acceleration": a,
            "rotation": _euler_zyx(*angles.T),
            "angular_velocity": _body_rates(angles, rates),
        }

    def pose(self, t: float) -> Pose:
        k = self.kinematics(t)
        return Pose(k["rotation"][0], k["position"][0])

    def nav_state(self, t: float) -> NavState:
        k = self.kinematics(t)
        return NavState(Pose(k["rotation"][0], k["position"][0]), k["velocity"][0],
                        timestamp=float(t))

    def sampled(self, times) -> PreintegrationTrajectory:
        """Ground-truth states at ``times`` in the preintegration container."""
        times = np.asarray(times, dtype=float)
        k = self.kinematics(times)
        states = [
            NavState(Pose(r, p), v, timestamp=float(t))
            for r, p, v, t in zip(k["rotation"], k["position"], k["velocity"], times)
        ]
        return PreintegrationTrajectory(times.copy(), states, k["angular_velocity"])


def _const_attitude(yaw=0.0):
    def attitude(t):
        angles = np.zeros((len(t), 3))
        angles[:, 0] = yaw
        return angles, np.zeros((len(t), 3))

    return attitude


def rest(position=(0.0, 0.0, 0.0), yaw: float = 0.0) -> AnalyticTrajectory:
    p0 = np.asarray(position, dtype=float)

    def translation(t):
        z = np.zeros((len(t), 3))
        return p0 + z, z, z.copy()

    return AnalyticTrajectory(translation, _const_attitude(yaw), "rest")


def constant_velocity(velocity, position=(0.0, 0.0, 0.0), yaw: float = 0.0) -> AnalyticTrajectory:
    v0 = np.asarray(velocity, dtype=float)
    p0 = np.asarray(position, dtype=float)

    def translation(t):
        return p0 + t[:, None] * v0, np.tile(v0, (len(t), 1)), np.zeros((len(t), 3))

    return AnalyticTrajectory(translation, _const_attitude(yaw), "constant_velocity")


def circle(radius: float, rate: float, center=(0.0, 0.0, 0.0)) -> AnalyticTrajectory:
    """Circular path at constant angular ``rate`` facing along the tangent."""
    c = np.asarray(center, dtype=float)

    def translation(t):
        ph = rate * t
        cs, sn = np.cos(ph), np.sin(ph)
        z = np.zeros_like(t)
        p = c + radius * np.stack([cs, sn, z], -1)
        v = radius * rate * np.stack([-sn, cs, z], -1)
        a = -radius * rate**2 * np.stack([cs, sn, z], -1)
        return p, v, a

    def attitude(t):
        angles = np.zeros((len(t), 3))
        rates = np.zeros((len(t), 3))
        angles[:, 0] = rate * t + np.pi / 2
        rates[:, 0] = rate
        return angles, rates

    return AnalyticTrajectory(translation, attitude, "circle")


def spin(rate: float, position=(0.0, 0.0, 0.0)) -> AnalyticTrajectory:
    """Yaw in place at constant ``rate`` rad/s."""
    p0 = np.asarray(position, dtype=float)

    def translation(t):
        z = np.zeros((len(t), 3))
        return p0 + z, z, z.copy()

    def attitude(t):
        angles = np.zeros((len(t), 3))
        rates = np.zeros((len(t), 3))
        angles[:, 0] = rate * t
        rates[:, 0] = rate
        return angles, rates

    return AnalyticTrajectory(translation, attitude, "spin")


def figure_eight(size: float, rate: float, center=(0.0, 0.0, 0.0),
                 wobble: float = 0.0) -> AnalyticTrajectory:
    """Lemniscate of Gerono, heading along the path, optional roll/pitch wobble."""
    c = np.asarray(center, dtype=float)

    def translation(t):
        w = rate
        s1, c1 = np.sin(w * t), np.cos(w * t)
        s2, c2 = np.sin(2 * w * t), np.cos(2 * w * t)
        z = np.zeros_like(t)
        p = c + size * np.stack([s1, 0.5 * s2, z], -1)
        v = size * w * np.stack([c1, c2, z], -1)
        a = size * w**2 * np.stack([-s1, -2 * s2, z], -1)
        return p, v, a

    def attitude(t):
        p, v, a = translation(t)
        vx, vy, ax, ay = v[:, 0], v[:, 1], a[:, 0], a[:, 1]
        angles = np.zeros((len(t), 3))
        rates = np.zeros((len(t), 3))
        angles[:, 0] = np.unwrap(np.arctan2(vy, vx))
        rates[:, 0] = (vx * ay - vy * ax) / (vx**2 + vy**2)
        angles[:, 1] = wobble * np.sin(1.3 * rate * t)
        rates[:, 1] = wobble * 1.3 * rate * np.cos(1.3 * rate * t)
        angles[:, 2] = wobble * np.sin(0.7 * rate * t + 0.4)
        rates[:, 2] = wobble * 0.7 * rate * np.cos(0.7 * rate * t + 0.4)
        return angles, rates

    return AnalyticTrajectory(translation, attitude, "figure_eight")


def _ellipse_semi_axes(length: float, aspect: float) -> tuple[float, float]:
    """Semi-axes ``(a, a * aspect)`` of an ellipse with perimeter ``length``."""
    def perimeter(a):
        b = a * aspect
        h = ((a - b) / (a + b)) ** 2
        return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))

    a = length / (2 * math.pi)
    for _ in range(50):
        a *= length / perimeter(a)
    return a, a * aspect


def loop(length: float = 50.0, aspect: float = 0.6, duration: float = 40.0, start: float = 0.0,
         center=(0.0, 0.0, 0.0)) -> AnalyticTrajectory:
    """One lap of an ellipse, starting and ending at rest.

    The phase follows a quintic smoothstep over ``[start, start + duration]``
    so velocity and acceleration vanish at both ends; before and after the
    lap the platform is parked. Heading follows the phase.
    """
    a_ax, b_ax = _ellipse_semi_axes(length, aspect)
    c = np.asarray(center, dtype=float)

    def phase(t):
        u = np.clip((t - start) / duration, 0.0, 1.0)
        inside = ((t > start) & (t < start + duration)).astype(float)
        s = u**3 * (10 - 15 * u + 6 * u**2)
        ds = inside * 30 * u**2 * (1 - u) ** 2 / duration
        dds = inside * 60 * u * (1 - u) * (1 - 2 * u) / duration**2
        k = 2 * np.pi
        return k * s, k * ds, k * dds

    def translation(t):
        ph, w, dw = phase(t)
        cs, sn = np.cos(ph), np.sin(ph)
        z = np.zeros_like(t)
        p = c + np.stack([a_ax * cs, b_ax * sn, z], -1) - np.array([a_ax, 0.0, 0.0])
        v = np.stack([-a_ax * sn * w, b_ax * cs * w, z], -1)
        acc = np.stack(
            [-a_ax * (cs * w**2 + sn * dw), -b_ax * (sn * w**2 - cs * dw), z], -1
        )
        return p, v, acc

    def attitude(t):
        ph, w, _ = phase(t)
        angles = np.zeros((len(t), 3))
        rates = np.zeros((len(t), 3))
        angles[:, 0] = ph + np.pi / 2
        rates[:, 0] = w
        return angles, rates

    return AnalyticTrajectory(translation, attitude, "loop")


# worlds -------------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    """Rectangle ``corner + s * edge_u + r * edge_v`` for ``s, r`` in ``[0, 1]``."""

    corner: tuple
    edge_u: tuple
    edge_v: tuple

    def __post_init__(self):
        n = np.cross(self.edge_u, self.edge_v)
        if np.linalg.norm(n) < 1e-9:
            raise ValueError("degenerate patch")


@dataclass
class PlaneWorld:
    patches: list[Patch] = field(default_factory=list)

    def arrays(self):
        c = np.array([p.corner for p in self.patches], dtype=float)
        u = np.array([p.edge_u for p in self.patches], dtype=float)
        v = np.array([p.edge_v for p in self.patches], dtype=float)
        return c, u, v

    def intersect(self, origins: np.ndarray, directions: np.ndarray,
                  min_range: float = 0.0, max_range: float = np.inf) -> np.ndarray:
        """Distance along each unit ray to the nearest patch, ``inf`` on a miss."""
        c, u, v = self.arrays()
        n = np.cross(u, v)
        denom = directions @ n.T  # (N, P)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.einsum("pk,pk->p", c, n)[None, :] - origins @ n.T
            t = dist / denom
        facing = np.abs(denom) > 1e-12
        t = np.where(facing, t, 0.0)
        hit = origins[:, None, :] + t[..., None] * directions[:, None, :]
        rel = hit - c[None]
        s = np.einsum("npk,pk->np", rel, u) / np.einsum("pk,pk->p", u, u)
        r = np.einsum("npk,pk->np", rel, v) / np.einsum("pk,pk->p", v, v)
        ok = facing & (t > min_range) & (t < max_range) & (s >= 0) & (s <= 1) & (r >= 0) & (r <= 1)
        return np.where(ok, t, np.inf).min(axis=1)


def _box(x0, y0, x1, y1, h) -> list[Patch]:
    return [
        Patch((x0, y0, 0), (x1 - x0, 0, 0), (0, 0, h)),
        Patch((x1, y0, 0), (0, y1 - y0, 0), (0, 0, h)),
        Patch((x1, y1, 0), (x0 - x1, 0, 0), (0, 0, h)),
        Patch((x0, y1, 0), (0, y0 - y1, 0), (0, 0, h)),
        Patch((x0, y0, h), (x1 - x0, 0, 0), (0, y1 - y0, 0)),
    ]


def courtyard(width: float = 40.0, depth: float = 30.0, height: float = 6.0) -> PlaneWorld:
    """Walled courtyard with a central block and two free-standing panels.

    Twelve patches: floor, four walls, five faces of the block, two panels.
    The floor is at z = 0 and the courtyard is centred on the origin.
    """
    hx, hy = width / 2, depth / 2
    patches = [
        Patch((-hx, -hy, 0), (width, 0, 0), (0, depth, 0)),
        Patch((-hx, -hy, 0), (width, 0, 0), (0, 0, height)),
        Patch((hx, -hy, 0), (0, depth, 0), (0, 0, height)),
        Patch((hx, hy, 0), (-width, 0, 0), (0, 0, height)),
        Patch((-hx, hy, 0), (0, -depth, 0), (0, 0, height)),
    ]
    patches += _box(-2.0, -1.5, 2.0, 1.5, 3.0)
    patches += [
        Patch((11.0, 9.0, 0), (3.0, 2.0, 0), (0, 0, 2.5)),
        Patch((-14.0, -8.0, 0), (2.0, -3.0, 0), (0, 0, 2.5)),
    ]
    return PlaneWorld(patches)


# sensors ------------------------------------------------------------------


def synth_imu(traj: AnalyticTrajectory, rate: float, t_start: float, t_end: float,
              gyro_bias=(0.0, 0.0, 0.0), accel_bias=(0.0, 0.0, 0.0),
              gyro_noise_std: float = 0.0, accel_noise_std: float = 0.0, seed: int = 0,
              gravity=DEFAULT_GRAVITY) -> list[ImuSample]:
    """Samples at ``k / rate`` for every ``k`` with ``t_start <= k / rate <= t_end``."""
    if not rate > 0:
        raise ValueError("IMU rate must be positive")
    k0 = math.ceil(t_start * rate - 1e-9)
    k1 = math.floor(t_end * rate + 1e-9)
    times = np.arange(k0, k1 + 1) / rate
    kin = traj.kinematics(times)
    g = np.asarray(gravity, dtype=float)
    rng = np.random.default_rng(seed)
    gyro = kin["angular_velocity"] + np.asarray(gyro_bias, float)
    gyro = gyro + gyro_noise_std * rng.standard_normal(gyro.shape)
    accel = np.einsum("nji,nj->ni", kin["rotation"], kin["acceleration"] - g)
    accel = accel + np.asarray(accel_bias, float) + accel_noise_std * rng.standard_normal(accel.shape)
    return [ImuSample(float(t), w, a) for t, w, a in zip(times, gyro, accel)]


@dataclass(frozen=True)
class LidarModel:
    rings: int = 64
    beams: int = 360
    sweep: float = 0.1
    vfov_min_deg: float = -16.6
    vfov_max_deg: float = 16.6
    min_range: float = 0.5
    max_range: float = 100.0

    def directions(self) -> np.ndarray:
        """Unit ray directions, shape ``(beams, rings, 3)``, column-major in firing order."""
        az = 2 * np.pi * np.arange(self.beams) / self.beams
        el = np.radians(np.linspace(self.vfov_min_deg, self.vfov_max_deg, self.rings))
        ca, sa = np.cos(az)[:, None], np.sin(az)[:, None]
        ce, se = np.cos(el)[None, :], np.sin(el)[None, :]
        return np.stack([ca * ce, sa * ce, np.broadcast_to(se, ca.shape[:1] + se.shape[1:])], -1)

    def column_ages(self) -> np.ndarray:
        """Time before the sweep end at which each column fires; the last fires at 0."""
        j = np.arange(self.beams)
        return self.sweep * (1.0 - (j + 1) / self.beams)


def raycast_scan(world: PlaneWorld, traj: AnalyticTrajectory, scan_time: float,
                 lidar: LidarModel | None = None, range_noise_std: float = 0.0, seed=0,
                 extrinsics: Pose | None = None) -> ScanCloud:
    """One sweep ending at ``scan_time``, in the LiDAR frame.

    Each column is cast from the pose at its own firing time. Misses and
    returns outside the range limits are dropped.
    """
    lidar = lidar or LidarModel()
    if lidar.sweep < 0:
        raise ValueError("sweep must be non-negative")
    ext = extrinsics or Pose()
    dirs = lidar.directions()  # (B, R, 3) in LiDAR frame
    ages = lidar.column_ages()
    kin = traj.kinematics(scan_time - ages)
    r_wl = kin["rotation"] @ ext.rotation  # (B, 3, 3)
    o_wl = np.einsum("bij,j->bi", kin["rotation"], ext.translation) + kin["position"]
    world_dirs = np.einsum("bij,brj->bri", r_wl, dirs)
    origins = np.broadcast_to(o_wl[:, None, :], world_dirs.shape)
    rng = lidar.max_range
    dist = world.intersect(origins.reshape(-1, 3), world_dirs.reshape(-1, 3),
                           lidar.min_range, rng).reshape(dirs.shape[:2])
    noise_rng = np.random.default_rng(seed)
    noisy = dist + range_noise_std * noise_rng.standard_normal(dist.shape)
    keep = np.isfinite(dist) & (noisy > lidar.min_range)
    pts = dirs[keep] * noisy[keep][:, None]
    offs = np.broadcast_to(ages[:, None], dist.shape)[keep]
    return ScanCloud(pts, offs, np.ones(len(pts)), float(scan_time))


# scenarios ----------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    trajectory: str = _f("loop", "trajectory", "loop | circle | spin | rest | figure_eight | constant_velocity", "str")
    duration: float = _f(40.0, "trajectory", "seconds of motion after the lead-in")
    lead_in: float = _f(1.0, "trajectory", "IMU-only time before the first scan [s]")
    loop_length: float = _f(50.0, "trajectory", "loop path length [m]")
    loop_aspect: float = _f(0.6, "trajectory", "minor/major axis ratio of the loop")
    radius: float = _f(10.0, "trajectory", "circle radius [m]")
    angular_rate: float = _f(0.5, "trajectory", "circle / figure-eight rate [rad/s]")
    spin_rate: float = _f(4.2, "trajectory", "spin-in-place rate [rad/s]")
    speed: float = _f(1.0, "trajectory", "constant-velocity speed along x [m/s]")
    size: float = _f(8.0, "trajectory", "figure-eight half width [m]")
    wobble: float = _f(0.0, "trajectory", "roll/pitch wobble amplitude [rad]")
    start: tuple = _f((4.0, 2.0, 1.5), "trajectory", "start / centre position in the courtyard", "vec3")

    imu_rate: float = _f(200.0, "imu", "IMU rate [Hz]")
    gyro_noise: float = _f(0.002, "imu", "gyro white noise std [rad/s]")
    accel_noise: float = _f(0.02, "imu", "accel white noise std [m/s^2]")
    gyro_bias: tuple = _f((0.0, 0.0, 0.0), "imu", "constant gyro bias [rad/s]", "vec3")
    accel_bias: tuple = _f((0.0, 0.0, 0.0), "imu", "constant accel bias [m/s^2]", "vec3")

    scan_rate: float = _f(10.0, "lidar", "sweeps per second [Hz]")
    rings: int = _f(64, "lidar", "vertical channels", "int")
    beams: int = _f(360, "lidar", "columns per sweep", "int")
    range_noise: float = _f(0.01, "lidar", "range noise std [m]")
    extrinsics: tuple = _f(IDENTITY_POSE, "lidar", "T_imu_lidar as x y z qx qy qz qw", "pose")

    seed: int = _f(7, "world", "random seed", "int")
    world_width: float = _f(40.0, "world", "courtyard size along x [m]")
    world_depth: float = _f(30.0, "world", "courtyard size along y [m]")
    wall_height: float = _f(6.0, "world", "wall height [m]")

    def __post_init__(self):
        if self.trajectory not in _TRAJECTORIES:
            raise ValueError(f"unknown trajectory '{self.trajectory}'")
        if not (self.imu_rate > 0 and self.scan_rate > 0 and self.duration > 0):
            raise ValueError("rates and duration must be positive")

    @classmethod
    def from_text(cls, text: str, source: str = "<scenario>") -> Scenario:
        return apply_kv(cls(), parse_kv(text, source), source)

    @classmethod
    def load(cls, path) -> Scenario:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def replace(self, **kw) -> Scenario:
        import dataclasses

        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines, section = [], None
        for f in fields(self):
            if f.metadata["section"] != section:
                section = f.metadata["section"]
                lines += ([""] if lines else []) + [f"[{section}]"]
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = " ".join(repr(float(v)) for v in value)
            lines.append(f"{f.name} = {value}  # {f.metadata['comment']}")
        return "\n".join(lines) + "\n"


_TRAJECTORIES = ("loop", "circle", "spin", "rest", "figure_eight", "constant_velocity")


def scenario_path(name: str) -> Path:
    return Path(__file__).with_name("scenarios") / f"{name}.ini"


def load_scenario(name_or_path) -> Scenario:
    p = Path(name_or_path)
    if not p.exists() and scenario_path(str(name_or_path)).exists():
        p = scenario_path(str(name_or_path))
    return Scenario.load(p)


@dataclass
class Simulation:
    """Lazily generated dataset for one scenario."""

    scenario: Scenario
    trajectory: AnalyticTrajectory
    world: PlaneWorld
    lidar: LidarModel

    @classmethod
    def from_scenario(cls, sc: Scenario) -> Simulation:
        t0 = sc.lead_in
        start = np.asarray(sc.start, float)
        if sc.trajectory == "loop":
            traj = loop(sc.loop_length, sc.loop_aspect, sc.duration, start=t0, center=start)
        elif sc.trajectory == "circle":
            traj = circle(sc.radius, sc.angular_rate, center=start)
        elif sc.trajectory == "spin":
            traj = spin(sc.spin_rate, start)
        elif sc.trajectory == "rest":
            traj = rest(start)
        elif sc.trajectory == "figure_eight":
            traj = figure_eight(sc.size, sc.angular_rate, start, sc.wobble)
        else:
            traj = constant_velocity((sc.speed, 0.0, 0.0), start)
        world = courtyard(sc.world_width, sc.world_depth, sc.wall_height)
        lidar = LidarModel(rings=sc.rings, beams=sc.beams, sweep=1.0 / sc.scan_rate)
        return cls(sc, traj, world, lidar)

    @property
    def end_time(self) -> float:
        return self.scenario.lead_in + self.scenario.duration

    def scan_times(self) -> np.ndarray:
        sc = self.scenario
        n0 = math.ceil(sc.lead_in * sc.scan_rate - 1e-9)
        n1 = math.floor(self.end_time * sc.scan_rate + 1e-9)
        return np.arange(n0, n1 + 1) / sc.scan_rate

    def imu(self) -> list[ImuSample]:
        sc = self.scenario
        return synth_imu(self.trajectory, sc.imu_rate, 0.0, self.end_time, sc.gyro_bias,
                         sc.accel_bias, sc.gyro_noise, sc.accel_noise, seed=sc.seed)

    def scan(self, index: int) -> ScanCloud:
        t = float(self.scan_times()[index])
        return raycast_scan(self.world, self.trajectory, t, self.lidar, self.scenario.range_noise,
                            seed=(self.scenario.seed, index),
                            extrinsics=pose_from_tuple(self.scenario.extrinsics))

    def scans(self) -> Iterator[ScanCloud]:
        for i in range(len(self.scan_times())):
            yield self.scan(i)

    def groundtruth(self, times=None) -> list[tuple[float, Pose]]:
        times = self.scan_times() if times is None else np.asarray(times, float)
        k = self.trajectory.kinematics(times)
        return [(float(t), Pose(r, p)) for t, r, p in zip(times, k["rotation"], k["position"])]
