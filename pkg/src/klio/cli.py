"""``klio`` command line: ``simulate``, ``run`` and ``eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset_io
from .config import KlioConfig
from .errors import ConfigError, KlioError
from .evaluation import DEFAULT_MAX_DT, ape
from .geometry import Pose
from .pipeline import OK, BOOTSTRAP, Odometry, OdometryRecord, replay
from .pointcloud import voxel_downsample_points
from .simulator import Simulation, load_scenario

log = logging.getLogger("klio")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MAX_FAILED_FRACTION = 0.10

TRAJECTORY_FILE = "trajectory.txt"
MAP_FILE = "map.ply"
LOG_FILE = "log.csv"


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.replace(seed=args.seed)
    sim = Simulation.from_scenario(scenario)
    imu = sim.imu()
    n = dataset_io.write_dataset(args.out_dir, imu, sim.scans(), sim.groundtruth())
    (Path(args.out_dir) / "scenario.ini").write_text(scenario.to_text())
    print(f"wrote {n} scans, {len(imu)} IMU samples, {n} ground-truth poses to {args.out_dir}")
    return EXIT_OK


def _log_header() -> str:
    cols = ["timestamp", "status", "px", "py", "pz", "qx", "qy", "qz", "qw", "vx", "vy", "vz",
            "bgx", "bgy", "bgz", "bax", "bay", "baz"]
    cols += [f"cov{i}" for i in range(15)]
    cols += ["gamma", "iterations", "converged", "keyframe", "num_points"]
    return ",".join(cols)


def _log_row(r: OdometryRecord) -> str:
    tum = dataset_io.pose_to_tum(r.timestamp, r.state.pose).split()[1:]
    s = r.state
    nums = [*s.velocity, *s.gyro_bias, *s.accel_bias, *r.cov_diag, r.correspondence_rate]
    return ",".join(
        [repr(r.timestamp), r.status, *tum, *(repr(float(v)) for v in nums),
         str(r.iterations), str(int(r.converged)), str(int(r.keyframe_inserted)), str(r.num_points)]
    )


def write_log(records, config: KlioConfig, path) -> None:
    lines = ["# " + line if line else "#" for line in config.to_text().splitlines()]
    lines.append(_log_header())
    lines += [_log_row(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def output_trajectory(records, output_pose: Pose) -> list[tuple[float, Pose]]:
    return [(r.timestamp, r.state.pose @ output_pose) for r in records]


def cmd_run(args) -> int:
    config = KlioConfig.load(args.config) if args.config else KlioConfig()
    data = dataset_io.open_dataset(args.dataset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    odo = Odometry(config)
    t0 = time.perf_counter()
    records = replay(odo, data.imu, data.scans())
    elapsed = time.perf_counter() - t0

    dataset_io.write_trajectory(output_trajectory(records, config.output_pose), out / TRAJECTORY_FILE)
    write_log(records, config, out / LOG_FILE)
    if len(odo.keyframes):
        world = np.vstack([k.pose.transform(k.cloud.points) for k in odo.keyframes])
        dataset_io.write_ply(out / MAP_FILE, voxel_downsample_points(world, config.voxel_resolution),
                             binary=args.binary_ply)

    tracked = [r for r in records if r.status != BOOTSTRAP]
    failed = sum(r.status != OK for r in tracked)
    print(f"processed {len(records)} scans in {elapsed:.1f} s, {len(odo.keyframes)} keyframes, "
          f"{failed} failed registrations")
    if tracked and failed > MAX_FAILED_FRACTION * len(tracked):
        log.error("%d of %d scans failed registration", failed, len(tracked))
        return EXIT_FAILURE
    return EXIT_OK


def cmd_eval(args) -> int:
    est = dataset_io.read_trajectory(args.estimate)
    ref = dataset_io.read_trajectory(args.reference)
    result = ape(est, ref, args.max_dt)
    print(result.report(), end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(result.key_values())
        (out / "ape_errors.csv").write_text(result.error_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="klio", description="LiDAR-inertial odometry")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("scenario", help="scenario file or bundled name (courtyard_loop, spin)")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run odometry over a dataset directory")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.add_argument("-c", "--config", default=None, help="key = value configuration file")
    p.add_argument("--binary-ply", action="store_true", help="write the map as binary PLY")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="APE of an estimate against a reference trajectory")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("--max-dt", type=float, default=DEFAULT_MAX_DT)
    p.add_argument("--out-dir", default=None, help="also write metrics.txt and ape_errors.csv")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"klio: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KlioError, OSError, ValueError) as exc:
        print(f"klio: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
