"""File formats for IMU streams, scans, point-cloud exports and trajectories.

Binary scan file (little-endian)::

    magic    4s   b"KLIO"
    version  u32  1
    stamp    f64  sweep end time [s]
    count    u64  number of points
    count x (x, y, z, time_offset, intensity) as f32

Trajectories use TUM lines ``timestamp tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DatasetFormatError
from .geometry import Pose
from .pointcloud import ScanCloud
from .preintegration import ImuSample

log = logging.getLogger(__name__)

SCAN_MAGIC = b"KLIO"
SCAN_VERSION = 1
_HEADER = struct.Struct("<4sIdQ")
_POINT = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("t", "<f4"), ("i", "<f4")])

IMU_HEADER = "timestamp_s,gx,gy,gz,ax,ay,az"

# IMU -------------------------------------------------------------------------


def write_imu_csv(samples: Sequence[ImuSample], path) -> None:
    """One row per sample; ``repr`` floats make re-reading bit-exact."""
    lines = [IMU_HEADER]
    for s in samples:
        values = (s.timestamp, *s.gyro, *s.accel)
        lines.append(",".join(repr(float(v)) for v in values))
    Path(path).write_text("\n".join(lines) + "\n")


def read_imu_csv(path) -> list[ImuSample]:
    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if lineno == 1 and line.replace(" ", "").lower().startswith("timestamp"):
            continue
        fields_ = line.split(",")
        if len(fields_) != 7:
            raise DatasetFormatError(f"{path}:{lineno}: expected 7 fields, got {len(fields_)}")
        try:
            values = [float(f) for f in fields_]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if not all(np.isfinite(values)):
            raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
        rows.append(values)
    stamps = [r[0] for r in rows]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        log.warning("%s: IMU timestamps not monotone, sorting", path)
        rows.sort(key=lambda r: r[0])  # list.sort is stable
    return [ImuSample(r[0], np.array(r[1:4]), np.array(r[4:7])) for r in rows]


# scans -----------------------------------------------------------------------


def encode_scan(cloud: ScanCloud) -> bytes:
    data = np.empty(len(cloud), dtype=_POINT)
    for i, name in enumerate("xyz"):
        data[name] = cloud.points[:, i]
    data["t"] = cloud.time_offsets
    data["i"] = cloud.intensities
    return _HEADER.pack(SCAN_MAGIC, SCAN_VERSION, float(cloud.timestamp), len(cloud)) + data.tobytes()


def decode_scan(blob: bytes, source: str = "<scan>") -> ScanCloud:
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, stamp, count = _HEADER.unpack_from(blob)
    if magic != SCAN_MAGIC:
        raise DatasetFormatError(f"{source}: bad magic {magic!r}")
    if version != SCAN_VERSION:
        raise DatasetFormatError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + count * _POINT.itemsize
    if len(blob) < expected:
        raise DatasetFormatError(f"{source}: truncated payload, {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise DatasetFormatError(f"{source}: {len(blob) - expected} trailing bytes")
    data = np.frombuffer(blob, dtype=_POINT, count=count, offset=_HEADER.size)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(float)
    return ScanCloud(points, data["t"].astype(float), data["i"].astype(float), stamp)


def write_scan(cloud: ScanCloud, path) -> None:
    Path(path).write_bytes(encode_scan(cloud))


def read_scan(path) -> ScanCloud:
    return decode_scan(Path(path).read_bytes(), str(path))


# PLY -------------------------------------------------------------------------

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
    "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4",
}


def write_ply(path, points: np.ndarray, intensities: np.ndarray | None = None,
              binary: bool = False) -> None:
    """Vertex-only PLY with ``x y z intensity`` float properties."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    inten = np.zeros(len(points)) if intensities is None else np.asarray(intensities, float)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\nproperty float intensity\n"
        "end_header\n"
    )
    if binary:
        data = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("i", "<f4")])
        for k, name in enumerate("xyz"):
            data[name] = points[:, k]
        data["i"] = inten
        Path(path).write_bytes(header.encode("ascii") + data.tobytes())
    else:
        body = "".join(
            f"{x:.9g} {y:.9g} {z:.9g} {i:.9g}\n"
            for (x, y, z), i in zip(points.astype(np.float32).tolist(), inten.astype(np.float32).tolist())
        )
        Path(path).write_text(header + body)


def read_ply(path) -> dict[str, np.ndarray]:
    """Read the vertex element of an ascii or little-endian binary PLY."""
    path = Path(path)
    blob = path.read_bytes()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise DatasetFormatError(f"{path}: not a PLY file")
    body_start = blob.index(b"\n", end) + 1
    header = blob[:end].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif int(parts[2]) > 0:
                raise DatasetFormatError(f"{path}: only vertex elements are supported")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise DatasetFormatError(f"{path}: unsupported property {line!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    body = blob[body_start:]
    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if len(body) != count * dtype.itemsize:
            raise DatasetFormatError(f"{path}: expected {count * dtype.itemsize} payload bytes, got {len(body)}")
        data = np.frombuffer(body, dtype=dtype, count=count)
        return {n: data[n].astype(float) for n, _ in props}
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) != count:
            raise DatasetFormatError(f"{path}: expected {count} vertices, got {len(rows)}")
        try:
            table = np.array([[float(v) for v in r.split()] for r in rows]).reshape(count, len(props))
        except ValueError:
            raise DatasetFormatError(f"{path}: malformed vertex row") from None
        return {n: table[:, k] for k, (n, _) in enumerate(props)}
    raise DatasetFormatError(f"{path}: unsupported PLY format {fmt!r}")


# trajectories ---------------------------------------------------------------


def _fmt(v: float) -> str:
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def pose_to_tum(t: float, pose: Pose) -> str:
    q = Rotation.from_matrix(pose.rotation).as_quat()
    q = q / np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    values = " ".join(_fmt(v) for v in (*pose.translation, *q))
    return f"{t:.6f} {values}"


def write_trajectory(poses: Sequence[tuple[float, Pose]], path) -> None:
    """TUM file, one line per ``(timestamp, pose)`` pair."""
    Path(path).write_text("".join(pose_to_tum(t, p) + "\n" for t, p in poses))


def read_trajectory(path) -> list[tuple[float, Pose]]:
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetFormatError(f"{path}:{lineno}: expected 8 values, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
        q = np.array(v[4:8])
        if not np.all(np.isfinite(v)) or np.linalg.norm(q) < 1e-12:
            raise DatasetFormatError(f"{path}:{lineno}: invalid pose")
        out.append((v[0], Pose(Rotation.from_quat(q).as_matrix(), np.array(v[1:4]))))
    return out


# dataset directories --------------------------------------------------------

IMU_FILE = "imu.csv"
SCAN_DIR = "scans"
GROUNDTRUTH_FILE = "groundtruth.txt"


@dataclass
class Dataset:
    """Sensor streams on disk; scans are read one at a time."""

    imu: list[ImuSample]
    scan_paths: list[Path]
    groundtruth: list[tuple[float, Pose]] | None = None
    scan_reader: object = field(default=read_scan, repr=False)

    def __len__(self) -> int:
        return len(self.scan_paths)

    def scans(self) -> Iterator[ScanCloud]:
        for p in self.scan_paths:
            yield self.scan_reader(p)


def scan_filename(index: int) -> str:
    return f"{index:06d}.bin"


def write_dataset(out_dir, imu: Sequence[ImuSample], scans, groundtruth=None) -> int:
    """Write ``imu.csv``, ``scans/NNNNNN.bin`` and optionally ``groundtruth.txt``.

    Returns the number of scans written.
    """
    out = Path(out_dir)
    (out / SCAN_DIR).mkdir(parents=True, exist_ok=True)
    write_imu_csv(imu, out / IMU_FILE)
    n = 0
    for n, cloud in enumerate(scans, start=1):
        write_scan(cloud, out / SCAN_DIR / scan_filename(n - 1))
    if groundtruth is not None:
        write_trajectory(groundtruth, out / GROUNDTRUTH_FILE)
    return n


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / IMU_FILE).is_file():
        raise DatasetFormatError(f"{root}: missing {IMU_FILE}")
    if not (root / SCAN_DIR).is_dir():
        raise DatasetFormatError(f"{root}: missing {SCAN_DIR}/ directory")
    paths = sorted((root / SCAN_DIR).glob("*.bin"))
    gt_path = root / GROUNDTRUTH_FILE
    gt = read_trajectory(gt_path) if gt_path.is_file() else None
    return Dataset(read_imu_csv(root / IMU_FILE), paths, gt)


# Newer College layout --------------------------------------------------------

_STAMP = re.compile(r"(\d+)[._](\d+)")


def _stamp_from_name(path: Path) -> float:
    """``cloud_<sec>_<nsec>.ply`` or ``<sec>.<frac>.ply`` to seconds."""
    m = _STAMP.search(path.stem)
    if m is None:
        raise DatasetFormatError(f"{path}: no timestamp in file name")
    sec, frac = m.groups()
    scale = 1e-9 if len(frac) == 9 else 10.0 ** -len(frac)
    return int(sec) + int(frac) * scale


def read_ply_scan(path, time_field: str = "t", time_scale: float = 1e-9) -> ScanCloud:
    """Scan exported from the recording container as PLY.

    The sweep end time comes from the file name. Per-point times, when
    present, are read as elapsed time since the sweep start in units of
    ``time_scale`` seconds and converted to ages before the sweep end.
    """
    path = Path(path)
    v = read_ply(path)
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1)
    valid = np.all(np.isfinite(pts), axis=1) & (np.linalg.norm(pts, axis=1) > 0)
    ages = np.zeros(len(pts))
    if time_field in v:
        rel = v[time_field] * time_scale
        ages = rel.max() - rel if len(rel) else ages
    inten = v.get("intensity", np.zeros(len(pts)))
    return ScanCloud(pts[valid], ages[valid], inten[valid], _stamp_from_name(path))


def read_newer_college_groundtruth(path) -> list[tuple[float, Pose]]:
    """``sec,nsec,x,y,z,qx,qy,qz,qw`` CSV rows (``#`` header allowed)."""
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise DatasetFormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        try:
            sec, nsec = int(parts[0]), int(parts[1])
            v = [float(p) for p in parts[2:]]
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: non-numeric value") from None
        out.append((sec + nsec * 1e-9, Pose(Rotation.from_quat(v[3:]).as_matrix(), np.array(v[:3]))))
    return out


def load_newer_college(root) -> Dataset:
    """Adapter for a converted Newer College sequence.

    Expected layout: ``imu.csv`` in the IMU CSV format above, a ``scans/``
    directory of per-sweep PLY files named by timestamp, and a ground-truth
    CSV (``groundtruth.csv``) or TUM file (``groundtruth.txt``).
    """
    root = Path(root)
    if not (root / IMU_FILE).is_file() or not (root / SCAN_DIR).is_dir():
        raise DatasetFormatError(f"{root}: expected {IMU_FILE} and {SCAN_DIR}/")
    paths = sorted((root / SCAN_DIR).glob("*.ply"), key=_stamp_from_name)
    gt = None
    if (root / "groundtruth.csv").is_file():
        gt = read_newer_college_groundtruth(root / "groundtruth.csv")
    elif (root / GROUNDTRUTH_FILE).is_file():
        gt = read_trajectory(root / GROUNDTRUTH_FILE)
    return Dataset(read_imu_csv(root / IMU_FILE), paths, gt, scan_reader=read_ply_scan)


def open_dataset(root) -> Dataset:
    """Native layout if ``scans/`` holds ``.bin`` files, otherwise the PLY adapter."""
    root = Path(root)
    if (root / SCAN_DIR).is_dir() and not any((root / SCAN_DIR).glob("*.bin")) \
            and any((root / SCAN_DIR).glob("*.ply")):
        return load_newer_college(root)
    return load_dataset(root)
