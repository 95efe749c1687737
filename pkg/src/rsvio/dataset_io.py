"""Dataset directory and trajectory-file readers/writers.

Formats are bit-exact contracts (documented in docs/formats.md): parsers
reject malformed input with line numbers instead of guessing.

Layout of a dataset directory:

    manifest.csv            image index: timestamp_ns,stream,shutter,path
    imu.csv                 timestamp_ns,gx,gy,gz,ax,ay,az (rad/s, m/s^2)
    calibration/camera_<stream>.yaml
    calibration/imu.yaml    extrinsics per stream, gravity, noise densities
    images/<stream>/<timestamp_ns>.png   16-bit grayscale
    groundtruth.txt         optional TUM-style trajectory (IMU poses)

Timestamps are integer nanoseconds on disk; internally they become float
seconds relative to the dataset epoch (the earliest timestamp) to preserve
precision.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .camera import CameraModel, load_camera_yaml, save_camera_yaml
from .imu import ImuData, ImuNoise
from .lie import Pose3, quat_to_rotation, rotation_to_quat
from .state import Calibration


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# trajectory files (TUM format: timestamp_s tx ty tz qx qy qz qw)


def write_trajectory(path, timestamps, poses: list[Pose3]):
    if len(timestamps) != len(poses):
        raise ValueError("timestamps and poses disagree in length")
    with open(path, "w", encoding="utf-8") as f:
        for t, T in zip(timestamps, poses):
            q = rotation_to_quat(T.R)
            vals = " ".join("%.17g" % v for v in (*T.t, *q))
            f.write("%.9f %s\n" % (t, vals))


def read_trajectory(path):
    """Returns (timestamps, poses). Non-unit quaternions are rejected."""
    timestamps, poses = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, "
                                   f"got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            q = np.array(vals[4:8])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-3:
                raise DatasetError(
                    f"{path}:{lineno}: quaternion norm {norm:.6f} not unit")
            timestamps.append(vals[0])
            poses.append(Pose3(quat_to_rotation(q / norm), np.array(vals[1:4])))
    return np.array(timestamps), poses


# ---------------------------------------------------------------------------
# IMU csv

IMU_HEADER = "timestamp_ns,gx,gy,gz,ax,ay,az"


def write_imu_csv(path, imu: ImuData, epoch_ns: int = 0):
    with open(path, "w", encoding="utf-8") as f:
        f.write(IMU_HEADER + "\n")
        for t, w, a in zip(imu.t, imu.w, imu.a):
            ns = epoch_ns + int(round(t * 1e9))
            f.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                    % (ns, *w, *a))


def read_imu_csv(path, epoch_ns: int):
    ts, ws, accs = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != IMU_HEADER:
            raise DatasetError(f"{path}:1: expected header '{IMU_HEADER}'")
        prev = None
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise DatasetError(f"{path}:{lineno}: expected 7 columns")
            try:
                ns = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            if prev is not None and ns <= prev:
                raise DatasetError(
                    f"{path}:{lineno}: timestamps not strictly increasing")
            prev = ns
            ts.append((ns - epoch_ns) * 1e-9)
            ws.append(vals[0:3])
            accs.append(vals[3:6])
    if len(ts) < 2:
        raise DatasetError(f"{path}: IMU stream needs at least two samples")
    return ImuData(np.array(ts), np.array(ws), np.array(accs))


# ---------------------------------------------------------------------------
# images

IMAGE_SCALE_16 = 255.0 / 65535.0


def write_image_png16(path, img01: np.ndarray):
    """Store a [0, 1] float image as 16-bit grayscale PNG."""
    arr = np.clip(np.round(np.asarray(img01) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def read_image(path, bit_scale: str = "16") -> np.ndarray:
    """Load an image as float intensities on the 0..255 scale."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        raise DatasetError(f"{path}: expected grayscale image")
    if bit_scale == "16":
        if arr.dtype != np.uint16:
            raise DatasetError(f"{path}: expected 16-bit data, got {arr.dtype}")
        return arr.astype(float) * IMAGE_SCALE_16
    if bit_scale == "8":
        if arr.dtype != np.uint8:
            raise DatasetError(f"{path}: expected 8-bit data, got {arr.dtype}")
        return arr.astype(float)
    raise DatasetError(f"unknown bit scale '{bit_scale}'")


# ---------------------------------------------------------------------------
# manifest + calibration

MANIFEST_HEADER = "timestamp_ns,stream,shutter,path"


@dataclass
class ImageEntry:
    timestamp: float
    stream: str
    shutter: str
    path: str


@dataclass
class DatasetIndex:
    root: str
    epoch_ns: int
    images: list[ImageEntry]
    imu: ImuData
    calib: dict[str, Calibration]
    noise: ImuNoise
    bit_scale: str = "16"
    groundtruth: tuple | None = None
    streams: list[str] = field(default_factory=list)

    def frames(self, stream: str) -> list[ImageEntry]:
        return [e for e in self.images if e.stream == stream]

    def load_image(self, entry: ImageEntry) -> np.ndarray:
        return read_image(os.path.join(self.root, entry.path), self.bit_scale)


def write_imu_yaml(path, extrinsics: dict[str, Pose3], gravity,
                   noise: ImuNoise, bit_scale: str = "16"):
    data = {
        "gravity": [float(v) for v in gravity],
        "gyro_noise_density": noise.sigma_gyro,
        "accel_noise_density": noise.sigma_accel,
        "gyro_bias_random_walk": noise.sigma_gyro_bias_rw,
        "accel_bias_random_walk": noise.sigma_accel_bias_rw,
        "image_bit_scale": bit_scale,
        "T_cam_imu": {},
    }
    for stream, T in extrinsics.items():
        q = rotation_to_quat(T.R)
        data["T_cam_imu"][stream] = {
            "t": [float(v) for v in T.t],
            "q_xyzw": [float(v) for v in q],
        }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True)


IMU_YAML_KEYS = {"gravity", "gyro_noise_density", "accel_noise_density",
                 "gyro_bias_random_walk", "accel_bias_random_walk",
                 "image_bit_scale", "T_cam_imu"}


def read_imu_yaml(path):
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: expected a mapping")
    unknown = sorted(set(data) - IMU_YAML_KEYS)
    if unknown:
        raise DatasetError(f"{path}: unknown keys {unknown}")
    missing = sorted(IMU_YAML_KEYS - set(data))
    if missing:
        raise DatasetError(f"{path}: missing keys {missing}")
    noise = ImuNoise(sigma_gyro=float(data["gyro_noise_density"]),
                     sigma_accel=float(data["accel_noise_density"]),
                     sigma_gyro_bias_rw=float(data["gyro_bias_random_walk"]),
                     sigma_accel_bias_rw=float(data["accel_bias_random_walk"]))
    extr = {}
    for stream, td in data["T_cam_imu"].items():
        q = np.asarray(td["q_xyzw"], dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-3:
            raise DatasetError(f"{path}: non-unit extrinsic quaternion "
                               f"for stream '{stream}'")
        extr[stream] = Pose3(quat_to_rotation(q / np.linalg.norm(q)),
                             np.asarray(td["t"], dtype=float))
    gravity = np.asarray(data["gravity"], dtype=float)
    return extr, gravity, noise, str(data["image_bit_scale"])


def write_manifest(path, entries: list[tuple[int, str, str, str]]):
    with open(path, "w", encoding="utf-8") as f:
        f.write(MANIFEST_HEADER + "\n")
        for ns, stream, shutter, rel in entries:
            f.write(f"{ns},{stream},{shutter},{rel}\n")


def load_dataset(root) -> DatasetIndex:
    """Validate and index a dataset directory."""
    manifest = os.path.join(root, "manifest.csv")
    imu_csv = os.path.join(root, "imu.csv")
    imu_yamlf = os.path.join(root, "calibration", "imu.yaml")
    for req in (manifest, imu_csv, imu_yamlf):
        if not os.path.exists(req):
            raise DatasetError(f"missing required dataset file: {req}")

    rows = []
    with open(manifest, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != MANIFEST_HEADER:
            raise DatasetError(f"{manifest}:1: expected header "
                               f"'{MANIFEST_HEADER}'")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DatasetError(f"{manifest}:{lineno}: expected 4 columns")
            try:
                ns = int(parts[0])
            except ValueError:
                raise DatasetError(
                    f"{manifest}:{lineno}: bad timestamp '{parts[0]}'") from None
            stream, shutter, rel = parts[1], parts[2], parts[3]
            if shutter not in ("GS", "RS"):
                raise DatasetError(
                    f"{manifest}:{lineno}: shutter must be GS or RS")
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise DatasetError(f"{manifest}:{lineno}: image file "
                                   f"'{rel}' not found")
            rows.append((ns, stream, shutter, rel, lineno))

    if not rows:
        raise DatasetError(f"{manifest}: no image entries")
    per_stream_last: dict[str, int] = {}
    for ns, stream, _, _, lineno in rows:
        if stream in per_stream_last and ns <= per_stream_last[stream]:
            raise DatasetError(f"{manifest}:{lineno}: timestamps of stream "
                               f"'{stream}' not strictly increasing")
        per_stream_last[stream] = ns

    extr, gravity, noise, bit_scale = read_imu_yaml(imu_yamlf)
    epoch_ns = min(ns for ns, *_ in rows)
    imu = read_imu_csv(imu_csv, epoch_ns)

    streams = sorted({stream for _, stream, *_ in rows})
    calib = {}
    for stream in streams:
        cam_path = os.path.join(root, "calibration", f"camera_{stream}.yaml")
        if not os.path.exists(cam_path):
            raise DatasetError(f"missing camera calibration: {cam_path}")
        cam = load_camera_yaml(cam_path)
        if stream not in extr:
            raise DatasetError(f"{imu_yamlf}: no extrinsics for stream "
                               f"'{stream}'")
        calib[stream] = Calibration(T_CmI=extr[stream], camera=cam, g=gravity)

    entries = [ImageEntry((ns - epoch_ns) * 1e-9, stream, shutter, rel)
               for ns, stream, shutter, rel, _ in rows]

    gt = None
    gt_path = os.path.join(root, "groundtruth.txt")
    if os.path.exists(gt_path):
        ts, poses = read_trajectory(gt_path)
        gt = (ts - epoch_ns * 1e-9, poses)

    return DatasetIndex(root=str(root), epoch_ns=epoch_ns, images=entries,
                        imu=imu, calib=calib, noise=noise,
                        bit_scale=bit_scale, groundtruth=gt, streams=streams)
