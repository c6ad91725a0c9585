"""Radar point projection into the camera plane and RVP-map rasterization.

The RVP map is a 3-channel image-plane raster holding target Range (m),
compensated radial Velocity (m/s, negative = approaching the ego platform)
and reflected Power (dB). Pixels with no radar return are exactly zero in
all three channels; a separate occupancy mask records which pixels carry a
return (test-side only, never fed to the network).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RadarPoint:
    x: float  # meters, radar frame
    y: float
    z: float
    v: float  # m/s, compensated radial velocity; v < 0 approaching
    p: float  # dB, reflected power

    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    intrinsic: np.ndarray  # 3x3 camera matrix
    extrinsic: np.ndarray  # 4x4 rigid transform radar -> camera

    def __post_init__(self):
        k = np.asarray(self.intrinsic, dtype=np.float64)
        e = np.asarray(self.extrinsic, dtype=np.float64)
        if k.shape != (3, 3) or e.shape != (4, 4):
            raise CalibrationError(f"intrinsic {k.shape} / extrinsic {e.shape} have wrong shape")
        if not np.allclose(k, np.triu(k)):
            raise CalibrationError("intrinsic must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise CalibrationError("focal terms must be positive")
        r = e[:3, :3]
        dev = np.abs(r.T @ r - np.eye(3)).max()
        if dev > 1e-6:
            raise CalibrationError(f"rotation block not orthonormal (deviation {dev:.2e})")
        if np.linalg.det(r) < 0:
            raise CalibrationError("rotation block must have det +1")
        object.__setattr__(self, "intrinsic", k)
        object.__setattr__(self, "extrinsic", e)

    def to_json(self) -> str:
        return json.dumps({
            "intrinsic": self.intrinsic.reshape(-1).tolist(),
            "extrinsic": self.extrinsic.reshape(-1).tolist(),
        })

    @staticmethod
    def from_json(text: str) -> "Calibration":
        obj = json.loads(text)
        return Calibration(
            np.asarray(obj["intrinsic"], dtype=np.float64).reshape(3, 3),
            np.asarray(obj["extrinsic"], dtype=np.float64).reshape(4, 4),
        )

    @staticmethod
    def load(path) -> "Calibration":
        with open(path) as f:
            return Calibration.from_json(f.read())

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())


@dataclass
class RVPMap:
    channels: np.ndarray  # 3 x H x W: range, velocity, power
    occupancy: np.ndarray  # H x W bool

    @property
    def shape(self):
        return self.channels.shape


def project(point: RadarPoint, calib: Calibration, image_size=None):
    """Pinhole projection; returns (u, v, range) in pixels/meters or None.

    Points with camera-frame depth <= 0 are absent; with `image_size`
    given as (H, W), pixels outside [0, W) x [0, H) are absent too.
    Range is the Euclidean norm of the camera-frame coordinates.
    """
    cam = calib.extrinsic[:3, :3] @ point.xyz() + calib.extrinsic[:3, 3]
    if cam[2] <= 0:
        return None
    uvw = calib.intrinsic @ cam
    u, v = uvw[0] / uvw[2], uvw[1] / uvw[2]
    if image_size is not None:
        h, w = image_size
        if not (0 <= u < w and 0 <= v < h):
            return None
    return float(u), float(v), float(np.linalg.norm(cam))


def unproject(u: float, v: float, range_m: float, calib: Calibration,
              velocity: float = 0.0, power: float = 0.0) -> RadarPoint:
    """Radar-frame point at the given range whose projection is (u, v)."""
    direction = np.linalg.solve(calib.intrinsic, np.array([u, v, 1.0]))
    cam = direction * (range_m / np.linalg.norm(direction))
    r = calib.extrinsic[:3, :3]
    t = calib.extrinsic[:3, 3]
    xyz = r.T @ (cam - t)
    return RadarPoint(float(xyz[0]), float(xyz[1]), float(xyz[2]), velocity, power)


def rasterize(points, calib: Calibration, height: int, width: int,
              dilation: int = 2) -> RVPMap:
    """Paint (range, v, p) triples into the image plane, nearest range wins.

    Each projected point writes a (2*dilation+1)^2 neighborhood clipped to
    the frame. Collisions resolve to the smaller range; exact range ties
    break lexicographically on (v, p) so the result is independent of the
    point-list order.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"rasterize: non-positive raster size {height}x{width}")
    channels = np.zeros((3, height, width), dtype=np.float64)
    occupancy = np.zeros((height, width), dtype=bool)

    hits = []
    for pt in points:
        proj = project(pt, calib, (height, width))
        if proj is None:
            continue
        u, v, rng = proj
        hits.append((rng, pt.v, pt.p, int(v), int(u)))
    # farthest first so the nearest return is written last at each pixel
    hits.sort(key=lambda h: (h[0], h[1], h[2]), reverse=True)

    r = dilation
    for rng, vel, pw, row, col in hits:
        r0, r1 = max(0, row - r), min(height, row + r + 1)
        c0, c1 = max(0, col - r), min(width, col + r + 1)
        channels[0, r0:r1, c0:c1] = rng
        channels[1, r0:r1, c0:c1] = vel
        channels[2, r0:r1, c0:c1] = pw
        occupancy[r0:r1, c0:c1] = True
    return RVPMap(channels, occupancy)
