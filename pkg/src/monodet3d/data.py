"""Synthetic pinhole-camera scenes with exact labels, plus KITTI-format io.

Scenes place yaw-rotated 3-D boxes on a ground plane, render each object
as a flat-shaded convex silhouette of its projected corners (nearer
objects painted last), and record exact 2-D boxes, projected centers and
depths. Labels and calibrations round-trip through the KITTI text layout;
images and grayscale dumps use PPM (P6) and PGM (P5).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor
from .heads import GroundTruthObject, wrap_angle

IGNORE_CLASS_ID = -1

_KITTI_NAMES = ["Car", "Pedestrian", "Cyclist"]


def class_name(class_id: int) -> str:
    if 0 <= class_id < len(_KITTI_NAMES):
        return _KITTI_NAMES[class_id]
    return f"Class{class_id}"


def class_id_from_name(name: str) -> int:
    if name in _KITTI_NAMES:
        return _KITTI_NAMES.index(name)
    if name.startswith("Class"):
        try:
            return int(name[5:])
        except ValueError:
            return IGNORE_CLASS_ID
    return IGNORE_CLASS_ID


def class_color(class_id: int) -> np.ndarray:
    """Fixed, well-separated base color per class (golden-ratio hues)."""
    hue = (0.015 + class_id * 0.381966) % 1.0
    return np.asarray(colorsys.hsv_to_rgb(hue, 0.8, 0.9))


@dataclass
class CameraIntrinsics:
    """Pinhole projection matrix, KITTI P2 convention (3x4, pixels)."""

    P: np.ndarray

    @classmethod
    def from_focal(cls, fx: float, fy: float, cx: float, cy: float) -> "CameraIntrinsics":
        P = np.zeros((3, 4))
        P[0, 0], P[1, 1], P[2, 2] = fx, fy, 1.0
        P[0, 2], P[1, 2] = cx, cy
        return cls(P=P)

    @property
    def fx(self) -> float:
        return float(self.P[0, 0])

    @property
    def fy(self) -> float:
        return float(self.P[1, 1])

    @property
    def cx(self) -> float:
        return float(self.P[0, 2])

    @property
    def cy(self) -> float:
        return float(self.P[1, 2])


def project(point, cam: CameraIntrinsics) -> tuple[float, float, float]:
    """Camera-frame point to pixel (u, v) and depth; Z must be positive."""
    x, y, z = (float(c) for c in point)
    if z <= 0.0:
        raise ValueError(f"point behind camera: z={z}")
    u = cam.fx * x / z + cam.cx + cam.P[0, 3] / z
    v = cam.fy * y / z + cam.cy + cam.P[1, 3] / z
    return u, v, z


@dataclass
class SceneSpec:
    """Knobs of the synthetic scene generator."""

    image_h: int = 96
    image_w: int = 320
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    depth_min: float = 5.0
    depth_max: float = 45.0
    focal: float = 210.0
    camera_height: float = 1.5
    min_box_area: float = 16.0
    # uniform gray, not black: exact-zero activations sit on the relu kink
    # and break finite-difference checks
    background: float = 0.15

    def __post_init__(self):
        if self.image_h % 32 or self.image_w % 32:
            raise ValueError("image extents must be divisible by 32")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")


# per-class (h, w, l) ranges; classes beyond three reuse them cyclically
_DIM_RANGES = [
    ((1.3, 1.7), (1.5, 1.9), (3.4, 4.6)),
    ((1.5, 1.9), (0.4, 0.8), (0.4, 0.8)),
    ((1.5, 1.9), (0.4, 0.8), (1.5, 2.1)),
]


@dataclass
class SceneSample:
    image: Tensor  # [3,H,W] in [0,1]
    camera: CameraIntrinsics
    objects: list = field(default_factory=list)
    id: str = ""


def box_corners_3d(location, dims, heading: float) -> np.ndarray:
    """The 8 corners of a yaw-rotated box; location is the bottom center."""
    h, w, l = dims
    x = np.array([l / 2, l / 2, -l / 2, -l / 2, l / 2, l / 2, -l / 2, -l / 2])
    y = np.array([0.0, 0.0, 0.0, 0.0, -h, -h, -h, -h])
    z = np.array([w / 2, -w / 2, -w / 2, w / 2, w / 2, -w / 2, -w / 2, w / 2])
    c, s = np.cos(heading), np.sin(heading)
    rx = c * x + s * z
    rz = -s * x + c * z
    return np.stack([rx + location[0], y + location[1], rz + location[2]], axis=1)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise in (x, y)."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        chain = []
        for p in seq:
            while len(chain) >= 2:
                a, b = chain[-2], chain[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def _project_corners(corners: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    uv = np.empty((len(corners), 2))
    for i, c in enumerate(corners):
        u, v, _ = project(c, cam)
        uv[i] = (u, v)
    return uv


def generate_scene(seed: int, spec: SceneSpec | None = None) -> SceneSample:
    """Deterministic synthetic scene; identical seeds give identical bytes."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    h_img, w_img = spec.image_h, spec.image_w
    cam = CameraIntrinsics.from_focal(spec.focal, spec.focal, w_img / 2.0, h_img / 2.0)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objects = []
    for _ in range(count):
        for _attempt in range(100):
            class_id = int(rng.integers(spec.num_classes))
            ranges = _DIM_RANGES[class_id % len(_DIM_RANGES)]
            dims = tuple(float(rng.uniform(lo, hi)) for lo, hi in ranges)
            heading = float(rng.uniform(-np.pi, np.pi))
            z = float(rng.uniform(spec.depth_min, spec.depth_max))
            half_span = 0.8 * z * (w_img / 2.0) / spec.focal
            x = float(rng.uniform(-half_span, half_span))
            location = (x, spec.camera_height, z)
            center = (x, spec.camera_height - dims[0] / 2.0, z)
            if z - max(dims[1], dims[2]) / 2.0 <= 0.5:
                continue
            u, v, _ = project(center, cam)
            if not (2.0 <= u <= w_img - 2.0 and 2.0 <= v <= h_img - 2.0):
                continue
            uv = _project_corners(box_corners_3d(location, dims, heading), cam)
            x1 = max(float(uv[:, 0].min()), 0.0)
            y1 = max(float(uv[:, 1].min()), 0.0)
            x2 = min(float(uv[:, 0].max()), float(w_img))
            y2 = min(float(uv[:, 1].max()), float(h_img))
            if (x2 - x1) * (y2 - y1) < spec.min_box_area:
                continue
            objects.append(
                GroundTruthObject(
                    class_id=class_id,
                    box2d=(x1, y1, x2, y2),
                    depth=z,
                    dims=dims,
                    heading=heading,
                    location=location,
                    center3d_norm=(u / w_img, v / h_img),
                )
            )
            break
    img = np.full((3, h_img, w_img), spec.background)
    for obj in sorted(objects, key=lambda o: -o.depth):
        uv = _project_corners(box_corners_3d(obj.location, obj.dims, obj.heading), cam)
        hull = convex_hull(uv)
        kernels.fill_convex_polygon(img, hull, class_color(obj.class_id))
    return SceneSample(image=Tensor(img), camera=cam, objects=objects, id=f"scene_{seed:08d}")


def hflip_scene(sample: SceneSample) -> SceneSample:
    """Mirror a scene left-right; assumes the principal point is centered."""
    w_img = sample.image.shape[2]
    h_img = sample.image.shape[1]
    cam = sample.camera
    flipped = []
    for obj in sample.objects:
        location = (-obj.location[0], obj.location[1], obj.location[2])
        heading = wrap_angle(np.pi - obj.heading)
        uv = _project_corners(box_corners_3d(location, obj.dims, heading), cam)
        x1 = max(float(uv[:, 0].min()), 0.0)
        y1 = max(float(uv[:, 1].min()), 0.0)
        x2 = min(float(uv[:, 0].max()), float(w_img))
        y2 = min(float(uv[:, 1].max()), float(h_img))
        center = (location[0], location[1] - obj.dims[0] / 2.0, location[2])
        u, v, _ = project(center, cam)
        flipped.append(
            GroundTruthObject(
                class_id=obj.class_id,
                box2d=(x1, y1, x2, y2),
                depth=obj.depth,
                dims=obj.dims,
                heading=heading,
                location=location,
                center3d_norm=(u / w_img, v / h_img),
            )
        )
    img = np.flip(sample.image.data, axis=2).copy()
    return SceneSample(image=Tensor(img), camera=cam, objects=flipped, id=sample.id + "_flip")


# -- KITTI text formats ------------------------------------------------------


def parse_kitti_label(line: str, line_no: int = 0) -> GroundTruthObject:
    """One label or result line; unknown types yield class_id=-1 (ignore)."""
    fields = line.split()
    if len(fields) not in (15, 16):
        raise ValueError(
            f"line {line_no}: expected 15 or 16 fields, got {len(fields)}"
        )
    vals = [float(f) for f in fields[1:]]
    x1, y1, x2, y2 = vals[3:7]
    h, w, l = vals[7:10]
    loc = tuple(vals[10:13])
    return GroundTruthObject(
        class_id=class_id_from_name(fields[0]),
        box2d=(x1, y1, x2, y2),
        depth=loc[2],
        dims=(h, w, l),
        heading=vals[13],
        location=loc,
        center3d_norm=None,
    )


def parse_kitti_labels(text: str) -> list:
    out = []
    for i, line in enumerate(text.splitlines()):
        if line.strip():
            out.append(parse_kitti_label(line, i + 1))
    return out


def parse_kitti_calib(text: str) -> CameraIntrinsics:
    for line in text.splitlines():
        if line.startswith("P2:"):
            vals = [float(f) for f in line.split()[1:]]
            if len(vals) != 12:
                raise ValueError(f"P2 row needs 12 values, got {len(vals)}")
            return CameraIntrinsics(P=np.asarray(vals).reshape(3, 4))
    raise ValueError("no P2 row in calibration text")


def format_kitti_calib(cam: CameraIntrinsics) -> str:
    return "P2: " + " ".join(f"{v:.6f}" for v in cam.P.reshape(-1)) + "\n"


@dataclass
class Detection:
    """One scored detection in world units, ready for KITTI result io."""

    class_id: int
    box2d: tuple
    dims: tuple
    location: tuple
    heading: float
    score: float


def _alpha(location, heading: float) -> float:
    return wrap_angle(heading - np.arctan2(location[0], location[2]))


def format_kitti_line(class_id: int, box2d, dims, location, heading: float,
                      score: float | None = None) -> str:
    parts = [
        class_name(class_id),
        f"{0.0:.6f}",
        "0",
        f"{_alpha(location, heading):.6f}",
    ]
    parts += [f"{v:.6f}" for v in box2d]
    parts += [f"{v:.6f}" for v in dims]
    parts += [f"{v:.6f}" for v in location]
    parts.append(f"{heading:.6f}")
    if score is not None:
        parts.append(f"{score:.6f}")
    return " ".join(parts)


def write_kitti_result(detections: list, path) -> None:
    """KITTI result file: label layout plus a trailing confidence score."""
    lines = [
        format_kitti_line(d.class_id, d.box2d, d.dims, d.location, d.heading, d.score)
        for d in detections
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def write_kitti_label(objects: list, path) -> None:
    lines = [
        format_kitti_line(o.class_id, o.box2d, o.dims, o.location, o.heading)
        for o in objects
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


# -- PPM / PGM ---------------------------------------------------------------


def encode_ppm(img: np.ndarray) -> bytes:
    """[3,H,W] floats in [0,1] to binary P6 bytes."""
    h, w = img.shape[1], img.shape[2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + data.transpose(1, 2, 0).tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    fields, offset = _read_header(blob, b"P6")
    w, h = fields
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=offset)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_pgm(gray: np.ndarray) -> bytes:
    """[H,W] uint8 (or floats already in 0..255) to binary P5 bytes."""
    arr = np.clip(np.round(np.asarray(gray, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    fields, offset = _read_header(blob, b"P5")
    w, h = fields
    return np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=offset).reshape(h, w)


def _read_header(blob: bytes, magic: bytes):
    if not blob.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    vals = []
    pos = len(magic)
    while len(vals) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while blob[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        vals.append(int(blob[start:pos]))
    return (vals[0], vals[1]), pos + 1


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def write_pgm(path, gray: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(gray))


def scale_to_bytes(values: np.ndarray) -> np.ndarray:
    """Min-max normalize any float grid to 0..255 for PGM dumps."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return np.full(values.shape, 127.0)
    return (values - lo) * (255.0 / (hi - lo))
