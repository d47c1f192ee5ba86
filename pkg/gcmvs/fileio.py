"""File formats: PFM maps, camera text files, binary PLY clouds and PNG images.

PFM
    "Pf" (1 channel) or "PF" (3 channels), then "<width> <height>", then a
    scale whose negative sign means little-endian; float32 samples follow.
    Depth maps use the usual bottom-up row order, normal maps are written
    top-down.

Camera text (one file per view, whitespace separated, keywords optional)
    extrinsic
    r11 r12 r13 t1
    r21 r22 r23 t2
    r31 r32 r33 t3
    [0 0 0 1]
    intrinsic
    fx 0 cx
    0 fy cy
    0 0 1
    [size <width> <height>]
    Extrinsics map world to camera. Two trailing numbers after the intrinsics
    (depth_min depth_interval, as in common MVS datasets) are accepted and ignored.

PLY
    binary_little_endian 1.0, vertex x y z float32, optional red green blue uchar.
"""
import logging
import re
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image

from .errors import FormatError
from .geometry import CameraModel, camera_from_matrices

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FORMAT_VERSION = {"pfm": 1, "ply": 1, "camera": 1}


# =======================
# PFM
# =======================
def read_pfm(path: PathLike, top_down: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().rstrip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: not a PFM file")
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", fh.readline())
        if not dims:
            raise FormatError(f"{path}: malformed PFM header")
        width, height = map(int, dims.groups())
        try:
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM scale") from exc
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(fh.read(), dtype=endian + "f4")
    count = width * height * channels
    if data.size != count:
        raise FormatError(f"{path}: expected {count} samples, found {data.size}")
    shape = (height, width, channels) if channels == 3 else (height, width)
    data = data.reshape(shape).astype(np.float32)
    return data if top_down else np.flipud(data).copy()


def write_pfm(path: PathLike, array: np.ndarray, top_down: bool = False) -> None:
    array = np.asarray(array, dtype="<f4")
    if array.ndim == 2:
        tag = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM needs H x W or H x W x 3 data, got {array.shape}")
    height, width = array.shape[:2]
    rows = array if top_down else np.flipud(array)
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{width} {height}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(rows).tobytes())


def write_depth(path: PathLike, depth) -> None:
    """Depth map as 1-channel PFM; invalid pixels are stored as 0."""
    write_pfm(path, np.where(depth.validity, depth.values, 0.0))


def read_depth(path: PathLike):
    from .depthmap import DepthMap

    return DepthMap(values=read_pfm(path).astype(np.float64))


# =======================
# Cameras
# =======================
def read_camera(path: PathLike, image_size: Optional[Tuple[int, int]] = None) -> CameraModel:
    """Parse a camera text file; `image_size` (width, height) is needed when the file has no size line."""
    tokens = Path(path).read_text().split()
    size = None
    numbers = []
    index = 0
    while index < len(tokens):
        token = tokens[index].lower()
        if token in ("extrinsic", "intrinsic"):
            index += 1
            continue
        if token == "size":
            try:
                size = (int(tokens[index + 1]), int(tokens[index + 2]))
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}: malformed size line") from exc
            index += 3
            continue
        try:
            numbers.append(float(tokens[index]))
        except ValueError as exc:
            raise FormatError(f"{path}: unexpected token {tokens[index]!r}") from exc
        index += 1

    # 3x4 or 4x4 extrinsic, 3x3 intrinsic, optional trailing depth range pair
    if len(numbers) not in (21, 23, 25, 27):
        raise FormatError(f"{path}: expected 3x4 extrinsic + 3x3 intrinsic, found {len(numbers)} numbers")
    ext_len = 16 if len(numbers) >= 25 else 12
    extrinsic = np.array(numbers[:ext_len]).reshape(-1, 4)[:3]
    intrinsic = np.array(numbers[ext_len:ext_len + 9])

    size = size or image_size
    if size is None:
        raise FormatError(f"{path}: no size line and no image size given")
    return camera_from_matrices(extrinsic, intrinsic.reshape(3, 3), image_width=size[0], image_height=size[1])


def write_camera(path: PathLike, cam: CameraModel) -> None:
    ext = cam.extrinsic_matrix()[:3]
    lines = ["extrinsic"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in ext]
    lines.append("")
    lines.append("intrinsic")
    lines += [" ".join(f"{x:.17g}" for x in row) for row in cam.K]
    lines.append("")
    lines.append(f"size {cam.image_width} {cam.image_height}")
    Path(path).write_text("\n".join(lines) + "\n")


# =======================
# PLY
# =======================
def write_ply(path: PathLike, points: np.ndarray, colors: Optional[np.ndarray] = None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    names = ["x", "y", "z"]
    formats = ["<f4", "<f4", "<f4"]
    if colors is not None:
        names += ["red", "green", "blue"]
        formats += ["u1", "u1", "u1"]
    cloud = np.empty(points.shape[0], dtype={"names": names, "formats": formats})
    cloud["x"], cloud["y"], cloud["z"] = points[:, 0], points[:, 1], points[:, 2]
    if colors is not None:
        colors = np.asarray(colors).reshape(-1, 3)
        cloud["red"], cloud["green"], cloud["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {points.shape[0]}"]
    header += [f"property float {axis}" for axis in "xyz"]
    if colors is not None:
        header += [f"property uchar {channel}" for channel in ("red", "green", "blue")]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(cloud.tobytes())


def read_ply(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Read back a cloud written by write_ply: (points (N, 3) float32, colors (N, 3) uint8 or None)."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        count = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: truncated PLY header")
            words = line.decode("ascii").split()
            if words[:1] == ["end_header"]:
                break
            if words[:2] == ["element", "vertex"]:
                count = int(words[2])
            elif words[:1] == ["property"]:
                props.append((words[2], "<f4" if words[1] == "float" else "u1"))
            elif words[:1] == ["format"] and words[1] != "binary_little_endian":
                raise FormatError(f"{path}: only binary_little_endian PLY is supported")
        data = np.frombuffer(fh.read(), dtype=props, count=count)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1)
    colors = None
    if "red" in data.dtype.names:
        colors = np.stack([data["red"], data["green"], data["blue"]], axis=1)
    return points, colors


# =======================
# Images
# =======================
def load_image(path: PathLike) -> np.ndarray:
    """RGB image as float64 H x W x 3 in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def save_png(path: PathLike, image: np.ndarray) -> None:
    """Save a [0, 1] RGB or gray array as 8-bit PNG."""
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8)).save(path, format="PNG")


def save_depth_preview(path: PathLike, depth) -> None:
    """Gray PNG of a depth map scaled to its valid range, for quick inspection."""
    values = depth.values
    valid = depth.validity
    preview = np.zeros(values.shape)
    if np.any(valid):
        lo, hi = values[valid].min(), values[valid].max()
        preview[valid] = (values[valid] - lo) / max(hi - lo, 1e-12)
    save_png(path, preview)
