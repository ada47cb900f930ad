"""File formats: images, TUM trajectories, key-value configs, binary flow
records, and the gaussian map export.

Formats are documented in the README. Malformed text inputs are reported with
line numbers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Pose


class FileFormatError(ValueError):
    pass


# ---------------------------------------------------------------- images ---

def save_image(path, img, bits: int = 8):
    """Save an (H, W, 3) float [0, 1] image as 8/16-bit PPM or 8-bit PNG."""
    path = Path(path)
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if path.suffix.lower() == ".ppm":
        maxval = 255 if bits == 8 else 65535
        q = np.round(img * maxval).astype(">u2" if bits == 16 else np.uint8)
        with open(path, "wb") as f:
            f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
            f.write(q.tobytes())
    elif path.suffix.lower() == ".png":
        if bits != 8:
            raise FileFormatError("PNG output is 8-bit; use .ppm for 16-bit")
        q = np.round(img * 255).astype(np.uint8)
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise FileFormatError(f"unsupported image extension: {path.suffix}")


def load_image(path) -> np.ndarray:
    """Load an image file as (H, W, 3) float in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        with open(path, "rb") as f:
            data = f.read()
        fields = []
        pos = 0
        while len(fields) < 4:
            # header tokens with comment support
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        if fields[0] != b"P6":
            raise FileFormatError(f"{path}: not a binary PPM (P6)")
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        pos += 1  # single whitespace after maxval
        raw = data[pos:]
        if maxval == 255:
            arr = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3)
        elif maxval == 65535:
            arr = np.frombuffer(raw, dtype=">u2", count=h * w * 3)
        else:
            raise FileFormatError(f"{path}: unsupported maxval {maxval}")
        return arr.reshape(h, w, 3).astype(np.float64) / maxval
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


# ---------------------------------------------------- TUM trajectory text ---

def save_tum_trajectory(path, entries):
    """Write ``timestamp tx ty tz qx qy qz qw`` lines.

    ``entries`` is a list of (timestamp, Pose) with poses in world-from-camera
    convention (translation is the camera position).
    """
    with open(path, "w") as f:
        for ts, pose in entries:
            w, x, y, z = pose.q
            tx, ty, tz = pose.t
            f.write(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                    f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def load_tum_trajectory(path):
    """Parse a TUM trajectory file into [(timestamp, world-from-camera Pose)]."""
    entries = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 8:
                raise FileFormatError(
                    f"{path}:{ln}: expected 8 fields, got {len(parts)}"
                )
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            except ValueError as e:
                raise FileFormatError(f"{path}:{ln}: {e}") from None
            norm = np.linalg.norm([qw, qx, qy, qz])
            if norm < 1e-12:
                raise FileFormatError(f"{path}:{ln}: zero quaternion")
            q = np.array([qw, qx, qy, qz]) / norm
            entries.append((ts, Pose(q, (tx, ty, tz))))
    return entries


# ------------------------------------------------------- key-value config ---

def save_config_text(path, values: dict):
    with open(path, "w") as f:
        for key in sorted(values):
            f.write(f"{key} = {values[key]}\n")


def load_config_text(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise FileFormatError(f"{path}:{ln}: expected 'key = value'")
            key, _, val = body.partition("=")
            out[key.strip()] = val.strip()
    return out


# ------------------------------------------------------ binary flow files ---

def write_flow_records(path, records):
    """Write edge flow records.

    ``records`` maps (i, j) to (flow, weights), each (H, W, 2) float. Wire
    format per record: i, j, H, W as little-endian u32, then flow and weights
    as little-endian float32 in C order.
    """
    with open(path, "wb") as f:
        for (i, j) in sorted(records):
            flow, weights = records[(i, j)]
            h, w = flow.shape[:2]
            f.write(struct.pack("<IIII", i, j, h, w))
            f.write(flow.astype("<f4").tobytes())
            f.write(weights.astype("<f4").tobytes())


def read_flow_records(path):
    """Inverse of :func:`write_flow_records`."""
    records = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(16)
            if not head:
                break
            if len(head) != 16:
                raise FileFormatError(f"{path}: truncated record header")
            i, j, h, w = struct.unpack("<IIII", head)
            n = h * w * 2
            buf = f.read(2 * n * 4)
            if len(buf) != 2 * n * 4:
                raise FileFormatError(f"{path}: truncated record body for edge ({i}, {j})")
            flow = np.frombuffer(buf[: n * 4], dtype="<f4").reshape(h, w, 2)
            weights = np.frombuffer(buf[n * 4 :], dtype="<f4").reshape(h, w, 2)
            records[(i, j)] = (flow.astype(np.float64), weights.astype(np.float64))
    return records


# ----------------------------------------------------------- map export ----

def export_map(path, gmap):
    """Binary point file: per gaussian mu(3f4) quat(4f4) scale(3f4) opacity(f4)
    color(3f4), little-endian, plus an ASCII sidecar with counts."""
    path = Path(path)
    rec = np.concatenate(
        [gmap.means, gmap.rotations, gmap.scales,
         gmap.opacities[:, None], gmap.colors], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(rec.tobytes())
    sidecar = path.with_suffix(path.suffix + ".txt")
    with open(sidecar, "w") as f:
        f.write(f"gaussians {len(gmap)}\n")
        f.write(f"live {int((~gmap.frozen).sum())}\n")
        f.write(f"frozen {int(gmap.frozen.sum())}\n")


def import_map(path):
    """Read a map export; returns (means, rotations, scales, opacities, colors)."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 14:
        raise FileFormatError(f"{path}: size is not a multiple of the record length")
    rec = raw.reshape(-1, 14).astype(np.float64)
    return rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 11:14]
