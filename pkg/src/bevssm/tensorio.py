"""File formats: the BEVT tensor container, CSV tables, and PGM images.

BEVT is a little-endian multi-record container.  The file starts with the
4-byte magic ``BEVT``; each record is a u32 header length, a JSON header
``{"name": ..., "dtype": "<f4", "shape": [...]}`` and the raw array bytes
in C order.  Records keep their order and names must be unique.

Everything written here is byte-deterministic: fixed float formatting, no
timestamps, insertion-ordered records.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .bevseq import BevGrid, EgoPose
from .errors import FormatError
from .head import Box, DetectionSet

MAGIC = b"BEVT"


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_bevt(path, records: dict) -> None:
    """Write named arrays to a BEVT container, preserving order."""
    blobs = [MAGIC]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(_le(arr.dtype), copy=False)
        header = json.dumps({"name": str(name), "dtype": le.dtype.str,
                             "shape": list(arr.shape)},
                            separators=(",", ":")).encode()
        blobs.append(struct.pack("<I", len(header)))
        blobs.append(header)
        blobs.append(le.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def read_bevt(path) -> dict:
    """Read a BEVT container back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    out: dict = {}
    off = 4
    index = 0
    while off < len(buf):
        if off + 4 > len(buf):
            raise FormatError(f"{path}: truncated record header at byte {off}")
        (hlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + hlen > len(buf):
            raise FormatError(f"{path}: truncated header at byte {off}")
        try:
            meta = json.loads(buf[off:off + hlen].decode())
            dtype = np.dtype(meta["dtype"])
            shape = tuple(int(s) for s in meta["shape"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: bad record header: {exc}") from exc
        off += hlen
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(buf):
            raise FormatError(f"{path}: truncated payload at byte {off}")
        arr = np.frombuffer(buf[off:off + nbytes], dtype=dtype).reshape(shape)
        arr = arr.astype(arr.dtype.newbyteorder("="))
        off += nbytes
        name = meta.get("name", f"#{index}")
        if name in out:
            raise FormatError(f"{path}: duplicate record name {name!r}")
        out[name] = arr
        index += 1
    return out


# ---------------------------------------------------------------------------
# CSV


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def write_csv(path, header, rows) -> None:
    lines = [",".join(str(h) for h in header)]
    lines += [",".join(_cell(v) for v in row) for row in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty CSV")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-d uint8 array as a binary (P5) PGM image."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"PGM wants a 2-d uint8 array, got {img.dtype} "
                          f"shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxv = (int(p) for p in parts[1:4])
    if maxv != 255:
        raise FormatError(f"{path}: unsupported max value {maxv}")
    data = parts[4][: w * h]
    if len(data) < w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# datasets


def _box_rows(boxes) -> np.ndarray:
    rows = [(b.cx, b.cy, b.length, b.width, b.yaw, b.vx, b.vy,
             float(b.cls), b.score) for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(len(rows), 9)


def _rows_to_boxes(rows: np.ndarray):
    return [Box(cx=float(r[0]), cy=float(r[1]), length=float(r[2]),
                width=float(r[3]), yaw=float(r[4]), vx=float(r[5]),
                vy=float(r[6]), cls=int(r[7]), score=float(r[8]))
            for r in rows]


def save_dataset(path, sequences, resolution: float, config_text: str = "") -> None:
    """Write sequences of (features, gt, pose) frames to one BEVT file."""
    records = {
        "meta/resolution": np.array([resolution], dtype=np.float64),
        "meta/config": np.frombuffer(config_text.encode(), dtype=np.uint8),
    }
    for i, seq in enumerate(sequences):
        for k, sample in enumerate(seq):
            stem = f"s{i:04d}/f{k:02d}"
            records[f"{stem}/feat"] = sample.features.array
            records[f"{stem}/gt"] = _box_rows(sample.gt.boxes)
            records[f"{stem}/pose"] = np.array(
                [sample.pose.x, sample.pose.y, sample.pose.yaw], dtype=np.float64)
    write_bevt(path, records)


def load_dataset(path):
    """Read back (sequences, config_text).  Inverse of save_dataset."""
    from .scene import FrameSample, Sequence

    records = read_bevt(path)
    if "meta/resolution" not in records:
        raise FormatError(f"{path}: missing meta/resolution record")
    resolution = float(records["meta/resolution"][0])
    config_text = records.get(
        "meta/config", np.zeros(0, np.uint8)).tobytes().decode()

    frames: dict[int, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in records.items():
        if name.startswith("meta/"):
            continue
        try:
            s_part, f_part, kind = name.split("/")
            si, fi = int(s_part[1:]), int(f_part[1:])
        except ValueError as exc:
            raise FormatError(f"{path}: bad record name {name!r}") from exc
        frames.setdefault(si, {}).setdefault(fi, {})[kind] = arr

    sequences = []
    for si in sorted(frames):
        seq = Sequence()
        for fi in sorted(frames[si]):
            parts = frames[si][fi]
            if set(parts) != {"feat", "gt", "pose"}:
                raise FormatError(
                    f"{path}: sequence {si} frame {fi} has records "
                    f"{sorted(parts)}, expected feat/gt/pose")
            px, py, pyaw = (float(v) for v in parts["pose"])
            seq.samples.append(FrameSample(
                features=BevGrid(parts["feat"].astype(np.float32), resolution),
                gt=DetectionSet(fi, _rows_to_boxes(parts["gt"])),
                pose=EgoPose(px, py, pyaw)))
        sequences.append(seq)
    return sequences, config_text


# ---------------------------------------------------------------------------
# checkpoints and detection dumps


def save_checkpoint(path, params: dict, config_text: str = "") -> None:
    """Write named parameter arrays plus the config that built them."""
    records = {"meta/config": np.frombuffer(config_text.encode(), np.uint8)}
    for name, value in params.items():
        arr = value.data if hasattr(value, "data") else np.asarray(value)
        records[f"param/{name}"] = arr
    write_bevt(path, records)


def load_checkpoint(path):
    """Read back (params dict, config_text)."""
    records = read_bevt(path)
    config_text = records.get(
        "meta/config", np.zeros(0, np.uint8)).tobytes().decode()
    params = {name[len("param/"):]: arr for name, arr in records.items()
              if name.startswith("param/")}
    return params, config_text


DETECTION_HEADER = ("frame", "cx", "cy", "l", "w", "yaw", "vx", "vy",
                    "class", "score")


def write_detections_csv(path, sets) -> None:
    rows = []
    for ds in sets:
        for b in ds.boxes:
            rows.append((ds.frame, b.cx, b.cy, b.length, b.width, b.yaw,
                         b.vx, b.vy, b.cls, b.score))
    write_csv(path, DETECTION_HEADER, rows)


def read_detections_csv(path):
    header, rows = read_csv(path)
    if tuple(header) != DETECTION_HEADER:
        raise FormatError(f"{path}: unexpected header {header}")
    by_frame: dict[int, list] = {}
    for r in rows:
        by_frame.setdefault(int(r[0]), []).append(Box(
            cx=float(r[1]), cy=float(r[2]), length=float(r[3]),
            width=float(r[4]), yaw=float(r[5]), vx=float(r[6]),
            vy=float(r[7]), cls=int(r[8]), score=float(r[9])))
    return [DetectionSet(f, boxes) for f, boxes in sorted(by_frame.items())]
