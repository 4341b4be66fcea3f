"""On-disk formats: flat binary array directories, PGM/PPM images, checkpoints.

Checkpoint layout (all integers little-endian)::

    bytes 0..7    magic  b"S3PTCKPT"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length N
    bytes 20..    N bytes of UTF-8 JSON: {"meta": {...}, "arrays": [
                      {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    then          raw C-order array payloads; ``offset`` counts from the first
                  payload byte, arrays are stored in header order

dtypes are numpy little-endian strings ("<f8", "<i8", ...). JSON is written
with sorted keys so equal content gives equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .scenes import Scene

MAGIC = b"S3PTCKPT"
VERSION = 1
ARRAY_HEADER = "header.txt"


def _little_endian(arr) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(arr)
    return np.require(arr.astype(arr.dtype.newbyteorder("<"), copy=False), requirements="C")


def write_arrays(directory, arrays: dict[str, np.ndarray], **fields) -> Path:
    """Write each array as ``<name>.bin`` plus a plain-text ``header.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["format s3pt-arrays 1"]
    lines += [f"{k} {v}" for k, v in fields.items()]
    for name, arr in arrays.items():
        arr = _little_endian(arr)
        (directory / f"{name}.bin").write_bytes(arr.tobytes())
        # "-" marks a 0-d array so the header line keeps four fields
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"array {name} {arr.dtype.str} {shape}")
    (directory / ARRAY_HEADER).write_text("\n".join(lines) + "\n")
    return directory


def read_arrays(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    arrays, fields = {}, {}
    for line in (directory / ARRAY_HEADER).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "array":
            _, name, dtype, shape = parts
            dims = tuple(int(s) for s in shape.split(",") if s != "-")
            data = np.frombuffer((directory / f"{name}.bin").read_bytes(), dtype=np.dtype(dtype))
            arrays[name] = data.reshape(dims).copy()
        elif parts[0] != "format":
            fields[parts[0]] = " ".join(parts[1:])
    return arrays, fields


def save_scene(scene: Scene, directory) -> Path:
    arrays = {"pixels": scene.pixels, "class_mask": scene.class_mask, "depth_map": scene.depth_map}
    if scene.object_mask is not None:
        arrays["object_mask"] = scene.object_mask
    return write_arrays(directory, arrays, seed=scene.seed)


def load_scene(directory) -> Scene:
    arrays, fields = read_arrays(directory)
    return Scene(
        pixels=arrays["pixels"],
        class_mask=arrays["class_mask"],
        depth_map=arrays["depth_map"],
        seed=int(fields["seed"]),
        object_mask=arrays.get("object_mask"),
    )


def save_depth(values: np.ndarray, directory, provenance: str = "ground_truth") -> Path:
    return write_arrays(directory, {"depth": np.asarray(values, dtype=np.float64)}, provenance=provenance)


def save_sparse_depth(sparse, directory) -> Path:
    H, W = sparse.shape
    return write_arrays(
        directory, {"coords": sparse.coords, "values": sparse.values}, height=H, width=W
    )


def load_sparse_depth(directory):
    from .scenes import SparseDepthMap

    arrays, fields = read_arrays(directory)
    return SparseDepthMap(arrays["coords"], arrays["values"], (int(fields["height"]), int(fields["width"])))


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> Path:
    """Binary PGM (P5); 8-bit when maxval < 256, else 16-bit big-endian."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if image.min(initial=0) < 0 or image.max(initial=0) > maxval:
        raise ValueError(f"values must lie in [0, {maxval}]")
    dtype = ">u1" if maxval < 256 else ">u2"
    h, w = image.shape
    path = Path(path)
    try:
        path.write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + image.astype(dtype).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _read_netpbm(path) -> tuple[str, int, int, int, bytes]:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode())
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, w, h, maxval, data[pos + 1 :]


def read_pgm(path) -> np.ndarray:
    magic, w, h, maxval, payload = _read_netpbm(path)
    if magic != "P5":
        raise ValueError(f"{path} is not a binary PGM")
    dtype = ">u1" if maxval < 256 else ">u2"
    return np.frombuffer(payload, dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def palette(n: int = 256) -> np.ndarray:
    """Fixed RGB palette indexed by label id (bit-interleaved, Pascal-VOC style)."""
    out = np.zeros((n, 3), dtype=np.uint8)
    for label in range(n):
        c, r, g, b = label, 0, 0, 0
        for shift in range(7, -1, -1):
            r |= ((c >> 0) & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        out[label] = (r, g, b)
    return out


def write_ppm(path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must lie in [0, 255] for the palette")
    rgb = palette()[labels]
    h, w = labels.shape
    path = Path(path)
    try:
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_ppm(path) -> np.ndarray:
    magic, w, h, _, payload = _read_netpbm(path)
    if magic != "P6":
        raise ValueError(f"{path} is not a binary PPM")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def depth_to_pgm16(path, depth: np.ndarray, max_depth: float = 100.0) -> Path:
    """16-bit PGM with depth scaled linearly so ``max_depth`` maps to 65535."""
    scaled = np.clip(np.round(np.asarray(depth) / max_depth * 65535), 0, 65535).astype(np.int64)
    return write_pgm(path, scaled, maxval=65535)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    entries, payload, offset = [], [], 0
    for name in arrays:
        arr = _little_endian(arrays[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, header["meta"]
