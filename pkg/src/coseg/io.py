"""Readers and writers for scenes, cameras, feature maps and checkpoints.

Binary formats are little-endian with 32-bit floats:

* PLY ``binary_little_endian`` vertex files for Gaussian sets.
* ``FMAP``: ``b"FMAP"``, u32 H, u32 W, u32 K, then H*W*K floats.
* ``RLAW``: ``b"RLAW"``, u32 layer count, u32 ``(d_in, d_out)`` per layer,
  then encoder matrices row-major.
* ``CSGD``: ``b"CSGD"``, u32 tensor count, per tensor u32 ndim and u32 dims,
  then the tensors row-major; a JSON sidecar carries the config and its hash.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, GaussianSet

VOID_PIXEL = 255


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------- PLY

def write_ply_vertices(path, columns: dict[str, np.ndarray]) -> None:
    """Write float32 vertex properties in the given order."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    data = np.empty(n, dtype=[(k, "<f4") for k in names])
    for k in names:
        data[k] = columns[k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {k}" for k in names]
    header.append("end_header")
    atomic_write_bytes(path, ("\n".join(header) + "\n").encode("ascii") + data.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1", "short": "<i2",
              "ushort": "<u2", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4"}


def read_ply_vertices(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n, fields, in_vertex = 0, [], False
    for line in lines[2:]:
        parts = line.split()
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    data = np.frombuffer(raw, dtype=fields, count=n, offset=end)
    return {k: data[k].astype(np.float64) for k, _ in fields}


def _cols(prefix, arr):
    arr = arr.reshape(len(arr), -1)
    return {f"{prefix}{i}": arr[:, i] for i in range(arr.shape[1])}


def save_gaussians(path, gs: GaussianSet) -> None:
    cols = {"x": gs.positions[:, 0], "y": gs.positions[:, 1], "z": gs.positions[:, 2]}
    cols.update(_cols("rot_", gs.rotations))
    cols.update(_cols("scale_", gs.log_scales))
    cols["opacity"] = gs.opacity_raw
    cols.update(_cols("sh_" if gs.uses_sh else "c_", gs.colors))
    if gs.seg_logits is not None:
        cols.update(_cols("seg_", gs.seg_logits))
    for n, f in sorted(gs.features.items()):
        cols.update(_cols(f"feat{n}_", f))
    for k, v in sorted(gs.extras.items()):
        cols[f"extra_{k}"] = v
    write_ply_vertices(path, cols)


def _gather(props, prefix):
    keys = sorted((k for k in props if k.startswith(prefix) and k[len(prefix):].isdigit()),
                  key=lambda k: int(k[len(prefix):]))
    return np.stack([props[k] for k in keys], axis=1) if keys else None


def load_gaussians(path) -> GaussianSet:
    p = read_ply_vertices(path)
    sh = _gather(p, "sh_")
    colors = sh.reshape(len(sh), 4, 3) if sh is not None else _gather(p, "c_")
    features = {}
    for k in p:
        if k.startswith("feat") and "_" in k:
            n = int(k[4: k.index("_")])
            if n not in features:
                features[n] = _gather(p, f"feat{n}_")
    extras = {k[len("extra_"):]: v for k, v in p.items() if k.startswith("extra_")}
    return GaussianSet(
        np.stack([p["x"], p["y"], p["z"]], axis=1), _gather(p, "rot_"), _gather(p, "scale_"),
        p["opacity"], colors, _gather(p, "seg_"), features, extras,
    )


def save_point_cloud(path, points: np.ndarray, colors: np.ndarray) -> None:
    write_ply_vertices(path, {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2],
                              "red": colors[:, 0], "green": colors[:, 1], "blue": colors[:, 2]})


def load_point_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    p = read_ply_vertices(path)
    pts = np.stack([p["x"], p["y"], p["z"]], axis=1)
    if "red" in p:
        rgb = np.stack([p["red"], p["green"], p["blue"]], axis=1)
        return pts, rgb / 255.0 if rgb.max() > 1.0 else rgb
    return pts, np.full_like(pts, 0.5)


# ---------------------------------------------------------------- cameras

def save_cameras(path, cams: list[Camera]) -> None:
    write_json(path, [c.to_dict() for c in cams])


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in read_json(path)]


# ---------------------------------------------------------------- feature maps

def save_fmap(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    H, W, K = arr.shape
    atomic_write_bytes(path, b"FMAP" + struct.pack("<III", H, W, K) + arr.tobytes())


def load_fmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FMAP":
        raise ValueError(f"{path}: not an FMAP file")
    H, W, K = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * H * W * K:
        raise ValueError(f"{path}: size does not match header {H}x{W}x{K}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(H, W, K).astype(np.float64)


# ---------------------------------------------------------------- images

def _palette(n=256):
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(n, 3)).astype(np.uint8)
    pal[VOID_PIXEL] = 0
    return pal


def save_png(path, img: np.ndarray) -> None:
    arr = (np.clip(np.asarray(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, optimize=False)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_label_png(path, labels: np.ndarray) -> None:
    """Indexed PNG; void (negative) labels are stored as index 255."""
    labels = np.asarray(labels)
    if labels.max(initial=-1) >= VOID_PIXEL:
        raise ValueError("indexed PNG holds at most 255 classes")
    img = Image.fromarray(np.where(labels < 0, VOID_PIXEL, labels).astype(np.uint8), mode="P")
    img.putpalette(_palette().ravel().tolist())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, optimize=False)


def load_label_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path)).astype(np.int64)
    return np.where(arr == VOID_PIXEL, -1, arr)


# ---------------------------------------------------------------- encoder weights

def save_encoder_weights(path, weights) -> None:
    dims = weights.dims
    header = b"RLAW" + struct.pack("<I", len(dims))
    header += b"".join(struct.pack("<II", a, b) for a, b in dims)
    atomic_write_bytes(path, header + weights.flat().astype("<f4").tobytes())


def load_encoder_weights(path):
    from .spatial import EncoderWeights

    raw = Path(path).read_bytes()
    if raw[:4] != b"RLAW":
        raise ValueError(f"{path}: not an RLAW weights file")
    (n,) = struct.unpack("<I", raw[4:8])
    dims = [struct.unpack("<II", raw[8 + 8 * i: 16 + 8 * i]) for i in range(n)]
    flat = np.frombuffer(raw, dtype="<f4", offset=8 + 8 * n)
    return EncoderWeights.from_arrays(dims, flat)


# ---------------------------------------------------------------- decoder checkpoints

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_decoder(path, state, extra_config: dict | None = None) -> None:
    names = sorted(state.params)
    parts = [b"CSGD", struct.pack("<I", len(names))]
    for k in names:
        shape = state.params[k].shape
        parts.append(struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    parts += [state.params[k].astype("<f4").tobytes() for k in names]
    atomic_write_bytes(path, b"".join(parts))
    config = dict(state.config(), tensors=names, **(extra_config or {}))
    write_json(Path(str(path) + ".json"), {"config": config, "config_hash": config_hash(config)})


def load_decoder(path):
    from .decoder import DecoderState
    from .optim import Adam

    meta = read_json(Path(str(path) + ".json"))
    config = meta["config"]
    if config_hash(config) != meta["config_hash"]:
        raise ValueError(f"{path}: sidecar config hash mismatch")
    raw = Path(path).read_bytes()
    if raw[:4] != b"CSGD":
        raise ValueError(f"{path}: not a CSGD checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    pos, shapes = 8, []
    for _ in range(n):
        (nd,) = struct.unpack("<I", raw[pos: pos + 4])
        shapes.append(struct.unpack(f"<{nd}I", raw[pos + 4: pos + 4 + 4 * nd]))
        pos += 4 + 4 * nd
    params = {}
    for name, shape in zip(config["tensors"], shapes):
        size = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        params[name] = params[name].astype(np.float64)
        pos += 4 * size
    return DecoderState(params, tuple(config["image_dims"]), tuple(config["spatial_dims"]),
                        config["bottleneck_dim"], config["num_classes"], tuple(config["hidden"]),
                        Adam(config.get("lr", 1e-3)))


class JsonLinesLog:
    """Append-only line-delimited JSON log; ``None`` path discards records."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
