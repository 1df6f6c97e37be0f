"""On-disk formats: PLY point clouds, PFM / 16-bit PNG depth maps, pose
tables, and the binary scene checkpoint container.

All multi-byte integers in binary containers are little-endian. Poses are
world-to-camera, matching the in-memory convention; the pose table is plain
text with one frame per line:

    frame fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz

written with 17 significant digits so finite values round-trip exactly.
Loaders raise StructuredIOError with location info instead of crashing on
malformed input.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import CameraModel, DepthMap, PointCloud

__all__ = [
    "StructuredIOError",
    "load_ply",
    "save_ply",
    "load_depth",
    "save_depth",
    "load_poses",
    "save_poses",
    "write_sections",
    "read_sections",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"GGSC"
CHECKPOINT_VERSION = 1


class StructuredIOError(ValueError):
    """Malformed input; the message carries a byte offset or line number."""


# -- PLY ---------------------------------------------------------------------

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_NP = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def load_ply(path) -> PointCloud:
    """Parse an ascii or binary-little-endian PLY with float x, y, z vertex
    properties and optional 8-bit red, green, blue."""
    raw = Path(path).read_bytes()
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise StructuredIOError("PLY header has no end_header line")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        lines.append(line)
        if line == "end_header":
            break
        if pos > 65536:
            raise StructuredIOError("PLY header exceeds 64 KiB")
    if not lines or lines[0] != "ply":
        raise StructuredIOError("line 1: missing 'ply' magic")

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise StructuredIOError(f"line {ln}: unsupported PLY format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = len(parts) >= 3 and parts[1] == "vertex"
            if in_vertex:
                try:
                    count = int(parts[2])
                except ValueError:
                    raise StructuredIOError(f"line {ln}: bad vertex count {parts[2]!r}") from None
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise StructuredIOError(f"line {ln}: list properties are not supported on vertices")
            if len(parts) != 3 or parts[1] not in _PLY_SIZES:
                raise StructuredIOError(f"line {ln}: unsupported property type {line!r}")
            props.append((parts[2], parts[1]))
    if fmt is None:
        raise StructuredIOError("PLY header missing a format line")
    if count is None:
        raise StructuredIOError("PLY header missing 'element vertex'")
    names = [n for n, _ in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise StructuredIOError(f"PLY vertex element lacks property {need!r}")
    for coord in ("x", "y", "z"):
        if props[names.index(coord)][1] not in ("float", "float32", "double", "float64"):
            raise StructuredIOError(f"PLY property {coord!r} must be a float type")
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    if has_rgb:
        for c in ("red", "green", "blue"):
            if props[names.index(c)][1] not in ("uchar", "uint8"):
                raise StructuredIOError(f"PLY property {c!r} must be an 8-bit type")

    if count == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))

    if fmt == "ascii":
        text = raw[pos:].decode("ascii", errors="replace").split()
        need = count * len(props)
        if len(text) < need:
            raise StructuredIOError(
                f"PLY ascii body has {len(text)} values, expected {need}"
            )
        try:
            vals = np.array(text[:need], dtype=np.float64).reshape(count, len(props))
        except ValueError as exc:
            raise StructuredIOError(f"PLY ascii body: {exc}") from None
        cols = {n: vals[:, i] for i, (n, _) in enumerate(props)}
    else:
        stride = sum(_PLY_SIZES[t] for _, t in props)
        need = count * stride
        body = raw[pos:]
        if len(body) < need:
            raise StructuredIOError(
                f"PLY binary body truncated at byte {pos + len(body)}: "
                f"expected {need} data bytes, found {len(body)}"
            )
        dt = np.dtype([(n, _PLY_NP[t]) for n, t in props])
        rec = np.frombuffer(body, dtype=dt, count=count)
        cols = {n: rec[n].astype(np.float64) for n, _ in props}

    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if has_rgb:
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    else:
        colors = np.full((count, 3), 0.5)
    return PointCloud(positions, colors)


def save_ply(cloud: PointCloud, path, binary: bool = True):
    n = len(cloud)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                     ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype("<f4")
            rec["red"], rec["green"], rec["blue"] = rgb.T
            fh.write(rec.tobytes())
        else:
            for p, c in zip(cloud.positions, rgb):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n".encode())


# -- depth maps ----------------------------------------------------------------

def save_depth(depth: DepthMap, path, png_scale: float = 1000.0):
    """PFM for lossless 32-bit float depth, or 16-bit grayscale PNG with a
    declared scale (stored value = depth * scale, 0 reserved for invalid)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        data = np.where(depth.valid, depth.depth, 0.0).astype("<f4")
        with open(path, "wb") as fh:
            fh.write(b"Pf\n")
            fh.write(f"{depth.width} {depth.height}\n".encode())
            fh.write(b"-1.0\n")
            fh.write(data[::-1].tobytes())  # PFM rows run bottom to top
    elif path.suffix.lower() == ".png":
        vals = np.where(depth.valid, np.clip(np.round(depth.depth * png_scale), 1, 65535), 0)
        Image.fromarray(vals.astype(np.uint16), mode="I;16").save(path)
    else:
        raise ValueError(f"unsupported depth extension {path.suffix!r}")


def load_depth(path, png_scale: float = 1000.0) -> DepthMap:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return _load_pfm(path)
    if path.suffix.lower() == ".png":
        img = np.asarray(Image.open(path))
        if img.ndim != 2:
            raise StructuredIOError("depth PNG must be single-channel")
        depth = img.astype(np.float64) / png_scale
        valid = img > 0
        return DepthMap(np.where(valid, depth, 1.0), valid)
    raise ValueError(f"unsupported depth extension {path.suffix!r}")


def _load_pfm(path) -> DepthMap:
    raw = Path(path).read_bytes()

    def token(start):
        # one whitespace-delimited header token
        while start < len(raw) and raw[start : start + 1].isspace():
            start += 1
        end = start
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if start >= len(raw):
            raise StructuredIOError(f"PFM header truncated at byte {len(raw)}")
        return raw[start:end].decode("ascii", errors="replace"), end

    magic, p = token(0)
    if magic != "Pf":
        raise StructuredIOError(f"byte 0: PFM magic must be 'Pf' (grayscale), got {magic!r}")
    ws, p = token(p)
    hs, p = token(p)
    ss, p = token(p)
    try:
        w, h, scale = int(ws), int(hs), float(ss)
    except ValueError:
        raise StructuredIOError(f"PFM header has bad dimensions/scale: {ws!r} {hs!r} {ss!r}") from None
    if w <= 0 or h <= 0 or w * h > 10**8:
        raise StructuredIOError(f"PFM dimensions out of range: {w} x {h}")
    p += 1  # single whitespace byte after the scale
    need = w * h * 4
    body = raw[p : p + need]
    if len(body) != need:
        raise StructuredIOError(
            f"PFM body truncated at byte {p + len(body)}: expected {need} bytes, found {len(body)}"
        )
    dt = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body, dtype=dt).reshape(h, w)[::-1].astype(np.float64)
    valid = np.isfinite(data) & (data > 0)
    return DepthMap(np.where(valid, data, 1.0), valid)


# -- poses --------------------------------------------------------------------

_POSE_HEADER = "# ggs poses v1"
_ROT_LOAD_TOL = 1e-6


def save_poses(poses: dict[int, CameraModel] | list[tuple[int, CameraModel]], path):
    items = sorted(poses.items() if isinstance(poses, dict) else poses)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_POSE_HEADER + "\n")
        fh.write("# frame fx fy cx cy width height r00..r22 tx ty tz\n")
        for fid, cam in items:
            nums = [cam.fx, cam.fy, cam.cx, cam.cy]
            nums += list(cam.rotation.reshape(-1)) + list(cam.translation)
            fh.write(
                f"{fid} " + f"{nums[0]:.17g} {nums[1]:.17g} {nums[2]:.17g} {nums[3]:.17g} "
                + f"{cam.width} {cam.height} "
                + " ".join(f"{v:.17g}" for v in nums[4:]) + "\n"
            )


def load_poses(path) -> dict[int, CameraModel]:
    out: dict[int, CameraModel] = {}
    last_id = None
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 19:
                raise StructuredIOError(f"line {ln}: expected 19 fields, got {len(parts)}")
            try:
                fid = int(parts[0])
                fx, fy, cx, cy = map(float, parts[1:5])
                w, h = int(parts[5]), int(parts[6])
                rest = np.array(list(map(float, parts[7:])), dtype=np.float64)
            except ValueError as exc:
                raise StructuredIOError(f"line {ln}: {exc}") from None
            if fid in out:
                raise StructuredIOError(f"line {ln}: duplicate frame id {fid}")
            if last_id is not None and fid < last_id:
                raise StructuredIOError(f"line {ln}: frame ids must be sorted ({fid} after {last_id})")
            last_id = fid
            rot = rest[:9].reshape(3, 3)
            det = float(np.linalg.det(rot))
            if det < 0:
                raise StructuredIOError(f"line {ln}: rotation of frame {fid} is a reflection (det {det:.3f})")
            err = float(np.max(np.abs(rot @ rot.T - np.eye(3))))
            if err > _ROT_LOAD_TOL:
                raise StructuredIOError(
                    f"line {ln}: rotation of frame {fid} not orthonormal (error {err:.2e} > {_ROT_LOAD_TOL})"
                )
            # snap to the nearest rotation so the strict in-memory invariant holds
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
            if np.linalg.det(rot) < 0:
                u[:, -1] *= -1
                rot = u @ vt
            out[fid] = CameraModel(fx, fy, cx, cy, w, h, rot, rest[9:])
    return out


# -- checkpoint container -------------------------------------------------------

_DTYPE_CODES = {0: "<f8", 1: "u1", 2: "<i8"}
_DTYPE_BY_KIND = {"f": 0, "u": 1, "i": 2}


def _encode_array(arr: np.ndarray) -> bytes:
    code = _DTYPE_BY_KIND.get(np.asarray(arr).dtype.kind)
    if code is None:
        raise ValueError(f"unsupported checkpoint array dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape)
    return head + arr.tobytes()


def _decode_array(payload: bytes, section: str) -> np.ndarray:
    if len(payload) < 2:
        raise StructuredIOError(f"section {section!r}: payload shorter than its header")
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _DTYPE_CODES:
        raise StructuredIOError(f"section {section!r}: unknown dtype code {code}")
    need = 2 + 8 * ndim
    if len(payload) < need:
        raise StructuredIOError(f"section {section!r}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}q", payload, 2)
    if any(s < 0 for s in shape) or int(np.prod(shape, dtype=np.int64)) > 10**9:
        raise StructuredIOError(f"section {section!r}: dimension overflow {shape}")
    arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code], offset=need)
    expect = int(np.prod(shape, dtype=np.int64))
    if arr.size != expect:
        raise StructuredIOError(
            f"section {section!r}: payload holds {arr.size} values, shape needs {expect}"
        )
    return arr.reshape(shape).copy()


def write_sections(path, sections: list[tuple[str, bytes | np.ndarray]]):
    """Write the GGSC container: magic, u32 version, then length-prefixed,
    CRC-protected named sections in the given order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, payload in sections:
            if isinstance(payload, np.ndarray):
                payload = _encode_array(payload)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
            fh.write(payload)


def read_sections(path) -> dict[str, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise StructuredIOError(f"byte 0: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 8:
        raise StructuredIOError("container truncated before the version field")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise StructuredIOError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    out: dict[str, bytes] = {}
    pos = 8
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise StructuredIOError(f"byte {pos}: truncated section name length")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + nlen + 12 > len(raw):
            raise StructuredIOError(f"byte {pos}: truncated section header")
        name = raw[pos : pos + nlen].decode("utf-8", errors="replace")
        pos += nlen
        plen, crc = struct.unpack_from("<QI", raw, pos)
        pos += 12
        if pos + plen > len(raw):
            raise StructuredIOError(
                f"byte {pos}: section {name!r} payload truncated "
                f"(declared {plen}, available {len(raw) - pos})"
            )
        payload = raw[pos : pos + plen]
        pos += plen
        if zlib.crc32(payload) != crc:
            raise StructuredIOError(f"section {name!r}: checksum mismatch")
        out[name] = payload
    return out


def decode_array_section(sections: dict[str, bytes], name: str) -> np.ndarray:
    if name not in sections:
        raise StructuredIOError(f"checkpoint is missing section {name!r}")
    return _decode_array(sections[name], name)


def decode_json_section(sections: dict[str, bytes], name: str):
    if name not in sections:
        raise StructuredIOError(f"checkpoint is missing section {name!r}")
    try:
        return json.loads(sections[name].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StructuredIOError(f"section {name!r}: {exc}") from None
