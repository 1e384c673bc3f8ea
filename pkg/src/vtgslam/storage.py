"""Binary file format for frozen sections.

Little-endian layout::

    magic      4s   b"VTGS"
    version    u32
    section_id u32
    count      u64  number of Gaussians
    n_frames   u32
    frames     u32 * n_frames
    overlap_id i32  (-1 when none)
    records    count * 44 bytes
    crc32      u32  of everything above

Each record holds the five learnable scalars (r, g, b, radius, opacity) as
f32, then owner frame (u32), pixel u and v (u16 each), anchor depth (f32)
and the baked world position (3 x f32).
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .core import DataError, GaussianSet, InvalidStateError, Section, SectionState

MAGIC = b"VTGS"
VERSION = 1

RECORD = np.dtype(
    [
        ("attrs", "<f4", (5,)),
        ("owner", "<u4"),
        ("u", "<u2"),
        ("v", "<u2"),
        ("anchor_depth", "<f4"),
        ("position", "<f4", (3,)),
    ]
)
LEARNABLE_PER_RECORD = RECORD["attrs"].shape[0]


def encode_section(section: Section) -> bytes:
    if not section.frozen or section.gaussians is None or section.gaussians.baked is None:
        raise InvalidStateError("only resident frozen sections can be serialized")
    gs = section.gaussians
    n = len(gs)
    rec = np.zeros(n, dtype=RECORD)
    rec["attrs"][:, :3] = gs.color
    rec["attrs"][:, 3] = gs.radius
    rec["attrs"][:, 4] = gs.opacity
    rec["owner"] = gs.owner
    rec["u"] = gs.pixel[:, 0]
    rec["v"] = gs.pixel[:, 1]
    rec["anchor_depth"] = gs.anchor_depth
    rec["position"] = gs.baked
    frames = section.frame_indices
    head = struct.pack("<4sIIQI", MAGIC, VERSION, section.id, n, len(frames))
    head += struct.pack(f"<{len(frames)}I", *frames)
    head += struct.pack("<i", -1 if section.overlap_id is None else section.overlap_id)
    body = head + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_section(data: bytes) -> Section:
    if len(data) < 28 or data[:4] != MAGIC:
        raise DataError("not a frozen-section file (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    body = data[:-4]
    if zlib.crc32(body) != crc:
        raise DataError("frozen-section file failed its CRC check")
    _, version, sid, n, n_frames = struct.unpack_from("<4sIIQI", body, 0)
    if version != VERSION:
        raise DataError(f"unsupported frozen-section version {version}")
    off = struct.calcsize("<4sIIQI")
    frames = list(struct.unpack_from(f"<{n_frames}I", body, off))
    off += 4 * n_frames
    (overlap,) = struct.unpack_from("<i", body, off)
    off += 4
    if len(body) - off != n * RECORD.itemsize:
        raise DataError("frozen-section record block has the wrong size")
    rec = np.frombuffer(body, dtype=RECORD, count=n, offset=off)
    attrs = rec["attrs"].astype(np.float64)
    gs = GaussianSet(
        attrs[:, :3],
        attrs[:, 3],
        attrs[:, 4],
        rec["owner"].astype(np.int64),
        np.stack([rec["u"], rec["v"]], axis=1).astype(np.int64),
        rec["anchor_depth"].astype(np.float64),
        rec["position"].astype(np.float64),
    )
    gs.set_readonly()
    return Section(sid, frames, gs, SectionState.FROZEN, None if overlap < 0 else overlap)


def write_section(section: Section, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_section(section))
    tmp.replace(path)
    return path


def read_section(path: Union[str, Path]) -> Section:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read frozen section {path}: {exc}") from exc
    return decode_section(data)
