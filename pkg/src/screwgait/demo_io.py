"""Demonstration file format: a JSON manifest followed by per-step binary
records of little-endian float32, each length-prefixed and checksummed.

Layout:
    magic   b"SGDM"
    u16 LE  schema version
    u32 LE  manifest byte length, then manifest JSON (utf-8)
    u32 LE  record count
    per record: u32 LE payload length, payload, u32 LE crc32(payload)

Record field order (all float32):
    t (1) | q (18) | tactile (1800) | a_hand (12) | a_arm (6) |
    skill_active (1) | theta (1) | height (1)        -> 1840 floats

q is the true state [12 hand joints, wrist xyz, wrist rpy]; a_hand is the
absolute hand position target applied this step; a_arm the absolute wrist
pose target. theta/height are simulator diagnostics, not policy inputs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SGDM"
SCHEMA_VERSION = 1

Q_DIM = 18
TACTILE_DIM = 1800
HAND_DIM = 12
ARM_DIM = 6
RECORD_FLOATS = 1 + Q_DIM + TACTILE_DIM + HAND_DIM + ARM_DIM + 1 + 1 + 1


class SchemaVersionMismatch(RuntimeError):
    pass


class CorruptRecord(RuntimeError):
    def __init__(self, message, index):
        super().__init__(f"record {index}: {message}")
        self.index = index


@dataclass
class DemoTrajectory:
    """Columnar in-memory demo; every array is float32 except the flags."""

    manifest: dict
    q: np.ndarray                      # (T, 18)
    tactile: np.ndarray                # (T, 1800)
    a_hand: np.ndarray                 # (T, 12)
    a_arm: np.ndarray                  # (T, 6)
    skill: np.ndarray                  # (T,) bool
    theta: np.ndarray                  # (T,)
    height: np.ndarray                 # (T,)
    t: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.t is None:
            self.t = np.arange(len(self.q), dtype=np.int64)

    def __len__(self):
        return len(self.q)


def write_demo(traj: DemoTrajectory, path: str) -> None:
    T = len(traj)
    man = dict(traj.manifest)
    man.setdefault("schema_version", SCHEMA_VERSION)
    man["n_steps"] = T
    mbytes = json.dumps(man, sort_keys=True).encode("utf-8")
    rows = np.empty((T, RECORD_FLOATS), dtype="<f4")
    c = 0
    for arr, w in ((traj.t, 1), (traj.q, Q_DIM), (traj.tactile, TACTILE_DIM),
                   (traj.a_hand, HAND_DIM), (traj.a_arm, ARM_DIM),
                   (traj.skill, 1), (traj.theta, 1), (traj.height, 1)):
        a = np.asarray(arr)
        rows[:, c:c + w] = a.reshape(T, w).astype("<f4")
        c += w
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", man["schema_version"]))
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        f.write(struct.pack("<I", T))
        for i in range(T):
            payload = rows[i].tobytes()
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload)))


def read_demo(path: str) -> DemoTrajectory:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CorruptRecord("bad magic", index=-1)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"file schema {version}, build supports {SCHEMA_VERSION}")
    (mlen,) = struct.unpack_from("<I", data, 6)
    off = 10
    try:
        manifest = json.loads(data[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptRecord(f"manifest unreadable: {e}", index=-1) from None
    off += mlen
    if off + 4 > len(data):
        raise CorruptRecord("truncated before record count", index=-1)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    want = RECORD_FLOATS * 4
    rows = np.empty((count, RECORD_FLOATS), dtype="<f4")
    for i in range(count):
        if off + 4 > len(data):
            raise CorruptRecord("truncated length prefix", index=i)
        (plen,) = struct.unpack_from("<I", data, off)
        off += 4
        if plen != want:
            raise CorruptRecord(f"payload length {plen}, expected {want}", index=i)
        if off + plen + 4 > len(data):
            raise CorruptRecord("truncated payload", index=i)
        payload = data[off:off + plen]
        off += plen
        (crc,) = struct.unpack_from("<I", data, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise CorruptRecord("checksum mismatch", index=i)
        rows[i] = np.frombuffer(payload, dtype="<f4")
    c = 0
    cols = {}
    for name, w in (("t", 1), ("q", Q_DIM), ("tactile", TACTILE_DIM),
                    ("a_hand", HAND_DIM), ("a_arm", ARM_DIM),
                    ("skill", 1), ("theta", 1), ("height", 1)):
        cols[name] = rows[:, c:c + w].astype(np.float32)
        c += w
    return DemoTrajectory(
        manifest=manifest,
        q=cols["q"],
        tactile=cols["tactile"],
        a_hand=cols["a_hand"],
        a_arm=cols["a_arm"],
        skill=cols["skill"][:, 0] > 0.5,
        theta=cols["theta"][:, 0],
        height=cols["height"][:, 0],
        t=cols["t"][:, 0].astype(np.int64),
    )
