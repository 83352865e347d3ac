"""Labeled trajectory datasets and their binary file format.

Layout (little-endian, unpadded)::

    b"CAPNAV01" | u32 version | u64 count | count x record

    record: episode u64 | step u32 | capability u8 | timestamp f64
            | goal_rel 2xf64 | expert_action 3xf64 | fine 4R x f32
            | coarse (window-1) x 4(R/4) x f32 | flags u8
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from capnav import sensing
from capnav.tensornn.checkpoint import FormatError
from capnav.world import Capability

MAGIC = b"CAPNAV01"
VERSION = 1
HEADER = struct.Struct("<IQ")
HEADER_SIZE = len(MAGIC) + HEADER.size

TERMINAL = 1
REACHED = 2


def record_dtype(rays: int = sensing.RAYS, window: int = sensing.WINDOW) -> np.dtype:
    return np.dtype([
        ("episode", "<u8"),
        ("step", "<u4"),
        ("capability", "u1"),
        ("timestamp", "<f8"),
        ("goal_rel", "<f8", (2,)),
        ("expert_action", "<f8", (3,)),
        ("fine", "<f4", (4 * rays,)),
        ("coarse", "<f4", ((window - 1) * 4 * (rays // sensing.POOL),)),
        ("flags", "u1"),
    ])


@dataclass(frozen=True)
class LabeledStep:
    student_obs: sensing.StudentObservation
    expert_obs_hash: str
    goal_rel: np.ndarray
    expert_action: np.ndarray
    capability: Capability
    episode: int
    step: int
    timestamp: float
    flags: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.expert_action)):
            raise ValueError("expert action must be finite")
        if Capability(self.capability) == Capability.MIXED:
            raise ValueError("labeled steps carry a training capability")


def observation_digest(depth: np.ndarray) -> str:
    """Short content hash of an expert's clean depth frame."""
    return hashlib.blake2b(np.ascontiguousarray(depth, "<f8").tobytes(), digest_size=8).hexdigest()


@dataclass
class TrajectoryDataset:
    records: np.ndarray
    rays: int = sensing.RAYS
    window: int = sensing.WINDOW
    fovs: dict[int, float] = field(default_factory=dict)  # episode id -> FOV degrees, in memory only

    @classmethod
    def empty(cls, rays: int = sensing.RAYS, window: int = sensing.WINDOW) -> "TrajectoryDataset":
        return cls(np.zeros(0, record_dtype(rays, window)), rays, window)

    @classmethod
    def from_arrays(cls, episode, step, capability, timestamp, goal_rel, expert_action, fine, coarse, flags,
                    rays: int = sensing.RAYS, window: int = sensing.WINDOW) -> "TrajectoryDataset":
        n = len(episode)
        rec = np.zeros(n, record_dtype(rays, window))
        rec["episode"] = episode
        rec["step"] = step
        rec["capability"] = capability
        rec["timestamp"] = timestamp
        rec["goal_rel"] = np.reshape(goal_rel, (n, 2))
        rec["expert_action"] = np.reshape(expert_action, (n, 3))
        rec["fine"] = np.reshape(fine, (n,) + rec.dtype["fine"].shape)
        rec["coarse"] = np.reshape(coarse, (n,) + rec.dtype["coarse"].shape)
        rec["flags"] = flags
        return cls(rec, rays, window)

    @classmethod
    def from_steps(cls, steps: Iterable[LabeledStep], rays: int = sensing.RAYS,
                   window: int = sensing.WINDOW) -> "TrajectoryDataset":
        steps = list(steps)
        if not steps:
            return cls.empty(rays, window)
        arrays = [s.student_obs.arrays(window) for s in steps]
        return cls.from_arrays(
            [s.episode for s in steps], [s.step for s in steps], [Capability(s.capability).code for s in steps],
            [s.timestamp for s in steps], [s.goal_rel for s in steps], [s.expert_action for s in steps],
            [a[0] for a in arrays], [a[1] for a in arrays], [s.flags for s in steps], rays, window,
        )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def coarse_width(self) -> int:
        return 4 * (self.rays // sensing.POOL)

    def next_episode_id(self) -> int:
        return int(self.records["episode"].max()) + 1 if len(self) else 0

    def concat(self, *others: "TrajectoryDataset") -> "TrajectoryDataset":
        fovs = dict(self.fovs)
        for o in others:
            if o.records.dtype != self.records.dtype:
                raise ValueError("datasets have different record layouts")
            fovs.update(o.fovs)
        return TrajectoryDataset(np.concatenate([self.records] + [o.records for o in others]), self.rays,
                                 self.window, fovs)

    def subset(self, idx) -> "TrajectoryDataset":
        rec = self.records[idx]
        eps = set(np.unique(rec["episode"]).tolist())
        return TrajectoryDataset(rec, self.rays, self.window, {k: v for k, v in self.fovs.items() if k in eps})

    def capabilities(self) -> np.ndarray:
        return self.records["capability"]

    def training_arrays(self, idx=None) -> dict:
        """Float64 arrays keyed as the behavior-cloning loss expects."""
        rec = self.records if idx is None else self.records[idx]
        n = len(rec)
        return {
            "fine": rec["fine"].astype(np.float64),
            "coarse": rec["coarse"].astype(np.float64).reshape(n, self.window - 1, self.coarse_width),
            "goal": rec["goal_rel"].astype(np.float64),
            "expert_action": rec["expert_action"].astype(np.float64),
        }

    def summary(self) -> dict:
        rec = self.records
        caps = {c.value: int(np.sum(rec["capability"] == c.code)) for c in Capability}
        return {
            "records": len(rec),
            "episodes": int(len(np.unique(rec["episode"]))),
            "per_capability": {k: v for k, v in caps.items() if v},
            "terminal": int(np.sum(rec["flags"] & TERMINAL > 0)),
            "reached": int(np.sum(rec["flags"] & REACHED > 0)),
        }


def encode_dataset(ds: TrajectoryDataset) -> bytes:
    rec = np.ascontiguousarray(ds.records, dtype=record_dtype(ds.rays, ds.window))
    return MAGIC + HEADER.pack(VERSION, len(rec)) + rec.tobytes()


def decode_dataset(buf: bytes, rays: int = sensing.RAYS, window: int = sensing.WINDOW) -> TrajectoryDataset:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad dataset magic", 0)
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated dataset header", len(buf))
    version, count = HEADER.unpack_from(buf, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", len(MAGIC))
    dt = record_dtype(rays, window)
    expected = HEADER_SIZE + count * dt.itemsize
    if len(buf) < expected:
        complete = (len(buf) - HEADER_SIZE) // dt.itemsize
        raise FormatError(
            f"truncated dataset: header declares {count} records, file holds {complete} complete",
            HEADER_SIZE + complete * dt.itemsize,
        )
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after {count} records", expected)
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=HEADER_SIZE).copy()
    _validate_records(rec)
    return TrajectoryDataset(rec, rays, window)


def _validate_records(rec: np.ndarray) -> None:
    """Reject field values no writer produces; the offset points at the bad field."""
    dt = rec.dtype
    checks = [
        ("capability", rec["capability"] >= Capability.MIXED.code),
        ("flags", (rec["flags"] & ~np.uint8(TERMINAL | REACHED)) != 0),
        ("expert_action", ~np.all(np.isfinite(rec["expert_action"]), axis=1)),
        ("goal_rel", ~np.all(np.isfinite(rec["goal_rel"]), axis=1)),
        ("timestamp", ~np.isfinite(rec["timestamp"]) | (rec["timestamp"] < 0)),
    ]
    for name, bad in checks:
        if bad.any():
            i = int(np.argmax(bad))
            raise FormatError(f"record {i}: invalid {name}", HEADER_SIZE + i * dt.itemsize + dt.fields[name][1])


def save_dataset(path, ds: TrajectoryDataset) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_dataset(ds))
    os.replace(tmp, path)


def load_dataset(path, rays: int = sensing.RAYS, window: int = sensing.WINDOW) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read(), rays, window)


def check_terminal_flags(ds: TrajectoryDataset) -> Optional[str]:
    """Return a description of the first episode whose terminal flag is not on its last step."""
    rec = ds.records
    for ep in np.unique(rec["episode"]):
        rows = rec[rec["episode"] == ep]
        last = np.argmax(rows["step"])
        term = (rows["flags"] & TERMINAL) > 0
        if term.sum() > 1 or (term.any() and not term[last]):
            return f"episode {ep}: terminal flag not on final step"
    return None
