"""Synthetic moving-shape sequences, their file format and batching.

Each sequence shows one binary shape (the static factor: shape type, size,
intensity) translated over the frame by one motion type (the dynamic
factor). Positions are kept in continuous coordinates and rounded when the
mask is stamped, so every frame's mask is an integer shift of the first.

Motion types:

``line``
    Axis-aligned constant velocity, reflected at the walls.
``diagonal``
    Velocity along one of the four diagonals, reflected at the walls.
``zigzag``
    Constant horizontal velocity, vertical velocity flips every two steps.
``bounce``
    Random direction; at every wall contact a new speed and direction are
    drawn (pointing away from the wall).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import FormatError, InvalidArgumentError

SHAPES = ("triangle", "square", "circle")
MOTIONS = ("line", "diagonal", "zigzag", "bounce")

DATA_MAGIC = "RWAEDATA"
DATA_VERSION = 1


@dataclass
class GeneratorConfig:
    image_size: int = 16
    frames: int = 8
    n_sequences: int = 3000
    shapes: tuple[str, ...] = SHAPES
    sizes: tuple[int, ...] = (7,)
    intensities: tuple[float, ...] = (1.0,)
    motions: tuple[str, ...] = ("line", "diagonal", "zigzag")
    speed_range: tuple[float, float] = (1.0, 2.0)
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 1 or self.frames < 1 or self.n_sequences < 1:
            raise InvalidArgumentError("image_size, frames and n_sequences must be positive")
        for name in ("shapes", "sizes", "intensities", "motions"):
            if len(getattr(self, name)) == 0:
                raise InvalidArgumentError(f"{name} needs at least one value")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise InvalidArgumentError(f"unknown shape types {sorted(unknown)}; choose from {SHAPES}")
        unknown = set(self.motions) - set(MOTIONS)
        if unknown:
            raise InvalidArgumentError(f"unknown motion types {sorted(unknown)}; choose from {MOTIONS}")
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise InvalidArgumentError(f"speed range must satisfy 0 < lo <= hi, got {self.speed_range}")
        for s in self.sizes:
            if s < 2 or s > self.image_size:
                raise InvalidArgumentError(f"shape size {s} does not fit a {self.image_size}px frame")
        for v in self.intensities:
            if not (0.0 < v <= 1.0):
                raise InvalidArgumentError("intensities must lie in (0, 1]")


@dataclass
class SequenceDataset:
    """Frames (N, T, C, H, W) float32 in [0, 1] with optional labels."""

    frames: np.ndarray
    content: Optional[np.ndarray] = None
    motion: Optional[np.ndarray] = None
    shape_names: tuple[str, ...] = ()
    motion_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[2:])

    @property
    def seq_len(self) -> int:
        return self.frames.shape[1]

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx)
        return SequenceDataset(
            self.frames[idx],
            None if self.content is None else self.content[idx],
            None if self.motion is None else self.motion[idx],
            self.shape_names,
            self.motion_names,
        )

    def label_counts(self) -> dict[str, dict[str, int]]:
        out = {}
        if self.content is not None:
            out["shape"] = {n: int((self.content == i).sum()) for i, n in enumerate(self.shape_names)}
        if self.motion is not None:
            out["motion"] = {n: int((self.motion == i).sum()) for i, n in enumerate(self.motion_names)}
        return out


@dataclass
class SequenceBatch:
    frames: torch.Tensor
    content: Optional[torch.Tensor] = None
    motion: Optional[torch.Tensor] = None
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


# rendering ------------------------------------------------------------------


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Binary (size, size) mask of one shape."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        c = (size - 1) / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2 - 0.25
    if kind == "triangle":
        # apex at top centre, base on the last row
        c = (size - 1) / 2.0
        half_width = (yy + 1) * (size / 2.0) / size
        return np.abs(xx - c) <= half_width
    raise InvalidArgumentError(f"unknown shape {kind!r}")


def _reflect(pos: float, vel: float, limit: float) -> tuple[float, float, bool]:
    hit = False
    while pos < 0 or pos > limit:
        hit = True
        if pos < 0:
            pos, vel = -pos, -vel
        else:
            pos, vel = 2 * limit - pos, -vel
    return pos, vel, hit


def trajectory(motion: str, frames: int, limit: float, speed_range, rng: np.random.Generator) -> np.ndarray:
    """Top-left corner positions (frames, 2) as (row, col) floats in [0, limit]."""
    lo, hi = speed_range
    speed = rng.uniform(lo, hi)
    pos = rng.uniform(0, limit, size=2)
    if motion == "line":
        axis = rng.integers(2)
        vel = np.zeros(2)
        vel[axis] = speed * rng.choice([-1.0, 1.0])
    elif motion == "diagonal":
        vel = speed * rng.choice([-1.0, 1.0], size=2)
    elif motion == "zigzag":
        vel = np.array([speed * rng.choice([-1.0, 1.0]), speed * rng.choice([-1.0, 1.0])])
    elif motion == "bounce":
        theta = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.sin(theta), np.cos(theta)])
    else:
        raise InvalidArgumentError(f"unknown motion {motion!r}")

    out = np.empty((frames, 2))
    out[0] = pos
    for t in range(1, frames):
        if motion == "zigzag" and t % 2 == 0:
            vel[0] = -vel[0]
        new = pos + vel
        hits = [False, False]
        for k in range(2):
            new[k], vel[k], hits[k] = _reflect(new[k], vel[k], limit)
        if motion == "bounce" and any(hits):
            s = rng.uniform(lo, hi)
            theta = rng.uniform(0, 2 * np.pi)
            fresh = s * np.array([np.sin(theta), np.cos(theta)])
            # after a wall contact the new velocity still points away from that wall
            for k in range(2):
                if hits[k]:
                    fresh[k] = np.copysign(fresh[k], vel[k])
            vel = fresh
        pos = new
        out[t] = pos
    return out


def render(mask: np.ndarray, positions: np.ndarray, image_size: int, intensity: float) -> np.ndarray:
    """Stamp ``mask`` at rounded positions; returns (T, H, W) float32."""
    size = mask.shape[0]
    frames = np.zeros((positions.shape[0], image_size, image_size), dtype=np.float32)
    corners = np.clip(np.rint(positions).astype(int), 0, image_size - size)
    for t, (r, c) in enumerate(corners):
        frames[t, r : r + size, c : c + size][mask] = intensity
    return frames


def generate_dataset(cfg: GeneratorConfig) -> SequenceDataset:
    """Render ``cfg.n_sequences`` labelled sequences, deterministically in ``cfg.seed``."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.n_sequences)
    n, t, hw = cfg.n_sequences, cfg.frames, cfg.image_size
    frames = np.zeros((n, t, 1, hw, hw), dtype=np.float32)
    content = np.zeros(n, dtype=np.int32)
    motion = np.zeros(n, dtype=np.int32)
    masks = {}
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        s_id = int(rng.integers(len(cfg.shapes)))
        m_id = int(rng.integers(len(cfg.motions)))
        size = int(cfg.sizes[rng.integers(len(cfg.sizes))])
        intensity = float(cfg.intensities[rng.integers(len(cfg.intensities))])
        key = (cfg.shapes[s_id], size)
        if key not in masks:
            masks[key] = shape_mask(*key)
        pos = trajectory(cfg.motions[m_id], t, float(hw - size), cfg.speed_range, rng)
        frames[i, :, 0] = render(masks[key], pos, hw, intensity)
        content[i] = s_id
        motion[i] = m_id
    return SequenceDataset(frames, content, motion, tuple(cfg.shapes), tuple(cfg.motions))


# file format ------------------------------------------------------------------


def save_dataset(ds: SequenceDataset, path) -> None:
    """Text header, then frames as <f4 in N-T-C-H-W order, then labels as <i4."""
    n, t, c, h, w = ds.frames.shape
    has_labels = ds.content is not None and ds.motion is not None
    header = [
        f"{DATA_MAGIC}",
        f"version={DATA_VERSION}",
        f"B={n}",
        f"T={t}",
        f"C={c}",
        f"H={h}",
        f"W={w}",
        f"labels={int(has_labels)}",
        "shapes=" + ",".join(ds.shape_names),
        "motions=" + ",".join(ds.motion_names),
        "END",
    ]
    buf = io.BytesIO()
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    buf.write(np.ascontiguousarray(ds.frames, dtype="<f4").tobytes())
    if has_labels:
        buf.write(np.ascontiguousarray(ds.content, dtype="<i4").tobytes())
        buf.write(np.ascontiguousarray(ds.motion, dtype="<i4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_header(raw: bytes) -> tuple[dict[str, str], int]:
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise FormatError("dataset header is missing or truncated")
    lines = raw[:end].decode("ascii", errors="replace").split("\n")
    if not lines or lines[0] != DATA_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    fields = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        fields[key] = value
    return fields, end + len(b"\nEND\n")


def load_dataset(path) -> SequenceDataset:
    raw = Path(path).read_bytes()
    fields, offset = _read_header(raw)
    try:
        version = int(fields["version"])
    except (KeyError, ValueError):
        raise FormatError("dataset header has no valid version") from None
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset format version {version} (expected {DATA_VERSION})")
    try:
        n, t, c, h, w = (int(fields[k]) for k in "BTCHW")
        has_labels = bool(int(fields["labels"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad dataset header: {exc}") from None
    if min(n, t, c, h, w) < 1:
        raise FormatError("dataset header has non-positive dimensions")
    shapes = tuple(s for s in fields.get("shapes", "").split(",") if s)
    motions = tuple(s for s in fields.get("motions", "").split(",") if s)

    frame_bytes = n * t * c * h * w * 4
    expected = offset + frame_bytes + (2 * n * 4 if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(f"dataset payload is {len(raw) - offset} bytes, header implies {expected - offset}")
    frames = np.frombuffer(raw, dtype="<f4", count=n * t * c * h * w, offset=offset)
    frames = frames.astype(np.float32).reshape(n, t, c, h, w)
    content = motion = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<i4", count=2 * n, offset=offset + frame_bytes).astype(np.int32)
        content, motion = labels[:n].copy(), labels[n:].copy()
        if (content < 0).any() or (content >= max(len(shapes), 1)).any():
            raise FormatError("content label out of range of the shape vocabulary")
        if (motion < 0).any() or (motion >= max(len(motions), 1)).any():
            raise FormatError("motion label out of range of the motion vocabulary")
    return SequenceDataset(frames, content, motion, shapes, motions)


# batching -----------------------------------------------------------------------


def batch_indices(n: int, batch_size: int, shuffle_seed) -> list[np.ndarray]:
    """Shuffled index blocks of exactly ``batch_size``; the short tail is dropped."""
    if batch_size < 2:
        raise InvalidArgumentError(f"batch size must be >= 2, got {batch_size}")
    order = np.random.default_rng(shuffle_seed).permutation(n)
    n_full = n // batch_size
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(n_full)]


def make_batch(ds: SequenceDataset, idx: np.ndarray, dtype=torch.float32) -> SequenceBatch:
    frames = torch.from_numpy(ds.frames[idx]).to(dtype)
    content = None if ds.content is None else torch.from_numpy(ds.content[idx].astype(np.int64))
    motion = None if ds.motion is None else torch.from_numpy(ds.motion[idx].astype(np.int64))
    return SequenceBatch(frames, content, motion, np.asarray(idx))


def batches(ds: SequenceDataset, batch_size: int, shuffle_seed, dtype=torch.float32) -> Iterator[SequenceBatch]:
    """One epoch of batches; every sequence appears at most once."""
    for idx in batch_indices(len(ds), batch_size, shuffle_seed):
        yield make_batch(ds, idx, dtype)


def split(ds: SequenceDataset, n_test: int, seed: int = 0) -> tuple[SequenceDataset, SequenceDataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def frames_in_unit_range(frames: Sequence) -> bool:
    arr = np.asarray(frames)
    return bool(np.isfinite(arr).all() and (arr >= 0).all() and (arr <= 1).all())
