"""Dataset preparation, the binary record container and the synthetic task.

Record files (``DDR1``) hold labeled grayscale clips stored as 8-bit
pixels. A manifest lists record files with their clip geometry, one
``path<TAB>count<TAB>F<TAB>H<TAB>W`` line per file.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .augment import resize_bilinear

RECORD_MAGIC = b"DDR1"
RECORD_VERSION = 1
TRAIN_CHUNK = 100
EVAL_CHUNK = 10

_FILE_HEADER = struct.Struct("<4sIQ")
_RECORD_HEADER = struct.Struct("<IIIB")


class RecordFormatError(ValueError):
    pass


class BadMagicError(RecordFormatError):
    pass


class VersionMismatchError(RecordFormatError):
    pass


class TruncatedRecordError(RecordFormatError):
    def __init__(self, index: int, msg: str):
        super().__init__(f"record {index}: {msg}")
        self.index = index


class LabelError(RecordFormatError):
    pass


@dataclass
class VideoRecord:
    """A labeled clip; ``frames`` is ``(F, H, W, 1)`` uint8."""

    frames: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise LabelError(f"label must be 0 or 1, got {self.label}")
        if self.frames.ndim == 3:
            self.frames = self.frames[..., None]
        if self.frames.ndim != 4 or self.frames.shape[-1] != 1:
            raise ValueError(f"frames must be F x H x W x 1, got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise TypeError("frames are stored as uint8")

    @classmethod
    def from_float(cls, frames: np.ndarray, label: int) -> "VideoRecord":
        """Quantize ``[0, 1]`` floats shaped ``(F, H, W)`` or ``(F, H, W, 1)``."""
        q = np.round(np.clip(frames, 0, 1) * 255).astype(np.uint8)
        return cls(q, label)

    @property
    def clip(self) -> np.ndarray:
        """Float ``(F, H, W)`` in ``[0, 1]``."""
        return self.frames[..., 0].astype(np.float32) / 255.0

    @property
    def geometry(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[:3])

    def __eq__(self, other):
        return (isinstance(other, VideoRecord) and self.label == other.label
                and self.frames.shape == other.frames.shape
                and bool(np.array_equal(self.frames, other.frames)))


# ----------------------------------------------------------------------
# Preparation
# ----------------------------------------------------------------------


def fps_upsample(frames: np.ndarray) -> np.ndarray:
    """15 -> 30 fps by showing every frame twice."""
    if len(frames) == 0:
        raise ValueError("no frames to upsample")
    return np.repeat(frames, 2, axis=0)


def resize_and_gray(frame: np.ndarray) -> np.ndarray:
    """Luma of an RGB frame, downscaled by two in each direction.

    Accepts ``(2h, 2w, 3)`` uint8 or float input and returns float32
    ``(h, w)`` in the input's value range scaled to ``[0, 1]`` for uint8.
    """
    if frame.ndim != 3 or frame.shape[-1] != 3 or frame.shape[0] % 2 or frame.shape[1] % 2:
        raise ValueError(f"expected an even-sized RGB frame, got {frame.shape}")
    f = frame.astype(np.float32)
    if frame.dtype == np.uint8:
        f /= 255.0
    luma = f @ np.array([0.299, 0.587, 0.114], np.float32)
    return resize_bilinear(luma, frame.shape[0] // 2, frame.shape[1] // 2)


def split_video(frames: np.ndarray, label: int, mode: str = "train") -> list[VideoRecord]:
    """Cut a video into non-overlapping records; the remainder is dropped.

    ``frames`` is float ``(N, H, W)`` in ``[0, 1]`` or uint8.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    chunk = TRAIN_CHUNK if mode == "train" else EVAL_CHUNK
    out = []
    for i in range(len(frames) // chunk):
        part = frames[i * chunk:(i + 1) * chunk]
        if part.dtype == np.uint8:
            out.append(VideoRecord(np.ascontiguousarray(part), label))
        else:
            out.append(VideoRecord.from_float(part, label))
    return out


def load_frame_directory(path) -> np.ndarray:
    """Read a directory of frames (``.npy`` or image files) in name order.

    Returns float32 ``(N, H, W)`` in ``[0, 1]``; color images are reduced
    to luma.
    """
    files = sorted(p for p in Path(path).iterdir() if p.is_file())
    frames = []
    for p in files:
        if p.suffix == ".npy":
            a = np.load(p)
        else:
            from PIL import Image

            with Image.open(p) as im:
                a = np.asarray(im.convert("L"))
        if a.dtype == np.uint8:
            a = a.astype(np.float32) / 255.0
        if a.ndim == 3 and a.shape[-1] == 3:
            a = a @ np.array([0.299, 0.587, 0.114], np.float32)
        elif a.ndim == 3 and a.shape[-1] == 1:
            a = a[..., 0]
        frames.append(np.asarray(a, np.float32))
    if not frames:
        raise ValueError(f"no frames found in {path}")
    return np.stack(frames)


# ----------------------------------------------------------------------
# Record container
# ----------------------------------------------------------------------


def write_records(records: Iterable[VideoRecord], path) -> int:
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(RECORD_MAGIC, RECORD_VERSION, len(records)))
        for rec in records:
            f, h, w = rec.geometry
            fh.write(_RECORD_HEADER.pack(f, h, w, rec.label))
            fh.write(np.ascontiguousarray(rec.frames).tobytes())
    return len(records)


def iter_records(path) -> Iterator[VideoRecord]:
    """Yield records in file order, validating as it goes."""
    with open(path, "rb") as fh:
        head = fh.read(_FILE_HEADER.size)
        if len(head) < 4 or head[:4] != RECORD_MAGIC:
            raise BadMagicError(f"{path}: not a record file")
        if len(head) < _FILE_HEADER.size:
            raise TruncatedRecordError(-1, "file header is incomplete")
        _, version, count = _FILE_HEADER.unpack(head)
        if version != RECORD_VERSION:
            raise VersionMismatchError(f"{path}: version {version}, expected {RECORD_VERSION}")
        for i in range(count):
            rh = fh.read(_RECORD_HEADER.size)
            if len(rh) < _RECORD_HEADER.size:
                raise TruncatedRecordError(i, "header cut short")
            f, h, w, label = _RECORD_HEADER.unpack(rh)
            if label not in (0, 1):
                raise LabelError(f"record {i}: label byte {label}")
            n = f * h * w
            payload = fh.read(n)
            if len(payload) < n:
                raise TruncatedRecordError(i, f"payload has {len(payload)} of {n} bytes")
            frames = np.frombuffer(payload, np.uint8).reshape(f, h, w, 1)
            yield VideoRecord(frames.copy(), label)
        if fh.read(1):
            raise RecordFormatError(f"{path}: trailing bytes after {count} records")


def read_records(path) -> list[VideoRecord]:
    return list(iter_records(path))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    count: int
    frames: int
    height: int
    width: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    def write(self, path) -> None:
        lines = [f"{e.path}\t{e.count}\t{e.frames}\t{e.height}\t{e.width}\n"
                 for e in self.entries]
        Path(path).write_text("".join(lines))

    @classmethod
    def read(cls, path, split: str = "train") -> "DatasetManifest":
        entries = []
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise RecordFormatError(f"{path}:{ln}: expected 5 fields")
            p = Path(parts[0])
            if not p.is_absolute():
                p = Path(path).parent / p
            entries.append(ManifestEntry(str(p), *(int(x) for x in parts[1:])))
        return cls(entries, split)

    def load(self) -> list[VideoRecord]:
        """Read every listed file, checking counts and geometry."""
        out = []
        for e in self.entries:
            recs = read_records(e.path)
            if len(recs) != e.count:
                raise RecordFormatError(f"{e.path}: manifest says {e.count}, file has {len(recs)}")
            for r in recs:
                if r.geometry != (e.frames, e.height, e.width):
                    raise RecordFormatError(f"{e.path}: record geometry {r.geometry} "
                                            f"differs from manifest")
            out.extend(recs)
        return out


def write_dataset(records: list[VideoRecord], path, split: str = "train") -> DatasetManifest:
    """Write one record file and return a manifest describing it."""
    geoms = {r.geometry for r in records}
    if len(geoms) != 1:
        raise ValueError(f"records must share one geometry, got {sorted(geoms)}")
    write_records(records, path)
    f, h, w = geoms.pop()
    return DatasetManifest([ManifestEntry(str(path), len(records), f, h, w)], split)


# ----------------------------------------------------------------------
# Synthetic blink-vs-microsleep task
# ----------------------------------------------------------------------

CLIP_KINDS = ("alert", "closure", "nod")
# share of drowsy clips that are sustained closures; the rest are nods. With
# nods carrying up to 30% closed frames this makes the per-frame chance of
# closed eyes 30% in both classes.
CLOSURE_SHARE = 0.2


def _closed_run(rng, frames: int, kind: str) -> np.ndarray:
    """Eye-closed flags: one run placed at a uniform start, wrapping around
    the clip end so every frame index is closed with probability k/F."""
    if kind == "alert":
        k = max(1, int(0.3 * frames))
    elif kind == "closure":
        k = int(rng.integers(math.ceil(0.8 * frames), frames + 1))
    else:
        k = int(rng.integers(0, int(0.3 * frames) + 1))
    start = int(rng.integers(0, frames))
    closed = np.zeros(frames, bool)
    closed[(start + np.arange(k)) % frames] = True
    return closed


def render_clip(kind: str, rng: np.random.Generator, frames: int = 10, height: int = 240,
                width: int = 320, noise: float = 0.03):
    """Draw one schematic face clip.

    Returns ``(clip, closed, center_rows)``: float ``(F, H, W)`` pixels,
    per-frame eye-closed flags, and the face center row per frame. The
    face rests at a row drawn from one range for all kinds; ``nod`` sweeps
    downward through that resting row, everything else stays put.
    """
    if kind not in CLIP_KINDS:
        raise ValueError(f"unknown clip kind {kind!r}")
    H, W = height, width
    closed = _closed_run(rng, frames, kind)
    rest = rng.uniform(0.35, 0.65) * H
    if kind == "nod":
        amplitude = rng.uniform(0.08, 0.12) * H
        phase = np.arange(frames) / max(frames - 1, 1) - 0.5
    else:
        amplitude = 0.0
        phase = np.zeros(frames)
    rows = rest + amplitude * phase
    cx = W / 2 + rng.uniform(-0.08, 0.08) * H
    ry, rx = 0.3 * H, 0.23 * H
    skin = rng.uniform(0.55, 0.7)
    bg_level = rng.uniform(0.15, 0.3)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    clip = np.empty((frames, H, W), np.float32)
    for t in range(frames):
        cy = rows[t]
        img = np.full((H, W), bg_level, np.float32)
        face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        img[face] = skin
        ey = cy - 0.07 * H
        for ex in (cx - 0.09 * H, cx + 0.09 * H):
            eye = ((yy - ey) / (0.035 * H)) ** 2 + ((xx - ex) / (0.06 * H)) ** 2 <= 1
            img[eye] = 0.08 if closed[t] else 0.95
        clip[t] = img
    clip += rng.normal(0, noise, clip.shape).astype(np.float32)
    return np.clip(clip, 0, 1), closed, rows


def generate_synthetic(count: int, seed: int, frames: int = 10, height: int = 240,
                       width: int = 320) -> list[VideoRecord]:
    """Balanced synthetic dataset; label 1 clips are closures or nods."""
    if count < 2:
        raise ValueError("need at least two records")
    rng = np.random.default_rng(seed)
    labels = np.array([1] * (count // 2) + [0] * (count - count // 2))
    rng.shuffle(labels)
    records = []
    for label in labels:
        if label == 0:
            kind = "alert"
        else:
            kind = "closure" if rng.random() < CLOSURE_SHARE else "nod"
        clip, _, _ = render_clip(kind, rng, frames, height, width)
        records.append(VideoRecord.from_float(clip, int(label)))
    return records


def synthetic_stream(seed: int, height: int, width: int, clip_frames: int = 10,
                     drowsy_share: float = 0.5) -> Iterator[np.ndarray]:
    """Endless frame stream stitched from synthetic clips."""
    rng = np.random.default_rng(seed)
    while True:
        if rng.random() < drowsy_share:
            kind = "closure" if rng.random() < 0.5 else "nod"
        else:
            kind = "alert"
        clip, _, _ = render_clip(kind, rng, clip_frames, height, width)
        yield from clip
