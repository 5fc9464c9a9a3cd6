"""Real-time monitoring runtime.

Three threads cooperate: a producer pushes camera frames into a rolling
ten-frame stack, a worker repeatedly runs the model on a snapshot of the
newest ten frames, and a consumer turns each result into a warning event.
The worker hands results over through a one-slot mailbox where a newer
result replaces an unread one, so inference never waits on the consumer.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .augment import prescale
from .data import iter_records, load_frame_directory, synthetic_stream

log = logging.getLogger(__name__)

WINDOW = 10


class NotReadyError(RuntimeError):
    """Fewer frames than a full window have been pushed."""


@dataclass(frozen=True)
class Snapshot:
    frames: np.ndarray  # (h, w, WINDOW, 1)
    first: int
    last: int
    newest: int  # stack's latest sequence number when the copy was taken


class FrameStack:
    """Ring of the most recent frames with 1-based sequence numbers."""

    def __init__(self, frame_shape=(224, 224, 1), capacity: int = WINDOW):
        self.frame_shape = tuple(frame_shape)
        self.capacity = capacity
        self._ring = np.zeros((capacity,) + self.frame_shape, np.float32)
        self._count = 0
        self._cond = threading.Condition()

    @property
    def latest(self) -> int:
        return self._count

    @property
    def ready(self) -> bool:
        return self._count >= self.capacity

    def push(self, frame: np.ndarray) -> int:
        frame = np.asarray(frame, np.float32)
        if frame.ndim == 2:
            frame = frame[..., None]
        if frame.shape != self.frame_shape:
            raise ValueError(f"frame shape {frame.shape}, stack holds {self.frame_shape}")
        with self._cond:
            self._ring[self._count % self.capacity] = frame
            self._count += 1
            self._cond.notify_all()
            return self._count

    def snapshot(self) -> Snapshot:
        with self._cond:
            n = self._count
            if n < self.capacity:
                raise NotReadyError(f"{n} of {self.capacity} frames seen")
            idx = np.arange(n - self.capacity, n) % self.capacity
            frames = self._ring[idx]
        return Snapshot(np.moveaxis(frames, 0, 2), n - self.capacity + 1, n, n)

    def wait_beyond(self, seq: int, timeout: float) -> bool:
        """Block until a full window ending after ``seq`` exists."""
        with self._cond:
            return self._cond.wait_for(
                lambda: self._count > seq and self._count >= self.capacity, timeout
            )


def push_frame(stack: FrameStack, frame: np.ndarray) -> FrameStack:
    stack.push(frame)
    return stack


def snapshot_latest10(stack: FrameStack) -> Snapshot:
    return stack.snapshot()


@dataclass(frozen=True)
class InferenceResult:
    prob_drowsy: float
    first: int
    last: int
    started: float
    completed: float


@dataclass(frozen=True)
class WarningPolicy:
    threshold: float = 0.5
    emit_low: bool = False

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class Event:
    kind: str
    result: InferenceResult

    def line(self) -> str:
        r = self.result
        return f"{r.completed:.6f}\t{r.first}-{r.last}\t{r.prob_drowsy:.6f}\t{self.kind}"


def process_result(result: InferenceResult, policy: WarningPolicy) -> Event | None:
    """WARN when the drowsy probability is strictly above the threshold;
    otherwise OK in demo mode and nothing at all outside it."""
    if result.prob_drowsy > policy.threshold:
        return Event("WARN", result)
    if policy.emit_low:
        return Event("OK", result)
    return None


class _Mailbox:
    """Single-slot hand-off; ``put`` overwrites and never blocks."""

    def __init__(self):
        self._item = None
        self._closed = False
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item):
        with self._cond:
            if self._item is not None:
                self.dropped += 1
            self._item = item
            self._cond.notify()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify()

    def get(self):
        """Next item, or None once closed and drained."""
        with self._cond:
            self._cond.wait_for(lambda: self._item is not None or self._closed)
            item, self._item = self._item, None
            return item


# ----------------------------------------------------------------------
# Frame sources
# ----------------------------------------------------------------------


class FrameSource:
    """Frames at a declared rate; iteration yields ``(h, w)`` float frames."""

    def __init__(self, frames: Iterable[np.ndarray], fps: float = 30.0):
        self._frames = frames
        self.fps = fps

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._frames)


def record_source(path, fps: float = 30.0, loop: bool = False) -> FrameSource:
    def gen():
        while True:
            for rec in iter_records(path):
                yield from rec.clip
            if not loop:
                return
    return FrameSource(gen(), fps)


def directory_source(path, fps: float = 30.0, loop: bool = False) -> FrameSource:
    frames = load_frame_directory(path)

    def gen():
        while True:
            yield from frames
            if not loop:
                return
    return FrameSource(gen(), fps)


def synthetic_source(seed: int, size: int, fps: float = 30.0, drowsy_share: float = 0.5,
                     height: int | None = None, width: int | None = None) -> FrameSource:
    return FrameSource(synthetic_stream(seed, height or size, width or size,
                                        drowsy_share=drowsy_share), fps)


# ----------------------------------------------------------------------
# Monitor
# ----------------------------------------------------------------------


@dataclass
class RunSummary:
    duration: float = 0.0
    frames_received: int = 0
    frames_consumed: int = 0
    inference_count: int = 0
    mean_latency_ms: float = 0.0
    max_latency_ms: float = 0.0
    warnings: int = 0
    results_dropped: int = 0
    error: str | None = None
    results: list[InferenceResult] = field(default_factory=list)
    processed: list[tuple[InferenceResult, str | None, float, float]] = field(default_factory=list)
    newest_at_start: list[int] = field(default_factory=list)
    threshold: float = 0.5

    @property
    def single_flight(self) -> bool:
        spans = sorted((r.started, r.completed) for r in self.results)
        return all(b[0] >= a[1] for a, b in zip(spans, spans[1:]))

    @property
    def fresh(self) -> bool:
        return all(r.last == n and r.last - r.first == WINDOW - 1
                   for r, n in zip(self.results, self.newest_at_start))

    @property
    def warnings_sound(self) -> bool:
        return all((kind == "WARN") == (r.prob_drowsy > self.threshold)
                   for r, kind, _, _ in self.processed)

    @property
    def overlap_seen(self) -> bool:
        """Some result was still being processed after the next inference began."""
        starts = sorted(r.started for r in self.results)
        for r, _, p0, p1 in self.processed:
            later = [s for s in starts if s >= r.completed]
            if later and p1 > later[0]:
                return True
        return False

    def producer_on_rate(self, fps: float, tolerance: int = 2) -> bool:
        return abs(self.frames_received - round(fps * self.duration)) <= tolerance

    def checks(self, fps: float | None = None) -> dict[str, bool]:
        out = {
            "single_flight": self.single_flight,
            "fresh": self.fresh,
            "warnings_sound": self.warnings_sound,
        }
        if fps is not None:
            out["producer_on_rate"] = self.producer_on_rate(fps)
        return out

    def report(self) -> str:
        return (f"duration_s\t{self.duration:.3f}\n"
                f"frames_received\t{self.frames_received}\n"
                f"frames_consumed\t{self.frames_consumed}\n"
                f"inferences\t{self.inference_count}\n"
                f"mean_latency_ms\t{self.mean_latency_ms:.2f}\n"
                f"max_latency_ms\t{self.max_latency_ms:.2f}\n"
                f"warnings\t{self.warnings}\n"
                f"results_dropped\t{self.results_dropped}\n")


def run_monitor(source: FrameSource, model, policy: WarningPolicy = WarningPolicy(),
                sink: Callable[[str], None] | None = None,
                stop: threading.Event | None = None, *, duration: float | None = None,
                processing_delay: float = 0.0, clock=time.monotonic) -> RunSummary:
    """Replay ``source`` in real time through ``model`` until the source ends,
    ``duration`` seconds pass, or ``stop`` is set.

    ``model`` needs ``config.spatial`` and ``predict_proba``. ``sink``
    receives one line per event.
    """
    stop = stop or threading.Event()
    size = model.config.spatial
    stack = FrameStack((size, size, 1))
    mailbox = _Mailbox()
    summary = RunSummary(threshold=policy.threshold)
    sink = sink or (lambda line: None)
    producer_done = threading.Event()
    t0 = clock()

    def producer():
        period = 1.0 / source.fps
        try:
            for i, frame in enumerate(source):
                due = t0 + i * period
                if duration is not None and due - t0 >= duration:
                    break
                wait = due - clock()
                if wait > 0 and stop.wait(wait):
                    break
                if stop.is_set():
                    break
                if frame.shape[:2] != (size, size):
                    frame = prescale(np.asarray(frame, np.float32), size)
                stack.push(frame)
                summary.frames_received += 1
        except Exception as exc:  # source failure ends the run cleanly
            summary.error = f"source failed: {exc!r}"
            log.error(summary.error)
        finally:
            producer_done.set()
            stop.set()

    def worker():
        last = 0
        try:
            while not stop.is_set():
                if not stack.wait_beyond(last, 0.05):
                    continue
                snap = stack.snapshot()
                summary.newest_at_start.append(snap.newest)
                started = clock()
                prob = float(model.predict_proba(snap.frames[None])[0])
                done = clock()
                result = InferenceResult(prob, snap.first, snap.last, started, done)
                summary.results.append(result)
                mailbox.put(result)
                last = snap.last
        except Exception as exc:
            summary.error = f"inference failed: {exc!r}"
            log.error(summary.error)
            stop.set()
        finally:
            mailbox.close()

    def consumer():
        while True:
            result = mailbox.get()
            if result is None:
                return
            p0 = clock()
            if processing_delay:
                time.sleep(processing_delay)
            event = process_result(result, policy)
            if event is not None:
                sink(event.line())
                if event.kind == "WARN":
                    summary.warnings += 1
            summary.processed.append((result, event.kind if event else None, p0, clock()))

    threads = [threading.Thread(target=f, name=f.__name__, daemon=True)
               for f in (producer, worker, consumer)]
    for t in threads:
        t.start()
    if duration is not None:
        stop.wait(duration)
        stop.set()
    for t in threads:
        t.join()
    summary.duration = (min(duration, clock() - t0) if duration is not None else clock() - t0)
    summary.inference_count = len(summary.results)
    lat = [1000 * (r.completed - r.started) for r in summary.results]
    summary.mean_latency_ms = float(np.mean(lat)) if lat else 0.0
    summary.max_latency_ms = float(np.max(lat)) if lat else 0.0
    consumed = set()
    for r in summary.results:
        consumed.update(range(r.first, r.last + 1))
    summary.frames_consumed = len(consumed)
    summary.results_dropped = mailbox.dropped
    return summary
