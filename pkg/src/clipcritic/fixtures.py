"""Synthetic annotated videos and frame access for tools and tests.

A fixture is a JSON description of a video: captioned frames, labeled
events, an optional transcript, and question-answering facts. Tools backed
by fixtures behave deterministically, which makes the whole pipeline
testable without pixels or models. A frames directory plus sidecar
metadata serves the same role for live runs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Union

from .core import (
    TimestampError,
    VideoRef,
    VideoSegment,
    VideoSource,
    format_timestamp,
    parse_timestamp,
)


class FixtureError(ValueError):
    """A fixture file that violates the schema, with a field-level message."""


@dataclass(frozen=True)
class FrameRef:
    """One addressable frame: ordinal within the video, time, and payload."""

    index: int
    t: float
    caption: str | None = None
    path: str | None = None

    def label(self) -> str:
        return format_timestamp(int(round(self.t)))


@dataclass(frozen=True)
class Event:
    segment: VideoSegment
    label: str
    justification: str


@dataclass(frozen=True)
class AsrLine:
    t: int
    text: str


@dataclass(frozen=True)
class QaFact:
    evidence: VideoSegment
    keywords: tuple[str, ...]
    answer: str


@dataclass(frozen=True)
class VideoFixture:
    duration: int
    fps: float
    frames: tuple[FrameRef, ...]
    events: tuple[Event, ...] = ()
    asr: tuple[AsrLine, ...] = ()
    qa_facts: tuple[QaFact, ...] = ()

    def full_segment(self) -> VideoSegment:
        return VideoSegment(0, self.duration)


@dataclass(frozen=True)
class FramesDirectory:
    duration: int
    fps: float
    paths: tuple[str, ...]

    def full_segment(self) -> VideoSegment:
        return VideoSegment(0, self.duration)


FrameSource = Union[VideoFixture, FramesDirectory, VideoRef]


@dataclass(frozen=True)
class FrameWindow:
    indices: tuple[int, ...]
    refs: tuple[FrameRef, ...]
    segment: VideoSegment


# --- loading ---


def _parse_time_field(value, where: str) -> int:
    if not isinstance(value, str):
        raise FixtureError(f"{where}: expected an MM:SS string, got {value!r}")
    try:
        return parse_timestamp(value)
    except TimestampError as exc:
        raise FixtureError(f"{where}: {exc}") from exc


def _segment_field(obj: dict, where: str, duration: int) -> VideoSegment:
    start = _parse_time_field(obj.get("start"), f"{where}.start")
    end = _parse_time_field(obj.get("end"), f"{where}.end")
    if start > end:
        raise FixtureError(f"{where}: start {start} after end {end}")
    if end > duration:
        raise FixtureError(
            f"{where}: segment ends at {format_timestamp(end)} "
            f"but the video lasts {format_timestamp(duration)}"
        )
    return VideoSegment(start, end)


def load_fixture(path: str) -> VideoFixture:
    """Load and validate a fixture file; diagnostics name the bad field."""
    if not os.path.exists(path):
        raise FixtureError(f"fixture file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FixtureError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FixtureError(f"{path}: top level must be an object")
    if "duration" not in data:
        raise FixtureError(f"{path}: missing required key 'duration'")
    duration = _parse_time_field(data["duration"], f"{path}: duration")
    if duration <= 0:
        raise FixtureError(f"{path}: duration must be positive")
    fps = data.get("fps", 1)
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise FixtureError(f"{path}: fps must be a positive number")

    frames = []
    prev_t = -1
    for i, entry in enumerate(data.get("frames", [])):
        where = f"{path}: frames[{i}]"
        if not isinstance(entry, dict):
            raise FixtureError(f"{where}: expected an object")
        t = _parse_time_field(entry.get("t"), f"{where}.t")
        if t <= prev_t:
            raise FixtureError(f"{where}: frame times must be strictly increasing")
        if t > duration:
            raise FixtureError(f"{where}: t beyond video duration")
        caption = entry.get("caption", "")
        if not isinstance(caption, str):
            raise FixtureError(f"{where}.caption: expected a string")
        frames.append(FrameRef(index=i, t=float(t), caption=caption))
        prev_t = t

    events = []
    for i, entry in enumerate(data.get("events", [])):
        where = f"{path}: events[{i}]"
        if not isinstance(entry, dict):
            raise FixtureError(f"{where}: expected an object")
        segment = _segment_field(entry, where, duration)
        label = entry.get("label")
        if not isinstance(label, str) or not label:
            raise FixtureError(f"{where}.label: expected a nonempty string")
        justification = entry.get("justification", "")
        if not isinstance(justification, str):
            raise FixtureError(f"{where}.justification: expected a string")
        events.append(Event(segment, label, justification))

    asr = []
    prev_t = -1
    for i, entry in enumerate(data.get("asr", [])):
        where = f"{path}: asr[{i}]"
        if not isinstance(entry, dict):
            raise FixtureError(f"{where}: expected an object")
        t = _parse_time_field(entry.get("t"), f"{where}.t")
        if t > duration:
            raise FixtureError(f"{where}: t beyond video duration")
        if t < prev_t:
            raise FixtureError(f"{where}: transcript times must be non-decreasing")
        text = entry.get("text")
        if not isinstance(text, str):
            raise FixtureError(f"{where}.text: expected a string")
        asr.append(AsrLine(t, text))
        prev_t = t

    qa_facts = []
    for i, entry in enumerate(data.get("qa_facts", [])):
        where = f"{path}: qa_facts[{i}]"
        if not isinstance(entry, dict):
            raise FixtureError(f"{where}: expected an object")
        evidence = _segment_field(entry, where, duration)
        keywords = entry.get("keywords")
        if (
            not isinstance(keywords, list)
            or not keywords
            or not all(isinstance(k, str) and k for k in keywords)
        ):
            raise FixtureError(f"{where}.keywords: expected a nonempty string list")
        answer = entry.get("answer")
        if not isinstance(answer, str) or not answer:
            raise FixtureError(f"{where}.answer: expected a nonempty string")
        qa_facts.append(QaFact(evidence, tuple(keywords), answer))

    return VideoFixture(
        duration=duration,
        fps=float(fps),
        frames=tuple(frames),
        events=tuple(events),
        asr=tuple(asr),
        qa_facts=tuple(qa_facts),
    )


def load_frames_directory(path: str, metadata_name: str = "metadata.json") -> FramesDirectory:
    """Directory of image files named by zero-padded index, plus metadata."""
    if not os.path.isdir(path):
        raise FixtureError(f"frames directory not found: {path}")
    meta_path = os.path.join(path, metadata_name)
    if not os.path.exists(meta_path):
        raise FixtureError(f"{path}: missing sidecar {metadata_name}")
    with open(meta_path, encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FixtureError(f"{meta_path}: invalid JSON: {exc}") from exc
    duration = _parse_time_field(meta.get("duration"), f"{meta_path}: duration")
    fps = meta.get("fps", 1)
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise FixtureError(f"{meta_path}: fps must be a positive number")
    names = sorted(
        n
        for n in os.listdir(path)
        if n != metadata_name and os.path.splitext(n)[0].isdigit()
    )
    if not names:
        raise FixtureError(f"{path}: no frame image files")
    return FramesDirectory(
        duration=duration,
        fps=float(fps),
        paths=tuple(os.path.join(path, n) for n in names),
    )


def video_ref_for(path: str) -> tuple[VideoRef, FrameSource]:
    """Build a VideoRef (and its loaded frame source) from a dataset path."""
    if os.path.isdir(path):
        source = load_frames_directory(path)
        ref = VideoRef(
            source=VideoSource.FRAMES_DIRECTORY,
            path=path,
            duration=source.duration,
            fps=source.fps,
        )
        return ref, source
    fixture = load_fixture(path)
    ref = VideoRef(
        source=VideoSource.FIXTURE_PATH,
        path=path,
        duration=fixture.duration,
        fps=fixture.fps,
    )
    return ref, fixture


# --- frame access ---


def _all_refs(video: FrameSource) -> list[FrameRef]:
    if isinstance(video, VideoFixture):
        return list(video.frames)
    if isinstance(video, FramesDirectory):
        return [
            FrameRef(index=i, t=i / video.fps, path=p)
            for i, p in enumerate(video.paths)
        ]
    count = int(round(video.duration * video.fps))
    return [FrameRef(index=i, t=i / video.fps) for i in range(count)]


@dataclass(frozen=True)
class Uniform:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("uniform sampling needs k >= 1")


@dataclass(frozen=True)
class AllFrames:
    pass


@dataclass(frozen=True)
class Stride:
    s: int

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("stride must be >= 1")


SamplePolicy = Union[Uniform, AllFrames, Stride]


def _refs_in_segment(video: FrameSource, segment: VideoSegment) -> list[FrameRef]:
    return [r for r in _all_refs(video) if segment.start <= r.t <= segment.end]


def _nearest(refs: list[FrameRef], target: float) -> FrameRef:
    # ties break toward the earlier frame
    return min(refs, key=lambda r: (abs(r.t - target), r.t))


def sample_frames(
    video: FrameSource, segment: VideoSegment, policy: SamplePolicy
) -> list[FrameRef]:
    """Deterministic frame selection within a segment.

    uniform(k) spaces k target times evenly across the segment (endpoints
    included for k >= 2) and snaps each to the nearest available frame,
    deduplicating; a degenerate segment yields the single nearest frame.
    """
    candidates = _refs_in_segment(video, segment)
    if not candidates:
        # segment between frames, or degenerate beyond the last frame time:
        # fall back to the nearest frame in the whole video
        everything = _all_refs(video)
        if not everything:
            return []
        return [_nearest(everything, segment.start)]
    if isinstance(policy, AllFrames):
        return candidates
    if isinstance(policy, Stride):
        return candidates[:: policy.s]
    k = policy.k
    if segment.duration == 0 or k == 1:
        return [_nearest(candidates, segment.start)]
    picked: list[FrameRef] = []
    span = segment.end - segment.start
    for i in range(k):
        target = segment.start + span * i / (k - 1)
        ref = _nearest(candidates, target)
        if not picked or ref.index > picked[-1].index:
            picked.append(ref)
    return picked


def windows(
    video: FrameSource,
    segment: VideoSegment,
    size: int,
    stride: int | None = None,
) -> list[FrameWindow]:
    """Chunk the segment's frames into consecutive windows.

    With the default stride (equal to size) the windows partition the
    segment's frames exactly; ceil(N / size) windows, last possibly short.
    """
    if size < 1:
        raise ValueError("window size must be >= 1")
    step = size if stride is None else stride
    if step < 1:
        raise ValueError("window stride must be >= 1")
    refs = _refs_in_segment(video, segment)
    out: list[FrameWindow] = []
    i = 0
    while i < len(refs):
        chunk = refs[i : i + size]
        out.append(
            FrameWindow(
                indices=tuple(r.index for r in chunk),
                refs=tuple(chunk),
                segment=VideoSegment(
                    int(math.floor(chunk[0].t)), int(math.ceil(chunk[-1].t))
                ),
            )
        )
        if i + size >= len(refs):
            break
        i += step
    return out
