"""Fixture loading, frame sampling policies, and frame windowing."""

import json

import pytest

from clipcritic.core import VideoSegment, VideoSource
from clipcritic.fixtures import (
    AllFrames,
    FixtureError,
    FrameRef,
    Stride,
    Uniform,
    VideoFixture,
    load_fixture,
    load_frames_directory,
    sample_frames,
    video_ref_for,
    windows,
)


def clip(duration, fps=1.0):
    frames = tuple(FrameRef(i, float(i), caption=f"frame {i}") for i in range(duration))
    return VideoFixture(duration=duration, fps=fps, frames=frames)


FIXTURE_DOC = {
    "duration": "01:00",
    "fps": 1,
    "frames": [{"t": "00:00", "caption": "start"}, {"t": "00:30", "caption": "middle"}],
    "events": [
        {"start": "00:10", "end": "00:20", "label": "door opens", "justification": "a door"}
    ],
    "asr": [{"t": "00:05", "text": "hello there"}],
    "qa_facts": [
        {"start": "00:10", "end": "00:20", "keywords": ["door"], "answer": "the door opens"}
    ],
}


def write_fixture(tmp_path, doc, name="clip.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_uniform_sampling_snaps_to_available_frames():
    video = clip(60)
    got = sample_frames(video, VideoSegment(0, 60), Uniform(6))
    assert [f.index for f in got] == [0, 12, 24, 36, 48, 59]


def test_uniform_sampling_degenerate_segment():
    video = clip(60)
    got = sample_frames(video, VideoSegment(10, 10), Uniform(3))
    assert [f.index for f in got] == [10]
    got = sample_frames(video, VideoSegment(0, 60), Uniform(1))
    assert [f.index for f in got] == [0]


def test_uniform_sampling_never_duplicates():
    video = clip(10)
    got = sample_frames(video, VideoSegment(0, 10), Uniform(30))
    indices = [f.index for f in got]
    assert indices == sorted(set(indices))
    assert len(indices) <= 10


def test_all_frames_and_stride_policies():
    video = clip(20)
    everything = sample_frames(video, VideoSegment(5, 10), AllFrames())
    assert [f.index for f in everything] == [5, 6, 7, 8, 9, 10]
    strided = sample_frames(video, VideoSegment(0, 19), Stride(5))
    assert [f.index for f in strided] == [0, 5, 10, 15]


def test_windows_chunking():
    video = clip(2450)
    chunks = windows(video, video.full_segment(), 100)
    assert len(chunks) == 25
    assert [len(c.refs) for c in chunks[:-1]] == [100] * 24
    assert len(chunks[-1].refs) == 50

    exact = windows(clip(64), VideoSegment(0, 64), 64)
    assert [len(c.refs) for c in exact] == [64]

    over = windows(clip(65), VideoSegment(0, 65), 64)
    assert [len(c.refs) for c in over] == [64, 1]


def test_windows_on_video_ref_uses_implicit_frames():
    # a bare VideoRef yields frames at its fps without fixture content
    ref, _ = None, None
    from clipcritic.core import VideoRef

    ref = VideoRef(VideoSource.FIXTURE_PATH, "v.json", 130, 1.0)
    chunks = windows(ref, VideoSegment(0, 130), 64)
    assert [len(c.refs) for c in chunks] == [64, 64, 2]


def test_windows_cover_segment_in_order():
    video = clip(300)
    chunks = windows(video, VideoSegment(30, 290), 64)
    flattened = [f.index for c in chunks for f in c.refs]
    assert flattened == sorted(flattened)
    assert flattened[0] >= 30
    assert flattened[-1] <= 290


def test_frame_label_formats_timestamp():
    assert FrameRef(5, 5.0).label() == "00:05"
    assert FrameRef(0, 150.0).label() == "02:30"


def test_load_fixture_round_trip(tmp_path):
    path = write_fixture(tmp_path, FIXTURE_DOC)
    fixture = load_fixture(path)
    assert fixture.duration == 60
    assert len(fixture.frames) == 2
    assert fixture.events[0].label == "door opens"
    assert fixture.qa_facts[0].keywords == ("door",)
    assert fixture.asr[0].t == 5


@pytest.mark.parametrize(
    "mutate,fragment",
    [
        (lambda d: d.pop("duration"), "missing required key 'duration'"),
        (lambda d: d.update(frames=[{"t": "00:30"}, {"t": "00:10"}]), "frames[1]"),
        (lambda d: d.update(frames=[{"t": "05:00"}]), "beyond video duration"),
        (
            lambda d: d.update(events=[{"start": "00:20", "end": "00:10", "label": "x"}]),
            "events[0]",
        ),
        (
            lambda d: d.update(
                events=[{"start": "00:10", "end": "05:00", "label": "x"}]
            ),
            "events[0]",
        ),
        (
            lambda d: d.update(asr=[{"t": "00:20", "text": "b"}, {"t": "00:10", "text": "a"}]),
            "asr[1]",
        ),
        (
            lambda d: d.update(
                qa_facts=[{"start": "00:01", "end": "00:02", "keywords": [], "answer": "x"}]
            ),
            "keywords",
        ),
        (lambda d: d.update(fps=0), "fps"),
    ],
)
def test_load_fixture_diagnostics(tmp_path, mutate, fragment):
    doc = json.loads(json.dumps(FIXTURE_DOC))
    mutate(doc)
    path = write_fixture(tmp_path, doc)
    with pytest.raises(FixtureError, match="clip.json"):
        try:
            load_fixture(path)
        except FixtureError as exc:
            assert fragment in str(exc)
            raise


def test_load_fixture_missing_file():
    with pytest.raises(FixtureError, match="not found"):
        load_fixture("/nonexistent/clip.json")


def test_frames_directory_adapter(tmp_path):
    frame_dir = tmp_path / "frames"
    frame_dir.mkdir()
    for i in range(5):
        (frame_dir / f"{i:04d}.jpg").write_bytes(b"\xff\xd8\xff")
    (frame_dir / "metadata.json").write_text(json.dumps({"duration": "00:05", "fps": 1}))
    source = load_frames_directory(str(frame_dir))
    assert source.duration == 5
    assert len(source.paths) == 5
    assert source.paths[0].endswith("0000.jpg")

    ref, loaded = video_ref_for(str(frame_dir))
    assert ref.source is VideoSource.FRAMES_DIRECTORY
    assert ref.duration == 5
    got = sample_frames(loaded, VideoSegment(0, 5), Uniform(2))
    assert [f.path for f in got] == [source.paths[0], source.paths[-1]]


def test_frames_directory_requires_metadata(tmp_path):
    frame_dir = tmp_path / "frames"
    frame_dir.mkdir()
    (frame_dir / "0000.jpg").write_bytes(b"x")
    with pytest.raises(FixtureError, match="metadata.json"):
        load_frames_directory(str(frame_dir))


def test_video_ref_for_fixture_file(tmp_path):
    path = write_fixture(tmp_path, FIXTURE_DOC)
    ref, source = video_ref_for(path)
    assert ref.source is VideoSource.FIXTURE_PATH
    assert ref.duration == 60
    assert isinstance(source, VideoFixture)


def test_sampling_is_pure():
    video = clip(40)
    first = sample_frames(video, VideoSegment(0, 40), Uniform(4))
    second = sample_frames(video, VideoSegment(0, 40), Uniform(4))
    assert first == second
    assert video.frames == clip(40).frames
