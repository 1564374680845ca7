"""Video tool backends: oracle semantics and model-side window accounting."""

import math

import pytest

from clipcritic.core import (
    TaskKind,
    TaskQuery,
    VideoRef,
    VideoSegment,
    VideoSource,
)
from clipcritic.fixtures import AsrLine, Event, FrameRef, QaFact, VideoFixture
from clipcritic.modelclient import CallableModel, FramesPart, budget_frames
from clipcritic.tools import (
    FALLBACK_NOTE,
    NO_RANGES_SENTENCE,
    NO_RELEVANT_SPEECH_SENTENCE,
    NO_SPEECH_SENTENCE,
    NOT_VISIBLE_SENTENCE,
    STOPWORDS,
    TagContext,
    ToolConfig,
    ToolSuite,
    build_registry,
    content_tokens,
)


def make_video(duration):
    return VideoRef(VideoSource.FIXTURE_PATH, "v.json", duration, 1.0)


def make_task(duration=2450, kind=TaskKind.MULTIPLE_CHOICE, question="What color is the man's suit?"):
    options = ("red", "blue") if kind is TaskKind.MULTIPLE_CHOICE else None
    return TaskQuery("t1", question, kind, make_video(duration), options, False)


def plain_fixture(duration, step=1, **extra):
    frames = tuple(FrameRef(i, float(i)) for i in range(0, duration, step))
    return VideoFixture(duration=duration, fps=1.0, frames=frames, **extra)


SUIT_FIXTURE = plain_fixture(
    2450,
    step=10,
    events=(
        Event(VideoSegment(100, 160), "a crowd gathers", "people assemble"),
        Event(VideoSegment(700, 760), "man in blue suit walks in", "he enters the hall"),
    ),
    asr=(
        AsrLine(83, "take a deep inhale during the descent"),
        AsrLine(200, "unrelated words"),
    ),
    qa_facts=(QaFact(VideoSegment(730, 740), ("suit",), "a blue suit"),),
)


def oracle_suite(fixture=SUIT_FIXTURE, task=None):
    return ToolSuite(task or make_task(), fixture)


def test_content_tokens_drop_stopwords():
    tokens = content_tokens("When does the man in the blue suit first appear?")
    assert "when" not in tokens
    assert "the" not in tokens
    assert {"man", "blue", "suit"} <= tokens
    # "during" carries meaning in temporal questions and is kept
    assert "during" not in STOPWORDS
    assert "during" in content_tokens("what happens during the descent")


def test_get_segment_clamps_to_video():
    suite = oracle_suite()
    assert suite.get_segment("01:40", "03:20") == VideoSegment(100, 200)
    assert suite.get_segment("40:00", "50:00") == VideoSegment(2400, 2450)


def test_get_segment_rejects_degenerate_clamp():
    suite = oracle_suite()
    with pytest.raises(ValueError) as exc_info:
        suite.get_segment("45:00", "50:00")
    assert (
        str(exc_info.value)
        == "inverted range: '45:00' to '50:00' clamps to ['40:50', '40:50'] on a 40:50 video"
    )


def test_find_when_oracle_matches_event_tokens():
    suite = oracle_suite()
    got = suite.find_when("when does the man in the suit walk in?")
    assert got == '["11:40", "12:40"]: he enters the hall'
    # restricting to a window that only holds token-mismatched events
    assert suite.find_when("suit", video_segment=VideoSegment(0, 300)) == NO_RANGES_SENTENCE
    # never phrased as a final answer, so a direct caller cannot parse it as one
    assert "Final Answer" not in got


def test_find_when_oracle_multiple_hits_in_time_order():
    fixture = plain_fixture(
        600,
        events=(
            Event(VideoSegment(300, 360), "dog runs", "later run"),
            Event(VideoSegment(30, 60), "dog sleeps", "early nap"),
        ),
    )
    got = oracle_suite(fixture, make_task(600, question="what does the dog do?")).find_when(
        "dog"
    )
    lines = got.split("\n")
    assert lines[0].startswith('["00:30", "01:00"]')
    assert lines[1].startswith('["05:00", "06:00"]')


def test_retrieval_qa_oracle_needs_overlapping_evidence():
    suite = oracle_suite()
    hit = suite.retrieval_qa("What color is the man's suit?", video_segment=VideoSegment(700, 760))
    assert hit == "a blue suit"
    miss = suite.retrieval_qa("What color is the man's suit?", video_segment=VideoSegment(0, 60))
    assert miss == NOT_VISIBLE_SENTENCE
    whole = suite.retrieval_qa("What color is the man's suit?")
    assert whole == "a blue suit"


def test_retrieval_qa_oracle_first_matching_fact_wins():
    fixture = plain_fixture(
        600,
        qa_facts=(
            QaFact(VideoSegment(10, 20), ("door",), "decoy answer"),
            QaFact(VideoSegment(10, 20), ("door", "red"), "specific answer"),
        ),
    )
    suite = oracle_suite(fixture, make_task(600, question="Is the red door open?"))
    assert suite.retrieval_qa("Is the red door open?") == "decoy answer"


def test_asr_oracle_variants():
    suite = oracle_suite()
    hit = suite.asr_understanding("what should you do during the descent?")
    assert hit == "[01:23] take a deep inhale during the descent"
    silent = ToolSuite(make_task(), plain_fixture(2450, step=10))
    assert silent.asr_understanding("anything?") == NO_SPEECH_SENTENCE
    assert suite.asr_understanding("zebra gymnastics?") == NO_RELEVANT_SPEECH_SENTENCE


def test_think_and_finish_echo():
    suite = oracle_suite()
    assert suite.think("pondering") == "pondering"
    assert suite.finish("Final Answer: (2)") == "Final Answer: (2)"


@pytest.mark.parametrize("n_frames", [64, 65, 2450, 7200])
def test_window_accounting(n_frames):
    fixture = plain_fixture(n_frames)
    task = make_task(n_frames, question="what?")
    log = []

    def respond(req):
        log.append(req)
        assert budget_frames(req.parts) <= 120
        if "/find_when/window/" in req.tag:
            return NO_RANGES_SENTENCE
        if "/retrieval_qa/window/" in req.tag:
            return "none"
        return "Final Answer: (1)"

    suite = ToolSuite(
        task, fixture, backend="model", model=CallableModel(respond), tags=TagContext("t1/A")
    )

    log.clear()
    suite.find_when("query")
    assert len(log) == math.ceil(n_frames / 100)

    log.clear()
    suite.retrieval_qa("question?")
    phase1 = [r for r in log if "/retrieval_qa/window/" in r.tag]
    answers = [r for r in log if "/retrieval_qa/answer" in r.tag]
    assert len(phase1) == math.ceil(n_frames / 64)
    assert len(answers) == 1


def test_retrieval_model_phase2_composition():
    n = 1000
    fixture = plain_fixture(n)
    log = []

    def respond(req):
        log.append(req)
        if "/retrieval_qa/window/" in req.tag:
            shown = [r.index for p in req.parts if isinstance(p, FramesPart) for r in p.frames]
            return "\n".join(str(i) for i in shown[:3])
        return "ANSWER TEXT"

    suite = ToolSuite(
        make_task(n), fixture, backend="model", model=CallableModel(respond),
        tags=TagContext("t1/A"),
    )
    assert suite.retrieval_qa("question?", video_segment=VideoSegment(100, 400)) == "ANSWER TEXT"
    answer_req = [r for r in log if "/retrieval_qa/answer" in r.tag][0]
    shown = [
        r.index for p in answer_req.parts if isinstance(p, FramesPart) for r in p.frames
    ]
    inside = [i for i in shown if 100 <= i <= 400]
    outside = [i for i in shown if not (100 <= i <= 400)]
    # retrieved frames from the target segment plus uniform outside context
    assert inside == sorted(inside)
    assert len(outside) == 56
    assert budget_frames(answer_req.parts) <= 120


def test_retrieval_model_fallback_note():
    fixture = plain_fixture(300)
    def respond(req):
        if "/retrieval_qa/window/" in req.tag:
            return "nothing useful here"
        return "GUESSED ANSWER"

    suite = ToolSuite(
        make_task(300), fixture, backend="model", model=CallableModel(respond),
        tags=TagContext("t1/A"),
    )
    got = suite.retrieval_qa("question?")
    assert got == FALLBACK_NOTE + "\nGUESSED ANSWER"


def test_asr_model_chunks_and_consolidates():
    n = 1000
    lines = tuple(AsrLine(t, f"line {t} " + "word " * 40) for t in range(0, n, 10))
    fixture = plain_fixture(n, asr=lines)
    log = []

    def respond(req):
        log.append(req)
        if "/asr_understanding/chunk/" in req.tag:
            return "chunk notes"
        return "CONSOLIDATED"

    suite = ToolSuite(
        make_task(n), fixture, backend="model", model=CallableModel(respond),
        tags=TagContext("t1/A"),
    )
    assert suite.asr_understanding("what was said?") == "CONSOLIDATED"
    chunk_tags = [r.tag for r in log if "/asr_understanding/chunk/" in r.tag]
    final_tags = [r.tag for r in log if r.tag.endswith("/asr_understanding/final")]
    assert len(chunk_tags) > 1
    assert len(final_tags) == 1
    transcript_chars = sum(len(l.text) for l in lines)
    assert len(chunk_tags) == pytest.approx(transcript_chars / 4000, abs=2)


def test_model_backend_requires_client():
    with pytest.raises(ValueError):
        ToolSuite(make_task(300), plain_fixture(300), backend="model", model=None)


def test_oracle_backend_requires_fixture():
    from clipcritic.fixtures import FramesDirectory

    frames_only = FramesDirectory(duration=10, fps=1.0, paths=("a.jpg",))
    with pytest.raises(ValueError):
        ToolSuite(make_task(10), frames_only, backend="oracle")


def test_build_registry_exposes_all_tools():
    registry = build_registry(make_task(), SUIT_FIXTURE)
    assert sorted(registry.specs) == sorted(
        ["think", "get_segment", "find_when", "asr_understanding", "retrieval_qa", "finish"]
    )
    got = registry.call("retrieval_qa", [], {"question": "What color is the man's suit?"})
    assert got == "a blue suit"


def test_tag_context_builds_hierarchical_tags():
    tags = TagContext("t1/A")
    assert tags.tag("find_when/window/0") == "t1/A/find_when/window/0"


def test_config_overrides_window_sizes():
    fixture = plain_fixture(300)
    log = []

    def respond(req):
        log.append(req)
        return NO_RANGES_SENTENCE

    config = ToolConfig(find_when_window=50)
    suite = ToolSuite(
        make_task(300), fixture, backend="model", model=CallableModel(respond),
        config=config, tags=TagContext("t1/A"),
    )
    suite.find_when("q")
    assert len(log) == 6
