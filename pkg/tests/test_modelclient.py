"""Model abstraction: scripting, budgets, fingerprints, cassettes, retries."""

import json

import pytest

from clipcritic.fixtures import FrameRef
from clipcritic.modelclient import (
    FRAME_BUDGET,
    BudgetExceededError,
    CallableModel,
    Cassette,
    CassetteClient,
    CassetteMode,
    FramesPart,
    HttpModelClient,
    ModelRequest,
    ModelTransportError,
    ReplayMismatchError,
    ScriptedModel,
    ScriptExhaustedError,
    TextPart,
    budget_frames,
    episode_key,
    fingerprint,
    text_request,
)


def frames(n, start=0):
    return FramesPart(tuple(FrameRef(i, float(i)) for i in range(start, start + n)))


def test_scripted_queue_returns_in_order():
    model = ScriptedModel.from_queue(["first", "second", "third"])
    for want in ["first", "second", "third"]:
        assert model.complete(text_request("anything", tag="t1/A/0")) == want
    with pytest.raises(ScriptExhaustedError):
        model.complete(text_request("extra", tag="t1/A/3"))


def test_scripted_longest_prefix_match():
    model = ScriptedModel(
        {
            "t1/A": ["episode turn"],
            "t1/A/find_when": ["window answer"],
            "t1": ["fallback"],
        }
    )
    assert model.complete(text_request("x", tag="t1/A/find_when/window/0")) == "window answer"
    assert model.complete(text_request("x", tag="t1/A/2")) == "episode turn"
    assert model.complete(text_request("x", tag="t1/critic")) == "fallback"
    with pytest.raises(ScriptExhaustedError):
        model.complete(text_request("x", tag="t2/B/0"))


def test_scripted_model_logs_calls():
    model = ScriptedModel({"t1": ["a", "b"]})
    model.complete(text_request("one", tag="t1/A/0"))
    model.complete(text_request("two", tag="t1/B/0"))
    assert [req.tag for req in model.calls] == ["t1/A/0", "t1/B/0"]


def test_frame_budget_enforced_at_client_boundary():
    model = ScriptedModel.from_queue(["ok"])
    within = ModelRequest(parts=(TextPart("q"), frames(FRAME_BUDGET)), tag="t1/A/0")
    assert budget_frames(within.parts) == FRAME_BUDGET
    assert model.complete(within) == "ok"

    over = ModelRequest(parts=(TextPart("q"), frames(FRAME_BUDGET + 1)), tag="t1/A/1")
    with pytest.raises(BudgetExceededError):
        model.complete(over)
    # split across parts still counts
    split = ModelRequest(parts=(frames(100), TextPart("q"), frames(21, start=100)), tag="t")
    with pytest.raises(BudgetExceededError):
        ScriptedModel.from_queue(["x"]).complete(split)


def test_fingerprint_ignores_tag_and_tuning():
    base = ModelRequest(parts=(TextPart("q"), frames(3)), tag="t1/A/0", temperature=0.0)
    same_parts = ModelRequest(
        parts=(TextPart("q"), frames(3)), tag="t9/Z/7", temperature=0.9, max_output=9
    )
    assert fingerprint(base) == fingerprint(same_parts)
    different = ModelRequest(parts=(TextPart("q!"), frames(3)), tag="t1/A/0")
    assert fingerprint(different) != fingerprint(base)
    # stable: pure function of part content
    assert fingerprint(base) == fingerprint(
        ModelRequest(parts=(TextPart("q"), frames(3)))
    )


def test_episode_key_takes_first_two_components():
    assert episode_key("t1/A/3") == "t1/A"
    assert episode_key("t1/critic") == "t1/critic"
    assert episode_key("solo") == "solo"


def test_cassette_record_then_replay_identical(tmp_path):
    path = str(tmp_path / "run.jsonl")
    inner = ScriptedModel.from_queue(["turn one", "turn two", "turn three"])
    recorder = CassetteClient(Cassette.open(path, CassetteMode.RECORD), inner=inner)
    requests = [
        text_request("prompt one", tag="t1/A/0"),
        text_request("prompt two", tag="t1/A/1"),
        text_request("other episode", tag="t1/B/0"),
    ]
    recorded = [recorder.complete(req) for req in requests]

    replayer = CassetteClient(Cassette.open(path, CassetteMode.REPLAY))
    # replay partitions by episode, so order across episodes may differ
    assert replayer.complete(requests[2]) == "turn three"
    assert replayer.complete(requests[0]) == "turn one"
    assert replayer.complete(requests[1]) == "turn two"
    assert recorded == ["turn one", "turn two", "turn three"]


def test_cassette_replay_detects_prompt_drift(tmp_path):
    path = str(tmp_path / "run.jsonl")
    recorder = CassetteClient(
        Cassette.open(path, CassetteMode.RECORD), inner=ScriptedModel.from_queue(["a"])
    )
    recorder.complete(text_request("original prompt", tag="t1/A/0"))

    replayer = CassetteClient(Cassette.open(path, CassetteMode.REPLAY))
    with pytest.raises(ReplayMismatchError) as exc_info:
        replayer.complete(text_request("edited prompt", tag="t1/A/0"))
    assert exc_info.value.tag == "t1/A/0"


def test_cassette_replay_rejects_tampered_file(tmp_path):
    path = str(tmp_path / "run.jsonl")
    recorder = CassetteClient(
        Cassette.open(path, CassetteMode.RECORD), inner=ScriptedModel.from_queue(["a"])
    )
    request = text_request("prompt", tag="t1/A/0")
    recorder.complete(request)

    lines = [json.loads(l) for l in open(path)]
    lines[0]["fingerprint"] = "0" * 64
    with open(path, "w") as fh:
        for entry in lines:
            fh.write(json.dumps(entry) + "\n")

    replayer = CassetteClient(Cassette.open(path, CassetteMode.REPLAY))
    with pytest.raises(ReplayMismatchError):
        replayer.complete(request)


def test_cassette_replay_exhaustion(tmp_path):
    path = str(tmp_path / "run.jsonl")
    recorder = CassetteClient(
        Cassette.open(path, CassetteMode.RECORD), inner=ScriptedModel.from_queue(["a"])
    )
    request = text_request("prompt", tag="t1/A/0")
    recorder.complete(request)

    replayer = CassetteClient(Cassette.open(path, CassetteMode.REPLAY))
    replayer.complete(request)
    with pytest.raises(ReplayMismatchError):
        replayer.complete(request)


def test_callable_model_wraps_function():
    seen = []

    def fn(req):
        seen.append(req.tag)
        return f"reply to {req.tag}"

    model = CallableModel(fn)
    assert model.complete(text_request("x", tag="t1/A/0")) == "reply to t1/A/0"
    assert seen == ["t1/A/0"]


def test_http_client_retries_with_backoff(monkeypatch):
    monkeypatch.setenv("MODEL_API_KEY", "test-key")
    attempts = []
    sleeps = []

    def failing_transport(payload):
        attempts.append(payload)
        raise OSError("connection refused")

    client = HttpModelClient(
        "http://localhost:9/v1",
        "test-model",
        max_attempts=3,
        backoff_base=0.5,
        transport=failing_transport,
        sleep=sleeps.append,
    )
    with pytest.raises(ModelTransportError):
        client.complete(text_request("q", tag="t1/A/0"))
    assert len(attempts) == 3
    # exponential backoff between attempts, none after the last
    assert sleeps == [0.5, 1.0]


def test_http_client_recovers_after_transient_failure(monkeypatch):
    monkeypatch.setenv("MODEL_API_KEY", "test-key")
    calls = {"n": 0}

    def flaky_transport(payload):
        calls["n"] += 1
        if calls["n"] < 3:
            raise OSError("timeout")
        return "late success"

    client = HttpModelClient(
        "http://localhost:9/v1",
        "test-model",
        transport=flaky_transport,
        sleep=lambda s: None,
    )
    assert client.complete(text_request("q", tag="t")) == "late success"
    assert calls["n"] == 3


def test_http_client_requires_api_key(monkeypatch):
    # the default transport refuses to run without credentials
    monkeypatch.delenv("MODEL_API_KEY", raising=False)
    client = HttpModelClient("http://localhost:9/v1", "m", sleep=lambda s: None)
    with pytest.raises(ModelTransportError, match="MODEL_API_KEY"):
        client.complete(text_request("q", tag="t"))


def test_frames_part_rejects_empty():
    with pytest.raises(ValueError):
        FramesPart(())
