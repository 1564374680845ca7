"""The reasoning loop: prompt assembly, iterate generate-execute until a
finish call or the step budget, plus the direct, single-program, and
self-evaluation runners.

The agent prompt is text only; video reaches the model exclusively through
tools. Each turn appends the emitted program and its rendered result to
the transcript, so the prompt for turn i+1 contains every prior exchange
verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .core import (
    Choice,
    FinalAnswer,
    Ranges,
    TaskKind,
    TaskQuery,
    Unparsed,
    format_timestamp,
    parse_final_answer,
)
from .dsl import extract_code_block, run_source
from .modelclient import ModelClient, ModelTransportError, text_request
from .toolkit import StrategySubset, ToolRegistry, load_prompt_text
from .tools import TagContext

DEFAULT_STEP_BUDGET = 10

_NUMBER_WORDS = {
    2: "two",
    3: "three",
    4: "four",
    5: "five",
    6: "six",
    7: "seven",
    8: "eight",
    9: "nine",
    10: "ten",
}


class StopReason(Enum):
    FINISHED = "Finished"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    FORCED_ANSWER = "ForcedAnswer"


@dataclass
class Step:
    program: str  # empty for turns with no code block (direct answers, prose)
    result: str
    terminal: bool = False


@dataclass
class Trace:
    task: TaskQuery
    strategy: StrategySubset
    steps: list[Step]
    final: FinalAnswer
    raw_final: str
    stop_reason: StopReason
    step_budget: int

    def to_dict(self) -> dict:
        return {
            "task_id": self.task.id,
            "strategy_label": self.strategy.label,
            "modules": list(self.strategy.modules),
            "steps": [
                {"program": s.program, "result": s.result, "terminal": s.terminal}
                for s in self.steps
            ],
            "final": final_to_dict(self.final, self.raw_final),
            "stop_reason": self.stop_reason.value,
        }


def final_to_dict(final: FinalAnswer, raw: str) -> dict:
    if isinstance(final, Choice):
        return {"kind": "choice", "value": final.index, "raw": raw}
    if isinstance(final, Ranges):
        return {
            "kind": "ranges",
            "value": [[s.start, s.end] for s in final.segments],
            "raw": raw,
        }
    return {"kind": "unparsed", "value": None, "raw": final.text}


def final_from_dict(data: dict) -> FinalAnswer:
    kind = data.get("kind")
    if kind == "choice":
        return Choice(data["value"])
    if kind == "ranges":
        from .core import VideoSegment

        return Ranges(tuple(VideoSegment(s, e) for s, e in data["value"]))
    return Unparsed(data.get("raw", ""))


def task_statement(task: TaskQuery) -> str:
    """The task block shown to the agent and echoed in critic prompts."""
    length = format_timestamp(task.video.duration)
    if task.kind is TaskKind.MULTIPLE_CHOICE:
        count = len(task.options)
        word = _NUMBER_WORDS.get(count, str(count))
        options = "\n".join(
            f"({i}) {text}" for i, text in enumerate(task.options, start=1)
        )
        return (
            f"You will be given a question about a video and {word} possible "
            f"answer options. Question: {task.question}"
            f"Possible answer choices:\n{options}\nVideo length: {length}"
        )
    return f"Question: {task.question}\nVideo length: {length}"


def render_step(step: Step) -> str:
    if step.program:
        return f"```\n{step.program}\n```\n{step.result}\n\n"
    return f"{step.result}\n\n"


def _capture_finish(registry: ToolRegistry) -> list[str]:
    """Wrap the snapshot's finish backend to record its raw argument."""
    captured: list[str] = []
    original = registry.backends.get("finish")
    if original is None:
        return captured

    def wrapped(final_answer):
        captured.append(final_answer if isinstance(final_answer, str) else str(final_answer))
        return original(final_answer=final_answer)

    registry.backends["finish"] = wrapped
    return captured


def run_episode(
    task: TaskQuery,
    subset: StrategySubset,
    model: ModelClient,
    registry: ToolRegistry,
    step_budget: int = DEFAULT_STEP_BUDGET,
    tags: TagContext | None = None,
) -> Trace:
    """One iterative episode under one non-direct strategy subset."""
    if subset.direct:
        raise ValueError("run_episode needs a non-direct subset; use run_direct")
    snapshot = registry.with_subset(subset)
    captured = _capture_finish(snapshot)
    tags = tags or TagContext(f"{task.id}/{subset.label}")
    env: dict = {}
    steps: list[Step] = []
    prompt = (
        load_prompt_text("agent_preamble.txt")
        + snapshot.render_api(subset)
        + "\n"
        + task_statement(task)
        + "\n\n"
    )
    corrective = load_prompt_text("corrective.txt")
    turn = 0
    try:
        while len(steps) < step_budget:
            response = model.complete(
                text_request(prompt, tag=f"{tags.base}/{turn}")
            )
            turn += 1
            code = extract_code_block(response)
            if code is None:
                final = parse_final_answer(response, task.kind)
                if not isinstance(final, Unparsed):
                    steps.append(Step(program="", result=response, terminal=True))
                    return Trace(
                        task,
                        subset,
                        steps,
                        final,
                        response,
                        StopReason.FINISHED,
                        step_budget,
                    )
                steps.append(Step(program="", result=response, terminal=False))
                prompt += f"{response}\n\n{corrective}\n\n"
                continue
            result = run_source(code, env, snapshot)
            steps.append(
                Step(program=code, result=result.rendered, terminal=result.terminal)
            )
            prompt += f"```\n{code}\n```\n{result.rendered}\n\n"
            if result.terminal:
                raw = captured[-1] if captured else result.rendered
                final = parse_final_answer(raw, task.kind)
                return Trace(
                    task, subset, steps, final, raw, StopReason.FINISHED, step_budget
                )
        # budget exhausted: one forced-answer turn, not counted as a step
        prompt += load_prompt_text("forced_answer.txt") + "\n\n"
        response = model.complete(
            text_request(prompt, tag=f"{tags.base}/{turn}")
        )
        final = parse_final_answer(response, task.kind)
        return Trace(
            task, subset, steps, final, response, StopReason.FORCED_ANSWER, step_budget
        )
    except ModelTransportError as exc:
        message = f"error: model transport failed: {exc}"
        steps.append(Step(program="", result=message, terminal=True))
        return Trace(
            task,
            subset,
            steps,
            Unparsed(message),
            message,
            StopReason.FINISHED,
            step_budget,
        )


def run_direct(
    task: TaskQuery,
    subset: StrategySubset,
    model: ModelClient,
    registry: ToolRegistry,
    tags: TagContext | None = None,
) -> Trace:
    """Apply one answer-capable module to the whole task in a single step."""
    if not subset.direct:
        raise ValueError("run_direct needs a direct subset")
    module = subset.modules[0]
    spec = registry.specs.get(module)
    if spec is None:
        raise ValueError(f"unknown module '{module}'")
    if not spec.answer_capable:
        raise ValueError(f"module '{module}' cannot answer this task directly")
    snapshot = registry.with_subset(subset)
    kwargs: dict = {}
    if module == "find_when":
        kwargs["query"] = task.question
    else:
        kwargs["question"] = task.question
        if task.options:
            kwargs["answer_options"] = list(task.options)
    try:
        response = snapshot.call(module, [], kwargs)
    except Exception as exc:
        response = str(exc)
    text = response if isinstance(response, str) else str(response)
    final = parse_final_answer(text, task.kind)
    steps = [Step(program="", result=text, terminal=True)]
    return Trace(task, subset, steps, final, text, StopReason.FINISHED, 1)


def run_single_program(
    task: TaskQuery,
    model: ModelClient,
    registry: ToolRegistry,
    tags: TagContext | None = None,
) -> Trace:
    """One model call, one program, no feedback loop."""
    modules = tuple(
        name for name in registry.specs if name not in ("think", "finish")
    )
    subset = StrategySubset("single", modules)
    snapshot = registry.with_subset(subset)
    captured = _capture_finish(snapshot)
    tags = tags or TagContext(f"{task.id}/single")
    prompt = (
        load_prompt_text("single_program.txt")
        + snapshot.render_api(subset)
        + "\n"
        + task_statement(task)
        + "\n\n"
    )
    response = model.complete(text_request(prompt, tag=f"{tags.base}/0"))
    code = extract_code_block(response)
    if code is None:
        final = parse_final_answer(response, task.kind)
        steps = [Step(program="", result=response, terminal=True)]
        return Trace(task, subset, steps, final, response, StopReason.FINISHED, 1)
    env: dict = {}
    result = run_source(code, env, snapshot)
    steps = [Step(program=code, result=result.rendered, terminal=True)]
    if captured:
        raw = captured[-1]
    else:
        raw = result.rendered
    final = parse_final_answer(raw, task.kind)
    return Trace(task, subset, steps, final, raw, StopReason.FINISHED, 1)


def run_self_eval(
    task: TaskQuery,
    model: ModelClient,
    registry: ToolRegistry,
    max_rounds: int = 3,
    step_budget: int = DEFAULT_STEP_BUDGET,
    tags: TagContext | None = None,
) -> Trace:
    """Agent answers, rates its own confidence 1-3, and retries below 3.

    The transcript continues across rounds so the model sees its previous
    attempt. Terminates at the first confidence of 3 or after max_rounds.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    modules = tuple(
        name for name in registry.specs if name not in ("think", "finish")
    )
    subset = StrategySubset("self", modules)
    snapshot = registry.with_subset(subset)
    captured = _capture_finish(snapshot)
    tags = tags or TagContext(f"{task.id}/self")
    env: dict = {}
    steps: list[Step] = []
    prompt = (
        load_prompt_text("agent_preamble.txt")
        + snapshot.render_api(subset)
        + "\n"
        + task_statement(task)
        + "\n\n"
    )
    corrective = load_prompt_text("corrective.txt")
    confidence_prompt = load_prompt_text("confidence.txt")
    retry_template = load_prompt_text("self_eval_retry.txt")
    total_budget = step_budget * max_rounds
    turn = 0
    candidate_raw = ""
    candidate: FinalAnswer = Unparsed("")
    stop = StopReason.BUDGET_EXHAUSTED

    for round_no in range(1, max_rounds + 1):
        candidate_raw, candidate, forced, turn = _self_eval_round(
            task,
            model,
            snapshot,
            env,
            steps,
            captured,
            tags,
            turn,
            step_budget,
            corrective,
            prompt_ref := [prompt],
        )
        prompt = prompt_ref[0]
        if forced:
            stop = StopReason.FORCED_ANSWER
            break
        prompt += confidence_prompt + "\n"
        reply = model.complete(
            text_request(prompt, tag=f"{tags.base}/confidence/{round_no}")
        )
        confidence = _parse_confidence(reply)
        prompt += f"{reply}\n\n"
        if confidence >= 3 or round_no == max_rounds:
            stop = StopReason.FINISHED
            break
        prompt += retry_template.format(confidence=confidence) + "\n\n"

    return Trace(task, subset, steps, candidate, candidate_raw, stop, total_budget)


def _self_eval_round(
    task,
    model,
    snapshot,
    env,
    steps,
    captured,
    tags,
    turn,
    step_budget,
    corrective,
    prompt_ref,
):
    """One candidate-producing sub-episode; returns (raw, final, forced, turn)."""
    taken = 0
    while taken < step_budget:
        response = model.complete(
            text_request(prompt_ref[0], tag=f"{tags.base}/{turn}")
        )
        turn += 1
        taken += 1
        code = extract_code_block(response)
        if code is None:
            final = parse_final_answer(response, task.kind)
            if not isinstance(final, Unparsed):
                steps.append(Step(program="", result=response, terminal=True))
                prompt_ref[0] += f"{response}\n\n"
                return response, final, False, turn
            steps.append(Step(program="", result=response, terminal=False))
            prompt_ref[0] += f"{response}\n\n{corrective}\n\n"
            continue
        result = run_source(code, env, snapshot)
        steps.append(
            Step(program=code, result=result.rendered, terminal=result.terminal)
        )
        prompt_ref[0] += f"```\n{code}\n```\n{result.rendered}\n\n"
        if result.terminal:
            raw = captured[-1] if captured else result.rendered
            return raw, parse_final_answer(raw, task.kind), False, turn
    prompt_ref[0] += load_prompt_text("forced_answer.txt") + "\n\n"
    response = model.complete(text_request(prompt_ref[0], tag=f"{tags.base}/{turn}"))
    turn += 1
    prompt_ref[0] += f"{response}\n\n"
    return response, parse_final_answer(response, task.kind), True, turn


def _parse_confidence(text: str) -> int:
    for ch in text:
        if ch in "123":
            return int(ch)
    return 1
