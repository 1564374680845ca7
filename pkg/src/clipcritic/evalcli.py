"""Dataset loading, batch evaluation, ablation sweeps, trace persistence,
and the command-line surface.

Datasets are JSON lines; reports are JSON documents {config, items,
aggregate, timing}. Every episode's trace is persisted as one file per
task per strategy so runs can be audited and replayed byte-for-byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .agent import (
    DEFAULT_STEP_BUDGET,
    Trace,
    final_to_dict,
    run_direct,
    run_episode,
    run_self_eval,
    run_single_program,
)
from .core import (
    Choice,
    FinalAnswer,
    Ranges,
    TaskKind,
    TaskQuery,
    TimestampError,
    VideoSegment,
    answers_equal,
    interval_union_iou,
    parse_timestamp,
)
from .critic import load_examples, load_examples_file, run_agent_critic
from .fixtures import FixtureError, FrameSource, video_ref_for
from .modelclient import (
    Cassette,
    CassetteClient,
    CassetteMode,
    ConcurrencyLimitedClient,
    HttpModelClient,
    ModelClient,
    ReplayMismatchError,
)
from .toolkit import (
    PROFILES,
    Profile,
    StrategySubset,
    enumerate_module_subsets,
    profile_for_task,
)
from .tools import TagContext, ToolConfig, build_registry

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_REPLAY_DIVERGENCE = 3

MODES = ("direct", "single_program", "agent", "agent_critic", "self_eval")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ReplayDivergence(Exception):
    pass


@dataclass(frozen=True)
class DatasetItem:
    task: TaskQuery
    truth: FinalAnswer
    source: FrameSource


@dataclass
class RunConfig:
    mode: str = "agent_critic"
    profile: str | None = None
    backend: str = "oracle"
    step_budget: int = DEFAULT_STEP_BUDGET
    concurrency: int = 1
    elide_over: int = 4000
    example_count: int = 4
    max_rounds: int = 3
    window_stride: int | None = None
    examples_files: dict = field(default_factory=dict)
    transport: dict = field(default_factory=dict)
    traces_dir: str = "traces"
    cassette: str | None = None

    def snapshot(self) -> dict:
        """The reproducible part of the configuration for reports.

        Transport, cassette, and filesystem paths are excluded so a replay
        regenerates a byte-identical report.
        """
        return {
            "mode": self.mode,
            "profile": self.profile,
            "backend": self.backend,
            "step_budget": self.step_budget,
            "concurrency": self.concurrency,
            "elide_over": self.elide_over,
            "example_count": self.example_count,
            "max_rounds": self.max_rounds,
            "window_stride": self.window_stride,
        }


def load_config_file(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a JSON object")
    config = RunConfig()
    allowed = set(config.__dataclass_fields__)
    for key, value in data.items():
        if key not in allowed:
            raise DataError(f"{path}: unknown config key '{key}'")
        setattr(config, key, value)
    return config


# --- dataset ---


def _truth_for(data: dict, task: TaskQuery, where: str) -> FinalAnswer:
    answer = data.get("answer")
    if task.kind is TaskKind.MULTIPLE_CHOICE:
        if not isinstance(answer, int):
            raise DataError(f"{where}: MCQ answer must be an integer index")
        if not 1 <= answer <= len(task.options):
            raise DataError(
                f"{where}: answer {answer} out of range for "
                f"{len(task.options)} options"
            )
        return Choice(answer)
    if not isinstance(answer, list) or not answer:
        raise DataError(f"{where}: range answer must be a nonempty list of pairs")
    segments = []
    for pair in answer:
        if not isinstance(pair, list) or len(pair) != 2:
            raise DataError(f"{where}: each range must be a [start, end] pair")
        try:
            start, end = (
                parse_timestamp(v) if isinstance(v, str) else int(v) for v in pair
            )
        except (TimestampError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: bad range value: {exc}") from exc
        if start > end or start < 0:
            raise DataError(f"{where}: invalid range [{start}, {end}]")
        segments.append(VideoSegment(start, end))
    return Ranges(tuple(segments))


def load_dataset(path: str, profile: str | None = None) -> list[DatasetItem]:
    """JSON-lines records {id, video, question, options?, answer, allow_asr}."""
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    items: list[DatasetItem] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{line_no}"
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise DataError(f"{where}: expected an object")
            for key in ("id", "video", "question", "answer"):
                if key not in data:
                    raise DataError(f"{where}: missing required key '{key}'")
            task_id = data["id"]
            if not isinstance(task_id, str) or not task_id:
                raise DataError(f"{where}: id must be a nonempty string")
            if task_id in seen_ids:
                raise DataError(f"{where}: duplicate id '{task_id}'")
            seen_ids.add(task_id)
            question = data["question"]
            if not isinstance(question, str) or not question:
                raise DataError(f"{where}: question must be a nonempty string")
            options = data.get("options")
            if options is not None:
                if not isinstance(options, list) or not all(
                    isinstance(o, str) and o for o in options
                ):
                    raise DataError(f"{where}: options must be nonempty strings")
            allow_asr = data.get("allow_asr", False)
            if not isinstance(allow_asr, bool):
                raise DataError(f"{where}: allow_asr must be a boolean")
            video_path = data["video"]
            if not isinstance(video_path, str):
                raise DataError(f"{where}: video must be a path string")
            if not os.path.isabs(video_path):
                video_path = os.path.join(base_dir, video_path)
            try:
                ref, source = video_ref_for(video_path)
            except FixtureError as exc:
                raise DataError(f"{where}: {exc}") from exc
            kind = (
                TaskKind.MULTIPLE_CHOICE if options else TaskKind.TEMPORAL_RANGE
            )
            task = TaskQuery(
                id=task_id,
                question=question,
                kind=kind,
                video=ref,
                options=tuple(options) if options else None,
                allow_asr=allow_asr,
            )
            if profile is not None:
                try:
                    profile_for_task(task, profile)
                except ValueError as exc:
                    raise DataError(f"{where}: {exc}") from exc
            items.append(DatasetItem(task, _truth_for(data, task, where), source))
    if not items:
        raise DataError(f"{path}: dataset is empty")
    return items


# --- evaluation ---


def _score(item: DatasetItem, final: FinalAnswer) -> tuple[bool | None, float | None]:
    if item.task.kind is TaskKind.MULTIPLE_CHOICE:
        return answers_equal(final, item.truth), None
    pred = final.segments if isinstance(final, Ranges) else ()
    return None, interval_union_iou(pred, item.truth.segments)


def _tool_config(config: RunConfig) -> ToolConfig:
    return ToolConfig(window_stride=config.window_stride)


def _examples_for(profile: Profile, config: RunConfig):
    path = config.examples_files.get(profile.name)
    if path:
        return load_examples_file(path)
    return load_examples(profile)


def _registry_factory(item: DatasetItem, config: RunConfig, model: ModelClient):
    def factory(subset: StrategySubset):
        profile = profile_for_task(item.task, config.profile)
        return build_registry(
            item.task,
            item.source,
            backend=config.backend,
            model=model,
            config=_tool_config(config),
            tags=TagContext(f"{item.task.id}/{subset.label}"),
            answer_capable=profile.answer_capable,
        )

    return factory


def _agent_subset(profile: Profile) -> StrategySubset:
    """The all-module non-direct subset used for agent-only evaluation."""
    for subset in reversed(profile.strategies):
        if not subset.direct and set(subset.modules) == set(profile.pool):
            return subset
    return StrategySubset("C", profile.pool)


def run_item(
    item: DatasetItem,
    config: RunConfig,
    model: ModelClient,
    fixed_subset: StrategySubset | None = None,
) -> tuple[dict, list[Trace]]:
    """Evaluate one dataset item; returns (report record, traces to persist)."""
    task = item.task
    profile = profile_for_task(task, config.profile)
    factory = _registry_factory(item, config, model)
    record: dict = {"id": task.id, "kind": task.kind.value}
    traces: list[Trace]
    if config.mode == "agent_critic":
        selection, traces, verdict = run_agent_critic(
            task,
            model,
            factory,
            profile,
            examples=_examples_for(profile, config),
            step_budget=config.step_budget,
            example_count=config.example_count,
            elide_over=config.elide_over,
        )
        final = selection.final
        record["strategy"] = selection.label
        record["winners"] = list(verdict.winners)
        record["fallback_used"] = selection.fallback_used
        raw = selection.trace.raw_final
    elif config.mode == "agent":
        subset = fixed_subset or _agent_subset(profile)
        registry = factory(subset)
        trace = run_episode(
            task,
            subset,
            model,
            registry,
            step_budget=config.step_budget,
            tags=TagContext(f"{task.id}/{subset.label}"),
        )
        traces = [trace]
        final = trace.final
        raw = trace.raw_final
        record["strategy"] = subset.label
    elif config.mode == "direct":
        direct = next(s for s in profile.strategies if s.direct)
        trace = run_direct(task, direct, model, factory(direct))
        traces = [trace]
        final = trace.final
        raw = trace.raw_final
        record["strategy"] = direct.label
    elif config.mode == "single_program":
        subset = StrategySubset("single", profile.pool)
        trace = run_single_program(task, model, factory(subset))
        traces = [trace]
        final = trace.final
        raw = trace.raw_final
        record["strategy"] = "single"
    elif config.mode == "self_eval":
        subset = StrategySubset("self", profile.pool)
        trace = run_self_eval(
            task,
            model,
            factory(subset),
            max_rounds=config.max_rounds,
            step_budget=config.step_budget,
        )
        traces = [trace]
        final = trace.final
        raw = trace.raw_final
        record["strategy"] = "self"
    else:
        raise UsageError(f"unknown mode '{config.mode}'")
    correct, iou = _score(item, final)
    record["selected"] = final_to_dict(final, raw)
    if correct is not None:
        record["correct"] = correct
    if iou is not None:
        record["iou"] = iou
    record["trace_files"] = [
        f"{task.id}.{t.strategy.label}.json" for t in traces
    ]
    return record, traces


def persist_traces(traces: list[Trace], traces_dir: str) -> None:
    os.makedirs(traces_dir, exist_ok=True)
    for trace in traces:
        name = f"{trace.task.id}.{trace.strategy.label}.json"
        path = os.path.join(traces_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(trace.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(
    items: list[DatasetItem],
    config: RunConfig,
    model: ModelClient,
    fixed_subset: StrategySubset | None = None,
    persist: bool = True,
) -> dict:
    """Run a whole dataset in one mode and build the report document."""
    if not items:
        raise DataError("refusing to report on an empty dataset")
    started = time.time()

    def one(item: DatasetItem) -> tuple[dict, list[Trace]]:
        try:
            return run_item(item, config, model, fixed_subset)
        except (UsageError, DataError, ReplayMismatchError):
            raise
        except Exception as exc:
            record = {
                "id": item.task.id,
                "kind": item.task.kind.value,
                "error": str(exc),
            }
            if item.task.kind is TaskKind.MULTIPLE_CHOICE:
                record["correct"] = False
            else:
                record["iou"] = 0.0
            return record, []

    if config.concurrency > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]

    records = []
    for record, traces in results:
        records.append(record)
        if persist and traces:
            persist_traces(traces, config.traces_dir)

    mcq = [r for r in records if r["kind"] == "multiple_choice"]
    temporal = [r for r in records if r["kind"] == "temporal_range"]
    aggregate: dict = {"count": len(records)}
    if mcq:
        aggregate["accuracy"] = sum(
            1 for r in mcq if r.get("correct")
        ) / len(mcq)
    if temporal:
        aggregate["miou"] = sum(r.get("iou", 0.0) for r in temporal) / len(temporal)
    return {
        "config": config.snapshot(),
        "items": records,
        "aggregate": aggregate,
        "timing": {"seconds": time.time() - started},
    }


def ablate_fixed_subsets(
    items: list[DatasetItem], config: RunConfig, model: ModelClient
) -> dict:
    """Agent-mode sweep over every valid fixed module subset of the pool."""
    if not items:
        raise DataError("refusing to report on an empty dataset")
    profile_name = config.profile
    if profile_name is None:
        profile = profile_for_task(items[0].task)
    else:
        profile = PROFILES[profile_name] if profile_name in PROFILES else None
        if profile is None:
            raise DataError(f"unknown profile '{profile_name}'")
    subsets = enumerate_module_subsets(profile)
    sweep_config = RunConfig(**{**config.__dict__, "mode": "agent"})
    per_subset = []
    metric = "accuracy" if profile.task_kind is TaskKind.MULTIPLE_CHOICE else "miou"
    for i, modules in enumerate(subsets, start=1):
        label = f"S{i}"
        subset = StrategySubset(label, modules)
        sub_dir = os.path.join(config.traces_dir, f"ablate_{label}")
        sweep_config.traces_dir = sub_dir
        report = evaluate(items, sweep_config, model, fixed_subset=subset)
        per_subset.append(
            {
                "label": label,
                "modules": list(modules),
                "score": report["aggregate"].get(metric, 0.0),
            }
        )
    best = max(per_subset, key=lambda s: s["score"])
    return {
        "config": config.snapshot(),
        "metric": metric,
        "subsets": per_subset,
        "max": {"label": best["label"], "modules": best["modules"], "score": best["score"]},
    }


# --- replay comparison ---


def _normalized_report_bytes(report: dict) -> bytes:
    trimmed = {k: v for k, v in report.items() if k != "timing"}
    return (json.dumps(trimmed, indent=2, sort_keys=True) + "\n").encode("utf-8")


def replay_run(
    items: list[DatasetItem],
    config: RunConfig,
    cassette_path: str,
    baseline_traces_dir: str,
    baseline_report_path: str,
    out_dir: str,
) -> None:
    """Re-run from a cassette and compare against persisted outputs.

    Raises ReplayDivergence naming the first divergent artifact.
    """
    model = CassetteClient(Cassette.open(cassette_path, CassetteMode.REPLAY))
    replay_config = RunConfig(**{**config.__dict__, "traces_dir": out_dir})
    try:
        report = evaluate(items, replay_config, model)
    except ReplayMismatchError as exc:
        raise ReplayDivergence(str(exc)) from exc
    with open(baseline_report_path, "rb") as fh:
        baseline_report = json.loads(fh.read().decode("utf-8"))
    if _normalized_report_bytes(report) != _normalized_report_bytes(baseline_report):
        raise ReplayDivergence(
            f"report differs from {baseline_report_path} (ignoring timing)"
        )
    baseline_files = sorted(
        n for n in os.listdir(baseline_traces_dir) if n.endswith(".json")
    )
    replay_files = sorted(n for n in os.listdir(out_dir) if n.endswith(".json"))
    if baseline_files != replay_files:
        missing = set(baseline_files) ^ set(replay_files)
        raise ReplayDivergence(f"trace file sets differ: {sorted(missing)}")
    for name in baseline_files:
        with open(os.path.join(baseline_traces_dir, name), "rb") as fh:
            want = fh.read()
        with open(os.path.join(out_dir, name), "rb") as fh:
            got = fh.read()
        if want != got:
            raise ReplayDivergence(f"trace file '{name}' differs")


# --- model construction ---


class _UnconfiguredModel(ModelClient):
    def _complete(self, req):
        raise RuntimeError(
            "no model is configured for this run; use --cassette replay:<path> "
            "or set a transport in the config file"
        )


def build_model(config: RunConfig) -> ModelClient:
    inner: ModelClient | None = None
    if config.transport:
        try:
            inner = HttpModelClient(
                endpoint=config.transport["endpoint"],
                model_name=config.transport["model_name"],
                api_key_env=config.transport.get("api_key_env", "MODEL_API_KEY"),
            )
        except KeyError as exc:
            raise DataError(f"transport config missing {exc}") from exc
        if config.concurrency > 1:
            inner = ConcurrencyLimitedClient(inner, config.concurrency)
    if config.cassette:
        mode_name, sep, path = config.cassette.partition(":")
        if not sep or not path:
            raise UsageError("--cassette expects record:<path> or replay:<path>")
        if mode_name == "record":
            if inner is None:
                raise UsageError("record mode needs a configured transport")
            return CassetteClient(Cassette.open(path, CassetteMode.RECORD), inner)
        if mode_name == "replay":
            if not os.path.exists(path):
                raise DataError(f"cassette not found: {path}")
            return CassetteClient(Cassette.open(path, CassetteMode.REPLAY))
        raise UsageError(f"unknown cassette mode '{mode_name}'")
    return inner if inner is not None else _UnconfiguredModel()


# --- CLI ---


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="clipcritic", description="Video reasoning evaluation")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--traces-dir", help="directory for persisted traces")
    parser.add_argument("--mode", choices=MODES, help="evaluation mode")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="strategy profile")
    parser.add_argument("--budget", type=int, help="agent step budget")
    parser.add_argument("--concurrency", type=int, help="parallel episodes cap")
    parser.add_argument(
        "--cassette", help="record:<path> or replay:<path> model cassette"
    )
    sub = parser.add_subparsers(dest="command")

    run_p = sub.add_parser("run", help="run one task and print its trace")
    run_p.add_argument("dataset", help="JSONL dataset file")
    run_p.add_argument("--task", help="task id (default: first item)")

    eval_p = sub.add_parser("eval", help="evaluate a dataset into a report")
    eval_p.add_argument("dataset", help="JSONL dataset file")
    eval_p.add_argument("--report", help="report output path")

    ablate_p = sub.add_parser("ablate", help="fixed module-subset sweep")
    ablate_p.add_argument("dataset", help="JSONL dataset file")
    ablate_p.add_argument("--report", help="report output path")

    replay_p = sub.add_parser("replay", help="re-run from a cassette and compare")
    replay_p.add_argument("dataset", help="JSONL dataset file")
    replay_p.add_argument("--report", required=True, help="baseline report path")
    replay_p.add_argument(
        "--out-dir", help="directory for regenerated traces (default: <traces>.replay)"
    )
    return parser


def _merge_config(args: argparse.Namespace) -> RunConfig:
    config = load_config_file(args.config) if args.config else RunConfig()
    if args.mode:
        config.mode = args.mode
    if args.profile:
        config.profile = args.profile
    if args.budget is not None:
        if args.budget < 1:
            raise UsageError("--budget must be >= 1")
        config.step_budget = args.budget
    if args.concurrency is not None:
        if args.concurrency < 1:
            raise UsageError("--concurrency must be >= 1")
        config.concurrency = args.concurrency
    if args.traces_dir:
        config.traces_dir = args.traces_dir
    if args.cassette:
        config.cassette = args.cassette
    return config


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required (run, eval, ablate, replay)")
        config = _merge_config(args)
        if args.command == "run":
            items = load_dataset(args.dataset, config.profile)
            if args.task:
                matching = [i for i in items if i.task.id == args.task]
                if not matching:
                    raise DataError(f"no task with id '{args.task}'")
                items = matching[:1]
            else:
                items = items[:1]
            model = build_model(config)
            record, traces = run_item(items[0], config, model)
            persist_traces(traces, config.traces_dir)
            for trace in traces:
                print(json.dumps(trace.to_dict(), indent=2, sort_keys=True))
            print(json.dumps({"result": record}, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "eval":
            items = load_dataset(args.dataset, config.profile)
            model = build_model(config)
            report = evaluate(items, config, model)
            report_path = args.report or os.path.join(
                config.traces_dir, "report.json"
            )
            os.makedirs(os.path.dirname(report_path) or ".", exist_ok=True)
            with open(report_path, "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2, sort_keys=True)
                fh.write("\n")
            print(json.dumps(report["aggregate"], indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "ablate":
            items = load_dataset(args.dataset, config.profile)
            model = build_model(config)
            report = ablate_fixed_subsets(items, config, model)
            if args.report:
                with open(args.report, "w", encoding="utf-8") as fh:
                    json.dump(report, fh, indent=2, sort_keys=True)
                    fh.write("\n")
            print(json.dumps(report, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "replay":
            if not config.cassette or not config.cassette.startswith("replay:"):
                raise UsageError("replay requires --cassette replay:<path>")
            cassette_path = config.cassette.partition(":")[2]
            items = load_dataset(args.dataset, config.profile)
            out_dir = args.out_dir or config.traces_dir.rstrip("/\\") + ".replay"
            replay_run(
                items,
                config,
                cassette_path,
                baseline_traces_dir=config.traces_dir,
                baseline_report_path=args.report,
                out_dir=out_dir,
            )
            print("replay matched: traces and report are identical")
            return EXIT_OK
        raise UsageError(f"unknown command '{args.command}'")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReplayDivergence as exc:
        print(f"replay divergence: {exc}", file=sys.stderr)
        return EXIT_REPLAY_DIVERGENCE
    except ReplayMismatchError as exc:
        print(f"replay divergence: {exc}", file=sys.stderr)
        return EXIT_REPLAY_DIVERGENCE
    except (DataError, FixtureError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
