"""
SimTrace - 시뮬레이션 도구 기반 추론 트레이스 생성/평가 파이프라인
명령행 진입점: gen-tools | gen-traces | score | filter | export | eval | toolstats | objective
"""

import sys
import json
import argparse
import dataclasses
from pathlib import Path
from typing import Dict, List, Optional, Any

import pandas as pd
from dotenv import load_dotenv
from loguru import logger

from common_api import create_backend, read_jsonl, write_jsonl, atomic_write_text
from config_module import ConfigError, PipelineConfig, load_config
from schema_module import tool_to_dict, tools_from_list
from trace_module import Trace, read_traces, write_traces
from agents_module import Question, generate_batch, generate_tool_sets
from reward_module import Gold, score_trace, evaluate_predictions, summarize_scores
from dataset_module import (
    EmptyFitError,
    RolloutGroup,
    filter_traces,
    export_sft,
    export_grpo,
    group_objective,
    tool_frequency_table,
    fit_rank_frequency,
    stats_report,
    plot_rank_frequency,
)


LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} - {name} - {level} - {message}"


def configure_logging(level: str = "INFO") -> None:
    """stderr 로그 싱크 설정 (stdout은 요약 표 전용)"""
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)


# ===========================
# 입력 로드
# ===========================

def load_questions(path: Path) -> List[Question]:
    """질문 JSONL {id, question, gold} 로드"""
    questions = [Question.from_dict(row, index) for index, row in enumerate(read_jsonl(path))]
    ids = [q.id for q in questions]
    if len(set(ids)) != len(ids):
        raise ValueError(f"질문 id가 중복됩니다: {path}")
    logger.info(f"질문 로드: {path} ({len(questions)}개)")
    return questions


def load_golds(path: Path) -> Dict[str, Gold]:
    return {q.id: q.gold for q in load_questions(path)}


def _gold_for(trace: Trace, golds: Dict[str, Gold]) -> Gold:
    if trace.metadata.query_id not in golds:
        logger.warning(f"[{trace.trace_id}] 정답을 찾을 수 없습니다 (query_id={trace.metadata.query_id})")
        return None
    return golds[trace.metadata.query_id]


def _out_dir(config: PipelineConfig) -> Path:
    return Path(config.paths.output_dir)


def _input_path(args: argparse.Namespace, config: PipelineConfig, default_name: str) -> Path:
    path = Path(args.input) if args.input else _out_dir(config) / default_name
    if not path.exists():
        raise FileNotFoundError(f"입력 파일이 없습니다: {path}")
    return path


def _print_table(df: pd.DataFrame) -> None:
    print(df.to_string(index=False))


def _write_json(path: Path, data: Any) -> Path:
    return atomic_write_text(path, json.dumps(data, ensure_ascii=False, indent=2) + "\n")


# ===========================
# 명령 구현
# ===========================

def cmd_gen_tools(args: argparse.Namespace, config: PipelineConfig) -> int:
    """질문별 도구 세트 생성 -> tools.jsonl, tool_failures.jsonl"""
    questions = load_questions(Path(config.paths.questions))
    backend = create_backend(config.backend, seed=args.seed)
    tool_sets, errors = generate_tool_sets(questions, backend, config.orchestrator)

    out = _out_dir(config)
    rows = [
        {"id": q.id, "question": q.question, "tools": [tool_to_dict(t) for t in tool_sets[qi]]}
        for qi, q in enumerate(questions) if qi in tool_sets
    ]
    failures = [
        {"query_id": q.id, "stage": "tools", "error": errors[qi]}
        for qi, q in enumerate(questions) if qi in errors
    ]
    write_jsonl(out / "tools.jsonl", rows)
    write_jsonl(out / "tool_failures.jsonl", failures)
    _print_table(pd.DataFrame([{"questions": len(questions), "tool_sets": len(rows), "failed": len(failures)}]))
    return 0


def cmd_gen_traces(args: argparse.Namespace, config: PipelineConfig) -> int:
    """질문별 n개 트레이스 생성 -> traces.jsonl, failures.jsonl"""
    questions = load_questions(Path(config.paths.questions))
    tool_sets = None
    if args.input:
        tool_sets = {str(row["id"]): tools_from_list(row["tools"]) for row in read_jsonl(args.input)}
        logger.info(f"미리 생성된 도구 세트 사용: {args.input} ({len(tool_sets)}개)")

    backend = create_backend(config.backend, seed=args.seed)
    results = generate_batch(questions, backend, config.orchestrator, tool_sets=tool_sets)

    traces = [r.trace for result in results for r in result.rollouts if r.ok]
    failures = [
        {"query_id": result.query_id, "rollout_index": r.rollout_index, "error": r.error}
        for result in results for r in result.rollouts if not r.ok
    ]
    out = _out_dir(config)
    write_traces(out / "traces.jsonl", traces)
    write_jsonl(out / "failures.jsonl", failures)

    summary = pd.DataFrame([
        {
            "query_id": result.query_id,
            "rollouts": len(result.rollouts),
            "ok": sum(r.ok for r in result.rollouts),
            "completed": sum(r.ok and r.trace.metadata.status == "completed" for r in result.rollouts),
            "failed": sum(not r.ok for r in result.rollouts),
        }
        for result in results
    ])
    _print_table(summary)
    return 0


def cmd_score(args: argparse.Namespace, config: PipelineConfig) -> int:
    """트레이스 보상 계산 -> scores.jsonl"""
    traces = read_traces(_input_path(args, config, "traces.jsonl"))
    golds = load_golds(Path(config.paths.questions))
    rows = [score_trace(t, _gold_for(t, golds), config.reward.loop_penalty) for t in traces]
    write_jsonl(_out_dir(config) / "scores.jsonl", rows)
    _print_table(summarize_scores(rows))
    return 0


def cmd_filter(args: argparse.Namespace, config: PipelineConfig) -> int:
    """SFT 품질 필터 -> retained.jsonl, filter_report.json"""
    traces = read_traces(_input_path(args, config, "traces.jsonl"))
    golds = load_golds(Path(config.paths.questions))
    report, retained = filter_traces([(t, _gold_for(t, golds)) for t in traces], config.filter)

    out = _out_dir(config)
    write_traces(out / "retained.jsonl", retained)
    _write_json(out / "filter_report.json", report.to_dict())
    _print_table(report.counts_table())
    print(f"retention: {report.n_retained}/{report.total} ({report.retention_rate:.1%})")
    return 0


def cmd_export(args: argparse.Namespace, config: PipelineConfig) -> int:
    """학습용 내보내기 (--format sft: retained.jsonl -> sft.jsonl, grpo: traces.jsonl -> grpo.jsonl)"""
    out = _out_dir(config)
    if args.format == "sft":
        traces = read_traces(_input_path(args, config, "retained.jsonl"))
        export_sft(traces, out / "sft.jsonl")
        print(f"sft rows: {len(traces)}")
        return 0

    traces = read_traces(_input_path(args, config, "traces.jsonl"))
    golds = load_golds(Path(config.paths.questions))
    groups: Dict[str, RolloutGroup] = {}
    for trace in traces:
        key = trace.metadata.query_id or trace.query
        if key not in groups:
            groups[key] = RolloutGroup(query=trace.query, gold=_gold_for(trace, golds),
                                       query_id=trace.metadata.query_id)
        groups[key].traces.append(trace)
    export_grpo(list(groups.values()), out / "grpo.jsonl", config.reward.loop_penalty)
    print(f"grpo groups: {len(groups)}")
    return 0


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    """EM/F1 평가 -> eval.jsonl"""
    rows = evaluate_predictions(read_jsonl(_input_path(args, config, "scores.jsonl")))
    write_jsonl(_out_dir(config) / "eval.jsonl", rows)
    _print_table(summarize_scores(rows))
    return 0


def cmd_toolstats(args: argparse.Namespace, config: PipelineConfig) -> int:
    """도구 빈도 및 멱법칙 적합 -> toolstats.json (--plot: toolstats.png)"""
    traces = read_traces(_input_path(args, config, "traces.jsonl"))
    table = tool_frequency_table(traces)
    fit = None
    try:
        fit = fit_rank_frequency(table["count"].tolist())
    except EmptyFitError as e:
        logger.warning(f"멱법칙 적합 생략: {e}")

    out = _out_dir(config)
    _write_json(out / "toolstats.json", stats_report(table, fit))
    if args.plot and fit is not None:
        plot_rank_frequency(fit, out / "toolstats.png")
    _print_table(table)
    if fit is not None:
        print(f"alpha: {fit.alpha:.4f}  r2: {fit.r2:.4f}")
    return 0


def cmd_objective(args: argparse.Namespace, config: PipelineConfig) -> int:
    """그룹 목적함수 계산 ({query_id, rewards, logp_policy, logp_ref}) -> objective.jsonl"""
    rows = read_jsonl(_input_path(args, config, "objective_input.jsonl"))
    batches = [
        group_objective(row["rewards"], row["logp_policy"], row["logp_ref"],
                        beta=config.reward.beta, query_id=row.get("query_id"))
        for row in rows
    ]
    write_jsonl(_out_dir(config) / "objective.jsonl", [b.to_dict() for b in batches])
    _print_table(pd.DataFrame(
        [{"query_id": b.query_id, "n": len(b.rewards), "kl": b.kl, "objective": b.objective} for b in batches]
    ))
    return 0


COMMANDS = {
    "gen-tools": cmd_gen_tools,
    "gen-traces": cmd_gen_traces,
    "score": cmd_score,
    "filter": cmd_filter,
    "export": cmd_export,
    "eval": cmd_eval,
    "toolstats": cmd_toolstats,
    "objective": cmd_objective,
}


# ===========================
# 인자 처리
# ===========================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON 설정 파일 (생략 시 기본값)")
    common.add_argument("--out", help="출력 디렉터리 (paths.output_dir 대체)")
    common.add_argument("--input", help="입력 파일 (명령별 기본값은 출력 디렉터리 안의 파일)")
    common.add_argument("--questions", help="질문 JSONL (paths.questions 대체)")
    common.add_argument("--n", type=int, help="질문당 롤아웃 수")
    common.add_argument("--workers", type=int, help="동시 요청 수")
    common.add_argument("--seed", type=int, help="스크립트 백엔드 대체 응답 선택용 seed")
    common.add_argument("--log-level", default="INFO", type=str.upper,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="로그 레벨")

    parser = argparse.ArgumentParser(
        prog="simtrace",
        description="시뮬레이션 도구 기반 추론 트레이스 생성 및 보상 평가",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in COMMANDS.items():
        command = sub.add_parser(name, parents=[common], help=handler.__doc__)
        if name == "export":
            command.add_argument("--format", choices=["sft", "grpo"], default="sft")
        if name == "toolstats":
            command.add_argument("--plot", action="store_true", help="log-log 그래프 저장")
    return parser


def apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """명령행 인자로 설정 덮어쓰기"""
    orchestrator_changes = {}
    if args.n is not None:
        orchestrator_changes["n_rollouts"] = args.n
    if args.workers is not None:
        orchestrator_changes["workers"] = args.workers
    path_changes = {}
    if args.out:
        path_changes["output_dir"] = args.out
    if args.questions:
        path_changes["questions"] = args.questions
    try:
        return dataclasses.replace(
            config,
            orchestrator=dataclasses.replace(config.orchestrator, **orchestrator_changes),
            paths=dataclasses.replace(config.paths, **path_changes),
        )
    except ValueError as e:
        raise ConfigError(f"명령행 인자 오류: {e}") from e


def main(argv: Optional[List[str]] = None) -> int:
    """
    명령 실행

    Returns:
        종료 코드 (0 성공, 1 실행 오류, 2 설정 오류)
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    load_dotenv()

    try:
        config = apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        logger.error(str(e))
        return 2

    try:
        return COMMANDS[args.command](args, config)
    except Exception as e:
        logger.error(f"{args.command} 실패 - {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
