"""
agents_module.py - 3-에이전트 트레이스 생성 모듈
ToolMaker가 도구 세트를 만들고, AutoAgent가 추론/도구 호출을 하며,
ToolActor가 도구 응답을 시뮬레이션하는 생성 프로토콜 전체를 실행
"""

import re
import json
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Any, Tuple

from loguru import logger

from common_api import strip_code_fences, extract_json_span
from schema_module import (
    ToolInterface,
    ToolSetError,
    StructuredError,
    Valid,
    parse_tool_set,
    tool_from_dict,
    validate_args,
    validate_output,
)
from trace_module import (
    Trace,
    TraceMetadata,
    TraceStep,
    Reasoning,
    ToolCall,
    ToolResponse,
    FinalAnswer,
    TraceParseError,
    parse_steps,
    serialize_steps,
    serialize_step,
)
from prompts_module import AgentRole, PromptBuilder, TaskClassification


# ===========================
# 예외 정의
# ===========================

class AgentError(Exception):
    """에이전트 프로토콜 오류"""


class ToolGenerationFailed(AgentError):
    """재시도 후에도 유효한 도구 세트를 얻지 못함"""


class OutputSchemaViolation(AgentError):
    """재시도 후에도 ToolActor 출력이 S_out을 만족하지 않음"""


# ===========================
# 설정 및 상수
# ===========================

STATUS_COMPLETED = "completed"
STATUS_STEP_BUDGET = "step_budget_exhausted"
STATUS_RETRIES_EXHAUSTED = "validation_retries_exhausted"

CHECK_WELL_FORMED = "well-formed-call"
CHECK_KNOWN_TOOL = "known-tool"

ANSWER_SUMMARIZER_NAME = "answer_summarizer"

# 미리 정의된 요약 도구 (ToolMaker가 생성하지 않음)
ANSWER_SUMMARIZER = tool_from_dict({
    "type": "function",
    "function": {
        "name": ANSWER_SUMMARIZER_NAME,
        "description": "Summarizes research findings and formats the final answer",
        "parameters": {
            "type": "object",
            "properties": {
                "research_findings": {"type": "string", "description": "Evidence gathered with the other tools"},
                "task_query": {"type": "string", "description": "The original question"},
                "final_answer": {"type": "string", "description": "The answer supported by the findings"},
            },
            "required": ["research_findings", "final_answer"],
        },
    },
})

CONTINUE_NUDGE = "Continue: call one tool or give the final answer."


@dataclass
class OrchestratorConfig:
    """트레이스 생성 설정"""
    max_steps: int = 16                 # T_max (AutoAgent 턴 수)
    min_tools: int = 2
    max_tools: int = 5
    validation_retry_limit: int = 3     # 연속 검증 실패 후 재시도 허용 횟수
    n_rollouts: int = 8
    workers: int = 4

    def __post_init__(self):
        if not 1 <= self.max_steps <= 64:
            raise ValueError(f"max_steps는 1~64 범위여야 합니다: {self.max_steps}")
        if self.validation_retry_limit < 1:
            raise ValueError(f"validation_retry_limit는 1 이상이어야 합니다: {self.validation_retry_limit}")
        if not 1 <= self.min_tools <= self.max_tools:
            raise ValueError(f"도구 개수 범위가 잘못되었습니다: {self.min_tools}~{self.max_tools}")
        if self.n_rollouts < 1:
            raise ValueError(f"n_rollouts는 1 이상이어야 합니다: {self.n_rollouts}")
        if self.workers < 1:
            raise ValueError(f"workers는 1 이상이어야 합니다: {self.workers}")


@dataclass
class Question:
    """질문 입력 한 건 ({id, question, gold})"""
    id: str
    question: str
    gold: Any = None
    classification: TaskClassification = field(default_factory=TaskClassification)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], index: int = 0) -> "Question":
        if not isinstance(data.get("question"), str) or not data["question"].strip():
            raise ValueError(f"{index}번째 질문에 question 필드가 없습니다")
        return cls(
            id=str(data.get("id", f"q{index}")),
            question=data["question"],
            gold=data.get("gold"),
            classification=TaskClassification.from_dict(data),
        )


@dataclass
class RolloutResult:
    """롤아웃 한 건의 결과 (trace 또는 error)"""
    rollout_index: int
    trace: Optional[Trace] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.trace is not None


@dataclass
class BatchResult:
    """질문 하나에 대한 도구 세트와 n개 롤아웃"""
    query_index: int
    query_id: str
    query: str
    tools: List[ToolInterface] = field(default_factory=list)
    rollouts: List[RolloutResult] = field(default_factory=list)


def ensure_summarizer(tools: List[ToolInterface]) -> List[ToolInterface]:
    """answer_summarizer가 없으면 추가"""
    if any(t.name == ANSWER_SUMMARIZER_NAME for t in tools):
        return list(tools)
    return list(tools) + [ANSWER_SUMMARIZER]


def _describe(error: Exception) -> str:
    return f"{type(error).__name__}: {error}"


# ===========================
# ToolMaker
# ===========================

def make_tools(query: str, classification: Optional[TaskClassification], backend,
               config: Optional[OrchestratorConfig] = None,
               prompts: Optional[PromptBuilder] = None) -> List[ToolInterface]:
    """
    ToolMaker로 도구 세트 생성

    파싱 실패나 개수 범위 위반 시 오류 내용을 알려주고 한 번 다시 요청한다.
    개수 범위는 생성된 도구에만 적용되고, answer_summarizer는 그 뒤에 추가된다.

    Args:
        query: 질문
        classification: 작업 분류 (None이면 기본값)
        backend: 채팅 백엔드
        config: 도구 개수 범위를 담은 설정

    Returns:
        answer_summarizer를 포함한 도구 목록

    Raises:
        ToolGenerationFailed: 재요청 후에도 실패
        BackendTimeout: 백엔드 시간 초과
    """
    config = config or OrchestratorConfig()
    prompts = prompts or PromptBuilder(config.min_tools, config.max_tools)
    classification = classification or TaskClassification()
    messages = prompts.toolmaker_messages(query, classification)

    last_error = ""
    for attempt in range(2):
        reply = backend.complete(AgentRole.TOOLMAKER.value, messages)
        try:
            tools = parse_tool_set(reply)
            generated = [t for t in tools if t.name != ANSWER_SUMMARIZER_NAME]
            if not config.min_tools <= len(generated) <= config.max_tools:
                raise ToolSetError(
                    f"{len(generated)} tools defined; expected between "
                    f"{config.min_tools} and {config.max_tools}"
                )
            logger.debug(f"도구 세트 생성 완료 (시도 {attempt + 1}): {[t.name for t in tools]}")
            return ensure_summarizer(tools)
        except ToolSetError as e:
            last_error = _describe(e)
            logger.warning(f"도구 세트 거부 (시도 {attempt + 1}/2): {last_error}")
            messages = messages + [
                {"role": "assistant", "content": reply},
                prompts.toolmaker_correction(str(e)),
            ]

    raise ToolGenerationFailed(f"도구 세트 생성 실패: {last_error}")


# ===========================
# ToolActor
# ===========================

def _parse_observation(reply: str) -> Any:
    return json.loads(extract_json_span(strip_code_fences(reply)))


def act_tool(tool: ToolInterface, args: Dict[str, Any], backend,
             prompts: Optional[PromptBuilder] = None) -> str:
    """
    ToolActor로 도구 실행 결과 시뮬레이션

    Args:
        tool: 호출된 도구
        args: 검증을 통과한 인자
        backend: 채팅 백엔드

    Returns:
        ToolActor 응답 원문

    Raises:
        OutputSchemaViolation: S_out이 있고 재요청 후에도 만족하지 않을 때
    """
    prompts = prompts or PromptBuilder()
    messages = prompts.toolactor_messages(tool, args)
    reply = backend.complete(AgentRole.TOOLACTOR.value, messages)
    if tool.output_schema is None:
        return reply

    problem = ""
    for attempt in range(2):
        try:
            outcome = validate_output(tool, _parse_observation(reply))
        except json.JSONDecodeError as e:
            outcome = None
            problem = f"output is not valid JSON ({e.msg})"
        if isinstance(outcome, Valid):
            return reply
        if isinstance(outcome, StructuredError):
            problem = outcome.message
        logger.warning(f"[{tool.name}] 출력 스키마 위반 (시도 {attempt + 1}/2): {problem}")
        if attempt == 0:
            messages = messages + [
                {"role": "assistant", "content": reply},
                prompts.toolactor_correction(problem),
            ]
            reply = backend.complete(AgentRole.TOOLACTOR.value, messages)

    raise OutputSchemaViolation(f"{tool.name}: {problem}")


# ===========================
# AutoAgent 루프
# ===========================

_ANY_TAG = re.compile(r"</?(reasoning|tool_call|tool_response|answer)>")
_OPEN_TAG = re.compile(r"<(reasoning|tool_call|tool_response|answer)>")
_BLOCK_END = re.compile(r"</(tool_call|answer)>")


def parse_agent_block(reply: str) -> List[TraceStep]:
    """
    AutoAgent 응답 한 번을 단계 목록으로 변환

    첫 tool_call 또는 answer 뒤의 내용은 버리고, 마지막 태그가 닫히지 않았으면
    닫아 준다. 그래도 파싱이 안 되면 태그를 제거한 텍스트를 reasoning으로 남긴다.
    """
    text = reply or ""
    end = _BLOCK_END.search(text)
    if end:
        text = text[:end.end()]
    opens = list(_OPEN_TAG.finditer(text))
    if opens:
        last = opens[-1]
        if text.find(f"</{last.group(1)}>", last.end()) < 0:
            text = f"{text}\n</{last.group(1)}>"
    try:
        steps = parse_steps(text)
    except TraceParseError as e:
        logger.debug(f"AutoAgent 블록 복구 실패, reasoning으로 보존: {e}")
        plain = _ANY_TAG.sub("", text).strip()
        steps = [Reasoning(plain)] if plain else []

    # 모델이 직접 써 넣은 tool_response 등은 제거
    for index, step in enumerate(steps):
        if isinstance(step, (ToolCall, FinalAnswer)):
            return steps[:index + 1]
    return steps


def _clean_observation(text: str) -> str:
    return (text or "").replace("</tool_response>", "").strip()


def respond_to_call(call: ToolCall, tool_map: Dict[str, ToolInterface], backend,
                    prompts: PromptBuilder) -> ToolResponse:
    """
    tool_call 하나에 대한 tool_response 생성

    형식 오류/미지의 도구/인자 검증 실패는 StructuredError를 응답으로 주입하고,
    통과한 호출만 ToolActor에 전달한다.
    """
    if call.malformed:
        error = StructuredError(
            tool=call.name or "",
            check=CHECK_WELL_FORMED,
            path="",
            message='tool_call body must be a JSON object with "name" and "parameters"',
        )
        return ToolResponse(error.to_json(), valid=False)

    tool = tool_map.get(call.name)
    if tool is None:
        available = ", ".join(sorted(tool_map))
        error = StructuredError(
            tool=call.name,
            check=CHECK_KNOWN_TOOL,
            path="name",
            message=f"unknown tool '{call.name}'; available tools: {available}",
        )
        return ToolResponse(error.to_json(), valid=False)

    outcome = validate_args(tool, call.args)
    if isinstance(outcome, StructuredError):
        logger.debug(f"인자 검증 실패 - {outcome.tool}.{outcome.path}: {outcome.check}")
        return ToolResponse(outcome.to_json(), valid=False)

    return ToolResponse(_clean_observation(act_tool(tool, call.args, backend, prompts)), valid=True)


def run_trace(query: str, tools: List[ToolInterface], backend,
              config: Optional[OrchestratorConfig] = None,
              prompts: Optional[PromptBuilder] = None,
              query_id: Optional[str] = None,
              rollout_index: Optional[int] = None) -> Trace:
    """
    AutoAgent 추론 루프 실행

    최대 T_max번 AutoAgent 응답을 받는다. tool_call이 있으면 검증 후 ToolActor
    관측 또는 StructuredError를 tool_response로 이어 붙이고, answer가 나오면 종료.

    Args:
        query: 질문
        tools: 도구 세트 (비어 있으면 안 됨)
        backend: 채팅 백엔드 (롤아웃 전용 인스턴스)
        config: 생성 설정

    Returns:
        Trace (metadata.status로 종료 사유 표시)
    """
    if not tools:
        raise ValueError("도구 세트가 비어 있습니다")
    config = config or OrchestratorConfig()
    prompts = prompts or PromptBuilder(config.min_tools, config.max_tools)
    tools = ensure_summarizer(tools)
    tool_map = {t.name: t for t in tools}

    messages = prompts.autoagent_messages(query, tools)
    steps: List[TraceStep] = []
    started_at = backend.now()
    status = STATUS_STEP_BUDGET
    consecutive_errors = 0
    turns = 0

    while turns < config.max_steps:
        turns += 1
        reply = backend.complete(AgentRole.AUTOAGENT.value, messages)
        block = parse_agent_block(reply)
        steps.extend(block)
        messages.append({"role": "assistant", "content": serialize_steps(block)})

        last = block[-1] if block else None
        if isinstance(last, FinalAnswer):
            status = STATUS_COMPLETED
            break
        if not isinstance(last, ToolCall):
            messages.append({"role": "user", "content": CONTINUE_NUDGE})
            continue

        response = respond_to_call(last, tool_map, backend, prompts)
        steps.append(response)
        messages.append({"role": "user", "content": serialize_step(response)})

        if response.valid:
            consecutive_errors = 0
            continue
        consecutive_errors += 1
        if consecutive_errors > config.validation_retry_limit:
            status = STATUS_RETRIES_EXHAUSTED
            logger.warning(f"[{query_id}:{rollout_index}] 연속 검증 실패 {consecutive_errors}회 - 롤아웃 종료")
            break

    if status == STATUS_STEP_BUDGET:
        logger.info(f"[{query_id}:{rollout_index}] T_max({config.max_steps}) 도달, 최종 답변 없음")

    metadata = TraceMetadata(
        backend_id=backend.backend_id,
        started_at=started_at,
        finished_at=backend.now(),
        step_cap=config.max_steps,
        query_id=query_id,
        rollout_index=rollout_index,
        status=status,
        extra={"turns": turns},
    )
    return Trace(query=query, tools=tools, steps=steps, metadata=metadata)


# ===========================
# 배치 생성
# ===========================

def _collect_tool_sets(pool: ThreadPoolExecutor, questions: List[Question], backend,
                       config: OrchestratorConfig, prompts: PromptBuilder,
                       skip: Optional[Dict[str, List[ToolInterface]]] = None
                       ) -> Tuple[Dict[int, List[ToolInterface]], Dict[int, str]]:
    skip = skip or {}
    tool_sets: Dict[int, List[ToolInterface]] = {}
    errors: Dict[int, str] = {}
    futures = {}
    for qi, question in enumerate(questions):
        if question.id in skip:
            tool_sets[qi] = ensure_summarizer(skip[question.id])
            continue
        futures[pool.submit(make_tools, question.question, question.classification,
                            backend.fork(f"{qi}:tools"), config, prompts)] = qi
    for future in as_completed(futures):
        qi = futures[future]
        try:
            tool_sets[qi] = future.result()
        except Exception as e:
            errors[qi] = _describe(e)
            logger.error(f"[{questions[qi].id}] 도구 세트 생성 실패: {errors[qi]}")
    return tool_sets, errors


def generate_tool_sets(questions: List[Question], backend, config: Optional[OrchestratorConfig] = None,
                       prompts: Optional[PromptBuilder] = None
                       ) -> Tuple[Dict[int, List[ToolInterface]], Dict[int, str]]:
    """
    질문별 도구 세트 생성 (workers 개 스레드)

    Returns:
        (질문 순번별 도구 세트, 질문 순번별 실패 사유)
    """
    config = config or OrchestratorConfig()
    prompts = prompts or PromptBuilder(config.min_tools, config.max_tools)
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        tool_sets, errors = _collect_tool_sets(pool, questions, backend, config, prompts)
    logger.info(f"도구 세트 생성 완료 - 성공 {len(tool_sets)}/{len(questions)}")
    return tool_sets, errors


def generate_batch(questions: List[Question], backend, config: Optional[OrchestratorConfig] = None,
                   tool_sets: Optional[Dict[str, List[ToolInterface]]] = None,
                   prompts: Optional[PromptBuilder] = None) -> List[BatchResult]:
    """
    질문 목록에 대해 질문당 n개 롤아웃 생성

    요청은 workers 개의 스레드로 동시에 처리되지만, 결과는 (질문 순서, 롤아웃 순서)로
    정렬된다. 롤아웃별 실패는 기록만 하고 배치를 중단하지 않는다.

    Args:
        questions: 질문 목록 (정답은 에이전트에 전달되지 않음)
        backend: 채팅 백엔드 (롤아웃마다 fork)
        config: 생성 설정
        tool_sets: 질문 id별로 미리 만든 도구 세트 (없으면 ToolMaker 호출)

    Returns:
        BatchResult 목록
    """
    config = config or OrchestratorConfig()
    prompts = prompts or PromptBuilder(config.min_tools, config.max_tools)
    results = [BatchResult(query_index=qi, query_id=q.id, query=q.question) for qi, q in enumerate(questions)]

    logger.info(f"트레이스 생성 시작 - 질문 {len(questions)}개, 롤아웃 {config.n_rollouts}개, "
                f"workers {config.workers}, 백엔드 {backend.backend_id}")

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        # 1단계: 질문별 도구 세트
        made, tool_errors = _collect_tool_sets(pool, questions, backend, config, prompts, tool_sets)
        for qi, tools in made.items():
            results[qi].tools = tools

        # 2단계: 롤아웃
        futures = {}
        for qi, question in enumerate(questions):
            if qi in tool_errors:
                continue
            for ri in range(config.n_rollouts):
                future = pool.submit(run_trace, question.question, results[qi].tools,
                                     backend.fork(f"{qi}:{ri}"), config, prompts, question.id, ri)
                futures[future] = (qi, ri)

        outcomes: Dict[Tuple[int, int], RolloutResult] = {}
        for future in as_completed(futures):
            qi, ri = futures[future]
            try:
                outcomes[(qi, ri)] = RolloutResult(ri, trace=future.result())
            except Exception as e:
                outcomes[(qi, ri)] = RolloutResult(ri, error=_describe(e))
                logger.error(f"[{questions[qi].id}:{ri}] 롤아웃 실패: {_describe(e)}")

    for qi, result in enumerate(results):
        for ri in range(config.n_rollouts):
            if qi in tool_errors:
                result.rollouts.append(RolloutResult(ri, error=tool_errors[qi]))
            else:
                result.rollouts.append(outcomes[(qi, ri)])

    n_ok = sum(r.ok for result in results for r in result.rollouts)
    n_total = len(questions) * config.n_rollouts
    logger.info(f"트레이스 생성 완료 - 성공 {n_ok}/{n_total}")
    return results
