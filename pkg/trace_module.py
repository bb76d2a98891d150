"""
trace_module.py - ReAct 트레이스 문법 모듈
<reasoning>/<tool_call>/<tool_response>/<answer> 태그 트레이스의 파싱, 직렬화,
구조 통계(N_loops 등) 계산 및 JSONL 저장을 담당
"""

import re
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Any, Union, Tuple

from loguru import logger

from common_api import read_jsonl, write_jsonl, strip_code_fences, extract_json_span
from schema_module import ToolInterface, tool_to_dict, tools_from_list, parse_structured_error


# ===========================
# 예외 정의
# ===========================

class TraceParseError(Exception):
    """트레이스 파싱 오류"""


class UnclosedTag(TraceParseError):
    """닫히지 않은 태그"""


class InterleavingViolation(TraceParseError):
    """tool_call / tool_response 순서 위반"""


class MisplacedAnswer(TraceParseError):
    """answer 블록 뒤에 다른 단계가 있거나 answer가 두 번 이상 등장"""


# ===========================
# 트레이스 단계
# ===========================

STEP_TAGS = ("reasoning", "tool_call", "tool_response", "answer")
QUERY_TAG = "query"


@dataclass
class Reasoning:
    """사고 단계 s_t"""
    text: str


@dataclass(eq=False)
class ToolCall:
    """
    도구 호출 a_t

    args가 None이면 형식 오류 호출 (raw만 보존).
    정상 호출끼리는 (name, args)로 비교하고, 형식 오류 호출은 raw로 비교한다.
    """
    name: Optional[str]
    args: Optional[Dict[str, Any]]
    raw: str = ""

    @property
    def malformed(self) -> bool:
        return self.args is None or not self.name

    def __eq__(self, other):
        if not isinstance(other, ToolCall):
            return NotImplemented
        if self.malformed or other.malformed:
            return self.malformed and other.malformed and self.raw == other.raw
        return self.name == other.name and self.args == other.args

    def body(self) -> str:
        """직렬화용 본문 (원문이 있으면 원문 그대로)"""
        if self.raw:
            return self.raw
        return json.dumps({"name": self.name, "parameters": self.args}, ensure_ascii=False)


@dataclass
class ToolResponse:
    """관측 o_t (valid=False면 주입된 StructuredError)"""
    content: str
    valid: bool = True


@dataclass
class FinalAnswer:
    """최종 답변 블록"""
    raw: str


TraceStep = Union[Reasoning, ToolCall, ToolResponse, FinalAnswer]

STEP_KIND = {
    Reasoning: "reasoning",
    ToolCall: "tool_call",
    ToolResponse: "tool_response",
    FinalAnswer: "final_answer",
}


@dataclass
class TraceMetadata:
    """트레이스 메타데이터 (구조 비교에서 제외)"""
    backend_id: str = ""
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    step_cap: Optional[int] = None
    query_id: Optional[str] = None
    rollout_index: Optional[int] = None
    status: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Trace:
    """쿼리 하나에 대한 think-act-observe-answer 트레이스"""
    query: str
    tools: List[ToolInterface] = field(default_factory=list)
    steps: List[TraceStep] = field(default_factory=list)
    metadata: TraceMetadata = field(default_factory=TraceMetadata, compare=False)

    @property
    def trace_id(self) -> str:
        qid = self.metadata.query_id or "trace"
        if self.metadata.rollout_index is None:
            return qid
        return f"{qid}-{self.metadata.rollout_index}"

    @property
    def tool_names(self) -> List[str]:
        return [t.name for t in self.tools]

    def tool_calls(self) -> List[ToolCall]:
        return [s for s in self.steps if isinstance(s, ToolCall)]

    def final_answer(self) -> Optional[FinalAnswer]:
        for step in reversed(self.steps):
            if isinstance(step, FinalAnswer):
                return step
        return None

    def unknown_tool_calls(self) -> List[ToolCall]:
        """도구 세트에 없는 도구를 호출한 단계들"""
        names = set(self.tool_names)
        return [c for c in self.tool_calls() if not c.malformed and c.name not in names]

    def same_structure(self, other: "Trace") -> bool:
        """메타데이터를 제외한 구조 동일성"""
        return self == other


@dataclass
class TraceStats:
    """트레이스 구조 통계"""
    n_tool_calls: int = 0
    n_loops: int = 0
    n_malformed: int = 0
    n_validation_errors: int = 0
    has_final_answer: bool = False


# ===========================
# 파싱
# ===========================

_OPEN_TAG = re.compile(r"<(reasoning|tool_call|tool_response|answer)>")


def parse_tool_call_body(body: str) -> ToolCall:
    """
    tool_call 본문을 ToolCall로 변환

    {"name": ..., "parameters": {...}} 형식 (동의어 "arguments" 허용).
    문자열 안의 줄바꿈을 허용하기 위해 strict=False로 파싱한다.
    """
    raw = body.strip()
    data = None
    for candidate in (raw, extract_json_span(strip_code_fences(raw))):
        try:
            data = json.loads(candidate, strict=False)
            break
        except json.JSONDecodeError:
            continue
    if not isinstance(data, dict):
        return ToolCall(name=None, args=None, raw=raw)

    name = data.get("name")
    if not isinstance(name, str) or not name:
        return ToolCall(name=None, args=None, raw=raw)

    if "parameters" in data:
        args = data["parameters"]
    elif "arguments" in data:
        args = data["arguments"]
        # OpenAI 형식은 arguments를 JSON 문자열로 주기도 함
        if isinstance(args, str):
            try:
                args = json.loads(args, strict=False)
            except json.JSONDecodeError:
                args = None
    else:
        args = {}
    if not isinstance(args, dict):
        return ToolCall(name=name, args=None, raw=raw)
    return ToolCall(name=name, args=args, raw=raw)


def _make_step(tag: str, content: str) -> TraceStep:
    if tag == "reasoning":
        return Reasoning(content)
    if tag == "tool_call":
        return parse_tool_call_body(content)
    if tag == "tool_response":
        return ToolResponse(content, valid=parse_structured_error(content) is None)
    return FinalAnswer(content)


def _scan_blocks(text: str) -> List[Tuple[Optional[str], str]]:
    """(태그 | None=태그 밖 텍스트, 내용) 목록"""
    blocks: List[Tuple[Optional[str], str]] = []
    position = 0
    while True:
        match = _OPEN_TAG.search(text, position)
        if match is None:
            outside = text[position:]
            if outside.strip():
                blocks.append((None, outside.strip()))
            return blocks
        outside = text[position:match.start()]
        if outside.strip():
            blocks.append((None, outside.strip()))
        tag = match.group(1)
        close = f"</{tag}>"
        end = text.find(close, match.end())
        if end < 0:
            raise UnclosedTag(f"<{tag}> 태그가 닫히지 않았습니다 (위치 {match.start()})")
        blocks.append((tag, text[match.end():end].strip()))
        position = end + len(close)


def parse_steps(text: str) -> List[TraceStep]:
    """
    태그 블록들을 문서 순서대로 단계 목록으로 변환

    Args:
        text: 태그가 있는 모델 출력 (쿼리 헤더 제외)

    Returns:
        단계 목록 (마지막 tool_call에 응답이 없어도 허용)

    Raises:
        UnclosedTag, InterleavingViolation, MisplacedAnswer
    """
    steps: List[TraceStep] = []
    pending_call = False

    for tag, content in _scan_blocks(text or ""):
        if steps and isinstance(steps[-1], FinalAnswer):
            raise MisplacedAnswer("answer 블록 뒤에 다른 내용이 있습니다")

        # 태그 밖 텍스트는 직전 reasoning에 붙이거나 새 reasoning으로
        if tag is None:
            if steps and isinstance(steps[-1], Reasoning) and not pending_call:
                steps[-1] = Reasoning(f"{steps[-1].text}\n{content}")
                continue
            tag = "reasoning"

        if tag == "tool_response":
            if not pending_call:
                raise InterleavingViolation("tool_call 없이 tool_response가 등장했습니다")
            pending_call = False
        elif pending_call:
            raise InterleavingViolation(f"tool_call 다음에 tool_response 대신 <{tag}>가 등장했습니다")

        step = _make_step(tag, content)
        if isinstance(step, ToolCall):
            pending_call = True
        steps.append(step)

    return steps


_QUERY_HEADER = re.compile(r"^\s*<query>(.*?)</query>", re.DOTALL)


def parse_trace(text: str, tools: Optional[List[ToolInterface]] = None) -> Trace:
    """
    태그 트레이스 텍스트를 Trace로 변환

    Args:
        text: <query> 헤더(선택)와 단계 블록들
        tools: 트레이스에 사용된 도구 세트 (텍스트에는 포함되지 않음)

    Returns:
        Trace
    """
    text = text or ""
    query = ""
    match = _QUERY_HEADER.match(text)
    if match:
        query = match.group(1).strip()
        text = text[match.end():]
    return Trace(query=query, tools=list(tools or []), steps=parse_steps(text))


# ===========================
# 직렬화
# ===========================

def step_tag(step: TraceStep) -> str:
    if isinstance(step, Reasoning):
        return "reasoning"
    if isinstance(step, ToolCall):
        return "tool_call"
    if isinstance(step, ToolResponse):
        return "tool_response"
    return "answer"


def step_content(step: TraceStep) -> str:
    if isinstance(step, Reasoning):
        return step.text
    if isinstance(step, ToolCall):
        return step.body()
    if isinstance(step, ToolResponse):
        return step.content
    return step.raw


def serialize_step(step: TraceStep) -> str:
    tag = step_tag(step)
    return f"<{tag}>\n{step_content(step)}\n</{tag}>"


def serialize_steps(steps: List[TraceStep]) -> str:
    return "\n\n".join(serialize_step(s) for s in steps)


def serialize_trace(trace: Trace) -> str:
    """Trace를 태그 텍스트로 직렬화 (parse_trace의 역함수)"""
    blocks = [f"<{QUERY_TAG}>\n{trace.query}\n</{QUERY_TAG}>"]
    blocks.extend(serialize_step(s) for s in trace.steps)
    return "\n\n".join(blocks) + "\n"


# ===========================
# 통계 및 불변식
# ===========================

def _canonical_value(value: Any) -> Any:
    """숫자 표기 정규화 (2.0 -> 2)"""
    if isinstance(value, bool):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, dict):
        return {k: _canonical_value(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_canonical_value(v) for v in value]
    return value


def canonical_call(call: ToolCall) -> Tuple[str, str]:
    """루프 판정용 (도구 이름, 정규화된 인자) 쌍"""
    args = json.dumps(_canonical_value(call.args), sort_keys=True, ensure_ascii=False,
                      separators=(",", ":"))
    return call.name, args


def compute_stats(trace: Trace) -> TraceStats:
    """
    트레이스 구조 통계 계산

    n_loops는 앞선 호출과 (이름, 정규화 인자)가 정확히 같은 호출의 수.
    형식 오류 호출은 n_tool_calls에는 포함하되 루프 판정에서는 제외한다.
    """
    stats = TraceStats()
    seen = set()
    for step in trace.steps:
        if isinstance(step, ToolCall):
            stats.n_tool_calls += 1
            if step.malformed:
                stats.n_malformed += 1
                continue
            key = canonical_call(step)
            if key in seen:
                stats.n_loops += 1
            else:
                seen.add(key)
        elif isinstance(step, ToolResponse) and not step.valid:
            stats.n_validation_errors += 1
        elif isinstance(step, FinalAnswer):
            stats.has_final_answer = True
    return stats


def check_trace_invariants(trace: Trace) -> List[str]:
    """
    Trace 불변식 검사

    Returns:
        위반 사항 목록 (빈 목록이면 정상)
    """
    violations: List[str] = []
    names = set(trace.tool_names)
    n_answers = 0

    for index, step in enumerate(trace.steps):
        following = trace.steps[index + 1] if index + 1 < len(trace.steps) else None
        previous = trace.steps[index - 1] if index > 0 else None

        if isinstance(step, ToolCall):
            if not isinstance(following, ToolResponse):
                violations.append(f"step {index}: tool_call 다음에 tool_response가 없습니다")
            elif names and not step.malformed and step.name not in names:
                error = parse_structured_error(following.content)
                if error is None or error.check != "known-tool":
                    violations.append(f"step {index}: 알 수 없는 도구 호출이 표시되지 않았습니다 ({step.name})")
        elif isinstance(step, ToolResponse):
            if not isinstance(previous, ToolCall):
                violations.append(f"step {index}: tool_call 없이 tool_response가 있습니다")
        elif isinstance(step, FinalAnswer):
            n_answers += 1
            if following is not None:
                violations.append(f"step {index}: answer가 마지막 단계가 아닙니다")

    if n_answers > 1:
        violations.append(f"answer 블록이 {n_answers}개 있습니다")
    return violations


# ===========================
# JSONL 저장
# ===========================

def step_to_record(step: TraceStep) -> Dict[str, Any]:
    kind = STEP_KIND[type(step)]
    if isinstance(step, Reasoning):
        return {"kind": kind, "text": step.text}
    if isinstance(step, ToolCall):
        return {"kind": kind, "name": step.name, "args": step.args, "raw": step.raw}
    if isinstance(step, ToolResponse):
        return {"kind": kind, "content": step.content, "valid": step.valid}
    return {"kind": kind, "raw": step.raw}


def step_from_record(record: Dict[str, Any]) -> TraceStep:
    kind = record.get("kind")
    if kind == "reasoning":
        return Reasoning(record["text"])
    if kind == "tool_call":
        return ToolCall(name=record.get("name"), args=record.get("args"), raw=record.get("raw", ""))
    if kind == "tool_response":
        return ToolResponse(record["content"], valid=bool(record.get("valid", True)))
    if kind == "final_answer":
        return FinalAnswer(record["raw"])
    raise TraceParseError(f"알 수 없는 단계 종류: {kind!r}")


def trace_to_record(trace: Trace) -> Dict[str, Any]:
    """Trace를 JSONL 한 줄용 딕셔너리로 변환"""
    return {
        "query": trace.query,
        "tools": [tool_to_dict(t) for t in trace.tools],
        "steps": [step_to_record(s) for s in trace.steps],
        "metadata": asdict(trace.metadata),
    }


def trace_from_record(record: Dict[str, Any]) -> Trace:
    """JSONL 딕셔너리를 Trace로 복원"""
    try:
        metadata = TraceMetadata(**record.get("metadata", {}))
    except TypeError as e:
        raise TraceParseError(f"잘못된 메타데이터: {e}") from e
    return Trace(
        query=record.get("query", ""),
        tools=tools_from_list(record.get("tools", [])),
        steps=[step_from_record(s) for s in record.get("steps", [])],
        metadata=metadata,
    )


def write_traces(path: Union[str, Path], traces: List[Trace]) -> Path:
    """트레이스 목록을 JSONL로 원자적 저장"""
    written = write_jsonl(path, (trace_to_record(t) for t in traces))
    logger.info(f"트레이스 저장 완료: {written} ({len(traces)}개)")
    return written


def read_traces(path: Union[str, Path]) -> List[Trace]:
    """JSONL 파일에서 트레이스 목록 로드"""
    traces = [trace_from_record(r) for r in read_jsonl(path)]
    logger.debug(f"트레이스 로드: {path} ({len(traces)}개)")
    return traces


# 테스트 코드
if __name__ == "__main__":
    sample = """<reasoning>
I need the current #1 ranked chess player.
</reasoning>

<tool_call>
{"name": "fide_rankings_query", "parameters": {"gender_category": "all", "limit": 1}}
</tool_call>

<tool_response>
{"status": "success", "ranking_data": [{"rank": 1, "name": "Magnus Carlsen"}]}
</tool_response>

<answer>
\\boxed{\\text{Magnus Carlsen}}
</answer>"""
    trace = parse_trace(sample)
    print(compute_stats(trace))
    print(serialize_trace(trace))
