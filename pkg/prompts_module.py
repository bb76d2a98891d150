"""
prompts_module.py - 에이전트 역할별 프롬프트 템플릿 모듈
ToolMaker(도구 설계) / AutoAgent(추론) / ToolActor(도구 응답 시뮬레이션)
세 역할의 시스템 프롬프트와 메시지 구성을 담당
"""

import json
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Any, Set

from loguru import logger

from schema_module import ToolInterface, serialize_tool_set, tool_to_dict


class PromptRenderError(KeyError):
    """바인딩되지 않은 플레이스홀더"""


class AgentRole(Enum):
    """에이전트 역할"""
    TOOLMAKER = "toolmaker"    # 도구 세트 생성
    AUTOAGENT = "autoagent"    # 추론 및 도구 호출
    TOOLACTOR = "toolactor"    # 도구 실행 결과 시뮬레이션


class TaskType(Enum):
    """작업 유형"""
    QUESTION_ANSWERING = "question_answering"
    COMPARISON = "comparison"
    CALCULATION = "calculation"
    CODE_GENERATION = "code_generation"
    FILE_PROCESSING = "file_processing"


class Complexity(Enum):
    """작업 복잡도"""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


# 작업 유형별 도구 설계 가이드
TOOLMAKER_GUIDANCE = {
    TaskType.QUESTION_ANSWERING.value: "Prefer search and lookup tools that return factual records; "
                                       "multi-hop questions need one tool per hop.",
    TaskType.COMPARISON.value: "Provide lookup tools for each compared entity and one tool that "
                               "returns comparable attributes side by side.",
    TaskType.CALCULATION.value: "Provide a calculator or sandboxed code executor plus a lookup tool "
                                "for any constants the problem needs.",
    TaskType.CODE_GENERATION.value: "Provide a code sandbox and a syntax checker.",
    TaskType.FILE_PROCESSING.value: "Provide a file reader and a processor for the relevant format.",
}


@dataclass
class TaskClassification:
    """ToolMaker 프롬프트용 작업 분류 (미지정 시 question_answering/medium/general)"""
    task_type: str = TaskType.QUESTION_ANSWERING.value
    complexity: str = Complexity.MEDIUM.value
    domain: str = "general"
    guidance: Optional[str] = None

    @property
    def toolmaker_guidance(self) -> str:
        if self.guidance:
            return self.guidance
        return TOOLMAKER_GUIDANCE.get(self.task_type, TOOLMAKER_GUIDANCE[TaskType.QUESTION_ANSWERING.value])

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "TaskClassification":
        data = data or {}
        defaults = cls()
        return cls(
            task_type=data.get("task_type") or defaults.task_type,
            complexity=data.get("complexity") or defaults.complexity,
            domain=data.get("domain") or defaults.domain,
            guidance=data.get("toolmaker_guidance"),
        )


@dataclass(frozen=True)
class RolePrompt:
    """역할별 시스템 프롬프트 템플릿"""
    role: AgentRole
    template: str

    @property
    def placeholders(self) -> Set[str]:
        return {name for _, name, _, _ in string.Formatter().parse(self.template) if name}

    def render(self, **values: Any) -> str:
        """
        템플릿 렌더링

        Raises:
            PromptRenderError: 값이 주어지지 않은 플레이스홀더가 있을 때
        """
        missing = sorted(self.placeholders - set(values))
        if missing:
            raise PromptRenderError(f"{self.role.value} 프롬프트에 값이 없는 플레이스홀더: {missing}")
        return self.template.format(**values)


@dataclass
class AgentPromptTemplates:
    """세 역할의 프롬프트 템플릿"""

    # ===== 1. ToolMaker (도구 설계) =====
    TOOLMAKER_SYSTEM = """You design tool interfaces for a reasoning agent. Read the task and define realistic tools, modelled on real services, that an agent could call to solve it.

## Task classification
- Task type: {task_type}
- Complexity: {complexity}
- Domain: {domain}
- Guidance: {toolmaker_guidance}

## Design rules
- Define between {min_tools} and {max_tools} tools.
- Tool names are lowercase identifiers made of letters, digits and underscores (e.g. wikipedia_search).
- Every tool has a clear description and typed parameters; mark required parameters in "required".
- Supported parameter types: object, string, integer, number, boolean, array.
- Do not define these tools, they already exist: answer_summarizer.

## Output contract
- Reply with a JSON array and nothing else: [{{"type": "function", "function": {{"name": ..., "description": ..., "parameters": {{...}}}}}}, ...]
- Never wrap the array in an object such as {{"tools": [...]}}.
- No markdown code fences, no text before or after the array.
- Every element needs "type": "function" and a "function" object."""

    TOOLMAKER_USER = """Task: {query}"""

    TOOLMAKER_CORRECTION = """Your previous reply was rejected: {error}
Reply again with only the JSON array of {min_tools} to {max_tools} tool definitions."""

    # ===== 2. AutoAgent (추론) =====
    AUTOAGENT_SYSTEM = """You are an agent that answers questions by reasoning step by step and calling tools. Never guess a fact that a tool can look up.

## Available tools
{tools_json}

## Reply format
Each reply contains one reasoning block followed by either one tool call or the final answer:

<reasoning>
your analysis and plan for the next step
</reasoning>

<tool_call>
{{"name": "<tool name>", "parameters": {{...}}}}
</tool_call>

The tool result is returned to you inside <tool_response> tags. If it is an error object with "error", "path" and "check" keys, fix the call and try again.

When the evidence is sufficient, call answer_summarizer with your findings, then give the final answer:

<answer>
\\boxed{{short answer}}
</answer>"""

    # ===== 3. ToolActor (도구 응답 시뮬레이션) =====
    TOOLACTOR_SYSTEM = """You simulate the execution of a tool. Given a tool definition and the parameters of one invocation, reply with exactly what the real service would return.

- Infer what kind of service the tool is (search engine, database, code runner, converter...) and answer like it.
- Return realistic structured data with plausible field names, identifiers, timestamps and sources.
- Keep the response consistent with the parameters; return an error message in the tool's own format if the call cannot succeed.
- For answer_summarizer, summarize the findings and end with a line "**Final Answer:** <short answer>".
- Output only the raw tool result, without commentary or wrapper text."""

    TOOLACTOR_USER = """Tool definition:
{tool_json}

Invocation parameters:
{args_json}"""

    TOOLACTOR_SCHEMA_SUFFIX = """

The result must be a JSON value conforming to this schema:
{output_schema_json}"""

    TOOLACTOR_CORRECTION = """Your previous output did not conform to the output schema: {error}
Reply again with only the corrected JSON result."""


class PromptBuilder:
    """역할별 메시지 목록 생성"""

    def __init__(self, min_tools: int = 2, max_tools: int = 5):
        self.templates = AgentPromptTemplates()
        self.min_tools = min_tools
        self.max_tools = max_tools
        self.role_prompts = {
            AgentRole.TOOLMAKER: RolePrompt(AgentRole.TOOLMAKER, self.templates.TOOLMAKER_SYSTEM),
            AgentRole.AUTOAGENT: RolePrompt(AgentRole.AUTOAGENT, self.templates.AUTOAGENT_SYSTEM),
            AgentRole.TOOLACTOR: RolePrompt(AgentRole.TOOLACTOR, self.templates.TOOLACTOR_SYSTEM),
        }

    def toolmaker_messages(self, query: str, classification: TaskClassification) -> List[Dict[str, str]]:
        system = self.role_prompts[AgentRole.TOOLMAKER].render(
            task_type=classification.task_type,
            complexity=classification.complexity,
            domain=classification.domain,
            toolmaker_guidance=classification.toolmaker_guidance,
            min_tools=self.min_tools,
            max_tools=self.max_tools,
        )
        return [
            {"role": "system", "content": system},
            {"role": "user", "content": self.templates.TOOLMAKER_USER.format(query=query)},
        ]

    def toolmaker_correction(self, error: str) -> Dict[str, str]:
        content = self.templates.TOOLMAKER_CORRECTION.format(
            error=error, min_tools=self.min_tools, max_tools=self.max_tools
        )
        return {"role": "user", "content": content}

    def autoagent_messages(self, query: str, tools: List[ToolInterface]) -> List[Dict[str, str]]:
        system = self.role_prompts[AgentRole.AUTOAGENT].render(tools_json=serialize_tool_set(tools, indent=2))
        return [
            {"role": "system", "content": system},
            {"role": "user", "content": query},
        ]

    def toolactor_messages(self, tool: ToolInterface, args: Dict[str, Any]) -> List[Dict[str, str]]:
        """
        ToolActor 메시지 구성

        도구 정의와 호출 인자만 전달한다 (정답 정보는 절대 포함하지 않음).
        """
        system = self.role_prompts[AgentRole.TOOLACTOR].render()
        definition = tool_to_dict(tool)
        output_schema = definition["function"].pop("output_schema", None)
        user = self.templates.TOOLACTOR_USER.format(
            tool_json=json.dumps(definition, ensure_ascii=False, indent=2),
            args_json=json.dumps(args, ensure_ascii=False),
        )
        if output_schema is not None:
            user += self.templates.TOOLACTOR_SCHEMA_SUFFIX.format(
                output_schema_json=json.dumps(output_schema, ensure_ascii=False, indent=2)
            )
        logger.debug(f"ToolActor 프롬프트 생성 - 도구: {tool.name}")
        return [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ]

    def toolactor_correction(self, error: str) -> Dict[str, str]:
        return {"role": "user", "content": self.templates.TOOLACTOR_CORRECTION.format(error=error)}


# 테스트 코드
if __name__ == "__main__":
    builder = PromptBuilder()
    messages = builder.toolmaker_messages("Who is the number one ranked chess player?", TaskClassification())
    print(messages[0]["content"])
    print(messages[1]["content"])
