"""
공용 pytest 픽스처
체스 트랜스크립트, 도구 세트, 스크립트 백엔드 생성기
"""

import json
from pathlib import Path

import pytest
from loguru import logger

from common_api import ScriptedChatBackend
from schema_module import tool_from_dict
from agents_module import ANSWER_SUMMARIZER
from trace_module import parse_trace


FIXTURES = Path(__file__).parent / "fixtures"

FIDE_RANKINGS = {
    "type": "function",
    "function": {
        "name": "fide_rankings_query",
        "description": "Query the official FIDE rating list",
        "parameters": {
            "type": "object",
            "properties": {
                "gender_category": {"type": "string", "enum": ["all", "open", "women"]},
                "limit": {"type": "integer", "minimum": 1, "maximum": 100},
            },
            "required": ["gender_category"],
        },
    },
}

DEMOGRAPHICS_SEARCH = {
    "type": "function",
    "function": {
        "name": "demographics_search",
        "description": "Search for demographic and population data",
        "parameters": {
            "type": "object",
            "properties": {
                "location": {"type": "string", "description": "Town or city name"},
                "year": {"type": "integer", "description": "Census year"},
            },
            "required": ["location"],
        },
    },
}


@pytest.fixture(autouse=True)
def _detach_log_sinks():
    # CLI 테스트가 붙인 싱크가 닫힌 캡처 스트림에 쓰지 않도록
    yield
    logger.remove()


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def chess_tools():
    return [tool_from_dict(FIDE_RANKINGS), ANSWER_SUMMARIZER]


@pytest.fixture
def demographics_tool():
    return tool_from_dict(DEMOGRAPHICS_SEARCH)


@pytest.fixture
def chess_text() -> str:
    return (FIXTURES / "chess_trace.txt").read_text(encoding="utf-8")


@pytest.fixture
def chess_trace(chess_text, chess_tools):
    return parse_trace(chess_text, chess_tools)


@pytest.fixture
def chess_script():
    return json.loads((FIXTURES / "chess_script.json").read_text(encoding="utf-8"))


@pytest.fixture
def scripted():
    """역할별 응답 목록으로 스크립트 백엔드 생성"""
    def build(toolmaker=(), autoagent=(), toolactor=(), seed=None):
        return ScriptedChatBackend(
            {"toolmaker": list(toolmaker), "autoagent": list(autoagent), "toolactor": list(toolactor)},
            seed=seed,
        )
    return build
