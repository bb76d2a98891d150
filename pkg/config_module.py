"""
config_module.py - 파이프라인 설정 모듈
JSON 설정 파일(backend/orchestrator/reward/filter/paths)을 jsonschema로 검증하고
기본값과 환경변수(자격 증명/endpoint)를 적용
"""

import os
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Any, Union

from jsonschema import Draft7Validator
from loguru import logger

from common_api import ChatBackendConfig, mask_key
from agents_module import OrchestratorConfig
from dataset_module import FilterCriteria, DEFAULT_BETA
from reward_module import DEFAULT_LOOP_PENALTY


class ConfigError(Exception):
    """설정 파일 오류"""


# ===========================
# 설정 스키마
# ===========================

_NUMBER = {"type": "number"}
_INTEGER = {"type": "integer"}
_NULLABLE_STRING = {"type": ["string", "null"]}

CONFIG_SCHEMA: Dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "backend": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"type": "string", "enum": ["live", "scripted"]},
                "endpoint": _NULLABLE_STRING,
                "model": {"type": "string"},
                "temperature": {"type": "number", "minimum": 0},
                "max_tokens": {"type": "integer", "minimum": 1},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
                "max_retries": {"type": "integer", "minimum": 0},
                "script_path": _NULLABLE_STRING,
            },
            # 스크립트 백엔드는 스크립트 파일 경로 필수
            "if": {"required": ["kind"], "properties": {"kind": {"const": "scripted"}}},
            "then": {"required": ["script_path"], "properties": {"script_path": {"type": "string"}}},
        },
        "orchestrator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_steps": {"type": "integer", "minimum": 1, "maximum": 64},
                "min_tools": _INTEGER,
                "max_tools": _INTEGER,
                "validation_retry_limit": {"type": "integer", "minimum": 1},
                "n_rollouts": {"type": "integer", "minimum": 1},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "reward": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "loop_penalty": _NUMBER,
                "beta": _NUMBER,
            },
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "min_tool_calls": {"type": "integer", "minimum": 1},
                "max_tool_calls": {"type": "integer", "minimum": 1},
                "require_no_validation_errors": {"type": "boolean"},
            },
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "questions": {"type": "string"},
                "output_dir": {"type": "string"},
            },
        },
    },
}


# ===========================
# 설정 데이터 클래스
# ===========================

@dataclass
class RewardConfig:
    """보상 설정"""
    loop_penalty: float = DEFAULT_LOOP_PENALTY
    beta: float = DEFAULT_BETA


@dataclass
class PathsConfig:
    """입출력 경로"""
    questions: str = "questions.jsonl"
    output_dir: str = "out"


@dataclass
class PipelineConfig:
    """파이프라인 전체 설정"""
    backend: ChatBackendConfig = field(default_factory=ChatBackendConfig)
    orchestrator: OrchestratorConfig = field(default_factory=OrchestratorConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    filter: FilterCriteria = field(default_factory=FilterCriteria)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _schema_errors(data: Any):
    validator = Draft7Validator(CONFIG_SCHEMA)
    return sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))


def config_from_dict(data: Dict[str, Any], env: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """
    설정 딕셔너리를 PipelineConfig로 변환

    Args:
        data: 설정 딕셔너리 (생략된 섹션/키는 기본값)
        env: 환경변수 (기본값 os.environ). OPENAI_API_KEY, OPENAI_BASE_URL만 반영

    Raises:
        ConfigError: 스키마 위반, 알 수 없는 키, 범위 위반
    """
    errors = _schema_errors(data)
    if errors:
        details = "; ".join(
            f"{'.'.join(str(p) for p in e.absolute_path) or '(root)'}: {e.message}" for e in errors
        )
        raise ConfigError(f"설정 검증 실패 - {details}")

    env = os.environ if env is None else env
    backend = dict(data.get("backend", {}))
    if env.get("OPENAI_BASE_URL"):
        backend["endpoint"] = env["OPENAI_BASE_URL"]
    if env.get("OPENAI_API_KEY"):
        backend["api_key"] = env["OPENAI_API_KEY"]

    try:
        config = PipelineConfig(
            backend=ChatBackendConfig(**backend),
            orchestrator=OrchestratorConfig(**data.get("orchestrator", {})),
            reward=RewardConfig(**data.get("reward", {})),
            filter=FilterCriteria(**data.get("filter", {})),
            paths=PathsConfig(**data.get("paths", {})),
        )
    except ValueError as e:
        raise ConfigError(f"설정 값 오류: {e}") from e

    logger.debug(
        f"설정 로드 - 백엔드: {config.backend.kind}/{config.backend.model}, "
        f"키: {mask_key(config.backend.api_key)}, n={config.orchestrator.n_rollouts}"
    )
    return config


def load_config(path: Optional[Union[str, Path]] = None,
                env: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """
    설정 파일 로드 (경로가 없으면 전부 기본값)

    Raises:
        ConfigError: 파일이 없거나 JSON이 아니거나 스키마 위반
    """
    if path is None:
        return config_from_dict({}, env)
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"설정 파일이 없습니다: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"설정 파일을 읽을 수 없습니다: {path} ({e})") from e
    logger.info(f"설정 파일 로드: {path}")
    return config_from_dict(data, env)
