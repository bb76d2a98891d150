"""
common_api.py - 공통 채팅 백엔드 클라이언트 모듈
OpenAI 호환 chat-completions 백엔드와 결정적 스크립트 백엔드를 통합 관리
세 에이전트(ToolMaker/AutoAgent/ToolActor)의 모든 모델 호출을 담당
"""

import os
import re
import json
import random
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Any, Optional, List, Iterable, Union

from loguru import logger
from tenacity import (
    retry,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
    RetryError,
)


# ===========================
# 예외 정의
# ===========================

class BackendError(Exception):
    """백엔드 호출 실패"""


class BackendTimeout(BackendError):
    """백엔드 응답 시간 초과"""


class ScriptExhausted(BackendError):
    """스크립트 백엔드의 역할별 응답 소진"""


# ===========================
# 설정
# ===========================

BACKEND_KINDS = ("live", "scripted")


@dataclass
class ChatBackendConfig:
    """채팅 백엔드 설정"""
    endpoint: Optional[str] = None
    model: str = "gpt-4o-mini"
    temperature: float = 0.7
    max_tokens: int = 2048
    timeout: float = 60.0
    max_retries: int = 2
    kind: str = "live"
    script_path: Optional[str] = None
    api_key: Optional[str] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"지원하지 않는 백엔드 종류입니다: {self.kind}")
        if self.temperature < 0:
            raise ValueError(f"temperature는 0 이상이어야 합니다: {self.temperature}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries는 0 이상이어야 합니다: {self.max_retries}")
        if self.timeout <= 0:
            raise ValueError(f"timeout은 양수여야 합니다: {self.timeout}")
        if self.kind == "scripted" and self.endpoint:
            # 스크립트 백엔드는 endpoint를 사용하지 않음
            logger.debug(f"스크립트 백엔드 - endpoint 무시: {self.endpoint}")


def mask_key(api_key: Optional[str]) -> str:
    """로그 출력용 API 키 마스킹"""
    if not api_key:
        return "(없음)"
    if len(api_key) <= 8:
        return "****"
    return f"{api_key[:4]}****{api_key[-4:]}"


# ===========================
# 라이브 백엔드 (OpenAI 호환)
# ===========================

def _reply_text(response: Any) -> str:
    """chat-completions 응답에서 첫 번째 메시지 본문 추출"""
    choices = getattr(response, "choices", None)
    if not choices:
        raise BackendError("응답에 choices가 없습니다")
    message = getattr(choices[0], "message", None)
    if message is None:
        raise BackendError("응답에 message가 없습니다")
    return message.content or ""


class LiveChatBackend:
    """OpenAI 호환 chat-completions 클라이언트 (재시도/타임아웃 포함)"""

    kind = "live"

    def __init__(self, config: ChatBackendConfig):
        """
        초기화

        Args:
            config: 백엔드 설정 (api_key가 없으면 OPENAI_API_KEY 환경변수 사용)
        """
        from openai import OpenAI

        self.config = config
        api_key = config.api_key or os.getenv("OPENAI_API_KEY", "")
        if not api_key:
            raise BackendError("OpenAI API 키가 설정되지 않았습니다. OPENAI_API_KEY 환경변수를 확인하세요.")

        # 재시도는 tenacity가 담당하므로 클라이언트 자체 재시도는 끔
        self.client = OpenAI(
            api_key=api_key,
            base_url=config.endpoint or None,
            timeout=config.timeout,
            max_retries=0,
        )
        self.backend_id = f"live:{config.model}"
        logger.info(
            f"라이브 백엔드 초기화 완료 - 모델: {config.model}, endpoint: {config.endpoint or '기본값'}, "
            f"키: {mask_key(api_key)}, 재시도: {config.max_retries}회"
        )

    def fork(self, key: str) -> "LiveChatBackend":
        """롤아웃별 백엔드 (라이브 백엔드는 상태가 없으므로 자기 자신)"""
        return self

    def now(self) -> str:
        return datetime.now(timezone.utc).isoformat(timespec="seconds")

    def complete(self, role: str, messages: List[Dict[str, str]]) -> str:
        """
        chat-completions 호출

        Args:
            role: 호출하는 에이전트 역할 (로그용)
            messages: system/user/assistant 메시지 목록

        Returns:
            모델 응답 텍스트
        """
        import openai

        transient = (
            openai.APIConnectionError,
            openai.APITimeoutError,
            openai.RateLimitError,
            openai.InternalServerError,
        )

        @retry(
            retry=retry_if_exception_type(transient),
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(multiplier=1, min=1, max=20),
            reraise=True,
        )
        def _call() -> str:
            response = self.client.chat.completions.create(
                model=self.config.model,
                messages=messages,
                temperature=self.config.temperature,
                max_tokens=self.config.max_tokens,
            )
            return _reply_text(response)

        try:
            reply = _call()
            logger.debug(f"[{role}] 응답 수신 - {len(reply)}자")
            return reply
        except BackendError as e:
            logger.error(f"[{role}] 응답 형식 오류: {e}")
            raise
        except openai.APITimeoutError as e:
            logger.warning(f"[{role}] 타임아웃 발생 (시도 {self.config.max_retries + 1}회 모두 실패)")
            raise BackendTimeout(f"{role} 요청 시간 초과: {e}") from e
        except (openai.OpenAIError, RetryError) as e:
            logger.error(f"[{role}] API 요청 실패: {e}")
            raise BackendError(f"{role} 요청 실패: {e}") from e


# ===========================
# 스크립트 백엔드 (결정적 테스트 더블)
# ===========================

ScriptEntry = Union[str, List[str]]


class ScriptedChatBackend:
    """
    역할별 고정 응답을 순서대로 돌려주는 백엔드

    스크립트 형식: {"toolmaker": [...], "autoagent": [...], "toolactor": [...]}
    각 항목은 문자열이거나 대체 응답 문자열의 리스트.
    fork()로 만든 롤아웃별 인스턴스는 항상 스크립트의 처음부터 재생한다.
    """

    kind = "scripted"
    FIXED_TIMESTAMP = "1970-01-01T00:00:00+00:00"

    def __init__(self, script: Dict[str, List[ScriptEntry]], seed: Optional[int] = None,
                 key: str = "root"):
        self.script = {str(role).lower(): list(entries) for role, entries in script.items()}
        self.seed = seed
        self.key = key
        self.backend_id = "scripted"
        self._cursor: Dict[str, int] = {}
        self._rng = random.Random(f"{seed}:{key}") if seed is not None else None
        # 호출 기록 (테스트에서 프롬프트 검사용)
        self.calls: List[Dict[str, Any]] = []

    @classmethod
    def from_file(cls, path: Union[str, Path], seed: Optional[int] = None) -> "ScriptedChatBackend":
        """스크립트 JSON 파일 로드"""
        path = Path(path)
        try:
            script = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise BackendError(f"스크립트 파일을 읽을 수 없습니다: {path} ({e})") from e
        if not isinstance(script, dict):
            raise BackendError(f"스크립트는 역할별 객체여야 합니다: {path}")
        logger.info(f"스크립트 백엔드 로드 - {path}, 역할: {sorted(script.keys())}, seed: {seed}")
        return cls(script, seed=seed)

    def fork(self, key: str) -> "ScriptedChatBackend":
        return ScriptedChatBackend(self.script, seed=self.seed, key=key)

    def now(self) -> str:
        return self.FIXED_TIMESTAMP

    def complete(self, role: str, messages: List[Dict[str, str]]) -> str:
        role = str(role).lower()
        entries = self.script.get(role, [])
        position = self._cursor.get(role, 0)
        if position >= len(entries):
            raise ScriptExhausted(f"스크립트 응답 소진 - 역할: {role}, 사용: {position}개")
        self._cursor[role] = position + 1
        self.calls.append({"role": role, "messages": [dict(m) for m in messages]})

        entry = entries[position]
        if isinstance(entry, list):
            if not entry:
                raise BackendError(f"빈 대체 응답 목록 - 역할: {role}, 위치: {position}")
            # seed가 있을 때만 대체 응답을 섞어서 선택
            entry = self._rng.choice(entry) if self._rng else entry[0]
        return str(entry)


def create_backend(config: ChatBackendConfig, seed: Optional[int] = None):
    """설정에 맞는 백엔드 생성"""
    if config.kind == "scripted":
        if not config.script_path:
            raise BackendError("스크립트 백엔드에는 script_path가 필요합니다.")
        return ScriptedChatBackend.from_file(config.script_path, seed=seed)
    return LiveChatBackend(config)


# ===========================
# 유틸리티 함수들
# ===========================

_FENCE_PATTERN = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)\n?\s*```", re.DOTALL)


def strip_code_fences(text: str) -> str:
    """
    마크다운 코드 블록 제거

    Args:
        text: 모델 출력 원문

    Returns:
        첫 코드 블록 내부 텍스트 (코드 블록이 없으면 앞뒤 공백만 제거)
    """
    if not text:
        return ""
    match = _FENCE_PATTERN.search(text)
    if match:
        return match.group(1).strip()
    return text.strip()


def extract_json_span(text: str) -> str:
    """
    앞뒤 설명 문장을 잘라 JSON 배열/객체 부분만 추출

    Args:
        text: 코드 블록이 제거된 텍스트

    Returns:
        첫 '[' 또는 '{'부터 짝이 되는 마지막 닫는 괄호까지
    """
    text = text.strip()
    starts = [i for i in (text.find("["), text.find("{")) if i >= 0]
    if not starts:
        return text
    start = min(starts)
    closer = "]" if text[start] == "[" else "}"
    end = text.rfind(closer)
    if end <= start:
        return text[start:]
    return text[start:end + 1]


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """JSONL 파일 읽기 (빈 줄 무시)"""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no} JSON 파싱 오류: {e}") from e
    return rows


def dump_jsonl_line(row: Dict[str, Any]) -> str:
    return json.dumps(row, ensure_ascii=False) + "\n"


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """
    임시 파일에 쓴 뒤 rename하여 원자적으로 저장

    Args:
        path: 대상 경로
        text: 저장할 내용

    Returns:
        저장된 경로
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def write_jsonl(path: Union[str, Path], rows: Iterable[Dict[str, Any]]) -> Path:
    """JSONL 원자적 저장"""
    return atomic_write_text(path, "".join(dump_jsonl_line(r) for r in rows))
