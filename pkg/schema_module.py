"""
schema_module.py - 도구 인터페이스 스키마 및 검증 모듈
OpenAI function-calling 형식의 도구 정의를 타입이 있는 스키마로 파싱하고
인자 검증 술어 V(a, S_in)와 구조화된 오류 응답을 제공합니다.
"""

import re
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Any, Tuple, Union, Iterable

from jsonschema import Draft7Validator
from jsonschema.exceptions import ValidationError as JsonSchemaError
from loguru import logger

from common_api import strip_code_fences, extract_json_span


MAX_SCHEMA_DEPTH = 8
TOOL_NAME_PATTERN = re.compile(r"^[a-z0-9_]+$")


# ===========================
# 예외 정의
# ===========================

class ToolSetError(Exception):
    """도구 세트 파싱 오류"""


class WrappedObjectError(ToolSetError):
    """{"tools": [...]} 형태로 감싼 출력 (금지 형식)"""


class MalformedJson(ToolSetError):
    """JSON 파싱 실패 또는 배열이 아닌 최상위 값"""


class MissingFunctionWrapper(ToolSetError):
    """"type": "function" / "function" 구조 누락"""


class DuplicateToolName(ToolSetError):
    """도구 이름 중복"""


class InvalidToolSchema(ToolSetError):
    """지원하지 않는 스키마 또는 스키마 불변식 위반"""


# ===========================
# 데이터 클래스 정의
# ===========================

class SchemaKind(Enum):
    """지원하는 스키마 타입"""
    OBJECT = "object"
    STRING = "string"
    INTEGER = "integer"
    NUMBER = "number"
    BOOLEAN = "boolean"
    ARRAY = "array"


class CheckKind(Enum):
    """검증 항목 종류"""
    REQUIRED_PRESENT = "required-present"
    TYPE_MATCH = "type-match"
    ENUM_MEMBERSHIP = "enum-membership"
    REGEX_MATCH = "regex-match"
    RANGE = "range"


# 오류 보고 순서 고정 (결정적 StructuredError)
CHECK_ORDER = (
    CheckKind.REQUIRED_PRESENT,
    CheckKind.TYPE_MATCH,
    CheckKind.ENUM_MEMBERSHIP,
    CheckKind.REGEX_MATCH,
    CheckKind.RANGE,
)

KIND_NAMES = tuple(k.value for k in SchemaKind)
NUMERIC_KINDS = ("integer", "number")
ITEMS_SEGMENT = "[]"


@dataclass(frozen=True)
class SchemaNode:
    """JSON 스키마 노드 (지원 부분집합)"""
    kind: str
    properties: Dict[str, "SchemaNode"] = field(default_factory=dict)
    required: Tuple[str, ...] = ()
    items: Optional["SchemaNode"] = None
    enum: Optional[Tuple[Any, ...]] = None
    pattern: Optional[str] = None
    minimum: Optional[Union[int, float]] = None
    maximum: Optional[Union[int, float]] = None
    description: Optional[str] = None
    # 검증에는 쓰지 않지만 보존하는 키워드
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ValidationCheck:
    """검증 항목 - path는 속성 이름 또는 '[]'(배열 원소)의 튜플"""
    kind: CheckKind
    path: Tuple[str, ...]
    node: SchemaNode = field(compare=False, repr=False)

    @property
    def target(self) -> str:
        return format_schema_path(self.path)


@dataclass(frozen=True)
class StructuredError:
    """검증 실패 응답 (tool_response로 주입됨)"""
    tool: str
    check: str
    path: str
    message: str

    def to_dict(self) -> Dict[str, str]:
        return {"error": self.message, "tool": self.tool, "path": self.path, "check": self.check}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


class Valid:
    """검증 성공"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Valid"


VALID = Valid()
ValidationOutcome = Union[Valid, StructuredError]


@dataclass(frozen=True)
class ToolInterface:
    """도구 인터페이스 I = {S_in, S_out, V}"""
    name: str
    description: str
    input_schema: SchemaNode
    output_schema: Optional[SchemaNode] = None
    checks: Tuple[ValidationCheck, ...] = field(init=False, compare=False, repr=False)
    output_checks: Tuple[ValidationCheck, ...] = field(init=False, compare=False, repr=False)
    input_validator: Draft7Validator = field(init=False, compare=False, repr=False)
    output_validator: Optional[Draft7Validator] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if not self.name or not TOOL_NAME_PATTERN.match(self.name):
            raise InvalidToolSchema(f"도구 이름 형식 오류 ([a-z0-9_]+): {self.name!r}")
        if self.input_schema.kind != SchemaKind.OBJECT.value:
            raise InvalidToolSchema(f"{self.name}: 입력 스키마는 object여야 합니다 ({self.input_schema.kind})")
        object.__setattr__(self, "checks", derive_checks(self.input_schema))
        output_checks = derive_checks(self.output_schema) if self.output_schema else ()
        object.__setattr__(self, "output_checks", output_checks)
        object.__setattr__(self, "input_validator", Draft7Validator(validation_schema(self.input_schema)))
        output_validator = Draft7Validator(validation_schema(self.output_schema)) if self.output_schema else None
        object.__setattr__(self, "output_validator", output_validator)


# ===========================
# 스키마 파싱/직렬화
# ===========================

def format_schema_path(path: Tuple[str, ...]) -> str:
    """('filters', 'year') -> 'filters.year', ('tags', '[]') -> 'tags[]'"""
    text = ""
    for segment in path:
        if segment == ITEMS_SEGMENT:
            text += ITEMS_SEGMENT
        else:
            text = f"{text}.{segment}" if text else segment
    return text


def matches_kind(value: Any, kind: str) -> bool:
    """JSON 값이 스키마 타입과 일치하는지 확인 (JSON Schema 의미론)"""
    if kind == "object":
        return isinstance(value, dict)
    if kind == "array":
        return isinstance(value, list)
    if kind == "string":
        return isinstance(value, str)
    if kind == "boolean":
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if kind == "integer":
        if isinstance(value, int):
            return True
        return isinstance(value, float) and math.isfinite(value) and value.is_integer()
    if kind == "number":
        return isinstance(value, (int, float))
    return False


def json_type_name(value: Any) -> str:
    """오류 메시지용 JSON 타입 이름"""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "array"
    if isinstance(value, dict):
        return "object"
    return type(value).__name__


def _is_bound(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def schema_from_dict(data: Any, depth: int = 1, where: str = "parameters") -> SchemaNode:
    """
    JSON 스키마 딕셔너리를 SchemaNode로 변환

    Args:
        data: 스키마 딕셔너리
        depth: 현재 중첩 깊이 (최상위 = 1)
        where: 오류 메시지용 위치

    Returns:
        SchemaNode

    Raises:
        InvalidToolSchema: 지원하지 않는 타입, 불변식 위반, 깊이 초과
    """
    if depth > MAX_SCHEMA_DEPTH:
        raise InvalidToolSchema(f"{where}: 스키마 중첩 깊이 초과 (최대 {MAX_SCHEMA_DEPTH})")
    if not isinstance(data, dict):
        raise InvalidToolSchema(f"{where}: 스키마는 객체여야 합니다")

    data = dict(data)
    kind = data.pop("type", None)
    if kind is None and "properties" in data:
        kind = "object"
    if kind not in KIND_NAMES:
        raise InvalidToolSchema(f"{where}: 지원하지 않는 타입 {kind!r}")

    description = data.pop("description", None)
    if description is not None and not isinstance(description, str):
        raise InvalidToolSchema(f"{where}: description은 문자열이어야 합니다")

    properties: Dict[str, SchemaNode] = {}
    required: Tuple[str, ...] = ()
    items = None
    extra: Dict[str, Any] = {}

    if kind == "object":
        raw_props = data.pop("properties", {})
        if not isinstance(raw_props, dict):
            raise InvalidToolSchema(f"{where}: properties는 객체여야 합니다")
        for prop_name, prop_schema in raw_props.items():
            properties[prop_name] = schema_from_dict(prop_schema, depth + 1, f"{where}.{prop_name}")
        raw_required = data.pop("required", [])
        if not isinstance(raw_required, list) or not all(isinstance(r, str) for r in raw_required):
            raise InvalidToolSchema(f"{where}: required는 문자열 목록이어야 합니다")
        missing = [r for r in raw_required if r not in properties]
        if missing:
            raise InvalidToolSchema(f"{where}: required에 선언되지 않은 속성이 있습니다 {missing}")
        required = tuple(raw_required)
    elif kind == "array":
        if "items" in data:
            items = schema_from_dict(data.pop("items"), depth + 1, f"{where}[]")

    enum = None
    if "enum" in data:
        raw_enum = data.pop("enum")
        if not isinstance(raw_enum, list):
            raise InvalidToolSchema(f"{where}: enum은 목록이어야 합니다")
        bad = [v for v in raw_enum if not matches_kind(v, kind)]
        if bad:
            raise InvalidToolSchema(f"{where}: enum 값이 타입 {kind}와 맞지 않습니다 {bad}")
        enum = tuple(raw_enum)

    pattern = None
    if "pattern" in data:
        if kind != "string":
            raise InvalidToolSchema(f"{where}: pattern은 string 타입에만 허용됩니다")
        pattern = data.pop("pattern")
        try:
            re.compile(pattern)
        except (re.error, TypeError) as e:
            raise InvalidToolSchema(f"{where}: 잘못된 정규식 {pattern!r} ({e})") from e

    bounds: Dict[str, Any] = {}
    for key in ("minimum", "maximum"):
        if key in data:
            if kind not in NUMERIC_KINDS:
                raise InvalidToolSchema(f"{where}: {key}는 integer/number 타입에만 허용됩니다")
            value = data.pop(key)
            if not _is_bound(value):
                raise InvalidToolSchema(f"{where}: {key}는 숫자여야 합니다")
            bounds[key] = value

    # 나머지 키워드는 보존만 함 (타입에 맞지 않는 properties/required/items 포함)
    extra.update(data)

    return SchemaNode(
        kind=kind,
        properties=properties,
        required=required,
        items=items,
        enum=enum,
        pattern=pattern,
        minimum=bounds.get("minimum"),
        maximum=bounds.get("maximum"),
        description=description,
        extra=extra,
    )


def schema_to_dict(node: SchemaNode) -> Dict[str, Any]:
    """SchemaNode를 JSON 스키마 딕셔너리로 변환 (키 순서 고정)"""
    data: Dict[str, Any] = {"type": node.kind}
    if node.description is not None:
        data["description"] = node.description
    if node.kind == "object":
        data["properties"] = {name: schema_to_dict(child) for name, child in node.properties.items()}
        if node.required:
            data["required"] = list(node.required)
    if node.items is not None:
        data["items"] = schema_to_dict(node.items)
    if node.enum is not None:
        data["enum"] = list(node.enum)
    if node.pattern is not None:
        data["pattern"] = node.pattern
    if node.minimum is not None:
        data["minimum"] = node.minimum
    if node.maximum is not None:
        data["maximum"] = node.maximum
    for key, value in node.extra.items():
        data.setdefault(key, value)
    return data


def derive_checks(root: SchemaNode) -> Tuple[ValidationCheck, ...]:
    """
    스키마에서 검증 항목 도출

    required 하나당 required-present 하나, 선언된 속성(및 배열 원소)마다
    type-match 하나, enum/pattern/범위가 선언된 곳마다 해당 검사 하나.
    결과는 CHECK_ORDER 순서, 같은 종류 안에서는 선언(깊이 우선) 순서.
    """
    by_kind: Dict[CheckKind, List[ValidationCheck]] = {kind: [] for kind in CHECK_ORDER}

    def visit(node: SchemaNode, path: Tuple[str, ...]) -> None:
        if path:
            by_kind[CheckKind.TYPE_MATCH].append(ValidationCheck(CheckKind.TYPE_MATCH, path, node))
        if node.enum is not None:
            by_kind[CheckKind.ENUM_MEMBERSHIP].append(ValidationCheck(CheckKind.ENUM_MEMBERSHIP, path, node))
        if node.pattern is not None:
            by_kind[CheckKind.REGEX_MATCH].append(ValidationCheck(CheckKind.REGEX_MATCH, path, node))
        if node.minimum is not None or node.maximum is not None:
            by_kind[CheckKind.RANGE].append(ValidationCheck(CheckKind.RANGE, path, node))
        if node.kind == "object":
            for name in node.required:
                by_kind[CheckKind.REQUIRED_PRESENT].append(
                    ValidationCheck(CheckKind.REQUIRED_PRESENT, path + (name,), node.properties[name])
                )
            for name, child in node.properties.items():
                visit(child, path + (name,))
        elif node.items is not None:
            visit(node.items, path + (ITEMS_SEGMENT,))

    visit(root, ())
    return tuple(check for kind in CHECK_ORDER for check in by_kind[kind])


# ===========================
# 검증 술어
# ===========================

def validation_schema(node: SchemaNode) -> Dict[str, Any]:
    """검증에 쓰는 키워드만 남긴 JSON 스키마 (description, 보존용 키워드 제외)"""
    data: Dict[str, Any] = {"type": node.kind}
    if node.kind == "object":
        data["properties"] = {name: validation_schema(child) for name, child in node.properties.items()}
        if node.required:
            data["required"] = list(node.required)
    if node.items is not None:
        data["items"] = validation_schema(node.items)
    if node.enum is not None:
        data["enum"] = list(node.enum)
    if node.pattern is not None:
        data["pattern"] = node.pattern
    if node.minimum is not None:
        data["minimum"] = node.minimum
    if node.maximum is not None:
        data["maximum"] = node.maximum
    return data


_KEYWORD_KINDS = {
    "required": CheckKind.REQUIRED_PRESENT,
    "type": CheckKind.TYPE_MATCH,
    "enum": CheckKind.ENUM_MEMBERSHIP,
    "pattern": CheckKind.REGEX_MATCH,
    "minimum": CheckKind.RANGE,
    "maximum": CheckKind.RANGE,
}


def _schema_location(schema_path: Iterable[Union[str, int]]) -> Tuple[Tuple[str, ...], str]:
    """['properties', 'tags', 'items', 'type'] -> (('tags', '[]'), 'type')"""
    tokens = list(schema_path)
    path: List[str] = []
    i = 0
    while i < len(tokens) - 1:
        if tokens[i] == "properties":
            path.append(str(tokens[i + 1]))
            i += 2
        elif tokens[i] == "items":
            path.append(ITEMS_SEGMENT)
            i += 1
        else:
            break
    return tuple(path), str(tokens[-1])


def _concrete(instance_path: Iterable[Union[str, int]]) -> str:
    return ".".join(str(p) for p in instance_path)


def _structured(tool_name: str, kind: CheckKind, error: JsonSchemaError,
                instance_path: Tuple[Union[str, int], ...]) -> StructuredError:
    path = _concrete(instance_path)
    keyword = error.validator
    if kind == CheckKind.REQUIRED_PRESENT:
        message = f"missing required argument '{path}'"
    elif kind == CheckKind.TYPE_MATCH:
        actual = json_type_name(error.instance)
        if not path:
            message = f"value must be of type {error.validator_value}, got {actual}"
        else:
            message = f"argument '{path}' must be of type {error.validator_value}, got {actual}"
    elif kind == CheckKind.ENUM_MEMBERSHIP:
        allowed = ", ".join(json.dumps(v, ensure_ascii=False) for v in error.validator_value)
        message = f"argument '{path}' must be one of [{allowed}]"
    elif kind == CheckKind.REGEX_MATCH:
        message = f"argument '{path}' does not match pattern {error.validator_value!r}"
    elif keyword == "minimum":
        message = f"argument '{path}' must be >= {error.validator_value}"
    else:
        message = f"argument '{path}' must be <= {error.validator_value}"
    return StructuredError(tool_name, kind.value, path, message)


def _evaluate(tool_name: str, validator: Draft7Validator, checks: Tuple[ValidationCheck, ...],
              value: Any) -> ValidationOutcome:
    """
    jsonschema 오류 중 첫 번째 실패 항목 선택

    정렬 키: (CHECK_ORDER 순서, 도출된 검증 항목의 선언 순서, 실제 값 경로).
    """
    order = {(check.kind, check.path): index for index, check in enumerate(checks)}
    kind_rank = {kind: rank for rank, kind in enumerate(CHECK_ORDER)}
    candidates = []
    for error in validator.iter_errors(value):
        kind = _KEYWORD_KINDS.get(error.validator)
        if kind is None:
            continue
        schema_path, _ = _schema_location(error.absolute_schema_path)
        instance_path = tuple(error.absolute_path)
        if not schema_path and kind == CheckKind.TYPE_MATCH:
            # 최상위 타입 불일치는 다른 모든 검사보다 먼저 보고
            return _structured(tool_name, kind, error, instance_path)
        if kind == CheckKind.REQUIRED_PRESENT:
            for name in error.validator_value:
                if isinstance(error.instance, dict) and name not in error.instance:
                    key = (kind_rank[kind], order.get((kind, schema_path + (name,)), len(order)),
                           instance_path + (name,))
                    candidates.append((key, kind, error, instance_path + (name,)))
            continue
        key = (kind_rank[kind], order.get((kind, schema_path), len(order)), instance_path)
        candidates.append((key, kind, error, instance_path))

    if not candidates:
        return VALID
    _, kind, error, instance_path = min(candidates, key=lambda c: c[0])
    return _structured(tool_name, kind, error, instance_path)


def validate_args(tool: ToolInterface, args: Any) -> ValidationOutcome:
    """
    도구 호출 인자 검증 V(a, S_in)

    Args:
        tool: 도구 인터페이스
        args: 호출 인자 (JSON 객체)

    Returns:
        VALID 또는 첫 번째 실패 항목의 StructuredError
        (순서: required -> type -> enum -> regex -> range)
    """
    return _evaluate(tool.name, tool.input_validator, tool.checks, args)


def validate_output(tool: ToolInterface, observation: Any) -> ValidationOutcome:
    """ToolActor 관측값을 S_out에 대해 검증 (S_out이 없으면 항상 VALID)"""
    if tool.output_schema is None:
        return VALID
    return _evaluate(tool.name, tool.output_validator, tool.output_checks, observation)


def parse_structured_error(text: str) -> Optional[StructuredError]:
    """tool_response 본문이 주입된 StructuredError인지 확인"""
    try:
        data = json.loads(text.strip())
    except (json.JSONDecodeError, AttributeError):
        return None
    if not isinstance(data, dict) or set(data.keys()) != {"error", "tool", "path", "check"}:
        return None
    if not all(isinstance(v, str) for v in data.values()):
        return None
    return StructuredError(tool=data["tool"], check=data["check"], path=data["path"], message=data["error"])


# ===========================
# 도구 세트 파싱/직렬화
# ===========================

def tool_from_dict(element: Any, index: int = 0) -> ToolInterface:
    """{"type": "function", "function": {...}} 원소를 ToolInterface로 변환"""
    if not isinstance(element, dict) or element.get("type") != "function" \
            or not isinstance(element.get("function"), dict):
        raise MissingFunctionWrapper(
            f"{index}번째 도구에 \"type\": \"function\" / \"function\" 구조가 없습니다"
        )
    function = element["function"]
    name = function.get("name")
    if not isinstance(name, str):
        raise MissingFunctionWrapper(f"{index}번째 도구에 name이 없습니다")
    description = function.get("description") or ""
    if not isinstance(description, str):
        raise InvalidToolSchema(f"{name}: description은 문자열이어야 합니다")

    parameters = function.get("parameters")
    input_schema = (schema_from_dict(parameters, where=f"{name}.parameters")
                    if parameters is not None else SchemaNode(kind="object"))
    output_raw = function.get("output_schema")
    output_schema = schema_from_dict(output_raw, where=f"{name}.output_schema") if output_raw is not None else None
    return ToolInterface(name=name, description=description,
                         input_schema=input_schema, output_schema=output_schema)


def tool_to_dict(tool: ToolInterface) -> Dict[str, Any]:
    """ToolInterface를 wire 형식으로 변환 (키 순서: type, function / name, description, parameters)"""
    function: Dict[str, Any] = {
        "name": tool.name,
        "description": tool.description,
        "parameters": schema_to_dict(tool.input_schema),
    }
    if tool.output_schema is not None:
        function["output_schema"] = schema_to_dict(tool.output_schema)
    return {"type": "function", "function": function}


def tools_from_list(elements: List[Any]) -> List[ToolInterface]:
    """이미 파싱된 JSON 배열을 도구 목록으로 변환 (이름 중복 검사 포함)"""
    tools: List[ToolInterface] = []
    seen = set()
    for index, element in enumerate(elements):
        tool = tool_from_dict(element, index)
        if tool.name in seen:
            raise DuplicateToolName(f"도구 이름 중복: {tool.name}")
        seen.add(tool.name)
        tools.append(tool)
    return tools


def parse_tool_set(text: str) -> List[ToolInterface]:
    """
    ToolMaker 출력에서 도구 세트 파싱

    코드 블록과 앞뒤 설명 문장을 먼저 제거(관대한 복구)한 뒤 엄격하게 파싱합니다.

    Args:
        text: 모델 출력 원문

    Returns:
        ToolInterface 목록 (빈 배열이면 빈 목록)

    Raises:
        WrappedObjectError, MalformedJson, MissingFunctionWrapper,
        DuplicateToolName, InvalidToolSchema
    """
    candidate = extract_json_span(strip_code_fences(text or ""))
    try:
        data = json.loads(candidate)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"도구 세트 JSON 파싱 실패: {e}") from e

    if isinstance(data, dict):
        if "tools" in data:
            raise WrappedObjectError("{\"tools\": [...]} 형태는 허용되지 않습니다. JSON 배열만 출력해야 합니다.")
        raise MalformedJson("도구 세트는 JSON 배열이어야 합니다")
    if not isinstance(data, list):
        raise MalformedJson(f"도구 세트는 JSON 배열이어야 합니다 ({json_type_name(data)})")

    tools = tools_from_list(data)
    logger.debug(f"도구 세트 파싱 완료: {[t.name for t in tools]}")
    return tools


def serialize_tool_set(tools: List[ToolInterface], indent: Optional[int] = None) -> str:
    """도구 세트를 wire 형식 JSON 배열로 직렬화"""
    return json.dumps([tool_to_dict(t) for t in tools], ensure_ascii=False, indent=indent)


# 테스트 코드
if __name__ == "__main__":
    sample = """[
      {"type": "function", "function": {
        "name": "demographics_search",
        "description": "Search for demographic and population data",
        "parameters": {"type": "object",
          "properties": {"location": {"type": "string", "description": "Town or city name"},
                         "year": {"type": "integer", "description": "Census year"}},
          "required": ["location"]}}}
    ]"""
    tool = parse_tool_set(sample)[0]
    print(tool.name, [c.kind.value + ":" + c.target for c in tool.checks])
    print(validate_args(tool, {"location": "Gambier", "year": 2010}))
    print(validate_args(tool, {"year": 2010}))
    print(validate_args(tool, {"location": "Gambier", "year": "2010"}))
