"""schema_module 테스트 - 도구 세트 파싱, 검증 술어, 구조화된 오류"""

import re
import json
import random

import pytest
from jsonschema import Draft7Validator

from schema_module import (
    CheckKind,
    DuplicateToolName,
    InvalidToolSchema,
    MalformedJson,
    MissingFunctionWrapper,
    SchemaNode,
    StructuredError,
    ToolInterface,
    Valid,
    VALID,
    WrappedObjectError,
    derive_checks,
    parse_structured_error,
    parse_tool_set,
    schema_from_dict,
    schema_to_dict,
    serialize_tool_set,
    tool_from_dict,
    validate_args,
    validate_output,
    validation_schema,
)
from tests.conftest import DEMOGRAPHICS_SEARCH


# ===========================
# 도구 세트 파싱
# ===========================

def test_parse_demographics_tool_set():
    tools = parse_tool_set(json.dumps([DEMOGRAPHICS_SEARCH]))
    assert len(tools) == 1
    tool = tools[0]
    assert tool.name == "demographics_search"
    assert tool.input_schema.required == ("location",)
    assert set(tool.input_schema.properties) == {"location", "year"}
    assert tool.input_schema.properties["year"].kind == "integer"


def test_parse_empty_array_is_empty_tool_set():
    assert parse_tool_set("[]") == []


def test_parse_recovers_from_fences_and_prose():
    text = "Here are the tools you asked for:\n```json\n" + json.dumps([DEMOGRAPHICS_SEARCH]) + "\n```\nDone."
    assert [t.name for t in parse_tool_set(text)] == ["demographics_search"]


def test_wrapped_object_is_rejected():
    with pytest.raises(WrappedObjectError):
        parse_tool_set(json.dumps({"tools": [DEMOGRAPHICS_SEARCH]}))


@pytest.mark.parametrize("text", ["not json at all", "[{\"type\": \"function\",", "42", "{\"name\": \"x\"}"])
def test_malformed_tool_set(text):
    with pytest.raises(MalformedJson):
        parse_tool_set(text)


def test_missing_function_wrapper():
    bare = DEMOGRAPHICS_SEARCH["function"]
    with pytest.raises(MissingFunctionWrapper):
        parse_tool_set(json.dumps([bare]))


def test_duplicate_tool_names():
    with pytest.raises(DuplicateToolName):
        parse_tool_set(json.dumps([DEMOGRAPHICS_SEARCH, DEMOGRAPHICS_SEARCH]))


@pytest.mark.parametrize("name", ["Demographics", "demo-search", "", "search tool"])
def test_invalid_tool_names(name):
    element = json.loads(json.dumps(DEMOGRAPHICS_SEARCH))
    element["function"]["name"] = name
    with pytest.raises(InvalidToolSchema):
        tool_from_dict(element)


@pytest.mark.parametrize("schema", [
    {"type": "object", "properties": {"a": {"type": "string"}}, "required": ["b"]},
    {"type": "object", "properties": {"a": {"type": "string", "pattern": "("}}},
    {"type": "object", "properties": {"a": {"type": "integer", "pattern": "^x"}}},
    {"type": "object", "properties": {"a": {"type": "string", "minimum": 1}}},
    {"type": "object", "properties": {"a": {"type": "integer", "enum": ["x"]}}},
    {"type": "object", "properties": {"a": {"type": "date"}}},
    {"type": "string"},
])
def test_invalid_schemas(schema):
    element = {"type": "function", "function": {"name": "sample_tool", "parameters": schema}}
    with pytest.raises(InvalidToolSchema):
        tool_from_dict(element)


def test_schema_depth_limit():
    schema = {"type": "string"}
    for _ in range(8):
        schema = {"type": "object", "properties": {"child": schema}}
    with pytest.raises(InvalidToolSchema):
        schema_from_dict(schema)

    shallow = {"type": "string"}
    for _ in range(7):
        shallow = {"type": "object", "properties": {"child": shallow}}
    assert schema_from_dict(shallow).kind == "object"


def test_missing_parameters_is_empty_object():
    tool = tool_from_dict({"type": "function", "function": {"name": "ping"}})
    assert tool.input_schema.kind == "object"
    assert tool.description == ""
    assert validate_args(tool, {"anything": 1}) is VALID


def test_tool_set_round_trip(demographics_tool):
    with_output = tool_from_dict({
        "type": "function",
        "function": {
            "name": "rank_lookup",
            "description": "Rank lookup",
            "parameters": {"type": "object", "properties": {"tags": {"type": "array", "items": {"type": "string"}}}},
            "output_schema": {"type": "object", "properties": {"rank": {"type": "integer"}}, "required": ["rank"]},
        },
    })
    tools = [demographics_tool, with_output]
    assert parse_tool_set(serialize_tool_set(tools)) == tools
    assert parse_tool_set(serialize_tool_set(tools, indent=2)) == tools


def test_wire_key_order(demographics_tool):
    data = json.loads(serialize_tool_set([demographics_tool]))[0]
    assert list(data) == ["type", "function"]
    assert list(data["function"]) == ["name", "description", "parameters"]


def test_unknown_keywords_are_preserved():
    node = schema_from_dict({"type": "string", "format": "date", "default": "2020-01-01"})
    assert node.extra == {"format": "date", "default": "2020-01-01"}
    assert schema_to_dict(node)["format"] == "date"


# ===========================
# 검증 항목 도출
# ===========================

def test_derived_checks_cover_schema(demographics_tool):
    checks = [(c.kind, c.target) for c in demographics_tool.checks]
    assert checks == [
        (CheckKind.REQUIRED_PRESENT, "location"),
        (CheckKind.TYPE_MATCH, "location"),
        (CheckKind.TYPE_MATCH, "year"),
    ]


def test_derived_checks_nested_and_arrays():
    node = schema_from_dict({
        "type": "object",
        "properties": {
            "filters": {
                "type": "object",
                "properties": {"year": {"type": "integer", "minimum": 1900}},
                "required": ["year"],
            },
            "tags": {"type": "array", "items": {"type": "string", "pattern": "^[a-z]+$"}},
            "mode": {"type": "string", "enum": ["fast", "slow"]},
        },
        "required": ["filters"],
    })
    checks = [(c.kind.value, c.target) for c in derive_checks(node)]
    assert checks == [
        ("required-present", "filters"),
        ("required-present", "filters.year"),
        ("type-match", "filters"),
        ("type-match", "filters.year"),
        ("type-match", "tags"),
        ("type-match", "tags[]"),
        ("type-match", "mode"),
        ("enum-membership", "mode"),
        ("regex-match", "tags[]"),
        ("range", "filters.year"),
    ]


# ===========================
# 인자 검증
# ===========================

def test_validate_args_examples(demographics_tool):
    assert validate_args(demographics_tool, {"location": "Gambier", "year": 2010}) is VALID

    missing = validate_args(demographics_tool, {"year": 2010})
    assert missing == StructuredError("demographics_search", "required-present", "location",
                                      "missing required argument 'location'")

    wrong_type = validate_args(demographics_tool, {"location": "Gambier", "year": "2010"})
    assert isinstance(wrong_type, StructuredError)
    assert (wrong_type.check, wrong_type.path) == ("type-match", "year")


def test_required_is_reported_before_type(demographics_tool):
    error = validate_args(demographics_tool, {"year": "2010"})
    assert error.check == "required-present"


def test_integer_semantics(demographics_tool):
    assert validate_args(demographics_tool, {"location": "x", "year": 2010.0}) is VALID
    assert validate_args(demographics_tool, {"location": "x", "year": 2010.5}).check == "type-match"
    assert validate_args(demographics_tool, {"location": "x", "year": True}).check == "type-match"


def test_extra_keys_and_optional_absence(demographics_tool):
    assert validate_args(demographics_tool, {"location": "x", "unused": [1, 2]}) is VALID


def test_non_object_arguments(demographics_tool):
    error = validate_args(demographics_tool, ["Gambier"])
    assert (error.check, error.path) == ("type-match", "")


def test_array_item_paths_are_concrete():
    tool = tool_from_dict({
        "type": "function",
        "function": {
            "name": "tagger",
            "parameters": {
                "type": "object",
                "properties": {"tags": {"type": "array", "items": {"type": "string", "pattern": "^[a-z]+$"}}},
            },
        },
    })
    assert validate_args(tool, {"tags": ["ok", "fine"]}) is VALID
    error = validate_args(tool, {"tags": ["ok", 3]})
    assert (error.check, error.path) == ("type-match", "tags.1")
    error = validate_args(tool, {"tags": ["ok", "Nope"]})
    assert (error.check, error.path) == ("regex-match", "tags.1")


def test_enum_and_range_messages():
    tool = tool_from_dict({
        "type": "function",
        "function": {
            "name": "ranker",
            "parameters": {
                "type": "object",
                "properties": {
                    "category": {"type": "string", "enum": ["all", "women"]},
                    "limit": {"type": "integer", "minimum": 1, "maximum": 100},
                },
            },
        },
    })
    error = validate_args(tool, {"category": "men"})
    assert error.check == "enum-membership"
    assert '"all"' in error.message
    assert validate_args(tool, {"limit": 0}).check == "range"
    assert validate_args(tool, {"limit": 101}).check == "range"
    assert validate_args(tool, {"limit": 100}) is VALID


NESTED_TOOL = {
    "type": "function",
    "function": {
        "name": "archive_search",
        "parameters": {
            "type": "object",
            "properties": {
                "filters": {
                    "type": "object",
                    "properties": {"year": {"type": "integer", "minimum": 1900}},
                    "required": ["year"],
                },
                "tags": {"type": "array", "items": {"type": "string", "pattern": "^[a-z]+$"}},
                "mode": {"type": "string", "enum": ["fast", "slow"]},
            },
            "required": ["filters"],
        },
    },
}


def test_first_failure_follows_check_order_with_many_errors():
    tool = tool_from_dict(NESTED_TOOL)
    args = {"filters": {}, "tags": ["ok", 3, "Bad"], "mode": "medium"}
    reported = []
    while True:
        error = validate_args(tool, args)
        if error is VALID:
            break
        reported.append((error.check, error.path))
        if error.path == "filters.year":
            args["filters"]["year"] = 1800 if not reported[1:] else 1950
        elif error.path == "tags.1":
            args["tags"][1] = "two"
        elif error.path == "tags.2":
            args["tags"][2] = "bad"
        elif error.path == "mode":
            args["mode"] = "fast"
    assert reported == [
        ("required-present", "filters.year"),
        ("type-match", "tags.1"),
        ("enum-membership", "mode"),
        ("regex-match", "tags.2"),
        ("range", "filters.year"),
    ]


def test_validation_schema_keeps_only_checked_keywords():
    node = schema_from_dict({
        "type": "object",
        "description": "search",
        "properties": {"when": {"type": "string", "format": "date", "default": "2020-01-01"}},
        "additionalProperties": False,
    })
    assert validation_schema(node) == {"type": "object", "properties": {"when": {"type": "string"}}}
    tool = ToolInterface(name="dated", description="", input_schema=node)
    assert validate_args(tool, {"when": "not a date", "other": 1}) is VALID


def test_validation_is_deterministic(demographics_tool):
    args = {"year": "x"}
    assert validate_args(demographics_tool, args) == validate_args(demographics_tool, args)


def test_validate_output():
    tool = tool_from_dict({
        "type": "function",
        "function": {
            "name": "rank_lookup",
            "parameters": {"type": "object", "properties": {}},
            "output_schema": {"type": "object", "properties": {"rank": {"type": "integer"}}, "required": ["rank"]},
        },
    })
    assert validate_output(tool, {"rank": 1}) is VALID
    assert validate_output(tool, {"name": "x"}).check == "required-present"
    assert validate_output(tool, "rank 1").path == ""


def test_validate_output_without_schema(demographics_tool):
    assert validate_output(demographics_tool, "free text") is VALID


# ===========================
# 구조화된 오류
# ===========================

def test_structured_error_wire_format():
    error = StructuredError("demographics_search", "type-match", "year", "argument 'year' must be of type integer")
    data = json.loads(error.to_json())
    assert list(data) == ["error", "tool", "path", "check"]
    assert parse_structured_error(error.to_json()) == error


@pytest.mark.parametrize("text", [
    "plain observation",
    '{"error": "x", "tool": "t", "path": "p"}',
    '{"error": "x", "tool": "t", "path": "p", "check": "c", "extra": 1}',
    '{"error": 1, "tool": "t", "path": "p", "check": "c"}',
    "[1, 2]",
])
def test_parse_structured_error_rejects_other_payloads(text):
    assert parse_structured_error(text) is None


# ===========================
# 무작위 스키마 대조 검사
# ===========================

PATTERNS = ["^[a-z]+$", "\\d", "^ab", "x$"]
STRINGS = ["abc", "ab1", "123", "", "Ab", "xyz9", "abx"]
SCALAR_KINDS = ["string", "integer", "number", "boolean"]


def random_schema(rng: random.Random, depth: int) -> dict:
    kinds = SCALAR_KINDS + (["object", "array"] if depth < 3 else [])
    kind = rng.choice(kinds)
    schema = {"type": kind}
    if kind == "object":
        names = rng.sample(["a", "b", "c", "d"], rng.randint(0, 3))
        schema["properties"] = {n: random_schema(rng, depth + 1) for n in names}
        schema["required"] = [n for n in names if rng.random() < 0.5]
    elif kind == "array":
        if rng.random() < 0.8:
            schema["items"] = random_schema(rng, depth + 1)
    elif kind == "string":
        if rng.random() < 0.3:
            schema["enum"] = rng.sample(STRINGS, 2)
        elif rng.random() < 0.3:
            schema["pattern"] = rng.choice(PATTERNS)
    elif kind in ("integer", "number"):
        if rng.random() < 0.3:
            schema["enum"] = [1, 2, 5]
        if rng.random() < 0.5:
            schema["minimum"] = rng.randint(-2, 2)
        if rng.random() < 0.5:
            schema["maximum"] = rng.randint(3, 6)
    return schema


def random_value(rng: random.Random, schema: dict, depth: int = 0):
    """대체로 스키마를 따르되 일정 확률로 어긋나는 값 생성"""
    if rng.random() < 0.15 or depth > 4:
        return rng.choice(["abc", 3, 2.5, 4.0, True, None, [], {}, [1, "x"], {"a": 1}])
    kind = schema["type"]
    if kind == "object":
        value = {}
        for name, child in schema.get("properties", {}).items():
            if name in schema.get("required", []) or rng.random() < 0.7:
                if rng.random() < 0.93:
                    value[name] = random_value(rng, child, depth + 1)
        if rng.random() < 0.2:
            value["zz"] = rng.randint(0, 9)
        return value
    if kind == "array":
        items = schema.get("items", {"type": "string"})
        return [random_value(rng, items, depth + 1) for _ in range(rng.randint(0, 3))]
    if kind == "string":
        if "enum" in schema and rng.random() < 0.7:
            return rng.choice(schema["enum"])
        return rng.choice(STRINGS)
    if kind == "integer":
        return rng.choice([rng.randint(-3, 8), float(rng.randint(-3, 8)), 1])
    if kind == "number":
        return rng.choice([rng.randint(-3, 8), rng.uniform(-3, 8), 2])
    return rng.choice([True, False])


def _kind_ok(kind: str, value) -> bool:
    if kind == "object":
        return isinstance(value, dict)
    if kind == "array":
        return isinstance(value, list)
    if kind == "string":
        return isinstance(value, str)
    if kind == "boolean":
        return type(value) is bool
    if type(value) is bool:
        return False
    if kind == "integer":
        return isinstance(value, int) or (isinstance(value, float) and value.is_integer())
    return isinstance(value, (int, float))


def conforms(node: SchemaNode, value) -> bool:
    """SchemaNode 의미론을 그대로 따르는 재귀 판정"""
    if not _kind_ok(node.kind, value):
        return False
    if node.enum is not None and value not in node.enum:
        return False
    if node.pattern is not None and re.search(node.pattern, value) is None:
        return False
    if node.minimum is not None and value < node.minimum:
        return False
    if node.maximum is not None and value > node.maximum:
        return False
    if node.kind == "object":
        if any(name not in value for name in node.required):
            return False
        return all(conforms(child, value[name]) for name, child in node.properties.items() if name in value)
    if node.kind == "array" and node.items is not None:
        return all(conforms(node.items, element) for element in value)
    return True


def test_validate_args_agrees_with_recursive_oracle():
    rng = random.Random(20240611)
    disagreements = []
    n_valid = 0
    for index in range(1000):
        parameters = random_schema(rng, 1)
        if parameters["type"] != "object":
            parameters = {"type": "object", "properties": {"a": parameters}, "required": ["a"]}
        tool = tool_from_dict({"type": "function", "function": {"name": f"t{index}", "parameters": parameters}})
        args = random_value(rng, parameters)

        expected = conforms(tool.input_schema, args)
        actual = isinstance(validate_args(tool, args), Valid)
        reference = Draft7Validator(schema_to_dict(tool.input_schema)).is_valid(args)
        n_valid += expected
        if not (expected == actual == reference):
            disagreements.append((parameters, args, expected, actual, reference))

    assert disagreements == []
    # 양쪽 결과가 모두 충분히 나와야 의미 있는 비교
    assert 100 < n_valid < 900


def test_completeness_single_violation_is_reported():
    """각 검증 항목을 하나씩만 깨뜨리면 그 항목이 보고됨"""
    tool = tool_from_dict({
        "type": "function",
        "function": {
            "name": "sample_tool",
            "parameters": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "pattern": "^[a-z]+$"},
                    "mode": {"type": "string", "enum": ["fast", "slow"]},
                    "limit": {"type": "integer", "minimum": 1, "maximum": 10},
                },
                "required": ["name"],
            },
        },
    })
    base = {"name": "abc", "mode": "fast", "limit": 5}
    assert validate_args(tool, base) is VALID
    cases = [
        ({"mode": "fast", "limit": 5}, "required-present", "name"),
        ({**base, "limit": "5"}, "type-match", "limit"),
        ({**base, "mode": "medium"}, "enum-membership", "mode"),
        ({**base, "name": "ABC"}, "regex-match", "name"),
        ({**base, "limit": 11}, "range", "limit"),
    ]
    for args, check, path in cases:
        error = validate_args(tool, args)
        assert (error.check, error.path) == (check, path)


def test_tool_interface_requires_object_input():
    with pytest.raises(InvalidToolSchema):
        ToolInterface(name="bad", description="", input_schema=SchemaNode(kind="string"))
