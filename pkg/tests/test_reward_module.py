"""reward_module 테스트 - 정규화, 답변 추출, 계층형 점수, EM/F1"""

import random
import itertools

import pytest

from trace_module import FinalAnswer, Reasoning, ToolCall, ToolResponse, Trace
from reward_module import (
    TIERS,
    answer_score,
    evaluate_predictions,
    exact_match,
    extract_answers,
    f1_score,
    normalize,
    score_trace,
    strip_wrappers,
    summarize_scores,
    trace_reward,
)


# ===========================
# 정규화
# ===========================

@pytest.mark.parametrize("raw, expected", [
    ("\\boxed{\\text{Magnus Carlsen}}", "magnus carlsen"),
    ("The Eiffel Tower!", "eiffel tower"),
    ("  An   apple ", "apple"),
    ("U.S.A.", "usa"),
    ("", ""),
    (None, ""),
])
def test_normalize_examples(raw, expected):
    assert normalize(raw) == expected


def test_strip_wrappers_keeps_case():
    assert strip_wrappers("\\boxed{\\text{Magnus Carlsen}}") == "Magnus Carlsen"
    assert strip_wrappers("no wrapper") == "no wrapper"


def test_normalize_is_idempotent():
    rng = random.Random(3)
    alphabet = list("abcAB .,!?-'") + ["the ", "an ", "\\boxed{", "}", "\\text{"]
    for _ in range(500):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 25)))
        once = normalize(text)
        assert normalize(once) == once


# ===========================
# 답변 추출
# ===========================

def summarizer(final_answer):
    return ToolCall("answer_summarizer", {"research_findings": "notes", "final_answer": final_answer})


def test_extract_answers_from_chess_transcript(chess_trace):
    answers = extract_answers(chess_trace)
    assert answers.a_f == "Magnus Carlsen"
    assert answers.a_i.startswith("Magnus Carlsen \nfrom Norway")
    assert answers.sources == {"a_f": "answer", "a_i": "summarizer"}


def test_extract_answers_marker_fallback():
    steps = [
        ToolCall("search", {}), ToolResponse("**Final Answer:** London"),
        ToolCall("search", {"q": 2}), ToolResponse("notes\n**Final Answer:** Paris\nextra line"),
        FinalAnswer("Paris"),
    ]
    answers = extract_answers(Trace(query="q", steps=steps))
    assert answers.a_i == "Paris\nextra line"
    assert answers.sources["a_i"] == "marker"


def test_marker_fallback_keeps_trailing_text_for_scoring():
    steps = [
        ToolCall("search", {}), ToolResponse("**Final Answer:** Paris\nSources: Wikipedia"),
        FinalAnswer("Paris"),
    ]
    trace = Trace(query="q", steps=steps)
    assert extract_answers(trace).a_i == "Paris\nSources: Wikipedia"
    assert trace_reward(trace, "Paris").r_ans == 0.8


def test_extract_answers_missing():
    answers = extract_answers(Trace(query="q", steps=[Reasoning("nothing yet")]))
    assert answers.a_f is None
    assert answers.a_i is None


def test_last_summarizer_call_wins():
    steps = [summarizer("Oslo"), ToolResponse("ok"), summarizer("Bergen"), ToolResponse("ok"), FinalAnswer("Bergen")]
    assert extract_answers(Trace(query="q", steps=steps)).a_i == "Bergen"


# ===========================
# 계층형 점수
# ===========================

def test_tier_table_is_exhaustive():
    """(a_f, a_i)가 정답/오답/없음인 모든 조합"""
    gold = "Magnus Carlsen"
    variants = {
        "gold": ["Magnus Carlsen", "\\boxed{magnus carlsen}"],
        "wrong": ["Hikaru Nakamura", "Fabiano Caruana"],
        "none": [None],
    }
    expected = {
        ("gold", "gold"): 1.0,
        ("gold", "wrong"): 0.8,
        ("gold", "none"): 0.8,
        ("wrong", "gold"): 0.6,
        ("none", "gold"): 0.6,
        ("wrong", "wrong"): 0.0,
        ("wrong", "none"): 0.0,
        ("none", "wrong"): 0.0,
        ("none", "none"): 0.0,
    }
    seen = set()
    for (f_label, i_label), value in expected.items():
        for a_f, a_i in itertools.product(variants[f_label], variants[i_label]):
            score = answer_score(a_f, a_i, gold)
            assert score == value, (a_f, a_i)
            assert score in TIERS
            seen.add(score)
    # 0.3 단계는 앞의 두 단계에 가려져 도달하지 않음
    assert seen == {1.0, 0.8, 0.6, 0.0}


def test_swapping_answers_moves_between_tiers():
    gold = "paris"
    assert answer_score("Paris", "London", gold) == 0.8
    assert answer_score("London", "Paris", gold) == 0.6


def test_list_gold_accepts_any_alias():
    assert answer_score("Carlsen", "Magnus Carlsen", ["Magnus Carlsen", "Carlsen"]) == 1.0


def test_chess_transcript_reward(chess_trace):
    reward = trace_reward(chess_trace, "Magnus Carlsen")
    assert reward.r_ans == 0.8
    assert reward.n_loops == 0
    assert reward.r_efficiency == 0.0
    assert reward.total == 0.8


def test_loop_penalty_is_subtracted():
    search = ToolCall("search", {"q": "capital of france"})
    steps = [
        search, ToolResponse("Paris"),
        ToolCall("search", {"q": "capital of france"}), ToolResponse("Paris"),
        ToolCall("search", {"q": "capital of france"}), ToolResponse("Paris"),
        summarizer("Paris"), ToolResponse("done"),
        FinalAnswer("\\boxed{Paris}"),
    ]
    reward = trace_reward(Trace(query="q", steps=steps), "Paris")
    assert reward.r_ans == 1.0
    assert reward.n_loops == 2
    assert reward.total == 1.0 - 0.1 * 2
    assert trace_reward(Trace(query="q", steps=steps), "Paris", loop_penalty=0.25).total == 0.5


def test_empty_trace_scores_zero():
    reward = trace_reward(Trace(query="q"), "anything")
    assert reward.total == 0.0


def test_score_trace_row(chess_trace):
    row = score_trace(chess_trace, "Magnus Carlsen")
    assert list(row) == ["trace_id", "a_f", "a_i", "gold", "r_ans", "n_loops", "r_efficiency", "total", "em", "f1"]
    assert row["total"] == 0.8
    assert row["em"] == 1
    assert row["f1"] == 1.0


# ===========================
# EM / F1
# ===========================

METRIC_SUITE = [
    ("\\boxed{\\text{Magnus Carlsen}}", "Magnus Carlsen", 1, 1.0),
    ("x", "x", 1, 1.0),
    ("barack obama", "obama", 0, 2 / 3),
    ("The Eiffel Tower!", "eiffel tower", 1, 1.0),
    ("Paris", "paris", 1, 1.0),
    ("paris, france", "Paris", 0, 2 / 3),
    ("an apple", "apple", 1, 1.0),
    ("", "", 1, 1.0),
    ("", "paris", 0, 0.0),
    ("london", "paris", 0, 0.0),
    ("\\boxed{42}", "42", 1, 1.0),
    ("U.S.A.", "usa", 1, 1.0),
    ("New York City", "new york", 0, 0.8),
    ("the the the", "", 1, 1.0),
    ("Magnus  Carlsen", "magnus carlsen", 1, 1.0),
    ("a b c d", "b c", 0, 0.8),
    ("It's raining", "its raining", 1, 1.0),
    ("cat cat dog", "cat dog dog", 0, 2 / 3),
    ("\\text{Albert Einstein}", "albert einstein", 1, 1.0),
    ("1,000", "1000", 1, 1.0),
]


@pytest.mark.parametrize("prediction, gold, em, f1", METRIC_SUITE)
def test_metric_suite(prediction, gold, em, f1):
    assert exact_match(prediction, gold) == em
    assert f1_score(prediction, gold) == pytest.approx(f1, abs=1e-12)


def test_exact_match_implies_full_f1():
    for prediction, gold, em, _ in METRIC_SUITE:
        if em:
            assert f1_score(prediction, gold) == 1.0


def test_list_gold_takes_best_alias():
    assert exact_match("Carlsen", ["Magnus Carlsen", "Carlsen"]) == 1
    assert f1_score("magnus", ["Magnus Carlsen", "Hikaru"]) == pytest.approx(2 / 3)
    assert f1_score(None, "x") == 0.0


def test_evaluate_and_summarize():
    rows = evaluate_predictions([
        {"id": "a", "prediction": "Paris", "gold": "paris"},
        {"id": "b", "prediction": "barack obama", "gold": "obama"},
        {"trace_id": "c-0", "a_f": "\\boxed{42}", "gold": "42"},
    ])
    assert [r["id"] for r in rows] == ["a", "b", "c-0"]
    assert [r["em"] for r in rows] == [1, 0, 1]

    summary = summarize_scores(rows).iloc[0]
    assert summary["count"] == 3
    assert summary["em"] == pytest.approx(66.67)
    assert summary["f1"] == pytest.approx(88.89)
    assert summary["mean_reward"] is None


def test_summarize_empty():
    summary = summarize_scores([]).iloc[0]
    assert summary["count"] == 0
