"""
reward_module.py - 트레이스 보상 및 평가 모듈
최종/중간 답변 추출, 텍스트 정규화, 계층형 답변 점수, 반복 호출 패널티,
EM/F1 평가 지표를 계산
"""

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Any, Union, Iterable

import pandas as pd
from loguru import logger

from trace_module import Trace, ToolCall, ToolResponse, compute_stats


DEFAULT_LOOP_PENALTY = 0.1
SUMMARIZER_TOOL = "answer_summarizer"
FINAL_ANSWER_MARKER = "**Final Answer:**"

# 답변 점수 단계
TIER_BOTH = 1.0
TIER_FINAL_ONLY = 0.8
TIER_INTERMEDIATE_ONLY = 0.6
TIER_PARTIAL = 0.3
TIER_NONE = 0.0
TIERS = (TIER_BOTH, TIER_FINAL_ONLY, TIER_INTERMEDIATE_ONLY, TIER_PARTIAL, TIER_NONE)

Gold = Union[str, List[str], None]

_WRAPPER = re.compile(r"\\(?:boxed|text)\{([^{}]*)\}")
_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


# ===========================
# 데이터 클래스 정의
# ===========================

@dataclass
class ExtractedAnswers:
    """트레이스에서 추출한 답변"""
    a_f: Optional[str] = None
    a_i: Optional[str] = None
    sources: Dict[str, str] = field(default_factory=dict)


@dataclass
class RewardBreakdown:
    """트레이스 보상 R(τ) = R_ans + R_efficiency"""
    r_ans: float
    n_loops: int
    r_efficiency: float
    total: float
    answers: ExtractedAnswers = field(default_factory=ExtractedAnswers)


# ===========================
# 정규화
# ===========================

def strip_wrappers(text: str) -> str:
    """\\boxed{...}, \\text{...} 감싸기 제거 (대소문자 유지)"""
    previous = None
    while previous != text:
        previous = text
        text = _WRAPPER.sub(r"\1", text)
    return text.strip()


def normalize(text: Optional[str]) -> str:
    """
    답변 정규화

    소문자화, 감싸기 제거, 구두점 제거, 관사(a/an/the) 제거, 공백 정리 순서로 처리.
    """
    if not text:
        return ""
    text = strip_wrappers(text.lower())
    text = text.translate(_PUNCT_TABLE)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _golds(gold: Gold) -> List[str]:
    if gold is None:
        return []
    if isinstance(gold, str):
        return [gold]
    return [str(g) for g in gold]


def _matches(answer: Optional[str], gold: Gold) -> bool:
    if answer is None:
        return False
    target = normalize(answer)
    return any(target == normalize(g) for g in _golds(gold))


# ===========================
# 답변 추출
# ===========================

def extract_answers(trace: Trace) -> ExtractedAnswers:
    """
    최종 답변 a_f와 중간 답변 a_i 추출

    a_i 우선순위: 마지막 answer_summarizer 호출의 final_answer 인자,
    그다음 tool_response 안 마지막 "**Final Answer:**" 표시 뒤 전체 텍스트.
    """
    answers = ExtractedAnswers()

    final = trace.final_answer()
    if final is not None:
        answers.a_f = strip_wrappers(final.raw)
        answers.sources["a_f"] = "answer"

    for step in reversed(trace.steps):
        if isinstance(step, ToolCall) and not step.malformed and step.name == SUMMARIZER_TOOL:
            value = step.args.get("final_answer")
            if isinstance(value, str) and value.strip():
                answers.a_i = value.strip()
                answers.sources["a_i"] = "summarizer"
                return answers

    for step in reversed(trace.steps):
        if isinstance(step, ToolResponse) and FINAL_ANSWER_MARKER in step.content:
            tail = step.content.rsplit(FINAL_ANSWER_MARKER, 1)[1].strip()
            if tail:
                answers.a_i = tail
                answers.sources["a_i"] = "marker"
            break

    return answers


# ===========================
# 보상 계산
# ===========================

def answer_score(a_f: Optional[str], a_i: Optional[str], gold: Gold) -> float:
    """
    계층형 답변 점수 (작성된 순서대로 첫 번째로 맞는 경우 적용)

    1.0: a_f = a_i = a*
    0.8: a_f = a*, a_i ≠ a*
    0.6: a_f ≠ a*, a_i = a*
    0.3: 둘 중 하나만 a*이고 a_f ≠ a_i (앞의 두 경우에 가려짐)
    0.0: 그 외
    """
    final_ok = _matches(a_f, gold)
    inter_ok = _matches(a_i, gold)
    same = a_f is not None and a_i is not None and normalize(a_f) == normalize(a_i)

    if final_ok and inter_ok:
        return TIER_BOTH
    if final_ok and not inter_ok:
        return TIER_FINAL_ONLY
    if not final_ok and inter_ok:
        return TIER_INTERMEDIATE_ONLY
    if final_ok != inter_ok and not same:
        return TIER_PARTIAL
    return TIER_NONE


def trace_reward(trace: Trace, gold: Gold, loop_penalty: float = DEFAULT_LOOP_PENALTY) -> RewardBreakdown:
    """
    트레이스 보상 계산

    Args:
        trace: 트레이스
        gold: 정답 (문자열 또는 허용 정답 목록)
        loop_penalty: 반복 호출 1회당 패널티

    Returns:
        RewardBreakdown
    """
    answers = extract_answers(trace)
    r_ans = answer_score(answers.a_f, answers.a_i, gold)
    n_loops = compute_stats(trace).n_loops
    r_efficiency = -loop_penalty * n_loops if n_loops else 0.0
    return RewardBreakdown(
        r_ans=r_ans,
        n_loops=n_loops,
        r_efficiency=r_efficiency,
        total=r_ans + r_efficiency,
        answers=answers,
    )


# ===========================
# 평가 지표
# ===========================

def exact_match(prediction: Optional[str], gold: Gold) -> int:
    """정규화 후 완전 일치 (정답 목록이면 하나라도 일치)"""
    return int(_matches(prediction, gold))


def _f1_single(prediction: str, gold: str) -> float:
    pred_tokens = normalize(prediction).split()
    gold_tokens = normalize(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: Optional[str], gold: Gold) -> float:
    """토큰 F1 (정답 목록이면 최댓값)"""
    if prediction is None:
        return 0.0
    golds = _golds(gold)
    if not golds:
        return 0.0
    return max(_f1_single(prediction, g) for g in golds)


# ===========================
# 점수 리포트
# ===========================

def score_trace(trace: Trace, gold: Gold, loop_penalty: float = DEFAULT_LOOP_PENALTY) -> Dict[str, Any]:
    """점수 리포트 한 행 {trace_id, a_f, a_i, gold, r_ans, n_loops, r_efficiency, total, em, f1}"""
    reward = trace_reward(trace, gold, loop_penalty)
    return {
        "trace_id": trace.trace_id,
        "a_f": reward.answers.a_f,
        "a_i": reward.answers.a_i,
        "gold": gold,
        "r_ans": reward.r_ans,
        "n_loops": reward.n_loops,
        "r_efficiency": reward.r_efficiency,
        "total": reward.total,
        "em": exact_match(reward.answers.a_f, gold),
        "f1": f1_score(reward.answers.a_f, gold),
    }


def evaluate_predictions(rows: Iterable[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    예측/정답 행들에 EM, F1 계산

    행은 {id, prediction, gold} 또는 점수 리포트 행(a_f 사용) 형식.
    """
    evaluated = []
    for index, row in enumerate(rows):
        prediction = row["prediction"] if "prediction" in row else row.get("a_f")
        gold = row.get("gold")
        evaluated.append({
            "id": row.get("id", row.get("trace_id", str(index))),
            "prediction": prediction,
            "gold": gold,
            "em": exact_match(prediction, gold),
            "f1": f1_score(prediction, gold),
        })
    return evaluated


def summarize_scores(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """
    요약 표 (count, mean reward, EM, F1 - EM/F1은 백분율)

    Args:
        rows: score_trace 또는 evaluate_predictions 결과 행

    Returns:
        한 행짜리 DataFrame
    """
    if not rows:
        return pd.DataFrame([{"count": 0, "mean_reward": None, "em": None, "f1": None}])
    df = pd.DataFrame(rows)
    summary = {
        "count": len(df),
        "mean_reward": round(float(df["total"].mean()), 4) if "total" in df else None,
        "em": round(float(df["em"].mean()) * 100, 2),
        "f1": round(float(df["f1"].mean()) * 100, 2),
    }
    logger.debug(f"점수 요약: {summary}")
    return pd.DataFrame([summary])


# 테스트 코드
if __name__ == "__main__":
    print(normalize("\\boxed{\\text{Magnus Carlsen}}"))
    print(normalize("The Eiffel Tower!"))
    print(answer_score("magnus carlsen", "hikaru nakamura", "magnus carlsen"))
    print(f1_score("barack obama", "obama"))
