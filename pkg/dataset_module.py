"""
dataset_module.py - 학습 데이터 구성 모듈
SFT용 트레이스 필터링과 내보내기, GRPO 그룹 가중치/목적함수 계산,
생성된 도구 생태계의 순위-빈도 멱법칙 분석을 담당
"""

import json
from collections import Counter
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Any, Callable, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from loguru import logger

from common_api import read_jsonl, write_jsonl
from schema_module import tool_to_dict, tools_from_list
from trace_module import Trace, TraceParseError, compute_stats, parse_trace, serialize_trace, trace_to_record
from reward_module import Gold, exact_match, extract_answers, trace_reward, DEFAULT_LOOP_PENALTY


DEFAULT_BETA = 0.01
WEIGHT_EPS = 1e-8
MIN_FIT_RANKS = 3


# ===========================
# 예외 정의
# ===========================

class DatasetError(Exception):
    """데이터셋 처리 오류"""


class LengthMismatch(DatasetError):
    """그룹 입력 목록의 길이 불일치"""


class EmptyCorpus(DatasetError):
    """도구 호출이 하나도 없는 코퍼스"""


class EmptyFitError(DatasetError):
    """멱법칙 적합에 필요한 순위 수 부족"""


# ===========================
# 트레이스 필터링
# ===========================

class FilterReason(Enum):
    """필터 판정 (검사 순서: 답변 -> 검증 오류 -> 길이)"""
    RETAINED = "retained"
    NO_ANSWER = "no-answer"
    WRONG_ANSWER = "wrong-answer"
    VALIDATION_ERROR = "validation-error"
    TOO_SHORT = "too-short"
    TOO_LONG = "too-long"


Verifier = Callable[[Optional[str], Gold], bool]


def default_verifier(prediction: Optional[str], gold: Gold) -> bool:
    """정규화 후 완전 일치"""
    return bool(exact_match(prediction, gold))


@dataclass
class FilterCriteria:
    """SFT 필터 기준"""
    min_tool_calls: int = 2
    max_tool_calls: int = 12
    require_no_validation_errors: bool = True
    verifier: Verifier = field(default=default_verifier, repr=False)

    def __post_init__(self):
        if not 1 <= self.min_tool_calls <= self.max_tool_calls:
            raise ValueError(
                f"도구 호출 수 범위가 잘못되었습니다: {self.min_tool_calls}~{self.max_tool_calls}"
            )


@dataclass
class TraceVerdict:
    """트레이스 한 건의 판정"""
    trace_id: str
    verdict: FilterReason
    n_tool_calls: int = 0

    @property
    def retained(self) -> bool:
        return self.verdict == FilterReason.RETAINED


@dataclass
class FilterReport:
    """필터링 결과 리포트"""
    verdicts: List[TraceVerdict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.verdicts)

    @property
    def n_retained(self) -> int:
        return sum(v.retained for v in self.verdicts)

    @property
    def retention_rate(self) -> float:
        return self.n_retained / self.total if self.total else 0.0

    def reason_counts(self) -> Dict[str, int]:
        counts = Counter(v.verdict.value for v in self.verdicts)
        return {reason.value: counts.get(reason.value, 0) for reason in FilterReason}

    def counts_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"verdict": reason, "count": count} for reason, count in self.reason_counts().items()]
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "retained": self.n_retained,
            "retention_rate": self.retention_rate,
            "reasons": self.reason_counts(),
            "verdicts": [
                {"trace_id": v.trace_id, "verdict": v.verdict.value, "n_tool_calls": v.n_tool_calls}
                for v in self.verdicts
            ],
        }


def judge_trace(trace: Trace, gold: Gold, criteria: FilterCriteria) -> FilterReason:
    """트레이스 한 건 판정 (첫 번째로 실패한 기준 하나만 기록)"""
    answers = extract_answers(trace)
    if answers.a_f is None:
        return FilterReason.NO_ANSWER
    if not criteria.verifier(answers.a_f, gold):
        return FilterReason.WRONG_ANSWER

    stats = compute_stats(trace)
    if criteria.require_no_validation_errors and stats.n_validation_errors > 0:
        return FilterReason.VALIDATION_ERROR
    if stats.n_tool_calls < criteria.min_tool_calls:
        return FilterReason.TOO_SHORT
    if stats.n_tool_calls > criteria.max_tool_calls:
        return FilterReason.TOO_LONG
    return FilterReason.RETAINED


def filter_traces(items: Sequence[Tuple[Trace, Gold]],
                  criteria: Optional[FilterCriteria] = None) -> Tuple[FilterReport, List[Trace]]:
    """
    SFT 품질 필터

    Args:
        items: (트레이스, 정답) 목록
        criteria: 필터 기준

    Returns:
        (FilterReport, 통과한 트레이스 목록 - 입력 순서 유지)
    """
    criteria = criteria or FilterCriteria()
    report = FilterReport()
    retained: List[Trace] = []
    for trace, gold in items:
        verdict = judge_trace(trace, gold, criteria)
        report.verdicts.append(TraceVerdict(trace.trace_id, verdict, compute_stats(trace).n_tool_calls))
        if verdict == FilterReason.RETAINED:
            retained.append(trace)

    logger.info(f"필터링 완료 - {report.n_retained}/{report.total} 통과 "
                f"({report.retention_rate:.1%}), 사유: {report.reason_counts()}")
    return report, retained


# ===========================
# 내보내기
# ===========================

def sft_row(trace: Trace) -> Dict[str, Any]:
    return {
        "query": trace.query,
        "tools": [tool_to_dict(t) for t in trace.tools],
        "target": serialize_trace(trace),
    }


def export_sft(corpus: List[Trace], path: Union[str, Path]) -> Path:
    """SFT JSONL 내보내기 {query, tools, target}"""
    written = write_jsonl(path, (sft_row(t) for t in corpus))
    logger.info(f"SFT 데이터 저장: {written} ({len(corpus)}행)")
    return written


def import_sft(path: Union[str, Path]) -> List[Trace]:
    """SFT JSONL을 트레이스 목록으로 복원 (메타데이터 제외)"""
    traces = []
    for index, row in enumerate(read_jsonl(path)):
        trace = parse_trace(row["target"], tools_from_list(row.get("tools", [])))
        if trace.query != row.get("query", trace.query):
            raise TraceParseError(f"{path}:{index + 1} query와 target의 쿼리가 다릅니다")
        traces.append(trace)
    return traces


@dataclass
class RolloutGroup:
    """질문 하나의 롤아웃 그룹"""
    query: str
    gold: Gold
    traces: List[Trace] = field(default_factory=list)
    query_id: Optional[str] = None


def grpo_row(group: RolloutGroup, loop_penalty: float = DEFAULT_LOOP_PENALTY) -> Dict[str, Any]:
    rewards = [trace_reward(t, group.gold, loop_penalty) for t in group.traces]
    weights = group_weights([r.total for r in rewards]) if rewards else np.array([])
    return {
        "query_id": group.query_id,
        "query": group.query,
        "gold": group.gold,
        "rollouts": [
            {"trace": trace_to_record(t), "reward": asdict(r), "weight": float(w)}
            for t, r, w in zip(group.traces, rewards, weights)
        ],
    }


def export_grpo(groups: List[RolloutGroup], path: Union[str, Path],
                loop_penalty: float = DEFAULT_LOOP_PENALTY) -> Path:
    """GRPO JSONL 내보내기 {query, rollouts: [{trace, reward, weight}]}"""
    written = write_jsonl(path, (grpo_row(g, loop_penalty) for g in groups))
    logger.info(f"GRPO 데이터 저장: {written} ({len(groups)}개 그룹)")
    return written


# ===========================
# GRPO 그룹 계산
# ===========================

@dataclass
class GroupBatch:
    """그룹 목적함수 계산 결과 (중간값 포함)"""
    query_id: Optional[str]
    rewards: List[float]
    logp_policy: List[float]
    logp_ref: List[float]
    weights: List[float]
    beta: float
    kl: float
    objective: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def group_weights(rewards: Sequence[float]) -> np.ndarray:
    """
    그룹 표준화 가중치 w_i = (r_i - mean) / (std + ε)

    모집단 표준편차를 사용하고, 보상이 모두 같으면 전부 0.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("보상 목록이 비어 있습니다")
    if np.ptp(r) == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + WEIGHT_EPS)


def group_objective(rewards: Sequence[float], logp_policy: Sequence[float], logp_ref: Sequence[float],
                    beta: float = DEFAULT_BETA, query_id: Optional[str] = None) -> GroupBatch:
    """
    보상 가중 우도 목적함수 J = Σ w_i·logπ_θ - β·KL

    KL은 트레이스 로그확률 차이의 표본 평균으로 추정.

    Raises:
        LengthMismatch: 세 목록의 길이가 다를 때
    """
    lengths = {len(rewards), len(logp_policy), len(logp_ref)}
    if len(lengths) != 1:
        raise LengthMismatch(
            f"길이 불일치 - rewards {len(rewards)}, logp_policy {len(logp_policy)}, logp_ref {len(logp_ref)}"
        )
    weights = group_weights(rewards)
    lp = np.asarray(logp_policy, dtype=float)
    lr = np.asarray(logp_ref, dtype=float)
    kl = float(np.mean(lp - lr))
    objective = float(np.dot(weights, lp)) - beta * kl
    return GroupBatch(
        query_id=query_id,
        rewards=[float(x) for x in rewards],
        logp_policy=lp.tolist(),
        logp_ref=lr.tolist(),
        weights=weights.tolist(),
        beta=beta,
        kl=kl,
        objective=objective,
    )


# ===========================
# 도구 생태계 통계
# ===========================

@dataclass
class RankFrequencyFit:
    """log(freq) = c - α·log(rank) 최소제곱 적합 결과"""
    alpha: float
    intercept: float
    r2: float
    ranks: List[int] = field(default_factory=list)
    frequencies: List[float] = field(default_factory=list)


def tool_frequency_table(corpus: List[Trace]) -> pd.DataFrame:
    """
    도구별 호출 횟수 표 (횟수 내림차순, 같으면 이름순)

    Raises:
        EmptyCorpus: 정상 도구 호출이 하나도 없을 때
    """
    counts = Counter(
        call.name for trace in corpus for call in trace.tool_calls() if not call.malformed
    )
    if not counts:
        raise EmptyCorpus("코퍼스에 도구 호출이 없습니다")
    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    total = sum(counts.values())
    table = pd.DataFrame(ordered, columns=["name", "count"])
    table.insert(0, "rank", range(1, len(table) + 1))
    table["frequency"] = table["count"] / total
    return table


def fit_rank_frequency(counts: Sequence[float]) -> RankFrequencyFit:
    """
    순위-빈도 멱법칙 적합 (log-log 최소제곱)

    Args:
        counts: 도구별 빈도 (순서 무관, 0은 제외)

    Raises:
        EmptyFitError: 양수 빈도가 3개 미만일 때
    """
    freq = np.sort(np.asarray([c for c in counts if c > 0], dtype=float))[::-1]
    if freq.size < MIN_FIT_RANKS:
        raise EmptyFitError(f"적합에는 최소 {MIN_FIT_RANKS}개 순위가 필요합니다 (현재 {freq.size}개)")
    ranks = np.arange(1, freq.size + 1)
    X = np.vstack((np.log(ranks), np.ones(freq.size))).T
    Y = np.log(freq)
    (slope, intercept), *_ = np.linalg.lstsq(X, Y, rcond=None)

    residual = Y - X @ np.array([slope, intercept])
    ss_res = float(np.sum(residual ** 2))
    ss_tot = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return RankFrequencyFit(
        alpha=float(-slope),
        intercept=float(intercept),
        r2=float(np.clip(r2, 0.0, 1.0)),
        ranks=ranks.tolist(),
        frequencies=freq.tolist(),
    )


def tool_stats(corpus: List[Trace]) -> Tuple[pd.DataFrame, RankFrequencyFit]:
    """도구 빈도 표와 멱법칙 적합 결과"""
    table = tool_frequency_table(corpus)
    fit = fit_rank_frequency(table["count"].tolist())
    logger.info(f"도구 통계 - 도구 {len(table)}종, 호출 {int(table['count'].sum())}회, "
                f"α={fit.alpha:.3f}, R²={fit.r2:.3f}")
    return table, fit


def stats_report(table: pd.DataFrame, fit: Optional[RankFrequencyFit]) -> Dict[str, Any]:
    """통계 리포트 JSON {table, alpha, r2}"""
    return {
        "table": json.loads(table.to_json(orient="records")),
        "alpha": fit.alpha if fit else None,
        "r2": fit.r2 if fit else None,
    }


def plot_rank_frequency(fit: RankFrequencyFit, path: Union[str, Path]) -> Path:
    """순위-빈도 log-log 그래프 저장"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ranks = np.asarray(fit.ranks, dtype=float)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(ranks, fit.frequencies, "o", markersize=3, label="observed")
    ax.loglog(ranks, np.exp(fit.intercept) * ranks ** (-fit.alpha), "-",
              label=f"fit: α={fit.alpha:.2f}, R²={fit.r2:.3f}")
    ax.set_xlabel("rank")
    ax.set_ylabel("frequency")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"순위-빈도 그래프 저장: {path}")
    return path
