"""Mode-specific reward computation.

Each trajectory earns R = R_acc + R_format + lambda_mode * R_tool with
R_acc in {0, 0.8}, R_format in {-0.2, 0} and R_tool in {penalty, 0, 1}.
Under <tool_on> the full tool point requires a correct answer produced with
at least one valid invocation; invoking and answering wrong costs the
penalty. Under <tool_off> the point requires answering correctly without
touching the tool.
"""

from __future__ import annotations

import abc
import enum
import threading
from dataclasses import dataclass

from .amb import lambda_pair
from .trajectory import (
    AnswerToken,
    ModeToken,
    ParseFailure,
    TrajectoryRecord,
    format_compliant,
    parse_for_scoring,
)

__all__ = [
    "ACC_CORRECT",
    "DEFAULT_TOOL_PENALTY",
    "ExactMatchJudge",
    "FORMAT_VIOLATION",
    "Judge",
    "JudgeError",
    "JudgeVerdict",
    "RewardBreakdown",
    "VerdictSource",
    "judge_answer",
    "score",
    "score_rollout_rows",
    "score_tool_component",
]

ACC_CORRECT = 0.8
FORMAT_VIOLATION = -0.2
DEFAULT_TOOL_PENALTY = -0.5


class VerdictSource(enum.Enum):
    EXACT_MATCH = "exact-match"
    PLUGIN = "plugin"


@dataclass(frozen=True, slots=True)
class JudgeVerdict:
    consistent: bool
    source: VerdictSource


class JudgeError(RuntimeError):
    """A judge plugin failed; the affected trajectory cannot be scored."""


class Judge(abc.ABC):
    """Pluggable semantic-equivalence judge, consulted only when exact
    matching fails. ``reentrant=False`` plugins are serialized by the
    engine."""

    reentrant: bool = True

    @abc.abstractmethod
    def consistent(self, question: str, truth: str, prediction: str) -> bool:
        ...


class ExactMatchJudge(Judge):
    """Identity judge: never overrides the exact-match verdict."""

    def consistent(self, question: str, truth: str, prediction: str) -> bool:
        return prediction.strip() == truth.strip()


_plugin_lock = threading.Lock()


def judge_answer(
    pred: AnswerToken | None,
    truth: AnswerToken,
    plugin: Judge | None = None,
    question: str = "",
) -> JudgeVerdict:
    """Exact string match first; otherwise defer to the plugin if any.
    A missing prediction (truncated rollout) is never consistent."""
    if pred is not None and pred.strip() == truth.strip():
        return JudgeVerdict(consistent=True, source=VerdictSource.EXACT_MATCH)
    if plugin is None or pred is None:
        return JudgeVerdict(consistent=False, source=VerdictSource.EXACT_MATCH)
    try:
        if plugin.reentrant:
            verdict = plugin.consistent(question, truth, pred)
        else:
            with _plugin_lock:
                verdict = plugin.consistent(question, truth, pred)
    except Exception as exc:
        raise JudgeError(f"judge plugin failed on prediction {pred!r}") from exc
    return JudgeVerdict(consistent=bool(verdict), source=VerdictSource.PLUGIN)


def _tool_reward(
    mode: ModeToken, invoked: bool, all_valid: bool, correct: bool, penalty: float
) -> float:
    if mode is ModeToken.TOOL_ON:
        if invoked and not correct:
            return penalty
        if invoked and correct and all_valid:
            return 1.0
        return 0.0
    if not invoked and correct:
        return 1.0
    return 0.0


def score_tool_component(
    t: TrajectoryRecord, correct: bool, penalty: float = DEFAULT_TOOL_PENALTY
) -> float:
    """Mode-specific tool reward.

    <tool_on>: 1 for a correct answer with >=1 call, all valid; ``penalty``
    for any invocation with a wrong answer (an invalid call is still an
    invocation that failed); else 0. A correct answer reached through an
    invalid call earns 0, not 1: the invocation itself was not performed
    correctly. <tool_off>: 1 for a clean correct answer, else 0.
    """
    return _tool_reward(t.mode, t.n_tool_calls >= 1, t.tool_calls_all_valid, correct, penalty)


@dataclass(frozen=True, slots=True)
class RewardBreakdown:
    r_acc: float
    r_format: float
    r_tool: float
    lambda_applied: float
    total: float
    mode: ModeToken
    answer_correct: bool
    tool_invoked: bool
    tool_calls_all_valid: bool

    def to_row(self, row_id: str = "") -> dict:
        return {
            "id": row_id,
            "mode": self.mode.short,
            "r_acc": self.r_acc,
            "r_format": self.r_format,
            "r_tool": self.r_tool,
            "lambda_applied": self.lambda_applied,
            "total": self.total,
            "answer_correct": self.answer_correct,
            "tool_invoked": self.tool_invoked,
            "tool_calls_all_valid": self.tool_calls_all_valid,
        }


def _assemble(
    mode: ModeToken,
    pred: AnswerToken | None,
    truth: AnswerToken,
    compliant: bool,
    invoked: bool,
    all_valid: bool,
    lambda_on: float,
    lambda_off: float,
    penalty: float,
    judge: Judge | None,
    question: str,
) -> RewardBreakdown:
    correct = judge_answer(pred, truth, plugin=judge, question=question).consistent
    r_acc = ACC_CORRECT if correct else 0.0
    r_format = 0.0 if compliant else FORMAT_VIOLATION
    r_tool = _tool_reward(mode, invoked, all_valid, correct, penalty)
    lam = lambda_on if mode is ModeToken.TOOL_ON else lambda_off
    return RewardBreakdown(
        r_acc=r_acc,
        r_format=r_format,
        r_tool=r_tool,
        lambda_applied=lam,
        total=r_acc + r_format + lam * r_tool,
        mode=mode,
        answer_correct=correct,
        tool_invoked=invoked,
        tool_calls_all_valid=all_valid,
    )


def score(
    t: TrajectoryRecord,
    truth: AnswerToken,
    lambda_on: float,
    lambda_off: float,
    penalty: float = DEFAULT_TOOL_PENALTY,
    judge: Judge | None = None,
    question: str = "",
) -> RewardBreakdown:
    """Full reward for one trajectory record.

    The format component is the structural check only (think blocks, tag
    balance, terminal answer): a <tool_off> rollout that called the tool
    keeps a clean format score and loses through the tool component instead.
    """
    return _assemble(
        mode=t.mode,
        pred=t.answer,
        truth=truth,
        compliant=format_compliant(t),
        invoked=t.n_tool_calls >= 1,
        all_valid=t.tool_calls_all_valid,
        lambda_on=lambda_on,
        lambda_off=lambda_off,
        penalty=penalty,
        judge=judge,
        question=question,
    )


def score_rollout_rows(
    rows: list[dict],
    lambda_base: float,
    f_on: float | None = None,
    penalty: float = DEFAULT_TOOL_PENALTY,
    judge: Judge | None = None,
) -> tuple[list[dict], dict]:
    """Offline scorer over rollout-schema rows.

    When ``f_on`` is omitted it is computed from the file's mode column and
    the coefficients follow the adaptive rule. Tool-call count and validity
    come from the rows (the environment annotated them); the serialized text
    only determines format compliance. Returns (per-row breakdown dicts,
    summary dict).
    """
    if not rows:
        raise ValueError("nothing to score: no rollout rows")
    if f_on is None:
        n_on = sum(1 for r in rows if r["mode"] == "on")
        f_on = n_on / len(rows)
    lam_on, lam_off = lambda_pair(lambda_base, f_on)

    out: list[dict] = []
    totals = []
    for row in rows:
        parsed = parse_for_scoring(row["serialized"])
        compliant = isinstance(parsed, TrajectoryRecord) and format_compliant(parsed)
        breakdown = _assemble(
            mode=ModeToken.from_short(row["mode"]),
            pred=row["answer"],
            truth=row["ground_truth"],
            compliant=compliant,
            invoked=int(row["n_tool_calls"]) >= 1,
            all_valid=bool(row["tool_calls_valid"]),
            lambda_on=lam_on,
            lambda_off=lam_off,
            penalty=penalty,
            judge=judge,
            question="",
        )
        out.append(breakdown.to_row(row_id=row["id"]))
        totals.append(breakdown.total)

    summary = {
        "rows": len(rows),
        "f_on": f_on,
        "lambda_on": lam_on,
        "lambda_off": lam_off,
        "mean_total": sum(totals) / len(totals),
    }
    return out, summary
