"""Rollout domain types and the canonical tagged-text trajectory format.

A trajectory is a mode token followed by turns. Every turn opens with a
``<think>`` block; a turn then either calls the zoom tool (``<tool_call>``
immediately answered by ``<tool_response>``), gives the final ``<answer>``,
or just thinks. The serializer is canonical (byte-exact golden tests depend
on it) and ``parse`` is its exact inverse on valid records.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, replace

__all__ = [
    "AnswerToken",
    "MAX_TOOL_CALLS",
    "ModeToken",
    "ParseFailure",
    "Query",
    "QueryKind",
    "TrajectoryRecord",
    "Turn",
    "ViolationCode",
    "ZoomCall",
    "ZoomObservation",
    "format_compliant",
    "grammar_conformant",
    "parse",
    "parse_for_scoring",
    "record_to_row",
    "row_to_minimal_record",
    "serialize",
]

AnswerToken = str

# Turn cap standing in for a response-length budget; hitting it marks the
# rollout truncated.
MAX_TOOL_CALLS = 4

TOOL_NAME = "image_zoom_in_tool"


class ModeToken(enum.Enum):
    TOOL_ON = "<tool_on>"
    TOOL_OFF = "<tool_off>"

    @property
    def token(self) -> str:
        return self.value

    @property
    def short(self) -> str:
        return "on" if self is ModeToken.TOOL_ON else "off"

    @classmethod
    def from_short(cls, s: str) -> "ModeToken":
        if s == "on":
            return cls.TOOL_ON
        if s == "off":
            return cls.TOOL_OFF
        raise ValueError(f"unknown mode {s!r}")


class QueryKind(enum.Enum):
    FINE = "fine"
    GLOBAL = "global"


@dataclass(frozen=True, slots=True)
class Query:
    """One task instance: a question about a grid plus its ground truth.

    ``kind_observed`` is the (possibly noise-flipped) kind indicator exposed
    to the policy; ``kind`` is the true kind used for bookkeeping and
    evaluation. ``target_cell`` is (row, col) for fine queries, None for
    global ones.
    """

    id: str
    kind: QueryKind
    kind_observed: QueryKind
    grid_ref: str
    prompt_text: str
    ground_truth: AnswerToken
    target_cell: tuple[int, int] | None = None


@dataclass(frozen=True, slots=True)
class ZoomCall:
    """Tool invocation: crop bbox [x1, y1, x2, y2] in cell coordinates.

    x is the column axis, y the row axis; the box is inclusive on the
    top-left corner and exclusive on the bottom-right.
    """

    bbox: tuple[int, int, int, int]
    label: str | None = None

    def well_formed(self) -> bool:
        x1, y1, x2, y2 = self.bbox
        return x1 < x2 and y1 < y2

    def intersects(self, width: int, height: int) -> bool:
        x1, y1, x2, y2 = self.bbox
        return self.well_formed() and min(x2, width) > max(x1, 0) and min(y2, height) > max(y1, 0)

    def payload_json(self) -> str:
        args: dict = {"bbox_2d": list(self.bbox)}
        if self.label is not None:
            args["label"] = self.label
        return json.dumps({"name": TOOL_NAME, "arguments": args})


@dataclass(frozen=True, slots=True)
class ZoomObservation:
    """Result of executing a ZoomCall: the revealed cells.

    ``cells`` holds (row, col, coarse_color, fine_glyph) for every grid cell
    whose center lies inside the bbox. ``valid`` is False for malformed or
    non-intersecting boxes, in which case ``cells`` is empty.
    """

    bbox: tuple[int, int, int, int]
    cells: tuple[tuple[int, int, int, int], ...]
    valid: bool

    def render(self) -> str:
        return json.dumps(
            {"bbox_2d": list(self.bbox), "valid": self.valid, "cells": [list(c) for c in self.cells]}
        )

    @classmethod
    def from_render(cls, text: str, fallback_bbox: tuple[int, int, int, int]) -> "ZoomObservation":
        """Decode a canonical rendering; any other content degrades to an
        invalid empty observation (the grammar validates only tag balance
        around the response, not its content)."""
        try:
            obj = json.loads(text)
            bbox = tuple(obj["bbox_2d"])
            cells = tuple(tuple(c) for c in obj["cells"])
            valid = obj["valid"]
            if (
                len(obj) == 3
                and len(bbox) == 4
                and all(isinstance(v, int) and not isinstance(v, bool) for v in bbox)
                and isinstance(valid, bool)
                and all(len(c) == 4 and all(isinstance(v, int) and not isinstance(v, bool) for v in c) for c in cells)
            ):
                return cls(bbox=bbox, cells=cells, valid=valid)  # type: ignore[arg-type]
        except (ValueError, KeyError, TypeError):
            pass
        return cls(bbox=fallback_bbox, cells=(), valid=False)


@dataclass(frozen=True, slots=True)
class Turn:
    """One reasoning step: a think block plus at most one action.

    Exactly one of ``tool_call``/``answer`` may be set; both None is a
    think-only turn. A tool_call must carry its tool_response.
    """

    think: str = ""
    tool_call: ZoomCall | None = None
    tool_response: ZoomObservation | None = None
    answer: AnswerToken | None = None


@dataclass(frozen=True, slots=True)
class TrajectoryRecord:
    """One complete rollout in canonical form.

    ``logprob_old`` is the behavior-policy log-probability of the sampled
    actions; it is not part of the serialized text.
    """

    query_id: str
    mode: ModeToken
    turns: tuple[Turn, ...]
    answer: AnswerToken | None
    truncated: bool
    logprob_old: float = 0.0
    serialized: str = ""

    @property
    def tool_calls(self) -> tuple[ZoomCall, ...]:
        return tuple(t.tool_call for t in self.turns if t.tool_call is not None)

    @property
    def n_tool_calls(self) -> int:
        return sum(1 for t in self.turns if t.tool_call is not None)

    @property
    def tool_calls_all_valid(self) -> bool:
        """True iff every tool call carries a valid observation (vacuously
        true with zero calls)."""
        for t in self.turns:
            if t.tool_call is not None and (t.tool_response is None or not t.tool_response.valid):
                return False
        return True

    @property
    def declared_on_without_tool(self) -> bool:
        return self.mode is ModeToken.TOOL_ON and self.n_tool_calls == 0


class ViolationCode(enum.Enum):
    MISSING_MODE_TOKEN = "missing-mode-token"
    UNBALANCED_TAG = "unbalanced-tag"
    BAD_JSON = "bad-json"
    ANSWER_IN_FIRST_ON_TURN = "answer-in-first-on-turn"
    TOOL_CALL_IN_OFF_MODE = "tool-call-in-off-mode"
    TRAILING_GARBAGE = "trailing-garbage"


@dataclass(frozen=True, slots=True)
class ParseFailure:
    """First grammar violation in a string. A value, not an exception:
    reward logic scores unparseable rollouts as format violations."""

    code: ViolationCode
    position: int
    detail: str = ""


_THINK_OPEN = "<think>"
_THINK_CLOSE = "</think>"
_CALL_OPEN = "<tool_call>"
_CALL_CLOSE = "</tool_call>"
_RESP_OPEN = "<tool_response>"
_RESP_CLOSE = "</tool_response>"
_ANSWER_OPEN = "<answer>"
_ANSWER_CLOSE = "</answer>"

RESERVED_TAGS = (
    ModeToken.TOOL_ON.token,
    ModeToken.TOOL_OFF.token,
    _THINK_OPEN,
    _THINK_CLOSE,
    _CALL_OPEN,
    _CALL_CLOSE,
    _RESP_OPEN,
    _RESP_CLOSE,
    _ANSWER_OPEN,
    _ANSWER_CLOSE,
)

_TAG_RE = re.compile("|".join(re.escape(t) for t in RESERVED_TAGS))


def _contains_reserved(text: str) -> bool:
    return _TAG_RE.search(text) is not None


def serialize(t: TrajectoryRecord) -> str:
    """Render the canonical tagged text. Total on valid records; raises
    ValueError if the record breaks a structural invariant (the canonical
    form could not be re-parsed)."""
    parts = [t.mode.token]
    for i, turn in enumerate(t.turns):
        if _contains_reserved(turn.think):
            raise ValueError("think content contains a reserved tag")
        if turn.tool_call is not None and turn.answer is not None:
            raise ValueError("turn has both a tool call and an answer")
        parts.append(f"{_THINK_OPEN}{turn.think}{_THINK_CLOSE}")
        if turn.tool_call is not None:
            if turn.tool_response is None:
                raise ValueError("tool call without a tool response")
            if turn.tool_call.label is not None and _contains_reserved(turn.tool_call.label):
                raise ValueError("tool call label contains a reserved tag")
            parts.append(f"{_CALL_OPEN}{turn.tool_call.payload_json()}{_CALL_CLOSE}")
            parts.append(f"{_RESP_OPEN}{turn.tool_response.render()}{_RESP_CLOSE}")
        elif turn.answer is not None:
            if i != len(t.turns) - 1:
                raise ValueError("answer turn is not terminal")
            if _contains_reserved(turn.answer):
                raise ValueError("answer content contains a reserved tag")
            parts.append(f"{_ANSWER_OPEN}{turn.answer}{_ANSWER_CLOSE}")
    return "".join(parts)


def _decode_tool_call(payload: str) -> ZoomCall | None:
    try:
        obj = json.loads(payload)
    except ValueError:
        return None
    if not isinstance(obj, dict) or set(obj) != {"name", "arguments"}:
        return None
    if obj["name"] != TOOL_NAME:
        return None
    args = obj["arguments"]
    if not isinstance(args, dict) or not set(args) <= {"bbox_2d", "label"} or "bbox_2d" not in args:
        return None
    bbox = args["bbox_2d"]
    if not (
        isinstance(bbox, list)
        and len(bbox) == 4
        and all(isinstance(v, int) and not isinstance(v, bool) for v in bbox)
    ):
        return None
    label = args.get("label")
    if label is not None and not isinstance(label, str):
        return None
    return ZoomCall(bbox=tuple(bbox), label=label)


def parse(s: str, *, enforce_mode_rule: bool = True) -> TrajectoryRecord | ParseFailure:
    """Inverse of :func:`serialize`.

    Returns a record iff ``s`` conforms to the grammar; otherwise a
    ParseFailure locating the first violation. A string that ends cleanly at
    a turn boundary without an answer parses as a truncated record.
    ``enforce_mode_rule=False`` additionally accepts tool calls under
    ``<tool_off>`` (used by the scorer, where that case is a reward matter,
    not a parse one).
    """
    if s.startswith(ModeToken.TOOL_ON.token):
        mode = ModeToken.TOOL_ON
    elif s.startswith(ModeToken.TOOL_OFF.token):
        mode = ModeToken.TOOL_OFF
    else:
        return ParseFailure(ViolationCode.MISSING_MODE_TOKEN, 0, "expected <tool_on> or <tool_off>")
    pos = len(mode.token)

    def scan_block(open_tag: str, close_tag: str, start: int) -> tuple[str, int] | ParseFailure:
        # start points just past open_tag; content runs to close_tag and may
        # not contain any other reserved tag.
        m = _TAG_RE.search(s, start)
        if m is None:
            return ParseFailure(ViolationCode.UNBALANCED_TAG, len(s), f"unterminated {open_tag}")
        if m.group(0) != close_tag:
            return ParseFailure(ViolationCode.UNBALANCED_TAG, m.start(), f"expected {close_tag}, found {m.group(0)}")
        return s[start:m.start()], m.end()

    turns: list[Turn] = []
    answer: AnswerToken | None = None
    while True:
        if pos == len(s):
            break  # clean end at a turn boundary: truncated rollout
        if not s.startswith(_THINK_OPEN, pos):
            return ParseFailure(ViolationCode.UNBALANCED_TAG, pos, "expected <think>")
        res = scan_block(_THINK_OPEN, _THINK_CLOSE, pos + len(_THINK_OPEN))
        if isinstance(res, ParseFailure):
            return res
        think, pos = res

        if pos == len(s) or s.startswith(_THINK_OPEN, pos):
            turns.append(Turn(think=think))
            continue
        if s.startswith(_ANSWER_OPEN, pos):
            res = scan_block(_ANSWER_OPEN, _ANSWER_CLOSE, pos + len(_ANSWER_OPEN))
            if isinstance(res, ParseFailure):
                return res
            answer, pos = res
            turns.append(Turn(think=think, answer=answer))
            if pos != len(s):
                return ParseFailure(ViolationCode.TRAILING_GARBAGE, pos, "content after </answer>")
            break
        if s.startswith(_CALL_OPEN, pos):
            call_pos = pos
            if mode is ModeToken.TOOL_OFF and enforce_mode_rule:
                return ParseFailure(ViolationCode.TOOL_CALL_IN_OFF_MODE, call_pos, "tool call under <tool_off>")
            payload_start = pos + len(_CALL_OPEN)
            res = scan_block(_CALL_OPEN, _CALL_CLOSE, payload_start)
            if isinstance(res, ParseFailure):
                return res
            payload, pos = res
            call = _decode_tool_call(payload)
            if call is None:
                return ParseFailure(ViolationCode.BAD_JSON, payload_start, "malformed tool-call payload")
            if s.startswith(_ANSWER_OPEN, pos):
                return ParseFailure(
                    ViolationCode.ANSWER_IN_FIRST_ON_TURN, pos, "answer before the tool response"
                )
            if not s.startswith(_RESP_OPEN, pos):
                return ParseFailure(ViolationCode.UNBALANCED_TAG, pos, "expected <tool_response>")
            res = scan_block(_RESP_OPEN, _RESP_CLOSE, pos + len(_RESP_OPEN))
            if isinstance(res, ParseFailure):
                return res
            resp_text, pos = res
            obs = ZoomObservation.from_render(resp_text, fallback_bbox=call.bbox)
            turns.append(Turn(think=think, tool_call=call, tool_response=obs))
            continue
        return ParseFailure(ViolationCode.UNBALANCED_TAG, pos, "unexpected tag")

    return TrajectoryRecord(
        query_id="",
        mode=mode,
        turns=tuple(turns),
        answer=answer,
        truncated=answer is None,
        logprob_old=0.0,
        serialized=s,
    )


def parse_for_scoring(s: str) -> TrajectoryRecord | ParseFailure:
    """Relaxed parse used by the reward path: a tool call under <tool_off>
    is kept in the record (and penalized through the tool reward) instead of
    rejecting the string."""
    return parse(s, enforce_mode_rule=False)


def format_compliant(t: TrajectoryRecord) -> bool:
    """Structural format check backing the format reward: every turn is a
    proper think block, tags balance, and a terminal answer exists. Mode
    consistency is deliberately not part of it (that is the tool reward's
    business)."""
    if t.truncated or t.answer is None:
        return False
    if not t.turns or t.turns[-1].answer is None:
        return False
    for i, turn in enumerate(t.turns):
        if _contains_reserved(turn.think):
            return False
        if turn.answer is not None:
            if i != len(t.turns) - 1 or turn.tool_call is not None or _contains_reserved(turn.answer):
                return False
        if turn.tool_call is not None:
            if turn.tool_response is None:
                return False
            if turn.tool_call.label is not None and _contains_reserved(turn.tool_call.label):
                return False
    return True


def grammar_conformant(t: TrajectoryRecord) -> bool:
    """Full grammar check: structural compliance plus the mode rule
    (<tool_off> implies zero tool calls)."""
    if not format_compliant(t):
        return False
    return not (t.mode is ModeToken.TOOL_OFF and t.n_tool_calls > 0)


ROLLOUT_ROW_KEYS = (
    "id",
    "query_kind",
    "mode",
    "serialized",
    "answer",
    "ground_truth",
    "n_tool_calls",
    "tool_calls_valid",
    "logprob_old",
)


def record_to_row(t: TrajectoryRecord, query: Query) -> dict:
    """One JSONL rollout line (key order fixed by ROLLOUT_ROW_KEYS)."""
    return {
        "id": t.query_id,
        "query_kind": query.kind.value,
        "mode": t.mode.short,
        "serialized": t.serialized if t.serialized else serialize(t),
        "answer": t.answer,
        "ground_truth": query.ground_truth,
        "n_tool_calls": t.n_tool_calls,
        "tool_calls_valid": t.tool_calls_all_valid,
        "logprob_old": t.logprob_old,
    }


def row_to_minimal_record(row: dict) -> TrajectoryRecord:
    """Best-effort record from a rollout row whose serialized text does not
    parse: mode and answer come from the metadata columns; the turn
    structure is unknown and left empty."""
    answer = row["answer"]
    return TrajectoryRecord(
        query_id=row["id"],
        mode=ModeToken.from_short(row["mode"]),
        turns=(),
        answer=answer,
        truncated=answer is None,
        logprob_old=float(row["logprob_old"]),
        serialized=row["serialized"],
    )


def with_serialized(t: TrajectoryRecord) -> TrajectoryRecord:
    """Return a copy whose ``serialized`` field is the canonical text."""
    return replace(t, serialized=serialize(t))
