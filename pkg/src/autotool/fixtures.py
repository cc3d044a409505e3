"""Golden fixtures: canonical trajectories, the malformed-string corpus,
coefficient tables and reward vectors. Tests and the gen-fixtures CLI both
read from here so there is a single source of truth for cross-checking
against other implementations.
"""

from __future__ import annotations

import json
from pathlib import Path

from .amb import lambda_pair
from .trajectory import (
    ModeToken,
    TrajectoryRecord,
    Turn,
    ViolationCode,
    ZoomCall,
    ZoomObservation,
    record_to_row,
    serialize,
    with_serialized,
)
from .zoomworld import EnvConfig, generate, grid_query_to_json

__all__ = [
    "amb_table",
    "canonical_reward_cases",
    "example_rollout_rows",
    "malformed_cases",
    "write_fixture_files",
]

_GOOD_CALL = ZoomCall(bbox=(0, 0, 1, 1))
_GOOD_OBS = ZoomObservation(bbox=(0, 0, 1, 1), cells=((0, 0, 0, 1),), valid=True)


def _on_record(answer: str, mode: ModeToken = ModeToken.TOOL_ON) -> TrajectoryRecord:
    return with_serialized(
        TrajectoryRecord(
            query_id="",
            mode=mode,
            turns=(
                Turn(think="inspect the region", tool_call=_GOOD_CALL, tool_response=_GOOD_OBS),
                Turn(think="read the glyph", answer=answer),
            ),
            answer=answer,
            truncated=False,
        )
    )


def _off_record(answer: str) -> TrajectoryRecord:
    return with_serialized(
        TrajectoryRecord(
            query_id="",
            mode=ModeToken.TOOL_OFF,
            turns=(Turn(think="majority is red", answer=answer),),
            answer=answer,
            truncated=False,
        )
    )


def canonical_reward_cases() -> list[dict]:
    """The four canonical trajectories and their exact totals at
    lambda_on = lambda_off = 1.2, penalty -0.5."""
    return [
        {
            "label": "on-valid-correct",
            "record": _on_record("glyph_1"),
            "truth": "glyph_1",
            "expected_total": 2.0,
            "expected": {"r_acc": 0.8, "r_format": 0.0, "r_tool": 1.0},
        },
        {
            "label": "on-valid-wrong",
            "record": _on_record("glyph_2"),
            "truth": "glyph_1",
            "expected_total": -0.6,
            "expected": {"r_acc": 0.0, "r_format": 0.0, "r_tool": -0.5},
        },
        {
            "label": "off-clean-correct",
            "record": _off_record("red"),
            "truth": "red",
            "expected_total": 2.0,
            "expected": {"r_acc": 0.8, "r_format": 0.0, "r_tool": 1.0},
        },
        {
            "label": "off-with-tool-correct",
            "record": _on_record("red", mode=ModeToken.TOOL_OFF),
            "truth": "red",
            "expected_total": 0.8,
            "expected": {"r_acc": 0.8, "r_format": 0.0, "r_tool": 0.0},
        },
    ]


def amb_table() -> dict:
    """Coefficient golden table: the adaptive rule at base 1.2 and the
    free-stage constant."""
    rows = []
    for f_on in (0.0, 0.25, 0.5, 0.75, 1.0):
        lam_on, lam_off = lambda_pair(1.2, f_on)
        rows.append({"f_on": f_on, "lambda_on": lam_on, "lambda_off": lam_off})
    return {"lambda_base": 1.2, "adaptive": rows, "free_stage": {"lambda_on": 1.2, "lambda_off": 1.2}}


def example_rollout_rows() -> list[dict]:
    """The four-line rollout file scored in the CLI golden test: two on-mode
    fine rollouts (one right, one wrong), a clean off-mode global rollout
    and an off-mode rollout that called the tool anyway."""
    cases = canonical_reward_cases()
    kinds = ["fine", "fine", "global", "global"]
    rows = []
    for i, (case, kind) in enumerate(zip(cases, kinds), start=1):
        record: TrajectoryRecord = case["record"]
        row = record_to_row(record, _fake_query(kind, case["truth"]))
        row["id"] = f"r{i}"
        rows.append(row)
    return rows


def _fake_query(kind: str, truth: str):
    from .trajectory import Query, QueryKind

    k = QueryKind(kind)
    return Query(
        id="", kind=k, kind_observed=k, grid_ref="", prompt_text="", ground_truth=truth
    )


_PAYLOAD = '{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 1, 1]}}'
_RESP = '<tool_response>r</tool_response>'


def _on(body: str) -> str:
    return "<tool_on>" + body


def _off(body: str) -> str:
    return "<tool_off>" + body


def malformed_cases() -> list[tuple[str, ViolationCode]]:
    """50 curated malformed strings with their expected violation codes."""
    C = ViolationCode
    bad_payloads = [
        "not json",
        "[1, 2, 3]",
        '{"arguments": {"bbox_2d": [0, 0, 1, 1]}}',
        '{"name": "other_tool", "arguments": {"bbox_2d": [0, 0, 1, 1]}}',
        '{"name": "image_zoom_in_tool"}',
        '{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 1]}}',
        '{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0.5, 0, 1, 1]}}',
        '{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 1, 1], "extra": 1}}',
        '{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 1, 1], "label": 3}}',
        _PAYLOAD + " trailing",
    ]
    cases: list[tuple[str, ViolationCode]] = [
        # missing mode token
        ("", C.MISSING_MODE_TOKEN),
        ("<think>x</think><answer>red</answer>", C.MISSING_MODE_TOKEN),
        ("tool_on<think>x</think><answer>red</answer>", C.MISSING_MODE_TOKEN),
        (" <tool_on><think>x</think><answer>red</answer>", C.MISSING_MODE_TOKEN),
        ("<TOOL_ON><think>x</think><answer>red</answer>", C.MISSING_MODE_TOKEN),
        ("<answer>red</answer>", C.MISSING_MODE_TOKEN),
        ("x<tool_off><think>a</think><answer>red</answer>", C.MISSING_MODE_TOKEN),
        ("<tool-on><think>x</think><answer>red</answer>", C.MISSING_MODE_TOKEN),
        # unbalanced / structurally broken tags
        (_off("<think>x"), C.UNBALANCED_TAG),
        (_off("<think>x</think><answer>red"), C.UNBALANCED_TAG),
        (_off("</think><answer>red</answer>"), C.UNBALANCED_TAG),
        (_off("x<think>a</think><answer>red</answer>"), C.UNBALANCED_TAG),
        (_on(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call>"), C.UNBALANCED_TAG),
        (
            _on(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call><think>b</think><answer>glyph_1</answer>"),
            C.UNBALANCED_TAG,
        ),
        (_off("<think>a</think><tool_response>z</tool_response><answer>red</answer>"), C.UNBALANCED_TAG),
        (_off("<think>a<think>b</think></think><answer>red</answer>"), C.UNBALANCED_TAG),
        (_off("<think>a</think> <answer>red</answer>"), C.UNBALANCED_TAG),
        (_off("<tool_off><think>a</think><answer>red</answer>"), C.UNBALANCED_TAG),
        (
            _on(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call><tool_response>x"),
            C.UNBALANCED_TAG,
        ),
        (_off("<think>a</answer></think><answer>red</answer>"), C.UNBALANCED_TAG),
        (_on("<think>a</think><tool_call>{"), C.UNBALANCED_TAG),
        (_on("<think>a</think><tool_call></think></tool_call>"), C.UNBALANCED_TAG),
        # bad tool-call JSON
        *[
            (
                _on(
                    f"<think>a</think><tool_call>{p}</tool_call>{_RESP}"
                    "<think>b</think><answer>glyph_1</answer>"
                ),
                C.BAD_JSON,
            )
            for p in bad_payloads
        ],
        # answer where the tool response was owed
        (_on(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call><answer>glyph_1</answer>"), C.ANSWER_IN_FIRST_ON_TURN),
        (
            _on(
                '<think>a</think><tool_call>{"name": "image_zoom_in_tool", "arguments": '
                '{"bbox_2d": [1, 1, 3, 3], "label": "target"}}</tool_call><answer>glyph_2</answer>'
            ),
            C.ANSWER_IN_FIRST_ON_TURN,
        ),
        (
            _on(
                f"<think>a</think><tool_call>{_PAYLOAD}</tool_call>{_RESP}"
                f"<think>b</think><tool_call>{_PAYLOAD}</tool_call><answer>glyph_1</answer>"
            ),
            C.ANSWER_IN_FIRST_ON_TURN,
        ),
        (_on(f"<think></think><tool_call>{_PAYLOAD}</tool_call><answer></answer>"), C.ANSWER_IN_FIRST_ON_TURN),
        (
            _on(
                '<think>look</think><tool_call>{"name": "image_zoom_in_tool", "arguments": '
                '{"bbox_2d": [2, 0, 4, 2]}}</tool_call><answer>red</answer>'
            ),
            C.ANSWER_IN_FIRST_ON_TURN,
        ),
        (
            _on(f"<think>a</think><think>b</think><tool_call>{_PAYLOAD}</tool_call><answer>x</answer>"),
            C.ANSWER_IN_FIRST_ON_TURN,
        ),
        # tool call under <tool_off>
        (
            _off(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call>{_RESP}<think>b</think><answer>red</answer>"),
            C.TOOL_CALL_IN_OFF_MODE,
        ),
        (_off(f"<think></think><tool_call>{_PAYLOAD}</tool_call>{_RESP}<think></think><answer>red</answer>"), C.TOOL_CALL_IN_OFF_MODE),
        (
            _off(f"<think>a</think><think>b</think><tool_call>{_PAYLOAD}</tool_call>{_RESP}<think></think><answer>red</answer>"),
            C.TOOL_CALL_IN_OFF_MODE,
        ),
        (_off(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call>"), C.TOOL_CALL_IN_OFF_MODE),
        (_off("<think>a</think><tool_call>not json</tool_call>"), C.TOOL_CALL_IN_OFF_MODE),
        (
            _off(f"<think>a</think><tool_call>{_PAYLOAD}</tool_call><answer>red</answer>"),
            C.TOOL_CALL_IN_OFF_MODE,
        ),
        # trailing garbage after the terminal answer
        (_off("<think>a</think><answer>red</answer>x"), C.TRAILING_GARBAGE),
        (_off("<think>a</think><answer>red</answer>\n"), C.TRAILING_GARBAGE),
        (_off("<think>a</think><answer>red</answer><answer>blue</answer>"), C.TRAILING_GARBAGE),
        (_off("<think>a</think><answer>red</answer><tool_on>"), C.TRAILING_GARBAGE),
        (_off("<think>a</think><answer>red</answer><think>b</think>"), C.TRAILING_GARBAGE),
        (_off("<think>a</think><answer>red</answer> "), C.TRAILING_GARBAGE),
    ]
    assert len(cases) == 50
    return cases


def serialize_golden() -> list[dict]:
    """Two canonical serialized forms frozen as byte goldens."""
    off = _off_record("red")
    zoom_cell_2_3 = with_serialized(
        TrajectoryRecord(
            query_id="",
            mode=ModeToken.TOOL_ON,
            turns=(
                Turn(
                    think="look closer",
                    tool_call=ZoomCall(bbox=(3, 2, 4, 3)),
                    tool_response=ZoomObservation(bbox=(3, 2, 4, 3), cells=((2, 3, 1, 5),), valid=True),
                ),
                Turn(think="the glyph is visible", answer="glyph_5"),
            ),
            answer="glyph_5",
            truncated=False,
        )
    )
    return [
        {"label": "off-minimal", "serialized": off.serialized},
        {"label": "on-zoom-cell-2-3", "serialized": zoom_cell_2_3.serialized},
    ]


def write_fixture_files(out_dir: str | Path) -> list[Path]:
    """Emit every golden fixture as JSON/JSONL under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    reward_rows = []
    for case in canonical_reward_cases():
        reward_rows.append(
            {
                "label": case["label"],
                "serialized": case["record"].serialized,
                "truth": case["truth"],
                "expected_total": case["expected_total"],
                **case["expected"],
            }
        )
    paths = {
        "reward_vectors.json": reward_rows,
        "amb_table.json": amb_table(),
        "malformed_trajectories.json": [
            {"serialized": s, "code": c.value} for s, c in malformed_cases()
        ],
        "serialize_golden.json": serialize_golden(),
        "grid_query_seed7.json": grid_query_to_json(*generate(7, EnvConfig())),
    }
    for name, payload in paths.items():
        p = out / name
        p.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(p)

    rollouts = out / "rollouts_example.jsonl"
    with rollouts.open("w") as f:
        for row in example_rollout_rows():
            f.write(json.dumps(row) + "\n")
    written.append(rollouts)
    return written
