"""Linear-softmax policy over (mode, zoom target, answer) actions.

Three heads share nothing but the query features: the mode head picks
<tool_on>/<tool_off> from the query features, the tool head picks a single
cell to zoom (a 1x1 bbox), and the answer head picks a token from the
query's admissible answers (glyphs for fine queries, colors for global
ones). Log-probabilities and their gradients are exact; every softmax is
log-sum-exp stabilized so saturated logits stay finite.

The default policy makes at most one zoom per trajectory. Multi-zoom
records are grammar-legal and the parser/reward path handles them, but the
sampler never emits them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import (
    ModeToken,
    Query,
    QueryKind,
    TrajectoryRecord,
    Turn,
    ZoomCall,
    with_serialized,
)
from .zoomworld import EnvConfig, GridInstance, answer_vocabulary, execute_zoom, kind_answer_ids

__all__ = [
    "FeatureDims",
    "FeatureView",
    "PolicyParams",
    "grad_logprob",
    "log_softmax",
    "logprob",
    "mode_logprob",
    "sample_trajectory",
    "softmax",
]

MODE_OFF, MODE_ON = 0, 1


@dataclass(frozen=True, slots=True)
class FeatureDims:
    """Feature and head sizes implied by an environment config."""

    n_cells: int
    d_query: int
    d_tool: int
    d_answer: int
    n_answers: int

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "FeatureDims":
        # No bias coordinate: the kind one-hot pair already spans it, and a
        # shared bias would leak one kind's mode preference into the other.
        n_cells = cfg.n_cells
        d_query = 2 + n_cells  # kind one-hot, target-cell one-hot
        d_tool = d_query + cfg.n_colors  # + per-color counts
        d_answer = d_tool + cfg.n_glyphs + 1  # + revealed-glyph one-hot, seen flag
        return cls(
            n_cells=n_cells,
            d_query=d_query,
            d_tool=d_tool,
            d_answer=d_answer,
            n_answers=cfg.n_colors + cfg.n_glyphs,
        )


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Weights for the three heads. Flattening order is fixed (mode, tool,
    answer) so optimizer state and checkpoints line up."""

    w_mode: np.ndarray  # (2, d_query)
    w_tool: np.ndarray  # (n_cells, d_tool)
    w_answer: np.ndarray  # (n_answers, d_answer)

    @classmethod
    def zeros(cls, dims: FeatureDims) -> "PolicyParams":
        return cls(
            w_mode=np.zeros((2, dims.d_query)),
            w_tool=np.zeros((dims.n_cells, dims.d_tool)),
            w_answer=np.zeros((dims.n_answers, dims.d_answer)),
        )

    @property
    def n_params(self) -> int:
        return self.w_mode.size + self.w_tool.size + self.w_answer.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w_mode.ravel(), self.w_tool.ravel(), self.w_answer.ravel()])

    @classmethod
    def from_vector(cls, dims: FeatureDims, vec: np.ndarray) -> "PolicyParams":
        n_mode = 2 * dims.d_query
        n_tool = dims.n_cells * dims.d_tool
        n_answer = dims.n_answers * dims.d_answer
        if vec.size != n_mode + n_tool + n_answer:
            raise ValueError("parameter vector has the wrong size")
        return cls(
            w_mode=vec[:n_mode].reshape(2, dims.d_query).copy(),
            w_tool=vec[n_mode:n_mode + n_tool].reshape(dims.n_cells, dims.d_tool).copy(),
            w_answer=vec[n_mode + n_tool:].reshape(dims.n_answers, dims.d_answer).copy(),
        )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass(frozen=True, eq=False)
class FeatureView:
    """Parameter-independent features of one episode, built once and shared
    by every rollout of the query's group.

    The answer features are the tool features plus the revealed-glyph block:
    a one-hot of the glyph seen at the queried cell (zero if no observation
    covered it) and a seen flag.
    """

    query: Query
    grid: GridInstance
    cfg: EnvConfig
    dims: FeatureDims
    query_vec: np.ndarray
    tool_vec: np.ndarray
    answer_ids: np.ndarray  # admissible answer-vocabulary ids for this kind
    vocab: tuple[str, ...]

    @classmethod
    def build(cls, query: Query, grid: GridInstance, cfg: EnvConfig) -> "FeatureView":
        dims = FeatureDims.from_config(cfg)
        q = np.zeros(dims.d_query)
        q[0 if query.kind_observed is QueryKind.GLOBAL else 1] = 1.0
        if query.target_cell is not None:
            r, c = query.target_cell
            q[2 + r * cfg.width + c] = 1.0
        counts = np.bincount(grid.coarse.ravel(), minlength=cfg.n_colors) / cfg.n_cells
        t = np.concatenate([q, counts])
        return cls(
            query=query,
            grid=grid,
            cfg=cfg,
            dims=dims,
            query_vec=q,
            tool_vec=t,
            answer_ids=np.fromiter(kind_answer_ids(query.kind, cfg), dtype=np.int64),
            vocab=answer_vocabulary(cfg),
        )

    def answer_vec(self, record_turns: tuple[Turn, ...]) -> np.ndarray:
        """Tool features extended with the revealed-glyph block derived from
        the observations accumulated so far."""
        obs = np.zeros(self.cfg.n_glyphs + 1)
        target = self.query.target_cell
        if target is not None:
            for turn in record_turns:
                resp = turn.tool_response
                if resp is None or not resp.valid:
                    continue
                for r, c, _, glyph in resp.cells:
                    if (r, c) == target:
                        obs[glyph] = 1.0
                        obs[-1] = 1.0
        return np.concatenate([self.tool_vec, obs])

    def cell_to_call(self, idx: int) -> ZoomCall:
        r, c = divmod(idx, self.cfg.width)
        return ZoomCall(bbox=(c, r, c + 1, r + 1))

    def call_to_cell(self, call: ZoomCall) -> int:
        x1, y1, x2, y2 = call.bbox
        if x2 - x1 != 1 or y2 - y1 != 1 or not (0 <= x1 < self.cfg.width and 0 <= y1 < self.cfg.height):
            raise ValueError(f"tool call {call.bbox} is not a policy cell action")
        return y1 * self.cfg.width + x1

    def answer_to_local(self, token: str) -> int:
        """Index of the token within this kind's admissible answers."""
        try:
            vocab_id = self.vocab.index(token)
        except ValueError:
            raise ValueError(f"answer {token!r} is not in the vocabulary") from None
        local = np.nonzero(self.answer_ids == vocab_id)[0]
        if local.size == 0:
            raise ValueError(f"answer {token!r} is not admissible for a {self.query.kind.value} query")
        return int(local[0])


def sample_trajectory(
    params: PolicyParams,
    query: Query,
    grid: GridInstance,
    rng: np.random.Generator,
    cfg: EnvConfig,
    feats: FeatureView | None = None,
    force_mode: ModeToken | None = None,
    greedy: bool = False,
) -> TrajectoryRecord:
    """Roll out one trajectory, recording the summed log-probability of the
    sampled actions as ``logprob_old``. ``greedy`` takes the argmax action
    at every head instead of sampling.

    With ``force_mode`` the mode token is pinned instead of sampled and its
    log-probability is excluded: the forced trajectory's log-prob is the
    full log-prob minus the mode term.
    """
    if feats is None:
        feats = FeatureView.build(query, grid, cfg)
    logp = 0.0

    def pick(lp: np.ndarray) -> int:
        if greedy:
            return int(np.argmax(lp))
        return int(rng.choice(lp.size, p=np.exp(lp)))

    mode_lp = log_softmax(params.w_mode @ feats.query_vec)
    if force_mode is None:
        mode_idx = pick(mode_lp)
        logp += float(mode_lp[mode_idx])
        mode = ModeToken.TOOL_ON if mode_idx == MODE_ON else ModeToken.TOOL_OFF
    else:
        mode = force_mode

    turns: list[Turn] = []
    if mode is ModeToken.TOOL_ON:
        tool_lp = log_softmax(params.w_tool @ feats.tool_vec)
        cell = pick(tool_lp)
        logp += float(tool_lp[cell])
        call = feats.cell_to_call(cell)
        obs = execute_zoom(grid, call)
        turns.append(Turn(think="", tool_call=call, tool_response=obs))

    a_vec = feats.answer_vec(tuple(turns))
    ans_lp = log_softmax(params.w_answer[feats.answer_ids] @ a_vec)
    local = pick(ans_lp)
    logp += float(ans_lp[local])
    token = feats.vocab[int(feats.answer_ids[local])]
    turns.append(Turn(think="", answer=token))

    return with_serialized(
        TrajectoryRecord(
            query_id=query.id,
            mode=mode,
            turns=tuple(turns),
            answer=token,
            truncated=False,
            logprob_old=logp,
        )
    )


def _resolve_actions(feats: FeatureView, t: TrajectoryRecord) -> tuple[int, list[int], int]:
    """(mode index, zoomed cells in order, local answer index) of a record.
    Raises ValueError when an action cannot have come from this policy."""
    mode_idx = MODE_ON if t.mode is ModeToken.TOOL_ON else MODE_OFF
    cells = [feats.call_to_cell(c) for c in t.tool_calls]
    if t.answer is None:
        raise ValueError("record has no answer: not a policy rollout")
    return mode_idx, cells, feats.answer_to_local(t.answer)


def logprob(
    params: PolicyParams,
    t: TrajectoryRecord,
    query: Query,
    grid: GridInstance,
    cfg: EnvConfig,
    feats: FeatureView | None = None,
    skip_mode: bool = False,
) -> float:
    """Exact log-probability of the recorded actions under ``params``.
    ``skip_mode`` drops the mode term (mode-forced trajectories)."""
    if feats is None:
        feats = FeatureView.build(query, grid, cfg)
    mode_idx, cells, local = _resolve_actions(feats, t)
    total = 0.0
    if not skip_mode:
        total += float(log_softmax(params.w_mode @ feats.query_vec)[mode_idx])
    if cells:
        tool_lp = log_softmax(params.w_tool @ feats.tool_vec)
        total += float(sum(tool_lp[c] for c in cells))
    a_vec = feats.answer_vec(t.turns)
    total += float(log_softmax(params.w_answer[feats.answer_ids] @ a_vec)[local])
    return total


def mode_logprob(params: PolicyParams, feats: FeatureView, mode: ModeToken) -> float:
    idx = MODE_ON if mode is ModeToken.TOOL_ON else MODE_OFF
    return float(log_softmax(params.w_mode @ feats.query_vec)[idx])


def logprob_and_grad(
    params: PolicyParams,
    t: TrajectoryRecord,
    feats: FeatureView,
    skip_mode: bool = False,
) -> tuple[float, np.ndarray]:
    """Log-probability and its gradient as a flat vector in PolicyParams
    order. Heads the trajectory never exercised contribute zero blocks; the
    masked answer head only touches the admissible rows."""
    mode_idx, cells, local = _resolve_actions(feats, t)

    g_mode = np.zeros_like(params.w_mode)
    g_tool = np.zeros_like(params.w_tool)
    g_answer = np.zeros_like(params.w_answer)
    total = 0.0

    mode_lp = log_softmax(params.w_mode @ feats.query_vec)
    if not skip_mode:
        total += float(mode_lp[mode_idx])
        coeff = -np.exp(mode_lp)
        coeff[mode_idx] += 1.0
        g_mode += np.outer(coeff, feats.query_vec)

    if cells:
        tool_lp = log_softmax(params.w_tool @ feats.tool_vec)
        probs = np.exp(tool_lp)
        for cell in cells:
            total += float(tool_lp[cell])
            coeff = -probs.copy()
            coeff[cell] += 1.0
            g_tool += np.outer(coeff, feats.tool_vec)

    a_vec = feats.answer_vec(t.turns)
    ans_lp = log_softmax(params.w_answer[feats.answer_ids] @ a_vec)
    total += float(ans_lp[local])
    coeff = -np.exp(ans_lp)
    coeff[local] += 1.0
    g_answer[feats.answer_ids] += np.outer(coeff, a_vec)

    flat = np.concatenate([g_mode.ravel(), g_tool.ravel(), g_answer.ravel()])
    return total, flat


def grad_logprob(
    params: PolicyParams,
    t: TrajectoryRecord,
    query: Query,
    grid: GridInstance,
    cfg: EnvConfig,
    skip_mode: bool = False,
) -> np.ndarray:
    """Flat gradient of :func:`logprob` with respect to the parameters."""
    feats = FeatureView.build(query, grid, cfg)
    return logprob_and_grad(params, t, feats, skip_mode=skip_mode)[1]
