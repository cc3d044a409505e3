"""Synthetic stand-in for high-resolution images.

A grid shows coarse cell colors to everyone; each cell also hides a fine
glyph that only the zoom tool reveals. Fine queries ("what glyph is at
(r, c)?") are unanswerable above chance without zooming; global queries
("what is the majority coarse color?") need no tool at all. Glyphs are drawn
independently of colors, so that separation is by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import Query, QueryKind, ZoomCall, ZoomObservation

__all__ = [
    "EnvConfig",
    "GridInstance",
    "answer_vocabulary",
    "color_name",
    "execute_zoom",
    "generate",
    "glyph_name",
    "grid_query_to_json",
    "kind_answer_ids",
    "oracle_policy_value",
]

_COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta")


def color_name(i: int) -> str:
    return _COLOR_NAMES[i] if i < len(_COLOR_NAMES) else f"color_{i}"


def glyph_name(k: int) -> str:
    return f"glyph_{k}"


@dataclass(frozen=True, slots=True)
class EnvConfig:
    width: int = 4
    height: int = 4
    n_colors: int = 4
    n_glyphs: int = 4
    fine_query_fraction: float = 0.5
    kind_signal_noise: float = 0.1

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if self.n_colors < 2 or self.n_glyphs < 2:
            raise ValueError("need at least two colors and two glyphs")
        if not 0.0 <= self.fine_query_fraction <= 1.0:
            raise ValueError("fine_query_fraction must lie in [0, 1]")
        if not 0.0 <= self.kind_signal_noise <= 0.5:
            raise ValueError("kind_signal_noise must lie in [0, 0.5]")

    @property
    def n_cells(self) -> int:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class GridInstance:
    """Generated world state. ``coarse`` and ``fine`` are (height, width)
    integer matrices; generation is a pure function of (seed, config)."""

    width: int
    height: int
    coarse: np.ndarray
    fine: np.ndarray
    seed: int


def answer_vocabulary(cfg: EnvConfig) -> tuple[str, ...]:
    """Color answers first (ids 0..n_colors-1), then glyph answers."""
    return tuple(color_name(i) for i in range(cfg.n_colors)) + tuple(
        glyph_name(k) for k in range(cfg.n_glyphs)
    )


def kind_answer_ids(kind: QueryKind, cfg: EnvConfig) -> range:
    """Answer-vocabulary ids admissible for a query kind: fine queries take
    glyph answers, global queries take color answers."""
    if kind is QueryKind.FINE:
        return range(cfg.n_colors, cfg.n_colors + cfg.n_glyphs)
    return range(0, cfg.n_colors)


def majority_color(coarse: np.ndarray, n_colors: int) -> int:
    """Most frequent color id, ties broken by the lowest id."""
    counts = np.bincount(coarse.ravel(), minlength=n_colors)
    return int(np.argmax(counts))


def generate(
    seed: int,
    cfg: EnvConfig,
    query_id: str | None = None,
    force_kind: QueryKind | None = None,
) -> tuple[GridInstance, Query]:
    """Deterministically build a grid and one query over it.

    By default the query kind is drawn with probability fine_query_fraction.
    ``force_kind`` pins it instead (the trainer stratifies batch composition
    this way); the kind-indicator noise still applies.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, cfg.n_colors, size=(cfg.height, cfg.width))
    fine = rng.integers(0, cfg.n_glyphs, size=(cfg.height, cfg.width))
    grid = GridInstance(width=cfg.width, height=cfg.height, coarse=coarse, fine=fine, seed=seed)

    is_fine = rng.random() < cfg.fine_query_fraction
    if force_kind is not None:
        is_fine = force_kind is QueryKind.FINE
    r = int(rng.integers(0, cfg.height))
    c = int(rng.integers(0, cfg.width))
    flip = rng.random() < cfg.kind_signal_noise

    if is_fine:
        kind = QueryKind.FINE
        prompt = f"what glyph is at ({r}, {c})?"
        truth = glyph_name(int(fine[r, c]))
        target: tuple[int, int] | None = (r, c)
    else:
        kind = QueryKind.GLOBAL
        prompt = "what is the majority coarse color?"
        truth = color_name(majority_color(coarse, cfg.n_colors))
        target = None
    observed = kind
    if flip:
        observed = QueryKind.GLOBAL if kind is QueryKind.FINE else QueryKind.FINE

    query = Query(
        id=query_id if query_id is not None else f"q{seed}",
        kind=kind,
        kind_observed=observed,
        grid_ref=f"grid{seed}",
        prompt_text=prompt,
        ground_truth=truth,
        target_cell=target,
    )
    return grid, query


def execute_zoom(grid: GridInstance, call: ZoomCall) -> ZoomObservation:
    """Crop by cell-center inclusion: cell (r, c) is revealed iff its center
    (c + 0.5, r + 0.5) lies inside [x1, x2) x [y1, y2). Malformed or
    non-intersecting boxes yield an invalid, empty observation."""
    x1, y1, x2, y2 = call.bbox
    if not call.well_formed():
        return ZoomObservation(bbox=call.bbox, cells=(), valid=False)
    c_lo, c_hi = max(x1, 0), min(x2, grid.width)
    r_lo, r_hi = max(y1, 0), min(y2, grid.height)
    if c_lo >= c_hi or r_lo >= r_hi:
        return ZoomObservation(bbox=call.bbox, cells=(), valid=False)
    cells = tuple(
        (r, c, int(grid.coarse[r, c]), int(grid.fine[r, c]))
        for r in range(r_lo, r_hi)
        for c in range(c_lo, c_hi)
    )
    return ZoomObservation(bbox=call.bbox, cells=cells, valid=True)


def oracle_policy_value(cfg: EnvConfig) -> tuple[float, float, float]:
    """Accuracies of the ideal per-mode strategy: a fine query without the
    tool is a uniform guess over glyphs; with a correct zoom it is certain;
    a global query is read off the visible coarse grid."""
    return 1.0 / cfg.n_glyphs, 1.0, 1.0


def grid_query_to_json(grid: GridInstance, query: Query) -> dict:
    """Explicit dump for fixture tests and cross-implementation comparison."""
    return {
        "seed": grid.seed,
        "width": grid.width,
        "height": grid.height,
        "coarse": grid.coarse.tolist(),
        "fine": grid.fine.tolist(),
        "query": {
            "id": query.id,
            "kind": query.kind.value,
            "kind_observed": query.kind_observed.value,
            "grid_ref": query.grid_ref,
            "prompt_text": query.prompt_text,
            "ground_truth": query.ground_truth,
            "target_cell": list(query.target_cell) if query.target_cell else None,
        },
    }
