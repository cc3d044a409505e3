"""Training loop: sample query batches, roll out groups under the frozen
behavior policy, balance mode coefficients, score, normalize advantages per
group, and ascend the clipped objective over mini-batches.

A run is a strict pipeline per iteration (rollout, score, update) and is
bit-deterministic given (config, seed) at thread count 1: every RNG stream
is keyed by (seed, iteration, query index, rollout index), metrics floats
are written with repr, and checkpoints use the deterministic binary format.
Wall-clock timings go to a sidecar file so the metrics CSV stays
reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import amb
from .checkpoint import Checkpoint, config_hash, load_checkpoint, save_checkpoint
from .grpo import (
    ClipConfig,
    NonFiniteGradientError,
    RolloutGroup,
    apply_update,
    init_optimizer_state,
    objective_and_gradient,
)
from .policy import FeatureDims, FeatureView, PolicyParams, logprob_and_grad, sample_trajectory
from .rewards import score
from .trajectory import ModeToken, Query, QueryKind, TrajectoryRecord, record_to_row
from .zoomworld import EnvConfig, GridInstance, generate

__all__ = [
    "EvalReport",
    "IterationMetrics",
    "METRICS_COLUMNS",
    "RunResult",
    "TrainConfig",
    "TrainingAborted",
    "evaluate",
    "run",
    "sweep",
]

THREADS_ENV_VAR = "AUTOTOOL_THREADS"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200
    batch_queries: int = 32
    group_size: int = 8
    mini_batches: int = 4
    epsilon: float = 0.2
    lambda_base: float = 1.2
    penalty: float = -0.5
    free_stage_at: int | None = None  # default resolves to 0.75 * iterations
    amb_schedule: str = "adaptive"
    lr: float = 0.01
    weight_decay: float = 0.0
    refresh: str = "batch"
    seed: int = 1
    checkpoint_every: int = 10
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon={self.epsilon} violates 0 < epsilon < 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.batch_queries < 1 or self.mini_batches < 1:
            raise ValueError("batch_queries and mini_batches must be positive")
        if self.batch_queries % self.mini_batches != 0:
            raise ValueError("mini_batches must partition batch_queries evenly")
        if self.lambda_base < 0:
            raise ValueError("lambda_base must be non-negative")
        if self.penalty > 0:
            raise ValueError("penalty must be zero or negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if self.amb_schedule not in {s.value for s in amb.AmbSchedule}:
            raise ValueError(f"amb_schedule must be one of adaptive, linear, off")
        if self.refresh not in ("batch", "minibatch"):
            raise ValueError("refresh must be 'batch' or 'minibatch'")

    @property
    def resolved_free_stage_at(self) -> int:
        if self.free_stage_at is not None:
            return self.free_stage_at
        return int(round(0.75 * self.iterations))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["free_stage_at"] = self.resolved_free_stage_at
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        env = EnvConfig(**d.pop("env"))
        return cls(env=env, **d)


METRICS_COLUMNS = (
    "iter",
    "mean_total_reward",
    "mean_reward_fine",
    "mean_reward_global",
    "f_on",
    "lambda_on",
    "lambda_off",
    "mean_tool_calls_on",
    "mean_serialized_length",
    "accuracy_fine",
    "accuracy_global",
    "p_tool_given_fine",
    "p_tool_given_global",
    "rate_on_wrong",
)


@dataclass(frozen=True)
class IterationMetrics:
    iter: int
    mean_total_reward: float
    mean_reward_fine: float
    mean_reward_global: float
    f_on: float
    lambda_on: float
    lambda_off: float
    mean_tool_calls_on: float
    mean_serialized_length: float
    accuracy_fine: float
    accuracy_global: float
    p_tool_given_fine: float
    p_tool_given_global: float
    rate_on_wrong: float
    wall_clock: float = 0.0  # sidecar only; keeps metrics.csv deterministic

    def csv_row(self) -> str:
        return ",".join(_fmt(getattr(self, c)) for c in METRICS_COLUMNS)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs) if xs else float("nan")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, bundle_dir: Path):
        super().__init__(message)
        self.bundle_dir = bundle_dir


@dataclass(frozen=True)
class Episode:
    query: Query
    grid: GridInstance
    feats: FeatureView


@dataclass
class RunResult:
    out_dir: Path
    metrics_path: Path
    final_checkpoint: Path
    metrics: list[IterationMetrics]


def _episode_seed(*key: int) -> int:
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _make_episode(cfg: TrainConfig, iteration: int, q_idx: int) -> Episode:
    """One batch slot. Batch composition is stratified: the first
    round(B * fine_query_fraction) slots carry fine queries, the rest global
    ones, so the kind mix per batch is exact rather than binomial (the
    analog of drawing a fixed-size batch from a fixed data mixture)."""
    seed = _episode_seed(cfg.seed, iteration, q_idx)
    n_fine = int(round(cfg.batch_queries * cfg.env.fine_query_fraction))
    kind = QueryKind.FINE if q_idx < n_fine else QueryKind.GLOBAL
    grid, query = generate(
        seed, cfg.env, query_id=f"i{iteration:04d}q{q_idx:03d}", force_kind=kind
    )
    return Episode(query=query, grid=grid, feats=FeatureView.build(query, grid, cfg.env))


def _rollout_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _sample_batch(
    cfg: TrainConfig, params: PolicyParams, episodes: list[Episode], iteration: int
) -> list[list[TrajectoryRecord]]:
    """G rollouts per episode under the frozen policy, with per-trajectory
    RNG streams so the result is identical at any thread count."""

    def one(qi: int, gi: int) -> TrajectoryRecord:
        ep = episodes[qi]
        rng = np.random.default_rng((cfg.seed, iteration, qi, gi))
        return sample_trajectory(params, ep.query, ep.grid, rng, cfg.env, feats=ep.feats)

    tasks = [(qi, gi) for qi in range(len(episodes)) for gi in range(cfg.group_size)]
    threads = _rollout_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(lambda t: one(*t), tasks))
    else:
        flat = [one(*t) for t in tasks]
    g = cfg.group_size
    return [flat[i * g:(i + 1) * g] for i in range(len(episodes))]


def _save_state(
    path: Path,
    cfg: TrainConfig,
    params: PolicyParams,
    opt_m: np.ndarray,
    opt_v: np.ndarray,
    opt_step: int,
    iteration: int,
) -> None:
    save_checkpoint(
        path,
        config=cfg.to_dict(),
        seed=cfg.seed,
        iteration=iteration,
        arrays={
            "w_mode": params.w_mode,
            "w_tool": params.w_tool,
            "w_answer": params.w_answer,
            "opt_m": opt_m,
            "opt_v": opt_v,
            "opt_step": np.array(float(opt_step)),
        },
    )


def _params_from_checkpoint(ckpt: Checkpoint) -> tuple[TrainConfig, PolicyParams]:
    cfg = TrainConfig.from_dict(ckpt.config)
    params = PolicyParams(
        w_mode=ckpt.arrays["w_mode"],
        w_tool=ckpt.arrays["w_tool"],
        w_answer=ckpt.arrays["w_answer"],
    )
    return cfg, params


def run(cfg: TrainConfig, out_dir: str | Path, dump_rollouts: bool = False) -> RunResult:
    """Execute a full training run, writing metrics.csv, timings.csv,
    config.json, periodic checkpoints and ckpt_final.bin into ``out_dir``.

    Non-finite parameters or gradients abort the run after dumping a
    diagnostics bundle (last batch, current state, RNG key material).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    dims = FeatureDims.from_config(cfg.env)
    params = PolicyParams.zeros(dims)
    opt = init_optimizer_state(params.n_params, cfg.lr, cfg.weight_decay)
    clip = ClipConfig(cfg.epsilon)
    base_amb = amb.AmbState(
        lambda_base=cfg.lambda_base,
        free_stage_at=cfg.resolved_free_stage_at,
        schedule=amb.AmbSchedule(cfg.amb_schedule),
        total_iters=max(cfg.iterations, 1),
    )

    metrics_path = out / "metrics.csv"
    timings_path = out / "timings.csv"
    dump_path = out / "rollouts.jsonl" if dump_rollouts else None
    metrics_rows: list[IterationMetrics] = []
    last_rows_for_diagnostics: list[dict] = []

    def abort(exc: Exception, iteration: int) -> TrainingAborted:
        bundle = out / "diagnostics"
        bundle.mkdir(exist_ok=True)
        (bundle / "error.txt").write_text(
            f"iteration {iteration}\n{traceback.format_exc()}\n"
        )
        (bundle / "last_batch.jsonl").write_text(
            "".join(json.dumps(r) + "\n" for r in last_rows_for_diagnostics)
        )
        (bundle / "rng_state.json").write_text(
            json.dumps({"seed": cfg.seed, "iteration": iteration}, indent=2) + "\n"
        )
        _save_state(bundle / "state.ckpt", cfg, params, opt.m, opt.v, opt.step, iteration)
        return TrainingAborted(f"training aborted at iteration {iteration}: {exc}", bundle)

    with metrics_path.open("w") as mf, timings_path.open("w") as tf:
        mf.write(",".join(METRICS_COLUMNS) + "\n")
        tf.write("iter,wall_clock_s\n")
        dump_f = dump_path.open("w") if dump_path else None
        try:
            for it in range(cfg.iterations):
                t0 = time.perf_counter()
                episodes = [_make_episode(cfg, it, qi) for qi in range(cfg.batch_queries)]
                rollouts = _sample_batch(cfg, params, episodes, it)

                modes = [t.mode for group in rollouts for t in group]
                amb_state = amb.observe_batch(replace(base_amb, current_iter=it), modes)
                lam_on, lam_off = amb.coefficients(amb_state)

                groups: list[RolloutGroup] = []
                breakdowns = []
                for ep, trajs in zip(episodes, rollouts):
                    bds = [
                        score(
                            t,
                            truth=ep.query.ground_truth,
                            lambda_on=lam_on,
                            lambda_off=lam_off,
                            penalty=cfg.penalty,
                        )
                        for t in trajs
                    ]
                    breakdowns.append(bds)
                    groups.append(
                        RolloutGroup.build(ep.query.id, trajs, [b.total for b in bds])
                    )

                last_rows_for_diagnostics = [
                    record_to_row(t, ep.query)
                    for ep, trajs in zip(episodes, rollouts)
                    for t in trajs
                ]
                if dump_f is not None:
                    for row in last_rows_for_diagnostics:
                        dump_f.write(json.dumps(row) + "\n")

                feats_by_qid = {ep.query.id: ep.feats for ep in episodes}
                per_mb = cfg.batch_queries // cfg.mini_batches
                try:
                    for mb in range(cfg.mini_batches):
                        chunk = groups[mb * per_mb:(mb + 1) * per_mb]
                        if cfg.refresh == "minibatch":
                            chunk = [_refresh_old_logprobs(g, params, feats_by_qid) for g in chunk]
                        vec = params.to_vector()

                        def ev(v: np.ndarray, traj: TrajectoryRecord):
                            return logprob_and_grad(params, traj, feats_by_qid[traj.query_id])

                        _, grad = objective_and_gradient(chunk, vec, clip, ev)
                        new_vec, opt = apply_update(vec, grad, opt)
                        params = PolicyParams.from_vector(dims, new_vec)
                except (FloatingPointError, NonFiniteGradientError, ValueError) as exc:
                    raise abort(exc, it) from exc

                metrics = _iteration_metrics(
                    it, episodes, rollouts, breakdowns, amb_state.f_on, lam_on, lam_off
                )
                metrics = replace(metrics, wall_clock=time.perf_counter() - t0)
                metrics_rows.append(metrics)
                mf.write(metrics.csv_row() + "\n")
                tf.write(f"{metrics.iter},{metrics.wall_clock!r}\n")

                if (it + 1) % cfg.checkpoint_every == 0:
                    _save_state(
                        out / f"ckpt_{it + 1:06d}.bin", cfg, params, opt.m, opt.v, opt.step, it + 1
                    )
        finally:
            if dump_f is not None:
                dump_f.close()

    final = out / "ckpt_final.bin"
    _save_state(final, cfg, params, opt.m, opt.v, opt.step, cfg.iterations)
    return RunResult(out_dir=out, metrics_path=metrics_path, final_checkpoint=final, metrics=metrics_rows)


def _refresh_old_logprobs(
    group: RolloutGroup, params: PolicyParams, feats_by_qid: dict[str, FeatureView]
) -> RolloutGroup:
    """Re-anchor logprob_old to the current parameters (minibatch refresh)."""
    feats = feats_by_qid[group.query_id]
    new_trajs = tuple(
        replace(t, logprob_old=logprob_and_grad(params, t, feats)[0]) for t in group.trajectories
    )
    return dataclasses.replace(group, trajectories=new_trajs)


def _iteration_metrics(
    it: int,
    episodes: list[Episode],
    rollouts: list[list[TrajectoryRecord]],
    breakdowns: list[list],
    f_on: float,
    lam_on: float,
    lam_off: float,
) -> IterationMetrics:
    totals: list[float] = []
    totals_fine: list[float] = []
    totals_global: list[float] = []
    correct_fine: list[float] = []
    correct_global: list[float] = []
    on_fine: list[float] = []
    on_global: list[float] = []
    tool_calls_on: list[float] = []
    lengths: list[float] = []
    on_wrong = 0
    n = 0
    for ep, trajs, bds in zip(episodes, rollouts, breakdowns):
        fine = ep.query.kind is QueryKind.FINE
        for t, b in zip(trajs, bds):
            n += 1
            totals.append(b.total)
            lengths.append(float(len(t.serialized)))
            is_on = t.mode is ModeToken.TOOL_ON
            (totals_fine if fine else totals_global).append(b.total)
            (correct_fine if fine else correct_global).append(1.0 if b.answer_correct else 0.0)
            (on_fine if fine else on_global).append(1.0 if is_on else 0.0)
            if is_on:
                tool_calls_on.append(float(t.n_tool_calls))
                if not b.answer_correct:
                    on_wrong += 1
    return IterationMetrics(
        iter=it,
        mean_total_reward=_mean(totals),
        mean_reward_fine=_mean(totals_fine),
        mean_reward_global=_mean(totals_global),
        f_on=f_on,
        lambda_on=lam_on,
        lambda_off=lam_off,
        mean_tool_calls_on=_mean(tool_calls_on),
        mean_serialized_length=_mean(lengths),
        accuracy_fine=_mean(correct_fine),
        accuracy_global=_mean(correct_global),
        p_tool_given_fine=_mean(on_fine),
        p_tool_given_global=_mean(on_global),
        rate_on_wrong=on_wrong / n if n else float("nan"),
    )


@dataclass(frozen=True)
class EvalReport:
    episodes: int
    force_mode: str
    sampled: bool
    accuracy_fine: float
    accuracy_global: float
    accuracy_overall: float
    f_on: float
    p_tool_given_fine: float
    p_tool_given_global: float
    mean_tool_calls_on: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(
    checkpoint_path: str | Path,
    episodes: int,
    force_mode: str = "auto",
    sample: bool = True,
    eval_seed: int = 12345,
    config: TrainConfig | None = None,
) -> EvalReport:
    """Greedy-or-sampled evaluation of a checkpoint on fresh episodes.

    force_mode pins the first token ('on'/'off'); downstream sampling is the
    policy's own, renormalized trivially since the heads are separate. When
    ``config`` is given, its hash must match the checkpoint's.
    """
    if force_mode not in ("auto", "on", "off"):
        raise ValueError("force_mode must be auto, on or off")
    expected = config_hash(config.to_dict()) if config is not None else None
    ckpt = load_checkpoint(checkpoint_path, expected_config_hash=expected)
    cfg, params = _params_from_checkpoint(ckpt)

    forced = None
    if force_mode == "on":
        forced = ModeToken.TOOL_ON
    elif force_mode == "off":
        forced = ModeToken.TOOL_OFF

    kind_counts = {QueryKind.FINE: 0, QueryKind.GLOBAL: 0}
    kind_correct = {QueryKind.FINE: 0, QueryKind.GLOBAL: 0}
    kind_on = {QueryKind.FINE: 0, QueryKind.GLOBAL: 0}
    n_on = 0
    tool_calls_on: list[float] = []

    for e in range(episodes):
        seed = _episode_seed(eval_seed, 314159, e)
        grid, query = generate(seed, cfg.env, query_id=f"eval{e:06d}")
        rng = np.random.default_rng((eval_seed, 271828, e))
        t = sample_trajectory(
            params, query, grid, rng, cfg.env, force_mode=forced, greedy=not sample
        )
        kind_counts[query.kind] += 1
        if t.answer == query.ground_truth:
            kind_correct[query.kind] += 1
        if t.mode is ModeToken.TOOL_ON:
            kind_on[query.kind] += 1
            n_on += 1
            tool_calls_on.append(float(t.n_tool_calls))

    def ratio(a: int, b: int) -> float:
        return a / b if b else float("nan")

    nf, ng = kind_counts[QueryKind.FINE], kind_counts[QueryKind.GLOBAL]
    return EvalReport(
        episodes=episodes,
        force_mode=force_mode,
        sampled=sample,
        accuracy_fine=ratio(kind_correct[QueryKind.FINE], nf),
        accuracy_global=ratio(kind_correct[QueryKind.GLOBAL], ng),
        accuracy_overall=ratio(
            kind_correct[QueryKind.FINE] + kind_correct[QueryKind.GLOBAL], episodes
        ),
        f_on=ratio(n_on, episodes),
        p_tool_given_fine=ratio(kind_on[QueryKind.FINE], nf),
        p_tool_given_global=ratio(kind_on[QueryKind.GLOBAL], ng),
        mean_tool_calls_on=_mean(tool_calls_on),
    )


SWEEP_AXES = ("lambda_base", "penalty", "free_stage_at")


def sweep(base_cfg: TrainConfig, axis: str, values: list[float], out_dir: str | Path) -> Path:
    """One full run per value (shared seed), consolidated into sweep.csv.
    A failing cell records its error and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        if axis == "free_stage_at":
            cfg = replace(base_cfg, free_stage_at=int(value))
        else:
            cfg = replace(base_cfg, **{axis: value})
        cell_dir = out / f"{axis}_{value}"
        try:
            result = run(cfg, cell_dir)
            final = result.metrics[-1] if result.metrics else None
            row = {"axis": axis, "value": value, "status": "ok"}
            if final is not None:
                for c in METRICS_COLUMNS:
                    row[c] = getattr(final, c)
            rows.append(row)
        except Exception as exc:  # keep sweeping; the cell records its error
            rows.append({"axis": axis, "value": value, "status": f"error: {exc}"})

    path = out / "sweep.csv"
    cols = ["axis", "value", "status", *METRICS_COLUMNS]
    with path.open("w") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(c, "")) for c in cols) + "\n")
    return path
