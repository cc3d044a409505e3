"""Desk-scale study of adaptive dual-mode tool invocation: a tagged
trajectory grammar, mode-specific rewards with adaptive mode balancing, and
group-relative policy optimization of a linear-softmax policy on a
synthetic zoom-world."""

from .amb import AmbSchedule, AmbState, coefficients, lambda_pair, observe_batch
from .grpo import (
    ClipConfig,
    OptimizerState,
    RolloutGroup,
    apply_update,
    normalize_advantages,
    objective_and_gradient,
    surrogate,
)
from .policy import FeatureDims, FeatureView, PolicyParams, grad_logprob, logprob, sample_trajectory
from .rewards import (
    ExactMatchJudge,
    Judge,
    JudgeVerdict,
    RewardBreakdown,
    judge_answer,
    score,
    score_tool_component,
)
from .trainer import EvalReport, IterationMetrics, TrainConfig, evaluate, run, sweep
from .trajectory import (
    ModeToken,
    ParseFailure,
    Query,
    QueryKind,
    TrajectoryRecord,
    Turn,
    ViolationCode,
    ZoomCall,
    ZoomObservation,
    grammar_conformant,
    parse,
    serialize,
)
from .zoomworld import EnvConfig, GridInstance, execute_zoom, generate, oracle_policy_value

__version__ = "0.1.0"
