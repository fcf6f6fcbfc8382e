"""Dual-branch traffic forecasting with selector-guided test-time adaptation."""

from .adapt import AdaptConfig, adapt_step, ranking_loss, run_inference
from .choices import ALL_TRANSFORMS, Choice, ChoiceSet, TransformKind, apply_transform, build_choice_set
from .data import Dataset, NormStats, ShiftSpec, SplitSpec, load_dataset, make_windows, synth_generate
from .experiment import ExperimentConfig, MetricsReport, ablate, metrics, run_experiment
from .predictor import BranchConfig, PretrainConfig, Predictor, pretrain
from .selector import (
    HeuristicSelector,
    LlmEndpointConfig,
    LlmSelector,
    OracleSelector,
    PromptContext,
    SelectionResult,
    build_prompt,
    parse_selection,
)
from .stgraph import RoadNetwork, STGraph, build_st_graph, normalize_adjacency

__version__ = "0.1.0"
