"""Coded splitting tree protocol simulator with BTS and SICTA baselines."""
from .decoder import PeelingGraph, build_graph, is_complete, peel
from .harness import ExperimentConfig, ResultRow, run_sweep, summarize
from .inference import (
    DegreeProfile,
    LeafDegreePosterior,
    LeafObservation,
    Omega,
    brute_force_posterior,
    infer_profile,
    joint_weight,
    leaf_degree_posterior,
    omega,
)
from .model import (
    RunMetrics,
    SlotSignal,
    SlotStatus,
    SplitTree,
    TreeNode,
    UserPopulation,
    classify,
    derive_complement,
    split,
    transmit,
)
from .planner import (
    RewardFunction,
    SplitOrder,
    apply_split,
    plan_split_order,
    predict_children,
    score,
    select_tail_split,
)
from .protocols import (
    FeedbackPolicy,
    ProtocolResult,
    run_bts,
    run_cstp,
    run_estimation_phase,
    run_scheme,
    run_sicta,
)

__version__ = "0.1.0"
