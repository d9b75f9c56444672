"""Clip segmentation, viewpoint and expression anchor extraction."""
from .expression import (
    ExpressionCandidate,
    ExpressionSample,
    classifier_stream,
    expression_candidates,
    select_expression_clips,
    verify_expressions,
)
from .index import AnchorIndex, IndexEntry, PipelineConfig, anchor_latent, build_index
from .judge import JudgeClient, JudgeConfig, JudgeVerdict, MockJudgeClient, OllamaJudgeClient, Verdict, make_judge
from .runner import PipelineRunner
from .segmentation import ClipWindow, segment_clips
from .viewpoint import PoseSample, classify_viewpoint, pose_from_yaw

__all__ = [
    "AnchorIndex",
    "ClipWindow",
    "ExpressionCandidate",
    "ExpressionSample",
    "IndexEntry",
    "JudgeClient",
    "JudgeConfig",
    "JudgeVerdict",
    "MockJudgeClient",
    "OllamaJudgeClient",
    "PipelineConfig",
    "PipelineRunner",
    "PoseSample",
    "Verdict",
    "anchor_latent",
    "build_index",
    "classifier_stream",
    "classify_viewpoint",
    "expression_candidates",
    "make_judge",
    "pose_from_yaw",
    "segment_clips",
    "select_expression_clips",
    "verify_expressions",
]
