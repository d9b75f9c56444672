"""
Ablation arms.

Every arm trains from the same seed for the same number of steps, generates
the same held-out turn-around episode and reports one metric schema. An idle
episode of the same character and anchors gives the attention baseline.
acceptance_checks turns a set of arm results into pass/fail verdicts.
"""
import copy
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError

if TYPE_CHECKING:
    from .config import RunConfig
    from .superset_sampler import SourceVideo
    from .synth_world import Command

logger = logging.getLogger(__name__)

ARMS = ("full", "no_global", "no_view_expr", "no_superset", "no_rwc")

METRIC_KEYS = (
    "arm",
    "steps",
    "final_loss",
    "mse_full",
    "mse_back_texture",
    "mse_head",
    "mse_background",
    "pose_copy_score",
    "background_drift",
    "drift_per_chunk",
    "attention_global",
    "attention_back",
    "attention_back_turn",
    "attention_back_idle",
    "attention_back_ratio",
    "attention_global_per_chunk",
    "attention_global_trend",
)

# thresholds of the direction-level acceptance checks
MSE_RATIO_LIMIT = 0.6
DRIFT_RATIO_LIMIT = 0.5
TURN_MASS_RATIO = 1.5
TREND_WINDOW = 3


@dataclass
class AblationConfig:
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 4
    stage: str = "III-joint"
    eval_chunks: int = 10
    eval_seed_offset: int = 1000

    def validate(self) -> "AblationConfig":
        if self.steps < 0 or self.batch_size < 1 or self.eval_chunks < 1:
            raise ConfigError("ablation.steps, batch_size and eval_chunks must be positive")
        return self


def apply_arm(cfg: "RunConfig", arm: str) -> Tuple["RunConfig", bool]:
    """
    Return a modified copy of cfg for arm and whether the input frame serves
    as global anchor at generation time.
    """
    if arm not in ARMS:
        raise ConfigError(f"Unknown ablation arm '{arm}', expected one of {ARMS}")
    out = copy.deepcopy(cfg)
    out.train.stage = type(out.train.stage)(cfg.ablation.stage)
    out.train.steps = cfg.ablation.steps
    out.train.lr = cfg.ablation.lr
    out.train.batch_size = cfg.ablation.batch_size
    use_global = True
    if arm == "no_global":
        out.train.anchors = ["viewpoint", "expression"]
        use_global = False
    elif arm == "no_view_expr":
        out.train.anchors = ["global"]
    elif arm == "no_superset":
        out.train.anchor_mode = "intra_only"
    elif arm == "no_rwc":
        out.rope = type(out.rope).collapsed_from(out.rope)
    out.train.validate()
    return out, use_global


def chunk_masses(chunk_reports: Sequence[Dict[str, Any]], name: str) -> List[float]:
    """Per-chunk mean attention mass to segment name; chunks without a record count as 0."""
    return [float(c["attention"].get(name, 0.0)) if c.get("attention") else 0.0 for c in chunk_reports]


def commanded_chunks(
    chunk_reports: Sequence[Dict[str, Any]], commands: Sequence["Command"], name: str = "TURN_AROUND"
) -> List[int]:
    """Indices of the chunks whose time range overlaps a command called name."""
    from .synth_world import LATENT_FPS

    spans = [(c.start_s, c.end_s) for c in commands if c.name == name]
    out = []
    for c in chunk_reports:
        start_s, end_s = c["start"] / LATENT_FPS, c["stop"] / LATENT_FPS
        if any(a < end_s and b > start_s for a, b in spans):
            out.append(c["index"])
    return out


def trend_gap(per_chunk: Sequence[float], window: int = TREND_WINDOW) -> float:
    """Mean of the last window values minus the mean of the first; window shrinks for short runs."""
    if not per_chunk:
        return 0.0
    k = min(window, len(per_chunk))
    return float(np.mean(per_chunk[-k:]) - np.mean(per_chunk[:k]))


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def run_arm(cfg: "RunConfig", arm: str, sources: Sequence["SourceVideo"], progress: bool = False) -> Dict[str, Any]:
    """Train one arm and evaluate it; returns a dict with METRIC_KEYS."""
    from .anchor_pipeline.index import build_index
    from .backbone import AudioFeatures, Conditions, DiTModel
    from .flow_match import Trainer
    from .inference_engine import generate_long
    from .roles import AnchorKind, AnchorRole
    from .superset_sampler import ExampleBuilder, SourceVideo, sample_anchors, sample_clip
    from .synth_world import (
        EpisodeRecord,
        background_drift,
        estimate_yaw_trajectory,
        eval_region_mse,
        gen_episode,
        pose_copy_score,
    )

    arm_cfg, use_global = apply_arm(cfg, arm)
    torch.manual_seed(cfg.seed)
    model = DiTModel(arm_cfg.model, arm_cfg.rope)
    trainer = Trainer(model, arm_cfg.train)
    builder = ExampleBuilder(
        sources, arm_cfg.train, max_workers=cfg.max_workers, max_text_tokens=arm_cfg.model.max_text_tokens
    )
    history = trainer.fit(builder.batch, progress=progress)
    model.eval()

    episode = gen_episode(cfg.seed + cfg.ablation.eval_seed_offset, cfg.data.duration_s, "turn_around")
    src = SourceVideo(episode, build_index(episode, cfg=cfg.pipeline, seed=cfg.seed))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    clip = sample_clip(src, rng)
    kinds = {k for k in arm_cfg.train.anchor_kinds - {AnchorKind.GLOBAL} if src.index.present(k)}
    anchors, _, frames = sample_anchors(src, clip, "superset", rng, kinds, 4, 2)
    chunk_len, n = arm_cfg.sample.chunk_len, arm_cfg.sample.overlap
    total = min(chunk_len + (cfg.ablation.eval_chunks - 1) * (chunk_len - n), episode.latent_frames)

    def generate(ep: EpisodeRecord):
        conds = Conditions(
            first_frame=ep.latents.frame_slice(0, 1),
            text_ids=ep.text_ids(0.0, ep.latent_time(chunk_len), arm_cfg.model.max_text_tokens),
            audio=AudioFeatures(ep.audio),
            anchors=anchors,
        )
        return generate_long(
            model, conds, total, arm_cfg.sample, input_as_global=use_global, progress=progress, commands=ep.commands
        )

    first = episode.latents.frame_slice(0, 1)
    result = generate(episode)
    video = result.video.to(torch.float32)
    # same character and anchors, no commanded motion
    idle = gen_episode(episode.seed, cfg.data.duration_s, "idle", character=episode.character)
    idle_result = generate(idle)

    back_role = AnchorRole.viewpoint("back")
    if back_role in frames:
        anchor_yaw = episode.latent_yaw(frames[back_role].latent_index)
    elif frames:
        anchor_yaw = episode.latent_yaw(sorted(frames.items())[0][1].latent_index)
    else:
        anchor_yaw = 0.0
    yaws = estimate_yaw_trajectory(video, episode.character)
    commanded = episode.commanded_yaws(0, total)
    drift = background_drift(video, first, result.plan.ranges)

    chunks = result.report["chunks"]
    back = chunk_masses(chunks, back_role.name)
    turning = commanded_chunks(chunks, episode.commands)
    back_turn = _mean([back[i] for i in turning]) if turning else _mean(back)
    back_idle = _mean(chunk_masses(idle_result.report["chunks"], back_role.name))
    global_per_chunk = chunk_masses(chunks, "global")

    metrics = {
        "arm": arm,
        "steps": trainer.step,
        "final_loss": history[-1]["loss"] if history else None,
        "mse_full": eval_region_mse(video, episode, "full"),
        "mse_back_texture": eval_region_mse(video, episode, "back_texture"),
        "mse_head": eval_region_mse(video, episode, "head"),
        "mse_background": eval_region_mse(video, episode, "background"),
        "pose_copy_score": pose_copy_score(yaws, anchor_yaw, commanded),
        "background_drift": float(np.mean(drift)),
        "drift_per_chunk": drift,
        "attention_global": _mean(global_per_chunk),
        "attention_back": _mean(back),
        "attention_back_turn": back_turn,
        "attention_back_idle": back_idle,
        "attention_back_ratio": back_turn / back_idle if back_idle > 0.0 else None,
        "attention_global_per_chunk": global_per_chunk,
        "attention_global_trend": trend_gap(global_per_chunk),
    }
    logger.info(f"Ablation {arm}: back-region MSE {metrics['mse_back_texture']:.4f}")
    return metrics


def compare_arms(results: List[Dict[str, Any]], baseline: str = "full") -> Dict[str, Dict[str, float]]:
    """Per-arm differences against the baseline for every scalar metric."""
    by_arm = {r["arm"]: r for r in results}
    if baseline not in by_arm:
        return {}
    base = by_arm[baseline]
    out = {}
    for arm, r in by_arm.items():
        if arm == baseline:
            continue
        out[arm] = {
            k: r[k] - base[k]
            for k in METRIC_KEYS
            if isinstance(r.get(k), float) and isinstance(base.get(k), float)
        }
    return out


def _check(description: str, value: Optional[float], limit: float, passed: Optional[bool]) -> Dict[str, Any]:
    return {"description": description, "value": value, "limit": limit, "passed": passed}


def _ratio(num: Optional[float], den: Optional[float]) -> Optional[float]:
    if num is None or den is None or den <= 0.0:
        return None
    return num / den


def acceptance_checks(results: List[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """
    Pass/fail of the direction-level ablation checks.

    passed is None when an arm a check compares against was not run or a
    ratio is undefined.
    """
    by_arm = {r["arm"]: r for r in results}
    full = by_arm.get("full")

    def metric(arm: str, key: str) -> Optional[float]:
        r = by_arm.get(arm)
        return None if r is None else r.get(key)

    mse = _ratio(metric("full", "mse_back_texture"), metric("no_view_expr", "mse_back_texture"))
    gap = None
    if full is not None and "no_superset" in by_arm:
        gap = metric("no_superset", "pose_copy_score") - metric("full", "pose_copy_score")
    drift = _ratio(metric("full", "background_drift"), metric("no_global", "background_drift"))
    turn = metric("full", "attention_back_ratio")
    trend = metric("full", "attention_global_trend")

    checks = {
        "anchor_utility": _check(
            "back-region MSE of full / no_view_expr", mse, MSE_RATIO_LIMIT, None if mse is None else mse <= MSE_RATIO_LIMIT
        ),
        "superset": _check(
            "pose-copy score of no_superset minus full", gap, 0.0, None if gap is None else gap > 0.0
        ),
        "global_drift": _check(
            "background drift of full / no_global", drift, DRIFT_RATIO_LIMIT, None if drift is None else drift <= DRIFT_RATIO_LIMIT
        ),
        "attention_turn": _check(
            "back-anchor mass during turns / idle mass (full)", turn, TURN_MASS_RATIO, None if turn is None else turn >= TURN_MASS_RATIO
        ),
        "attention_trend": _check(
            f"global-anchor mass, last {TREND_WINDOW} chunks minus first {TREND_WINDOW} (full)",
            trend,
            0.0,
            None if trend is None else trend >= 0.0,
        ),
    }
    for name, check in checks.items():
        if check["passed"] is False:
            logger.warning(f"Acceptance check {name} failed: {check['description']} = {check['value']}")
    return checks


def format_checks(checks: Dict[str, Dict[str, Any]]) -> str:
    """Markdown table of acceptance_checks output."""
    lines = ["# Ablation acceptance", "", "| check | value | limit | result |", "| --- | --- | --- | --- |"]
    for name, c in checks.items():
        value = "n/a" if c["value"] is None else f"{c['value']:.4f}"
        result = {True: "pass", False: "FAIL", None: "not run"}[c["passed"]]
        lines.append(f"| {name}: {c['description']} | {value} | {c['limit']} | {result} |")
    return "\n".join(lines) + "\n"
