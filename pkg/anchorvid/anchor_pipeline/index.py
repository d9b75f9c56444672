"""
Per-source anchor index and its manifest.

Manifest: JSON lines. The first line is a header
    {"type": "header", "source_id": ..., "duration_s": ..., "latent_frames": ...}
followed by one line per indexed frame
    {"type": "entry", "source_id", "time_s", "latent_index", "kind", "sub_index"}
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..errors import AnchorUnavailableError, ConfigError
from ..latent_world import LatentVideo
from ..roles import EXPRESSIONS, VIEWPOINTS, AnchorKind, AnchorRole
from ..synth_world import EpisodeRecord
from .expression import (
    classifier_stream,
    expression_candidates,
    frame_id,
    select_expression_clips,
    verify_expressions,
)
from .judge import JudgeClient, MockJudgeClient
from .segmentation import segment_clips
from .viewpoint import boundary_margin, classify_viewpoint, pose_stream

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    clip_seconds: float = 5.0
    viewpoint_margin_deg: float = 15.0
    expression_threshold: float = 0.5
    min_expression_labels: int = 2
    global_candidates: int = 10
    # fraction of classifier labels that are wrong before verification
    corruption: float = 0.3
    max_workers: int = 4

    def validate(self) -> "PipelineConfig":
        if not 0.0 <= self.corruption <= 1.0:
            raise ConfigError(f"pipeline.corruption must lie in [0, 1], got {self.corruption}")
        if not 0.0 <= self.expression_threshold <= 1.0:
            raise ConfigError("pipeline.expression_threshold must lie in [0, 1]")
        if self.viewpoint_margin_deg < 0 or self.viewpoint_margin_deg >= 45:
            raise ConfigError("pipeline.viewpoint_margin_deg must lie in [0, 45)")
        if self.global_candidates < 1 or self.min_expression_labels < 1:
            raise ConfigError("pipeline.global_candidates and min_expression_labels must be positive")
        return self


@dataclass(frozen=True)
class IndexEntry:
    source_id: str
    time_s: float
    latent_index: int
    kind: AnchorKind
    sub_index: int = 0

    @property
    def role(self) -> AnchorRole:
        return AnchorRole(self.kind, self.sub_index)

    def to_json(self) -> Dict:
        return {
            "type": "entry",
            "source_id": self.source_id,
            "time_s": self.time_s,
            "latent_index": self.latent_index,
            "kind": self.kind.value,
            "sub_index": self.sub_index,
        }

    @classmethod
    def from_json(cls, row: Dict) -> "IndexEntry":
        return cls(row["source_id"], row["time_s"], row["latent_index"], AnchorKind(row["kind"]), row["sub_index"])


@dataclass
class AnchorIndex:
    source_id: str
    duration_s: float
    latent_frames: int
    global_candidates: List[IndexEntry] = field(default_factory=list)
    viewpoints: Dict[int, List[IndexEntry]] = field(default_factory=dict)
    expressions: Dict[int, List[IndexEntry]] = field(default_factory=dict)

    def table(self, kind: AnchorKind) -> Dict[int, List[IndexEntry]]:
        if kind == AnchorKind.GLOBAL:
            return {0: self.global_candidates} if self.global_candidates else {}
        return self.viewpoints if kind == AnchorKind.VIEWPOINT else self.expressions

    def frames_for(self, role: AnchorRole) -> List[IndexEntry]:
        return list(self.table(role.kind).get(role.sub_index, []))

    def present(self, kind: AnchorKind) -> List[int]:
        """Sub-indices of kind with at least one indexed frame."""
        return sorted(i for i, entries in self.table(kind).items() if entries)

    def counts(self, kind: AnchorKind) -> Dict[int, int]:
        return {i: len(entries) for i, entries in self.table(kind).items() if entries}

    def require(self, kind: AnchorKind) -> None:
        if not self.present(kind):
            raise AnchorUnavailableError(f"{self.source_id} has no indexed {kind.value} frames")

    def entries(self) -> List[IndexEntry]:
        out = list(self.global_candidates)
        for table in (self.viewpoints, self.expressions):
            for i in sorted(table):
                out.extend(table[i])
        return out

    def add(self, entry: IndexEntry) -> None:
        if entry.kind == AnchorKind.GLOBAL:
            self.global_candidates.append(entry)
        else:
            self.table(entry.kind).setdefault(entry.sub_index, []).append(entry)

    def summary(self) -> Dict[str, int]:
        out = {"global": len(self.global_candidates)}
        out.update({f"viewpoint:{VIEWPOINTS[i]}": len(v) for i, v in sorted(self.viewpoints.items())})
        out.update({f"expression:{EXPRESSIONS[i]}": len(v) for i, v in sorted(self.expressions.items())})
        return out

    def write_manifest(self, path: str) -> None:
        header = {
            "type": "header",
            "source_id": self.source_id,
            "duration_s": self.duration_s,
            "latent_frames": self.latent_frames,
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for entry in self.entries():
                f.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read_manifest(cls, path: str) -> "AnchorIndex":
        with open(path, "r", encoding="utf-8") as f:
            rows = [json.loads(line) for line in f if line.strip()]
        if not rows or rows[0].get("type") != "header":
            raise ConfigError(f"{path} is not an anchor manifest")
        head = rows[0]
        index = cls(head["source_id"], head["duration_s"], head["latent_frames"])
        for row in rows[1:]:
            index.add(IndexEntry.from_json(row))
        return index


def anchor_latent(episode: EpisodeRecord, entry: IndexEntry) -> LatentVideo:
    """Global anchors are full frames, viewpoint anchors body crops, expression anchors head crops."""
    k = entry.latent_index
    if entry.kind == AnchorKind.GLOBAL:
        return episode.latents.frame_slice(k, k + 1)
    if entry.kind == AnchorKind.VIEWPOINT:
        return episode.body.frame_slice(k, k + 1)
    return episode.head.frame_slice(k, k + 1)


def quality_filter(episode: EpisodeRecord) -> bool:
    logger.debug(f"{episode.source_id}: quality filter passed")
    return True


def audio_sync_filter(episode: EpisodeRecord) -> bool:
    logger.debug(f"{episode.source_id}: audio sync filter passed")
    return True


def single_person_filter(episode: EpisodeRecord) -> bool:
    logger.debug(f"{episode.source_id}: single person filter passed")
    return True


# synthetic sources are clean; these stages keep the hook points
UPSTREAM_FILTERS: Tuple[Callable[[EpisodeRecord], bool], ...] = (
    quality_filter,
    audio_sync_filter,
    single_person_filter,
)


def ground_truth_judge(episode: EpisodeRecord) -> MockJudgeClient:
    truth = {frame_id(episode.source_id, k): episode.latent_expression(k) for k in range(episode.latent_frames)}
    return MockJudgeClient(truth=truth)


def build_index(
    episode: EpisodeRecord,
    judge: Optional[JudgeClient] = None,
    cfg: Optional[PipelineConfig] = None,
    seed: int = 0,
) -> AnchorIndex:
    """Index global candidates, viewpoint frames and verified expression frames of one episode."""
    cfg = (cfg or PipelineConfig()).validate()
    judge = judge or ground_truth_judge(episode)
    index = AnchorIndex(episode.source_id, episode.duration_s, episode.latent_frames)

    for check in UPSTREAM_FILTERS:
        if not check(episode):
            logger.warning(f"{episode.source_id} rejected by {check.__name__}")
            return index

    rng = np.random.default_rng(np.random.SeedSequence([seed, episode.seed, 3]))
    n_global = min(cfg.global_candidates, episode.latent_frames)
    for k in sorted(int(k) for k in rng.choice(episode.latent_frames, size=n_global, replace=False)):
        index.add(IndexEntry(episode.source_id, episode.latent_time(k), k, AnchorKind.GLOBAL))

    skipped = 0
    for k, pose in enumerate(pose_stream(episode)):
        if boundary_margin(pose) < cfg.viewpoint_margin_deg:
            skipped += 1
            continue
        sub = VIEWPOINTS.index(classify_viewpoint(pose))
        index.add(IndexEntry(episode.source_id, pose.time_s, k, AnchorKind.VIEWPOINT, sub))
    logger.debug(f"{episode.source_id}: {skipped} poses inside the angular margin skipped")

    stream, _ = classifier_stream(episode, cfg.corruption, seed)
    windows = segment_clips(episode.duration_s, cfg.clip_seconds)
    qualifying = select_expression_clips(stream, windows, cfg.expression_threshold, cfg.min_expression_labels)
    per_window = [
        expression_candidates(stream, window, episode.source_id, cfg.expression_threshold) for window in qualifying
    ]
    verified = verify_expressions([c for cands in per_window for c in cands], judge, cfg.max_workers)
    kept = {c.frame_id: c for c in verified}
    for cands in per_window:
        # a window still needs min_expression_labels distinct labels after verification
        window_kept = [kept[c.frame_id] for c in cands if c.frame_id in kept]
        if len({c.label for c in window_kept}) < cfg.min_expression_labels:
            continue
        for c in window_kept:
            if c.latent_index >= episode.latent_frames:
                continue
            index.add(
                IndexEntry(
                    episode.source_id, c.time_s, c.latent_index, AnchorKind.EXPRESSION, EXPRESSIONS.index(c.label)
                )
            )

    logger.info(f"Indexed {episode.source_id}: {index.summary()}")
    return index
