"""
Training-example assembly.

Clips are 5 s windows of a long source. Anchors are traced back to the whole
source: in superset mode they may come from outside the clip, in intra_only
mode they are restricted to it. Category draws are importance-weighted so
that anchor categories follow fixed target ratios.
"""
import concurrent.futures
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Collection, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .anchor_pipeline.index import AnchorIndex, IndexEntry, anchor_latent
from .anchor_pipeline.segmentation import ClipWindow
from .backbone import Conditions
from .errors import AnchorUnavailableError, ConfigError, ShapeError, SourceTooShortError
from .flow_match import Stage, TrainConfig
from .latent_world import AnchorSet, LatentVideo
from .roles import EXPRESSIONS, GLOBAL_ROLE, VIEWPOINTS, AnchorKind, AnchorRole
from .rope3d import MAX_PREFIX_FRAMES
from .synth_world import CLIP_LATENT_FRAMES, CLIP_SECONDS, LATENT_FPS, EpisodeRecord

logger = logging.getLogger(__name__)

# percent of anchors per category
VIEWPOINT_RATIOS = {"front": 29.6, "back": 17.3, "left": 27.9, "right": 25.2}
EXPRESSION_RATIOS = {
    "surprise": 15.0,
    "angry": 8.2,
    "disgust": 13.7,
    "fear": 10.1,
    "contempt": 13.6,
    "neutral": 8.1,
    "happy": 14.6,
    "sad": 16.7,
}


def ratio_table(kind: AnchorKind) -> Dict[int, float]:
    """Target fractions keyed by sub_index."""
    if kind == AnchorKind.VIEWPOINT:
        return {VIEWPOINTS.index(k): v / 100.0 for k, v in VIEWPOINT_RATIOS.items()}
    if kind == AnchorKind.EXPRESSION:
        return {EXPRESSIONS.index(k): v / 100.0 for k, v in EXPRESSION_RATIOS.items()}
    return {0: 1.0}


class Provenance(str, Enum):
    INTRA = "intra"
    EXTRA = "extra"


@dataclass
class SourceVideo:
    episode: EpisodeRecord
    index: AnchorIndex

    def __post_init__(self):
        if self.episode.duration_s < CLIP_SECONDS:
            raise SourceTooShortError(f"{self.episode.source_id} is shorter than one clip")

    @property
    def source_id(self) -> str:
        return self.episode.source_id

    @property
    def duration_s(self) -> float:
        return self.episode.duration_s

    @property
    def fps(self) -> int:
        return self.episode.fps


@dataclass(frozen=True, eq=False)
class ClipSample:
    window: ClipWindow
    start: int
    stop: int
    latents: LatentVideo

    def contains(self, latent_index: int) -> bool:
        return self.start <= latent_index < self.stop


@dataclass(eq=False)
class TrainingExample:
    source_id: str
    clip: LatentVideo
    first_frame: LatentVideo
    anchors: AnchorSet
    conditions: Conditions
    clip_sample: ClipSample
    provenance: Dict[AnchorRole, Provenance] = field(default_factory=dict)
    anchor_frames: Dict[AnchorRole, IndexEntry] = field(default_factory=dict)
    prefix: Optional[LatentVideo] = None

    def manifest_rows(self) -> List[Dict]:
        """One row per anchor: source id, frame time, kind, sub_index, provenance."""
        return [
            {
                "source_id": entry.source_id,
                "time_s": entry.time_s,
                "kind": role.kind.value,
                "sub_index": role.sub_index,
                "provenance": self.provenance[role].value,
            }
            for role, entry in sorted(self.anchor_frames.items())
        ]


def sample_clip(src: SourceVideo, rng: np.random.Generator, frames: int = CLIP_LATENT_FRAMES) -> ClipSample:
    """Uniform clip aligned to latent frames."""
    total = src.episode.latent_frames
    if total < frames:
        raise SourceTooShortError(f"{src.source_id} has {total} latent frames, a clip needs {frames}")
    start = int(rng.integers(0, total - frames + 1))
    window = ClipWindow(start / LATENT_FPS, start / LATENT_FPS + frames / LATENT_FPS)
    return ClipSample(window, start, start + frames, src.episode.latents.frame_slice(start, start + frames))


def balance_ratios(
    counts: Mapping[int, int],
    target: Mapping[int, float],
    strict: bool = True,
) -> Dict[int, float]:
    """
    Per-frame sampling weights w_c = p_c / n_c.

    p are the target ratios renormalized to sum to one. Drawing frames with
    probability w_c makes category c appear with probability p_c. In strict
    mode a positive-target category without frames is an error; otherwise
    the targets are renormalized over the categories that have frames.
    """
    support = {c: n for c, n in counts.items() if n > 0}
    missing = [c for c, p in target.items() if p > 0 and c not in support]
    if missing and strict:
        raise AnchorUnavailableError(f"Categories {missing} have positive target but no frames")
    usable = {c: p for c, p in target.items() if p > 0 and c in support}
    total = sum(usable.values())
    if total <= 0:
        raise AnchorUnavailableError("No category with frames has a positive target")
    return {c: (p / total) / support[c] for c, p in usable.items()}


def draw_frames(
    entries_by_category: Mapping[int, Sequence[IndexEntry]],
    target: Mapping[int, float],
    rng: np.random.Generator,
    size: int = 1,
    strict: bool = False,
) -> List[IndexEntry]:
    """Draw frames with the balanced per-frame weights (with replacement)."""
    counts = {c: len(v) for c, v in entries_by_category.items()}
    weights = balance_ratios(counts, target, strict)
    flat: List[IndexEntry] = []
    p: List[float] = []
    for c in sorted(weights):
        flat.extend(entries_by_category[c])
        p.extend([weights[c]] * counts[c])
    p_arr = np.asarray(p)
    picks = rng.choice(len(flat), size=size, p=p_arr / p_arr.sum())
    return [flat[int(i)] for i in np.atleast_1d(picks)]


def _kind_anchors(
    index: AnchorIndex,
    kind: AnchorKind,
    clip: ClipSample,
    mode: str,
    count: int,
    rng: np.random.Generator,
    balance: bool,
) -> Dict[int, IndexEntry]:
    """Pick up to count distinct categories of kind and one frame for each."""
    table = {c: list(v) for c, v in index.table(kind).items() if v}
    if mode == "intra_only":
        table = {c: [e for e in v if clip.contains(e.latent_index)] for c, v in table.items()}
        table = {c: v for c, v in table.items() if v}
    if not table:
        return {}

    target = ratio_table(kind) if balance else {c: 1.0 for c in table}
    chosen: Dict[int, IndexEntry] = {}
    pool = dict(table)
    while pool and len(chosen) < count:
        entry = draw_frames(pool, target, rng)[0]
        chosen[entry.sub_index] = entry
        del pool[entry.sub_index]

    if mode == "superset":
        extra = {c: [e for e in v if not clip.contains(e.latent_index)] for c, v in table.items()}
        extra = {c: v for c, v in extra.items() if v}
        if extra and all(clip.contains(e.latent_index) for e in chosen.values()):
            redraw = [c for c in chosen if c in extra]
            if redraw:
                c = redraw[int(rng.integers(len(redraw)))]
            else:
                # swap the last chosen category for one that exists outside the clip
                options = sorted(extra)
                c = options[int(rng.integers(len(options)))]
                del chosen[list(chosen)[-1]]
            frames = extra[c]
            chosen[c] = frames[int(rng.integers(len(frames)))]
    return chosen


def sample_anchors(
    src: SourceVideo,
    clip: ClipSample,
    mode: str,
    rng: np.random.Generator,
    kinds: Collection[AnchorKind] = tuple(AnchorKind),
    viewpoint_anchors: int = 2,
    expression_anchors: int = 2,
    balance: bool = True,
) -> Tuple[AnchorSet, Dict[AnchorRole, Provenance], Dict[AnchorRole, IndexEntry]]:
    """
    Anchors for one clip with their provenance.

    Global: uniform over the indexed candidates in superset mode, a uniform
    frame of the clip in intra_only mode. Viewpoint and expression: distinct
    categories drawn with balanced weights, one frame each.
    """
    if mode not in ("superset", "intra_only"):
        raise ConfigError(f"Unknown anchor mode '{mode}'")
    index = src.index
    picked: Dict[AnchorRole, IndexEntry] = {}

    if AnchorKind.GLOBAL in kinds:
        if mode == "superset":
            index.require(AnchorKind.GLOBAL)
            candidates = index.global_candidates
            picked[GLOBAL_ROLE] = candidates[int(rng.integers(len(candidates)))]
        else:
            k = int(rng.integers(clip.start, clip.stop))
            picked[GLOBAL_ROLE] = IndexEntry(src.source_id, src.episode.latent_time(k), k, AnchorKind.GLOBAL)

    for kind, count in ((AnchorKind.VIEWPOINT, viewpoint_anchors), (AnchorKind.EXPRESSION, expression_anchors)):
        if kind not in kinds:
            continue
        index.require(kind)
        for c, entry in _kind_anchors(index, kind, clip, mode, count, rng, balance).items():
            picked[AnchorRole(kind, c)] = entry

    anchors = AnchorSet.from_items((role, anchor_latent(src.episode, e)) for role, e in sorted(picked.items()))
    provenance = {
        role: Provenance.INTRA if clip.contains(e.latent_index) else Provenance.EXTRA for role, e in picked.items()
    }
    return anchors, provenance, picked


def attach_prefix(
    example: TrainingExample,
    src: SourceVideo,
    prob: float,
    rng: np.random.Generator,
) -> TrainingExample:
    """With probability prob, the 4 source latents right before the clip become the prefix."""
    draw = rng.random()
    start = example.clip_sample.start
    if draw >= prob or start < MAX_PREFIX_FRAMES:
        return dataclasses.replace(example, prefix=None)
    prefix = src.episode.latents.frame_slice(start - MAX_PREFIX_FRAMES, start)
    return dataclasses.replace(example, prefix=prefix)


def stage_kinds(stage: Stage, example_number: int) -> frozenset:
    """
    Anchor kinds of one example: I none, II global, III-mixed global plus
    viewpoint or expression alternating, III-joint all three.
    """
    if stage == Stage.I:
        return frozenset()
    if stage == Stage.II:
        return frozenset({AnchorKind.GLOBAL})
    if stage == Stage.III_MIXED:
        second = AnchorKind.VIEWPOINT if example_number % 2 == 0 else AnchorKind.EXPRESSION
        return frozenset({AnchorKind.GLOBAL, second})
    return frozenset(AnchorKind)


class ExampleBuilder:
    """Assembles deterministic training batches from indexed sources."""

    def __init__(
        self,
        sources: Sequence[SourceVideo],
        cfg: TrainConfig,
        max_workers: int = 4,
        balance: bool = True,
        max_text_tokens: int = 4,
    ):
        if not sources:
            raise ShapeError("ExampleBuilder needs at least one source")
        self.sources = list(sources)
        self.cfg = cfg
        self.max_workers = max_workers
        self.balance = balance
        self.max_text_tokens = max_text_tokens

    def _eligible(self, kinds: frozenset) -> List[SourceVideo]:
        needed = kinds - {AnchorKind.GLOBAL}
        return [s for s in self.sources if all(s.index.present(k) for k in needed)]

    def build(self, step: int, i: int) -> TrainingExample:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, step, i]))
        kinds = stage_kinds(self.cfg.stage, step * self.cfg.batch_size + i) & self.cfg.anchor_kinds
        eligible = self._eligible(kinds)
        if not eligible:
            names = ", ".join(sorted(k.value for k in kinds))
            raise AnchorUnavailableError(f"No source indexes all of: {names}")
        src = eligible[int(rng.integers(len(eligible)))]

        clip = sample_clip(src, rng)
        anchors, provenance, frames = sample_anchors(
            src,
            clip,
            self.cfg.anchor_mode,
            rng,
            kinds,
            self.cfg.viewpoint_anchors,
            self.cfg.expression_anchors,
            self.balance,
        )
        first_frame = clip.latents.frame_slice(0, 1)
        conditions = Conditions(
            first_frame=first_frame,
            text_ids=src.episode.text_ids(clip.window.start_s, clip.window.end_s, self.max_text_tokens),
            audio=src.episode.audio_clip(clip.window.start_s),
            anchors=anchors,
        )
        example = TrainingExample(
            source_id=src.source_id,
            clip=clip.latents,
            first_frame=first_frame,
            anchors=anchors,
            conditions=conditions,
            clip_sample=clip,
            provenance=provenance,
            anchor_frames=frames,
        )
        if self.cfg.allows_prefix:
            example = attach_prefix(example, src, self.cfg.prefix_prob, rng)
        return example

    def batch(self, step: int) -> List[TrainingExample]:
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            return list(executor.map(lambda i: self.build(step, i), range(self.cfg.batch_size)))
