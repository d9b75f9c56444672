"""Cutting long sources into fixed-length training clips."""
import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

from ..errors import SourceTooShortError
from ..synth_world import CLIP_SECONDS, FPS, LATENT_FPS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClipWindow:
    """Half-open time window [start_s, end_s)."""

    start_s: float
    end_s: float

    def contains(self, time_s: float) -> bool:
        return self.start_s <= time_s < self.end_s

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def latent_range(self) -> Tuple[int, int]:
        start = int(round(self.start_s * LATENT_FPS))
        return start, start + int(round(self.duration_s * LATENT_FPS))


def segment_clips(duration_s: float, clip_s: float = CLIP_SECONDS, fps: int = FPS) -> List[ClipWindow]:
    """Consecutive non-overlapping clip_s windows; a trailing remainder is dropped."""
    if duration_s < clip_s:
        raise SourceTooShortError(f"Source of {duration_s}s is shorter than a {clip_s}s clip")
    frames = int(math.floor(duration_s * fps + 1e-9))
    per_clip = int(round(clip_s * fps))
    windows = [ClipWindow(i * clip_s, (i + 1) * clip_s) for i in range(frames // per_clip)]
    logger.debug(f"Segmented {duration_s}s into {len(windows)} clips of {clip_s}s")
    return windows