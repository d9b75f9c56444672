"""Expression-clip selection, candidate extraction and judge verification."""
import concurrent.futures
import dataclasses
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Set, Tuple

import numpy as np
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential_jitter

from ..errors import JudgeError, SourceTooShortError
from ..roles import EXPRESSIONS
from .judge import JudgeClient, Verdict
from .segmentation import ClipWindow

if TYPE_CHECKING:
    from ..synth_world import EpisodeRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExpressionSample:
    time_s: float
    label: str
    confidence: float

    def __post_init__(self):
        if self.label not in EXPRESSIONS:
            raise ValueError(f"Unknown expression label '{self.label}'")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"Confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class ExpressionCandidate:
    frame_id: str
    source_id: str
    time_s: float
    latent_index: int
    label: str


def frame_id(source_id: str, latent_index: int) -> str:
    return f"{source_id}@{latent_index}"


def effective_labels(stream: Sequence[ExpressionSample], window: ClipWindow, threshold: float = 0.5) -> Set[str]:
    return {s.label for s in stream if window.contains(s.time_s) and s.confidence >= threshold}


def select_expression_clips(
    stream: Sequence[ExpressionSample],
    windows: Sequence[ClipWindow],
    threshold: float = 0.5,
    min_labels: int = 2,
) -> List[ClipWindow]:
    """Windows showing at least min_labels distinct confident expressions."""
    if not stream:
        raise SourceTooShortError("Expression stream is empty")
    return [w for w in windows if len(effective_labels(stream, w, threshold)) >= min_labels]


def expression_candidates(
    stream: Sequence[ExpressionSample],
    window: ClipWindow,
    source_id: str,
    threshold: float = 0.5,
    latent_fps: float = 6.0,
) -> List[ExpressionCandidate]:
    """Middle sample of every contiguous run of one confident label inside window."""
    inside = [s for s in stream if window.contains(s.time_s)]
    runs: List[List[ExpressionSample]] = []
    for s in inside:
        if s.confidence < threshold:
            runs.append([])
            continue
        if runs and runs[-1] and runs[-1][-1].label == s.label:
            runs[-1].append(s)
        else:
            runs.append([s])

    out = []
    for run in runs:
        if not run:
            continue
        mid = run[len(run) // 2]
        k = int(round(mid.time_s * latent_fps))
        out.append(ExpressionCandidate(frame_id(source_id, k), source_id, mid.time_s, k, mid.label))
    return out


def classifier_stream(
    episode: "EpisodeRecord",
    corruption: float = 0.0,
    seed: int = 0,
) -> Tuple[List[ExpressionSample], List[str]]:
    """
    Simulated per-latent-frame expression classifier output.

    Exactly round(corruption * n) samples carry a wrong label. Returns the
    samples and the ground-truth labels.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, episode.seed, 7]))
    n = episode.latent_frames
    truth = [episode.latent_expression(k) for k in range(n)]
    labels = list(truth)
    wrong = rng.choice(n, size=int(round(corruption * n)), replace=False) if n else []
    for k in wrong:
        others = [e for e in EXPRESSIONS if e != truth[k]]
        labels[k] = others[int(rng.integers(len(others)))]
    confidence = rng.uniform(0.6, 1.0, size=n)
    samples = [ExpressionSample(episode.latent_time(k), labels[k], float(confidence[k])) for k in range(n)]
    return samples, truth


def _verify_one(candidate: ExpressionCandidate, judge: JudgeClient) -> Optional[ExpressionCandidate]:
    try:
        retryer = Retrying(
            stop=stop_after_attempt(2),
            wait=wait_exponential_jitter(initial=0.05, max=1.0),
            retry=retry_if_exception_type(JudgeError),
            reraise=True,
        )
        for attempt in retryer:
            with attempt:
                verdict = judge.judge(candidate.frame_id, candidate.label)
    except (JudgeError, RetryError) as e:
        logger.warning(f"Dropping {candidate.frame_id}: judge failed after retry ({e})")
        return None

    if verdict.verdict == Verdict.CONFIRM:
        return candidate
    if verdict.verdict == Verdict.RELABEL:
        if verdict.label not in EXPRESSIONS:
            logger.warning(f"Dropping {candidate.frame_id}: relabel to unknown category {verdict.label!r}")
            return None
        logger.debug(f"Relabelled {candidate.frame_id}: {candidate.label} -> {verdict.label}")
        return dataclasses.replace(candidate, label=verdict.label)
    logger.debug(f"Judge rejected {candidate.frame_id}")
    return None


def verify_expressions(
    candidates: Sequence[ExpressionCandidate],
    judge: JudgeClient,
    max_workers: int = 4,
) -> List[ExpressionCandidate]:
    """Keep confirmed, relabel corrected and drop rejected candidates; order is preserved."""
    if not candidates:
        return []
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        verified = list(executor.map(lambda c: _verify_one(c, judge), candidates))
    kept = [c for c in verified if c is not None]
    logger.info(f"Verified {len(kept)} of {len(candidates)} expression candidates")
    return kept
