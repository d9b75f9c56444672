"""
Flow-matching sampler with classifier-free guidance and chunk-wise long
generation.

t runs from 0 (noise) to 1 (data). Each chunk after the first is denoised
with the previous chunk's last 4 clean latents as a fixed prefix, and the
first 4 frames of the new chunk are cross-faded with that tail. Audio and
text conditioning follow the chunk through time; anchors stay fixed.
"""
import concurrent.futures
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .backbone import Conditions
from .core_math import ensure_finite
from .errors import ConfigError, ShapeError
from .latent_world import LatentVideo
from .roles import GLOBAL_ROLE
from .rope3d import MAX_PREFIX_FRAMES
from .synth_world import LATENT_FPS, Command, attention_masses, audio_window, command_ids

logger = logging.getLogger(__name__)

BLEND_WEIGHTS: Tuple[float, ...] = (1.0, 0.67, 0.33, 0.0)

StepCallback = Callable[[int, float, LatentVideo, Dict[str, float]], None]


@dataclass
class SampleConfig:
    steps: int = 30
    cfg_scale: float = 3.5
    seed: int = 0
    chunk_len: int = 30
    overlap: int = MAX_PREFIX_FRAMES
    # evaluate the two guidance branches in two threads
    parallel_cfg: bool = False

    def validate(self) -> "SampleConfig":
        if self.steps < 1:
            raise ConfigError(f"sample.steps must be at least 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ConfigError(f"sample.cfg_scale must be non-negative, got {self.cfg_scale}")
        if self.overlap != MAX_PREFIX_FRAMES:
            raise ConfigError(f"sample.overlap must equal the prefix length {MAX_PREFIX_FRAMES}")
        if self.chunk_len <= self.overlap:
            raise ConfigError(f"sample.chunk_len {self.chunk_len} must exceed the overlap {self.overlap}")
        return self


@dataclass(frozen=True)
class ChunkPlan:
    total: int
    chunk_len: int
    overlap: int
    starts: Tuple[int, ...]
    weights: Tuple[float, ...] = BLEND_WEIGHTS

    def __post_init__(self):
        w = self.weights
        if len(w) != self.overlap:
            raise ConfigError(f"{len(w)} blend weights for an overlap of {self.overlap}")
        if w[0] != 1.0 or w[-1] != 0.0 or any(a < b for a, b in zip(w, w[1:])):
            raise ConfigError(f"Blend weights must fall from 1 to 0, got {w}")

    @property
    def n_chunks(self) -> int:
        return len(self.starts)

    @property
    def ranges(self) -> List[Tuple[int, int]]:
        return [(s, min(s + self.chunk_len, self.total)) for s in self.starts]


def plan_chunks(
    total_latent_frames: int,
    chunk_len: int = 30,
    n: int = MAX_PREFIX_FRAMES,
    weights: Sequence[float] = BLEND_WEIGHTS,
) -> ChunkPlan:
    """Chunk k starts at k * (chunk_len - n); a chunk is added only if it produces a new frame."""
    if chunk_len <= n:
        raise ConfigError(f"chunk_len {chunk_len} must exceed the overlap {n}")
    if total_latent_frames < chunk_len:
        raise ConfigError(f"Cannot plan {total_latent_frames} frames with chunks of {chunk_len}")
    stride = chunk_len - n
    starts = [0]
    while starts[-1] + stride + n < total_latent_frames:
        starts.append(starts[-1] + stride)
    return ChunkPlan(total_latent_frames, chunk_len, n, tuple(starts), tuple(weights))


def frames_for_minutes(minutes: float, fps: int = 24, compression: int = 4) -> int:
    return int(round(minutes * 60.0 * fps / compression))


def cfg_combine(u_uncond: LatentVideo, u_cond: LatentVideo, scale: float) -> LatentVideo:
    """u_uncond + scale * (u_cond - u_uncond)."""
    if u_uncond.dims != u_cond.dims:
        raise ShapeError(f"Guidance branches differ in shape: {u_uncond.dims} vs {u_cond.dims}")
    return LatentVideo(u_uncond.data + scale * (u_cond.data - u_uncond.data))


def blend_overlap(prev_tail: LatentVideo, next_head: LatentVideo, w: Sequence[float] = BLEND_WEIGHTS) -> LatentVideo:
    """Frame k = w[k] * prev_tail[k] + (1 - w[k]) * next_head[k]."""
    if prev_tail.dims != next_head.dims or prev_tail.frames != len(w):
        raise ShapeError(f"Cannot blend {prev_tail.dims} with {next_head.dims} using {len(w)} weights")
    weights = torch.tensor(list(w), dtype=prev_tail.data.dtype).reshape(-1, 1, 1, 1)
    return LatentVideo(weights * prev_tail.data + (1.0 - weights) * next_head.data.to(prev_tail.data.dtype))


def _model_dtype(model: Any) -> torch.dtype:
    return getattr(model, "dtype", torch.float32)


def _conditional_branch(
    model: Any, x_t: LatentVideo, t: float, conds: Conditions, prefix: Optional[LatentVideo], record: bool
) -> Tuple[LatentVideo, Dict[str, float]]:
    if not record:
        return model(x_t, t, conds, prefix=prefix), {}
    u, attention = model.forward_with_attention(x_t, t, conds, prefix=prefix)
    return u, attention_masses(attention) if attention is not None else {}


def denoise_chunk(
    model: Any,
    conds: Conditions,
    frames: int,
    cfg: SampleConfig,
    prefix: Optional[LatentVideo] = None,
    seed: Optional[int] = None,
    on_step: Optional[StepCallback] = None,
    record_attention: bool = False,
) -> LatentVideo:
    """
    Euler-integrate the guided velocity from t = 0 to 1 in cfg.steps steps.

    model(x_t, t, conds, prefix=...) returns the velocity; with
    record_attention the conditional branch goes through
    model.forward_with_attention instead. The prefix is passed unchanged to
    every evaluation.
    """
    cfg.validate()
    _, h, w, c = conds.first_frame.dims
    dtype = _model_dtype(model)
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    x = torch.randn(frames, h, w, c, generator=gen, dtype=dtype)
    uncond = conds.unconditional()
    dt = 1.0 / cfg.steps
    guided = cfg.cfg_scale != 1.0
    executor = concurrent.futures.ThreadPoolExecutor(max_workers=2) if cfg.parallel_cfg and guided else None

    try:
        for i in range(cfg.steps):
            t = i / cfg.steps
            x_t = LatentVideo(x)
            with torch.no_grad():
                if executor is not None:
                    cond_future = executor.submit(_conditional_branch, model, x_t, t, conds, prefix, record_attention)
                    u_uncond = model(x_t, t, uncond, prefix=prefix)
                    u_cond, masses = cond_future.result()
                else:
                    u_cond, masses = _conditional_branch(model, x_t, t, conds, prefix, record_attention)
                    u_uncond = model(x_t, t, uncond, prefix=prefix) if guided else u_cond
                u = cfg_combine(u_uncond, u_cond, cfg.cfg_scale) if guided else u_cond
                x = ensure_finite(x + dt * u.data.to(dtype), f"denoising state at step {i}")
            if on_step is not None:
                on_step(i, t, LatentVideo(x), masses)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    return LatentVideo(x)


@dataclass
class GenerationResult:
    video: LatentVideo
    chunks: List[LatentVideo]
    plan: ChunkPlan
    report: Dict[str, Any] = field(default_factory=dict)


def chunk_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def chunk_conditions(
    conds: Conditions,
    start: int,
    stop: int,
    commands: Optional[Sequence[Command]] = None,
    max_text_tokens: int = 4,
) -> Conditions:
    """
    Conditions for the latent frames [start, stop).

    conds.audio holds the stream of the whole generation from frame 0; the
    chunk gets its window from start on, zero-padded to a full clip. Text
    comes from the commands overlapping the chunk's time range, or stays
    conds.text_ids without commands. First frame and anchors are shared.
    """
    start_s, end_s = start / LATENT_FPS, stop / LATENT_FPS
    audio = conds.audio if conds.audio is None else audio_window(conds.audio.data, start_s)
    text_ids = conds.text_ids if commands is None else command_ids(commands, start_s, end_s, max_text_tokens)
    return Conditions(first_frame=conds.first_frame, text_ids=text_ids, audio=audio, anchors=conds.anchors)


def generate_long(
    model: Any,
    conds: Conditions,
    total_latent_frames: int,
    cfg: SampleConfig,
    input_as_global: bool = True,
    record_attention: bool = True,
    progress: bool = True,
    commands: Optional[Sequence[Command]] = None,
) -> GenerationResult:
    """
    Generate total_latent_frames latents chunk by chunk.

    Each chunk is conditioned on its own slice of the audio stream and of
    the commands (see chunk_conditions); the same anchor set is attached to
    every chunk. With input_as_global the input frame is used as the global
    anchor when none is given.
    """
    cfg.validate()
    plan = plan_chunks(total_latent_frames, cfg.chunk_len, cfg.overlap)
    if input_as_global and conds.anchors.global_anchor is None:
        anchors = conds.anchors.from_items(conds.anchors.items())
        anchors.put(GLOBAL_ROLE, conds.first_frame)
        conds = conds.with_anchors(anchors)
    record_attention = record_attention and getattr(getattr(model, "cfg", None), "probe_block", None) is not None
    max_text_tokens = getattr(getattr(model, "cfg", None), "max_text_tokens", 4)

    _, h, w, c = conds.first_frame.dims
    out = torch.zeros(total_latent_frames, h, w, c, dtype=_model_dtype(model))
    chunks: List[LatentVideo] = []
    chunk_reports = []
    n = plan.overlap

    for k, (start, stop) in enumerate(tqdm(plan.ranges, desc="chunks", disable=not progress)):
        prefix = None if k == 0 else chunks[-1].frame_slice(chunks[-1].frames - n, chunks[-1].frames)
        sums: Dict[str, float] = defaultdict(float)
        counted = [0]

        def collect(i: int, t: float, x: LatentVideo, masses: Dict[str, float]) -> None:
            if masses:
                counted[0] += 1
                for name, value in masses.items():
                    sums[name] += value

        local = chunk_conditions(conds, start, stop, commands, max_text_tokens)
        chunk = denoise_chunk(model, local, stop - start, cfg, prefix, chunk_seed(cfg.seed, k), collect, record_attention)
        chunks.append(chunk)
        if k == 0:
            out[start:stop] = chunk.data
        else:
            prev = chunks[-2]
            tail = prev.frame_slice(prev.frames - n, prev.frames)
            out[start:start + n] = blend_overlap(tail, chunk.frame_slice(0, n), plan.weights).data
            out[start + n:stop] = chunk.data[n:]

        chunk_reports.append(
            {
                "index": k,
                "start": start,
                "stop": stop,
                "steps": cfg.steps,
                "prefix": prefix is not None,
                "text_ids": list(local.text_ids),
                "attention": {name: s / counted[0] for name, s in sums.items()} if counted[0] else {},
            }
        )
        logger.debug(f"Chunk {k} [{start}, {stop}) done")

    report = {
        "total_latent_frames": total_latent_frames,
        "chunk_len": plan.chunk_len,
        "overlap": plan.overlap,
        "n_chunks": plan.n_chunks,
        "blend_weights": list(plan.weights),
        "steps": cfg.steps,
        "cfg_scale": cfg.cfg_scale,
        "seed": cfg.seed,
        "anchors": [role.name for role in conds.anchors.roles()],
        "chunks": chunk_reports,
    }
    logger.info(f"Generated {total_latent_frames} latent frames in {plan.n_chunks} chunks")
    return GenerationResult(LatentVideo(out), chunks, plan, report)
