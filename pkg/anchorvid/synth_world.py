"""
Procedural desk-scale characters and episodes with ground truth, plus the
evaluation metrics and the attention probe.

The camera is fixed at the origin looking along +z. A character at yaw psi
faces (sin psi, 0, -cos psi): yaw 0 looks into the camera (front), 90 shows
its left side, 180 its back and 270 its right side.
"""
import concurrent.futures
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from . import core_math
from .backbone import TEXT_VOCAB, AudioFeatures, AttentionRecord, Conditions, DiTModel, text_id
from .errors import ConfigError, ProbeUnavailableError, ShapeError, SourceTooShortError
from .latent_world import LATENT_MAGIC, LatentVideo, TokenSequence
from .roles import EXPRESSIONS, VIEWPOINTS, AnchorRole, SegmentKind

logger = logging.getLogger(__name__)

FPS = 24
COMPRESSION = 4
LATENT_FPS = FPS / COMPRESSION
CLIP_SECONDS = 5
CLIP_LATENT_FRAMES = int(CLIP_SECONDS * LATENT_FPS)
AUDIO_RATE = 19.2
AUDIO_FRAMES_PER_CLIP = int(round(AUDIO_RATE * CLIP_SECONDS))
AUDIO_DIM = 8

LATENT_HEIGHT, LATENT_WIDTH, LATENT_CHANNELS = 8, 8, 4
BODY_COLS = (1, 7)
HEAD_ROWS = (0, 4)
HEAD_COLS = (2, 6)

CANONICAL_YAWS = {"front": 0.0, "left": 90.0, "back": 180.0, "right": 270.0}
# going counter-clockwise in yaw
_YAW_RING = ("front", "left", "back", "right")
TRANSITION_HALF_WIDTH = 15.0

REGIONS = ("full", "back_texture", "head", "background")
SCENARIOS = ("idle", "turn_around", "expression_cycle", "mixed")

# fixed command signatures; IDLE and the null token are silent
_SIGNATURES = np.random.default_rng(20240917).normal(size=(len(TEXT_VOCAB), AUDIO_DIM))
_SIGNATURES[[0, TEXT_VOCAB.index("IDLE")]] = 0.0


def region_mask(region: str, height: int = LATENT_HEIGHT, width: int = LATENT_WIDTH) -> torch.Tensor:
    """Boolean H x W mask; head, back_texture and background partition full."""
    mask = torch.zeros(height, width, dtype=torch.bool)
    if region == "full":
        mask[:] = True
    elif region == "head":
        mask[HEAD_ROWS[0]:HEAD_ROWS[1], HEAD_COLS[0]:HEAD_COLS[1]] = True
    elif region == "back_texture":
        mask[:, BODY_COLS[0]:BODY_COLS[1]] = True
        mask[HEAD_ROWS[0]:HEAD_ROWS[1], HEAD_COLS[0]:HEAD_COLS[1]] = False
    elif region == "background":
        mask[:] = True
        mask[:, BODY_COLS[0]:BODY_COLS[1]] = False
    else:
        raise ConfigError(f"Unknown region '{region}', expected one of {REGIONS}")
    return mask


@dataclass(frozen=True, eq=False)
class CharacterSpec:
    """Body textures per viewpoint (VIEWPOINTS order), head textures per expression, background."""

    seed: int
    body: torch.Tensor
    heads: torch.Tensor
    background: torch.Tensor

    def body_texture(self, viewpoint: str) -> torch.Tensor:
        return self.body[VIEWPOINTS.index(viewpoint)]


def _pairwise_min_mse(textures: np.ndarray) -> float:
    n = textures.shape[0]
    return min(float(np.mean((textures[i] - textures[j]) ** 2)) for i in range(n) for j in range(i + 1, n))


def gen_character(
    seed: int,
    floor: float = 0.5,
    max_retries: int = 16,
    channels: int = LATENT_CHANNELS,
) -> CharacterSpec:
    """Deterministic character for seed; body textures are resampled until pairwise MSE >= floor."""
    rng = np.random.default_rng(seed)
    body_shape = (len(VIEWPOINTS), LATENT_HEIGHT, BODY_COLS[1] - BODY_COLS[0], channels)
    for attempt in range(max_retries):
        body = rng.normal(size=body_shape)
        if _pairwise_min_mse(body) >= floor:
            break
        logger.debug(f"Character {seed}: body textures below floor on attempt {attempt + 1}")
    else:
        raise ConfigError(f"Texture floor {floor} unreachable for seed {seed} after {max_retries} tries")
    heads = rng.normal(size=(len(EXPRESSIONS), HEAD_ROWS[1] - HEAD_ROWS[0], HEAD_COLS[1] - HEAD_COLS[0], channels))
    background = 0.5 * rng.normal(size=(LATENT_HEIGHT, LATENT_WIDTH, channels))

    def as_tensor(a: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(a.astype(np.float32))

    return CharacterSpec(seed, as_tensor(body), as_tensor(heads), as_tensor(background))


def body_weights(yaw: float) -> np.ndarray:
    """Blend weights over VIEWPOINTS; linear cross-fade within 15 degrees of 45/135/225/315."""
    yaw = yaw % 360.0
    i = int(yaw // 90.0) % 4
    offset = yaw - 90.0 * (yaw // 90.0)
    near, far = _YAW_RING[i], _YAW_RING[(i + 1) % 4]
    lo, hi = 45.0 - TRANSITION_HALF_WIDTH, 45.0 + TRANSITION_HALF_WIDTH
    w_far = 0.0 if offset <= lo else 1.0 if offset >= hi else (offset - lo) / (hi - lo)
    weights = np.zeros(len(VIEWPOINTS))
    weights[VIEWPOINTS.index(near)] += 1.0 - w_far
    weights[VIEWPOINTS.index(far)] += w_far
    return weights


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    full: torch.Tensor
    body: torch.Tensor
    head: torch.Tensor


def render_latent(
    c: CharacterSpec,
    yaw: float,
    expression: Union[str, int],
    background: Optional[torch.Tensor] = None,
) -> RenderedFrame:
    """Composite body and head textures onto the background; pure in its inputs."""
    if not 0.0 <= yaw < 360.0:
        raise ValueError(f"yaw must lie in [0, 360), got {yaw}")
    expr = EXPRESSIONS.index(expression) if isinstance(expression, str) else int(expression)
    weights = body_weights(yaw)
    body = torch.zeros_like(c.body[0])
    for v, w in enumerate(weights):
        if w > 0.0:
            body = body + float(w) * c.body[v]

    full = (c.background if background is None else background).clone()
    full[:, BODY_COLS[0]:BODY_COLS[1]] = body
    full[HEAD_ROWS[0]:HEAD_ROWS[1], HEAD_COLS[0]:HEAD_COLS[1]] = c.heads[expr]
    return RenderedFrame(
        full=full,
        body=full[:, BODY_COLS[0]:BODY_COLS[1]].clone(),
        head=full[HEAD_ROWS[0]:HEAD_ROWS[1], HEAD_COLS[0]:HEAD_COLS[1]].clone(),
    )


@dataclass(frozen=True)
class Command:
    start_s: float
    end_s: float
    name: str


def command_ids(commands: Sequence[Command], start_s: float, end_s: float, max_tokens: int = 4) -> Tuple[int, ...]:
    """Text ids of the commands overlapping [start_s, end_s); IDLE when none does."""
    ids = [text_id(c.name) for c in commands if c.start_s < end_s and c.end_s > start_s]
    return tuple(ids[:max_tokens]) or (text_id("IDLE"),)


def audio_window(stream: torch.Tensor, start_s: float, frames: int = AUDIO_FRAMES_PER_CLIP) -> AudioFeatures:
    """frames audio feature frames from start_s on, zero-padded past the end of the stream."""
    a = int(round(start_s * AUDIO_RATE))
    chunk = stream[a:a + frames]
    if chunk.shape[0] < frames:
        chunk = torch.cat([chunk, chunk.new_zeros(frames - chunk.shape[0], stream.shape[1])], dim=0)
    return AudioFeatures(chunk)


@dataclass(eq=False)
class EpisodeRecord:
    """
    One synthetic long-shot video.

    yaw and expression are per pixel frame (24 fps); latents, body and head
    hold one rendered frame per latent frame k, taken at pixel frame 4k.
    """

    character: CharacterSpec
    seed: int
    scenario: str
    duration_s: float
    yaw: np.ndarray
    expression: np.ndarray
    commands: List[Command]
    audio: torch.Tensor
    latents: LatentVideo
    body: LatentVideo
    head: LatentVideo
    fps: int = FPS

    @property
    def source_id(self) -> str:
        return f"{self.scenario}-{self.seed}"

    @property
    def latent_frames(self) -> int:
        return self.latents.frames

    def latent_time(self, k: int) -> float:
        return k / LATENT_FPS

    def latent_index(self, time_s: float) -> int:
        return int(math.floor(time_s * LATENT_FPS + 1e-9))

    def latent_yaw(self, k: int) -> float:
        return float(self.yaw[k * COMPRESSION])

    def latent_expression(self, k: int) -> str:
        return EXPRESSIONS[int(self.expression[k * COMPRESSION])]

    def commanded_yaws(self, start: int, stop: int) -> np.ndarray:
        return np.array([self.latent_yaw(k) for k in range(start, stop)])

    def text_ids(self, start_s: float, end_s: float, max_tokens: int = 4) -> Tuple[int, ...]:
        return command_ids(self.commands, start_s, end_s, max_tokens)

    def audio_clip(self, start_s: float, frames: int = AUDIO_FRAMES_PER_CLIP) -> AudioFeatures:
        return audio_window(self.audio, start_s, frames)


def _ramp(t: np.ndarray, t0: float, t1: float, y0: float, y1: float) -> np.ndarray:
    return y0 + (y1 - y0) * np.clip((t - t0) / (t1 - t0), 0.0, 1.0)


def _turn_block(t: np.ndarray, peak: float) -> np.ndarray:
    """Within a 10 s block: hold 0, ramp to peak, hold, ramp back."""
    up = _ramp(t, 2.0, 5.0, 0.0, peak)
    down = _ramp(t, 7.0, 10.0, 0.0, peak)
    return np.where(t < 7.0, up, peak - down)


def _expression_command(label: str) -> str:
    if label == "happy":
        return "SMILE"
    if label in ("angry", "sad", "disgust"):
        return "FROWN"
    return "EXPRESS"


def _script(scenario: str, duration_s: float, rng: np.random.Generator):
    n = int(round(duration_s * FPS))
    t = np.arange(n) / FPS
    yaw = np.zeros(n)
    expr = np.full(n, EXPRESSIONS.index("neutral"), dtype=np.int64)
    commands: List[Command] = []

    if scenario == "idle":
        commands.append(Command(0.0, duration_s, "IDLE"))
    elif scenario == "turn_around":
        local = t % 10.0
        yaw = _turn_block(local, 180.0)
        for start in np.arange(0.0, duration_s, 10.0):
            commands.append(Command(float(start), float(min(start + 2.0, duration_s)), "IDLE"))
            if start + 2.0 < duration_s:
                commands.append(Command(float(start + 2.0), float(min(start + 10.0, duration_s)), "TURN_AROUND"))
    elif scenario == "expression_cycle":
        first = int(rng.integers(len(EXPRESSIONS)))
        for j, start in enumerate(np.arange(0.0, duration_s, 2.5)):
            label = EXPRESSIONS[(first + j) % len(EXPRESSIONS)]
            sel = (t >= start) & (t < start + 2.5)
            expr[sel] = EXPRESSIONS.index(label)
            commands.append(Command(float(start), float(min(start + 2.5, duration_s)), _expression_command(label)))
    elif scenario == "mixed":
        blocks = ("turn_around", "speak", "turn_left", "turn_right")
        for j, start in enumerate(np.arange(0.0, duration_s, 10.0)):
            kind = blocks[j % len(blocks)]
            end = float(min(start + 10.0, duration_s))
            sel = (t >= start) & (t < start + 10.0)
            local = t[sel] - start
            if kind == "speak":
                labels = rng.choice(len(EXPRESSIONS), size=4, replace=False)
                for q, label in enumerate(labels):
                    expr[sel & (t >= start + 2.5 * q) & (t < start + 2.5 * (q + 1))] = int(label)
                commands.append(Command(float(start), end, "SPEAK"))
                continue
            peak = {"turn_around": 180.0, "turn_left": 90.0, "turn_right": -90.0}[kind]
            yaw[sel] = _turn_block(local, peak)
            commands.append(Command(float(start), float(min(start + 2.0, end)), "IDLE"))
            if start + 2.0 < end:
                commands.append(Command(float(start + 2.0), end, kind.upper()))
    else:
        raise ConfigError(f"Unknown scenario '{scenario}', expected one of {SCENARIOS}")
    yaw = np.mod(yaw, 360.0)
    yaw[yaw >= 360.0] = 0.0
    return yaw, expr, commands


def _audio_stream(commands: Sequence[Command], duration_s: float) -> torch.Tensor:
    n = int(math.floor(duration_s * AUDIO_RATE))
    s = np.arange(n) / AUDIO_RATE
    audio = np.zeros((n, AUDIO_DIM))
    for c in commands:
        sel = (s >= c.start_s) & (s < c.end_s)
        idx = text_id(c.name)
        envelope = 0.75 + 0.25 * np.sin(2.0 * math.pi * 2.0 * s[sel] + idx)
        audio[sel] = envelope[:, None] * _SIGNATURES[idx][None, :]
    return torch.from_numpy(audio.astype(np.float32))


def gen_episode(
    seed: int,
    duration_s: float = 60.0,
    scenario: str = "mixed",
    character: Optional[CharacterSpec] = None,
    texture_floor: float = 0.5,
) -> EpisodeRecord:
    if duration_s < CLIP_SECONDS:
        raise SourceTooShortError(f"Episode of {duration_s}s is shorter than a {CLIP_SECONDS}s clip")
    if scenario not in SCENARIOS:
        raise ConfigError(f"Unknown scenario '{scenario}', expected one of {SCENARIOS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, SCENARIOS.index(scenario)]))
    yaw, expr, commands = _script(scenario, duration_s, rng)
    character = character or gen_character(seed, floor=texture_floor)

    frames = [render_latent(character, float(yaw[k]), int(expr[k])) for k in range(0, len(yaw) - COMPRESSION + 1, COMPRESSION)]
    return EpisodeRecord(
        character=character,
        seed=seed,
        scenario=scenario,
        duration_s=float(duration_s),
        yaw=yaw,
        expression=expr,
        commands=commands,
        audio=_audio_stream(commands, duration_s),
        latents=LatentVideo(torch.stack([f.full for f in frames])),
        body=LatentVideo(torch.stack([f.body for f in frames])),
        head=LatentVideo(torch.stack([f.head for f in frames])),
    )


def save_episode(episode: EpisodeRecord, out_dir: str) -> Tuple[str, str]:
    """Write the latent container and the JSON ground-truth sidecar; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, episode.source_id)
    tensors = {
        "latents": episode.latents.data,
        "body": episode.body.data,
        "head": episode.head.data,
        "audio": episode.audio,
        "character/body": episode.character.body,
        "character/heads": episode.character.heads,
        "character/background": episode.character.background,
    }
    meta = {"source_id": episode.source_id, "scenario": episode.scenario, "seed": episode.seed}
    core_math.write_container(base + ".avlt", tensors, meta, magic=LATENT_MAGIC)
    sidecar = {
        "source_id": episode.source_id,
        "seed": episode.seed,
        "character_seed": episode.character.seed,
        "scenario": episode.scenario,
        "duration_s": episode.duration_s,
        "fps": episode.fps,
        "yaw": [float(y) for y in episode.yaw],
        "expression": [EXPRESSIONS[int(e)] for e in episode.expression],
        "commands": [[c.start_s, c.end_s, c.name] for c in episode.commands],
    }
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True)
    return base + ".avlt", base + ".json"


def load_episode(path: str) -> EpisodeRecord:
    base = path[:-5] if path.endswith((".avlt", ".json")) else path
    tensors, _ = core_math.read_container(base + ".avlt", magic=LATENT_MAGIC)
    with open(base + ".json", "r", encoding="utf-8") as f:
        side = json.load(f)
    character = CharacterSpec(
        side["character_seed"], tensors["character/body"], tensors["character/heads"], tensors["character/background"]
    )
    return EpisodeRecord(
        character=character,
        seed=side["seed"],
        scenario=side["scenario"],
        duration_s=side["duration_s"],
        yaw=np.array(side["yaw"], dtype=np.float64),
        expression=np.array([EXPRESSIONS.index(e) for e in side["expression"]], dtype=np.int64),
        commands=[Command(*c) for c in side["commands"]],
        audio=tensors["audio"],
        latents=LatentVideo(tensors["latents"]),
        body=LatentVideo(tensors["body"]),
        head=LatentVideo(tensors["head"]),
        fps=side["fps"],
    )


@dataclass
class DataConfig:
    episodes: int = 8
    duration_s: float = 60.0
    scenarios: List[str] = field(default_factory=lambda: ["mixed", "turn_around", "expression_cycle", "idle"])
    texture_floor: float = 0.5

    def validate(self) -> "DataConfig":
        if self.episodes < 0:
            raise ConfigError(f"data.episodes must be non-negative, got {self.episodes}")
        if self.duration_s < CLIP_SECONDS:
            raise ConfigError(f"data.duration_s must be at least {CLIP_SECONDS}")
        unknown = set(self.scenarios) - set(SCENARIOS)
        if unknown or not self.scenarios:
            raise ConfigError(f"data.scenarios must be a non-empty subset of {SCENARIOS}")
        return self


def episode_plan(cfg: DataConfig, seed: int) -> List[Tuple[int, str]]:
    """(episode seed, scenario) per episode, fixed by the run seed."""
    children = np.random.SeedSequence(seed).spawn(cfg.episodes)
    return [
        (int(child.generate_state(1)[0] % 1_000_000), cfg.scenarios[i % len(cfg.scenarios)])
        for i, child in enumerate(children)
    ]


def synthesize_corpus(cfg: DataConfig, seed: int, out_dir: str, max_workers: int = 4) -> List[Dict[str, Any]]:
    """Generate and save every planned episode; failures are recorded, not raised."""
    cfg.validate()
    plan = episode_plan(cfg, seed)

    def one(item: Tuple[int, str]) -> Dict[str, Any]:
        ep_seed, scenario = item
        result = {"seed": ep_seed, "scenario": scenario, "success": False, "error": None}
        try:
            episode = gen_episode(ep_seed, cfg.duration_s, scenario, texture_floor=cfg.texture_floor)
            container, sidecar = save_episode(episode, out_dir)
            result.update(success=True, source_id=episode.source_id, container=container, sidecar=sidecar)
        except Exception as e:
            result["error"] = str(e)
            logger.error(f"Failed to synthesize {scenario} episode {ep_seed}: {e}", exc_info=True)
        return result

    results: List[Dict[str, Any]] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        for result in tqdm(executor.map(one, plan), total=len(plan), desc="episodes", disable=not plan):
            results.append(result)
    return results


def eval_region_mse(
    pred: LatentVideo,
    truth: Union[LatentVideo, EpisodeRecord],
    region: str = "full",
    start: int = 0,
) -> float:
    """MSE between pred and ground truth restricted to region."""
    if isinstance(truth, EpisodeRecord):
        truth = truth.latents.frame_slice(start, start + pred.frames) if start < truth.latent_frames else None
    if truth is None or truth.dims != pred.dims:
        raise ShapeError(f"Prediction {pred.dims} does not align with ground truth")
    mask = region_mask(region, pred.height, pred.width)[None, :, :, None].expand(pred.dims)
    diff = pred.data.double() - truth.data.double()
    return float((diff * diff).masked_select(mask).mean())


def estimate_yaw(frame: torch.Tensor, character: CharacterSpec, temperature: float = 0.1) -> float:
    """Soft nearest canonical body texture over the back_texture region; degrees in [0, 360)."""
    mask = region_mask("back_texture", frame.shape[0], frame.shape[1])[:, BODY_COLS[0]:BODY_COLS[1]]
    observed = frame[:, BODY_COLS[0]:BODY_COLS[1]].double()[mask]
    mse = torch.stack([((observed - character.body[v].double()[mask]) ** 2).mean() for v in range(len(VIEWPOINTS))])
    w = torch.softmax(-mse / temperature, dim=0)
    angles = torch.tensor([math.radians(CANONICAL_YAWS[v]) for v in VIEWPOINTS], dtype=torch.float64)
    yaw = math.degrees(math.atan2(float((w * angles.sin()).sum()), float((w * angles.cos()).sum())))
    return yaw % 360.0


def estimate_yaw_trajectory(video: LatentVideo, character: CharacterSpec) -> np.ndarray:
    return np.array([estimate_yaw(video.data[k], character) for k in range(video.frames)])


def pose_copy_score(pred_yaws: np.ndarray, anchor_yaw: float, commanded_yaws: np.ndarray) -> float:
    """Similarity of the output yaw to the anchor's yaw minus its similarity to the commanded yaws."""
    pred = np.radians(np.asarray(pred_yaws, dtype=np.float64))
    to_anchor = np.cos(pred - math.radians(anchor_yaw)).mean()
    to_command = np.cos(pred - np.radians(np.asarray(commanded_yaws, dtype=np.float64))).mean()
    return float(to_anchor - to_command)


def background_drift(
    video: LatentVideo,
    reference: LatentVideo,
    chunk_ranges: Sequence[Tuple[int, int]],
) -> List[float]:
    """Background-region MSE of each chunk against the single reference frame."""
    drift = []
    for start, stop in chunk_ranges:
        part = video.frame_slice(start, stop)
        ref = LatentVideo(reference.data.expand(part.frames, -1, -1, -1))
        drift.append(eval_region_mse(part, ref, "background"))
    return drift


def anchor_key_mask(seq: TokenSequence, masked: Sequence[AnchorRole] = ()) -> Optional[torch.Tensor]:
    """Key mask hiding the tokens of the given anchor roles from every query."""
    if not masked:
        return None
    keep = torch.ones(len(seq), dtype=torch.bool)
    for seg in seq.anchor_segments():
        if seg.role.anchor in masked:
            keep[seg.start:seg.stop] = False
    return keep


def attention_masses(record: AttentionRecord) -> Dict[str, float]:
    """Mean attention mass from Video queries to each segment (self included)."""
    seq = record.sequence
    video = seq.video_segment
    rows = record.weights[video.start:video.stop].double()
    return {seg.role.name: float(rows[:, seg.start:seg.stop].sum(dim=-1).mean()) for seg in seq.segments}


def attention_probe(
    model: DiTModel,
    x_t: LatentVideo,
    t: float,
    conds: Conditions,
    prefix: Optional[LatentVideo] = None,
    masked: Sequence[AnchorRole] = (),
) -> Dict[str, float]:
    """Run one forward pass with the probe block recording and return segment masses."""
    probe_block = getattr(getattr(model, "cfg", None), "probe_block", None)
    if probe_block is None or not hasattr(model, "sequence_with_attention"):
        raise ProbeUnavailableError("Model does not record attention weights")
    seq = model.build_sequence(x_t, conds, prefix)
    with torch.no_grad():
        _, record = model.sequence_with_attention(seq, t, conds, key_mask=anchor_key_mask(seq, masked))
    return attention_masses(record)


def anchor_masses(masses: Mapping[str, float]) -> Dict[str, float]:
    """Keep only the anchor-role entries of a masses mapping."""
    skip = {k.value for k in SegmentKind if k != SegmentKind.ANCHOR}
    return {name: value for name, value in masses.items() if name not in skip}
