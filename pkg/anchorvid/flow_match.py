"""
Flow-matching objective, classifier-free-guidance dropout and the staged
training loop.
"""
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from . import core_math
from .backbone import Conditions, DiTModel
from .core_math import ParamStore, op_set
from .errors import ConfigError, ShapeError, StageGatingError
from .latent_world import LatentVideo
from .roles import AnchorKind, SegmentKind

if TYPE_CHECKING:
    from .superset_sampler import TrainingExample

logger = logging.getLogger(__name__)

# t is drawn from [T_EPS, 1 - T_EPS]
T_EPS = 1e-4
DEFAULT_STEPS = 500


class Stage(str, Enum):
    I = "I"
    II = "II"
    III_MIXED = "III-mixed"
    III_JOINT = "III-joint"


STAGE_ANCHOR_KINDS: Dict[Stage, frozenset] = {
    Stage.I: frozenset(),
    Stage.II: frozenset({AnchorKind.GLOBAL}),
    Stage.III_MIXED: frozenset(AnchorKind),
    Stage.III_JOINT: frozenset(AnchorKind),
}


@dataclass
class TrainConfig:
    stage: Stage = Stage.I
    cfg_drop_prob: float = 0.1
    prefix_prob: float = 0.5
    steps: Optional[int] = None
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    # anchor kinds requested; None means everything the stage allows
    anchors: Optional[List[str]] = None
    # "superset" samples anchors from the whole source, "intra_only" from the clip
    anchor_mode: str = "superset"
    viewpoint_anchors: int = 2
    expression_anchors: int = 2
    mixed_steps: int = 2000
    joint_steps: int = 200
    checkpoint_every: int = 100

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.betas = tuple(self.betas)

    @property
    def anchor_kinds(self) -> frozenset:
        if self.anchors is None:
            return STAGE_ANCHOR_KINDS[self.stage]
        return frozenset(AnchorKind(a) for a in self.anchors)

    @property
    def allows_prefix(self) -> bool:
        return self.stage != Stage.I

    def resolved_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        if self.stage == Stage.III_MIXED:
            return self.mixed_steps
        if self.stage == Stage.III_JOINT:
            return self.joint_steps
        return DEFAULT_STEPS

    def validate(self) -> "TrainConfig":
        for name in ("cfg_drop_prob", "prefix_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1], got {value}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be positive, got {self.batch_size}")
        if self.resolved_steps() < 0:
            raise ConfigError("train.steps must be non-negative")
        if self.anchor_mode not in ("superset", "intra_only"):
            raise ConfigError(f"train.anchor_mode must be 'superset' or 'intra_only', got {self.anchor_mode!r}")
        if not 1 <= self.viewpoint_anchors <= 4 or not 1 <= self.expression_anchors <= 8:
            raise ConfigError("train.viewpoint_anchors must lie in [1, 4] and expression_anchors in [1, 8]")
        extra = self.anchor_kinds - STAGE_ANCHOR_KINDS[self.stage]
        if extra:
            names = ", ".join(sorted(k.value for k in extra))
            raise StageGatingError(f"Stage {self.stage.value} does not accept {names} anchors")
        return self

    def digest(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _check_same(x0: LatentVideo, x1: LatentVideo, what: str) -> None:
    if x0.dims != x1.dims:
        raise ShapeError(f"{what}: shapes differ, {x0.dims} vs {x1.dims}")


def interpolate(x0: LatentVideo, x1: LatentVideo, t: float) -> LatentVideo:
    """x_t = t * x1 + (1 - t) * x0."""
    _check_same(x0, x1, "interpolate")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    w = x1.data.new_tensor(t)
    return LatentVideo(op_set(op_set(x1.data, w, "mul"), op_set(x0.data.to(x1.data.dtype), 1.0 - w, "mul"), "add"))


def velocity_target(x0: LatentVideo, x1: LatentVideo) -> LatentVideo:
    _check_same(x0, x1, "velocity_target")
    return LatentVideo(op_set(x1.data, -x0.data.to(x1.data.dtype), "add"))


def fm_loss(pred: LatentVideo, target: LatentVideo, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error over the mask-true elements."""
    _check_same(pred, target, "fm_loss")
    if mask is None:
        return op_set(pred.data, target.data.to(pred.data.dtype), "mse")
    mask = torch.broadcast_to(mask.bool(), pred.data.shape)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("fm_loss mask selects no elements")
    diff = pred.data - target.data.to(pred.data.dtype)
    return (diff * diff).masked_select(mask).sum() / count


def apply_condition_dropout(conds: Conditions, prob: float, rng: np.random.Generator) -> Conditions:
    """Drop text and audio independently, each with probability prob."""
    drop_text = rng.random() < prob
    drop_audio = rng.random() < prob
    if drop_text:
        conds = conds.drop_text()
    if drop_audio:
        conds = conds.drop_audio()
    return conds


def step_rngs(seed: int, step: int) -> Tuple[np.random.Generator, torch.Generator]:
    """Data-side and noise-side generators fixed by (seed, step)."""
    seq = np.random.SeedSequence([seed, step])
    rng = np.random.default_rng(seq)
    gen = torch.Generator().manual_seed(int(seq.generate_state(1, dtype=np.uint64)[0] >> 1))
    return rng, gen


def check_stage_gating(seq_anchor_kinds: frozenset, has_prefix: bool, cfg: TrainConfig) -> None:
    extra = seq_anchor_kinds - cfg.anchor_kinds
    if extra:
        names = ", ".join(sorted(k.value for k in extra))
        raise StageGatingError(f"Stage {cfg.stage.value} example carries {names} anchors")
    if has_prefix and not cfg.allows_prefix:
        raise StageGatingError(f"Stage {cfg.stage.value} example carries a prefix")


class Trainer:
    """Runs flow-matching steps on a DiTModel with AdamW and logs metrics."""

    def __init__(
        self,
        model: DiTModel,
        cfg: TrainConfig,
        metrics_path: Optional[str] = None,
        checkpoint_path: Optional[str] = None,
    ):
        self.model = model
        self.cfg = cfg.validate()
        self.store = ParamStore.from_module(model)
        self.optimizer = core_math.build_optimizer(
            model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        self.metrics_path = metrics_path
        self.checkpoint_path = checkpoint_path
        self.step = 0
        self.history: List[Dict[str, Any]] = []

    def example_loss(
        self,
        example: "TrainingExample",
        rng: np.random.Generator,
        gen: torch.Generator,
    ) -> torch.Tensor:
        dtype = self.model.dtype
        x1 = example.clip.to(dtype)
        x0 = LatentVideo(torch.randn(x1.dims, generator=gen, dtype=dtype))
        t = float(rng.uniform(T_EPS, 1.0 - T_EPS))
        conds = apply_condition_dropout(example.conditions, self.cfg.cfg_drop_prob, rng)

        seq = self.model.build_sequence(interpolate(x0, x1, t), conds, example.prefix)
        kinds = frozenset(s.role.anchor.kind for s in seq.anchor_segments())
        check_stage_gating(kinds, seq.segment_of(SegmentKind.PREFIX) is not None, self.cfg)

        pred = self.model.forward_sequence(seq, t, conds)
        return fm_loss(pred, velocity_target(x0, x1))

    def train_step(self, batch: Sequence["TrainingExample"]) -> float:
        if not batch:
            raise ShapeError("Empty training batch")
        self.model.train()
        rng, gen = step_rngs(self.cfg.seed, self.step)
        losses = [self.example_loss(example, rng, gen) for example in batch]
        loss = torch.stack(losses).mean()

        core_math.grad(loss, self.store)
        self.store.push_grads()
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)

        self.step += 1
        record = {
            "step": self.step,
            "stage": self.cfg.stage.value,
            "loss": float(loss.detach()),
            "grad_norm": self.store.grad_norm(),
        }
        self.history.append(record)
        if self.metrics_path:
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
        return record["loss"]

    def fit(
        self,
        batch_source: Callable[[int], Sequence["TrainingExample"]],
        steps: Optional[int] = None,
        progress: bool = True,
    ) -> List[Dict[str, Any]]:
        """
        Train until self.step reaches steps (default: the stage's step count).

        batch_source(step) builds the batch for that step; the next batch is
        assembled in a worker thread while the current step runs.
        """
        target = self.cfg.resolved_steps() if steps is None else steps
        start = self.step
        if start >= target:
            logger.info(f"Already at step {start}, nothing to train")
            return self.history

        logger.info(f"Training stage {self.cfg.stage.value} from step {start} to {target}")
        with concurrent.futures.ThreadPoolExecutor(max_workers=1) as executor:
            pending = executor.submit(batch_source, start)
            for step in tqdm(range(start, target), disable=not progress, desc=f"stage {self.cfg.stage.value}"):
                batch = pending.result()
                if step + 1 < target:
                    pending = executor.submit(batch_source, step + 1)
                loss = self.train_step(batch)
                if self.checkpoint_path and self.step % self.cfg.checkpoint_every == 0:
                    self.save(self.checkpoint_path)
                if self.step % 50 == 0:
                    logger.debug(f"step {self.step}: loss {loss:.5f}")
        if self.checkpoint_path:
            self.save(self.checkpoint_path)
        return self.history

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        meta = {"step": self.step, "stage": self.cfg.stage.value, "config_digest": self.cfg.digest()}
        core_math.save_checkpoint(path, core_math.training_state(self.model, self.optimizer), meta)
        logger.info(f"Saved checkpoint at step {self.step} to {path}")

    def resume(self, path: str, restore_optimizer: bool = True) -> int:
        """Load parameters (and AdamW moments) from path and continue its step counter."""
        tensors, meta = core_math.load_checkpoint(path)
        step = int(meta.get("step", 0))
        same_stage = meta.get("stage") == self.cfg.stage.value
        optimizer = self.optimizer if restore_optimizer and same_stage else None
        core_math.restore_training_state(self.model, tensors, optimizer, step)
        # a new stage starts its own step counter from a previous stage's weights
        self.step = step if same_stage else 0
        logger.info(f"Resumed from {path} (stage {meta.get('stage')}, step {step})")
        return self.step
