"""
Run configuration.

One YAML document merged key by key over DEFAULT_CONFIG, turned into typed
sections and cross-validated before any command touches the disk. Only
ANCHORVID_OUTPUT_DIR and ANCHORVID_THREADS are read from the environment.
"""
import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Mapping, Optional

import yaml

from .ablations import AblationConfig
from .anchor_pipeline.index import PipelineConfig
from .anchor_pipeline.judge import JudgeConfig
from .backbone import ModelConfig
from .errors import ConfigError
from .flow_match import TrainConfig
from .inference_engine import SampleConfig
from .roles import AnchorKind
from .rope3d import DEFAULT_OFFSETS, RopeConfig, validate_rope_config
from .synth_world import (
    AUDIO_DIM,
    AUDIO_FRAMES_PER_CLIP,
    BODY_COLS,
    CLIP_LATENT_FRAMES,
    HEAD_COLS,
    HEAD_ROWS,
    LATENT_CHANNELS,
    LATENT_HEIGHT,
    LATENT_WIDTH,
    DataConfig,
)

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "ANCHORVID_OUTPUT_DIR"
ENV_THREADS = "ANCHORVID_THREADS"


def _section_defaults(cls) -> Dict[str, Any]:
    return _plain(dataclasses.asdict(cls()))


def _plain(value: Any) -> Any:
    """Enums to values, tuples to lists, so the mapping round-trips through YAML."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Mapping):
        return {_plain(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


DEFAULT_CONFIG: Dict[str, Any] = {
    "log_level": "INFO",
    "log_file": None,
    "max_workers": 4,
    "seed": 0,
    "output_dir": "runs/default",
    "model": {**_section_defaults(ModelConfig), "audio_blocks": None},
    "rope": {
        "base": 10000.0,
        "dim_split": None,
        "offsets": {k.value: v for k, v in DEFAULT_OFFSETS.items()},
        "collapsed": False,
    },
    "train": {k: v for k, v in _section_defaults(TrainConfig).items() if k != "seed"},
    "sample": {k: v for k, v in _section_defaults(SampleConfig).items() if k != "seed"},
    "data": _section_defaults(DataConfig),
    "pipeline": _section_defaults(PipelineConfig),
    "judge": _section_defaults(JudgeConfig),
    "ablation": _section_defaults(AblationConfig),
}


def merge_config(defaults: Mapping[str, Any], overrides: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Recursively merge overrides onto defaults; missing keys fall back to the defaults."""
    merged = copy.deepcopy(dict(defaults))
    for key, value in (overrides or {}).items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class RunConfig:
    log_level: str = "INFO"
    log_file: Optional[str] = None
    max_workers: int = 4
    seed: int = 0
    output_dir: str = "runs/default"
    threads: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    rope: RopeConfig = field(default_factory=RopeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        """Cross-check every section; raises ConfigError (or StageGatingError)."""
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"log_level {self.log_level!r} is not a logging level")
        if self.max_workers < 1:
            raise ConfigError(f"max_workers must be positive, got {self.max_workers}")
        self.model.validate()
        if self.rope.head_dim != self.model.head_dim:
            raise ConfigError(f"rope head_dim {self.rope.head_dim} != model head_dim {self.model.head_dim}")
        validate_rope_config(self.rope, max_video_len=max(self.sample.chunk_len, CLIP_LATENT_FRAMES))

        if self.model.latent_channels != LATENT_CHANNELS:
            raise ConfigError(f"model.latent_channels must be {LATENT_CHANNELS} for synthetic latents")
        if self.model.audio_dim != AUDIO_DIM:
            raise ConfigError(f"model.audio_dim must be {AUDIO_DIM} to match the audio features")
        windows = -(-AUDIO_FRAMES_PER_CLIP // 4)
        if windows > CLIP_LATENT_FRAMES:
            raise ConfigError(f"{windows} audio windows exceed {CLIP_LATENT_FRAMES} latent frames per clip")
        ph, pw = self.model.patch
        crops = {
            "full frame": (LATENT_HEIGHT, LATENT_WIDTH),
            "body crop": (LATENT_HEIGHT, BODY_COLS[1] - BODY_COLS[0]),
            "head crop": (HEAD_ROWS[1] - HEAD_ROWS[0], HEAD_COLS[1] - HEAD_COLS[0]),
        }
        for name, (h, w) in crops.items():
            if h % ph or w % pw:
                raise ConfigError(f"model.patch {ph}x{pw} does not tile the {h}x{w} {name}")

        self.train.validate()
        self.sample.validate()
        self.data.validate()
        self.pipeline.validate()
        self.judge.validate()
        self.ablation.validate()
        return self


def _build(cls, section: str, values: Mapping[str, Any], **extra: Any):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {', '.join(sorted(unknown))}")
    try:
        return cls(**{**values, **extra})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e


def from_mapping(raw: Mapping[str, Any]) -> RunConfig:
    unknown = set(raw) - set(DEFAULT_CONFIG) - {"threads"}
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {', '.join(sorted(unknown))}")
    try:
        seed = int(raw["seed"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"seed must be an integer, got {raw['seed']!r}") from e
    model = _build(ModelConfig, "model", raw["model"])
    rope_raw = dict(raw["rope"])
    try:
        rope_raw["offsets"] = {AnchorKind(k): int(v) for k, v in rope_raw.get("offsets", {}).items()}
    except ValueError as e:
        raise ConfigError(f"Invalid rope offsets: {e}") from e
    return RunConfig(
        log_level=str(raw["log_level"]),
        log_file=raw["log_file"],
        max_workers=int(raw["max_workers"]),
        seed=seed,
        output_dir=str(raw["output_dir"]),
        threads=raw.get("threads"),
        model=model,
        rope=_build(RopeConfig, "rope", rope_raw, head_dim=model.head_dim),
        train=_build(TrainConfig, "train", raw["train"], seed=seed),
        sample=_build(SampleConfig, "sample", raw["sample"], seed=seed),
        data=_build(DataConfig, "data", raw["data"]),
        pipeline=_build(PipelineConfig, "pipeline", raw["pipeline"]),
        judge=_build(JudgeConfig, "judge", raw["judge"]),
        ablation=_build(AblationConfig, "ablation", raw["ablation"]),
    )


def load_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Load YAML (or the defaults when the file is absent), apply overrides and env, validate."""
    file_values: Dict[str, Any] = {}
    if config_path and os.path.exists(config_path):
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_values = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Error loading config {config_path}: {e}") from e
        if not isinstance(file_values, Mapping):
            raise ConfigError(f"{config_path} must hold a mapping at the top level")
    elif config_path:
        logger.warning(f"Config file {config_path} not found, using defaults")

    raw = merge_config(merge_config(DEFAULT_CONFIG, file_values), overrides)
    env = os.environ if environ is None else environ
    if env.get(ENV_OUTPUT_DIR):
        raw["output_dir"] = env[ENV_OUTPUT_DIR]
    if env.get(ENV_THREADS):
        try:
            threads = int(env[ENV_THREADS])
        except ValueError as e:
            raise ConfigError(f"{ENV_THREADS} must be an integer, got {env[ENV_THREADS]!r}") from e
        if threads < 1:
            raise ConfigError(f"{ENV_THREADS} must be positive")
        raw["threads"] = threads
        raw["max_workers"] = threads
    return from_mapping(raw).validate()


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
