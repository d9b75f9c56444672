"""
3D rotary position embedding with per-anchor-type temporal offsets.

Anchors keep their native (h, w) grid and only the temporal coordinate is
moved: t' = t + offset[kind] + sub_index. Generated latents are never shifted.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Set, Tuple, Union

import torch

from .errors import ConfigError, ShapeError
from .roles import AnchorKind, AnchorRole, PositionTriple, SegmentKind, SegmentRole

logger = logging.getLogger(__name__)

DEFAULT_OFFSETS = {AnchorKind.VIEWPOINT: 200, AnchorKind.EXPRESSION: 400, AnchorKind.GLOBAL: 600}
# sub-offsets reserve [o, o + 8) per kind
SUB_OFFSET_SPAN = {AnchorKind.GLOBAL: 1, AnchorKind.VIEWPOINT: 8, AnchorKind.EXPRESSION: 8}
MAX_PREFIX_FRAMES = 4


def default_dim_split(head_dim: int) -> Tuple[int, int, int]:
    """Split head_dim roughly 2:1:1 over (t, h, w) with every part even."""
    dh = 2 * (head_dim // 8)
    return head_dim - 2 * dh, dh, dh


@dataclass
class RopeConfig:
    head_dim: int = 16
    dim_split: Optional[Tuple[int, int, int]] = None
    base: float = 10000.0
    offsets: Dict[AnchorKind, int] = field(default_factory=lambda: dict(DEFAULT_OFFSETS))
    # all anchor kinds share one offset and drop sub-offsets (ablation arm)
    collapsed: bool = False

    def __post_init__(self):
        if self.dim_split is None:
            self.dim_split = default_dim_split(self.head_dim)
        self.dim_split = tuple(int(d) for d in self.dim_split)
        self.offsets = {AnchorKind(k): int(v) for k, v in self.offsets.items()}

    def offset_for(self, kind: AnchorKind) -> int:
        if self.collapsed:
            return self.offsets[AnchorKind.VIEWPOINT]
        return self.offsets[kind]

    @classmethod
    def collapsed_from(cls, cfg: "RopeConfig") -> "RopeConfig":
        return cls(head_dim=cfg.head_dim, dim_split=cfg.dim_split, base=cfg.base, offsets=dict(cfg.offsets), collapsed=True)


def shifted_position(
    p: PositionTriple,
    role: Union[SegmentRole, AnchorRole, None],
    cfg: Optional[RopeConfig] = None,
) -> PositionTriple:
    """Apply the temporal offset of role to p; video-side roles stay put."""
    cfg = cfg or RopeConfig()
    if isinstance(role, SegmentRole):
        if role.kind != SegmentKind.ANCHOR:
            return p
        role = role.anchor
    if role is None:
        return p
    sub = 0 if cfg.collapsed else role.sub_index
    return p.shifted(cfg.offset_for(role.kind) + sub)


def _inv_freq(dim: int, base: float, dtype: torch.dtype) -> torch.Tensor:
    k = torch.arange(0, dim, 2, dtype=dtype)
    return base ** (-k / dim)


def rotation_angles(positions: torch.Tensor, cfg: RopeConfig, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Angles of shape (L, head_dim/2) for integer positions of shape (L, 3)."""
    positions = positions.to(dtype)
    parts = []
    for axis, dim in enumerate(cfg.dim_split):
        if dim == 0:
            continue
        parts.append(positions[:, axis:axis + 1] * _inv_freq(dim, cfg.base, dtype)[None, :])
    return torch.cat(parts, dim=-1)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, cfg: RopeConfig) -> torch.Tensor:
    """Rotate the last axis of x (..., L, head_dim) pairwise at positions (L, 3)."""
    if x.shape[-1] != cfg.head_dim:
        raise ShapeError(f"Expected head_dim {cfg.head_dim}, got {x.shape[-1]}")
    if positions.shape != (x.shape[-2], 3):
        raise ShapeError(f"Positions shape {tuple(positions.shape)} does not match {x.shape[-2]} tokens")
    angles = rotation_angles(positions, cfg, x.dtype)
    cos, sin = angles.cos(), angles.sin()
    pairs = x.reshape(*x.shape[:-1], cfg.head_dim // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return rotated.reshape(x.shape)


def rope_rotate(x: torch.Tensor, p: PositionTriple, cfg: RopeConfig) -> torch.Tensor:
    """Rotate one head_dim vector at a single position."""
    if x.dim() != 1 or x.shape[0] != cfg.head_dim:
        raise ShapeError(f"Expected a vector of length {cfg.head_dim}, got shape {tuple(x.shape)}")
    pos = torch.tensor([[p.t, p.h, p.w]])
    return apply_rope(x[None, :], pos, cfg)[0]


def anchor_temporal_positions(kind: AnchorKind, cfg: RopeConfig) -> Set[int]:
    """Effective temporal positions reachable by single-frame anchors of kind."""
    span = 1 if cfg.collapsed else SUB_OFFSET_SPAN[kind]
    start = cfg.offset_for(kind)
    return set(range(start, start + span))


def video_temporal_positions(max_video_len: int, with_prefix: bool = True) -> Set[int]:
    extra = MAX_PREFIX_FRAMES if with_prefix else 0
    return set(range(max_video_len + extra))


def validate_rope_config(cfg: RopeConfig, max_video_len: int = 192) -> RopeConfig:
    """Reject configs whose effective temporal ranges collide."""
    if cfg.head_dim % 2 != 0:
        raise ConfigError(f"rope head_dim must be even, got {cfg.head_dim}")
    if len(cfg.dim_split) != 3 or sum(cfg.dim_split) != cfg.head_dim:
        raise ConfigError(f"rope dim_split {cfg.dim_split} must sum to head_dim {cfg.head_dim}")
    if any(d % 2 for d in cfg.dim_split):
        raise ConfigError(f"rope dim_split {cfg.dim_split} must be even per axis")
    if any(v <= 0 for v in cfg.offsets.values()):
        raise ConfigError(f"rope offsets must be positive, got {cfg.offsets}")
    if set(cfg.offsets) != set(AnchorKind):
        raise ConfigError("rope offsets must name global, viewpoint and expression")

    video = video_temporal_positions(max_video_len)
    ranges = {kind: anchor_temporal_positions(kind, cfg) for kind in AnchorKind}
    for kind, reach in ranges.items():
        if reach & video:
            raise ConfigError(
                f"{kind.value} anchor positions {min(reach)}..{max(reach)} collide with video positions "
                f"0..{max(video)}"
            )
    if not cfg.collapsed:
        kinds = list(ranges)
        for i, a in enumerate(kinds):
            for b in kinds[i + 1:]:
                if ranges[a] & ranges[b]:
                    raise ConfigError(f"rope offsets for {a.value} and {b.value} overlap")
    return cfg
