"""
Latent videos, anchor sets, patchification and the assembled token sequence.

Sequence layout: [FirstFrame, Prefix?, Video, Anchors...]. Anchors are told
apart only by their RoPE temporal offsets; no extra embeddings are added.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import torch

from . import core_math
from .errors import AnchorLayoutError, ShapeError
from .roles import (
    EXPRESSIONS,
    GLOBAL_ROLE,
    VIEWPOINTS,
    AnchorKind,
    AnchorRole,
    PositionTriple,
    SegmentKind,
    SegmentRole,
)
from .rope3d import MAX_PREFIX_FRAMES, RopeConfig, shifted_position

logger = logging.getLogger(__name__)

LATENT_MAGIC = b"AVLT"
DEFAULT_PATCH = (2, 2)

Projection = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True, eq=False)
class LatentVideo:
    """A T x H x W x C grid of latent frames."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ShapeError(f"LatentVideo needs a T x H x W x C tensor, got shape {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ShapeError("LatentVideo needs at least one frame")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def frame_slice(self, start: int, stop: int) -> "LatentVideo":
        return LatentVideo(self.data[start:stop])

    def to(self, dtype: torch.dtype) -> "LatentVideo":
        return LatentVideo(self.data.to(dtype))

    @staticmethod
    def concat_frames(videos: Sequence["LatentVideo"]) -> "LatentVideo":
        return LatentVideo(torch.cat([v.data for v in videos], dim=0))

    @staticmethod
    def zeros(frames: int, height: int, width: int, channels: int, dtype: torch.dtype = torch.float32) -> "LatentVideo":
        return LatentVideo(torch.zeros(frames, height, width, channels, dtype=dtype))


@dataclass
class AnchorSet:
    """One optional global anchor, up to 4 viewpoint and 8 expression anchors."""

    global_anchor: Optional[LatentVideo] = None
    viewpoints: Dict[int, LatentVideo] = field(default_factory=dict)
    expressions: Dict[int, LatentVideo] = field(default_factory=dict)

    @classmethod
    def from_items(cls, items: Iterable[Tuple[AnchorRole, LatentVideo]]) -> "AnchorSet":
        anchors = cls()
        for role, latent in items:
            if role in anchors.roles():
                raise AnchorLayoutError(f"Duplicate anchor role {role.name}")
            anchors.put(role, latent)
        return anchors

    def put(self, role: AnchorRole, latent: LatentVideo) -> None:
        if latent.frames != 1:
            raise AnchorLayoutError(f"Anchor {role.name} must be a single frame, got {latent.frames}")
        if role.kind == AnchorKind.GLOBAL:
            self.global_anchor = latent
        elif role.kind == AnchorKind.VIEWPOINT:
            self.viewpoints[role.sub_index] = latent
        else:
            self.expressions[role.sub_index] = latent

    def get(self, role: AnchorRole) -> LatentVideo:
        if role.kind == AnchorKind.GLOBAL:
            if self.global_anchor is None:
                raise KeyError(role.name)
            return self.global_anchor
        table = self.viewpoints if role.kind == AnchorKind.VIEWPOINT else self.expressions
        return table[role.sub_index]

    def items(self) -> List[Tuple[AnchorRole, LatentVideo]]:
        """Anchors in canonical order: global, viewpoints, expressions."""
        out = []
        if self.global_anchor is not None:
            out.append((GLOBAL_ROLE, self.global_anchor))
        out.extend((AnchorRole(AnchorKind.VIEWPOINT, i), self.viewpoints[i]) for i in sorted(self.viewpoints))
        out.extend((AnchorRole(AnchorKind.EXPRESSION, i), self.expressions[i]) for i in sorted(self.expressions))
        return out

    def roles(self) -> List[AnchorRole]:
        return [role for role, _ in self.items()]

    def __len__(self) -> int:
        return len(self.items())

    def is_empty(self) -> bool:
        return len(self) == 0

    def kinds(self) -> set:
        return {role.kind for role in self.roles()}

    def without(self, *kinds: AnchorKind) -> "AnchorSet":
        return AnchorSet.from_items((r, v) for r, v in self.items() if r.kind not in kinds)

    def validate(self, video_height: int, video_width: int) -> None:
        if len(self.viewpoints) > len(VIEWPOINTS) or len(self.expressions) > len(EXPRESSIONS):
            raise AnchorLayoutError("Too many viewpoint or expression anchors")
        g = self.global_anchor
        if g is not None and (g.height, g.width) != (video_height, video_width):
            raise AnchorLayoutError(
                f"Global anchor is {g.height}x{g.width}, video is {video_height}x{video_width}"
            )


@dataclass(frozen=True)
class Segment:
    role: SegmentRole
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class TokenSequence:
    """Flattened patch tokens; the single sequence self-attention runs over."""

    tokens: torch.Tensor
    positions: torch.Tensor
    segments: List[Segment]
    loss_mask: torch.Tensor
    # latent frame of each Video token, -1 elsewhere
    frame_index: torch.Tensor
    video_dims: Tuple[int, int, int, int]
    patch: Tuple[int, int] = DEFAULT_PATCH

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def position_triples(self) -> List[PositionTriple]:
        return [PositionTriple(*map(int, row)) for row in self.positions.tolist()]

    def segment_of(self, kind: SegmentKind) -> Optional[Segment]:
        for seg in self.segments:
            if seg.role.kind == kind:
                return seg
        return None

    @property
    def video_segment(self) -> Segment:
        return self.segment_of(SegmentKind.VIDEO)

    def anchor_segments(self) -> List[Segment]:
        return [s for s in self.segments if s.role.kind == SegmentKind.ANCHOR]

    def validate(self) -> None:
        cursor = 0
        for seg in self.segments:
            if seg.start != cursor or seg.length <= 0:
                raise AnchorLayoutError(f"Segments do not partition the sequence at {seg}")
            cursor = seg.stop
        if cursor != len(self):
            raise AnchorLayoutError(f"Segments cover {cursor} of {len(self)} tokens")
        video = self.video_segment
        outside = self.loss_mask.clone()
        outside[video.start:video.stop] = False
        if bool(outside.any()):
            raise AnchorLayoutError("loss_mask set outside the Video segment")


def _grid(v: LatentVideo, patch: Tuple[int, int]) -> Tuple[int, int]:
    ph, pw = patch
    if v.height % ph or v.width % pw:
        raise ShapeError(f"Latent {v.height}x{v.width} not divisible by patch {ph}x{pw}")
    return v.height // ph, v.width // pw


def patchify(
    v: LatentVideo,
    patch: Tuple[int, int] = DEFAULT_PATCH,
    proj: Optional[Projection] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Split v into (ph x pw) patches.

    Returns tokens of shape (L, D) (raw C*ph*pw when proj is None) and integer
    positions of shape (L, 3) holding the unshifted (t, h, w) patch grid.
    """
    gh, gw = _grid(v, patch)
    ph, pw = patch
    t = v.frames
    raw = v.data.reshape(t, gh, ph, gw, pw, v.channels).permute(0, 1, 3, 2, 4, 5)
    raw = raw.reshape(t * gh * gw, ph * pw * v.channels)
    tt, hh, ww = torch.meshgrid(torch.arange(t), torch.arange(gh), torch.arange(gw), indexing="ij")
    positions = torch.stack([tt.reshape(-1), hh.reshape(-1), ww.reshape(-1)], dim=-1)
    tokens = raw if proj is None else proj(raw)
    return tokens, positions


def unpatchify(
    tokens: torch.Tensor,
    positions: torch.Tensor,
    patch: Tuple[int, int],
    video_dims: Tuple[int, int, int, int],
    proj_inverse: Optional[Projection] = None,
) -> LatentVideo:
    """Place tokens back on the grid by position; order of tokens is irrelevant."""
    t, h, w, c = video_dims
    ph, pw = patch
    if t * h * w * c == 0 or tokens.shape[0] == 0:
        raise ShapeError("Cannot unpatchify an empty grid")
    if h % ph or w % pw:
        raise ShapeError(f"Video {h}x{w} not divisible by patch {ph}x{pw}")
    gh, gw = h // ph, w // pw
    cells = t * gh * gw
    raw = tokens if proj_inverse is None else proj_inverse(tokens)
    if raw.shape[-1] != ph * pw * c:
        raise ShapeError(f"Token width {raw.shape[-1]} does not match patch volume {ph * pw * c}")

    pos = positions.long()
    in_range = (pos[:, 0] < t) & (pos[:, 1] < gh) & (pos[:, 2] < gw) & (pos >= 0).all(dim=1)
    if not bool(in_range.all()):
        raise ShapeError("Token positions fall outside the video grid")
    flat = (pos[:, 0] * gh + pos[:, 1]) * gw + pos[:, 2]
    counts = torch.bincount(flat, minlength=cells)
    if bool((counts == 0).any()):
        raise ShapeError(f"{int((counts == 0).sum())} grid cells have no token")
    if bool((counts > 1).any()):
        raise ShapeError(f"{int((counts > 1).sum())} grid cells have duplicate tokens")

    grid = raw.new_zeros(cells, raw.shape[-1]).index_copy(0, flat, raw)
    grid = grid.reshape(t, gh, gw, ph, pw, c).permute(0, 1, 3, 2, 4, 5).reshape(t, h, w, c)
    return LatentVideo(grid)


def assemble_sequence(
    first_frame: LatentVideo,
    noised_video: LatentVideo,
    anchors: Optional[AnchorSet] = None,
    prefix: Optional[LatentVideo] = None,
    embed: Optional[Projection] = None,
    patch: Tuple[int, int] = DEFAULT_PATCH,
    rope: Optional[RopeConfig] = None,
    anchor_order: Optional[Sequence[AnchorRole]] = None,
) -> TokenSequence:
    """
    Concatenate first frame, optional prefix, noised video and anchors.

    Positions are returned already role-shifted. With a prefix, the prefix
    occupies t = 0..3 and the first frame and video move up by 4.
    """
    anchors = anchors or AnchorSet()
    rope = rope or RopeConfig()
    _, video_h, video_w, channels = noised_video.dims

    if first_frame.frames != 1 or first_frame.dims[1:] != noised_video.dims[1:]:
        raise ShapeError(f"First frame {first_frame.dims} does not match video {noised_video.dims}")
    if prefix is not None:
        if prefix.frames != MAX_PREFIX_FRAMES:
            raise AnchorLayoutError(f"Prefix must have {MAX_PREFIX_FRAMES} frames, got {prefix.frames}")
        if prefix.dims[1:] != noised_video.dims[1:]:
            raise ShapeError(f"Prefix {prefix.dims} does not match video {noised_video.dims}")
    anchors.validate(video_h, video_w)

    order = list(anchor_order) if anchor_order is not None else anchors.roles()
    if len(set(order)) != len(order):
        raise AnchorLayoutError("Anchor order repeats a role")
    if set(order) != set(anchors.roles()):
        raise AnchorLayoutError("Anchor order does not match the anchor set")

    shift = MAX_PREFIX_FRAMES if prefix is not None else 0
    parts: List[Tuple[SegmentRole, LatentVideo, int]] = [
        (SegmentRole(SegmentKind.FIRST_FRAME), first_frame, shift),
    ]
    if prefix is not None:
        parts.append((SegmentRole(SegmentKind.PREFIX), prefix, 0))
    parts.append((SegmentRole(SegmentKind.VIDEO), noised_video, shift))
    for role in order:
        latent = anchors.get(role)
        if latent.channels != channels:
            raise ShapeError(f"Anchor {role.name} has {latent.channels} channels, video has {channels}")
        parts.append((SegmentRole(SegmentKind.ANCHOR, role), latent, 0))

    tokens, positions, segments, masks, frames = [], [], [], [], []
    cursor = 0
    for role, latent, t_shift in parts:
        tok, pos = patchify(latent, patch, embed)
        pos = pos.clone()
        pos[:, 0] += t_shift
        if role.kind == SegmentKind.ANCHOR:
            pos[:, 0] = shifted_position(PositionTriple(0, 0, 0), role, rope).t + pos[:, 0]
        n = tok.shape[0]
        is_video = role.kind == SegmentKind.VIDEO
        tokens.append(tok)
        positions.append(pos)
        segments.append(Segment(role, cursor, n))
        masks.append(torch.full((n,), is_video, dtype=torch.bool))
        frames.append(pos[:, 0] - shift if is_video else torch.full((n,), -1, dtype=torch.long))
        cursor += n

    seq = TokenSequence(
        tokens=torch.cat(tokens, dim=0),
        positions=torch.cat(positions, dim=0),
        segments=segments,
        loss_mask=torch.cat(masks),
        frame_index=torch.cat(frames),
        video_dims=noised_video.dims,
        patch=tuple(patch),
    )
    seq.validate()
    return seq


def save_latents(path: str, videos: Mapping[str, LatentVideo], meta: Optional[Mapping] = None) -> None:
    """Write named latent videos to one container (see core_math.write_container)."""
    core_math.write_container(path, {name: v.data for name, v in videos.items()}, meta, magic=LATENT_MAGIC)


def load_latents(path: str) -> Tuple[Dict[str, LatentVideo], Dict]:
    tensors, meta = core_math.read_container(path, magic=LATENT_MAGIC)
    return {name: LatentVideo(t) for name, t in tensors.items()}, meta
