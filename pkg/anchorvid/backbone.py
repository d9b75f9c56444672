"""
The DiT backbone.

Each block runs full self-attention over the assembled sequence with RoPE at
role-shifted positions, text cross-attention, an optional window-local audio
cross-attention with its own output projection, and an MLP. Timestep
conditioning modulates the pre-norms (adaLN-Zero).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .core_math import op_set
from .errors import ConfigError, ShapeError
from .latent_world import AnchorSet, LatentVideo, TokenSequence, assemble_sequence, unpatchify
from .roles import AnchorRole
from .rope3d import RopeConfig, apply_rope

logger = logging.getLogger(__name__)

TEXT_VOCAB: Tuple[str, ...] = (
    "<null>",
    "IDLE",
    "SPEAK",
    "TURN_AROUND",
    "TURN_LEFT",
    "TURN_RIGHT",
    "SMILE",
    "FROWN",
    "EXPRESS",
)
NULL_TEXT_ID = 0
AUDIO_WINDOW = 4


def text_id(command: str) -> int:
    return TEXT_VOCAB.index(command)


@dataclass
class ModelConfig:
    blocks: int = 6
    model_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    # default: every other block, starting at 0
    audio_blocks: Optional[Tuple[int, ...]] = None
    timestep_embed_dim: int = 64
    text_vocab: int = len(TEXT_VOCAB)
    max_text_tokens: int = 4
    audio_dim: int = 8
    latent_channels: int = 4
    patch: Tuple[int, int] = (2, 2)
    mlp_ratio: float = 4.0
    # block whose self-attention weights are recorded; None disables the probe
    probe_block: Optional[int] = -1

    def __post_init__(self):
        if self.audio_blocks is None:
            self.audio_blocks = tuple(range(0, self.blocks, 2))
        self.audio_blocks = tuple(int(b) for b in self.audio_blocks)
        self.patch = tuple(int(p) for p in self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch[0] * self.patch[1] * self.latent_channels

    @property
    def probe_index(self) -> Optional[int]:
        if self.probe_block is None:
            return None
        return self.probe_block % self.blocks

    def validate(self) -> "ModelConfig":
        if self.heads * self.head_dim != self.model_dim:
            raise ConfigError(f"heads*head_dim = {self.heads * self.head_dim} != model_dim {self.model_dim}")
        if not set(self.audio_blocks) <= set(range(self.blocks)):
            raise ConfigError(f"audio_blocks {self.audio_blocks} outside [0, {self.blocks})")
        if self.text_vocab < len(TEXT_VOCAB):
            raise ConfigError(f"text_vocab {self.text_vocab} smaller than the command vocabulary")
        return self


@dataclass(frozen=True, eq=False)
class AudioFeatures:
    """Audio feature stream of shape f x d."""

    data: torch.Tensor

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def zeros_like(self) -> "AudioFeatures":
        return AudioFeatures(torch.zeros_like(self.data))


@dataclass
class Conditions:
    """Everything the velocity prediction is conditioned on besides x_t and t."""

    first_frame: LatentVideo
    text_ids: Tuple[int, ...] = (NULL_TEXT_ID,)
    audio: Optional[AudioFeatures] = None
    anchors: AnchorSet = field(default_factory=AnchorSet)

    def text_tensor(self, length: int) -> torch.Tensor:
        ids = list(self.text_ids)[:length]
        ids += [NULL_TEXT_ID] * (length - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def drop_text(self) -> "Conditions":
        return Conditions(self.first_frame, (NULL_TEXT_ID,), self.audio, self.anchors)

    def drop_audio(self) -> "Conditions":
        audio = None if self.audio is None else self.audio.zeros_like()
        return Conditions(self.first_frame, self.text_ids, audio, self.anchors)

    def unconditional(self) -> "Conditions":
        """Text and audio both dropped; image and anchors kept."""
        return self.drop_text().drop_audio()

    def with_anchors(self, anchors: AnchorSet) -> "Conditions":
        return Conditions(self.first_frame, self.text_ids, self.audio, anchors)


def reshape_audio_windows(a: AudioFeatures) -> torch.Tensor:
    """Zero-pad the tail to a multiple of 4 and fold into N x 4 x d windows."""
    f, d = a.data.shape
    if f == 0:
        raise ShapeError("Audio stream has no frames")
    padded_len = math.ceil(f / AUDIO_WINDOW) * AUDIO_WINDOW
    data = a.data
    if padded_len != f:
        data = torch.cat([data, data.new_zeros(padded_len - f, d)], dim=0)
    return data.reshape(padded_len // AUDIO_WINDOW, AUDIO_WINDOW, d)


def align_windows(windows: torch.Tensor, frames: int) -> torch.Tensor:
    """Truncate or zero-pad windows so window j exists for every latent frame j."""
    n = windows.shape[0]
    if n >= frames:
        return windows[:frames]
    pad = windows.new_zeros(frames - n, *windows.shape[1:])
    return torch.cat([windows, pad], dim=0)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t followed by a two-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    @staticmethod
    def sinusoidal(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
        args = 1000.0 * t[..., None] * freqs
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.sinusoidal(t, self.freq_dim))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int, rope: RopeConfig):
        super().__init__()
        self.heads, self.head_dim, self.rope = heads, head_dim, rope
        self.qkv = nn.Linear(dim, 3 * heads * head_dim)
        self.proj = nn.Linear(heads * head_dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
        record: bool = False,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        n = x.shape[0]
        qkv = self.qkv(x).reshape(n, 3, self.heads, self.head_dim).permute(1, 2, 0, 3)
        q = apply_rope(qkv[0], positions, self.rope)
        k = apply_rope(qkv[1], positions, self.rope)
        scores = op_set(q, op_set(k, None, "transpose"), "matmul") / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[None, None, :], float("-inf"))
        weights = op_set(scores, None, "softmax_lastdim")
        out = op_set(weights, qkv[2], "matmul").permute(1, 0, 2).reshape(n, self.heads * self.head_dim)
        recorded = weights.detach().mean(dim=0) if record else None
        return self.proj(out), recorded


class TextCrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.q = nn.Linear(dim, inner)
        self.kv = nn.Linear(dim, 2 * inner)
        self.proj = nn.Linear(inner, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, m = x.shape[0], context.shape[0]
        q = self.q(x).reshape(n, self.heads, self.head_dim).transpose(0, 1)
        k, v = self.kv(context).reshape(m, 2, self.heads, self.head_dim).permute(1, 2, 0, 3)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(n, self.heads * self.head_dim)
        return self.proj(out)


class AudioWindowAttention(nn.Module):
    """
    Window-local audio cross-attention.

    Tokens of latent frame j attend only to the 4 slots of window j. Tokens
    that are not Video tokens get a zero residual. proj_out belongs to this
    branch alone. The value projection starts at zero so the branch is inert
    at initialization.
    """

    def __init__(self, dim: int, audio_dim: int, heads: int, head_dim: int):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(audio_dim, inner)
        self.v = nn.Linear(audio_dim, inner)
        self.proj_out = nn.Linear(inner, dim, bias=False)
        nn.init.zeros_(self.v.weight)
        nn.init.zeros_(self.v.bias)

    def window_weights(self, x: torch.Tensor, windows: torch.Tensor, frame_index: torch.Tensor) -> torch.Tensor:
        """Softmax weights of shape (L, heads, 4) over each token's own window."""
        n = x.shape[0]
        idx = frame_index.clamp(min=0)
        q = self.q(x).reshape(n, self.heads, self.head_dim)
        k = self.k(windows).reshape(windows.shape[0], AUDIO_WINDOW, self.heads, self.head_dim)[idx]
        scores = torch.einsum("lhd,lshd->lhs", q, k) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1)

    def dense_weights(self, x: torch.Tensor, windows: torch.Tensor, frame_index: torch.Tensor) -> torch.Tensor:
        """Head-averaged weights of shape (L, N, 4) over all windows; zero off the token's window."""
        local = self.window_weights(x, windows, frame_index).mean(dim=1)
        dense = local.new_zeros(x.shape[0], windows.shape[0], AUDIO_WINDOW)
        video = frame_index >= 0
        rows = torch.nonzero(video).squeeze(-1)
        dense[rows, frame_index[rows]] = local[rows]
        return dense

    def forward(self, x: torch.Tensor, windows: torch.Tensor, frame_index: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        if frame_index.shape != (n,):
            raise ShapeError(f"frame_index shape {tuple(frame_index.shape)} does not match {n} tokens")
        if int(frame_index.max()) >= windows.shape[0]:
            raise ShapeError(f"{windows.shape[0]} audio windows for {int(frame_index.max()) + 1} latent frames")
        idx = frame_index.clamp(min=0)
        weights = self.window_weights(x, windows, frame_index)
        v = self.v(windows).reshape(windows.shape[0], AUDIO_WINDOW, self.heads, self.head_dim)[idx]
        out = torch.einsum("lhs,lshd->lhd", weights, v).reshape(n, self.heads * self.head_dim)
        video = (frame_index >= 0).to(x.dtype)[:, None]
        return self.proj_out(out) * video


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, rope: RopeConfig, index: int):
        super().__init__()
        dim = cfg.model_dim
        self.index = index
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(dim, cfg.heads, cfg.head_dim, rope)
        self.norm_text = nn.LayerNorm(dim, eps=1e-6)
        self.text_attn = TextCrossAttention(dim, cfg.heads, cfg.head_dim)
        self.has_audio = index in cfg.audio_blocks
        if self.has_audio:
            self.norm_audio = nn.LayerNorm(dim, eps=1e-6)
            self.audio_attn = AudioWindowAttention(dim, cfg.audio_dim, cfg.heads, cfg.head_dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(
        self,
        x: torch.Tensor,
        c: torch.Tensor,
        positions: torch.Tensor,
        text: torch.Tensor,
        windows: Optional[torch.Tensor],
        frame_index: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
        record: bool = False,
        audio_enabled: bool = True,
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.adaLN_modulation(c).chunk(6, dim=-1)
        h, weights = self.attn(modulate(self.norm1(x), shift1, scale1), positions, key_mask, record)
        x = x + gate1 * h
        x = x + self.text_attn(self.norm_text(x), text)
        if self.has_audio and audio_enabled and windows is not None:
            x = x + self.audio_attn(self.norm_audio(x), windows, frame_index)
        x = x + gate2 * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x, weights


@dataclass
class AttentionRecord:
    """Head-averaged self-attention weights of the probe block."""

    weights: torch.Tensor
    sequence: TokenSequence


def _check_t(t: float) -> None:
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")


class DiTModel(nn.Module):
    def __init__(self, cfg: ModelConfig, rope: Optional[RopeConfig] = None):
        super().__init__()
        cfg.validate()
        rope = rope or RopeConfig(head_dim=cfg.head_dim)
        if rope.head_dim != cfg.head_dim:
            raise ConfigError(f"rope head_dim {rope.head_dim} != model head_dim {cfg.head_dim}")
        self.cfg, self.rope = cfg, rope
        dim = cfg.model_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, dim)
        self.t_embedder = TimestepEmbedder(dim, cfg.timestep_embed_dim)
        self.text_embed = nn.Embedding(cfg.text_vocab, dim)
        self.blocks = nn.ModuleList([DiTBlock(cfg, rope, i) for i in range(cfg.blocks)])
        self.norm_out = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN_out = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.head = nn.Linear(dim, cfg.patch_dim)
        for layer in (self.adaLN_out[-1], self.head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        self.audio_enabled = True

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def _embed(self, raw: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(raw.to(self.dtype))

    def build_sequence(
        self,
        x_t: LatentVideo,
        conds: Conditions,
        prefix: Optional[LatentVideo] = None,
        anchor_order: Optional[Sequence[AnchorRole]] = None,
    ) -> TokenSequence:
        return assemble_sequence(
            conds.first_frame,
            x_t,
            conds.anchors,
            prefix,
            embed=self._embed,
            patch=self.cfg.patch,
            rope=self.rope,
            anchor_order=anchor_order,
        )

    def forward(
        self,
        x_t: LatentVideo,
        t: float,
        conds: Conditions,
        prefix: Optional[LatentVideo] = None,
        anchor_order: Optional[Sequence[AnchorRole]] = None,
        key_mask: Optional[torch.Tensor] = None,
    ) -> LatentVideo:
        """Predict the velocity u(x_t, c, t) for the Video segment."""
        _check_t(t)
        seq = self.build_sequence(x_t, conds, prefix, anchor_order)
        return self._run(seq, t, conds, key_mask, probe=None)[0]

    def forward_with_attention(
        self,
        x_t: LatentVideo,
        t: float,
        conds: Conditions,
        prefix: Optional[LatentVideo] = None,
        anchor_order: Optional[Sequence[AnchorRole]] = None,
        key_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[LatentVideo, Optional[AttentionRecord]]:
        """forward plus the attention record of cfg.probe_block (None when recording is off)."""
        _check_t(t)
        seq = self.build_sequence(x_t, conds, prefix, anchor_order)
        return self._run(seq, t, conds, key_mask, probe=self.cfg.probe_index)

    def forward_sequence(
        self,
        seq: TokenSequence,
        t: float,
        conds: Conditions,
        key_mask: Optional[torch.Tensor] = None,
    ) -> LatentVideo:
        return self._run(seq, t, conds, key_mask, probe=None)[0]

    def sequence_with_attention(
        self,
        seq: TokenSequence,
        t: float,
        conds: Conditions,
        key_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[LatentVideo, Optional[AttentionRecord]]:
        return self._run(seq, t, conds, key_mask, probe=self.cfg.probe_index)

    def _run(
        self,
        seq: TokenSequence,
        t: float,
        conds: Conditions,
        key_mask: Optional[torch.Tensor],
        probe: Optional[int],
    ) -> Tuple[LatentVideo, Optional[AttentionRecord]]:
        # records are returned, never stored on the module
        dtype = self.dtype
        frames = seq.video_dims[0]
        c = self.t_embedder(torch.tensor([float(t)], dtype=dtype))[0]
        text = self.text_embed(conds.text_tensor(self.cfg.max_text_tokens))
        windows = None
        if conds.audio is not None:
            if conds.audio.dim != self.cfg.audio_dim:
                raise ShapeError(f"Audio dim {conds.audio.dim} != model audio_dim {self.cfg.audio_dim}")
            windows = align_windows(reshape_audio_windows(conds.audio), frames).to(dtype)

        record = None
        x = seq.tokens
        for block in self.blocks:
            x, weights = block(
                x,
                c,
                seq.positions,
                text,
                windows,
                seq.frame_index,
                key_mask=key_mask,
                record=block.index == probe,
                audio_enabled=self.audio_enabled,
            )
            if weights is not None:
                record = AttentionRecord(weights, seq)

        shift, scale = self.adaLN_out(c).chunk(2, dim=-1)
        out = self.head(modulate(self.norm_out(x), shift, scale))

        video = seq.video_segment
        local = seq.positions[video.start:video.stop].clone()
        local[:, 0] = seq.frame_index[video.start:video.stop]
        return unpatchify(out[video.start:video.stop], local, seq.patch, seq.video_dims), record
