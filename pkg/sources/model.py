"""
Small diffusion transformer with adaLN-Zero conditioning.

Images are cut into p x p patches, projected to D channels and processed by
`depth` transformer blocks whose attention rotates queries and keys with
RoPE-2D at the positions of a PositionGrid (or 1-D RoPE for flat positions).
With form=sinpe the same positions feed an additive sinusoidal embedding
instead. The conditioning vector is the sum of the timestep embedding, the
micro-condition features and the class embedding.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from sources import numerics, posenc, rpe2d
from sources.conditioning import MicroCondition, N_SCALARS, embed_microconditions
from sources.errors import ConfigError, DimensionError, InputError
from sources.posenc import PEConfig, Rotation2D

SCALE_MODES = ("train", "extrapolate")


@dataclass
class ModelConfig:
    patch_size: int = 2
    channels: int = 1
    hidden_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    num_classes: int = 8
    pe: PEConfig = field(default_factory=lambda: PEConfig(d=16))
    dim_per_scalar: int = 32
    use_micro_cond: bool = True
    class_dropout: float = 0.1
    mlp_ratio: int = 4
    freq_dim: int = 256
    timesteps: int = 1000

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}",
                              key="model.hidden_dim")
        if self.pe.form == "rope":
            if self.head_dim % 4:
                raise ConfigError(f"head dim {self.head_dim} must be divisible by 4 for RoPE-2D",
                                  key="model.num_heads")
        elif self.hidden_dim % 4:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be divisible by 4 for 2-D SinPE",
                              key="model.hidden_dim")
        if self.pe.d != self.head_dim:
            raise ConfigError(f"pe.d={self.pe.d} differs from head dim {self.head_dim}", key="pe.d")
        if self.dim_per_scalar <= 0 or self.dim_per_scalar % 2:
            raise ConfigError(f"must be positive and even, got {self.dim_per_scalar}", key="cond.dim_per_scalar")
        if self.num_classes < 1:
            raise ConfigError(f"need at least one class, got {self.num_classes}", key="model.num_classes")
        if self.freq_dim % 2:
            raise ConfigError(f"timestep frequency dim must be even, got {self.freq_dim}", key="model.freq_dim")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def cond_width(self) -> int:
        """Width of the conditioning vector, fixed by the eight micro-condition scalars."""
        return N_SCALARS * self.dim_per_scalar

    @property
    def flat_positions(self) -> bool:
        return self.pe.strategy == "rpe2d" and self.pe.variant == "naive"

    @property
    def train_tokens(self) -> int:
        return self.pe.h_train * self.pe.w_train

    def rotary_dim(self, flat: bool) -> int:
        """Dimension in the NTK exponent: the full encoding width, or one axis of it with ntk_dim=axis."""
        width = self.head_dim if self.pe.form == "rope" else self.hidden_dim
        if flat or self.pe.ntk_dim == "head":
            return width
        return width // 2


@dataclass
class PatchSequence:
    tokens: torch.Tensor
    h: int
    w: int
    grid: Optional[rpe2d.Positions] = None

    def __post_init__(self):
        if self.tokens.shape[-2] != self.h * self.w:
            raise DimensionError(f"{self.tokens.shape[-2]} tokens for a {self.h}x{self.w} patch grid")
        if isinstance(self.grid, rpe2d.PositionGrid) and (self.grid.h, self.grid.w) != (self.h, self.w):
            raise DimensionError(f"grid {self.grid.h}x{self.grid.w} does not match patches {self.h}x{self.w}")


def patchify(images: torch.Tensor, p: int) -> Tuple[torch.Tensor, int, int]:
    """(B, C, p*h, p*w) -> (B, h*w, C*p*p), patches in row-major order."""
    b, c, height, width = images.shape
    if height % p or width % p:
        raise DimensionError(f"image extents {height}x{width} not divisible by patch size {p}")
    h, w = height // p, width // p
    patches = images.reshape(b, c, h, p, w, p).permute(0, 2, 4, 1, 3, 5)
    return patches.reshape(b, h * w, c * p * p), h, w


def unpatchify(patches: torch.Tensor, p: int, h: int, w: int, channels: int) -> torch.Tensor:
    """Inverse of patchify."""
    b = patches.shape[0]
    if patches.shape[1:] != (h * w, channels * p * p):
        raise DimensionError(f"cannot unpatchify {tuple(patches.shape)} into {channels}x{h}x{w} patches of {p}")
    x = patches.reshape(b, h, w, channels, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, h * p, w * p)


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, channels: int, hidden_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(channels * patch_size * patch_size, hidden_dim)

    def forward(self, images: torch.Tensor) -> PatchSequence:
        patches, h, w = patchify(images, self.patch_size)
        return PatchSequence(tokens=self.proj(patches), h=h, w=w)


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features followed by a two layer SiLU MLP."""
    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        weight = self.mlp[0].weight
        freqs = posenc.sinusoidal(t.detach().cpu().numpy(), self.freq_dim, 10000.0, dtype=weight.dtype)
        return self.mlp(freqs.to(weight.device))


class LabelEmbedder(nn.Module):
    """K learned class vectors plus a null vector at index K for unconditional passes."""
    def __init__(self, num_classes: int, width: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, width)

    def forward(self, labels: torch.Tensor, drop: Optional[torch.Tensor] = None) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"class labels must lie in [0, {self.num_classes}), got {labels.tolist()}")
        if drop is not None:
            labels = torch.where(torch.as_tensor(drop, dtype=torch.bool), torch.full_like(labels, self.num_classes), labels)
        return self.table(labels)


def attention_multiplier(d_head: int, scale_mode: str = "train", m_test: int = None, n_train: int = None) -> float:
    """
    Logit multiplier: 1/sqrt(d) when training, log_n(m)/sqrt(d) when sampling
    at a different token count (m test tokens, n training tokens).
    """
    if scale_mode not in SCALE_MODES:
        raise ConfigError(f"unknown scale mode '{scale_mode}', expected one of {SCALE_MODES}")
    base = 1.0 / math.sqrt(d_head)
    if scale_mode == "train":
        return base
    if m_test is None or n_train is None or m_test <= 1 or n_train <= 1:
        raise ConfigError(f"attention scale needs m_test > 1 and n_train > 1, got m={m_test}, n={n_train}")
    if m_test == n_train:
        return base
    return math.log2(m_test) / math.log2(n_train) * base


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, rotation: Optional[Rotation2D],
              multiplier: float) -> torch.Tensor:
    """Per-head attention over (B, heads, N, d) tensors with optional rotary positions."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    if rotation is not None:
        q = posenc.apply_rotation(q, rotation)
        k = posenc.apply_rotation(k, rotation)
    logits = numerics.matmul(q, k.transpose(-2, -1)) * multiplier
    return numerics.matmul(numerics.softmax_lastdim(logits), v)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLNModulation(nn.Module):
    """SiLU + linear map from the conditioning vector to `chunks` per-channel vectors, zero initialised."""
    def __init__(self, cond_width: int, hidden_dim: int, chunks: int):
        super().__init__()
        self.cond_width = cond_width
        self.chunks = chunks
        self.act = nn.SiLU()
        self.linear = nn.Linear(cond_width, chunks * hidden_dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, c: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        if c.shape[-1] != self.cond_width:
            raise ConfigError(f"conditioning width {c.shape[-1]} differs from configured {self.cond_width}",
                              key="cond.dim_per_scalar")
        return self.linear(self.act(c)).chunk(self.chunks, dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.proj = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, x: torch.Tensor, rotation: Optional[Rotation2D], multiplier: float) -> torch.Tensor:
        b, n, _ = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        out = attention(qkv[0], qkv[1], qkv[2], rotation, multiplier)
        return self.proj(out.transpose(1, 2).reshape(b, n, -1))


class DiTBlock(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, cond_width: int, mlp_ratio: int = 4):
        super().__init__()
        self.attn = SelfAttention(hidden_dim, num_heads)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_dim, mlp_ratio * hidden_dim),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_ratio * hidden_dim, hidden_dim),
        )
        self.adaLN_modulation = AdaLNModulation(cond_width, hidden_dim, 6)

    def forward(self, x: torch.Tensor, c: torch.Tensor, rotation: Optional[Rotation2D],
                multiplier: float) -> torch.Tensor:
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c)
        h = modulate(numerics.layer_norm(x), shift_msa, scale_msa)
        x = x + gate_msa.unsqueeze(1) * self.attn(h, rotation, multiplier)
        h = modulate(numerics.layer_norm(x), shift_mlp, scale_mlp)
        return x + gate_mlp.unsqueeze(1) * self.mlp(h)


class FinalLayer(nn.Module):
    def __init__(self, hidden_dim: int, patch_size: int, channels: int, cond_width: int):
        super().__init__()
        self.adaLN_modulation = AdaLNModulation(cond_width, hidden_dim, 2)
        self.linear = nn.Linear(hidden_dim, patch_size * patch_size * channels)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(c)
        return self.linear(modulate(numerics.layer_norm(x), shift, scale))


class DiT(nn.Module):
    """Epsilon-prediction transformer over patch tokens."""
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        width = config.cond_width
        self.patch_embed = PatchEmbed(config.patch_size, config.channels, config.hidden_dim)
        self.t_embedder = TimestepEmbedder(width, config.freq_dim)
        self.y_embedder = LabelEmbedder(config.num_classes, width)
        self.blocks = nn.ModuleList([
            DiTBlock(config.hidden_dim, config.num_heads, width, config.mlp_ratio) for _ in range(config.depth)
        ])
        self.final_layer = FinalLayer(config.hidden_dim, config.patch_size, config.channels, width)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        def _basic_init(module: nn.Linear):
            nn.init.xavier_uniform_(module.weight)
            nn.init.zeros_(module.bias)
        for block in self.blocks:
            _basic_init(block.attn.qkv)
            _basic_init(block.attn.proj)
            _basic_init(block.mlp[0])
            _basic_init(block.mlp[2])
        _basic_init(self.patch_embed.proj)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        nn.init.normal_(self.y_embedder.table.weight, std=0.02)

    def condition(self, t: torch.Tensor, labels: torch.Tensor, conds: Optional[Sequence[MicroCondition]],
                  image_size: Tuple[int, int], drop_labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        """timestep embedding + micro-condition features + class embedding"""
        t = torch.as_tensor(t)
        if t.numel() and (t.min() < 0 or t.max() >= self.config.timesteps):
            raise InputError(f"timesteps must lie in [0, {self.config.timesteps}), got {t.tolist()}")
        c = self.t_embedder(t)
        if self.config.use_micro_cond:
            if conds is None:
                conds = [MicroCondition.full_frame(*image_size)] * c.shape[0]
            if len(conds) != c.shape[0]:
                raise DimensionError(f"{len(conds)} micro-conditions for a batch of {c.shape[0]}")
            micro = embed_microconditions(conds, self.config.dim_per_scalar, width=self.config.cond_width)
            c = c + micro.to(dtype=c.dtype, device=c.device)
        return c + self.y_embedder(labels, drop_labels)

    def positions_for(self, h: int, w: int, batch: int,
                      grids: Optional[Sequence[rpe2d.Positions]] = None) -> np.ndarray:
        """(B, h*w, k) token positions: the given per-sample grids, else the test-time rule."""
        if grids is None:
            pe = self.config.pe.at_resolution(h, w)
            layout = posenc.flat_strategy_positions(pe) if self.config.flat_positions else posenc.strategy_grid(pe)
            grids = [layout] * batch
        if len(grids) != batch:
            raise DimensionError(f"{len(grids)} position grids for a batch of {batch}")
        for grid in grids:
            gh, gw = grid.h, grid.w
            if (gh, gw) != (h, w):
                raise DimensionError(f"position grid {gh}x{gw} does not match patch grid {h}x{w}")
        return rpe2d.stack_token_positions(grids)

    def encode_positions(self, positions: np.ndarray, pe: PEConfig, dtype: torch.dtype):
        """Rotation for rope, additive (B, N, D) embedding for sinpe."""
        flat = positions.shape[-1] == 1
        base_x, base_y = posenc.strategy_bases(pe, d_rot=self.config.rotary_dim(flat))
        if pe.form == "rope":
            if flat:
                return posenc.rotation1d(positions[..., 0], self.config.head_dim, base_x, dtype=dtype).unsqueeze(1)
            return posenc.rotation2d(positions[..., 0], positions[..., 1], self.config.head_dim,
                                     base_x, base_y, dtype=dtype).unsqueeze(1)
        d = self.config.hidden_dim
        if flat:
            return posenc.sinusoidal(positions[..., 0], d, base_x, dtype=dtype)
        return torch.cat([posenc.sinusoidal(positions[..., 0], d // 2, base_x, dtype=dtype),
                          posenc.sinusoidal(positions[..., 1], d // 2, base_y, dtype=dtype)], dim=-1)

    def run_tokens(self, tokens: torch.Tensor, c: torch.Tensor, positions: np.ndarray, pe: PEConfig,
                   multiplier: float) -> torch.Tensor:
        """Transformer trunk on (B, N, D) tokens at explicit positions, returns (B, N, C*p*p)."""
        encoded = self.encode_positions(positions, pe, tokens.dtype)
        rotation = None
        if isinstance(encoded, Rotation2D):
            rotation = encoded
        else:
            tokens = tokens + encoded.to(tokens.device)
        for block in self.blocks:
            tokens = block(tokens, c, rotation, multiplier)
        return self.final_layer(tokens, c)

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor,
                conds: Optional[Sequence[MicroCondition]] = None,
                grids: Optional[Sequence[rpe2d.Positions]] = None,
                scale_mode: str = "train",
                drop_labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, channels, height, width = x.shape
        if channels != self.config.channels:
            raise DimensionError(f"expected {self.config.channels} channels, got {channels}")
        seq = self.patch_embed(x)
        pe = self.config.pe.at_resolution(seq.h, seq.w)
        positions = self.positions_for(seq.h, seq.w, b, grids)
        multiplier = attention_multiplier(self.config.head_dim, scale_mode,
                                          m_test=seq.h * seq.w, n_train=self.config.train_tokens)
        c = self.condition(t, labels, conds, (height, width), drop_labels)
        out = self.run_tokens(seq.tokens, c, positions, pe, multiplier)
        return unpatchify(out, self.config.patch_size, seq.h, seq.w, channels)

    def named_parameter_list(self) -> List[Tuple[str, nn.Parameter]]:
        """Parameters in a stable order, the order checkpoints persist."""
        return list(self.named_parameters())
