"""Transformer building blocks shared by the translation heads.

Pre-norm blocks throughout; boolean masks are True at positions that may be
attended to. Padding rows never influence valid rows because padded keys are
masked out and each row's layer norm is position-local.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def sinusoidal_position_vector(
    position: int, dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Encoding with sin(pos / 10000^(2k/dim)) at component 2k and the matching
    cosine at component 2k+1."""
    if position < 0:
        raise ValueError(f"position must be >= 0, got {position}")
    half = torch.arange((dim + 1) // 2, dtype=torch.float64)
    angles = float(position) / torch.pow(10000.0, 2.0 * half / dim)
    vec = torch.zeros(dim, dtype=torch.float64)
    vec[0::2] = torch.sin(angles)
    vec[1::2] = torch.cos(angles[: dim // 2])
    return vec.to(dtype)


def sinusoidal_position_table(max_positions: int, dim: int) -> torch.Tensor:
    return torch.stack(
        [sinusoidal_position_vector(p, dim) for p in range(max_positions)], dim=0
    )


class PositionalEncoding(nn.Module):
    """Fixed sinusoidal table with range checking."""

    def __init__(self, max_positions: int, dim: int):
        super().__init__()
        self.max_positions = max_positions
        self.dim = dim
        self.register_buffer("table", sinusoidal_position_table(max_positions, dim))

    def lookup(self, position: int) -> torch.Tensor:
        if not 0 <= position < self.max_positions:
            raise ValueError(
                f"position {position} out of range [0, {self.max_positions})"
            )
        return self.table[position]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, L, dim)
        length = x.size(1)
        if length > self.max_positions:
            raise ValueError(
                f"sequence length {length} exceeds max_positions {self.max_positions}"
            )
        return x + self.table[:length].to(x.dtype)


class FeatureAdapter(nn.Module):
    """Position-wise MLP with one hidden layer, used to map feature spaces.

    Applied independently to every time step, so perturbing one input row can
    only change the matching output row.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None):
        super().__init__()
        hidden_dim = out_dim if hidden_dim is None else hidden_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.size(-1) != self.in_dim:
            raise ValueError(
                f"adapter expects width {self.in_dim}, got {x.size(-1)}"
            )
        return self.fc2(F.relu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        # query: (B, Lq, dim); attn_mask broadcastable to (B, heads, Lq, Lk),
        # True where attention is allowed.
        b, lq, _ = query.shape
        lk = key.size(1)
        q = self.q_proj(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask, float("-inf"))
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = torch.matmul(weights, v).transpose(1, 2).reshape(b, lq, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.attn(h, h, h, attn_mask))
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        self_mask: torch.Tensor | None,
        memory_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, h, self_mask))
        h = self.norm2(x)
        x = x + self.dropout(self.cross_attn(h, memory, memory, memory_mask))
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class TransformerEncoder(nn.Module):
    def __init__(
        self, layers: int, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, heads, ffn_dim, dropout) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(
        self, x: torch.Tensor, key_padding_mask: torch.Tensor | None
    ) -> torch.Tensor:
        # key_padding_mask: (B, L) True at valid positions.
        attn_mask = None
        if key_padding_mask is not None:
            attn_mask = key_padding_mask[:, None, None, :]
        for block in self.blocks:
            x = block(x, attn_mask)
        return self.norm(x)


class TransformerDecoder(nn.Module):
    def __init__(
        self, layers: int, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            DecoderBlock(dim, heads, ffn_dim, dropout) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        if memory.size(1) < 1:
            raise ValueError("decoder requires a non-empty memory")
        self_mask = causal_mask(x.size(1), x.device)[None, None, :, :]
        cross_mask = None
        if memory_mask is not None:
            cross_mask = memory_mask[:, None, None, :]
        for block in self.blocks:
            x = block(x, memory, self_mask, cross_mask)
        return self.norm(x)


def causal_mask(length: int, device=None) -> torch.Tensor:
    """(L, L) boolean mask, True at or below the diagonal."""
    return torch.tril(torch.ones(length, length, dtype=torch.bool, device=device))


def init_transformer_weights(module: nn.Module) -> None:
    """Xavier-uniform on every matrix-shaped parameter (embeddings included).
    Keeps activations near unit scale at small widths, which plain SGD with a
    fixed learning rate depends on far more than Adam does."""
    for p in module.parameters():
        if p.dim() > 1:
            nn.init.xavier_uniform_(p)
