"""The lightweight transformer translation head used during the visual
initialing stage, plus the label-smoothed sequence loss shared by every
training stage."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .transformer import (
    PositionalEncoding,
    TransformerDecoder,
    TransformerEncoder,
    init_transformer_weights,
)

# preset -> (layers, heads, hidden, ffn)
LIGHT_T_PRESETS: dict[str, tuple[int, int, int, int]] = {
    "tiny": (1, 4, 256, 1024),
    "small": (2, 4, 512, 2048),
    "base": (3, 8, 512, 2048),
    "large": (4, 8, 1024, 4096),
}


@dataclass(frozen=True)
class LightTConfig:
    layers: int
    heads: int
    hidden: int
    ffn: int
    vocab_size: int
    max_positions: int = 512
    dropout: float = 0.1

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden {self.hidden} must be divisible by heads {self.heads}"
            )
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size must be >= 5, got {self.vocab_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "hidden": self.hidden,
            "ffn": self.ffn,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "dropout": self.dropout,
        }

    @staticmethod
    def from_dict(raw: dict) -> "LightTConfig":
        cfg = LightTConfig(**raw)
        cfg.validate()
        return cfg


def build_light_t(
    preset: str,
    vocab_size: int,
    max_positions: int = 512,
    dropout: float = 0.1,
) -> LightTConfig:
    if preset not in LIGHT_T_PRESETS:
        raise ValueError(
            f"unknown preset {preset!r}, expected one of {sorted(LIGHT_T_PRESETS)}"
        )
    layers, heads, hidden, ffn = LIGHT_T_PRESETS[preset]
    cfg = LightTConfig(
        layers=layers,
        heads=heads,
        hidden=hidden,
        ffn=ffn,
        vocab_size=vocab_size,
        max_positions=max_positions,
        dropout=dropout,
    )
    cfg.validate()
    return cfg


class TargetEmbedding(nn.Module):
    """Word embedding plus sinusoidal position encoding: z_i = WEL(o_i) + PE(i).

    The embedding is scaled by sqrt(dim) before the addition so the token
    signal is not drowned by the unit-scale position encoding.
    """

    def __init__(self, vocab_size: int, dim: int, max_positions: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.scale = math.sqrt(dim)
        self.embedding = nn.Embedding(vocab_size, dim)
        self.positional = PositionalEncoding(max_positions, dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError(
                f"token id out of range [0, {self.vocab_size}): "
                f"min={int(ids.min())}, max={int(ids.max())}"
            )
        return self.positional(self.embedding(ids) * self.scale)


class LMHead(nn.Module):
    """Linear projection to vocabulary followed by log-softmax."""

    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.proj = nn.Linear(dim, vocab_size)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.proj(hidden), dim=-1)


def label_smoothed_ce(
    logprobs: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    epsilon: float = 0.2,
) -> torch.Tensor:
    """Mean over unmasked positions of the cross entropy against the smoothed
    target q_k = (1 - eps) * 1[k = target] + eps / V.

    Because the loss equals H(q) + KL(q || p), it can never drop below the
    entropy of the smoothed target distribution.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if not bool(mask.any()):
        raise ValueError("loss undefined: every target position is masked")
    vocab = logprobs.size(-1)
    nll = -logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    uniform = -logprobs.sum(dim=-1) / vocab
    per_pos = (1.0 - epsilon) * nll + epsilon * uniform
    return per_pos[mask].mean()


def smoothed_target_entropy(vocab_size: int, epsilon: float) -> float:
    """Entropy of the smoothed one-hot target, the floor of the loss above."""
    p_target = (1.0 - epsilon) + epsilon / vocab_size
    p_other = epsilon / vocab_size
    ent = -p_target * math.log(p_target)
    if vocab_size > 1 and p_other > 0.0:
        ent -= (vocab_size - 1) * p_other * math.log(p_other)
    return ent


class LightT(nn.Module):
    """Encoder-decoder translation model over externally supplied source
    embeddings. The encoder consumes adapted visual features plus positional
    encoding; the decoder is causal and teacher-forced during training.

    Also usable as the seq2seq core of any pipeline stage because it exposes
    the same encode/decode surface as the pretrained backend stand-in.
    """

    def __init__(self, config: LightTConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.positional = PositionalEncoding(config.max_positions, config.hidden)
        self.input_dropout = nn.Dropout(config.dropout)
        self.encoder = TransformerEncoder(
            config.layers, config.hidden, config.heads, config.ffn, config.dropout
        )
        self.target_embed = TargetEmbedding(
            config.vocab_size, config.hidden, config.max_positions
        )
        self.decoder = TransformerDecoder(
            config.layers, config.hidden, config.heads, config.ffn, config.dropout
        )
        self.head = LMHead(config.hidden, config.vocab_size)
        init_transformer_weights(self)

    @property
    def embedding_width(self) -> int:
        return self.config.hidden

    def encode_embeddings(
        self, features: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Add positional encoding and run the text encoder. Padded rows are
        zeroed on output so they cannot leak downstream."""
        if features.size(-1) != self.config.hidden:
            raise ValueError(
                f"encoder expects width {self.config.hidden}, got {features.size(-1)}"
            )
        if mask.shape != features.shape[:2]:
            raise ValueError(
                f"mask shape {tuple(mask.shape)} does not match features "
                f"{tuple(features.shape[:2])}"
            )
        # same sqrt(dim) scaling as the embedding path, for the same reason
        x = self.input_dropout(self.positional(features * math.sqrt(self.config.hidden)))
        hidden = self.encoder(x, mask)
        return hidden * mask[:, :, None].to(hidden.dtype)

    def decode_logprobs(
        self,
        target_in_ids: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Causal decode of the teacher-forcing inputs; returns per-position
        next-token log-probabilities (B, L, V)."""
        z = self.input_dropout(self.target_embed(target_in_ids))
        y = self.decoder(z, memory, memory_mask)
        return self.head(y)

    def forward(
        self,
        features: torch.Tensor,
        feature_mask: torch.Tensor,
        target_ids: torch.Tensor,
        target_mask: torch.Tensor,
        label_smoothing: float = 0.2,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced loss on full target sequences (bos ... eos pad*)."""
        memory = self.encode_embeddings(features, feature_mask)
        logprobs = self.decode_logprobs(target_ids[:, :-1], memory, feature_mask)
        loss = label_smoothed_ce(
            logprobs, target_ids[:, 1:], target_mask[:, 1:], label_smoothing
        )
        return loss, logprobs
