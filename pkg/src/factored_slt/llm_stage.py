"""The fine-tuning stage around a pluggable pretrained seq2seq backend.

The backend's encoder must accept externally supplied dense embeddings so
that its word-embedding layer can be replaced by a position-wise adapter fed
from the frozen visual encoder. A desk-scale encoder-decoder transformer
pretrained with a denoising objective on synthetic monolingual text stands in
for a large pretrained model; real checkpoints can be wrapped behind the same
protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    Vocabulary,
    tokenize,
)
from .light_t import LMHead, TargetEmbedding, label_smoothed_ce
from .pipeline import TranslationPipeline
from .transformer import (
    FeatureAdapter,
    PositionalEncoding,
    TransformerDecoder,
    TransformerEncoder,
    init_transformer_weights,
)

FEATURE_TAPS = ("frame_wise", "sign_wise", "hidden_states")


class Seq2SeqCore(Protocol):
    """Minimal surface a translation core must expose to the pipeline."""

    embedding_width: int

    def encode_embeddings(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor: ...

    def decode_logprobs(
        self, target_in_ids: torch.Tensor, memory: torch.Tensor, memory_mask: torch.Tensor
    ) -> torch.Tensor: ...


@dataclass(frozen=True)
class FreezePolicy:
    backbone_frozen: bool = True
    temporal_frozen: bool = True

    def to_dict(self) -> dict:
        return {
            "backbone_frozen": self.backbone_frozen,
            "temporal_frozen": self.temporal_frozen,
        }

    @staticmethod
    def from_dict(raw: dict) -> "FreezePolicy":
        return FreezePolicy(
            backbone_frozen=bool(raw.get("backbone_frozen", True)),
            temporal_frozen=bool(raw.get("temporal_frozen", True)),
        )


@dataclass(frozen=True)
class TinyBackendConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 256
    ffn: int = 1024
    vocab_size: int = 34
    max_positions: int = 128
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
    def from_dict(raw: dict) -> "TinyBackendConfig":
        cfg = TinyBackendConfig(**raw)
        cfg.validate()
        return cfg


class TinySeq2SeqBackend(nn.Module):
    """Encoder-decoder transformer with its own source and target word
    embeddings, an LM head, and an encoder that accepts external embeddings.

    Feeding the model's own source embeddings through the external path is
    exactly its native text-to-text forward, which is what lets an adapter
    replace the source word-embedding layer during fine-tuning.
    """

    def __init__(self, config: TinyBackendConfig, vocab: Vocabulary | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = vocab
        self.source_embed = nn.Embedding(config.vocab_size, config.hidden)
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

    def embed_source_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Raw source word embeddings, before positional encoding."""
        if ids.numel() and int(ids.max()) >= self.config.vocab_size:
            raise ValueError("source token id out of range")
        return self.source_embed(ids)

    def encode_embeddings(
        self, features: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        if features.size(-1) != self.config.hidden:
            raise ValueError(
                f"encoder expects width {self.config.hidden}, got {features.size(-1)}"
            )
        scaled = features * math.sqrt(self.config.hidden)
        x = self.input_dropout(self.positional(scaled))
        hidden = self.encoder(x, mask)
        return hidden * mask[:, :, None].to(hidden.dtype)

    def decode_logprobs(
        self,
        target_in_ids: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        z = self.input_dropout(self.target_embed(target_in_ids))
        y = self.decoder(z, memory, memory_mask)
        return self.head(y)

    def forward_text(
        self,
        src_ids: torch.Tensor,
        src_mask: torch.Tensor,
        target_in_ids: torch.Tensor,
    ) -> torch.Tensor:
        """Native text-to-text path: own word embeddings into the external
        embedding entry point."""
        memory = self.encode_embeddings(self.embed_source_tokens(src_ids), src_mask)
        return self.decode_logprobs(target_in_ids, memory, src_mask)


def llm_adapter(
    feature_dim: int, backend_width: int, hidden_dim: int | None = None
) -> FeatureAdapter:
    """Position-wise MLP replacing the backend encoder's word-embedding layer."""
    return FeatureAdapter(feature_dim, backend_width, hidden_dim)


def apply_freeze(pipeline: TranslationPipeline, policy: FreezePolicy) -> TranslationPipeline:
    """Disable gradient flow (and running-statistic updates) on the frozen
    parts of the visual encoder; carried-over stage-1 modules stay frozen too."""
    if policy.backbone_frozen:
        pipeline.mark_frozen(pipeline.visual_encoder.backbone)
    if policy.temporal_frozen:
        pipeline.mark_frozen(pipeline.visual_encoder.temporal)
    if pipeline.vl_adapter is not None:
        pipeline.mark_frozen(pipeline.vl_adapter)
    if pipeline.lt_encoder is not None:
        pipeline.mark_frozen(pipeline.lt_encoder)
    return pipeline


def finetune_forward(
    pipeline: TranslationPipeline,
    videos: torch.Tensor,
    video_lengths: torch.Tensor,
    target_ids: torch.Tensor,
    target_mask: torch.Tensor,
    label_smoothing: float = 0.2,
) -> torch.Tensor:
    """Fine-tuning loss: adapter plus backend over frozen visual features."""
    if pipeline.tap == "hidden_states" and pipeline.lt_encoder is None:
        raise ValueError("hidden_states tap requires a retained stage-1 text encoder")
    return pipeline(videos, video_lengths, target_ids, target_mask, label_smoothing)


# -- denoising pretraining ---------------------------------------------------


@dataclass
class PretrainStats:
    steps: int
    initial_val_loss: float
    final_val_loss: float
    holdout_token_accuracy: float


def sample_monolingual_sentences(
    vocab: Vocabulary,
    count: int,
    length_range: tuple[int, int],
    seed: int,
    transitions: dict[str, list[str]] | None = None,
) -> list[str]:
    """Random sentences over the non-special tokens. With a successor table
    (token -> allowed next tokens) the sampler walks that chain, matching the
    synthetic corpus language; otherwise tokens are uniform."""
    words = list(vocab.tokens[4:])
    if not words:
        raise ValueError("vocabulary carries no content tokens")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0C]))
    lo, hi = length_range
    out = []
    for _ in range(count):
        length = int(rng.integers(lo, hi + 1))
        if transitions is None:
            sent = [words[i] for i in rng.integers(0, len(words), size=length)]
        else:
            sent = [words[rng.integers(0, len(words))]]
            while len(sent) < length:
                successors = transitions[sent[-1]]
                sent.append(successors[rng.integers(0, len(successors))])
        out.append(" ".join(sent))
    return out


def corrupt_tokens(
    ids: np.ndarray,
    rng: np.random.Generator,
    mask_prob: float = 0.3,
    delete_prob: float = 0.1,
) -> np.ndarray:
    """Denoising corruption of a bos...eos sequence: random token masking
    (to unk) and random token deletion, specials untouched."""
    inner = ids[1:-1]
    keep = rng.random(len(inner)) >= delete_prob
    kept = inner[keep]
    if len(kept) == 0:
        kept = inner[:1]
    masked = np.where(rng.random(len(kept)) < mask_prob, UNK_ID, kept)
    return np.concatenate(([BOS_ID], masked, [EOS_ID])).astype(np.int64)


def _pad_id_batch(seqs: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    l_max = max(len(s) for s in seqs)
    ids = np.full((len(seqs), l_max), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = ids != PAD_ID
    return torch.from_numpy(ids), torch.from_numpy(mask)


def _denoise_loss(
    backend: TinySeq2SeqBackend,
    originals: list[np.ndarray],
    corrupted: list[np.ndarray],
) -> torch.Tensor:
    src_ids, src_mask = _pad_id_batch(corrupted)
    tgt_ids, tgt_mask = _pad_id_batch(originals)
    logprobs = backend.forward_text(src_ids, src_mask, tgt_ids[:, :-1])
    return label_smoothed_ce(logprobs, tgt_ids[:, 1:], tgt_mask[:, 1:], epsilon=0.0)


def reconstruction_accuracy(
    backend: TinySeq2SeqBackend, sentences: Sequence[str], vocab: Vocabulary
) -> float:
    """Teacher-forced per-token argmax accuracy when reconstructing clean
    sentences through the text-to-text path."""
    backend.eval()
    correct = 0
    total = 0
    with torch.no_grad():
        for sentence in sentences:
            ids = tokenize(sentence, vocab).ids
            src_ids, src_mask = _pad_id_batch([ids])
            logprobs = backend.forward_text(src_ids, src_mask, src_ids[:, :-1])
            pred = logprobs.argmax(dim=-1)[0]
            ref = torch.from_numpy(ids[1:])
            correct += int((pred == ref).sum())
            total += len(ref)
    return correct / max(total, 1)


def pretrain_tiny_backend(
    sentences: Sequence[str],
    vocab: Vocabulary,
    config: TinyBackendConfig | None = None,
    steps: int = 1500,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    mask_prob: float = 0.3,
    delete_prob: float = 0.1,
    holdout: int = 64,
) -> tuple[TinySeq2SeqBackend, PretrainStats]:
    """Train the stand-in backend on the reconstruct-from-corruption pretext.

    With steps=0 the returned model is exactly its seeded random
    initialization. Otherwise validation reconstruction loss must end below
    the random-initialization loss, which the returned stats expose.
    """
    if config is None:
        config = TinyBackendConfig(vocab_size=vocab.size)
    if config.vocab_size != vocab.size:
        raise ValueError(
            f"backend vocab_size {config.vocab_size} != vocabulary size {vocab.size}"
        )
    if len(sentences) <= holdout:
        raise ValueError("need more sentences than the holdout size")
    torch.manual_seed(seed)
    backend = TinySeq2SeqBackend(config, vocab=vocab)
    train_ids = [tokenize(s, vocab).ids for s in sentences[holdout:]]
    val_ids = [tokenize(s, vocab).ids for s in sentences[:holdout]]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE]))

    def val_loss() -> float:
        backend.eval()
        with torch.no_grad():
            val_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
            corrupted = [
                corrupt_tokens(s, val_rng, mask_prob, delete_prob) for s in val_ids
            ]
            return float(_denoise_loss(backend, val_ids, corrupted))

    initial = val_loss()
    optimizer = torch.optim.Adam(backend.parameters(), lr=lr)
    backend.train()
    for _ in range(steps):
        pick = rng.integers(0, len(train_ids), size=batch_size)
        originals = [train_ids[i] for i in pick]
        corrupted = [corrupt_tokens(s, rng, mask_prob, delete_prob) for s in originals]
        loss = _denoise_loss(backend, originals, corrupted)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    final = val_loss()
    accuracy = reconstruction_accuracy(
        backend, [" ".join(vocab.token_for(int(i)) for i in s[1:-1]) for s in val_ids], vocab
    )
    backend.eval()
    return backend, PretrainStats(
        steps=steps,
        initial_val_loss=initial,
        final_val_loss=final,
        holdout_token_accuracy=accuracy,
    )
