"""Video-to-text pipeline assembly: visual encoder, position-wise feature
adapter, and a seq2seq translation core.

The same class realizes all three training setups. Stage 1 couples the
visual encoder to the lightweight head; stage 2 feeds a frozen visual
encoder into a pretrained backend through a fresh adapter; the joint
baseline is stage 2's architecture with nothing frozen and no stage-1
initialization. Because the module tree is built identically in each case,
a joint run whose core is the lightweight head coincides exactly with a
stage-1 run under the same seed and schedule.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Batch, SignVideo
from .light_t import LightT, label_smoothed_ce
from .transformer import FeatureAdapter
from .visual_encoder import (
    TAP_FRAME,
    TAP_HIDDEN,
    TAP_SIGN,
    TAP_TEXTUAL,
    FeatureSequence,
    VisualEncoder,
)

INPUT_TAPS = (TAP_FRAME, TAP_SIGN, "hidden_states")


def batch_to_tensors(batch: Batch) -> dict[str, torch.Tensor]:
    return {
        "videos": torch.from_numpy(batch.videos),
        "video_lengths": torch.from_numpy(batch.video_lengths),
        "target_ids": torch.from_numpy(batch.target_ids),
        "target_mask": torch.from_numpy(batch.target_mask),
    }


class TranslationPipeline(nn.Module):
    def __init__(
        self,
        visual_encoder: VisualEncoder,
        adapter: FeatureAdapter,
        core: nn.Module,
        tap: str = TAP_SIGN,
        vl_adapter: FeatureAdapter | None = None,
        lt_encoder: LightT | None = None,
    ):
        super().__init__()
        if tap not in INPUT_TAPS:
            raise ValueError(f"unknown feature tap {tap!r}, expected one of {INPUT_TAPS}")
        if tap == "hidden_states" and (vl_adapter is None or lt_encoder is None):
            raise ValueError(
                "hidden_states tap requires the stage-1 adapter and text encoder"
            )
        self.visual_encoder = visual_encoder
        self.adapter = adapter
        self.core = core
        self.tap = tap
        self.vl_adapter = vl_adapter
        self.lt_encoder = lt_encoder
        self.core_name = "light_t" if isinstance(core, LightT) else "backend"
        self._frozen_modules: list[nn.Module] = []

    # -- freezing ----------------------------------------------------------

    def mark_frozen(self, module: nn.Module) -> None:
        """Disable gradients and pin the module to inference mode so that
        normalization running statistics stay bit-stable too."""
        for p in module.parameters():
            p.requires_grad_(False)
        module.eval()
        if module not in self._frozen_modules:
            self._frozen_modules.append(module)

    def train(self, mode: bool = True):
        super().train(mode)
        for module in self._frozen_modules:
            module.eval()
        return self

    # -- structure ---------------------------------------------------------

    def component_modules(self) -> dict[str, nn.Module]:
        parts: dict[str, nn.Module] = {
            "visual_encoder": self.visual_encoder,
            "adapter": self.adapter,
            self.core_name: self.core,
        }
        if self.vl_adapter is not None:
            parts["vl_adapter"] = self.vl_adapter
        if self.lt_encoder is not None:
            parts["lt_encoder"] = self.lt_encoder
        return parts

    # -- forward paths ------------------------------------------------------

    def features(self, videos: torch.Tensor, lengths: torch.Tensor) -> FeatureSequence:
        """Visual features at the configured tap point."""
        if self.tap == TAP_FRAME:
            return self.visual_encoder.frame_features(videos, lengths)
        sign = self.visual_encoder(videos, lengths)
        if self.tap == TAP_SIGN:
            return sign
        textual = FeatureSequence(
            values=self.vl_adapter(sign.values) * sign.mask[:, :, None].to(sign.values.dtype),
            lengths=sign.lengths,
            tap=TAP_TEXTUAL,
        )
        hidden = self.lt_encoder.encode_embeddings(textual.values, textual.mask)
        return FeatureSequence(values=hidden, lengths=textual.lengths, tap=TAP_HIDDEN)

    def encode(self, videos: torch.Tensor, lengths: torch.Tensor):
        feats = self.features(videos, lengths)
        mask = feats.mask
        adapted = self.adapter(feats.values) * mask[:, :, None].to(feats.values.dtype)
        memory = self.core.encode_embeddings(adapted, mask)
        return memory, mask

    def forward(
        self,
        videos: torch.Tensor,
        video_lengths: torch.Tensor,
        target_ids: torch.Tensor,
        target_mask: torch.Tensor,
        label_smoothing: float = 0.2,
    ) -> torch.Tensor:
        memory, mask = self.encode(videos, video_lengths)
        logprobs = self.core.decode_logprobs(target_ids[:, :-1], memory, mask)
        return label_smoothed_ce(
            logprobs, target_ids[:, 1:], target_mask[:, 1:], label_smoothing
        )

    # -- decoding surface ----------------------------------------------------

    @torch.no_grad()
    def start_decode(self, video: SignVideo | np.ndarray):
        """Encode one video for incremental decoding; returns an opaque state."""
        frames = video.frames if isinstance(video, SignVideo) else video
        videos = torch.from_numpy(np.asarray(frames, dtype=np.float32))[None]
        lengths = torch.tensor([videos.size(1)], dtype=torch.long)
        was_training = self.training
        self.eval()
        try:
            memory, mask = self.encode(videos, lengths)
        finally:
            self.train(was_training)
        return memory, mask

    @torch.no_grad()
    def next_logprobs(self, state, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-token log-probabilities for a batch of decode prefixes."""
        memory, mask = state
        k = len(prefixes)
        length = max(len(p) for p in prefixes)
        if any(len(p) != length for p in prefixes):
            raise ValueError("decode prefixes must share one length per step")
        ids = torch.tensor(list(prefixes), dtype=torch.long).view(k, length)
        was_training = self.training
        self.eval()
        try:
            logprobs = self.core.decode_logprobs(
                ids, memory.expand(k, -1, -1), mask.expand(k, -1)
            )
        finally:
            self.train(was_training)
        return logprobs[:, -1, :].numpy()
