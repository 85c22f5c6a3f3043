"""Cross-modal aligner: two intra-modal causal cross-attention blocks
(audio<->speech) and two inter-modal non-causal blocks (audio<-video,
speech<-video), combined per stream by residual sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import AttentionMask, DimensionError, masked_attention


@dataclass
class FusedStreams:
    h_audio: torch.Tensor  # [T, d]
    h_speech: torch.Tensor  # [T, d]


class CrossAttentionBlock(nn.Module):
    """Single-head cross attention with its own q/k/v/out projections."""

    def __init__(self, d: int):
        super().__init__()
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(
        self, query: torch.Tensor, kv: torch.Tensor, causal: bool
    ) -> torch.Tensor:
        if causal:
            if query.shape[0] != kv.shape[0]:
                raise DimensionError("causal cross attention needs equal lengths")
            mask = AttentionMask.causal(query.shape[0])
        else:
            mask = AttentionMask.non_causal(query.shape[0], kv.shape[0])
        out = masked_attention(self.wq(query), self.wk(kv), self.wv(kv), mask)
        return self.wo(out)


class CrossModalAligner(nn.Module):
    """Fuses token embeddings with video features.

    h_audio = e_audio + causal(e_audio <- e_speech) + noncausal(e_audio <- video)
    h_speech = e_speech + causal(e_speech <- e_audio) + noncausal(e_speech <- video)

    The causal mask lets each stream see the counterpart up to and including
    the current step; video attention is unrestricted. Raw video features
    are bridged from d_v to d with a learned projection.
    """

    def __init__(self, d: int, d_v: int):
        super().__init__()
        self.video_proj = nn.Linear(d_v, d)
        self.audio_from_speech = CrossAttentionBlock(d)
        self.speech_from_audio = CrossAttentionBlock(d)
        self.audio_from_video = CrossAttentionBlock(d)
        self.speech_from_video = CrossAttentionBlock(d)

    def forward(
        self, e_audio: torch.Tensor, e_speech: torch.Tensor, video: torch.Tensor
    ) -> FusedStreams:
        if e_audio.shape != e_speech.shape:
            raise DimensionError("audio/speech embedding shapes differ")
        fv = self.video_proj(video)
        h_a = (
            e_audio
            + self.audio_from_speech(e_audio, e_speech, causal=True)
            + self.audio_from_video(e_audio, fv, causal=False)
        )
        h_s = (
            e_speech
            + self.speech_from_audio(e_speech, e_audio, causal=True)
            + self.speech_from_video(e_speech, fv, causal=False)
        )
        return FusedStreams(h_a, h_s)

    def zero_output_projections(self) -> None:
        """Used by tests: with all output projections zeroed the aligner is
        the identity on both streams."""
        for blk in (
            self.audio_from_speech,
            self.speech_from_audio,
            self.audio_from_video,
            self.speech_from_video,
        ):
            nn.init.zeros_(blk.wo.weight)
