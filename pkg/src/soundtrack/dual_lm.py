"""Decoder-only transformer over [speaker, text, BOS, fused multimodal]
rows, with two output heads emitting synchronized audio and speech token
streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .aligner import CrossModalAligner
from .config import EOS_ID, HEAD_VOCAB, PAD_ID, ModelConfig
from .frontend import (
    DualTokenEmbedding,
    SpeakerEncoder,
    nearest_indices,
)
from .numerics import MASK_FILL


@dataclass
class SequenceLayout:
    spk_span: tuple[int, int]
    text_span: tuple[int, int]
    bos_row: int
    mm_span: tuple[int, int]

    @property
    def total(self) -> int:
        return self.mm_span[1]


@dataclass
class DualLogits:
    audio: torch.Tensor  # [T, HEAD_VOCAB]
    speech: torch.Tensor  # [T, HEAD_VOCAB]


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        assert d % n_heads == 0
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[0]
        q = self.wq(x).view(length, self.n_heads, self.d_head).transpose(0, 1)
        k = self.wk(x).view(length, self.n_heads, self.d_head).transpose(0, 1)
        v = self.wv(x).view(length, self.n_heads, self.d_head).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.d_head)
        causal = torch.ones(length, length, dtype=torch.bool).tril()
        scores = scores.masked_fill(~causal, MASK_FILL)
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(0, 1).reshape(length, -1)
        return self.wo(out)


class TransformerBlock(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class DualStreamLM(nn.Module):
    """The full token model: frontend embeddings, aligner, causal decoder,
    and two independent projection heads.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.token_embed = DualTokenEmbedding(HEAD_VOCAB, d)
        self.text_embed = nn.Embedding(cfg.text_vocab, d)
        self.spk_encoder = SpeakerEncoder(cfg.d_mel, cfg.d_spk)
        self.spk_proj = nn.Linear(cfg.d_spk, d)
        self.pos_embed = nn.Embedding(cfg.max_len, d)
        self.bos = nn.Parameter(torch.zeros(d))
        self.null_audio = nn.Parameter(torch.zeros(d))
        self.null_speech = nn.Parameter(torch.zeros(d))
        self.aligner = CrossModalAligner(d, cfg.d_v)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(d)
        self.audio_head = nn.Linear(d, HEAD_VOCAB)
        self.speech_head = nn.Linear(d, HEAD_VOCAB)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
                if isinstance(m, nn.Linear) and m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.bos, std=0.02)
        nn.init.normal_(self.null_audio, std=0.02)
        nn.init.normal_(self.null_speech, std=0.02)

    # -- sequence assembly -------------------------------------------------

    def speaker_vector(self, frames: torch.Tensor | None) -> torch.Tensor:
        """Projected speaker embedding; the zero vector means "no speaker"."""
        if frames is None:
            return self.spk_proj(torch.zeros(self.cfg.d_spk, dtype=self.bos.dtype))
        return self.spk_proj(self.spk_encoder(frames))

    def fuse_tokens(
        self,
        audio_ids: torch.Tensor | None,
        speech_ids: torch.Tensor | None,
        video_rows: torch.Tensor,
        t_mm: int,
    ) -> torch.Tensor:
        """Aligner-fused per-step rows; a None stream uses its NULL embedding."""
        if audio_ids is not None:
            e_a = self.token_embed(audio_ids, "audio")
        else:
            e_a = self.null_audio.expand(t_mm, -1)
        if speech_ids is not None:
            e_s = self.token_embed(speech_ids, "speech")
        else:
            e_s = self.null_speech.expand(t_mm, -1)
        fused = self.aligner(e_a, e_s, video_rows)
        return fused.h_audio + fused.h_speech

    def build_sequence(
        self,
        spk_vec: torch.Tensor,
        text_ids: torch.Tensor,
        mm_rows: torch.Tensor,
    ) -> tuple[torch.Tensor, SequenceLayout]:
        l_text = text_ids.shape[0]
        t_mm = mm_rows.shape[0]
        layout = SequenceLayout(
            spk_span=(0, 1),
            text_span=(1, 1 + l_text),
            bos_row=1 + l_text,
            mm_span=(2 + l_text, 2 + l_text + t_mm),
        )
        rows = [spk_vec.unsqueeze(0)]
        if l_text:
            rows.append(self.text_embed(text_ids))
        rows.append(self.bos.unsqueeze(0))
        if t_mm:
            rows.append(mm_rows)
        seq = torch.cat(rows, dim=0)
        if seq.shape[0] > self.cfg.max_len:
            raise ValueError(f"sequence length {seq.shape[0]} exceeds max_len")
        seq = seq + self.pos_embed(torch.arange(seq.shape[0]))
        return seq, layout

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        x = seq
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def dual_heads(self, hidden: torch.Tensor, layout: SequenceLayout) -> DualLogits:
        """Logits predicting the multimodal-span tokens: step t is read off
        the hidden row just before multimodal row t (BOS for t = 0)."""
        lo, hi = layout.mm_span
        pred_rows = hidden[layout.bos_row : hi - 1] if hi > lo else hidden[0:0]
        return DualLogits(self.audio_head(pred_rows), self.speech_head(pred_rows))

    # -- teacher forcing ---------------------------------------------------

    def score(
        self,
        spk_frames: torch.Tensor | None,
        text_ids: torch.Tensor,
        video_frames: np.ndarray,
        audio_targets: torch.Tensor | None,
        speech_targets: torch.Tensor | None,
        video_len: int | None = None,
    ) -> DualLogits:
        """Teacher-forced dual logits for target streams of equal length.

        A None stream feeds its NULL embedding at every step (its head is
        simply ignored by the caller). Video frames are rate-matched to the
        multimodal length by nearest neighbor.
        """
        t_mm = (audio_targets if audio_targets is not None else speech_targets).shape[0]
        vlen = video_len if video_len is not None else t_mm
        idx = nearest_indices(video_frames.shape[0], vlen)
        video_rows = torch.as_tensor(video_frames[idx]).to(self.bos.dtype)
        mm = self.fuse_tokens(audio_targets, speech_targets, video_rows, t_mm)
        spk_vec = self.speaker_vector(spk_frames)
        seq, layout = self.build_sequence(spk_vec, text_ids, mm)
        hidden = self.forward(seq)
        return self.dual_heads(hidden, layout)

    # -- generation --------------------------------------------------------

    @torch.no_grad()
    def generate(
        self,
        spk_frames: torch.Tensor | None,
        text_ids: torch.Tensor,
        video_frames: np.ndarray,
        max_t: int,
        sampling: str = "greedy",
        top_k: int = 1,
        temperature: float = 1.0,
        seed: int = 0,
    ) -> tuple[list[int], list[int]]:
        """Autoregressive dual-stream decoding.

        Each step embeds the emitted prefix of both streams, fuses it with
        the (fully visible) video through the aligner, and samples one token
        per head. A stream that has emitted EOS keeps emitting PAD.
        """
        if max_t <= 0:
            raise ValueError("max_t must be positive")
        gen = torch.Generator().manual_seed(seed)
        idx = nearest_indices(video_frames.shape[0], max_t)
        video_rows = torch.as_tensor(video_frames[idx]).to(self.bos.dtype)
        spk_vec = self.speaker_vector(spk_frames)
        audio_out: list[int] = []
        speech_out: list[int] = []
        for t in range(max_t):
            if t == 0:
                mm = torch.zeros(0, self.cfg.d, dtype=self.bos.dtype)
            else:
                a_ids = torch.tensor(audio_out, dtype=torch.long)
                s_ids = torch.tensor(speech_out, dtype=torch.long)
                mm = self.fuse_tokens(a_ids, s_ids, video_rows, t)
            seq, layout = self.build_sequence(spk_vec, text_ids, mm)
            hidden = self.forward(seq)
            last = hidden[-1]
            a_tok = self._sample(self.audio_head(last), sampling, top_k, temperature, gen)
            s_tok = self._sample(self.speech_head(last), sampling, top_k, temperature, gen)
            if EOS_ID in audio_out:
                a_tok = PAD_ID
            if EOS_ID in speech_out:
                s_tok = PAD_ID
            audio_out.append(a_tok)
            speech_out.append(s_tok)
            if EOS_ID in audio_out and EOS_ID in speech_out:
                break
        return audio_out, speech_out

    @staticmethod
    def _sample(
        logits: torch.Tensor,
        sampling: str,
        top_k: int,
        temperature: float,
        gen: torch.Generator,
    ) -> int:
        if sampling == "greedy" or (sampling == "top_k" and top_k == 1):
            return int(logits.argmax())
        if sampling != "top_k":
            raise ValueError(f"unknown sampling mode {sampling!r}")
        if temperature <= 0:
            return int(logits.argmax())
        vals, idx = logits.topk(top_k)
        probs = torch.softmax(vals / temperature, dim=0)
        choice = int(torch.multinomial(probs, 1, generator=gen))
        return int(idx[choice])
