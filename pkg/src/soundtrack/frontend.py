"""Modality frontends: byte-level BPE text tokenizer, speaker embedding,
dual audio/speech token lookup tables, and video frame rate matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

# Fixed instruction used for video-to-audio batches in place of a transcript.
V2A_PROMPT = "Generate audio for the video."


@dataclass
class TextTokenSeq:
    ids: list[int]
    vocab_size: int


@dataclass
class DualTokenStreams:
    audio_ids: list[int]
    speech_ids: list[int]
    rate_hz: float = 40.0

    def __post_init__(self):
        if len(self.audio_ids) != len(self.speech_ids):
            raise ValueError("audio and speech streams must have equal length")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")


@dataclass
class VideoFeatureSeq:
    frames: np.ndarray  # [N, d_v] float32
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be [N, d_v] with N >= 1")


class BpeTokenizer:
    """Byte-level BPE trained greedily on a corpus of strings.

    Base vocabulary is the 256 byte values; merges extend it. Ties between
    equally frequent pairs break lexicographically so training is
    deterministic.
    """

    def __init__(self, merges: list[tuple[int, int]] | None = None):
        self.merges: list[tuple[int, int]] = list(merges or [])
        self._rebuild()

    def _rebuild(self) -> None:
        self.vocab: dict[int, bytes] = {i: bytes([i]) for i in range(256)}
        self.ranks: dict[tuple[int, int], int] = {}
        for i, (a, b) in enumerate(self.merges):
            new_id = 256 + i
            self.vocab[new_id] = self.vocab[a] + self.vocab[b]
            self.ranks[(a, b)] = i

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.merges)

    @classmethod
    def train(cls, corpus: list[str], vocab_size: int) -> "BpeTokenizer":
        if not corpus:
            raise ValueError("empty corpus")
        if vocab_size <= 256:
            raise ValueError("vocab_size must exceed 256")
        seqs = [list(s.encode("utf-8")) for s in corpus]
        merges: list[tuple[int, int]] = []
        while 256 + len(merges) < vocab_size:
            counts: dict[tuple[int, int], int] = {}
            for seq in seqs:
                for pair in zip(seq, seq[1:]):
                    counts[pair] = counts.get(pair, 0) + 1
            if not counts:
                break
            best = max(counts.items(), key=lambda kv: (kv[1], [-x for x in kv[0]]))
            pair, freq = best
            if freq < 2:
                break
            new_id = 256 + len(merges)
            merges.append(pair)
            seqs = [_merge_pair(seq, pair, new_id) for seq in seqs]
        return cls(merges)

    def encode(self, text: str) -> TextTokenSeq:
        seq = list(text.encode("utf-8"))
        while len(seq) >= 2:
            pairs = set(zip(seq, seq[1:]))
            ranked = [p for p in pairs if p in self.ranks]
            if not ranked:
                break
            pair = min(ranked, key=lambda p: self.ranks[p])
            seq = _merge_pair(seq, pair, 256 + self.ranks[pair])
        return TextTokenSeq(seq, self.vocab_size)

    def decode(self, tokens: TextTokenSeq | list[int]) -> str:
        ids = tokens.ids if isinstance(tokens, TextTokenSeq) else tokens
        out = b""
        for i in ids:
            if i not in self.vocab:
                raise KeyError(f"unknown token id {i}")
            out += self.vocab[i]
        return out.decode("utf-8")


def _merge_pair(seq: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


class SpeakerEncoder(nn.Module):
    """Average-pools reference frames and projects the mean to d_spk.

    A 3-second crop of the reference track is chosen by the caller (random
    at train time, full clip when shorter).
    """

    def __init__(self, d_mel: int, d_spk: int):
        super().__init__()
        self.proj = nn.Linear(d_mel, d_spk)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError("frames must be [F, d_mel] with F >= 1")
        return self.proj(frames.mean(dim=0))


def crop_3s(frames: np.ndarray, frame_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random 3-second crop; the whole clip if it is shorter."""
    want = int(round(3.0 * frame_rate))
    n = frames.shape[0]
    if n <= want:
        return frames
    start = int(rng.integers(0, n - want + 1))
    return frames[start : start + want]


class DualTokenEmbedding(nn.Module):
    """Two disjoint lookup tables for the audio and speech token streams."""

    def __init__(self, vocab: int, d: int):
        super().__init__()
        self.audio = nn.Embedding(vocab, d)
        self.speech = nn.Embedding(vocab, d)

    def forward(self, ids: torch.Tensor, stream: str) -> torch.Tensor:
        if stream == "audio":
            return self.audio(ids)
        if stream == "speech":
            return self.speech(ids)
        raise ValueError(f"unknown stream {stream!r}")


def subsample_frames(video: VideoFeatureSeq, stride: int = 3) -> VideoFeatureSeq:
    """Keep every stride-th frame, starting at frame 0."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return VideoFeatureSeq(video.frames[::stride], video.fps / stride)


def nearest_indices(n: int, target_len: int) -> np.ndarray:
    """Endpoint-preserving nearest-neighbor index map, half-up rounding."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    if target_len == 1 or n == 1:
        return np.zeros(target_len, dtype=np.int64)
    pos = np.arange(target_len) * (n - 1) / (target_len - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def resample_video(video: VideoFeatureSeq, target_len: int) -> np.ndarray:
    """Rate-match video frames to target_len rows by nearest neighbor."""
    idx = nearest_indices(video.frames.shape[0], target_len)
    return video.frames[idx]
