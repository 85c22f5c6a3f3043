"""Deterministic synthetic multimodal scenes.

Every scene is a short clip with a schedule of sound events. The event
schedule drives all modalities at once, so cross-modal structure is real
and learnable:

* video features carry a class-specific bump at each event onset,
* audio tokens carry a class-specific motif at the same onsets over a
  periodic base texture,
* the transcript names the event classes in onset order, and the speech
  tokens "dub" each word at its event onset,
* waveforms are band-limited tones keyed to token ids, so energy and
  spectral statistics reflect token content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SAMPLE_RATE, SAMPLES_PER_TOKEN, TOKEN_RATE_HZ
from .frontend import VideoFeatureSeq

EVENT_CLASSES = 8
CLASS_NAMES = ["bell", "drum", "horn", "click", "chime", "thud", "whistle", "knock"]
N_SPEAKERS = 16

MOTIF_LEN = 6  # token frames per event motif
BASE_TOKEN = 8  # base texture ids are BASE_TOKEN .. BASE_TOKEN+3
MOTIF_BASE = 64  # motif ids are MOTIF_BASE + class*8 + offset
# Speech ids live above the audio range so the unified id -> waveform-frame
# mapping is a single-valued function over the whole codec vocabulary.
SPEECH_BASE = 128  # speech ids are SPEECH_BASE + char*4 + speaker%4

D_MEL = 24  # reference-speech feature bands
D_VIDEO = 64


@dataclass
class SceneSpec:
    seed: int
    duration_s: float
    onsets: list[float]
    classes: list[int]
    speaker_id: int

    def __post_init__(self):
        if not self.onsets:
            raise ValueError("a scene needs at least one event")
        if any(t < 0 or t >= self.duration_s for t in self.onsets):
            raise ValueError("onsets must lie in [0, duration)")
        if len(self.onsets) != len(self.classes):
            raise ValueError("onsets and classes must pair up")

    @property
    def transcript(self) -> str:
        return " ".join(CLASS_NAMES[c] for c in self.classes)


@dataclass
class MultimodalSample:
    spec: SceneSpec
    video: VideoFeatureSeq
    text: str
    spk_frames: np.ndarray  # [F, D_MEL]
    audio_ids: list[int]
    speech_ids: list[int]
    audio_wave: np.ndarray
    speech_wave: np.ndarray


def tone_freq(token_id: int) -> float:
    return 50.0 + 4.5 * token_id


def char_index(ch: str) -> int:
    return 26 if ch == " " else ord(ch) - ord("a")


def speech_token(ch: str, speaker_id: int) -> int:
    return SPEECH_BASE + char_index(ch) * 4 + speaker_id % 4


def make_scene_spec(seed: int, speaker_id: int, duration_s: float = 2.0) -> SceneSpec:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 4))
    lo, hi = 0.15, duration_s - 0.4
    while True:
        onsets = np.sort(rng.uniform(lo, hi, size=k))
        if k == 1 or np.min(np.diff(onsets)) >= 0.3:
            break
    classes = [int(c) for c in rng.integers(0, EVENT_CLASSES, size=k)]
    return SceneSpec(seed, duration_s, [float(t) for t in onsets], classes, speaker_id)


def _class_direction(class_id: int) -> np.ndarray:
    v = np.random.default_rng(7000 + class_id).normal(size=D_VIDEO)
    return (v / np.linalg.norm(v)).astype(np.float32)


def _tones_from_ids(ids: np.ndarray, amps: np.ndarray) -> np.ndarray:
    """Per-token-frame sinusoids: frame t is amps[t]*sin(2*pi*f(ids[t])*n/sr).

    Speech-range ids additionally carry a speaker-group hum (the group is
    id % 4), so every frame is a pure function of its token id.
    """
    n = np.arange(SAMPLES_PER_TOKEN)
    freqs = 50.0 + 4.5 * ids.astype(np.float64)
    frames = amps[:, None] * np.sin(
        2 * np.pi * freqs[:, None] * n[None, :] / SAMPLE_RATE
    )
    voiced = ids >= SPEECH_BASE
    if voiced.any():
        hum_freqs = 880.0 + 40.0 * (ids % 4).astype(np.float64)
        hum = 0.12 * np.sin(2 * np.pi * hum_freqs[:, None] * n[None, :] / SAMPLE_RATE)
        frames = frames + voiced[:, None] * hum
    return frames.reshape(-1).astype(np.float32)


def band_features(wave: np.ndarray, n_bands: int) -> np.ndarray:
    """Log band-energy features per 64-sample frame, [F, n_bands]."""
    n = (len(wave) // SAMPLES_PER_TOKEN) * SAMPLES_PER_TOKEN
    frames = wave[:n].reshape(-1, SAMPLES_PER_TOKEN)
    spectra = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # [F, 33]
    edges = np.linspace(0, spectra.shape[1], n_bands + 1).astype(int)
    bands = np.stack(
        [spectra[:, edges[i] : edges[i + 1]].sum(axis=1) for i in range(n_bands)],
        axis=1,
    )
    return np.log(bands + 1e-8).astype(np.float32)


def gen_scene(spec: SceneSpec, video_fps: float = 30.0) -> MultimodalSample:
    rng = np.random.default_rng(spec.seed)
    t_tokens = int(round(spec.duration_s * TOKEN_RATE_HZ))
    onset_frames = [int(round(t * TOKEN_RATE_HZ)) for t in spec.onsets]

    # Audio tokens: periodic base texture + class motifs at onsets.
    audio_ids = np.array([BASE_TOKEN + (t % 4) for t in range(t_tokens)])
    amps = np.full(t_tokens, 0.25)
    for oi, cls in zip(onset_frames, spec.classes):
        for off in range(MOTIF_LEN):
            t = oi + off
            if t < t_tokens:
                audio_ids[t] = MOTIF_BASE + cls * 8 + off
                amps[t] = 0.85 * np.exp(-off / 2.0)
    audio_wave = _tones_from_ids(audio_ids, amps)

    # Speech tokens: each transcript word dubbed at its event onset,
    # silence (space) tokens elsewhere.
    speech_chars = [" "] * t_tokens
    for oi, cls in zip(onset_frames, spec.classes):
        for j, ch in enumerate(CLASS_NAMES[cls]):
            t = oi + j
            if t < t_tokens:
                speech_chars[t] = ch
    speech_ids = np.array([speech_token(c, spec.speaker_id) for c in speech_chars])
    speech_wave = _tones_from_ids(speech_ids, np.full(t_tokens, 0.3))

    # Video: smoothed noise plus class-direction bumps at onsets.
    n_frames = int(round(spec.duration_s * video_fps))
    noise = rng.normal(scale=0.1, size=(n_frames + 4, D_VIDEO))
    kernel = np.ones(5) / 5.0
    base = np.stack(
        [np.convolve(noise[:, j], kernel, mode="valid") for j in range(D_VIDEO)],
        axis=1,
    )
    video = base.astype(np.float32)
    for onset, cls in zip(spec.onsets, spec.classes):
        center = int(round(onset * video_fps))
        direction = _class_direction(cls)
        for off in range(-2, 3):
            f = center + off
            if 0 <= f < n_frames:
                video[f] += (1.0 - abs(off) / 3.0) * direction

    spk_frames = band_features(speech_wave, D_MEL)
    return MultimodalSample(
        spec=spec,
        video=VideoFeatureSeq(video, video_fps),
        text=spec.transcript,
        spk_frames=spk_frames,
        audio_ids=[int(i) for i in audio_ids],
        speech_ids=[int(i) for i in speech_ids],
        audio_wave=audio_wave,
        speech_wave=speech_wave,
    )


def gen_split(
    n_train: int, n_eval: int, seed: int, duration_s: float = 2.0
) -> tuple[list[SceneSpec], list[SceneSpec]]:
    """Disjoint train/eval scene specs; eval speakers never occur in train."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("split sizes must be >= 1")
    train_speakers = list(range(12))
    eval_speakers = list(range(12, N_SPEAKERS))
    train = [
        make_scene_spec(seed * 1_000_000 + i, train_speakers[i % 12], duration_s)
        for i in range(n_train)
    ]
    eval_ = [
        make_scene_spec(
            seed * 1_000_000 + 500_000 + i, eval_speakers[i % 4], duration_s
        )
        for i in range(n_eval)
    ]
    return train, eval_


_EMBED_ROLES = {
    "panns-like": (32, 16, 11),
    "vggish-like": (24, 12, 12),
}


def standin_embedder(wave: np.ndarray, role: str) -> np.ndarray:
    """Fixed deterministic feature extractors standing in for pretrained
    audio taggers: random-projection filterbank statistics (embeddings) or
    band-energy softmax rows (posteriors)."""
    if len(wave) == 0:
        raise ValueError("empty waveform")
    if role == "classifier-like":
        feats = band_features(wave, EVENT_CLASSES).mean(axis=0)
        z = feats - feats.max()
        p = np.exp(z)
        return (p / p.sum()).astype(np.float64)
    if role not in _EMBED_ROLES:
        raise ValueError(f"unknown embedder role {role!r}")
    n_bands, d_out, proj_seed = _EMBED_ROLES[role]
    feats = band_features(wave, n_bands)
    stats = np.concatenate([feats.mean(axis=0), feats.std(axis=0)])
    proj = np.random.default_rng(proj_seed).normal(
        size=(d_out, stats.shape[0])
    ) / np.sqrt(stats.shape[0])
    return (proj @ stats).astype(np.float64)
