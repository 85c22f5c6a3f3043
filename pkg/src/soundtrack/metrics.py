"""Objective evaluation suite: energy filtering, audio-video peak
alignment, contrastive audio-speech retrieval, and embedding-statistics
distances (Frechet, KL, inception score).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal
import torch
import torch.nn as nn

from .config import CaspConfig, TOKEN_RATE_HZ
from .numerics import Adam, cosine_lr
from .synthdata import band_features

# -- energy filtering -------------------------------------------------------


def energy_db(wave: np.ndarray) -> float:
    """Mean-square energy in dB relative to full scale."""
    if len(wave) == 0:
        raise ValueError("empty waveform")
    return float(10.0 * np.log10(np.mean(np.square(wave, dtype=np.float64)) + 1e-12))


def filter_pair(
    audio_wave: np.ndarray, speech_wave: np.ndarray, threshold_db: float = -40.0
) -> bool:
    """True = keep. A pair is discarded iff either track's energy is
    strictly below the threshold."""
    return energy_db(audio_wave) >= threshold_db and energy_db(speech_wave) >= threshold_db


# -- peak alignment ---------------------------------------------------------


@dataclass
class PeakList:
    times: list[float]  # seconds, strictly increasing

    def __post_init__(self):
        for a, b in zip(self.times, self.times[1:]):
            if b - a <= 1e-9:
                raise ValueError("peak times must be strictly increasing")
        if self.times and self.times[0] < 0:
            raise ValueError("peak times must be non-negative")


def detect_peaks(
    envelope: np.ndarray,
    frame_rate: float,
    min_prominence: float = 0.1,
    min_separation: float = 0.1,
) -> PeakList:
    """Prominent local maxima, greedily suppressed within min_separation."""
    if len(envelope) < 3:
        raise ValueError("envelope too short")
    distance = max(1, int(round(min_separation * frame_rate)))
    idx, _ = scipy.signal.find_peaks(
        envelope, prominence=min_prominence, distance=distance
    )
    return PeakList([float(i / frame_rate) for i in idx])


def av_align(audio_peaks: PeakList, video_peaks: PeakList, window: float = 0.1) -> float:
    """IoU of greedily matched peak pairs within a time window."""
    if window <= 0:
        raise ValueError("window must be positive")
    a, v = audio_peaks.times, video_peaks.times
    if not a and not v:
        return 1.0
    i = j = matched = 0
    while i < len(a) and j < len(v):
        dt = a[i] - v[j]
        if abs(dt) <= window:
            matched += 1
            i += 1
            j += 1
        elif dt < 0:
            i += 1
        else:
            j += 1
    return matched / (len(a) + len(v) - matched)


# -- contrastive audio-speech model ----------------------------------------


class AttentionPool(nn.Module):
    """Learned-query attention pooling over a frame sequence."""

    def __init__(self, d: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(d) * 0.02)
        self.key = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [..., T, d] -> [..., d]
        scores = self.key(x) @ self.query / math.sqrt(x.shape[-1])
        w = torch.softmax(scores, dim=-1)
        return (w.unsqueeze(-2) @ x).squeeze(-2)


def _sinusoid_table(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2) / d)
    table = torch.zeros(n, d)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class _Branch(nn.Module):
    def __init__(self, cfg: CaspConfig):
        super().__init__()
        self.inp = nn.Linear(cfg.d_feat, cfg.d_model)
        n_frames = int(round(cfg.crop_s * TOKEN_RATE_HZ))
        self.register_buffer("pos", _sinusoid_table(n_frames, cfg.d_model))
        layer = nn.TransformerEncoderLayer(
            cfg.d_model,
            cfg.n_heads,
            dim_feedforward=4 * cfg.d_model,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers)
        self.pool = AttentionPool(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_out)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[T, d_feat] -> [d_out] or batched [B, T, d_feat] -> [B, d_out]."""
        squeeze = frames.ndim == 2
        if squeeze:
            frames = frames.unsqueeze(0)
        h = self.encoder(self.inp(frames) + self.pos[: frames.shape[-2]])
        v = self.out(self.pool(h))
        v = v / (v.norm(dim=-1, keepdim=True) + 1e-8)
        return v.squeeze(0) if squeeze else v


class CaspModel(nn.Module):
    """Dual-branch contrastive encoder with identical architectures and
    independent parameters, plus a learned similarity temperature."""

    def __init__(self, cfg: CaspConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_branch = _Branch(cfg)
        self.speech_branch = _Branch(cfg)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))

    def embed(self, frames: torch.Tensor, which: str) -> torch.Tensor:
        branch = self.audio_branch if which == "audio" else self.speech_branch
        return branch(frames)


def crop_frames(frames: np.ndarray, cfg: CaspConfig, rng: np.random.Generator) -> np.ndarray:
    """Fixed-length crop (zero-padded when shorter), random position."""
    want = int(round(cfg.crop_s * TOKEN_RATE_HZ))
    n = frames.shape[0]
    if n >= want:
        start = int(rng.integers(0, n - want + 1))
        return frames[start : start + want]
    out = np.zeros((want, frames.shape[1]), dtype=frames.dtype)
    out[:n] = frames
    return out


def wave_to_frames(wave: np.ndarray, cfg: CaspConfig) -> np.ndarray:
    return band_features(wave, cfg.d_feat)


def casp_contrastive_loss(model: CaspModel, a_vecs: torch.Tensor, s_vecs: torch.Tensor) -> torch.Tensor:
    """Symmetric in-batch contrastive cross entropy over similarity logits."""
    logits = model.logit_scale.exp() * (s_vecs @ a_vecs.T)
    labels = torch.arange(logits.shape[0])
    ce = nn.functional.cross_entropy
    return 0.5 * (ce(logits, labels) + ce(logits.T, labels))


def casp_train(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    cfg: CaspConfig,
    seed: int = 0,
    log_every: int = 25,
) -> tuple[CaspModel, list[float]]:
    """Train the dual-branch model on (audio_frames, speech_frames) pairs."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs for in-batch negatives")
    torch.manual_seed(seed)
    model = CaspModel(cfg)
    rng = np.random.default_rng(seed)
    opt = Adam(model)
    log = []
    for step in range(cfg.steps):
        idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
        a_crops = np.stack([crop_frames(pairs[i][0], cfg, rng) for i in idx])
        s_crops = np.stack([crop_frames(pairs[i][1], cfg, rng) for i in idx])
        a_vecs = model.embed(torch.as_tensor(a_crops), "audio")
        s_vecs = model.embed(torch.as_tensor(s_crops), "speech")
        loss = casp_contrastive_loss(model, a_vecs, s_vecs)
        opt.zero_grad()
        loss.backward()
        lr = cosine_lr(step + 1, 25, cfg.lr * 0.01, cfg.lr, cfg.steps)
        opt.step(lr)
        if step % log_every == 0 or step == cfg.steps - 1:
            log.append(float(loss.detach()))
    model.eval()
    return model, log


@torch.no_grad()
def dual_score(model: CaspModel, audio_frames: np.ndarray, speech_frames: np.ndarray) -> float:
    """Cosine similarity of the pooled audio and speech embeddings."""
    rng = np.random.default_rng(0)
    a = model.embed(torch.as_tensor(crop_frames(audio_frames, model.cfg, rng)), "audio")
    s = model.embed(torch.as_tensor(crop_frames(speech_frames, model.cfg, rng)), "speech")
    return float(a @ s)


@torch.no_grad()
def score_matrix(model: CaspModel, pairs: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """scores[i, j] = dual_score(speech_i, audio_j)."""
    rng = np.random.default_rng(0)
    a_crops = np.stack([crop_frames(a, model.cfg, rng) for a, _ in pairs])
    s_crops = np.stack([crop_frames(s, model.cfg, rng) for _, s in pairs])
    a_vecs = model.embed(torch.as_tensor(a_crops), "audio")
    s_vecs = model.embed(torch.as_tensor(s_crops), "speech")
    return (s_vecs @ a_vecs.T).numpy()


def topk_retrieval(
    model: CaspModel,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    ks: tuple[int, ...] = (1, 3, 5),
) -> dict[int, float]:
    """For each speech item, rank all audio items by similarity; ties break
    by index order."""
    n = len(pairs)
    if n < max(ks):
        raise ValueError("need at least max(k) pairs")
    scores = score_matrix(model, pairs)
    hits = {k: 0 for k in ks}
    for i in range(n):
        # stable sort on negated scores keeps index order on ties
        order = np.argsort(-scores[i], kind="stable")
        rank = int(np.nonzero(order == i)[0][0])
        for k in ks:
            if rank < k:
                hits[k] += 1
    return {k: hits[k] / n for k in ks}


# -- distribution metrics ---------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray  # symmetric, regularized PSD


def gaussian_stats(rows: np.ndarray, reg: float = 1e-6) -> GaussianStats:
    rows = np.asarray(rows, dtype=np.float64)
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / max(rows.shape[0] - 1, 1)
    cov = 0.5 * (cov + cov.T) + reg * np.eye(rows.shape[1])
    return GaussianStats(mean, cov)


def frechet(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The matrix square root is taken by eigendecomposition of the
    symmetrized product sqrt(S_a) S_b sqrt(S_a).
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    sa = _psd_sqrt(a.cov)
    inner = sa @ b.cov @ sa
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -1e-6:
        raise ValueError("product matrix not PSD")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if vals.min() < -1e-6:
        raise ValueError("matrix not PSD")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _check_rows(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("rows must sum to 1")
    return p


def kl_metric(gen_posteriors: np.ndarray, ref_posteriors: np.ndarray) -> float:
    """Mean KL(ref_i || gen_i) over paired posterior rows."""
    gen = np.clip(_check_rows(gen_posteriors), 1e-10, None)
    ref = np.clip(_check_rows(ref_posteriors), 1e-10, None)
    if gen.shape != ref.shape:
        raise ValueError("posterior shapes differ")
    return float(np.mean(np.sum(ref * np.log(ref / gen), axis=1)))


def inception_score(posteriors: np.ndarray) -> float:
    """exp(mean_i KL(p_i || mean_p))."""
    p = np.clip(_check_rows(posteriors), 1e-10, None)
    marginal = np.clip(p.mean(axis=0), 1e-10, None)
    kls = np.sum(p * np.log(p / marginal), axis=1)
    return float(np.exp(np.mean(kls)))
