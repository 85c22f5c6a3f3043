"""Two-stage waveform generation: a small VAE defines a latent space over
framed waveforms, and a flow-matching network carries token embeddings to
that space along a learned velocity field, integrated with explicit Euler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import FlowConfig, HEAD_VOCAB, SAMPLES_PER_TOKEN
from .frontend import nearest_indices
from .numerics import Adam, NonFiniteError, cosine_lr


@dataclass
class LatentSeq:
    z: torch.Tensor  # [L_lat, d_lat]
    rate_hz: float


class ToyVAE(nn.Module):
    """MLP variational autoencoder over 64-sample waveform frames."""

    def __init__(self, d_lat: int = 16, frame: int = SAMPLES_PER_TOKEN):
        super().__init__()
        self.frame = frame
        self.d_lat = d_lat
        self.enc = nn.Sequential(nn.Linear(frame, 128), nn.Tanh(), nn.Linear(128, 128), nn.Tanh())
        self.enc_mean = nn.Linear(128, d_lat)
        self.enc_logvar = nn.Linear(128, d_lat)
        self.dec = nn.Sequential(
            nn.Linear(d_lat, 128), nn.Tanh(), nn.Linear(128, 128), nn.Tanh(), nn.Linear(128, frame)
        )

    def encode(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.enc(frames)
        return self.enc_mean(h), self.enc_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z)


def frame_waveform(wave: np.ndarray, frame: int = SAMPLES_PER_TOKEN) -> torch.Tensor:
    n = (len(wave) // frame) * frame
    return torch.as_tensor(wave[:n].reshape(-1, frame), dtype=torch.float32)


def vae_train(
    waveforms: list[np.ndarray], cfg: FlowConfig, seed: int = 0
) -> tuple[ToyVAE, list[float]]:
    """Reconstruction + beta-weighted KL on pooled frames; the returned VAE
    is to be treated as frozen by all later training."""
    if len(waveforms) < 64:
        raise ValueError("need at least 64 waveforms")
    torch.manual_seed(seed)
    vae = ToyVAE(cfg.d_lat)
    frames = torch.cat([frame_waveform(w) for w in waveforms], dim=0)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(vae)
    log = []
    for step in range(cfg.vae_steps):
        idx = rng.integers(0, frames.shape[0], size=128)
        x = frames[idx]
        mean, logvar = vae.encode(x)
        noise = torch.randn(mean.shape, generator=gen)
        z = mean + noise * torch.exp(0.5 * logvar)
        recon = vae.decode(z)
        rec_loss = ((recon - x) ** 2).mean()
        kl = 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar).mean()
        loss = rec_loss + cfg.vae_beta * kl
        if not math.isfinite(float(loss.detach())):
            raise NonFiniteError(f"VAE loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(cfg.vae_lr)
        if step % 50 == 0 or step == cfg.vae_steps - 1:
            log.append(float(loss.detach()))
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    return vae, log


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.d // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half) / max(half - 1, 1))
        ang = t.reshape(-1, 1) * freqs.reshape(1, -1) * 2 * math.pi
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).squeeze(0)


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.ln2(x))
        return x


class VelocityField(nn.Module):
    """Small non-causal transformer predicting dZ/dt from (Z_t, t)."""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.inp = nn.Linear(cfg.d_lat, cfg.d_model)
        self.time_embed = SinusoidalTimeEmbedding(cfg.d_model)
        self.blocks = nn.ModuleList(
            _Block(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_lat)

    def forward(self, z: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(float(t), dtype=torch.float32)
        x = self.inp(z) + self.time_embed(t)
        x = x.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.ln_f(x.squeeze(0)))


class FlowDecoder(nn.Module):
    """Token embedding table + velocity field; VAE latents are the target."""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(HEAD_VOCAB, cfg.d_lat)
        self.field = VelocityField(cfg)

    def tokens_to_z0(self, tokens: list[int], l_lat: int) -> torch.Tensor:
        """Embed tokens, then rate-match to the latent length by nearest
        neighbor (same rule as video resampling)."""
        ids = torch.tensor(tokens, dtype=torch.long)
        emb = self.token_embed(ids)
        idx = torch.as_tensor(nearest_indices(emb.shape[0], l_lat))
        return emb[idx]


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t: float) -> torch.Tensor:
    """Linear path point Z_t = (1-t) Z0 + t Z1."""
    if z0.shape != z1.shape:
        raise ValueError("endpoint shapes differ")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return (1.0 - t) * z0 + t * z1


def fm_loss(
    field: VelocityField,
    pairs: list[tuple[torch.Tensor, torch.Tensor]],
    rng: np.random.Generator,
) -> torch.Tensor:
    """Mean squared error between the predicted velocity at a uniformly
    sampled path time and the constant target velocity Z1 - Z0."""
    terms = []
    for z0, z1 in pairs:
        t = float(rng.uniform(0.0, 1.0))
        zt = interpolate(z0, z1, t)
        v = field(zt, t)
        terms.append(((v - (z1 - z0)) ** 2).mean())
    return torch.stack(terms).mean()


@torch.no_grad()
def integrate(field: VelocityField, z0: torch.Tensor, n_steps: int) -> torch.Tensor:
    """Explicit Euler from t=0 to t=1 with uniform steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = z0.clone()
    dt = 1.0 / n_steps
    for k in range(n_steps):
        z = z + dt * field(z, k / n_steps)
        if not bool(torch.isfinite(z).all()):
            raise NonFiniteError(f"non-finite state at Euler step {k}")
    return z


@torch.no_grad()
def decode_waveform(z1: torch.Tensor, vae: ToyVAE) -> np.ndarray:
    if z1.ndim != 2 or z1.shape[1] != vae.d_lat:
        raise ValueError(f"latent shape {tuple(z1.shape)} does not match VAE")
    frames = vae.decode(z1)
    return frames.reshape(-1).numpy()


def flow_train(
    decoder: FlowDecoder,
    vae: ToyVAE,
    items: list[tuple[list[int], np.ndarray]],
    cfg: FlowConfig,
    seed: int = 0,
) -> list[float]:
    """Train token embedding + velocity field toward VAE latents of the
    paired waveforms. The VAE stays frozen."""
    rng = np.random.default_rng(seed)
    latents = []
    with torch.no_grad():
        for tokens, wave in items:
            mean, _ = vae.encode(frame_waveform(wave))
            latents.append((tokens, mean))
    opt = Adam(decoder)
    log = []
    for step in range(cfg.flow_steps):
        idx = rng.integers(0, len(latents), size=min(cfg.batch_size, len(latents)))
        pairs = []
        for i in idx:
            tokens, z1 = latents[i]
            z0 = decoder.tokens_to_z0(tokens, z1.shape[0])
            pairs.append((z0, z1))
        loss = fm_loss(decoder.field, pairs, rng)
        if not math.isfinite(float(loss.detach())):
            raise NonFiniteError(f"flow loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        lr = cosine_lr(step + 1, 50, cfg.flow_lr * 0.01, cfg.flow_lr, cfg.flow_steps)
        opt.step(lr)
        if step % 50 == 0 or step == cfg.flow_steps - 1:
            log.append(float(loss.detach()))
    return log


@torch.no_grad()
def tokens_to_waveform(
    decoder: FlowDecoder, vae: ToyVAE, tokens: list[int], n_steps: int | None = None
) -> np.ndarray:
    """End-to-end token stream -> waveform (Euler flow, then VAE decode)."""
    steps = n_steps or decoder.cfg.euler_steps
    z0 = decoder.tokens_to_z0(tokens, len(tokens))
    z1 = integrate(decoder.field, z0, steps)
    return decode_waveform(z1, vae)
