"""Three-stage curriculum trainer.

Stage 1 trains video-to-audio only; stage 2 adds text-to-speech with
modality masking; stage 3 adds the fully paired joint task. Earlier
stages' corpora stay in the training mix, and a forgetting probe measures
per-task held-out cross entropy.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import EOS_ID, HEAD_VOCAB, PAD_ID, StageConfig
from .curriculum_tasks import STAGE_TASKS, TASKS
from .dual_lm import DualStreamLM
from .frontend import BpeTokenizer, V2A_PROMPT, crop_3s
from .numerics import Adam, cosine_lr, cross_entropy
from .synthdata import MultimodalSample


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the model was restored to the last good state."""


@dataclass
class MaskedModelInput:
    task: str
    video_frames: np.ndarray
    text_ids: torch.Tensor
    spk_frames: torch.Tensor | None
    audio_targets: torch.Tensor | None
    speech_targets: torch.Tensor | None

    @property
    def audio_head_on(self) -> bool:
        return self.audio_targets is not None

    @property
    def speech_head_on(self) -> bool:
        return self.speech_targets is not None


def mask_for_task(
    sample: MultimodalSample,
    task: str,
    tokenizer: BpeTokenizer,
    rng: np.random.Generator | None = None,
) -> MaskedModelInput:
    """Task-specific conditioning and target masking.

    V2A: real video, fixed instruction text, zero speaker, audio head only;
    the speech stream's inputs become a learned NULL embedding.
    TTS: all-zero video rows, real transcript and speaker, speech head only.
    V2ST: everything real, both heads.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rng = rng or np.random.default_rng(sample.spec.seed)

    def targets(ids: list[int]) -> torch.Tensor:
        return torch.tensor(ids + [EOS_ID], dtype=torch.long)

    if task == "V2A":
        if sample.video is None:
            raise ValueError("V2A requires video")
        return MaskedModelInput(
            task=task,
            video_frames=sample.video.frames,
            text_ids=torch.tensor(tokenizer.encode(V2A_PROMPT).ids, dtype=torch.long),
            spk_frames=None,
            audio_targets=targets(sample.audio_ids),
            speech_targets=None,
        )
    if task == "TTS":
        if not sample.text:
            raise ValueError("TTS requires a transcript")
        crop = crop_3s(sample.spk_frames, frame_rate=40.0, rng=rng)
        return MaskedModelInput(
            task=task,
            video_frames=np.zeros_like(sample.video.frames),
            text_ids=torch.tensor(tokenizer.encode(sample.text).ids, dtype=torch.long),
            spk_frames=torch.as_tensor(crop),
            audio_targets=None,
            speech_targets=targets(sample.speech_ids),
        )
    # V2ST
    crop = crop_3s(sample.spk_frames, frame_rate=40.0, rng=rng)
    return MaskedModelInput(
        task=task,
        video_frames=sample.video.frames,
        text_ids=torch.tensor(tokenizer.encode(sample.text).ids, dtype=torch.long),
        spk_frames=torch.as_tensor(crop),
        audio_targets=targets(sample.audio_ids),
        speech_targets=targets(sample.speech_ids),
    )


def stage_loss(
    model: DualStreamLM, batch: list[MaskedModelInput]
) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean cross entropy over enabled heads for a task-homogeneous batch.

    A disabled head contributes no term at all, so its parameters get
    bitwise-zero (absent) gradients.
    """
    if not batch:
        raise ValueError("empty batch")
    audio_terms, speech_terms = [], []
    for item in batch:
        logits = model.score(
            item.spk_frames,
            item.text_ids,
            item.video_frames,
            item.audio_targets,
            item.speech_targets,
        )
        if item.audio_head_on:
            loss, _ = cross_entropy(logits.audio, item.audio_targets, ignore_id=PAD_ID)
            audio_terms.append(loss)
        if item.speech_head_on:
            loss, _ = cross_entropy(logits.speech, item.speech_targets, ignore_id=PAD_ID)
            speech_terms.append(loss)
    parts: dict[str, float] = {}
    total = None
    if audio_terms:
        audio_loss = torch.stack(audio_terms).mean()
        parts["audio"] = float(audio_loss.detach())
        total = audio_loss
    if speech_terms:
        speech_loss = torch.stack(speech_terms).mean()
        parts["speech"] = float(speech_loss.detach())
        total = speech_loss if total is None else total + speech_loss
    return total, parts


def run_stage(
    cfg: StageConfig,
    model: DualStreamLM,
    datasets: dict[str, list[MultimodalSample]],
    tokenizer: BpeTokenizer,
    seed: int = 0,
    log_every: int = 25,
) -> list[dict]:
    """Train one curriculum stage in place; returns the loss log."""
    allowed = STAGE_TASKS[cfg.stage]
    for task in cfg.task_weights:
        if task not in allowed:
            raise ValueError(f"task {task} not allowed in stage {cfg.stage}")
        if task not in datasets or not datasets[task]:
            raise ValueError(f"no dataset for task {task}")
    weights = np.array([cfg.task_weights[t] for t in sorted(cfg.task_weights)])
    weights = weights / weights.sum()
    task_names = sorted(cfg.task_weights)

    rng = np.random.default_rng(seed)
    opt = Adam(model)
    log: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())
    for step in range(cfg.steps):
        task = task_names[int(rng.choice(len(task_names), p=weights))]
        data = datasets[task]
        idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        batch = [mask_for_task(data[i], task, tokenizer, rng) for i in idx]
        opt.zero_grad()
        loss, parts = stage_loss(model, batch)
        if not math.isfinite(float(loss.detach())):
            model.load_state_dict(last_good)
            raise TrainingDiverged(f"stage {cfg.stage} step {step}: non-finite loss")
        loss.backward()
        lr = cosine_lr(step + 1, cfg.warmup_steps, cfg.lr_min, cfg.lr_max, cfg.steps)
        opt.step(lr)
        if step % log_every == 0 or step == cfg.steps - 1:
            log.append({"step": step, "task": task, "lr": lr, "loss": float(loss.detach()), **parts})
        if step % 50 == 0:
            last_good = copy.deepcopy(model.state_dict())
    return log


@torch.no_grad()
def forgetting_probe(
    model: DualStreamLM,
    heldout: dict[str, list[MultimodalSample]],
    tokenizer: BpeTokenizer,
) -> dict[str, float]:
    """Teacher-forced per-task CE on held-out data; read-only."""
    out: dict[str, float] = {}
    for task in sorted(heldout):
        losses = []
        for sample in heldout[task]:
            item = mask_for_task(
                sample, task, tokenizer, np.random.default_rng(sample.spec.seed)
            )
            _, parts = stage_loss(model, [item])
            # per-task CE averages over enabled heads so every task is on
            # the same ln(V) scale
            losses.append(float(np.mean(list(parts.values()))))
        out[task] = float(np.mean(losses))
    return out


def uniform_baseline() -> float:
    """CE of a uniform prediction over the head vocabulary."""
    return math.log(HEAD_VOCAB)
