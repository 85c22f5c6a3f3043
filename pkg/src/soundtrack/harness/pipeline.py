"""End-to-end pipelines: dataset synthesis, curriculum training, decoder
and retrieval-model training, generation, and evaluation reports.

All pipelines are deterministic given (config, seed); the evaluation
report of two identical runs is byte-identical.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .. import curriculum, flow_decoder, metrics, synthdata
from ..config import Config, EOS_ID, PAD_ID, SAMPLE_RATE, TOKEN_RATE_HZ
from ..curriculum_tasks import STAGE_TASKS
from ..dual_lm import DualStreamLM
from ..frontend import BpeTokenizer, V2A_PROMPT, VideoFeatureSeq
from . import io

log = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    pass


# -- dataset ----------------------------------------------------------------


def _sample_entry(sample: synthdata.MultimodalSample, tensor_dir: Path, root: Path) -> dict:
    sid = f"scene{sample.spec.seed}"
    paths = {}
    arrays = {
        "video": sample.video.frames,
        "audio_wave": sample.audio_wave,
        "speech_wave": sample.speech_wave,
        "audio_ids": np.array(sample.audio_ids, dtype=np.float32),
        "speech_ids": np.array(sample.speech_ids, dtype=np.float32),
    }
    for name, arr in arrays.items():
        rel = tensor_dir.name + f"/{sid}_{name}.ddtf"
        io.save_tensor(root / rel, arr)
        paths[name] = rel
    return {
        "id": sid,
        "tasks": ["V2A", "TTS", "V2ST"],
        "paths": paths,
        "transcript": sample.text,
        "speaker_id": sample.spec.speaker_id,
        "duration_s": sample.spec.duration_s,
        "seed": sample.spec.seed,
        "onsets": sample.spec.onsets,
        "classes": sample.spec.classes,
        "video_fps": sample.video.fps,
    }


def load_samples(manifest_path: Path) -> list[synthdata.MultimodalSample]:
    entries = io.load_manifest(manifest_path)
    root = manifest_path.parent
    out = []
    for e in entries:
        video = io.load_tensor(root / e["paths"]["video"])
        audio_wave = io.load_tensor(root / e["paths"]["audio_wave"])
        speech_wave = io.load_tensor(root / e["paths"]["speech_wave"])
        audio_ids = [int(i) for i in io.load_tensor(root / e["paths"]["audio_ids"])]
        speech_ids = [int(i) for i in io.load_tensor(root / e["paths"]["speech_ids"])]
        spec = synthdata.SceneSpec(
            seed=e["seed"],
            duration_s=e["duration_s"],
            onsets=e["onsets"],
            classes=e["classes"],
            speaker_id=e["speaker_id"],
        )
        out.append(
            synthdata.MultimodalSample(
                spec=spec,
                video=VideoFeatureSeq(video, e["video_fps"]),
                text=e["transcript"],
                spk_frames=synthdata.band_features(speech_wave, synthdata.D_MEL),
                audio_ids=audio_ids,
                speech_ids=speech_ids,
                audio_wave=audio_wave,
                speech_wave=speech_wave,
            )
        )
    return out


def cmd_synth(cfg: Config, out: Path) -> None:
    """Generate the paired dataset, apply the energy filter, and train the
    frozen text tokenizer."""
    data_dir = out / "dataset"
    tensor_dir = data_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    train_specs, eval_specs = synthdata.gen_split(
        cfg.data.n_train, cfg.data.n_eval, cfg.seed, cfg.data.duration_s
    )
    for name, specs in [("train", train_specs), ("eval", eval_specs)]:
        entries = []
        for spec in specs:
            sample = synthdata.gen_scene(spec, cfg.data.video_fps)
            if not metrics.filter_pair(sample.audio_wave, sample.speech_wave):
                log.info("energy filter discarded %s", spec.seed)
                continue
            entries.append(_sample_entry(sample, tensor_dir, data_dir))
        io.save_manifest(data_dir / f"manifest_{name}.jsonl", entries)
    corpus = [e["transcript"] for e in io.load_manifest(data_dir / "manifest_train.jsonl")]
    corpus.append(V2A_PROMPT)
    tokenizer = BpeTokenizer.train(corpus, vocab_size=300)
    (data_dir / "tokenizer.json").write_text(
        json.dumps({"merges": tokenizer.merges}, sort_keys=True)
    )


def load_tokenizer(out: Path) -> BpeTokenizer:
    path = out / "dataset" / "tokenizer.json"
    if not path.exists():
        raise MissingArtifactError("tokenizer not found; run `synth` first")
    merges = [tuple(m) for m in json.loads(path.read_text())["merges"]]
    return BpeTokenizer(merges)


def _load_dataset(out: Path, split: str) -> list[synthdata.MultimodalSample]:
    path = out / "dataset" / f"manifest_{split}.jsonl"
    if not path.exists():
        raise MissingArtifactError(f"{path.name} not found; run `synth` first")
    return load_samples(path)


# -- curriculum training ----------------------------------------------------


def _model_state(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy() for k, v in model.state_dict().items()}


def _load_model_state(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.as_tensor(v) for k, v in tensors.items()}
    model.load_state_dict(state)


def cmd_train(cfg: Config, stage: int, out: Path, force: bool = False) -> None:
    if str(stage) not in cfg.stages:
        raise ValueError(f"no config for stage {stage}")
    stage_cfg = cfg.stages[str(stage)]
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = load_tokenizer(out)
    train = _load_dataset(out, "train")
    heldout_all = _load_dataset(out, "eval")

    torch.manual_seed(cfg.seed)
    model = DualStreamLM(cfg.model)
    if stage > 1:
        prior = ckpt_dir / f"stage{stage - 1}.ckpt"
        if not prior.exists():
            raise MissingArtifactError(
                f"missing prior checkpoint {prior.name}; train stage {stage - 1} first"
            )
        _, tensors = io.load_checkpoint(prior, cfg.hash(), force)
        _load_model_state(model, tensors)

    datasets = {task: train for task in stage_cfg.task_weights}
    train_log = curriculum.run_stage(
        stage_cfg, model, datasets, tokenizer, seed=cfg.seed + stage
    )
    heldout = {task: heldout_all for task in STAGE_TASKS[stage]}
    probe = curriculum.forgetting_probe(model, heldout, tokenizer)

    io.save_checkpoint(
        ckpt_dir / f"stage{stage}.ckpt",
        {
            "stage": f"stage{stage}",
            "config_hash": cfg.hash(),
            "step": stage_cfg.steps,
            "seed": cfg.seed,
        },
        _model_state(model),
    )
    (ckpt_dir / f"stage{stage}_metrics.json").write_text(
        json.dumps({"train_log": train_log, "heldout_ce": probe}, sort_keys=True)
    )


def load_lm(cfg: Config, out: Path, stage: int = 3, force: bool = False) -> DualStreamLM:
    path = out / "checkpoints" / f"stage{stage}.ckpt"
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint {path.name}")
    model = DualStreamLM(cfg.model)
    _, tensors = io.load_checkpoint(path, cfg.hash(), force)
    _load_model_state(model, tensors)
    model.eval()
    return model


# -- waveform decoder -------------------------------------------------------


def cmd_vae_train(cfg: Config, out: Path) -> None:
    train = _load_dataset(out, "train")
    waves = [s.audio_wave for s in train] + [s.speech_wave for s in train]
    if len(waves) < 64:
        extra_specs, _ = synthdata.gen_split(
            64, 1, cfg.seed + 77, cfg.data.duration_s
        )
        waves += [synthdata.gen_scene(sp).audio_wave for sp in extra_specs[: 64 - len(waves)]]
    vae, losses = flow_decoder.vae_train(waves, cfg.flow, seed=cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(
        ckpt_dir / "vae.ckpt",
        {"stage": "vae", "config_hash": cfg.hash(), "step": cfg.flow.vae_steps, "seed": cfg.seed},
        _model_state(vae),
    )
    log.info("vae final loss %.5f", losses[-1])


def load_vae(cfg: Config, out: Path, force: bool = False) -> flow_decoder.ToyVAE:
    path = out / "checkpoints" / "vae.ckpt"
    if not path.exists():
        raise MissingArtifactError("missing vae.ckpt; run `vae-train` first")
    vae = flow_decoder.ToyVAE(cfg.flow.d_lat)
    _, tensors = io.load_checkpoint(path, cfg.hash(), force)
    _load_model_state(vae, tensors)
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    return vae


def cmd_flow_train(cfg: Config, out: Path) -> None:
    vae = load_vae(cfg, out)
    train = _load_dataset(out, "train")
    items = [(s.audio_ids, s.audio_wave) for s in train] + [
        (s.speech_ids, s.speech_wave) for s in train
    ]
    torch.manual_seed(cfg.seed + 1)
    decoder = flow_decoder.FlowDecoder(cfg.flow)
    losses = flow_decoder.flow_train(decoder, vae, items, cfg.flow, seed=cfg.seed)
    io.save_checkpoint(
        out / "checkpoints" / "flow.ckpt",
        {"stage": "flow", "config_hash": cfg.hash(), "step": cfg.flow.flow_steps, "seed": cfg.seed},
        _model_state(decoder),
    )
    log.info("flow final loss %.5f", losses[-1])


def load_flow(cfg: Config, out: Path, force: bool = False) -> flow_decoder.FlowDecoder:
    path = out / "checkpoints" / "flow.ckpt"
    if not path.exists():
        raise MissingArtifactError("missing flow.ckpt; run `flow-train` first")
    decoder = flow_decoder.FlowDecoder(cfg.flow)
    _, tensors = io.load_checkpoint(path, cfg.hash(), force)
    _load_model_state(decoder, tensors)
    decoder.eval()
    return decoder


# -- retrieval model --------------------------------------------------------


def casp_pairs(cfg: Config, n: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Ground-truth audio/speech feature pairs from freshly generated scenes."""
    pairs = []
    for i in range(n):
        spec = synthdata.make_scene_spec(
            seed * 1_000_000 + 900_000 + i, i % synthdata.N_SPEAKERS, cfg.data.duration_s
        )
        sample = synthdata.gen_scene(spec, cfg.data.video_fps)
        pairs.append(
            (
                metrics.wave_to_frames(sample.audio_wave, cfg.casp),
                metrics.wave_to_frames(sample.speech_wave, cfg.casp),
            )
        )
    return pairs


def cmd_casp_train(cfg: Config, out: Path) -> None:
    pairs = casp_pairs(cfg, cfg.data.n_casp_train, cfg.seed + 3)
    model, losses = metrics.casp_train(pairs, cfg.casp, seed=cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(
        ckpt_dir / "casp.ckpt",
        {"stage": "casp", "config_hash": cfg.hash(), "step": cfg.casp.steps, "seed": cfg.seed},
        _model_state(model),
    )
    log.info("casp final loss %.5f", losses[-1])


def load_casp(cfg: Config, out: Path, force: bool = False) -> metrics.CaspModel:
    path = out / "checkpoints" / "casp.ckpt"
    if not path.exists():
        raise MissingArtifactError("missing casp.ckpt; run `casp-train` first")
    model = metrics.CaspModel(cfg.casp)
    _, tensors = io.load_checkpoint(path, cfg.hash(), force)
    _load_model_state(model, tensors)
    model.eval()
    return model


# -- generation -------------------------------------------------------------


def content_tokens(ids: list[int]) -> list[int]:
    out = []
    for i in ids:
        if i in (EOS_ID, PAD_ID):
            break
        out.append(i)
    return out


def cmd_generate(cfg: Config, out: Path, force: bool = False, wav: bool = False) -> None:
    """Full task signature: (reference speech, transcript, video) -> both
    waveforms, via dual-stream decoding and the flow decoder."""
    model = load_lm(cfg, out, force=force)
    vae = load_vae(cfg, out, force=force)
    decoder = load_flow(cfg, out, force=force)
    tokenizer = load_tokenizer(out)
    eval_set = _load_dataset(out, "eval")
    gen_dir = out / "generated"
    gen_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample in eval_set:
        max_t = len(sample.audio_ids) + 1
        audio_ids, speech_ids = model.generate(
            torch.as_tensor(sample.spk_frames),
            torch.tensor(tokenizer.encode(sample.text).ids, dtype=torch.long),
            sample.video.frames,
            max_t=max_t,
            seed=cfg.seed,
        )
        a_content = content_tokens(audio_ids) or [0]
        s_content = content_tokens(speech_ids) or [0]
        audio_wave = flow_decoder.tokens_to_waveform(decoder, vae, a_content)
        speech_wave = flow_decoder.tokens_to_waveform(decoder, vae, s_content)
        sid = f"gen{sample.spec.seed}"
        paths = {}
        for name, arr in [
            ("audio_wave", audio_wave),
            ("speech_wave", speech_wave),
            ("audio_ids", np.array(audio_ids, dtype=np.float32)),
            ("speech_ids", np.array(speech_ids, dtype=np.float32)),
        ]:
            rel = f"{sid}_{name}.ddtf"
            io.save_tensor(gen_dir / rel, arr)
            paths[name] = rel
        if wav:
            io.write_wav(gen_dir / f"{sid}_audio.wav", audio_wave, SAMPLE_RATE)
            io.write_wav(gen_dir / f"{sid}_speech.wav", speech_wave, SAMPLE_RATE)
        entries.append(
            {
                "id": sid,
                "source_id": f"scene{sample.spec.seed}",
                "paths": paths,
                "transcript": sample.text,
                "speaker_id": sample.spec.speaker_id,
                "duration_s": sample.spec.duration_s,
            }
        )
    io.save_manifest(gen_dir / "manifest_generated.jsonl", entries)


# -- evaluation -------------------------------------------------------------


def video_envelope(video: VideoFeatureSeq) -> np.ndarray:
    return np.linalg.norm(video.frames, axis=1)


def audio_envelope(wave: np.ndarray) -> np.ndarray:
    n = (len(wave) // 64) * 64
    return np.sqrt(np.mean(wave[:n].reshape(-1, 64) ** 2, axis=1))


def cmd_eval(cfg: Config, out: Path, force: bool = False) -> dict:
    """Metric bundle over the generated eval set; writes eval_report.json."""
    gen_manifest = out / "generated" / "manifest_generated.jsonl"
    if not gen_manifest.exists():
        raise MissingArtifactError("no generated outputs; run `generate` first")
    entries = io.load_manifest(gen_manifest)
    eval_set = {f"scene{s.spec.seed}": s for s in _load_dataset(out, "eval")}
    casp = load_casp(cfg, out, force=force)
    gen_dir = out / "generated"
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)

    av_scores, dual_scores = [], []
    gen_waves, ref_waves = [], []
    for e in entries:
        ref = eval_set[e["source_id"]]
        audio_wave = io.load_tensor(gen_dir / e["paths"]["audio_wave"])
        speech_wave = io.load_tensor(gen_dir / e["paths"]["speech_wave"])
        gen_waves.append(audio_wave)
        ref_waves.append(ref.audio_wave)
        a_peaks = metrics.detect_peaks(audio_envelope(audio_wave), TOKEN_RATE_HZ)
        v_peaks = metrics.detect_peaks(video_envelope(ref.video), ref.video.fps)
        av_scores.append(metrics.av_align(a_peaks, v_peaks))
        dual_scores.append(
            metrics.dual_score(
                casp,
                metrics.wave_to_frames(audio_wave, cfg.casp),
                metrics.wave_to_frames(speech_wave, cfg.casp),
            )
        )

    # Embedding-statistics metrics flow through tensor files on disk, the
    # same interface an external embedder would use.
    roles = {"fd": "panns-like", "fad": "vggish-like"}
    dist = {}
    for key, role in roles.items():
        gen_rows = np.stack([synthdata.standin_embedder(w, role) for w in gen_waves])
        ref_rows = np.stack([synthdata.standin_embedder(w, role) for w in ref_waves])
        io.save_tensor(eval_dir / f"{key}_gen.ddtf", gen_rows)
        io.save_tensor(eval_dir / f"{key}_ref.ddtf", ref_rows)
        gen_rows = io.load_tensor(eval_dir / f"{key}_gen.ddtf").astype(np.float64)
        ref_rows = io.load_tensor(eval_dir / f"{key}_ref.ddtf").astype(np.float64)
        dist[key] = metrics.frechet(
            metrics.gaussian_stats(gen_rows), metrics.gaussian_stats(ref_rows)
        )
    gen_post = np.stack(
        [synthdata.standin_embedder(w, "classifier-like") for w in gen_waves]
    )
    ref_post = np.stack(
        [synthdata.standin_embedder(w, "classifier-like") for w in ref_waves]
    )
    io.save_tensor(eval_dir / "posteriors_gen.ddtf", gen_post)
    io.save_tensor(eval_dir / "posteriors_ref.ddtf", ref_post)
    gen_post = _renorm(io.load_tensor(eval_dir / "posteriors_gen.ddtf").astype(np.float64))
    ref_post = _renorm(io.load_tensor(eval_dir / "posteriors_ref.ddtf").astype(np.float64))
    kl = metrics.kl_metric(gen_post, ref_post)
    is_score = metrics.inception_score(gen_post)

    retrieval_pairs = casp_pairs(cfg, cfg.data.n_casp_eval, cfg.seed + 4)
    topk = metrics.topk_retrieval(casp, retrieval_pairs)

    report = {
        "av_align": round(float(np.mean(av_scores)), 6),
        "dual_score": round(float(np.mean(dual_scores)), 6),
        "fd": round(dist["fd"], 6),
        "fad": round(dist["fad"], 6),
        "kl": round(kl, 6),
        "inception_score": round(is_score, 6),
        "retrieval": {f"top{k}": round(v, 6) for k, v in topk.items()},
        "thresholds": {
            "top1_at_least_0.90": topk[1] >= 0.90,
            "top3_at_least_0.97": topk[3] >= 0.97,
            "av_align_at_least_0.5": float(np.mean(av_scores)) >= 0.5,
            "dual_score_gap_positive": float(np.mean(dual_scores)) > 0.0,
        },
        "reference_only": {
            "note": "full-scale retrieval reference (1319 real pairs); not reproducible here",
            "top1": 0.70,
            "top3": 0.90,
            "top5": 0.95,
        },
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    }
    (out / "eval_report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    return report


def _renorm(rows: np.ndarray) -> np.ndarray:
    return rows / rows.sum(axis=1, keepdims=True)
