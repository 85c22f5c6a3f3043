"""Fast invariant suite behind the `selftest` CLI command.

Each check is self-contained and runs in seconds; together they cover the
structural invariants the rest of the system leans on.
"""

from __future__ import annotations

import copy

import numpy as np
import torch

from .. import flow_decoder
from ..aligner import CrossModalAligner
from ..config import CaspConfig, FlowConfig, ModelConfig
from ..curriculum import MaskedModelInput, stage_loss
from ..dual_lm import DualStreamLM
from ..frontend import BpeTokenizer
from ..numerics import AttentionMask, MASK_FILL


def _softmax_rows() -> bool:
    torch.manual_seed(0)
    for mask in [
        AttentionMask.causal(6),
        AttentionMask.non_causal(6),
        AttentionMask.custom(torch.eye(6, dtype=torch.bool)),
    ]:
        scores = torch.randn(6, 6).masked_fill(~mask.allowed, MASK_FILL)
        w = torch.softmax(scores, dim=1)
        if not torch.allclose(w.sum(dim=1), torch.ones(6), atol=1e-6):
            return False
    return True


def _aligner_causal_isolation() -> bool:
    torch.manual_seed(1)
    al = CrossModalAligner(d=16, d_v=8)
    e_a, e_s = torch.randn(5, 16), torch.randn(5, 16)
    video = torch.randn(5, 8)
    with torch.no_grad():
        base = al(e_a, e_s, video)
        e_s2 = e_s.clone()
        e_s2[4] += 1.0
        pert = al(e_a, e_s2, video)
    return bool(torch.equal(base.h_audio[:4], pert.h_audio[:4]))


def _lm_causal_isolation() -> bool:
    torch.manual_seed(2)
    model = DualStreamLM(ModelConfig(d=32, n_layers=2, n_heads=2, d_v=8, max_len=64))
    seq = torch.randn(7, 32)
    with torch.no_grad():
        base = model(seq)
        seq2 = seq.clone()
        seq2[5] += 1.0
        pert = model(seq2)
    return bool(torch.equal(base[:5], pert[:5]))


def _zero_init_residual_identity() -> bool:
    torch.manual_seed(3)
    al = CrossModalAligner(d=16, d_v=8)
    al.zero_output_projections()
    e_a, e_s = torch.randn(4, 16), torch.randn(4, 16)
    with torch.no_grad():
        fused = al(e_a, e_s, torch.randn(4, 8))
    return bool(torch.equal(fused.h_audio, e_a) and torch.equal(fused.h_speech, e_s))


def _head_mask_zero_grad() -> bool:
    torch.manual_seed(4)
    model = DualStreamLM(ModelConfig(d=32, n_layers=1, n_heads=2, d_v=8, max_len=64))
    item = MaskedModelInput(
        task="V2A",
        video_frames=np.random.default_rng(0).normal(size=(6, 8)).astype(np.float32),
        text_ids=torch.tensor([1, 2], dtype=torch.long),
        spk_frames=None,
        audio_targets=torch.tensor([3, 4, 5], dtype=torch.long),
        speech_targets=None,
    )
    loss, _ = stage_loss(model, [item])
    loss.backward()
    g = model.speech_head.weight.grad
    return g is None or bool((g == 0).all())


def _bpe_round_trip() -> bool:
    corpus = ["the drum and the bell", "horn click chime", "knock knock"]
    tok = BpeTokenizer.train(corpus, vocab_size=280)
    rng = np.random.default_rng(5)
    for _ in range(50):
        s = "".join(chr(rng.integers(32, 127)) for _ in range(int(rng.integers(0, 40))))
        if tok.decode(tok.encode(s)) != s:
            return False
    return True


def _frozen_vae_bitwise() -> bool:
    torch.manual_seed(6)
    rng = np.random.default_rng(6)
    waves = [rng.normal(scale=0.2, size=256).astype(np.float32) for _ in range(64)]
    cfg = FlowConfig(vae_steps=30, flow_steps=30, d_lat=4, d_model=16, n_layers=1, n_heads=2)
    vae, _ = flow_decoder.vae_train(waves, cfg, seed=6)
    before = copy.deepcopy(vae.state_dict())
    decoder = flow_decoder.FlowDecoder(cfg)
    items = [([int(i) for i in rng.integers(0, 8, size=4)], w) for w in waves[:8]]
    flow_decoder.flow_train(decoder, vae, items, cfg, seed=6)
    after = vae.state_dict()
    return all(torch.equal(before[k], after[k]) for k in before)


CHECKS = [
    ("softmax_row_normalization", _softmax_rows),
    ("aligner_causal_isolation", _aligner_causal_isolation),
    ("lm_causal_isolation", _lm_causal_isolation),
    ("zero_init_residual_identity", _zero_init_residual_identity),
    ("head_mask_zero_gradient", _head_mask_zero_grad),
    ("bpe_round_trip", _bpe_round_trip),
    ("frozen_vae_bitwise", _frozen_vae_bitwise),
]


def run_selftest() -> bool:
    ok = True
    for name, fn in CHECKS:
        passed = fn()
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok = ok and passed
    return ok
