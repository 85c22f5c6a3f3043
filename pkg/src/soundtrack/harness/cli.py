"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad arguments, missing
prerequisite artifacts), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..config import Config, config_from_dict
from . import pipeline
from .io import ConfigMismatchError, TensorFileError
from .selftest import run_selftest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="soundtrack",
        description="Desk-scale video-to-soundtrack generation and evaluation.",
    )
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("--force", action="store_true", help="ignore checkpoint config-hash mismatch")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic paired dataset")
    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--stage", type=int, required=True, choices=[1, 2, 3])
    sub.add_parser("vae-train", help="train and freeze the waveform VAE")
    sub.add_parser("flow-train", help="train the token-to-latent flow decoder")
    sub.add_parser("casp-train", help="train the contrastive retrieval model")
    g = sub.add_parser("generate", help="end-to-end generation on the eval split")
    g.add_argument("--wav", action="store_true", help="also write PCM16 WAV files")
    sub.add_parser("eval", help="compute the evaluation report")
    sub.add_parser("selftest", help="run the fast invariant suite")
    return p


def load_config(args: argparse.Namespace) -> Config:
    if args.config is not None:
        cfg = config_from_dict(json.loads(args.config.read_text()))
    else:
        cfg = Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = load_config(args)
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            pipeline.cmd_synth(cfg, out)
        elif args.command == "train":
            pipeline.cmd_train(cfg, args.stage, out, force=args.force)
        elif args.command == "vae-train":
            pipeline.cmd_vae_train(cfg, out)
        elif args.command == "flow-train":
            pipeline.cmd_flow_train(cfg, out)
        elif args.command == "casp-train":
            pipeline.cmd_casp_train(cfg, out)
        elif args.command == "generate":
            pipeline.cmd_generate(cfg, out, force=args.force, wav=args.wav)
        elif args.command == "eval":
            report = pipeline.cmd_eval(cfg, out, force=args.force)
            print(json.dumps(report, sort_keys=True, indent=2))
        elif args.command == "selftest":
            return 0 if run_selftest() else 2
        return 0
    except (
        pipeline.MissingArtifactError,
        ConfigMismatchError,
        TensorFileError,
        ValueError,
        KeyError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
