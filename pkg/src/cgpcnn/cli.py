"""Command line entry point: ``cgpcnn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 audit/gradient-check failure,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import DivergenceError
from .corpus import SynthCorpusConfig, read_manifest, synth_speaker_corpus, write_manifest
from .experiment import (DESK_GEOMETRY, AuditError, TrainConfig, ablate, evaluate, extract_corpus,
                         format_gradcheck, format_trace, gradcheck_suite, predicted_widths,
                         shape_audit, train, write_results_csv, write_summary_csv)

EXIT_OK, EXIT_USAGE, EXIT_AUDIT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.replace("&", ",").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad feature spec {text!r}; use e.g. 26,40") from None
    if not 1 <= len(dims) <= 2:
        raise argparse.ArgumentTypeError("feature spec needs one or two filter counts")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cgpcnn", description="Multi-resolution MFBF fusion with cross-gated parallel CNNs")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic speaker corpus")
    s.add_argument("--n-speakers", type=int, default=8)
    s.add_argument("--utterances", type=int, default=10)
    s.add_argument("--train-per-speaker", type=int, default=5)
    s.add_argument("--duration", type=float, default=3.0)
    s.add_argument("--sample-rate", type=int, default=16000)

    s = sub.add_parser("extract", help="MFBF + CMN feature files for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mels", type=int, nargs="+", default=[13, 26, 40])
    s.add_argument("--duration", type=float, default=3.0)

    def train_args(s):
        s.add_argument("--manifest", help="manifest holding train (and test) records")
        s.add_argument("--features-dir")
        s.add_argument("--arch")
        s.add_argument("--features", type=_pair, help="filter counts, e.g. 26,40")
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--channels", type=int)
        s.add_argument("--head-channels", type=int)
        s.add_argument("--embed-dim", type=int)
        s.add_argument("--desk", action="store_true",
                       help=f"shrink the network to {DESK_GEOMETRY}")

    s = sub.add_parser("train", help="train one network")
    train_args(s)
    s.add_argument("--checkpoint")

    s = sub.add_parser("eval", help="speaker recognition rate of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", type=_pair)
    s.add_argument("--features-dir")
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--snr", type=float, help="add white noise at this SNR (dB)")
    s.add_argument("--noise-seed", type=int, default=0)

    s = sub.add_parser("ablate", help="architecture x features x seeds matrix")
    train_args(s)
    s.add_argument("--archs", nargs="+", default=["CG-PCNN", "PCNN", "G-PCNN", "SFAN"])
    s.add_argument("--pairs", type=_pair, nargs="+", default=[(26, 40)])
    s.add_argument("--n-seeds", type=int, default=10)
    s.add_argument("--train-per-speaker", type=int, default=5)

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--max-coords", type=int, default=40)
    s.add_argument("--all-archs", action="store_true")

    s = sub.add_parser("shape-audit", help="compare a forward trace with the reference layer sizes")
    s.add_argument("--m1", type=int, default=26)
    s.add_argument("--m2", type=int, default=40)
    s.add_argument("--frames", type=int, default=300)
    s.add_argument("--n-speakers", type=int, default=100)
    return p


def _train_config(args) -> TrainConfig:
    base = TrainConfig().to_dict()
    if args.config:
        base = TrainConfig.from_json(args.config).to_dict()
    if getattr(args, "desk", False):
        base.update(DESK_GEOMETRY)
    overrides = {
        "seed": args.seed,
        "architecture": getattr(args, "arch", None),
        "feature_pair": getattr(args, "features", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "channels": getattr(args, "channels", None),
        "head_channels": getattr(args, "head_channels", None),
        "embed_dim": getattr(args, "embed_dim", None),
        "features_dir": getattr(args, "features_dir", None),
        "checkpoint": getattr(args, "checkpoint", None),
    }
    manifest = getattr(args, "manifest", None)
    if manifest:
        overrides["train_manifest"] = overrides["test_manifest"] = manifest
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**base)


def cmd_synth(args) -> int:
    cfg = SynthCorpusConfig(args.n_speakers, args.utterances, args.train_per_speaker,
                            args.duration, args.sample_rate, args.seed or 0)
    out = Path(args.out_dir)
    records = synth_speaker_corpus(cfg, out)
    write_manifest(out / "train.jsonl", [r for r in records if r.split == "train"])
    write_manifest(out / "test.jsonl", [r for r in records if r.split == "test"])
    print(f"wrote {len(records)} utterances to {out} (manifest {out / 'manifest.jsonl'})")
    return EXIT_OK


def cmd_extract(args) -> int:
    records = read_manifest(args.manifest)
    out = Path(args.out_dir) / "features"
    written = extract_corpus(records, args.mels, out, args.duration)
    print(f"wrote {len(written)} feature files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if cfg.train_manifest is None:
        raise UsageError("train needs --manifest or train_manifest in --config")
    out = Path(args.out_dir)
    if cfg.features_dir is None:
        cfg.features_dir = str(out / "features")
    if cfg.checkpoint is None:
        cfg.checkpoint = str(out / f"{cfg.architecture.lower()}_seed{cfg.seed}.cgpn")
    _, result = train(cfg)
    run = {"config": cfg.to_dict(), "train_srr": result.train_accuracy,
           "test_srr": result.test_accuracy, "loss_trace": result.loss_trace,
           "seconds": result.seconds}
    Path(cfg.checkpoint + ".run.json").write_text(json.dumps(run, indent=1) + "\n")
    test = "n/a" if result.test_accuracy is None else f"{result.test_accuracy:.2f}%"
    print(f"{cfg.architecture} train SRR {result.train_accuracy:.2f}% test SRR {test} "
          f"({result.seconds:.1f}s) -> {cfg.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    records = read_manifest(args.manifest)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    features_dir = args.features_dir or str(Path(args.out_dir) / "features")
    pair = args.features
    if pair is None:
        meta_path = Path(args.checkpoint + ".json")
        if not meta_path.is_file():
            raise UsageError("--features is required when the checkpoint has no .json sidecar")
        pair = tuple(json.loads(meta_path.read_text())["feature_pair"])
    noise = None if args.snr is None else (args.snr, args.noise_seed)
    srr = evaluate(args.checkpoint, records, pair, noise=noise, features_dir=features_dir)
    cond = "clean" if noise is None else f"{args.snr:g} dB SNR"
    print(f"SRR {srr:.2f}% on {len(records)} utterances ({cond})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _train_config(args)
    if base.train_manifest is None:
        raise UsageError("ablate needs --manifest")
    records = read_manifest(base.train_manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features_dir = base.features_dir or str(out / "features")
    seeds = range(args.seed or 0, (args.seed or 0) + args.n_seeds)
    results, summary = ablate(base, records, args.archs, args.pairs, list(seeds),
                              args.train_per_speaker, features_dir)
    write_results_csv(out / "results.csv", results)
    write_summary_csv(out / "summary.csv", summary)
    for row in summary:
        print(f"{row['network']:8s} {row['features']:16s} {row['mean']:7.2f} +- {row['std']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    archs = ("CG-PCNN", "PCNN", "G-PCNN", "SFAN") if args.all_archs else ("CG-PCNN",)
    ok, report = gradcheck_suite(range(args.seeds), max_coords=args.max_coords, architectures=archs)
    print(format_gradcheck(report))
    if not ok:
        raise AuditError("gradient check failed")
    return EXIT_OK


def cmd_shape_audit(args) -> int:
    ok, trace = shape_audit(args.m1, args.m2, args.frames, args.n_speakers)
    print(f"input      {args.m1} x {args.frames} | {args.m2} x {args.frames}")
    print(format_trace(trace))
    print("layer widths: " + ", ".join(str(w) for w in predicted_widths(args.frames)))
    if not ok:
        raise AuditError(f"trace for {args.frames} frames does not match the reference layer sizes")
    print("matches the reference layer sizes")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "shape-audit": cmd_shape_audit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except AuditError as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
