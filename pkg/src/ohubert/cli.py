"""Command-line entry point: ``ohubert <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (one ``error: ...`` line on stderr),
2 usage error (bad flags, unknown subcommand, invalid configuration).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import FORMAT_VERSION, CheckpointError
from .config import ConfigError, RunConfig

log = logging.getLogger("ohubert")

RUNTIME_ERRORS = (ValueError, OSError, KeyError, FloatingPointError, RuntimeError,
                  CheckpointError)


def _effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(args.set)


def _write_config(cfg: RunConfig, out_dir: Path, name: str = "config.json") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / name)


def _sidecar(cfg: RunConfig, out_file: Path) -> None:
    """Effective config next to a single-file output: ``<stem>.config.json``."""
    _write_config(cfg, out_file.parent, f"{out_file.stem}.config.json")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands ------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    from .corpus import synth_corpus

    c = cfg.corpus
    out = Path(args.out_dir)
    m = synth_corpus(c.n_speakers, c.n_contents, c.utterances_per_speaker, c.duration_s,
                     c.sample_rate, c.seed, out, min_segment_samples=cfg.model.downsample)
    _write_config(cfg, out)
    print(f"wrote {len(m)} utterances and manifest.jsonl to {out}")
    return 0


def cmd_make_labels(args, cfg: RunConfig) -> int:
    from .corpus import Manifest
    from .labeler import label_corpus, save_labels
    from .model import frame_count

    manifest = Manifest.load(args.manifest or cfg.train.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lc = cfg.labels
    cb, labels = label_corpus(manifest.load_audio(), cfg.model.C,
                              lambda n: frame_count(n, cfg.model), lc.n_mels, lc.window,
                              lc.hop, lc.iters, lc.seed)
    save_labels(out / "labels.jsonl", labels)
    cb.save(out / "codebook.npy")
    _dump({"C": cb.C, "n_iter": cb.n_iter, "inertia_history": cb.inertia_history},
          out / "kmeans.json")
    _write_config(cfg, out)
    print(f"labelled {len(labels)} utterances with C={cb.C} in {cb.n_iter} Lloyd rounds; "
          f"wrote {out / 'labels.jsonl'}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .trainer import pretrain

    if args.manifest:
        cfg = cfg.override([f"train.manifest={json.dumps(args.manifest)}"])
    if args.labels:
        cfg = cfg.override([f"train.labels={json.dumps(args.labels)}"])
    t0 = time.time()
    every = max(1, cfg.train.steps // 20)

    def progress(step, br):
        if step % every == 0 or step == cfg.train.steps:
            log.info("step %d  total %.4f  mpl %.4f  usp %.4f  simclr %.4f  orth %.4f  (%.0fs)",
                     step, br.l_total, br.l_mpl, br.l_usp, br.l_simclr, br.l_orth,
                     time.time() - t0)

    tr = pretrain(cfg, args.out_dir, resume=args.resume, progress=progress)
    print(f"finished at step {tr.step}; checkpoints in {args.out_dir}")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    from .corpus import Manifest
    from .probe import extract_all, load_encoder

    manifest = Manifest.load(args.manifest)
    audio = manifest.load_audio()
    model = load_encoder(args.ckpt)
    fs = extract_all(model, [audio[e.source_id] for e in manifest.entries], [args.mode],
                     seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fs.save(out)
    _sidecar(cfg, out)
    print(f"extracted mode {args.mode} features for {len(fs.source_ids)} utterances to {out}")
    return 0


def cmd_probe(args, cfg: RunConfig) -> int:
    from .corpus import Manifest
    from .probe import FeatureSet, extract_all, layer_weight_report, run_probe, write_layer_csv

    if args.features:
        fs = FeatureSet.load(args.features)
    elif args.ckpt and args.manifest:
        manifest = Manifest.load(args.manifest)
        audio = manifest.load_audio()
        fs = extract_all(args.ckpt, [audio[e.source_id] for e in manifest.entries],
                         [args.mode], seed=cfg.probe.seed)
    else:
        raise ValueError("probe needs --features, or both --ckpt and --manifest")
    pc = cfg.probe
    report = run_probe(fs, args.task, args.mode, pc.epochs, pc.lr, pc.seed, pc.split,
                       pc.gl_per_layer)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    write_layer_csv(layer_weight_report([report]), out.with_suffix(".layers.csv"))
    _sidecar(cfg, out)
    print(f"{args.task}/{args.mode}: dev {report.dev_accuracy:.4f}  "
          f"test {report.test_accuracy:.4f}")
    return 0


def cmd_ensemble(args, cfg: RunConfig) -> int:
    from .plotting import plot_accuracies
    from .probe import ProbeReport, ensemble_reports, layer_weight_report, write_layer_csv

    reports = [ProbeReport.load(p) for p in args.reports]
    result = ensemble_reports(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump(result, out)
    write_layer_csv(layer_weight_report(reports), out.with_suffix(".layers.csv"))
    plot_accuracies(result["accuracy"], out.with_suffix(".png"))
    _sidecar(cfg, out)
    print("  ".join(f"{k} {v:.4f}" for k, v in result["accuracy"].items()))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .trainer import grad_check

    t0 = time.time()
    report = grad_check(cfg, n_params_sampled=args.params, eps=args.eps, seed=args.seed)
    worst = 0.0
    for group, r in report.items():
        worst = max(worst, r["max_rel_err"])
        print(f"{group:16s} {r['max_rel_err']:.3e}  ({r['n_coords']} coords)")
    ok = worst < args.tol
    print(f"max relative error {worst:.3e}; {'PASS' if ok else 'FAIL'} at tol {args.tol:g} "
          f"({time.time() - t0:.1f}s)")
    if args.out_dir:
        out = Path(args.out_dir)
        _write_config(cfg, out)
        _dump({g: {k: float(v) for k, v in r.items()} for g, r in report.items()},
              out / "gradcheck.json")
    return 0 if ok else 1


def cmd_augment_preview(args, cfg: RunConfig) -> int:
    from .augment import two_stage_augment
    from .corpus import Manifest, make_batch, write_wav

    manifest = Manifest.load(args.manifest or cfg.train.manifest)
    t = cfg.train.segment_frames * cfg.model.downsample
    batch = make_batch(manifest, args.n_sources, t, args.seed, align=cfg.model.downsample)
    aug = two_stage_augment(batch, cfg.augment, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(batch)):
        role = batch.roles[i]
        name = f"seg{i:02d}_{batch.source_ids[batch.source_index[i]]}_{role}"
        write_wav(out / f"{name}_clean.wav", np.clip(batch.samples[i], -1, 1), batch.sample_rate)
        peak = max(1.0, float(np.abs(aug.samples[i]).max()))
        write_wav(out / f"{name}_aug.wav", aug.samples[i] / peak, batch.sample_rate)
        rows.append({"segment": i, "source_id": batch.source_ids[batch.source_index[i]],
                     "role": role, "reverberated": bool(aug.reverberated[i])})
    _dump({"segments": rows, "n_reverberated": int(aug.reverberated.sum())},
          out / "preview.json")
    _write_config(cfg, out)
    print(f"wrote {len(rows)} clean/augmented segment pairs to {out}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (every field has a default)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field; VALUE is parsed as JSON when possible")

    p = argparse.ArgumentParser(prog="ohubert", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"ohubert {__version__} (checkpoint format {FORMAT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("make-labels", parents=[common], help="k-means pseudo-labels")
    s.add_argument("--manifest")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_make_labels)

    s = sub.add_parser("pretrain", parents=[common], help="pre-train the encoder")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--manifest")
    s.add_argument("--labels")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("extract", parents=[common], help="frozen per-layer features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", required=True, choices=["G", "L", "GL", "R"])
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help=".npz output")
    s.add_argument("--seed", type=int, default=0, help="position seed for mode R")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("probe", parents=[common], help="train a layer-weighted linear probe")
    s.add_argument("--task", required=True, choices=["speaker", "content"])
    s.add_argument("--mode", required=True, choices=["G", "L", "GL", "R"])
    s.add_argument("--features", help=".npz written by extract")
    s.add_argument("--ckpt")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True, help="report .json")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("ensemble", parents=[common], help="majority vote over probe reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--params", type=int, default=16, help="coordinates sampled per group")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("augment-preview", parents=[common], help="write augmented example WAVs")
    s.add_argument("--manifest")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-sources", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_augment_preview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _effective_config(args)
    except ConfigError as exc:  # a bad --config/--set is a usage error
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
