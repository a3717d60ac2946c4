"""Batch command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (training divergence, gradient check failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .audio import (AudioError, Device, ManifestEntry, ManifestError, ensure_dir, load_manifest,
                    load_wav, save_wav, write_manifest)
from .config import ConfigError, RunConfig
from .dataset import FEATURE_PARAMS, build_dataset, features_from_clip, load_cached_dataset
from .evaluate import EvaluationError, evaluate, score_pair
from .features import FeatureError, MfscStack, write_feature_cache
from .model import load_verifier, save_verifier
from .nn.checkpoint import CheckpointError
from .nn.gradcheck import run_suite
from .prosody import ProsodicVector, ProsodyError, write_prosody_csv
from .synth import generate_synthetic_corpus
from .train import (STAGE_ORDER, TrainingDiverged, TrainingError, finetune_joint_classifier,
                    model_config_for, pretrain_cnn_classifier, pretrain_mlp,
                    train_fusion_greedy, train_siamese)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PREREQUISITES = {"cnn": (), "mlp": (), "fusion": ("cnn", "mlp"), "joint": ("fusion",),
                 "siamese": ("joint",)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _check_feature_params(meta_params, where):
    if meta_params is not None and meta_params != FEATURE_PARAMS:
        raise UsageError(f"{where} was produced with different feature parameters; "
                         "recompute the features")


def _dataset(args, entries):
    """Features from a cache directory (``--features``) or straight from the audio."""
    if args.features:
        info = Path(args.features) / "features.json"
        if not info.exists():
            raise FileNotFoundError(f"{info} not found; run the 'features' command first")
        _check_feature_params(json.loads(info.read_text())["feature_params"], str(info))
        feats, skipped = load_cached_dataset(entries, args.features)
    else:
        root = Path(args.manifest).parent
        feats, skipped = build_dataset(entries, [e.resolve(root) for e in entries], args.jobs)
    for s in skipped:
        print(f"skipped {s}", file=sys.stderr)
    if not feats:
        raise FeatureError("no usable utterances")
    return feats


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = ensure_dir(args.out)
    devices = [Device(d) for d in args.devices.split(",")]
    clips, manifest = generate_synthetic_corpus(args.speakers, args.utterances, devices,
                                                args.seed, args.duration)
    for clip, entry in zip(clips, manifest):
        save_wav(out / entry.path, clip)
    write_manifest(out / "manifest.jsonl", manifest)
    print(f"wrote {len(manifest)} utterances to {out}")
    return EXIT_OK


def cmd_features(args) -> int:
    entries = load_manifest(args.manifest)
    out = ensure_dir(args.out)
    root = Path(args.manifest).parent
    feats, skipped = build_dataset(entries, [e.resolve(root) for e in entries], args.jobs)
    for f in feats:
        write_feature_cache(out / f"{f.utterance_id}.mfsc", MfscStack(f.stack))
    write_prosody_csv(out / "prosody.csv",
                      [(f.utterance_id, ProsodicVector(f.prosody)) for f in feats])
    _write_text(out / "skipped.txt", "".join(f"{s}\n" for s in skipped))
    _write_text(out / "features.json",
                json.dumps({"feature_params": FEATURE_PARAMS, "manifest": str(args.manifest),
                            "n_utterances": len(feats), "n_skipped": len(skipped)},
                           indent=2, sort_keys=True) + "\n")
    print(f"extracted {len(feats)} utterances, skipped {len(skipped)}")
    for s in skipped:
        print(f"skipped {s}", file=sys.stderr)
    return EXIT_DATA if skipped else EXIT_OK


def _stage_list(stage):
    return list(STAGE_ORDER) if stage == "all" else [stage]


def _load_checked(path, cfg: RunConfig):
    """Load a checkpoint and insist it matches the requested features and model."""
    w = load_verifier(path)
    _check_feature_params(w.meta.get("feature_params"), str(path))
    want = model_config_for(cfg.train_config(), cfg.model_config(), w.config.n_classes)
    # an unshared run may start from a shared checkpoint, so sharing is not compared
    have = {**w.config.to_dict(), "weight_sharing": True}
    want = {**want.to_dict(), "weight_sharing": True}
    if have != want:
        raise UsageError(f"{path}: model configuration differs from the requested one")
    return w


def _load_upstream(out: Path, stage: str, cfg: RunConfig, fresh: dict, init=None):
    if init is not None and stage == "siamese":
        return {"joint": _load_checked(init, cfg)}
    loaded = {}
    for need in PREREQUISITES[stage]:
        if need in fresh:
            loaded[need] = fresh[need]
            continue
        path = out / f"{need}.psnn"
        if not path.exists():
            raise UsageError(f"stage '{stage}' needs the '{need}' checkpoint ({path}); "
                             f"run --stage {need} first")
        loaded[need] = _load_checked(path, cfg)
    return loaded


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tcfg, mcfg = cfg.train_config(), cfg.model_config()
    out = ensure_dir(args.out)
    stages = _stage_list(args.stage)
    if args.init and args.stage != "siamese":
        raise UsageError("--init only applies to --stage siamese")
    # prerequisites are checked before any (slow) feature extraction
    _load_upstream(out, stages[0], cfg, {}, args.init)
    feats = _dataset(args, load_manifest(args.manifest))
    _write_text(out / "run_config.txt", cfg.to_text())
    done: dict = {}
    for stage in stages:
        up = _load_upstream(out, stage, cfg, done, args.init)
        if stage == "cnn":
            res = pretrain_cnn_classifier(feats, mcfg, tcfg)
        elif stage == "mlp":
            res = pretrain_mlp(feats, mcfg, tcfg)
        elif stage == "fusion":
            res = train_fusion_greedy(up["cnn"], up["mlp"], feats, tcfg)
        elif stage == "joint":
            res = finetune_joint_classifier(up["fusion"], feats, tcfg)
        else:
            res = train_siamese(up["joint"], feats, tcfg, mcfg.weight_sharing)
            # operating point for ``verify``: EER threshold on the training pairs
            report = evaluate(feats, res.weights, cfg.protocol(max_pairs=2000))
            res.weights.meta.update(eer_threshold=report.threshold, train_eer=report.eer)
        meta = {"run_config": cfg.effective(), "feature_params": FEATURE_PARAMS}
        save_verifier(out / f"{stage}.psnn", res.weights, meta, heads=stage != "siamese")
        res.write_log(out / f"{stage}_log.csv")
        done[stage] = res.weights
        last = res.epoch_loss[-1] if res.epoch_loss else float("nan")
        print(f"{stage}: {len(res.epoch_loss)} epochs, final loss {last:.4f}, "
              f"final lr {res.final_lr:g}")
    return EXIT_OK


def _clip_features(path):
    entry = ManifestEntry(Path(path).name, "", Device.OTHER, "", str(path))
    return features_from_clip(entry, load_wav(path))


def cmd_verify(args) -> int:
    weights = load_verifier(args.checkpoint)
    threshold = args.threshold
    if threshold is None:
        threshold = weights.meta.get("eer_threshold")
        if threshold is None:
            raise UsageError("no --threshold given and the checkpoint stores none")
    fa = _clip_features(args.audio_a)
    fb = _clip_features(args.audio_b)
    score = score_pair(fa, fb, weights, args.n_subpairs, args.seed, args.symmetric)
    decision = "accept" if score.distance < threshold else "reject"
    print(f"distance {score.distance:.6f}")
    print(f"threshold {threshold:.6f}")
    print(f"decision {decision}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    weights = load_verifier(args.checkpoint)
    _check_feature_params(weights.meta.get("feature_params"), args.checkpoint)
    extra = {}
    if args.device_pair:
        extra["device_pair"] = tuple(args.device_pair.split(","))
    if args.embedding:
        extra["embedding"] = args.embedding
    protocol = cfg.protocol(**extra)
    feats = _dataset(args, load_manifest(args.manifest))
    report = evaluate(feats, weights, protocol, args.jobs)
    out = ensure_dir(args.out)
    report.write_json(out / "report.json", {
        "run_config": cfg.effective(),
        "checkpoint_config_hash": weights.config.hash(),
        "checkpoint_stage": weights.meta.get("stage"),
    })
    report.write_roc_csv(out / "roc.csv")
    print(f"EER {report.eer:.4f}  AUC {report.auc:.4f}  "
          f"({report.n_genuine} genuine, {report.n_impostor} impostor pairs)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(args.tolerance, args.seeds)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} operators failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(reports)} operators passed")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prosiam", description="Prosody-augmented Siamese speaker verification")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="text file of 'section.key = value' lines")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
        sp.add_argument("--seed", type=int, help="global seed (run.seed)")

    sp = sub.add_parser("synth", help="write a synthetic multi-device corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, default=4)
    sp.add_argument("--utterances", type=int, default=2)
    sp.add_argument("--devices", default="microphone,dvr,phone")
    sp.add_argument("--duration", type=float, default=8.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("features", help="extract MFSC caches and prosodic vectors")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("train", help="run one training stage or all of them")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="directory for checkpoints and logs")
    sp.add_argument("--stage", default="all", choices=STAGE_ORDER + ("all",))
    sp.add_argument("--features", help="feature cache directory from 'features'")
    sp.add_argument("--init", metavar="CKPT",
                    help="start the siamese stage from this checkpoint instead of joint.psnn "
                         "(e.g. a shared siamese model for model.weight_sharing=false)")
    sp.add_argument("--jobs", type=int, default=1)
    config_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("verify", help="score two recordings against a threshold")
    sp.add_argument("audio_a")
    sp.add_argument("audio_b")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--symmetric", action="store_true")
    sp.add_argument("--n-subpairs", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("evaluate", help="EER/AUC report and ROC over a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--features")
    sp.add_argument("--device-pair", metavar="A,B")
    sp.add_argument("--embedding", choices=("fc8", "fc7"))
    sp.add_argument("--jobs", type=int, default=1)
    config_args(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--seeds", type=int, default=10)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, TrainingError) as exc:
        code = EXIT_NUMERIC if isinstance(exc, TrainingDiverged) else EXIT_USAGE
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (FileNotFoundError, AudioError, ManifestError, FeatureError, ProsodyError,
            EvaluationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
