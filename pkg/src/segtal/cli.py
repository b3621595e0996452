"""Command-line entry point.

Subcommands: ``synth`` (generate a corpus), ``labelgen`` (resample segment
labels from boundary annotations), ``train``, ``eval``, ``gradcheck``
(finite-difference table for every loss) and ``ablation`` (the
loss-combination grid). Options may come from a JSON config file via
``--config``; explicit flags override the file, the file overrides
defaults, and the resolved configuration is written next to the outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional, Sequence

from .checks import LOSS_NAMES, loss_grad_checks
from .data import CorpusError, ingest_corpus, write_corpus
from .evaluation import (
    default_iou_grid,
    evaluate_corpus,
    export_cas_csv,
    export_proposals_csv,
)
from .experiments import MODE_GRID, normalize_mode, relabel_records, run_ablation
from .losses import SIMILARITY_MODES, LossWeights
from .model import init_params, load_checkpoint, save_checkpoint
from .seeds import derive_seed
from .synthetic import SynthConfig, corpus_stats, generate
from .training import TrainConfig, save_history, train

__all__ = ["main"]

_SUPERVISION_CHOICES = ("as-is", "video-only", "one-segment", "two-segment")
_SYNTH_SUPERVISION = {"one-segment": "one", "two-segment": "two", "video-only": "video"}


class UsageError(Exception):
    """Configuration or path problems; exits with status 2."""


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    config = _load_config_file(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        return handler(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _load_config_file(argv: Sequence[str]) -> dict:
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return {}
    if not os.path.exists(known.config):
        raise SystemExit(f"error: config file not found: {known.config}")
    with open(known.config) as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise SystemExit("error: config file must hold a JSON object")
    return {key.replace("-", "_"): value for key, value in loaded.items()}


def _resolve(args: argparse.Namespace, config: dict, defaults: dict) -> dict:
    """Merge flag values, config-file values and defaults, in that order."""
    merged = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
        elif key in config:
            merged[key] = config[key]
        else:
            merged[key] = default
    return merged


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segtal",
        description="Segment-level weakly supervised temporal action localization.",
    )
    parser.add_argument("--config", help="JSON file with default option values")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--num-videos", type=int)
    synth.add_argument("--num-classes", type=int)
    synth.add_argument("--feature-dim", type=int)
    synth.add_argument("--segments-range", help="min:max segments per video")
    synth.add_argument("--instances-range", help="min:max instances per video")
    synth.add_argument("--discriminative-fraction", type=float)
    synth.add_argument("--separation", type=float)
    synth.add_argument("--noise-sigma", type=float)
    synth.add_argument("--supervision", choices=_SUPERVISION_CHOICES[1:])

    labelgen = sub.add_parser("labelgen", help="resample segment labels from instances")
    labelgen.add_argument("--manifest", required=True)
    labelgen.add_argument("--out", help="output manifest path")
    labelgen.add_argument("--seed", type=int)
    labelgen.add_argument("--supervision", choices=_SUPERVISION_CHOICES[1:])

    train_p = sub.add_parser("train", help="train on a corpus manifest")
    _add_loss_flags(train_p)
    _add_train_flags(train_p)
    train_p.add_argument("--manifest", required=True)
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--num-classes", type=int)
    train_p.add_argument("--supervision", choices=_SUPERVISION_CHOICES)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    eval_p.add_argument("--manifest", required=True)
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--out", required=True)
    eval_p.add_argument("--iou-grid", help="comma list or start:step:stop")
    eval_p.add_argument("--pmf-threshold", type=float)
    eval_p.add_argument("--act-threshold", type=float)
    eval_p.add_argument("--score-threshold", type=float)
    eval_p.add_argument("--r-fallback", type=float)

    grad = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    grad.add_argument("--seed", type=int)
    grad.add_argument("--trials", type=int)
    grad.add_argument("--epsilon", type=float)
    grad.add_argument("--tolerance", type=float)
    _add_loss_flags(grad)

    abl = sub.add_parser("ablation", help="run the loss-combination grid")
    _add_loss_flags(abl)
    _add_train_flags(abl)
    abl.add_argument("--manifest", required=True)
    abl.add_argument("--out", required=True)
    abl.add_argument("--seed", type=int)
    abl.add_argument("--modes", help="comma list of loss combinations (default: all 8)")
    abl.add_argument("--supervision", help="comma list of supervision modes")
    abl.add_argument("--iou-grid")
    abl.add_argument("--pmf-threshold", type=float)
    abl.add_argument("--act-threshold", type=float)
    abl.add_argument("--score-threshold", type=float)
    return parser


def _add_loss_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--alpha", type=float, help="partial segment loss weight")
    parser.add_argument("--beta", type=float, help="sphere loss weight")
    parser.add_argument("--gamma", type=float, help="propagation loss weight")
    parser.add_argument("--margin-m", type=int, help="angular margin order")
    parser.add_argument("--r-fallback", type=float)
    parser.add_argument("--similarity-mode", choices=SIMILARITY_MODES)
    parser.add_argument("--psi-literal", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--normalize-y", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--l2-segment", action=argparse.BooleanOptionalAction, default=None)


def _add_train_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--steps", type=int, help="training steps")
    parser.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--checkpoint-every", type=int)


_LOSS_DEFAULTS = {
    "alpha": 0.1,
    "beta": 1e-4,
    "gamma": 0.02,
    "margin_m": 4,
    "r_fallback": 8.0,
    "similarity_mode": "normalized-clamped",
    "psi_literal": False,
    "normalize_y": False,
    "l2_segment": False,
}

_TRAIN_DEFAULTS = {
    "steps": 3000,
    "learning_rate": 1e-4,
    "batch_size": 8,
    "dropout": 0.7,
    "checkpoint_every": 0,
}


def _loss_weights(resolved: dict) -> LossWeights:
    return LossWeights(
        alpha=resolved["alpha"],
        beta=resolved["beta"],
        gamma=resolved["gamma"],
        margin_m=resolved["margin_m"],
        r_fallback=resolved["r_fallback"],
        similarity_mode=resolved["similarity_mode"],
        psi_literal=resolved["psi_literal"],
        normalize_y=resolved["normalize_y"],
        use_l2_segment=resolved["l2_segment"],
    )


def _train_config(resolved: dict, weights: LossWeights, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        max_steps=resolved["steps"],
        seed=seed,
        loss_weights=weights,
        dropout_rate=resolved["dropout"],
        checkpoint_every=resolved["checkpoint_every"],
    )


def _parse_range(text, flag: str) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        lo, hi = text
        return int(lo), int(hi)
    try:
        lo, hi = str(text).split(":")
        return int(lo), int(hi)
    except ValueError as exc:
        raise UsageError(f"{flag} expects min:max, got {text!r}") from exc


def _parse_iou_grid(text) -> list[float]:
    if text is None:
        return default_iou_grid()
    if isinstance(text, (list, tuple)):
        values = [float(v) for v in text]
    else:
        text = str(text)
        if ":" in text:
            try:
                start, step, stop = (float(v) for v in text.split(":"))
            except ValueError as exc:
                raise UsageError(f"bad IoU grid {text!r}") from exc
            count = int(round((stop - start) / step)) + 1
            values = [round(start + i * step, 10) for i in range(count)]
        else:
            values = [float(v) for v in text.split(",") if v.strip()]
    if not values or not all(0.0 < v <= 1.0 for v in values):
        raise UsageError(f"IoU grid must lie in (0, 1], got {values}")
    return values


def _require_path(path, kind: str):
    if not os.path.exists(path):
        raise UsageError(f"{kind} not found: {path}")


def _write_run_config(out_dir, command: str, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, **resolved}
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# command handlers


def _cmd_synth(args, config) -> int:
    defaults = {
        "seed": 0,
        "num_videos": 60,
        "num_classes": 4,
        "feature_dim": 32,
        "segments_range": "40:80",
        "instances_range": "1:3",
        "discriminative_fraction": 0.3,
        "separation": 3.0,
        "noise_sigma": 1.0,
        "supervision": "one-segment",
    }
    resolved = _resolve(args, config, defaults)
    synth_config = SynthConfig(
        num_videos=resolved["num_videos"],
        num_classes=resolved["num_classes"],
        feature_dim=resolved["feature_dim"],
        segments_range=_parse_range(resolved["segments_range"], "--segments-range"),
        instances_range=_parse_range(resolved["instances_range"], "--instances-range"),
        discriminative_fraction=resolved["discriminative_fraction"],
        separation=resolved["separation"],
        noise_sigma=resolved["noise_sigma"],
        seed=resolved["seed"],
    )
    records = generate(synth_config, _SYNTH_SUPERVISION[resolved["supervision"]])
    manifest = write_corpus(records, args.out)
    _write_run_config(args.out, "synth", resolved)
    stats = corpus_stats(records)
    print(f"wrote {manifest}")
    print(json.dumps(stats, indent=2))
    return 0


def _cmd_labelgen(args, config) -> int:
    defaults = {"seed": 0, "supervision": "one-segment"}
    resolved = _resolve(args, config, defaults)
    _require_path(args.manifest, "manifest")
    records = ingest_corpus(args.manifest)
    relabeled = relabel_records(records, resolved["supervision"], resolved["seed"])

    out_path = args.out or os.path.join(
        os.path.dirname(os.path.abspath(args.manifest)),
        f"manifest-{resolved['supervision']}.json",
    )
    with open(args.manifest) as fh:
        entries = json.load(fh)
    manifest_dir = os.path.dirname(os.path.abspath(args.manifest))
    out_dir = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    by_id = {rec.features.video_id: rec for rec in relabeled}
    for entry in entries:
        record = by_id[entry["video_id"]]
        entry["labels"]["video"] = [int(n) for n in record.labels.present_classes()]
        entry["labels"]["segments"] = [
            {"t": t, "n": n} for t, n in record.labels.segment_labels
        ]
        absolute = os.path.join(manifest_dir, entry["feature_file"])
        entry["feature_file"] = os.path.relpath(absolute, out_dir)
    with open(out_path, "w") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out_path}")
    return 0


def _cmd_train(args, config) -> int:
    defaults = {"seed": 0, "supervision": "as-is", "num_classes": None}
    defaults.update(_LOSS_DEFAULTS)
    defaults.update(_TRAIN_DEFAULTS)
    resolved = _resolve(args, config, defaults)
    _require_path(args.manifest, "manifest")

    records = ingest_corpus(args.manifest, resolved["num_classes"])
    if not records:
        raise UsageError("manifest holds no videos")
    if resolved["supervision"] != "as-is":
        records = relabel_records(records, resolved["supervision"], resolved["seed"])

    weights = _loss_weights(resolved)
    train_cfg = _train_config(resolved, weights, derive_seed(resolved["seed"], "train"))
    params = init_params(
        records[0].features.feature_dim,
        records[0].labels.num_classes,
        derive_seed(resolved["seed"], "init"),
    )
    os.makedirs(args.out, exist_ok=True)
    params, history = train(records, params, train_cfg, checkpoint_dir=args.out)
    save_checkpoint(
        os.path.join(args.out, "checkpoint.ckpt"),
        params,
        seed=resolved["seed"],
        step=train_cfg.max_steps,
    )
    save_history(os.path.join(args.out, "history.jsonl"), history)
    _write_run_config(args.out, "train", resolved)
    final = history[-1].total if history else float("nan")
    print(f"trained {train_cfg.max_steps} steps; final batch loss {final:.6f}")
    print(f"wrote {os.path.join(args.out, 'checkpoint.ckpt')}")
    return 0


def _cmd_eval(args, config) -> int:
    defaults = {
        "iou_grid": None,
        "pmf_threshold": 0.1,
        "act_threshold": 0.0,
        "score_threshold": 0.0,
        "r_fallback": 8.0,
    }
    resolved = _resolve(args, config, defaults)
    _require_path(args.manifest, "manifest")
    _require_path(args.checkpoint, "checkpoint")

    params, header = load_checkpoint(args.checkpoint)
    records = ingest_corpus(args.manifest, header["num_classes"])
    grid = _parse_iou_grid(resolved["iou_grid"])
    report, results = evaluate_corpus(
        records,
        params,
        grid,
        pmf_threshold=resolved["pmf_threshold"],
        score_threshold=resolved["score_threshold"],
        act_threshold=resolved["act_threshold"],
        r_fallback=resolved["r_fallback"],
    )
    os.makedirs(args.out, exist_ok=True)
    report.save(os.path.join(args.out, "report.json"))
    export_proposals_csv(os.path.join(args.out, "proposals.csv"), results)
    export_cas_csv(os.path.join(args.out, "cas"), results)
    resolved["iou_grid"] = grid
    _write_run_config(args.out, "eval", resolved)
    for thr in grid:
        print(f"mAP@{thr:g}: {report.map_at_iou[thr]:.4f}")
    print(f"classification mAP: {report.classification_map:.4f}")
    return 0


def _cmd_gradcheck(args, config) -> int:
    defaults = {"seed": 0, "trials": 5, "epsilon": 1e-6, "tolerance": 1e-5}
    defaults.update(_LOSS_DEFAULTS)
    resolved = _resolve(args, config, defaults)
    weights = _loss_weights(resolved)
    errors = loss_grad_checks(
        resolved["seed"], trials=resolved["trials"], epsilon=resolved["epsilon"], weights=weights
    )
    tolerance = resolved["tolerance"]
    print(f"{'loss':<18}{'max rel err':>14}  status")
    all_ok = True
    for name in LOSS_NAMES:
        ok = errors[name] < tolerance
        all_ok &= ok
        print(f"{name:<18}{errors[name]:>14.3e}  {'pass' if ok else 'FAIL'}")
    return 0 if all_ok else 1


def _cmd_ablation(args, config) -> int:
    defaults = {
        "seed": 0,
        "modes": ",".join(MODE_GRID),
        "supervision": "one-segment",
        "iou_grid": None,
        "pmf_threshold": 0.1,
        "act_threshold": 0.0,
        "score_threshold": 0.0,
    }
    defaults.update(_LOSS_DEFAULTS)
    defaults.update(_TRAIN_DEFAULTS)
    resolved = _resolve(args, config, defaults)
    _require_path(args.manifest, "manifest")

    records = ingest_corpus(args.manifest)
    if not records:
        raise UsageError("manifest holds no videos")
    modes = [normalize_mode(m) for m in str(resolved["modes"]).split(",") if m.strip()]
    supervision_modes = [s.strip() for s in str(resolved["supervision"]).split(",") if s.strip()]
    grid = _parse_iou_grid(resolved["iou_grid"])

    weights = _loss_weights(resolved)
    train_cfg = _train_config(resolved, weights, resolved["seed"])
    rows = run_ablation(
        records,
        modes,
        supervision_modes,
        resolved["seed"],
        train_cfg,
        grid,
        pmf_threshold=resolved["pmf_threshold"],
        score_threshold=resolved["score_threshold"],
        act_threshold=resolved["act_threshold"],
    )

    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "ablation.csv")
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    resolved["iou_grid"] = grid
    _write_run_config(args.out, "ablation", resolved)

    for row in rows:
        cells = "  ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float))
        print(f"{row['supervision']:<12} {row['mode']:<14} {cells}")
    print(f"wrote {table_path}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "labelgen": _cmd_labelgen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablation": _cmd_ablation,
}
