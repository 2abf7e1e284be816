"""Command-line surface: reproducible experiments from config files.

Subcommands: synth, stats, train, adapt, infer, score, oracle-eval, tune,
report.  Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.  Every run directory receives a snapshot of its resolved
configuration so experiments can be replayed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import wave
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .core import Annotation, FrameMatrix, read_rttm, read_uem, write_rttm
from .errors import DiaristError, FormatError, NumericalError, ParseError
from .labels import speaker_capacity_stats
from .metrics import der_corpus
from .pipeline import (
    PipelineParams,
    ahc_cluster,
    align_and_aggregate,
    oracle_stitch,
    run_pipeline,
    segment_windows,
    tile_windows,
    window_embeddings,
)
from .segmentation import ModelConfig, build_model, load_model, save_model
from .synth import SynthSpec, gen_conversation, load_features, logmel, save_features
from .training import TrainConfig, adapt, make_windows, save_history_csv, train_segmentation
from .tuning import SearchSpace, save_trials_csv, tune

# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_CONFIG_SECTIONS = {
    "seed": None,
    "data": {"train", "val"},
    "model": {f.name for f in dataclasses.fields(ModelConfig)} - {"feature_dim"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"},
    "pipeline": {f.name for f in dataclasses.fields(PipelineParams)},
}


def load_run_config(path: str | Path) -> dict:
    """Read a YAML run config, rejecting unknown sections or keys."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: config must be a mapping")
    for section, value in raw.items():
        if section not in _CONFIG_SECTIONS:
            raise ParseError(f"{path}: unknown config section {section!r}")
        allowed = _CONFIG_SECTIONS[section]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ParseError(f"{path}: section {section!r} must be a mapping")
        for key in value:
            if key not in allowed:
                raise ParseError(f"{path}: unknown key {section}.{key}")
    return raw


def save_run_config(path: Path, config: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# Dataset directories: *.feat (or *.wav) plus reference.rttm
# ---------------------------------------------------------------------------

def read_wav(path: str | Path) -> np.ndarray:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2 or fh.getframerate() != 16000:
            raise FormatError(f"{path}: expected 16 kHz mono 16-bit PCM")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path: str | Path, audio: np.ndarray) -> None:
    pcm = np.clip(np.asarray(audio) * 32767.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(pcm.tobytes())


def load_recording(path: Path) -> FrameMatrix:
    if path.suffix == ".feat":
        return load_features(path)
    if path.suffix == ".wav":
        return logmel(read_wav(path))
    raise FormatError(f"{path}: unsupported recording format {path.suffix!r}")


def load_dataset(directory: str | Path) -> list[tuple[str, FrameMatrix, Annotation | None]]:
    """Load (id, features, reference) triples from a dataset directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    references: dict[str, Annotation] = {}
    rttm_path = directory / "reference.rttm"
    if rttm_path.exists():
        references = {ann.recording_id: ann for ann in read_rttm(rttm_path.read_text())}
    paths = sorted(directory.glob("*.feat")) or sorted(directory.glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no .feat or .wav recordings in {directory}")
    return [(p.stem, load_recording(p), references.get(p.stem)) for p in paths]


def _require_references(dataset, directory) -> list[tuple[str, FrameMatrix, Annotation]]:
    missing = [rec_id for rec_id, _, ann in dataset if ann is None]
    if missing:
        raise ParseError(f"{directory}: no reference for {', '.join(missing)} in reference.rttm")
    return dataset


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    annotations = []
    for i in range(args.num_recordings):
        spec = SynthSpec(
            seed=args.seed + i,
            num_speakers=args.num_speakers,
            duration=args.duration,
            mean_turn=args.mean_turn,
            mean_pause=args.mean_pause,
            overlap_prob=args.overlap_prob,
        )
        rec_id = f"{args.prefix}{i:03d}"
        audio, annotation = gen_conversation(spec, rec_id)
        save_features(out / f"{rec_id}.feat", logmel(audio))
        if args.wav:
            write_wav(out / f"{rec_id}.wav", audio)
        annotations.append(annotation)
    (out / "reference.rttm").write_text(write_rttm(annotations))
    print(f"wrote {args.num_recordings} recordings to {out}")
    return 0


def cmd_stats(args) -> int:
    if args.rttm:
        annotations = read_rttm(Path(args.rttm).read_text())
    else:
        dataset = _require_references(load_dataset(args.data), args.data)
        annotations = [ann for _, _, ann in dataset]
    stats = speaker_capacity_stats(annotations, args.window, args.coverage)
    print(f"window={args.window:g}s coverage_target={args.coverage:g}")
    print(f"N={stats.num_speakers} K={stats.max_overlap}")
    print("speakers_per_window coverage:",
          " ".join(f"{n}:{c:.3f}" for n, c in enumerate(stats.speaker_coverage)))
    print("max_simultaneous coverage:",
          " ".join(f"{k}:{c:.3f}" for k, c in enumerate(stats.overlap_coverage)))
    return 0


def _split_train_val(dataset):
    n_val = max(1, len(dataset) // 5) if len(dataset) > 1 else 0
    if n_val == 0:
        return dataset, dataset
    return dataset[:-n_val], dataset[-n_val:]


def _dataset_windows(dataset, window: float, num_speakers: int):
    out = []
    for _, feats, ann in dataset:
        out.extend(make_windows(feats, ann, window, num_speakers))
    return out


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    data_cfg = config.get("data", {})
    if "train" not in data_cfg:
        raise ParseError(f"{args.config}: data.train is required")
    train_set = _require_references(load_dataset(data_cfg["train"]), data_cfg["train"])
    if data_cfg.get("val"):
        val_set = _require_references(load_dataset(data_cfg["val"]), data_cfg["val"])
    else:
        train_set, val_set = _split_train_val(train_set)

    feature_dim = train_set[0][1].num_channels
    model_config = ModelConfig(feature_dim=feature_dim, **config.get("model", {}))
    train_kwargs = dict(config.get("train", {}))
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    train_config = TrainConfig(seed=seed, **train_kwargs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "seed": seed,
        "data": dict(data_cfg),
        "model": dataclasses.asdict(model_config),
        "train": {k: v for k, v in dataclasses.asdict(train_config).items() if k != "seed"},
        "pipeline": dict(config.get("pipeline", {})),
    }
    save_run_config(out / "config.yaml", resolved)

    model = build_model(model_config, seed=seed)
    train_windows = _dataset_windows(train_set, model_config.window, model_config.num_speakers)
    val_windows = _dataset_windows(val_set, model_config.window, model_config.num_speakers)
    model, history = train_segmentation(model, train_windows, val_windows, train_config)
    save_history_csv(out / "history.csv", history)
    save_model(out / "model.ckpt", model)
    best = history.best_epoch
    print(f"trained {model_config.processing}/{model_config.loss_type} model "
          f"({model.num_parameters()} parameters), best epoch {best}")
    print(f"run directory: {out}")
    return 0


def cmd_adapt(args) -> int:
    model = load_model(args.model)
    dataset = _require_references(load_dataset(args.data), args.data)
    train_set, val_set = _split_train_val(dataset)
    config = TrainConfig(
        steps_per_epoch=args.steps_per_epoch,
        batch=args.batch,
        adapt_lr=args.lr,
        adapt_patience=args.patience,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    window = model.config.window
    model, history = adapt(
        model,
        _dataset_windows(train_set, window, model.config.num_speakers),
        _dataset_windows(val_set, window, model.config.num_speakers),
        config,
    )
    save_history_csv(out / "history.csv", history)
    save_model(out / "model.ckpt", model)
    print(f"adapted for {len(history.val_loss)} epochs, best epoch {history.best_epoch}")
    return 0


def _pipeline_params(args, window: float) -> PipelineParams:
    return PipelineParams(
        hop=args.hop if args.hop is not None else window / 2,
        clustering_threshold=args.threshold,
        min_cluster_size=args.min_cluster_size,
        min_embed_duration=args.min_embed_duration,
    )


def cmd_infer(args) -> int:
    model = load_model(args.model)
    params = _pipeline_params(args, model.config.window)
    if args.features:
        recordings = [(Path(args.features).stem, load_recording(Path(args.features)), None)]
    else:
        recordings = load_dataset(args.data)
    hypotheses = []
    for rec_id, feats, _ in recordings:
        hypotheses.append(run_pipeline(feats, model, params, recording_id=rec_id))
    Path(args.out).write_text(write_rttm(hypotheses))
    print(f"wrote hypotheses for {len(hypotheses)} recordings to {args.out}")
    return 0


def _write_score_csv(path: Path, per_file, macro: float) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "missed", "false_alarm", "confusion", "scored_speech", "der"])
        for rec_id in sorted(per_file):
            b = per_file[rec_id]
            writer.writerow([
                rec_id, f"{b.missed:.3f}", f"{b.false_alarm:.3f}", f"{b.confusion:.3f}",
                f"{b.scored_speech:.3f}", f"{b.der:.6f}",
            ])
        writer.writerow(["MACRO", "", "", "", "", f"{macro:.6f}"])


def cmd_score(args) -> int:
    refs = {a.recording_id: a for a in read_rttm(Path(args.ref).read_text())}
    hyps = {a.recording_id: a for a in read_rttm(Path(args.hyp).read_text())}
    uems = None
    if args.uem:
        uems = {u.recording_id: u for u in read_uem(Path(args.uem).read_text())}
    pairs = {}
    for rec_id, ref in refs.items():
        pairs[rec_id] = (ref, hyps.get(rec_id, Annotation(rec_id)))
    per_file, macro = der_corpus(pairs, collar=args.collar, uems=uems, min_duration=args.min_duration)
    for rec_id in sorted(per_file):
        b = per_file[rec_id]
        print(f"{rec_id}: DER {b.der:.3f} (miss {b.missed:.2f}s, fa {b.false_alarm:.2f}s, "
              f"conf {b.confusion:.2f}s / {b.scored_speech:.2f}s)")
    print(f"MACRO DER {macro:.3f}")
    if args.out:
        _write_score_csv(Path(args.out), per_file, macro)
    return 0


def cmd_oracle_eval(args) -> int:
    model = load_model(args.model)
    dataset = _require_references(load_dataset(args.data), args.data)
    pairs = {}
    for rec_id, feats, ref in dataset:
        duration = feats.num_frames / feats.frame_rate
        spans = tile_windows(duration, model.config.window)
        windows = segment_windows(model, feats, spans=spans)
        hyp = oracle_stitch(windows, ref, feats.frame_rate)
        pairs[rec_id] = (ref, hyp)
    per_file, macro = der_corpus(pairs, collar=args.collar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_score_csv(out / "oracle_der.csv", per_file, macro)
    meta = {
        "kind": "oracle-eval",
        "window": model.config.window,
        "processing": model.config.processing,
        "loss_type": model.config.loss_type,
        "collar": args.collar,
        "macro_der": float(macro),
    }
    with open(out / "meta.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    print(f"oracle-stitched MACRO DER {macro:.3f} (window {model.config.window:g}s)")
    return 0


def make_clustering_objective(model, dataset, base_params: PipelineParams, collar: float = 0.0):
    """Closure for `tune`: window outputs and embeddings are computed once,
    each trial only re-runs clustering, aggregation and scoring."""
    cache = []
    table = model.config.table() if model.config.loss_type == "powerset" else None
    for rec_id, feats, ref in dataset:
        windows = segment_windows(model, feats, hop=base_params.hop)
        embeddings = window_embeddings(windows, feats, base_params.min_embed_duration)
        cache.append((rec_id, feats.frame_rate, windows, embeddings, ref))

    def evaluate(params: dict) -> float:
        pairs = {}
        for rec_id, frame_rate, windows, embeddings, ref in cache:
            if embeddings:
                ids = ahc_cluster(
                    np.stack([e.vector for e in embeddings]),
                    params["clustering_threshold"],
                    params["min_cluster_size"],
                )
                cluster_map = {(e.window_index, e.slot): int(c) for e, c in zip(embeddings, ids)}
            else:
                cluster_map = {}
            hyp = align_and_aggregate(
                windows, cluster_map, model.config.loss_type, frame_rate, table, rec_id
            )
            pairs[rec_id] = (ref, hyp)
        _, macro = der_corpus(pairs, collar=collar)
        return macro

    return evaluate


def cmd_tune(args) -> int:
    model = load_model(args.model)
    dataset = _require_references(load_dataset(args.data), args.data)
    base = _pipeline_params(args, model.config.window)
    evaluate = make_clustering_objective(model, dataset, base)
    space = SearchSpace(
        min_cluster_size_bounds=(1, max(1, min(30, args.max_cluster_size))),
    )
    best, trials = tune(evaluate, space, budget=args.budget, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_trials_csv(out / "trials.csv", trials)
    best_der = min(t.objective for t in trials if t.status == "ok")
    with open(out / "best.yaml", "w") as fh:
        yaml.safe_dump({"pipeline": {
            "clustering_threshold": best["clustering_threshold"],
            "min_cluster_size": best["min_cluster_size"],
            "hop": base.hop,
            "min_embed_duration": base.min_embed_duration,
        }, "der": float(best_der)}, fh, sort_keys=True)
    print(f"best DER {best_der:.3f} at threshold {best['clustering_threshold']:.3f}, "
          f"min_cluster_size {best['min_cluster_size']}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        meta_path = Path(run) / "meta.yaml"
        if not meta_path.exists():
            raise FileNotFoundError(f"{run}: meta.yaml not found (not an oracle-eval run?)")
        with open(meta_path) as fh:
            meta = yaml.safe_load(fh)
        rows.append(meta)
    rows.sort(key=lambda m: (m["processing"], m["loss_type"], m["window"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "oracle_der_vs_window.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "processing", "loss_type", "oracle_der"])
        for m in rows:
            writer.writerow([f"{m['window']:g}", m["processing"], m["loss_type"], f"{m['macro_der']:.6f}"])
    lines = [
        "# Oracle-stitched DER by window size",
        "",
        "| processing | loss type | window (s) | oracle DER |",
        "|---|---|---|---|",
    ]
    for m in rows:
        lines.append(
            f"| {m['processing']} | {m['loss_type']} | {m['window']:g} | {m['macro_der']:.3f} |"
        )
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(f"wrote report for {len(rows)} runs to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diarist", description=__doc__)
    parser.add_argument("--version", action="version", version=f"diarist {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-recordings", type=int, default=10)
    p.add_argument("--num-speakers", type=int, default=3)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--mean-turn", type=float, default=2.0)
    p.add_argument("--mean-pause", type=float, default=2.0)
    p.add_argument("--overlap-prob", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="synth")
    p.add_argument("--wav", action="store_true", help="also write 16-bit PCM audio")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="speaker capacity statistics for window sizing")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--rttm")
    group.add_argument("--data")
    p.add_argument("--window", type=float, default=10.0)
    p.add_argument("--coverage", type=float, default=0.97)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a segmentation model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fine-tune a model on a domain dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=0.00005)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--steps-per-epoch", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="diarize recordings to RTTM")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--features", help="single .feat or .wav file")
    group.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--hop", type=float, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-cluster-size", type=int, default=1)
    p.add_argument("--min-embed-duration", type=float, default=0.2)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="DER of hypothesis RTTM against reference RTTM")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--uem", default=None)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--min-duration", type=float, default=None,
                   help="exclude shorter files from the macro average")
    p.add_argument("--out", default=None, help="write per-file CSV here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("oracle-eval", help="segmentation quality via oracle stitching")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.set_defaults(func=cmd_oracle_eval)

    p = sub.add_parser("tune", help="random search over clustering parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hop", type=float, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-cluster-size", type=int, default=1)
    p.add_argument("--max-cluster-size", type=int, default=30)
    p.add_argument("--min-embed-duration", type=float, default=0.2)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("report", help="aggregate oracle-eval runs into a table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version, 2 for usage errors.
        return 0 if exc.code == 0 else 1
    torch.set_num_threads(1)  # keep runs bit-reproducible
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DiaristError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
