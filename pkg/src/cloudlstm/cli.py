"""Command-line entry point: generate, train, ablate, evaluate, visualize.

Configuration is a line-oriented key=value file merged with command-line
overrides (flags win). Every subcommand writes the fully resolved
configuration next to its outputs, so any run can be reproduced from the
files it leaves behind.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import convlstm, metrics, synthdata, train, viz

# key -> (type, default); this order is also the resolved-config file order.
CONFIG_SCHEMA = {
    "height": (int, 192),
    "width": (int, 192),
    "tile_size": (int, 24),
    "frames": (int, 30),
    "bands": (int, 4),
    "classes": (int, 6),
    "parcel_mean_size": (int, 32),
    "cloud_probability": (float, 0.7),
    "cloud_opacity": (float, 1.0),
    "noise_sigma": (float, 0.02),
    "block_size": (int, 96),
    "margin": (int, 12),
    "hidden_channels": (int, 32),
    "kernel_size": (int, 3),
    "standard_lstm_variant": (bool, False),
    "learning_rate": (float, 0.001),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "epsilon": (float, 1e-8),
    "epochs": (int, 30),
    "batch_size": (int, 4),
    "checkpoint_every": (int, 0),
    "thresholds": ("float_list", (1.01, 0.5, 0.25, 0.1, 0.0)),
    "seed": (int, 0),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    if key not in CONFIG_SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = CONFIG_SCHEMA[key][0]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "float_list":
            return tuple(float(v) for v in raw.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    raise ConfigError(f"unhandled kind for {key}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def load_config(path=None, overrides=None, seed=None) -> dict:
    """Defaults, then the config file, then --set pairs, then --seed."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            cfg[key.strip()] = _parse_value(key.strip(), value.strip())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key] = _parse_value(key, value)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_format_value(cfg[key])}" for key in CONFIG_SCHEMA]
    (out_dir / "run_config.txt").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8")


def _scene_config(cfg: dict) -> synthdata.SceneConfig:
    return synthdata.SceneConfig(
        height=cfg["height"], width=cfg["width"], tile_size=cfg["tile_size"],
        n_frames=cfg["frames"], n_bands=cfg["bands"], n_classes=cfg["classes"],
        parcel_mean_size=cfg["parcel_mean_size"],
        cloud_probability=cfg["cloud_probability"],
        cloud_opacity=cfg["cloud_opacity"], noise_sigma=cfg["noise_sigma"],
        seed=cfg["seed"])


def _train_config(cfg: dict, seed: int) -> train.TrainConfig:
    return train.TrainConfig(
        learning_rate=cfg["learning_rate"], beta1=cfg["beta1"],
        beta2=cfg["beta2"], epsilon=cfg["epsilon"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], seed=seed)


def _print_epoch(row: train.EpochMetrics) -> None:
    print(f"  epoch {row.epoch:3d}  loss {row.train_loss:.6f}  "
          f"val_acc {row.val_accuracy:.4f}  {row.wall_seconds:.2f}s")


def cmd_generate(cfg: dict, out: Path) -> int:
    scene = synthdata.generate_scene(_scene_config(cfg))
    assignment = synthdata.partition_blocks(
        cfg["height"], cfg["width"], cfg["tile_size"], cfg["block_size"],
        cfg["margin"], cfg["seed"])
    synthdata.write_dataset(out, scene, assignment)
    write_resolved_config(cfg, out)
    counts = scene.clouds.pixel_counts
    coverage = scene.clouds.coverage
    print(f"dataset written to {out}")
    print("frame\ttimestamp\tcloud_pixels\tcoverage")
    for t in range(cfg["frames"]):
        print(f"{t}\t{scene.sequence.timestamps[t]:.4f}\t{int(counts[t])}"
              f"\t{coverage[t]:.4f}")
    block_counts = assignment.counts()
    kept = {name: len(assignment.tiles(name)) for name in synthdata.PARTITION_NAMES}
    print(f"blocks: {block_counts}")
    print(f"tiles kept: {kept}")
    return 0


def cmd_train(cfg: dict, dataset_dir: Path, out: Path) -> int:
    ds = synthdata.read_dataset(dataset_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    print(f"training on {len(ds.partition('train'))} tiles "
          f"({len(ds.partition('valid'))} validation)")
    params, rows = train.train_loop(
        ds, _train_config(cfg, cfg["seed"]),
        hidden_channels=cfg["hidden_channels"], kernel_size=cfg["kernel_size"],
        standard_lstm_variant=cfg["standard_lstm_variant"],
        checkpoint_every=cfg["checkpoint_every"], checkpoint_dir=out,
        progress=_print_epoch)
    (out / "metrics.tsv").write_text(train.format_metrics(rows), encoding="utf-8")
    cell_cfg = convlstm.CellConfig(
        kernel_size=cfg["kernel_size"], in_channels=ds.n_bands,
        hidden_channels=cfg["hidden_channels"], height=ds.tile_size,
        width=ds.tile_size)
    convlstm.save_checkpoint(out / "checkpoint_final.clck", cell_cfg, params)
    print(f"final validation accuracy {rows[-1].val_accuracy:.4f}")
    return 0


def _threshold_tag(threshold: float) -> str:
    return f"cov{int(round(threshold * 100)):03d}"


def cmd_ablate(cfg: dict, dataset_dir: Path, out: Path) -> int:
    ds = synthdata.read_dataset(dataset_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    summary = ["threshold\tframes_kept\tfinal_val_accuracy"]
    for idx, threshold in enumerate(cfg["thresholds"]):
        kept = synthdata.frame_filter_indices(
            ds.cloud_pixel_counts, ds.height * ds.width, threshold)
        # Independent but reproducible runs: one seed offset per threshold.
        run_seed = cfg["seed"] + idx
        tag = _threshold_tag(threshold)
        print(f"[{tag}] threshold {threshold}: {kept.size}/{ds.n_frames} frames, "
              f"seed {run_seed}")
        started = time.perf_counter()
        params, rows = train.train_loop(
            ds, _train_config(cfg, run_seed),
            hidden_channels=cfg["hidden_channels"],
            kernel_size=cfg["kernel_size"],
            standard_lstm_variant=cfg["standard_lstm_variant"],
            frame_indices=kept, progress=_print_epoch)
        (out / f"metrics_{tag}.tsv").write_text(train.format_metrics(rows),
                                                encoding="utf-8")
        cell_cfg = convlstm.CellConfig(
            kernel_size=cfg["kernel_size"], in_channels=ds.n_bands,
            hidden_channels=cfg["hidden_channels"], height=ds.tile_size,
            width=ds.tile_size)
        convlstm.save_checkpoint(out / f"checkpoint_{tag}.clck", cell_cfg, params)
        summary.append(f"{threshold!r}\t{kept.size}\t{rows[-1].val_accuracy!r}")
        print(f"[{tag}] done in {time.perf_counter() - started:.1f}s, "
              f"final val_acc {rows[-1].val_accuracy:.4f}")
    (out / "summary.tsv").write_text("".join(line + "\n" for line in summary),
                                     encoding="utf-8")
    return 0


def cmd_evaluate(cfg: dict, dataset_dir: Path, checkpoint: Path, out: Path,
                 partition: str) -> int:
    ds = synthdata.read_dataset(dataset_dir)
    _, params = convlstm.load_checkpoint(checkpoint)
    tiles = ds.partition(partition)
    if not tiles:
        raise ValueError(f"dataset has no tiles in partition {partition!r}")
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    preds = [train.predict_tile(t.frames, params) for t in tiles]
    pred = np.concatenate([p.ravel() for p in preds])
    ref = np.concatenate([t.labels.ravel() for t in tiles])
    acc = metrics.overall_accuracy(pred, ref)
    conf = metrics.confusion(pred, ref, ds.n_classes)
    lines = [f"partition={partition}", f"tiles={len(tiles)}",
             f"overall_accuracy={acc!r}", "confusion:"]
    lines += ["\t".join(str(v) for v in row) for row in conf]
    (out / "evaluation.txt").write_text("".join(l + "\n" for l in lines),
                                        encoding="utf-8")
    print(f"{partition} accuracy over {len(tiles)} tiles: {acc:.4f}")
    return 0


def cmd_visualize(cfg: dict, dataset_dir: Path, checkpoint: Path, out: Path,
                  tile_id: str, channels, prefix: str) -> int:
    ds = synthdata.read_dataset(dataset_dir)
    _, params = convlstm.load_checkpoint(checkpoint)
    tile = ds.tile_by_id(tile_id)
    r = params.hidden_channels
    _, trace = convlstm.encode(tile.frames, params.forward, record_trace=True,
                               standard_lstm_variant=params.standard_lstm_variant)
    report = metrics.cloud_sensitivity(trace, tile.mask)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    (out / "cloud_sensitivity.tsv").write_text(report.format(), encoding="utf-8")
    if channels is None:
        selected = report.top_channels(3)
    else:
        selected = [int(v) for v in channels.split(",")]
        for ch in selected:
            if not 0 <= ch < r:
                raise ValueError(f"channel {ch} out of range, model has "
                                 f"{r} hidden channels")
    seq = synthdata.ImageSequence(frames=tile.frames,
                                  timestamps=ds.timestamps)
    steps = tuple(range(ds.n_frames))
    for ch in selected:
        spec = viz.PanelSpec(rows=(("input", 0), ("i", ch), ("j", ch), ("c", ch)),
                             timesteps=steps)
        image = viz.render_panel(trace, seq, spec)
        name = viz.panel_filename(prefix, ch, steps)
        viz.write_image(image, out / name)
        print(f"wrote {out / name}")
    print(f"cloud-sensitivity ranking (top 5): {report.top_channels(5)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudlstm",
        description="Cloud-robust convolutional LSTM experiments on synthetic "
                    "satellite time series")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="key=value configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       dest="overrides", help="override one configuration key")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("generate", help="build a synthetic dataset directory")
    common(p)

    p = sub.add_parser("train", help="train on a dataset's train partition")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("ablate", help="train once per coverage threshold")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on one partition")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--partition", default="eval",
                   choices=synthdata.PARTITION_NAMES)

    p = sub.add_parser("visualize",
                       help="gate-activation panels and cloud-sensitivity report")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--tile", required=True, help="tile id, e.g. r001c002")
    p.add_argument("--channels", help="comma-separated channel list "
                                      "(default: top 3 by cloud sensitivity)")
    p.add_argument("--prefix", default="panel")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.out)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.dataset, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.dataset, args.checkpoint, args.out,
                                args.partition)
        if args.command == "visualize":
            return cmd_visualize(cfg, args.dataset, args.checkpoint, args.out,
                                 args.tile, args.channels, args.prefix)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
